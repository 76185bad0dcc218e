//! Geometry of the perturbed sphere family e(s, Y, f): points, unit normals,
//! mean curvature, the variation field, the forced-MCF operator Φ and the
//! Area − Volume functional.
//!
//! Everything is evaluated in ambient coordinates. For a time sample t the
//! chart map of the normal chart at γ(t) (frame E(t)) is
//! X_t(z) = Exp_{γ(t)}(E(t) z); the immersion at a sphere node x is
//!
//!   F = Exp_q(J · s(1 + s² f(t, x)) x),   q = X_t(sY(t)),  J = dX_t(sY(t)),
//!
//! which is the ambient image of Exp_{g_t}(sY, s(1 + s²f)x). Tangent vectors
//! and second derivatives come from jets in the gnomonic sphere chart u about
//! the node; the time dependence (needed for the variation field) is carried
//! by one more jet variable r, with γ, E, Y and f advanced to first order in r.
//! Mean curvature uses the averaged convention: H = −(1/m) h^{αβ} II_αβ with
//! the outward unit normal, so the round sphere of radius s has H = 1/s.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flowline::FlowLine;
use crate::jet::{jet_space, Jet, Scalar};
use crate::metric::{Chart, MetricField, MAX_DIM};
use crate::ode::Extrapolation;
use crate::par;
use crate::sphere::{gauss_legendre, BandBasis, SpaceTimeField};

/// A candidate (s, Y, f): centre displacements Y (frame components, one vector
/// per time sample) and the graph function f as band coefficients.
///
/// `rate_scale` multiplies ∂_t f wherever it enters. It is 1 for genuine
/// evaluations; coefficient extraction evaluates at auxiliary scales σ with
/// rate_scale = (s/σ)⁴ so that the s⁴∂_t f term keeps its value at s.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub s: f64,
    pub y: Vec<Vec<f64>>,
    pub f: SpaceTimeField,
    pub rate_scale: f64,
}

impl Candidate {
    pub fn zero(s: f64, nt: usize, n: usize, nb: usize) -> Self {
        Candidate { s, y: vec![vec![0.0; n]; nt], f: SpaceTimeField::zeros(nt, nb), rate_scale: 1.0 }
    }
}

/// Per-time chart data: q(r) = q0 + r q1 and J(r) = J0 + r J1.
#[derive(Clone, Copy, Debug)]
struct TimeChart {
    q0: [f64; MAX_DIM],
    q1: [f64; MAX_DIM],
    j0: [[f64; MAX_DIM]; MAX_DIM],
    j1: [[f64; MAX_DIM]; MAX_DIM],
}

/// Geometric data of the immersed sphere at one node.
#[derive(Clone, Debug)]
pub struct NodeGeometry {
    pub point: Vec<f64>,
    /// Tangent vectors ∂_α F (ambient components).
    pub tangents: Vec<Vec<f64>>,
    /// Outward unit normal (ambient components).
    pub normal: Vec<f64>,
    pub mean_curvature: f64,
    /// Variation field V (ambient components).
    pub variation: Vec<f64>,
    pub normal_speed: f64,
    pub phi: f64,
    /// Induced area density √det h relative to the round unit sphere.
    pub area_density: f64,
}

/// Φ sampled on TimeGrid × SphereGrid (row-major: time × node).
#[derive(Clone, Debug)]
pub struct PhiField {
    pub nt: usize,
    pub nn: usize,
    pub values: Vec<f64>,
}

impl PhiField {
    pub fn at(&self, t: usize) -> &[f64] {
        &self.values[t * self.nn..(t + 1) * self.nn]
    }
    /// Band coefficients per time.
    pub fn spectrum(&self, basis: &BandBasis) -> SpaceTimeField {
        let mut out = SpaceTimeField::zeros(self.nt, basis.len());
        for t in 0..self.nt {
            out.at_mut(t).copy_from_slice(&basis.analyze(self.at(t)));
        }
        out
    }
    /// Sup norm over the listed time samples.
    pub fn sup_over(&self, times: &[usize]) -> f64 {
        times.iter().flat_map(|&t| self.at(t).iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Evaluator of the immersion family along a flow line.
pub struct Immersion<'a> {
    pub metric: &'a MetricField,
    pub line: &'a FlowLine,
    pub basis: &'a BandBasis,
    pub ode: Extrapolation,
    deriv: DMatrix<f64>,
}

fn det(a: &[[f64; MAX_DIM]; MAX_DIM], n: usize) -> f64 {
    DMatrix::from_fn(n, n, |i, j| a[i][j]).determinant()
}

impl<'a> Immersion<'a> {
    pub fn new(metric: &'a MetricField, line: &'a FlowLine, basis: &'a BandBasis) -> Result<Self> {
        if metric.m() != basis.m || line.m != basis.m {
            return Err(Error::Input("metric, flow line and sphere basis dimensions differ".into()));
        }
        Ok(Immersion { metric, line, basis, ode: Extrapolation::with_tol(1e-13), deriv: line.grid.derivative_matrix() })
    }

    pub fn nt(&self) -> usize {
        self.line.len()
    }
    pub fn n(&self) -> usize {
        self.metric.dim()
    }

    /// Time derivative of a vector series.
    pub fn series_rate(&self, y: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let nt = self.nt();
        let n = y[0].len();
        (0..nt)
            .map(|t| (0..n).map(|i| (0..nt).map(|k| self.deriv[(t, k)] * y[k][i]).sum()).collect())
            .collect()
    }

    /// Time derivative of a band-coefficient field.
    pub fn field_rate(&self, f: &SpaceTimeField) -> SpaceTimeField {
        let mut out = SpaceTimeField::zeros(f.nt, f.nb);
        for t in 0..f.nt {
            for k in 0..f.nt {
                let d = self.deriv[(t, k)];
                if d == 0.0 {
                    continue;
                }
                for j in 0..f.nb {
                    out.at_mut(t)[j] += d * f.at(k)[j];
                }
            }
        }
        out
    }

    fn time_chart(&self, t: usize, s: f64, y: &[f64], ydot: &[f64]) -> Result<TimeChart> {
        let n = self.n();
        let sp = jet_space(n + 1, 2);
        let line = self.line;
        let r: Jet<21> = Jet::var(sp, n, 0.0);
        let mut x = [r.zero_like(); MAX_DIM];
        let mut vel = [r.zero_like(); MAX_DIM];
        let mut z = [r.zero_like(); MAX_DIM];
        for a in 0..n {
            z[a] = Jet::var(sp, a, 0.0) + r * (s * ydot[a]) + s * y[a];
        }
        for i in 0..n {
            x[i] = r * line.velocity[t][i] + line.points[t][i];
            for a in 0..n {
                vel[i] += (r * line.frame_rates[t][(i, a)] + line.frames[t][(i, a)]) * z[a];
            }
        }
        let (p, _) = self.metric.geodesic(&x, &vel, &self.ode)?;
        let mut tc = TimeChart { q0: [0.0; MAX_DIM], q1: [0.0; MAX_DIM], j0: [[0.0; MAX_DIM]; MAX_DIM], j1: [[0.0; MAX_DIM]; MAX_DIM] };
        for i in 0..n {
            tc.q0[i] = p[i].re();
            tc.q1[i] = p[i].d1(n);
            for j in 0..n {
                tc.j0[i][j] = p[i].d1(j);
                tc.j1[i][j] = p[i].d2(j, n);
            }
        }
        Ok(tc)
    }

    /// Graph function value, sphere gradient/Hessian and time rate at a node.
    fn graph_data(&self, k: usize, coef: &[f64], rate: &[f64]) -> (f64, [f64; 3], [[f64; 3]; 3], f64) {
        let mut v = 0.0;
        let mut g = [0.0; 3];
        let mut h = [[0.0; 3]; 3];
        let mut d = 0.0;
        for j in 0..coef.len() {
            let nj = self.basis.node_jet(k, j);
            let c = coef[j];
            d += rate[j] * nj.value;
            if c == 0.0 {
                continue;
            }
            v += c * nj.value;
            for a in 0..3 {
                g[a] += c * nj.grad[a];
                for b in 0..3 {
                    h[a][b] += c * nj.hess[a][b];
                }
            }
        }
        (v, g, h, d)
    }

    fn node<const N: usize>(&self, tc: &TimeChart, k: usize, s: f64, fd: (f64, [f64; 3], [[f64; 3]; 3], f64)) -> Result<NodeGeometry> {
        let m = self.basis.m;
        let n = m + 1;
        let sp = jet_space(n, 2);
        let r: Jet<N> = Jet::var(sp, m, 0.0);
        let u: Vec<Jet<N>> = (0..m).map(|a| Jet::var(sp, a, 0.0)).collect();
        let x = self.basis.chart_point(k, &u);
        let (fv, fg, fh, fdot) = fd;
        let mut fj = r * fdot + fv;
        for a in 0..m {
            fj += u[a] * fg[a];
            for b in 0..m {
                fj += u[a] * u[b] * (0.5 * fh[a][b]);
            }
        }
        let radial = (fj * (s * s) + 1.0) * s;
        let zero = r.zero_like();
        let mut q = [zero; MAX_DIM];
        let mut w = [zero; MAX_DIM];
        for i in 0..n {
            q[i] = r * tc.q1[i] + tc.q0[i];
            let mut acc = zero;
            for j in 0..n {
                acc += (r * tc.j1[i][j] + tc.j0[i][j]) * x[j];
            }
            w[i] = acc * radial;
        }
        let (fpt, _) = self.metric.geodesic(&q, &w, &self.ode)?;
        let p: Vec<f64> = (0..n).map(|i| fpt[i].re()).collect();
        let psi = self.metric.psi(&p);
        let e2 = (2.0 * psi).exp();
        let mut dpsi = [0.0; MAX_DIM];
        self.metric.grad_psi(&p, &mut dpsi);
        let tang: Vec<Vec<f64>> = (0..m).map(|a| (0..n).map(|i| fpt[i].d1(a)).collect()).collect();
        // normal covector by cofactor expansion: ν_i = det[e_i; T_1; …; T_m]
        let mut nu = vec![0.0; n];
        for (i, nui) in nu.iter_mut().enumerate() {
            let mut mat = [[0.0; MAX_DIM]; MAX_DIM];
            mat[0][i] = 1.0;
            for a in 0..m {
                for l in 0..n {
                    mat[a + 1][l] = tang[a][l];
                }
            }
            *nui = det(&mat, n);
        }
        let outward: f64 = (0..n).map(|i| nu[i] * (p[i] - tc.q0[i])).sum();
        let sign = if outward < 0.0 { -1.0 } else { 1.0 };
        let nn = nu.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nn < 1e-300 {
            return Err(Error::Numerical("degenerate immersion (tangent vectors dependent)".into()));
        }
        let normal: Vec<f64> = nu.iter().map(|v| sign * v * (-psi).exp() / nn).collect();
        let mut h = DMatrix::zeros(m, m);
        let mut ii = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in 0..m {
                h[(a, b)] = e2 * (0..n).map(|i| tang[a][i] * tang[b][i]).sum::<f64>();
                let mut gam = [0.0; MAX_DIM];
                self.metric.christoffel_contract(&dpsi, &tang[a], &tang[b], &mut gam);
                ii[(a, b)] = e2 * (0..n).map(|i| (fpt[i].d2(a, b) + gam[i]) * normal[i]).sum::<f64>();
            }
        }
        let hinv = h.clone().try_inverse().ok_or_else(|| Error::Numerical("degenerate induced metric".into()))?;
        let mean_curvature = -(hinv.component_mul(&ii.transpose())).sum() / m as f64;
        let variation: Vec<f64> = (0..n).map(|i| -fpt[i].d1(m)).collect();
        let normal_speed = e2 * (0..n).map(|i| variation[i] * normal[i]).sum::<f64>();
        let phi = (mean_curvature - 1.0 / s) / s + s * normal_speed;
        Ok(NodeGeometry {
            point: p,
            tangents: tang,
            normal,
            mean_curvature,
            variation,
            normal_speed,
            phi,
            area_density: h.determinant().sqrt(),
        })
    }

    fn node_dispatch(&self, tc: &TimeChart, k: usize, s: f64, fd: (f64, [f64; 3], [[f64; 3]; 3], f64)) -> Result<NodeGeometry> {
        match self.basis.m {
            1 => self.node::<6>(tc, k, s, fd),
            2 => self.node::<10>(tc, k, s, fd),
            _ => self.node::<15>(tc, k, s, fd),
        }
    }

    fn check(&self, c: &Candidate) -> Result<()> {
        let nt = self.nt();
        if c.y.len() != nt || c.f.nt != nt || c.f.nb != self.basis.len() {
            return Err(Error::Input("candidate shape does not match the grids".into()));
        }
        if !(c.s > 0.0) {
            return Err(Error::Input("scale s must be positive".into()));
        }
        Ok(())
    }

    /// Geometry at every node of time sample `t`.
    pub fn geometry_at(&self, c: &Candidate, t: usize) -> Result<Vec<NodeGeometry>> {
        self.check(c)?;
        let ydot = self.series_rate(&c.y);
        let fdot = self.field_rate(&c.f).scaled(c.rate_scale);
        self.geometry_inner(c, t, &ydot[t], fdot.at(t))
    }

    fn geometry_inner(&self, c: &Candidate, t: usize, ydot: &[f64], fdot: &[f64]) -> Result<Vec<NodeGeometry>> {
        let tc = self.time_chart(t, c.s, &c.y[t], ydot)?;
        let coef = c.f.at(t);
        (0..self.basis.nodes())
            .map(|k| {
                let fd = self.graph_data(k, coef, fdot);
                if 1.0 + c.s * c.s * fd.0 <= 0.0 {
                    return Err(Error::Domain("graph function makes the radius non-positive".into()));
                }
                self.node_dispatch(&tc, k, c.s, fd)
            })
            .collect()
    }

    /// Φ(s, Y, f) on the listed time samples (all samples when `times` is None).
    pub fn phi(&self, c: &Candidate, times: Option<&[usize]>) -> Result<PhiField> {
        self.check(c)?;
        let nt = self.nt();
        let nn = self.basis.nodes();
        let ydot = self.series_rate(&c.y);
        let fdot = self.field_rate(&c.f).scaled(c.rate_scale);
        let all: Vec<usize> = (0..nt).collect();
        let sel = times.unwrap_or(&all);
        let rows = par::try_map(sel.len(), |i| {
            let t = sel[i];
            let geo = self.geometry_inner(c, t, &ydot[t], fdot.at(t))?;
            Ok(geo.iter().map(|g| g.phi).collect::<Vec<f64>>())
        })?;
        let mut values = vec![0.0; nt * nn];
        for (i, row) in rows.into_iter().enumerate() {
            values[sel[i] * nn..(sel[i] + 1) * nn].copy_from_slice(&row);
        }
        Ok(PhiField { nt, nn, values })
    }

    /// Area, enclosed volume and F = Area − Volume/s at time sample `t`.
    pub fn area_volume(&self, c: &Candidate, t: usize, radial_points: usize) -> Result<(f64, f64, f64)> {
        self.check(c)?;
        let n = self.n();
        let m = self.basis.m;
        let ydot = self.series_rate(&c.y);
        let tc = self.time_chart(t, c.s, &c.y[t], &ydot[t])?;
        let coef = c.f.at(t);
        let zero_rate = vec![0.0; coef.len()];
        let (rho, wr) = gauss_legendre(radial_points);
        let sp = jet_space(n, 1);
        let mut area = 0.0;
        let mut volume = 0.0;
        for k in 0..self.basis.nodes() {
            let fd = self.graph_data(k, coef, &zero_rate);
            let geo = self.node_dispatch(&tc, k, c.s, fd)?;
            let wk = self.basis.grid.weights[k];
            area += wk * geo.area_density;
            let u: Vec<Jet<5>> = (0..m).map(|a| Jet::var(sp, a, 0.0)).collect();
            let x = self.basis.chart_point(k, &u);
            let mut fj = u[0].cst(fd.0);
            for a in 0..m {
                fj += u[a] * fd.1[a];
            }
            for (z, wz) in rho.iter().zip(&wr) {
                let rr = 0.5 * (z + 1.0);
                let rv: Jet<5> = Jet::var(sp, m, rr);
                let radial = (fj * (c.s * c.s) + 1.0) * rv * c.s;
                let zero = rv.zero_like();
                let mut q = [zero; MAX_DIM];
                let mut w = [zero; MAX_DIM];
                for i in 0..n {
                    q[i] = zero + tc.q0[i];
                    let mut acc = zero;
                    for j in 0..n {
                        acc += x[j] * tc.j0[i][j];
                    }
                    w[i] = acc * radial;
                }
                let (fpt, _) = self.metric.geodesic(&q, &w, &self.ode)?;
                let p: Vec<f64> = (0..n).map(|i| fpt[i].re()).collect();
                let mut jac = [[0.0; MAX_DIM]; MAX_DIM];
                for i in 0..n {
                    for v in 0..n {
                        jac[i][v] = fpt[i].d1(v);
                    }
                }
                let dens = det(&jac, n).abs() * (n as f64 * self.metric.psi(&p)).exp();
                volume += wk * 0.5 * wz * dens;
            }
        }
        Ok((area, volume, area - volume / c.s))
    }
}

/// Mean curvature by the level-set formula in the normal chart at γ(t)
/// (centre displacement zero): the hypersurface is {f̂ = 0} with
/// f̂(y) = |y| − s(1 + s² f(y/|y|)), and
/// H = (1/m)[Δf̂/|∇f̂| − ∇²f̂(∇f̂, ∇f̂)/|∇f̂|³] in the pulled-back metric.
pub fn level_set_mean_curvature(chart: &Chart, basis: &BandBasis, coef: &[f64], s: f64, y: &[f64]) -> Result<f64> {
    let n = chart.metric.dim();
    let m = n - 1;
    let a: Vec<Jet<15>> = chart.metric_jets(y, 1)?;
    let sp = jet_space(n, 2);
    let z: Vec<Jet<15>> = (0..n).map(|i| Jet::var(sp, i, y[i])).collect();
    let mut r2 = z[0].zero_like();
    for zi in &z {
        r2 += *zi * *zi;
    }
    let rad = r2.sqrt();
    let dir: Vec<Jet<15>> = z.iter().map(|v| *v / rad).collect();
    let vals = basis.eval_at(&dir);
    let mut f = z[0].zero_like();
    for (c, v) in coef.iter().zip(&vals) {
        f += *v * *c;
    }
    let fhat = rad - (f * (s * s) + 1.0) * s;
    let amat = DMatrix::from_fn(n, n, |i, j| a[i * n + j].re());
    let ainv = amat.clone().try_inverse().ok_or_else(|| Error::Numerical("singular chart metric".into()))?;
    // Γ^k_ij at y
    let mut gam = vec![0.0; n * n * n];
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..n {
                    acc += ainv[(k, l)] * (a[j * n + l].d1(i) + a[i * n + l].d1(j) - a[i * n + j].d1(l));
                }
                gam[(k * n + i) * n + j] = 0.5 * acc;
            }
        }
    }
    let grad: Vec<f64> = (0..n).map(|i| fhat.d1(i)).collect();
    let hess = DMatrix::from_fn(n, n, |i, j| fhat.d2(i, j) - (0..n).map(|k| gam[(k * n + i) * n + j] * grad[k]).sum::<f64>());
    let gvec = DVector::from_vec(grad.clone());
    let up = &ainv * &gvec;
    let norm2 = gvec.dot(&up);
    let norm = norm2.sqrt();
    let lap = (ainv.component_mul(&hess)).sum();
    let quad = (up.transpose() * &hess * &up)[0];
    Ok((lap / norm - quad / (norm2 * norm)) / m as f64)
}
