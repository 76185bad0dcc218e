//! Analytic conformally flat metrics, curvature jets, geodesics and normal charts.
//!
//! Every supported family is of the form `g = e^{2ψ} δ` on (a domain of)
//! R^(m+1): the flat metric (ψ = 0), the stereographic space forms
//! (ψ = ln 2 − ln(1 + κ|x|²)) and sums of polynomial × Gaussian bumps.
//! Derivatives are exact: everything is written against [`Scalar`] and
//! evaluated on jets when derivatives are required.
//!
//! Riemann convention: `riemann[p][j][q][i]` is the i-th component of
//! `R(∂_p, ∂_j)∂_q` with `R(X,Y) = ∇_X∇_Y − ∇_Y∇_X − ∇_[X,Y]`. With this
//! ordering the pulled-back metric in normal coordinates satisfies
//! `A_ij = δ_ij + (1/3) R_{pjq}^i x^p x^q + O(x³)` (locked by tests).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::{jet_space, Jet, Scalar};
use crate::ode::Extrapolation;

/// Maximum ambient dimension (m ≤ 3).
pub const MAX_DIM: usize = 4;

/// One term `Σ c · (x − center)^pow · exp(−|x − center|² / (2 width²))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Vec<f64>,
    pub width: f64,
    /// Polynomial factor as `(coefficient, exponents)` pairs.
    pub poly: Vec<(f64, Vec<u32>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MetricFamily {
    Euclidean,
    /// Stereographic model of constant sectional curvature `kappa`.
    SpaceForm { kappa: f64 },
    /// `ψ` given as a sum of polynomial × Gaussian bumps.
    Conformal { bumps: Vec<Bump> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricField {
    dim: usize,
    family: MetricFamily,
    /// Euclidean radius of the chart domain (None = all of R^(m+1)).
    domain_radius: Option<f64>,
}

fn powi<T: Scalar>(x: T, k: u32) -> T {
    let mut acc = x.cst(1.0);
    for _ in 0..k {
        acc = acc * x;
    }
    acc
}

impl MetricField {
    pub fn new(m: usize, family: MetricFamily, domain_radius: Option<f64>) -> Result<Self> {
        let dim = m + 1;
        if !(1..=3).contains(&m) {
            return Err(Error::Unsupported(format!("sphere dimension m = {m} (supported: 1, 2, 3)")));
        }
        let mut domain = domain_radius;
        match &family {
            MetricFamily::Euclidean => {}
            MetricFamily::SpaceForm { kappa } => {
                if !kappa.is_finite() {
                    return Err(Error::Input("space form curvature must be finite".into()));
                }
                if *kappa < 0.0 {
                    let r = 1.0 / (-kappa).sqrt();
                    domain = Some(domain.map_or(0.999 * r, |d| d.min(0.999 * r)));
                }
            }
            MetricFamily::Conformal { bumps } => {
                for b in bumps {
                    if b.center.len() != dim {
                        return Err(Error::Input(format!(
                            "bump centre has {} coordinates, expected {dim}",
                            b.center.len()
                        )));
                    }
                    if !(b.width > 0.0) {
                        return Err(Error::Input("bump width must be positive".into()));
                    }
                    if b.poly.iter().any(|(_, e)| e.len() != dim) {
                        return Err(Error::Input(format!("bump exponents must have {dim} entries")));
                    }
                }
            }
        }
        Ok(MetricField { dim, family, domain_radius: domain })
    }

    pub fn euclidean(m: usize) -> Self {
        Self::new(m, MetricFamily::Euclidean, None).expect("valid dimension")
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }
    #[inline]
    pub fn m(&self) -> usize {
        self.dim - 1
    }
    pub fn family(&self) -> &MetricFamily {
        &self.family
    }
    pub fn domain_radius(&self) -> Option<f64> {
        self.domain_radius
    }

    pub fn is_flat(&self) -> bool {
        match &self.family {
            MetricFamily::Euclidean => true,
            MetricFamily::SpaceForm { kappa } => *kappa == 0.0,
            MetricFamily::Conformal { bumps } => bumps.iter().all(|b| b.poly.iter().all(|(c, _)| *c == 0.0)),
        }
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        let r2: f64 = x.iter().take(self.dim).map(|v| v * v).sum();
        x.iter().take(self.dim).all(|v| v.is_finite()) && self.domain_radius.is_none_or(|r| r2 < r * r)
    }

    fn check_domain(&self, x: &[f64]) -> Result<()> {
        if self.in_domain(x) {
            Ok(())
        } else {
            Err(Error::Domain(format!("point {:?} outside chart domain", &x[..self.dim])))
        }
    }

    /// Conformal exponent ψ at `x`.
    pub fn psi<T: Scalar>(&self, x: &[T]) -> T {
        let n = self.dim;
        let zero = x[0].zero_like();
        match &self.family {
            MetricFamily::Euclidean => zero,
            MetricFamily::SpaceForm { kappa } => {
                let mut r2 = zero;
                for v in x.iter().take(n) {
                    r2 += *v * *v;
                }
                (r2 * *kappa + 1.0).ln() * -1.0 + std::f64::consts::LN_2
            }
            MetricFamily::Conformal { bumps } => {
                let mut acc = zero;
                for b in bumps {
                    let mut d = [zero; MAX_DIM];
                    let mut r2 = zero;
                    for i in 0..n {
                        d[i] = x[i] - b.center[i];
                        r2 += d[i] * d[i];
                    }
                    let gauss = (r2 * (-0.5 / (b.width * b.width))).exp();
                    let mut p = zero;
                    for (c, e) in &b.poly {
                        let mut term = x[0].cst(*c);
                        for i in 0..n {
                            if e[i] > 0 {
                                term = term * powi(d[i], e[i]);
                            }
                        }
                        p += term;
                    }
                    acc += p * gauss;
                }
                acc
            }
        }
    }

    /// Euclidean gradient of ψ at `x`, written into `out[..dim]`.
    pub fn grad_psi<T: Scalar>(&self, x: &[T], out: &mut [T]) {
        let n = self.dim;
        let zero = x[0].zero_like();
        for o in out.iter_mut().take(n) {
            *o = zero;
        }
        match &self.family {
            MetricFamily::Euclidean => {}
            MetricFamily::SpaceForm { kappa } => {
                let mut r2 = zero;
                for v in x.iter().take(n) {
                    r2 += *v * *v;
                }
                let f = (r2 * *kappa + 1.0).recip() * (-2.0 * kappa);
                for i in 0..n {
                    out[i] = f * x[i];
                }
            }
            MetricFamily::Conformal { bumps } => {
                for b in bumps {
                    let w2 = b.width * b.width;
                    let mut d = [zero; MAX_DIM];
                    let mut r2 = zero;
                    for i in 0..n {
                        d[i] = x[i] - b.center[i];
                        r2 += d[i] * d[i];
                    }
                    let gauss = (r2 * (-0.5 / w2)).exp();
                    let mut p = zero;
                    let mut dp = [zero; MAX_DIM];
                    for (c, e) in &b.poly {
                        // powers d_i^{e_i} and d_i^{e_i - 1}
                        let mut pw = [zero; MAX_DIM];
                        let mut pwm = [zero; MAX_DIM];
                        for i in 0..n {
                            pw[i] = powi(d[i], e[i]);
                            pwm[i] = if e[i] > 0 { powi(d[i], e[i] - 1) * e[i] as f64 } else { zero };
                        }
                        let mut term = x[0].cst(*c);
                        for v in pw.iter().take(n) {
                            term = term * *v;
                        }
                        p += term;
                        for j in 0..n {
                            if e[j] == 0 {
                                continue;
                            }
                            let mut t = x[0].cst(*c) * pwm[j];
                            for i in 0..n {
                                if i != j {
                                    t = t * pw[i];
                                }
                            }
                            dp[j] += t;
                        }
                    }
                    for i in 0..n {
                        out[i] += (dp[i] - p * d[i] / w2) * gauss;
                    }
                }
            }
        }
    }

    /// Γ(v, w)^k = (∇ψ·v) w^k + (∇ψ·w) v^k − (v·w) ∇ψ^k for `g = e^{2ψ}δ`.
    #[inline]
    pub fn christoffel_contract<T: Scalar>(&self, dpsi: &[T], v: &[T], w: &[T], out: &mut [T]) {
        let n = self.dim;
        let mut pv = dpsi[0] * v[0];
        let mut pw = dpsi[0] * w[0];
        let mut vw = v[0] * w[0];
        for i in 1..n {
            pv += dpsi[i] * v[i];
            pw += dpsi[i] * w[i];
            vw += v[i] * w[i];
        }
        for k in 0..n {
            out[k] = pv * w[k] + pw * v[k] - vw * dpsi[k];
        }
    }

    /// Metric matrix g_ij at `x`.
    pub fn metric_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let e = (2.0 * self.psi(x)).exp();
        DMatrix::identity(self.dim, self.dim) * e
    }

    /// g-inner product at `x`.
    pub fn inner<T: Scalar>(&self, x: &[T], u: &[T], v: &[T]) -> T {
        let e = (self.psi(x) * 2.0).exp();
        let mut s = u[0] * v[0];
        for i in 1..self.dim {
            s += u[i] * v[i];
        }
        e * s
    }

    /// Jets of the metric components g_ij about `x` to total `degree`.
    pub fn metric_jets<const N: usize>(&self, x: &[f64], degree: usize) -> Result<Vec<Jet<N>>> {
        self.check_domain(x)?;
        let n = self.dim;
        let sp = jet_space(n, degree);
        let xs: Vec<Jet<N>> = (0..n).map(|i| Jet::var(sp, i, x[i])).collect();
        let e = (self.psi(&xs) * 2.0).exp();
        let zero = Jet::constant(sp, 0.0);
        Ok((0..n * n).map(|k| if k / n == k % n { e } else { zero }).collect())
    }

    /// Geodesic from `x` with initial velocity `v`, integrated over unit
    /// parameter time. Returns the endpoint and the final velocity.
    pub fn geodesic<T: Scalar>(
        &self,
        x: &[T],
        v: &[T],
        ode: &Extrapolation,
    ) -> Result<([T; MAX_DIM], [T; MAX_DIM])> {
        let n = self.dim;
        let zero = x[0].zero_like();
        let mut y = [zero; 2 * MAX_DIM];
        y[..n].copy_from_slice(&x[..n]);
        y[MAX_DIM..MAX_DIM + n].copy_from_slice(&v[..n]);
        let rhs = |_t: f64, y: &[T; 2 * MAX_DIM]| -> Result<[T; 2 * MAX_DIM]> {
            let mut pos = [0.0; MAX_DIM];
            for i in 0..n {
                pos[i] = y[i].re();
            }
            self.check_domain(&pos)?;
            let mut dpsi = [zero; MAX_DIM];
            self.grad_psi(&y[..n], &mut dpsi);
            let mut acc = [zero; MAX_DIM];
            self.christoffel_contract(&dpsi, &y[MAX_DIM..MAX_DIM + n], &y[MAX_DIM..MAX_DIM + n], &mut acc);
            let mut out = [zero; 2 * MAX_DIM];
            for i in 0..n {
                out[i] = y[MAX_DIM + i];
                out[MAX_DIM + i] = -acc[i];
            }
            Ok(out)
        };
        // Active components are the first n and the block at MAX_DIM; the
        // integrator touches the whole packed prefix.
        let yend = ode.integrate(rhs, y, MAX_DIM + n, 0.0, 1.0)?;
        let mut p = [zero; MAX_DIM];
        let mut w = [zero; MAX_DIM];
        p[..n].copy_from_slice(&yend[..n]);
        w[..n].copy_from_slice(&yend[MAX_DIM..MAX_DIM + n]);
        Ok((p, w))
    }

    /// Exp(x, y).
    pub fn exp_map(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_domain(x)?;
        let (p, _) = self.geodesic(x, y, &Extrapolation::default())?;
        Ok(p[..self.dim].to_vec())
    }

    /// Parallel transport of `u` along τ ↦ Exp(x, τ y), τ ∈ [0, 1].
    pub fn parallel_transport(&self, x: &[f64], y: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_domain(x)?;
        let n = self.dim;
        let mut s = [0.0; 3 * MAX_DIM];
        s[..n].copy_from_slice(&x[..n]);
        s[MAX_DIM..MAX_DIM + n].copy_from_slice(&y[..n]);
        s[2 * MAX_DIM..2 * MAX_DIM + n].copy_from_slice(&u[..n]);
        let rhs = |_t: f64, s: &[f64; 3 * MAX_DIM]| -> Result<[f64; 3 * MAX_DIM]> {
            self.check_domain(&s[..n])?;
            let mut dpsi = [0.0; MAX_DIM];
            self.grad_psi(&s[..n], &mut dpsi);
            let mut acc = [0.0; MAX_DIM];
            let mut tr = [0.0; MAX_DIM];
            let v = &s[MAX_DIM..MAX_DIM + n];
            self.christoffel_contract(&dpsi, v, v, &mut acc);
            self.christoffel_contract(&dpsi, v, &s[2 * MAX_DIM..2 * MAX_DIM + n], &mut tr);
            let mut out = [0.0; 3 * MAX_DIM];
            for i in 0..n {
                out[i] = s[MAX_DIM + i];
                out[MAX_DIM + i] = -acc[i];
                out[2 * MAX_DIM + i] = -tr[i];
            }
            Ok(out)
        };
        let e = Extrapolation::default().integrate(rhs, s, 2 * MAX_DIM + n, 0.0, 1.0)?;
        Ok(e[2 * MAX_DIM..2 * MAX_DIM + n].to_vec())
    }

    /// Orthonormal frame aligned with the coordinate axes at `x`.
    pub fn coordinate_frame(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) * (-self.psi(x)).exp()
    }

    /// Normalized scalar curvature and its coordinate gradient at `x`.
    pub fn scalar_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_domain(x)?;
        let n = self.dim;
        let sp = jet_space(n, 3);
        let xs: Vec<Jet<35>> = (0..n).map(|i| Jet::var(sp, i, x[i])).collect();
        let s = self.scalar_jet(&xs);
        Ok((s.re(), (0..n).map(|i| s.d1(i)).collect()))
    }

    /// Normalized scalar curvature as a jet: for g = e^{2ψ}δ in dimension
    /// n = m+1, S_std = −e^{−2ψ}(2(n−1)Δψ + (n−1)(n−2)|∇ψ|²), S = S_std/(m(m+1)).
    /// The jet degree drops by two.
    pub fn scalar_jet<const N: usize>(&self, xs: &[Jet<N>]) -> Jet<N> {
        let n = self.dim;
        let m = n - 1;
        let psi = self.psi(xs);
        let mut lap = psi.zero_like();
        let mut grad2 = psi.zero_like();
        for i in 0..n {
            let d = psi.diff(i);
            lap += d.diff(i);
            grad2 += d * d;
        }
        let nf = n as f64;
        let s_std = (psi * -2.0).exp() * (lap * (2.0 * (nf - 1.0)) + grad2 * ((nf - 1.0) * (nf - 2.0))) * -1.0;
        s_std / (m as f64 * (m as f64 + 1.0))
    }
}

/// Dense tensor of given rank over R^n (flat row-major storage).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub n: usize,
    pub rank: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, rank: usize) -> Self {
        Tensor { n, rank, data: vec![0.0; n.pow(rank as u32)] }
    }
    #[inline]
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[idx.iter().fold(0, |a, &i| a * self.n + i)]
    }
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Curvature data at a point, in an orthonormal frame, with the normalization
/// Ric = Ric_std/m and S = S_std/(m(m+1)) (unit round sphere: Ric = g, S = 1).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurvatureJet {
    pub point: Vec<f64>,
    /// Frame columns (coordinate components of the orthonormal frame).
    pub frame: Vec<f64>,
    /// `riemann[p][j][q][i]` = R_{pjq}^i.
    pub riemann: Tensor,
    /// `d_riemann[p][j][q][i][r]` = R_{pjq}^i_{;r}.
    pub d_riemann: Tensor,
    /// `dd_riemann[p][j][q][i][r][s]` = R_{pjq}^i_{;rs}.
    pub dd_riemann: Tensor,
    pub ricci: Tensor,
    /// `d_ricci[a][b][c]` = Ric_{ab;c}.
    pub d_ricci: Tensor,
    /// `dd_ricci[a][b][c][d]` = Ric_{ab;cd}.
    pub dd_ricci: Tensor,
    pub scalar: f64,
    pub grad_scalar: Vec<f64>,
    pub hess_scalar: Tensor,
}

type TJ<const N: usize> = Vec<Jet<N>>;

fn mat_inverse_jets<const N: usize>(n: usize, a: &[Jet<N>]) -> Result<TJ<N>> {
    // Gauss–Jordan without pivoting (metric matrices are SPD).
    let mut m = a.to_vec();
    let one = a[0].cst(1.0);
    let zero = a[0].zero_like();
    let mut inv: TJ<N> = (0..n * n).map(|k| if k / n == k % n { one } else { zero }).collect();
    for c in 0..n {
        let piv = m[c * n + c];
        if piv.re().abs() < 1e-300 {
            return Err(Error::Numerical("singular metric".into()));
        }
        let r = piv.recip();
        for j in 0..n {
            m[c * n + j] = m[c * n + j] * r;
            inv[c * n + j] = inv[c * n + j] * r;
        }
        for i in 0..n {
            if i == c {
                continue;
            }
            let f = m[i * n + c];
            for j in 0..n {
                let a = m[c * n + j];
                let b = inv[c * n + j];
                m[i * n + j] -= f * a;
                inv[i * n + j] -= f * b;
            }
        }
    }
    Ok(inv)
}

/// Christoffel symbols `gamma[(k*n + i)*n + j]` = Γ^k_ij from metric jets.
fn christoffel_jets<const N: usize>(n: usize, g: &[Jet<N>], ginv: &[Jet<N>]) -> TJ<N> {
    let dg: Vec<TJ<N>> = (0..n).map(|c| g.iter().map(|x| x.diff(c)).collect()).collect();
    let zero = g[0].zero_like();
    let mut gamma = vec![zero; n * n * n];
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let mut acc = zero;
                for l in 0..n {
                    let t = dg[i][j * n + l] + dg[j][i * n + l] - dg[l][i * n + j];
                    acc += ginv[k * n + l] * t;
                }
                gamma[(k * n + i) * n + j] = acc * 0.5;
            }
        }
    }
    gamma
}

/// Covariant derivative of a covariant tensor of the given rank; the new
/// derivative index is appended last.
fn cov_deriv<const N: usize>(n: usize, t: &[Jet<N>], rank: usize, gamma: &[Jet<N>]) -> TJ<N> {
    let size = n.pow(rank as u32);
    let zero = t[0].zero_like();
    let mut out = vec![zero; size * n];
    let mut idx = vec![0usize; rank];
    for flat in 0..size {
        let mut k = flat;
        for s in (0..rank).rev() {
            idx[s] = k % n;
            k /= n;
        }
        for c in 0..n {
            let mut acc = t[flat].diff(c);
            for s in 0..rank {
                let a = idx[s];
                let stride = n.pow((rank - 1 - s) as u32);
                let base = flat - a * stride;
                for e in 0..n {
                    acc -= gamma[(e * n + c) * n + a] * t[base + e * stride];
                }
            }
            out[flat * n + c] = acc;
        }
    }
    out
}

/// Transform a covariant tensor's values to frame components.
fn to_frame(n: usize, vals: &[f64], rank: usize, frame: &DMatrix<f64>) -> Tensor {
    let mut cur = vals.to_vec();
    for slot in 0..rank {
        let stride = n.pow((rank - 1 - slot) as u32);
        let mut next = vec![0.0; cur.len()];
        for (flat, out) in next.iter_mut().enumerate() {
            let a = (flat / stride) % n;
            let base = flat - a * stride;
            let mut acc = 0.0;
            for i in 0..n {
                acc += cur[base + i * stride] * frame[(i, a)];
            }
            *out = acc;
        }
        cur = next;
    }
    Tensor { n, rank, data: cur }
}

impl CurvatureJet {
    /// Curvature jet of `g` at `p` in the orthonormal `frame` (columns); the
    /// default frame is `e^{−ψ(p)} I`.
    pub fn compute(g: &MetricField, p: &[f64], frame: Option<&DMatrix<f64>>) -> Result<Self> {
        let n = g.dim();
        let frame = frame.cloned().unwrap_or_else(|| g.coordinate_frame(p));
        match n {
            2 => Self::from_metric_jets::<15>(g.m(), p, &g.metric_jets::<15>(p, 4)?, &frame),
            3 => Self::from_metric_jets::<35>(g.m(), p, &g.metric_jets::<35>(p, 4)?, &frame),
            _ => Self::from_metric_jets::<70>(g.m(), p, &g.metric_jets::<70>(p, 4)?, &frame),
        }
    }

    /// Curvature jet from jets (degree ≥ 4) of an arbitrary metric.
    pub fn from_metric_jets<const N: usize>(
        m: usize,
        point: &[f64],
        g: &[Jet<N>],
        frame: &DMatrix<f64>,
    ) -> Result<Self> {
        let n = m + 1;
        if g[0].space().degree < 4 {
            return Err(Error::Input("curvature jets need metric jets of degree ≥ 4".into()));
        }
        let ginv = mat_inverse_jets(n, g)?;
        let gamma = christoffel_jets(n, g, &ginv);
        let zero = g[0].zero_like();
        // R^l_{ijk}: component l of R(∂_i, ∂_j)∂_k.
        let mut rup = vec![zero; n * n * n * n];
        let dgam: Vec<TJ<N>> = (0..n).map(|c| gamma.iter().map(|x| x.diff(c)).collect()).collect();
        let gi = |k: usize, i: usize, j: usize| (k * n + i) * n + j;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let mut acc = dgam[i][gi(l, j, k)] - dgam[j][gi(l, i, k)];
                        for e in 0..n {
                            acc += gamma[gi(l, i, e)] * gamma[gi(e, j, k)] - gamma[gi(l, j, e)] * gamma[gi(e, i, k)];
                        }
                        rup[((i * n + j) * n + k) * n + l] = acc;
                    }
                }
            }
        }
        // Lowered: R_{ijkl} = g_{lm} R^m_{ijk}.
        let mut rlow = vec![zero; n * n * n * n];
        for base in 0..n * n * n {
            for l in 0..n {
                let mut acc = zero;
                for mm in 0..n {
                    acc += g[l * n + mm] * rup[base * n + mm];
                }
                rlow[base * n + l] = acc;
            }
        }
        let mf = m as f64;
        // Ric_std_{jk} = R^i_{ijk}.
        let mut ric = vec![zero; n * n];
        for j in 0..n {
            for k in 0..n {
                let mut acc = zero;
                for i in 0..n {
                    acc += rup[((i * n + j) * n + k) * n + i];
                }
                ric[j * n + k] = acc * (1.0 / mf);
            }
        }
        let mut s = zero;
        for j in 0..n {
            for k in 0..n {
                s += ginv[j * n + k] * ric[j * n + k];
            }
        }
        // s currently = S_std/m; normalize to S_std/(m(m+1)).
        let s = s * (1.0 / (mf + 1.0));
        let d_rlow = cov_deriv(n, &rlow, 4, &gamma);
        let dd_rlow = cov_deriv(n, &d_rlow, 5, &gamma);
        let d_ric = cov_deriv(n, &ric, 2, &gamma);
        let dd_ric = cov_deriv(n, &d_ric, 3, &gamma);
        let ds = cov_deriv(n, &[s], 0, &gamma);
        let hs = cov_deriv(n, &ds, 1, &gamma);
        let vals = |t: &TJ<N>| t.iter().map(|x| x.re()).collect::<Vec<_>>();
        let f = frame;
        Ok(CurvatureJet {
            point: point[..n].to_vec(),
            frame: f.as_slice().to_vec(),
            riemann: to_frame(n, &vals(&rlow), 4, f),
            d_riemann: to_frame(n, &vals(&d_rlow), 5, f),
            dd_riemann: to_frame(n, &vals(&dd_rlow), 6, f),
            ricci: to_frame(n, &vals(&ric), 2, f),
            d_ricci: to_frame(n, &vals(&d_ric), 3, f),
            dd_ricci: to_frame(n, &vals(&dd_ric), 4, f),
            scalar: s.re(),
            grad_scalar: to_frame(n, &vals(&ds), 1, f).data,
            hess_scalar: to_frame(n, &vals(&hs), 2, f),
        })
    }

    pub fn dim(&self) -> usize {
        self.ricci.n
    }
}

/// Normal (exponential) chart about a point with an orthonormal frame.
#[derive(Clone, Debug)]
pub struct Chart<'a> {
    pub metric: &'a MetricField,
    pub center: Vec<f64>,
    /// Orthonormal frame at `center`, as columns.
    pub frame: DMatrix<f64>,
    pub working_radius: f64,
}

impl<'a> Chart<'a> {
    /// Ambient point `Exp_p(E z)` for chart coordinates `z`.
    pub fn to_ambient<T: Scalar>(&self, z: &[T], ode: &Extrapolation) -> Result<[T; MAX_DIM]> {
        let n = self.metric.dim();
        let zero = z[0].zero_like();
        let mut x = [zero; MAX_DIM];
        let mut v = [zero; MAX_DIM];
        for i in 0..n {
            x[i] = z[0].cst(self.center[i]);
            for a in 0..n {
                v[i] += z[a] * self.frame[(i, a)];
            }
        }
        Ok(self.metric.geodesic(&x, &v, ode)?.0)
    }

    /// Jets (valid to `degree`) of the pulled-back metric components about `z0`.
    pub fn metric_jets<const N: usize>(&self, z0: &[f64], degree: usize) -> Result<Vec<Jet<N>>> {
        let n = self.metric.dim();
        let sp = jet_space(n, degree + 1);
        let z: Vec<Jet<N>> = (0..n).map(|i| Jet::var(sp, i, z0[i])).collect();
        let x = self.to_ambient(&z, &Extrapolation::default())?;
        let e = (self.metric.psi(&x[..n]) * 2.0).exp();
        let jac: Vec<Vec<Jet<N>>> = (0..n).map(|i| (0..n).map(|k| x[i].diff(k)).collect()).collect();
        let zero = z[0].zero_like();
        let mut a = vec![zero; n * n];
        for k in 0..n {
            for l in k..n {
                let mut acc = zero;
                for row in jac.iter().take(n) {
                    acc += row[k] * row[l];
                }
                a[k * n + l] = e * acc;
                a[l * n + k] = a[k * n + l];
            }
        }
        Ok(a)
    }

    /// Pulled-back metric matrix A(z).
    pub fn metric_at(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.metric.dim();
        let a: Vec<Jet<5>> = self.metric_jets(z, 0)?;
        Ok(DMatrix::from_fn(n, n, |i, j| a[i * n + j].re()))
    }

    /// Christoffel symbols Γ^k_ij of the pulled-back metric at `z`.
    pub fn christoffel_at(&self, z: &[f64]) -> Result<Vec<f64>> {
        let n = self.metric.dim();
        let a: Vec<Jet<15>> = self.metric_jets(z, 1)?;
        let ainv = mat_inverse_jets(n, &a)?;
        Ok(christoffel_jets(n, &a, &ainv).iter().map(|x| x.re()).collect())
    }

    /// Transport matrix: M(z)u is the frame expression of the parallel
    /// transport of the chart vector u from z back to the origin along the
    /// radial geodesic.
    pub fn transport_matrix(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.metric.dim();
        let sp = jet_space(n, 1);
        let zj: Vec<Jet<5>> = (0..n).map(|i| Jet::var(sp, i, z[i])).collect();
        let ode = Extrapolation::default();
        let zero = zj[0].zero_like();
        let mut x0 = [zero; MAX_DIM];
        let mut v0 = [zero; MAX_DIM];
        for i in 0..n {
            x0[i] = zj[0].cst(self.center[i]);
            for a in 0..n {
                v0[i] += zj[a] * self.frame[(i, a)];
            }
        }
        let (x1, v1) = self.metric.geodesic(&x0, &v0, &ode)?;
        let pos: Vec<f64> = x1[..n].iter().map(|v| v.re()).collect();
        let vel: Vec<f64> = v1[..n].iter().map(|v| -v.re()).collect();
        let einv = self
            .frame
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular frame".into()))?;
        let mut mmat = DMatrix::zeros(n, n);
        for k in 0..n {
            let u: Vec<f64> = (0..n).map(|i| x1[i].d1(k)).collect();
            let tr = self.metric.parallel_transport(&pos, &vel, &u)?;
            let col = &einv * nalgebra::DVector::from_vec(tr);
            mmat.set_column(k, &col);
        }
        Ok(mmat)
    }
}

/// Conservative injectivity-radius estimate about `p` by geodesic spray:
/// sample sectional curvatures along geodesics leaving `p` and bound the
/// radius by π/√K_max and by the probed length.
pub fn injectivity_estimate(g: &MetricField, p: &[f64], probe: f64) -> Result<f64> {
    let n = g.dim();
    let frame = g.coordinate_frame(p);
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        for sgn in [-1.0, 1.0] {
            let mut d = vec![0.0; n];
            d[i] = sgn;
            dirs.push(d);
        }
    }
    let mut kmax = 0.0f64;
    let mut reach = probe;
    for d in &dirs {
        let v: Vec<f64> = (0..n).map(|i| (0..n).map(|a| frame[(i, a)] * d[a]).sum()).collect();
        for step in 1..=8 {
            let tau = probe * step as f64 / 8.0;
            let y: Vec<f64> = v.iter().map(|c| c * tau).collect();
            let x = match g.exp_map(p, &y) {
                Ok(x) => x,
                Err(Error::Domain(_)) => {
                    reach = reach.min(tau * 0.9);
                    break;
                }
                Err(e) => return Err(e),
            };
            let cj = CurvatureJet::compute(g, &x, None)?;
            for a in 0..n {
                for b in 0..a {
                    kmax = kmax.max(cj.riemann.at(&[a, b, b, a]));
                }
            }
        }
    }
    let conj = if kmax > 0.0 { std::f64::consts::PI / kmax.sqrt() } else { f64::INFINITY };
    Ok(conj.min(reach))
}

/// Normal chart about `p`; fails when `radius` exceeds 0.4 × the estimated
/// injectivity radius.
pub fn normal_chart<'a>(
    g: &'a MetricField,
    p: &[f64],
    frame: Option<&DMatrix<f64>>,
    radius: f64,
) -> Result<Chart<'a>> {
    g.check_domain(p)?;
    let inj = injectivity_estimate(g, p, 2.0)?;
    let working = 0.4 * inj;
    if radius > working {
        return Err(Error::Input(format!(
            "requested chart radius {radius} exceeds working radius {working:.4}"
        )));
    }
    Ok(Chart {
        metric: g,
        center: p[..g.dim()].to_vec(),
        frame: frame.cloned().unwrap_or_else(|| g.coordinate_frame(p)),
        working_radius: working,
    })
}

/// Fitted Taylor coefficients of the normal-chart quantities along one direction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectionFit {
    pub direction: Vec<f64>,
    /// Max |fitted − predicted| / max |predicted| for A, B (quadratic) and
    /// Γ^k_ii (linear).
    pub rel_err_a: f64,
    pub rel_err_b: f64,
    pub rel_err_gamma: f64,
    /// Same comparison for the transport matrix M against (1/6)R.
    pub rel_err_m: f64,
    /// Fitted quadratic coefficient ratio |M₂| / |R θθ|.
    pub m_coefficient: f64,
    /// Log-log slopes of the remainders after subtracting the leading term.
    pub slope_a: f64,
    pub slope_b: f64,
    pub slope_gamma: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalExpansionReport {
    pub radii: Vec<f64>,
    pub fits: Vec<DirectionFit>,
    pub max_rel_err: f64,
    pub min_slope_quadratic: f64,
    pub min_slope_linear: f64,
    pub condition_number: f64,
}

/// Least-squares fit of `y(ρ) ≈ Σ_{j=lo}^{hi} c_j ρ^j`; returns coefficients
/// and the condition number of the scaled design matrix.
pub fn fit_powers(rho: &[f64], y: &[f64], lo: usize, hi: usize) -> Result<(Vec<f64>, f64)> {
    let k = hi - lo + 1;
    if rho.len() < k {
        return Err(Error::Input(format!("fit needs ≥ {k} samples, got {}", rho.len())));
    }
    let rmax = rho.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let a = DMatrix::from_fn(rho.len(), k, |i, j| (rho[i] / rmax).powi((lo + j) as i32));
    let sv = a.clone().svd(true, true);
    let smax = sv.singular_values.max();
    let smin = sv.singular_values.min();
    let cond = smax / smin;
    let b = nalgebra::DVector::from_column_slice(y);
    let c = sv.solve(&b, 1e-15 * smax).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(((0..k).map(|j| c[j] / rmax.powi((lo + j) as i32)).collect(), cond))
}

/// Least-squares slope of log|y| against log ρ.
pub fn loglog_slope(rho: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = rho
        .iter()
        .zip(y)
        .filter(|(_, v)| v.abs() > 0.0)
        .map(|(r, v)| (r.ln(), v.abs().ln()))
        .collect();
    if pts.len() < 2 {
        return f64::INFINITY;
    }
    let nf = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Fit the normal-chart expansions of A, B, Γ and M about `p` over the radius
/// ladder and compare with the curvature jet at `p`.
pub fn verify_normal_expansion(
    g: &MetricField,
    p: &[f64],
    radii: &[f64],
) -> Result<NormalExpansionReport> {
    let n = g.dim();
    let rmax = radii.iter().fold(0.0f64, |a, b| a.max(*b));
    let chart = normal_chart(g, p, None, rmax)?;
    let cj = CurvatureJet::compute(g, p, Some(&chart.frame))?;
    let r = |p_: usize, j: usize, q: usize, i: usize| cj.riemann.at(&[p_, j, q, i]);
    // Fixed deterministic direction set: axes and a few diagonals.
    let mut dirs: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|k| if k == i { 1.0 } else { 0.0 }).collect()).collect();
    dirs.push((0..n).map(|k| 1.0 + 0.3 * k as f64).collect());
    dirs.push((0..n).map(|k| if k % 2 == 0 { 1.0 } else { -0.7 }).collect());
    for d in dirs.iter_mut() {
        let nn = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        d.iter_mut().for_each(|x| *x /= nn);
    }
    const HI: usize = 7;
    let mut fits = Vec::new();
    let mut cond_max = 0.0f64;
    for th in &dirs {
        let mut avals = Vec::new();
        let mut bvals = Vec::new();
        let mut gvals = Vec::new();
        let mut mvals = Vec::new();
        for &rho in radii {
            let z: Vec<f64> = th.iter().map(|c| c * rho).collect();
            let a = chart.metric_at(&z)?;
            let b = a.clone().try_inverse().ok_or_else(|| Error::Numerical("singular A".into()))?;
            avals.push(a);
            bvals.push(b);
            gvals.push(chart.christoffel_at(&z)?);
            mvals.push(chart.transport_matrix(&z)?);
        }
        let mut pred2 = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for p_ in 0..n {
                    for q in 0..n {
                        acc += r(p_, j, q, i) * th[p_] * th[q];
                    }
                }
                pred2[(i, j)] = acc;
            }
        }
        let scale2 = pred2.amax().max(1e-12);
        let (mut ea, mut eb, mut em) = (0.0f64, 0.0f64, 0.0f64);
        let (mut rem_a, mut rem_b) = (vec![0.0; radii.len()], vec![0.0; radii.len()]);
        let mut mnorm = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let id = if i == j { 1.0 } else { 0.0 };
                let ya: Vec<f64> = avals.iter().map(|a| a[(i, j)] - id).collect();
                let yb: Vec<f64> = bvals.iter().map(|b| b[(i, j)] - id).collect();
                let ym: Vec<f64> = mvals.iter().map(|mm| mm[(i, j)] - id).collect();
                let (ca, c1) = fit_powers(radii, &ya, 2, HI)?;
                let (cb, _) = fit_powers(radii, &yb, 2, HI)?;
                let (cm, _) = fit_powers(radii, &ym, 2, HI)?;
                cond_max = cond_max.max(c1);
                ea = ea.max((ca[0] - pred2[(i, j)] / 3.0).abs());
                eb = eb.max((cb[0] + pred2[(i, j)] / 3.0).abs());
                em = em.max((cm[0] - pred2[(i, j)] / 6.0).abs());
                mnorm = mnorm.max(cm[0].abs());
                for (k, &rho) in radii.iter().enumerate() {
                    rem_a[k] = f64::max(rem_a[k], (ya[k] - pred2[(i, j)] / 3.0 * rho * rho).abs());
                    rem_b[k] = f64::max(rem_b[k], (yb[k] + pred2[(i, j)] / 3.0 * rho * rho).abs());
                }
            }
        }
        // Γ^k_ii linear coefficient against (2/3) R_{pii}^k θ^p.
        let mut eg = 0.0f64;
        let mut gscale = 0.0f64;
        let mut rem_g = vec![0.0; radii.len()];
        for k in 0..n {
            for i in 0..n {
                let pred: f64 = (0..n).map(|p_| r(p_, i, i, k) * th[p_]).sum::<f64>() * 2.0 / 3.0;
                gscale = gscale.max(pred.abs());
                let y: Vec<f64> = gvals.iter().map(|gm| gm[(k * n + i) * n + i]).collect();
                let (c, _) = fit_powers(radii, &y, 1, HI)?;
                eg = eg.max((c[0] - pred).abs());
                for (q, &rho) in radii.iter().enumerate() {
                    rem_g[q] = f64::max(rem_g[q], (y[q] - pred * rho).abs());
                }
            }
        }
        fits.push(DirectionFit {
            direction: th.clone(),
            rel_err_a: ea / (scale2 / 3.0),
            rel_err_b: eb / (scale2 / 3.0),
            rel_err_gamma: eg / gscale.max(1e-12),
            rel_err_m: em / (scale2 / 6.0),
            m_coefficient: mnorm / scale2,
            slope_a: loglog_slope(radii, &rem_a),
            slope_b: loglog_slope(radii, &rem_b),
            slope_gamma: loglog_slope(radii, &rem_g),
        });
    }
    if cond_max > 1e12 {
        return Err(Error::Numerical(format!("fit condition number {cond_max:.3e} too large")));
    }
    let max_rel_err = fits
        .iter()
        .map(|f| f.rel_err_a.max(f.rel_err_b).max(f.rel_err_gamma))
        .fold(0.0, f64::max);
    let min_slope_quadratic = fits.iter().map(|f| f.slope_a.min(f.slope_b)).fold(f64::INFINITY, f64::min);
    let min_slope_linear = fits.iter().map(|f| f.slope_gamma).fold(f64::INFINITY, f64::min);
    Ok(NormalExpansionReport {
        radii: radii.to_vec(),
        fits,
        max_rel_err,
        min_slope_quadratic,
        min_slope_linear,
        condition_number: cond_max,
    })
}
