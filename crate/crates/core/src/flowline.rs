//! Time-direction analysis: critical points and gradient lines of the
//! normalized scalar curvature, the linearized operator P with its
//! kernel-orthogonal Green solver, the scalar parabolic Green operator and
//! the band-wise inverse of Q_s.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{numerical, Error, Result};
use crate::jet::{jet_space, Jet, Scalar};
use crate::metric::{CurvatureJet, MetricField, MAX_DIM};
use crate::ode::Extrapolation;
use crate::par;
use crate::sphere::{band_eigenvalue, BandBasis, SpaceTimeField};

/// Gradient-flow speed constant (m+1)/(2(m+3)).
pub fn flow_constant(m: usize) -> f64 {
    (m as f64 + 1.0) / (2.0 * (m as f64 + 3.0))
}

/// Finite-difference weights (Fornberg) for the `order`-th derivative at
/// `x0` from the sample abscissae `xs`.
pub fn fd_weights(x0: f64, xs: &[f64], order: usize) -> Vec<f64> {
    let n = xs.len();
    let mut c = vec![vec![0.0; order + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.iter().map(|r| r[order]).collect()
}

/// Stencil width of the local polynomial rules (degree 7).
const STENCIL: usize = 8;

/// Uniform sampling of the window [−T, T].
#[derive(Clone, Debug, Serialize)]
pub struct TimeGrid {
    pub half_width: f64,
    pub times: Vec<f64>,
    pub step: f64,
    /// Diagnostics are evaluated on [−T + margin, T − margin].
    pub margin: f64,
}

impl TimeGrid {
    pub fn new(half_width: f64, samples: usize, margin: f64) -> Result<Self> {
        if samples < 2 * STENCIL + 1 || !(half_width > 0.0) {
            return Err(Error::Input(format!("time grid needs ≥ {} samples and T > 0", 2 * STENCIL + 1)));
        }
        if !(0.0..half_width).contains(&margin) {
            return Err(Error::Input("time margin must lie in [0, T)".into()));
        }
        let step = 2.0 * half_width / (samples - 1) as f64;
        let times = (0..samples).map(|i| -half_width + step * i as f64).collect();
        Ok(TimeGrid { half_width, times, step, margin })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Indices of samples inside the interior subwindow.
    pub fn interior(&self) -> Vec<usize> {
        let lim = self.half_width - self.margin + 1e-12;
        (0..self.len()).filter(|&i| self.times[i].abs() <= lim).collect()
    }

    /// Start index of the 8-point stencil used around position `x` (in samples).
    fn stencil_start(&self, pos: f64) -> usize {
        let n = self.len();
        let base = pos.floor() as isize - (STENCIL as isize / 2 - 1);
        base.clamp(0, (n - STENCIL) as isize) as usize
    }

    /// Eighth-order differentiation matrix (centred inside, one-sided near the ends).
    pub fn derivative_matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            let start = (i as isize - 4).clamp(0, (n - 9) as isize) as usize;
            let xs: Vec<f64> = (start..start + 9).map(|k| self.times[k]).collect();
            let w = fd_weights(self.times[i], &xs, 1);
            for (k, wk) in w.iter().enumerate() {
                d[(i, start + k)] = *wk;
            }
        }
        d
    }

    /// Interpolation weights of the degree-7 local Lagrange rule at time `t`
    /// (constant extension outside the window). Returns (start, weights).
    pub fn interpolation(&self, t: f64) -> (usize, [f64; STENCIL]) {
        let n = self.len();
        let mut w = [0.0; STENCIL];
        if t <= self.times[0] {
            w[0] = 1.0;
            return (0, w);
        }
        if t >= self.times[n - 1] {
            w[STENCIL - 1] = 1.0;
            return (n - STENCIL, w);
        }
        let pos = (t - self.times[0]) / self.step;
        let start = self.stencil_start(pos);
        for (k, wk) in w.iter_mut().enumerate() {
            let mut l = 1.0;
            for q in 0..STENCIL {
                if q != k {
                    l *= (t - self.times[start + q]) / (self.times[start + k] - self.times[start + q]);
                }
            }
            *wk = l;
        }
        (start, w)
    }

    /// Trapezoid weights of the window inner product.
    pub fn trapezoid(&self) -> Vec<f64> {
        let n = self.len();
        (0..n).map(|i| if i == 0 || i == n - 1 { 0.5 * self.step } else { self.step }).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalPoint {
    pub location: Vec<f64>,
    pub scalar: f64,
    /// Covariant Hessian of S in the frame e^{−ψ}I.
    pub hessian: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub morse_index: usize,
    pub nondegenerate: bool,
}

/// Normalized S with coordinate gradient and Hessian at `x`.
pub fn scalar_hessian(g: &MetricField, x: &[f64]) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
    if !g.in_domain(x) {
        return Err(Error::Domain(format!("point {x:?} outside chart domain")));
    }
    let n = g.dim();
    let sp = jet_space(n, 4);
    let xs: Vec<Jet<70>> = (0..n).map(|i| Jet::var(sp, i, x[i])).collect();
    let s = g.scalar_jet(&xs);
    let grad = (0..n).map(|i| s.d1(i)).collect();
    let h = DMatrix::from_fn(n, n, |i, j| s.d2(i, j));
    Ok((s.re(), grad, h))
}

/// Degeneracy threshold on |eigenvalue| of the frame Hessian.
const DEGENERACY: f64 = 1e-8;

fn classify(g: &MetricField, x: &[f64]) -> Result<CriticalPoint> {
    let n = g.dim();
    let (s, _, h) = scalar_hessian(g, x)?;
    let e2 = (-2.0 * g.psi(x)).exp();
    let hf = &h * e2;
    let eig = SymmetricEigen::new(hf.clone());
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let nondegenerate = ev.iter().all(|v| v.abs() > DEGENERACY);
    Ok(CriticalPoint {
        location: x[..n].to_vec(),
        scalar: s,
        hessian: hf.as_slice().to_vec(),
        morse_index: ev.iter().filter(|v| **v < 0.0).count(),
        eigenvalues: ev,
        nondegenerate,
    })
}

/// Outcome of the Newton search from one seed.
#[derive(Clone, Debug, Serialize)]
pub enum SeedOutcome {
    Converged(usize),
    Diverged(String),
}

/// Newton iteration on ∇S from every seed; converged points are deduplicated.
pub fn find_critical_points(g: &MetricField, seeds: &[Vec<f64>]) -> Result<(Vec<CriticalPoint>, Vec<SeedOutcome>)> {
    let n = g.dim();
    let mut found: Vec<CriticalPoint> = Vec::new();
    let mut outcomes = Vec::new();
    for seed in seeds {
        if seed.len() != n {
            return Err(Error::Input(format!("seed {seed:?} has wrong dimension")));
        }
        let mut x = seed.clone();
        let mut ok = false;
        let mut why = String::from("no convergence in 60 iterations");
        for _ in 0..60 {
            let (_, grad, h) = match scalar_hessian(g, &x) {
                Ok(v) => v,
                Err(e) => {
                    why = e.to_string();
                    break;
                }
            };
            let gn = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gn < 1e-13 {
                ok = true;
                break;
            }
            let Some(step) = h.clone().lu().solve(&DVector::from_vec(grad)) else {
                why = "singular Hessian".into();
                break;
            };
            let sn = step.norm();
            let damp = if sn > 0.25 { 0.25 / sn } else { 1.0 };
            for i in 0..n {
                x[i] -= damp * step[i];
            }
            if sn < 1e-15 {
                ok = true;
                break;
            }
        }
        if !ok {
            outcomes.push(SeedOutcome::Diverged(why));
            continue;
        }
        let cp = classify(g, &x)?;
        let dup = found.iter().position(|c| {
            c.location.iter().zip(&cp.location).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() < 1e-6
        });
        match dup {
            Some(k) => outcomes.push(SeedOutcome::Converged(k)),
            None => {
                outcomes.push(SeedOutcome::Converged(found.len()));
                found.push(cp);
            }
        }
    }
    Ok((found, outcomes))
}

/// Sampled gradient line with parallel frames.
#[derive(Clone, Debug)]
pub struct FlowLine {
    pub m: usize,
    pub grid: TimeGrid,
    pub points: Vec<[f64; MAX_DIM]>,
    /// Coordinate velocity γ̇.
    pub velocity: Vec<[f64; MAX_DIM]>,
    /// Parallel orthonormal frames (columns) and their coordinate derivatives.
    pub frames: Vec<DMatrix<f64>>,
    pub frame_rates: Vec<DMatrix<f64>>,
    pub scalar: Vec<f64>,
    /// Velocity in frame components.
    pub velocity_frame: Vec<Vec<f64>>,
    /// Covariant Hessian of S in frame components.
    pub hessian_frame: Vec<DMatrix<f64>>,
    pub limits: [Option<CriticalPoint>; 2],
}

const FLOW_STATE: usize = MAX_DIM + MAX_DIM * MAX_DIM;

fn flow_rhs(g: &MetricField, y: &[f64; FLOW_STATE]) -> Result<([f64; FLOW_STATE], [f64; MAX_DIM])> {
    let n = g.dim();
    let c = flow_constant(g.m());
    let (_, grad) = g.scalar_and_gradient(&y[..n])?;
    let e2 = (-2.0 * g.psi(&y[..n])).exp();
    let mut v = [0.0; MAX_DIM];
    for i in 0..n {
        v[i] = -c * e2 * grad[i];
    }
    let mut dpsi = [0.0; MAX_DIM];
    g.grad_psi(&y[..n], &mut dpsi);
    let mut out = [0.0; FLOW_STATE];
    out[..n].copy_from_slice(&v[..n]);
    for a in 0..n {
        let col = &y[MAX_DIM + a * MAX_DIM..MAX_DIM + a * MAX_DIM + n];
        let mut gam = [0.0; MAX_DIM];
        g.christoffel_contract(&dpsi, &v[..n], col, &mut gam);
        for i in 0..n {
            out[MAX_DIM + a * MAX_DIM + i] = -gam[i];
        }
    }
    Ok((out, v))
}

/// Integrate the gradient line through `start` (at t = 0) over the grid, with
/// frames initialised to e^{−ψ}I at `start` and parallel transported.
pub fn integrate_flowline(g: &MetricField, start: &[f64], grid: &TimeGrid) -> Result<FlowLine> {
    let n = g.dim();
    let nt = grid.len();
    let mut y0 = [0.0; FLOW_STATE];
    y0[..n].copy_from_slice(&start[..n]);
    let e0 = (-g.psi(start)).exp();
    for a in 0..n {
        y0[MAX_DIM + a * MAX_DIM + a] = e0;
    }
    let len = MAX_DIM + (n - 1) * MAX_DIM + n;
    let ode = Extrapolation::with_tol(1e-13);
    let i0 = grid.times.iter().enumerate().min_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap()).unwrap().0;
    let mut states = vec![[0.0; FLOW_STATE]; nt];
    let mut y = ode.integrate(|_, y| flow_rhs(g, y).map(|r| r.0), y0, len, 0.0, grid.times[i0])?;
    states[i0] = y;
    for i in i0 + 1..nt {
        y = ode.integrate(|_, y| flow_rhs(g, y).map(|r| r.0), y, len, grid.times[i - 1], grid.times[i])?;
        states[i] = y;
    }
    y = states[i0];
    for i in (0..i0).rev() {
        y = ode.integrate(|_, y| flow_rhs(g, y).map(|r| r.0), y, len, grid.times[i + 1], grid.times[i])?;
        states[i] = y;
    }
    let mut line = FlowLine {
        m: g.m(),
        grid: grid.clone(),
        points: Vec::with_capacity(nt),
        velocity: Vec::with_capacity(nt),
        frames: Vec::with_capacity(nt),
        frame_rates: Vec::with_capacity(nt),
        scalar: Vec::with_capacity(nt),
        velocity_frame: Vec::with_capacity(nt),
        hessian_frame: Vec::new(),
        limits: [None, None],
    };
    for st in &states {
        let (rate, v) = flow_rhs(g, st)?;
        let mut p = [0.0; MAX_DIM];
        p[..n].copy_from_slice(&st[..n]);
        let e = DMatrix::from_fn(n, n, |i, a| st[MAX_DIM + a * MAX_DIM + i]);
        let ed = DMatrix::from_fn(n, n, |i, a| rate[MAX_DIM + a * MAX_DIM + i]);
        let vf = e.clone().try_inverse().ok_or_else(|| Error::Numerical("singular frame".into()))?
            * DVector::from_column_slice(&v[..n]);
        line.scalar.push(g.scalar_and_gradient(&p[..n])?.0);
        line.points.push(p);
        line.velocity.push(v);
        line.frames.push(e);
        line.frame_rates.push(ed);
        line.velocity_frame.push(vf.iter().copied().collect());
    }
    for i in 1..nt {
        if line.scalar[i] > line.scalar[i - 1] + 1e-12 * line.scalar[i - 1].abs().max(1.0) {
            return numerical(format!("scalar curvature increases along the flow at t = {}", grid.times[i]));
        }
    }
    line.hessian_frame = par::try_map(nt, |i| {
        let cj = CurvatureJet::compute(g, &line.points[i][..n], Some(&line.frames[i]))?;
        Ok(DMatrix::from_fn(n, n, |a, b| cj.hess_scalar.at(&[a, b])))
    })?;
    for (slot, idx) in [(0, 0), (1, nt - 1)] {
        if let Ok((cps, _)) = find_critical_points(g, &[line.points[idx][..n].to_vec()]) {
            line.limits[slot] = cps.into_iter().next();
        }
    }
    Ok(line)
}

impl FlowLine {
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.m + 1
    }
    /// Curvature jet at sample `i` in the parallel frame.
    pub fn curvature(&self, g: &MetricField, i: usize) -> Result<CurvatureJet> {
        CurvatureJet::compute(g, &self.points[i][..self.dim()], Some(&self.frames[i]))
    }
}

/// Heteroclinic line leaving `saddle` along its unstable direction (sign
/// `branch`), re-centred so that t = 0 is where S is halfway between the
/// saddle value and the value reached after `t_max` of flow.
pub fn connecting_orbit(
    g: &MetricField,
    saddle: &CriticalPoint,
    branch: f64,
    offset: f64,
    t_max: f64,
    grid: &TimeGrid,
) -> Result<FlowLine> {
    let n = g.dim();
    let hf = DMatrix::from_column_slice(n, n, &saddle.hessian);
    let eig = SymmetricEigen::new(hf);
    let (k, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .ok_or_else(|| Error::Input("empty Hessian".into()))?;
    if eig.eigenvalues[k] >= 0.0 {
        return Err(Error::Input("critical point has no unstable direction".into()));
    }
    let e = (-g.psi(&saddle.location)).exp();
    let mut x = [0.0; FLOW_STATE];
    for i in 0..n {
        x[i] = saddle.location[i] + branch.signum() * offset * e * eig.eigenvectors[(i, k)];
    }
    let ode = Extrapolation::with_tol(1e-12);
    let dt = 0.05;
    let steps = (t_max / dt).ceil() as usize;
    let mut path = vec![x];
    for _ in 0..steps {
        x = ode.integrate(|_, y| flow_rhs(g, y).map(|r| r.0), x, n, 0.0, dt)?;
        path.push(x);
    }
    let svals: Vec<f64> = path.iter().map(|p| g.scalar_and_gradient(&p[..n]).map(|v| v.0)).collect::<Result<_>>()?;
    let target = 0.5 * (saddle.scalar + svals[svals.len() - 1]);
    let j = svals
        .windows(2)
        .position(|w| (w[0] - target) * (w[1] - target) <= 0.0)
        .ok_or_else(|| Error::Numerical("flow did not cross the mid-level of S".into()))?;
    // refine the crossing by bisection in time
    let (mut lo, mut hi) = (0.0, dt);
    let base = path[j];
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let y = ode.integrate(|_, y| flow_rhs(g, y).map(|r| r.0), base, n, 0.0, mid)?;
        if g.scalar_and_gradient(&y[..n])?.0 > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let y = ode.integrate(|_, y| flow_rhs(g, y).map(|r| r.0), base, n, 0.0, 0.5 * (lo + hi))?;
    integrate_flowline(g, &y[..n], grid)
}

/// Kernel-orthogonal Green solver for P = ∂_t + c Hess S along a flow line.
#[derive(Clone, Debug)]
pub struct PSolver {
    pub n: usize,
    pub nt: usize,
    /// Y = green · rhs (both flattened time-major).
    pub green: DMatrix<f64>,
    /// Orthonormal (trapezoid inner product) basis of the discrete kernel.
    pub kernel: Vec<Vec<f64>>,
    pub expected_kernel: i64,
    pub singular_values: Vec<f64>,
    /// c·Hess S per sample (frame components).
    pub coefficient: Vec<DMatrix<f64>>,
}

/// Integration weights over [t_j, t_{j+1}] of the degree-7 local rule.
fn interval_weights(grid: &TimeGrid, j: usize) -> (usize, [f64; STENCIL]) {
    let start = grid.stencil_start(j as f64);
    let (gx, gw) = crate::sphere::gauss_legendre(STENCIL);
    let (a, b) = (grid.times[j], grid.times[j + 1]);
    let mut w = [0.0; STENCIL];
    for (x, wq) in gx.iter().zip(&gw) {
        let t = 0.5 * (a + b) + 0.5 * (b - a) * x;
        for (k, wk) in w.iter_mut().enumerate() {
            let mut l = 1.0;
            for q in 0..STENCIL {
                if q != k {
                    l *= (t - grid.times[start + q]) / (grid.times[start + k] - grid.times[start + q]);
                }
            }
            *wk += 0.5 * (b - a) * wq * l;
        }
    }
    (start, w)
}

impl PSolver {
    pub fn new(line: &FlowLine) -> Result<Self> {
        let n = line.dim();
        let nt = line.len();
        let c = flow_constant(line.m);
        let a: Vec<DMatrix<f64>> = line.hessian_frame.iter().map(|h| h * c).collect();
        let grid = &line.grid;
        // boundary rows: growing directions of Y' = −A Y at each end
        let eig_lo = SymmetricEigen::new(a[0].clone());
        let eig_hi = SymmetricEigen::new(a[nt - 1].clone());
        let mut bc: Vec<(usize, Vec<f64>, f64)> = Vec::new();
        for k in 0..n {
            let lam = eig_lo.eigenvalues[k];
            if lam > 0.0 {
                bc.push((0, eig_lo.eigenvectors.column(k).iter().copied().collect(), lam));
            }
            let lam = eig_hi.eigenvalues[k];
            if lam < 0.0 {
                bc.push((nt - 1, eig_hi.eigenvectors.column(k).iter().copied().collect(), lam));
            }
        }
        if eig_lo.eigenvalues.iter().chain(eig_hi.eigenvalues.iter()).any(|l| l.abs() < 1e-10) {
            return Err(Error::Numerical("degenerate Hessian at a window end".into()));
        }
        let rows = (nt - 1) * n + bc.len();
        let cols = nt * n;
        let mut mat = DMatrix::zeros(rows.max(cols), cols);
        let mut rhs_map = DMatrix::zeros(rows.max(cols), cols);
        for j in 0..nt - 1 {
            let (start, w) = interval_weights(grid, j);
            for i in 0..n {
                let r = j * n + i;
                mat[(r, (j + 1) * n + i)] += 1.0;
                mat[(r, j * n + i)] -= 1.0;
                for (q, wq) in w.iter().enumerate() {
                    let k = start + q;
                    for b in 0..n {
                        mat[(r, k * n + b)] += wq * a[k][(i, b)];
                    }
                    rhs_map[(r, k * n + i)] += wq;
                }
            }
        }
        for (q, (k, u, lam)) in bc.iter().enumerate() {
            let r = (nt - 1) * n + q;
            for i in 0..n {
                mat[(r, k * n + i)] = u[i];
                rhs_map[(r, k * n + i)] = u[i] / lam;
            }
        }
        let tw = grid.trapezoid();
        let sq: Vec<f64> = (0..cols).map(|k| tw[k / n].sqrt()).collect();
        let scaled = DMatrix::from_fn(mat.nrows(), cols, |r, k| mat[(r, k)] / sq[k]);
        let svd = scaled.svd(true, true);
        let smax = svd.singular_values.max();
        let thr = 1e-6 * smax;
        let u = svd.u.as_ref().unwrap();
        let vt = svd.v_t.as_ref().unwrap();
        let mut pinv = DMatrix::zeros(cols, mat.nrows());
        let mut kernel = Vec::new();
        for k in 0..svd.singular_values.len() {
            let sv = svd.singular_values[k];
            if sv > thr {
                let vcol = vt.row(k).transpose();
                let ucol = u.column(k);
                pinv += (vcol / sv) * ucol.transpose();
            } else {
                kernel.push((0..cols).map(|q| vt[(k, q)] / sq[q]).collect::<Vec<f64>>());
            }
        }
        let expected = n as i64 - bc.len() as i64;
        if kernel.len() as i64 != expected {
            return numerical(format!(
                "discrete P has kernel dimension {} (expected {expected})",
                kernel.len()
            ));
        }
        let green_scaled = pinv * rhs_map;
        let green = DMatrix::from_fn(cols, cols, |r, k| green_scaled[(r, k)] / sq[r]);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        Ok(PSolver { n, nt, green, kernel, expected_kernel: expected, singular_values: sv, coefficient: a })
    }

    /// Kernel-orthogonal bounded solution of P Y = rhs (time-major vectors).
    pub fn solve(&self, rhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let flat: Vec<f64> = rhs.iter().flat_map(|v| v.iter().copied()).collect();
        let y = &self.green * DVector::from_vec(flat);
        (0..self.nt).map(|t| y.as_slice()[t * self.n..(t + 1) * self.n].to_vec()).collect()
    }

    /// P Y on the grid using the differentiation matrix.
    pub fn apply(&self, grid: &TimeGrid, y: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = grid.derivative_matrix();
        let n = self.n;
        (0..self.nt)
            .map(|t| {
                (0..n)
                    .map(|i| {
                        let dt: f64 = (0..self.nt).map(|k| d[(t, k)] * y[k][i]).sum();
                        dt + (0..n).map(|b| self.coefficient[t][(i, b)] * y[t][b]).sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Green matrix of s⁴u′ + a·u = r on the grid: u = K r, the bounded solution
/// with r extended by its boundary values.
pub fn scalar_green_matrix(grid: &TimeGrid, a: f64, s: f64) -> Result<DMatrix<f64>> {
    if a == 0.0 {
        return Err(Error::Input("scalar Green operator needs a ≠ 0".into()));
    }
    if !(s > 0.0) {
        return Err(Error::Input("scale must be positive".into()));
    }
    let nt = grid.len();
    let eps = s.powi(4);
    let rate = a.abs() / eps; // decay per unit time
    let reach = 40.0 / rate;
    let panel = (1.0 / rate).min(grid.step);
    let (gx, gw) = crate::sphere::gauss_legendre(STENCIL);
    let (t_lo, t_hi) = (grid.times[0], grid.times[nt - 1]);
    let mut k = DMatrix::zeros(nt, nt);
    for i in 0..nt {
        let t = grid.times[i];
        // integrate over τ with σ = |t − τ| ∈ [0, reach], inside the window;
        // the constant tail beyond the window is added in closed form.
        let (lo, hi, sign) = if a > 0.0 { ((t - reach).max(t_lo), t, 1.0) } else { (t, (t + reach).min(t_hi), -1.0) };
        let span = hi - lo;
        let panels = if span > 0.0 { (span / panel).ceil() as usize } else { 0 };
        for p in 0..panels {
            let (pa, pb) = (lo + span * p as f64 / panels as f64, lo + span * (p + 1) as f64 / panels as f64);
            for (x, wq) in gx.iter().zip(&gw) {
                let tau = 0.5 * (pa + pb) + 0.5 * (pb - pa) * x;
                let kern = (-rate * (t - tau).abs()).exp() / eps * 0.5 * (pb - pa) * wq * sign;
                let (start, w) = grid.interpolation(tau);
                for (q, wk) in w.iter().enumerate() {
                    k[(i, start + q)] += kern * wk;
                }
            }
        }
        if a > 0.0 && t - reach < t_lo {
            k[(i, 0)] += (-rate * (t - t_lo)).exp() / a;
        }
        if a < 0.0 && t + reach > t_hi {
            k[(i, nt - 1)] += (-rate * (t_hi - t)).exp() / a;
        }
    }
    Ok(k)
}

/// Apply the scalar Green operator to a time series.
pub fn scalar_green(grid: &TimeGrid, a: f64, s: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    let k = scalar_green_matrix(grid, a, s)?;
    Ok((&k * DVector::from_column_slice(rhs)).iter().copied().collect())
}

/// Band-wise inverse H_s of Q_s = s⁴∂_t + (1/m)(m + Δ̄) on the H₁-free space.
#[derive(Clone, Debug)]
pub struct QsSolver {
    pub s: f64,
    /// Green matrix per band (None for the kernel band 1).
    pub kernels: Vec<Option<DMatrix<f64>>>,
    pub band: Vec<usize>,
    pub h1_tol: f64,
}

impl QsSolver {
    pub fn new(grid: &TimeGrid, basis: &BandBasis, s: f64) -> Result<Self> {
        let kernels = par::try_map(basis.cap + 1, |l| {
            if l == 1 {
                Ok(None)
            } else {
                scalar_green_matrix(grid, band_eigenvalue(basis.m, l), s).map(Some)
            }
        })?;
        Ok(QsSolver { s, kernels, band: basis.band.clone(), h1_tol: 1e-8 })
    }

    /// H_s rhs; fails when rhs has an H₁ component.
    pub fn solve(&self, rhs: &SpaceTimeField) -> Result<SpaceTimeField> {
        let scale = rhs.max_abs_coef().max(1e-300);
        let bad: Vec<usize> = (0..rhs.nt)
            .filter(|&t| {
                rhs.at(t).iter().zip(&self.band).any(|(c, l)| *l == 1 && c.abs() > self.h1_tol * scale.max(1.0))
            })
            .collect();
        if !bad.is_empty() {
            return Err(Error::Input(format!("right-hand side has an H1 component at time samples {bad:?}")));
        }
        let mut out = SpaceTimeField::zeros(rhs.nt, rhs.nb);
        for j in 0..rhs.nb {
            let Some(k) = &self.kernels[self.band[j]] else { continue };
            let series = DVector::from_iterator(rhs.nt, (0..rhs.nt).map(|t| rhs.at(t)[j]));
            let u = k * series;
            for t in 0..rhs.nt {
                out.at_mut(t)[j] = u[t];
            }
        }
        Ok(out)
    }

    /// Q_s f via the differentiation matrix.
    pub fn apply(&self, grid: &TimeGrid, m: usize, f: &SpaceTimeField) -> SpaceTimeField {
        let d = grid.derivative_matrix();
        let eps = self.s.powi(4);
        let mut out = SpaceTimeField::zeros(f.nt, f.nb);
        for j in 0..f.nb {
            let a = band_eigenvalue(m, self.band[j]);
            for t in 0..f.nt {
                let dt: f64 = (0..f.nt).map(|k| d[(t, k)] * f.at(k)[j]).sum();
                out.at_mut(t)[j] = eps * dt + a * f.at(t)[j];
            }
        }
        out
    }
}

/// Discrete Hölder seminorm [f]_α over sample pairs with 0 < |t − t'| ≤ 1.
fn time_seminorm(times: &[f64], vals: &[Vec<f64>], alpha: f64) -> f64 {
    let mut best = 0.0f64;
    for i in 0..times.len() {
        for j in i + 1..times.len() {
            let dt = times[j] - times[i];
            if dt > 1.0 {
                break;
            }
            let d = vals[i].iter().zip(&vals[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            best = best.max(d / dt.powf(alpha));
        }
    }
    best
}

fn sup(vals: &[Vec<f64>]) -> f64 {
    vals.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max)
}

/// Weighted Hölder norm ‖f‖_{k,α,ε} of a vector time series (k ∈ {0, 1}).
pub fn holder_norm_series(grid: &TimeGrid, f: &[Vec<f64>], k: usize, alpha: f64, weight: f64) -> f64 {
    if k == 0 {
        return sup(f) + time_seminorm(&grid.times, f, alpha);
    }
    let d = grid.derivative_matrix();
    let n = f[0].len();
    let df: Vec<Vec<f64>> = (0..f.len())
        .map(|t| (0..n).map(|i| (0..f.len()).map(|q| d[(t, q)] * f[q][i]).sum()).collect())
        .collect();
    sup(f) + weight * sup(&df) + weight * time_seminorm(&grid.times, &df, alpha)
}

/// Weighted inhomogeneous Hölder norm ‖f‖_{k,α,in,ε} of a space-time field
/// (k ∈ {0, 1}); sphere derivatives are taken as ambient tensors so that
/// differences between nodes are well defined.
pub fn holder_norm_field(grid: &TimeGrid, basis: &BandBasis, f: &SpaceTimeField, k: usize, alpha: f64, weight: f64) -> f64 {
    let nn = basis.nodes();
    let n = basis.m + 1;
    let nt = f.nt;
    let nodal = |coef: &[f64], order: usize| -> Vec<Vec<f64>> {
        (0..nn)
            .map(|q| {
                let tf = &basis.tangents[q];
                let mut out = Vec::new();
                match order {
                    0 => out.push((0..f.nb).map(|j| coef[j] * basis.node_jet(q, j).value).sum()),
                    1 => {
                        let mut gvec = vec![0.0; n];
                        for j in 0..f.nb {
                            let nj = basis.node_jet(q, j);
                            for a in 0..basis.m {
                                for i in 0..n {
                                    gvec[i] += coef[j] * nj.grad[a] * tf[a][i];
                                }
                            }
                        }
                        out = gvec;
                    }
                    _ => {
                        let mut h = vec![0.0; n * n];
                        for j in 0..f.nb {
                            let nj = basis.node_jet(q, j);
                            for a in 0..basis.m {
                                for b in 0..basis.m {
                                    for i in 0..n {
                                        for l in 0..n {
                                            h[i * n + l] += coef[j] * nj.hess[a][b] * tf[a][i] * tf[b][l];
                                        }
                                    }
                                }
                            }
                        }
                        out = h;
                    }
                }
                out
            })
            .collect()
    };
    let space_semi = |vals: &[Vec<f64>], exponent: f64| -> f64 {
        let mut best = 0.0f64;
        for a in 0..nn {
            for b in a + 1..nn {
                let xa = &basis.grid.nodes[a];
                let xb = &basis.grid.nodes[b];
                let dist = (0..n).map(|i| (xa[i] - xb[i]).powi(2)).sum::<f64>().sqrt();
                if dist < 1e-12 {
                    continue;
                }
                let d = vals[a].iter().zip(&vals[b]).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
                best = best.max(d / dist.powf(exponent));
            }
        }
        best
    };
    let per_time = |order: usize| -> Vec<Vec<Vec<f64>>> { (0..nt).map(|t| nodal(f.at(t), order)).collect() };
    let time_semi = |series: &[Vec<Vec<f64>>]| -> f64 {
        (0..nn)
            .map(|q| {
                let vals: Vec<Vec<f64>> = series.iter().map(|s| s[q].clone()).collect();
                time_seminorm(&grid.times, &vals, alpha)
            })
            .fold(0.0, f64::max)
    };
    let sup3 = |series: &[Vec<Vec<f64>>]| -> f64 { series.iter().map(|s| sup(s)).fold(0.0, f64::max) };
    let v0 = per_time(0);
    if k == 0 {
        let sx = v0.iter().map(|s| space_semi(s, 2.0 * alpha)).fold(0.0, f64::max);
        return sup3(&v0) + sx + time_semi(&v0);
    }
    let v1 = per_time(1);
    let v2 = per_time(2);
    let d = grid.derivative_matrix();
    let mut dt = SpaceTimeField::zeros(nt, f.nb);
    for t in 0..nt {
        for j in 0..f.nb {
            dt.at_mut(t)[j] = (0..nt).map(|q| d[(t, q)] * f.at(q)[j]).sum();
        }
    }
    let vt: Vec<Vec<Vec<f64>>> = (0..nt).map(|t| nodal(dt.at(t), 0)).collect();
    let sx2 = v2.iter().map(|s| space_semi(s, 2.0 * alpha)).fold(0.0, f64::max);
    let sxt = vt.iter().map(|s| space_semi(s, 2.0 * alpha)).fold(0.0, f64::max);
    sup3(&v0) + sup3(&v1) + sup3(&v2) + weight * sup3(&vt) + sx2 + weight * sxt + time_semi(&v2) + weight * time_semi(&vt)
}
