//! The perturbation engine: numerical extraction of the Taylor coefficients
//! of Φ in s, the order-by-order construction of (Y_k, f_k), residual-decay
//! sweeps, and Newton refinement at a fixed scale.
//!
//! Every scale s of the ladder carries its own sequences (Y_{k,s}, f_{k,s}),
//! because the band Green operator H_s depends on s through s⁴∂_t. The
//! coefficients needed at a target scale s are extracted from evaluations at
//! all ladder scales σ of the candidate built from the s-sequences, with ∂_t f
//! rescaled by (s/σ)⁴ so that s⁴∂_t f keeps its order-zero role.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flowline::{flow_constant, holder_norm_field, holder_norm_series, FlowLine, PSolver, QsSolver, TimeGrid};
use crate::immersion::{Candidate, Immersion, PhiField};
use crate::metric::{loglog_slope, MetricField};
use crate::par;
use crate::sphere::{BandBasis, SpaceTimeField};

/// Highest supported expansion order.
pub const MAX_ORDER: usize = 3;

/// Ψ residuals below this level are roundoff; Newton stops there.
const ROUNDOFF_RESIDUAL: f64 = 1e-11;

/// Tolerances of the construction.
#[derive(Clone, Debug, Serialize)]
pub struct Tolerances {
    /// Extraction tolerance (absolute, relative to the scale of Φ₀).
    pub extraction: f64,
    /// Substitution tolerance of the band equations.
    pub substitution: f64,
    /// Largest admissible Vandermonde condition number.
    pub max_condition: f64,
    /// Largest admissible relative tail energy beyond the degree cap.
    pub max_tail: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { extraction: 1e-5, substitution: 1e-6, max_condition: 1e10, max_tail: 1e-3 }
    }
}

/// Least-squares fit of samples(σ) = Σ_{p=lo}^{hi} c_p σ^p over a ladder.
#[derive(Clone, Debug)]
pub struct Extraction {
    pub lo: usize,
    pub hi: usize,
    /// Coefficients c_lo..=c_hi (each of the sample length).
    pub coefficients: Vec<Vec<f64>>,
    /// Estimated error per order (max abs over entries): the change of the
    /// coefficient when the highest power is dropped from the fit.
    pub error: Vec<f64>,
    pub condition: f64,
}

impl Extraction {
    pub fn order(&self, p: usize) -> &[f64] {
        &self.coefficients[p - self.lo]
    }
    pub fn error_of(&self, p: usize) -> f64 {
        self.error[p - self.lo]
    }
}

fn fit_once(ladder: &[f64], samples: &[&[f64]], lo: usize, hi: usize) -> Result<(Vec<Vec<f64>>, f64)> {
    let np = ladder.len();
    let nc = hi - lo + 1;
    let smax = ladder.iter().fold(0.0f64, |m, v| m.max(*v));
    let v = DMatrix::from_fn(np, nc, |j, p| (ladder[j] / smax).powi((lo + p) as i32));
    let svd = v.clone().svd(true, true);
    let sv = &svd.singular_values;
    let cond = sv.max() / sv.min().max(1e-300);
    let len = samples[0].len();
    let b = DMatrix::from_fn(np, len, |j, e| samples[j][e]);
    let sol = svd.solve(&b, 0.0).map_err(|e| Error::Numerical(format!("extraction solve failed: {e}")))?;
    let coefs = (0..nc)
        .map(|p| {
            let scale = smax.powi((lo + p) as i32);
            (0..len).map(|e| sol[(p, e)] / scale).collect()
        })
        .collect();
    Ok((coefs, cond))
}

/// Fit the Taylor coefficients of orders lo..=hi from samples on a ladder.
pub fn extract_coefficients(ladder: &[f64], samples: &[&[f64]], lo: usize, hi: usize, max_condition: f64) -> Result<Extraction> {
    if hi < lo || ladder.len() < hi - lo + 2 || samples.len() != ladder.len() {
        return Err(Error::Input(format!(
            "extraction of orders {lo}..={hi} needs at least {} ladder points",
            hi.saturating_sub(lo) + 2
        )));
    }
    let (coefs, cond) = fit_once(ladder, samples, lo, hi)?;
    if cond > max_condition {
        return Err(Error::Numerical(format!("Vandermonde condition number {cond:.3e} above threshold")));
    }
    let mut error: Vec<f64> = coefs.iter().map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect();
    if hi > lo {
        let (lower, _) = fit_once(ladder, samples, lo, hi - 1)?;
        for p in 0..hi - lo {
            error[p] = coefs[p].iter().zip(&lower[p]).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        }
    }
    Ok(Extraction { lo, hi, coefficients: coefs, error, condition: cond })
}

/// Leading Taylor coefficient of order k of a vector-valued function of s,
/// with its estimated error.
pub fn extract_coefficient<F>(eval: F, ladder: &[f64], k: usize) -> Result<(Vec<f64>, f64)>
where
    F: Fn(f64) -> Result<Vec<f64>>,
{
    if ladder.len() < k + 2 {
        return Err(Error::Input(format!("order {k} needs at least {} ladder points", k + 2)));
    }
    let vals: Vec<Vec<f64>> = ladder.iter().map(|s| eval(*s)).collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = vals.iter().map(|v| v.as_slice()).collect();
    let hi = (ladder.len() - 2).max(k);
    let ex = extract_coefficients(ladder, &refs, 0, hi, 1e12)?;
    Ok((ex.order(k).to_vec(), ex.error_of(k)))
}

/// Sequences (Y_{k,s}, f_{k,s}) at one scale.
#[derive(Clone, Debug)]
pub struct ScaleState {
    pub s: f64,
    pub y: Vec<Vec<Vec<f64>>>,
    pub f: Vec<SpaceTimeField>,
}

impl ScaleState {
    /// Partial sums Σ_{k<ny} σ^k Y_k and Σ_{k<nf} σ^k f_k, with ∂_t f rescaled
    /// by (s/σ)⁴.
    pub fn candidate(&self, sigma: f64, ny: usize, nf: usize, nt: usize, n: usize, nb: usize) -> Candidate {
        let mut c = Candidate::zero(sigma, nt, n, nb);
        for (k, yk) in self.y.iter().take(ny).enumerate() {
            let w = sigma.powi(k as i32);
            for t in 0..nt {
                for i in 0..n {
                    c.y[t][i] += w * yk[t][i];
                }
            }
        }
        for (k, fk) in self.f.iter().take(nf).enumerate() {
            c.f.axpy(sigma.powi(k as i32), fk);
        }
        c.rate_scale = (self.s / sigma).powi(4);
        c
    }
}

/// Diagnostics recorded for one order.
#[derive(Clone, Debug, Serialize)]
pub struct OrderRecord {
    pub order: usize,
    /// Highest band carrying energy in f_k (over the ladder).
    pub degree: usize,
    /// ‖f_{k,s}‖_{1,α,in,s⁴} per ladder scale.
    pub f_norms: Vec<f64>,
    /// ‖Y_{k,s}‖_{1,α} per ladder scale (absent for the last order).
    pub y_norms: Vec<f64>,
    /// Largest |H₁ coefficient| of f_k.
    pub h1_leak: f64,
    /// Estimated extraction error of the coefficients used (normalized).
    pub extraction_error: f64,
    /// Largest normalized residue of orders that must already vanish.
    pub lower_residue: f64,
    /// Relative energy of the extracted coefficient beyond the degree cap.
    pub tail: f64,
    /// Substitution residual of the band equation (normalized).
    pub substitution: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpansionState {
    pub order: usize,
    /// Extraction ladder.
    pub ladder: Vec<f64>,
    /// Scales carrying sequences (one entry of `scales` each).
    pub targets: Vec<f64>,
    #[serde(skip)]
    pub scales: Vec<ScaleState>,
    pub records: Vec<OrderRecord>,
    /// Sup of Φ₀ on the interior window (normalization of all residues).
    pub phi_scale: f64,
    /// Normalized sup of Π applied to the order-0 and order-1 coefficients of Φ(s, 0, 0).
    pub h1_of_leading_orders: [f64; 2],
    /// Sup of Φ at each scale for the partial sums of each order (rows: order).
    #[serde(skip)]
    pub residuals: Vec<Vec<PhiField>>,
}

/// Residual decay for one order.
#[derive(Clone, Debug, Serialize)]
pub struct ResidualOrder {
    pub order: usize,
    pub ladder: Vec<f64>,
    pub sup: Vec<f64>,
    pub holder: Vec<f64>,
    pub slope: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResidualReport {
    pub orders: Vec<ResidualOrder>,
}

impl ResidualReport {
    pub fn pass(&self) -> bool {
        self.orders.iter().all(|o| o.pass)
    }
}

/// Outcome of Newton refinement at one scale.
#[derive(Clone, Debug, Serialize)]
pub struct RefineReport {
    pub s: f64,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub initial_phi_sup: f64,
    pub final_phi_sup: f64,
    pub iterations: usize,
    pub krylov_iterations: Vec<usize>,
    /// Interior sup distance of the refined Y and f from the partial sums.
    pub distance_y: f64,
    pub distance_f: f64,
    #[serde(skip)]
    pub y: Vec<Vec<f64>>,
    #[serde(skip)]
    pub f: Option<SpaceTimeField>,
}

/// Normalized H₁ projections of the curvature terms whose vanishing follows
/// from the second Bianchi identity, at one time sample.
#[derive(Clone, Debug, Serialize)]
pub struct BianchiSample {
    pub time: f64,
    /// Π(¼Ric_{ab;c}x^ax^bx^c − c S_{;a}x^a)
    pub cubic_gradient: f64,
    /// Π(¼Ric_{ab;cd}x^ax^bx^cV^d − c S_{;ab}x^aV^b)
    pub cubic_hessian: f64,
    /// Π(⅓Ric_{ab}x^ax^b)
    pub quadratic: f64,
    /// Π(⅓Ric_{ab;c}x^ax^bV^c)
    pub quadratic_gradient: f64,
}

impl BianchiSample {
    pub fn max(&self) -> f64 {
        self.cubic_gradient.max(self.cubic_hessian).max(self.quadratic).max(self.quadratic_gradient)
    }
}

/// Evaluate the Bianchi projection identities at the given time samples with
/// the given fixed vectors V (frame components, one per time).
pub fn bianchi_projections(
    g: &MetricField,
    line: &FlowLine,
    basis: &BandBasis,
    times: &[usize],
    vectors: &[Vec<f64>],
) -> Result<Vec<BianchiSample>> {
    let n = line.dim();
    let c = flow_constant(line.m);
    par::try_map(times.len(), |q| {
        let t = times[q];
        let v = &vectors[q];
        let cj = line.curvature(g, t)?;
        let nodes = &basis.grid.nodes;
        let mut terms = vec![vec![0.0; nodes.len()]; 4];
        let mut scales = [0.0f64; 4];
        for (k, x) in nodes.iter().enumerate() {
            let mut a1 = 0.0;
            let mut b1 = 0.0;
            let mut a2 = 0.0;
            let mut b2 = 0.0;
            let mut q0 = 0.0;
            let mut q1 = 0.0;
            for a in 0..n {
                b1 -= c * cj.grad_scalar[a] * x[a];
                for b in 0..n {
                    q0 += cj.ricci.at(&[a, b]) * x[a] * x[b] / 3.0;
                    b2 -= c * cj.hess_scalar.at(&[a, b]) * x[a] * v[b];
                    for cc in 0..n {
                        a1 += 0.25 * cj.d_ricci.at(&[a, b, cc]) * x[a] * x[b] * x[cc];
                        q1 += cj.d_ricci.at(&[a, b, cc]) * x[a] * x[b] * v[cc] / 3.0;
                        for d in 0..n {
                            a2 += 0.25 * cj.dd_ricci.at(&[a, b, cc, d]) * x[a] * x[b] * x[cc] * v[d];
                        }
                    }
                }
            }
            for (i, (u, w)) in [(a1, b1), (a2, b2), (q0, 0.0), (q1, 0.0)].iter().enumerate() {
                terms[i][k] = u + w;
                scales[i] = scales[i].max(u.abs()).max(w.abs());
            }
        }
        let proj = |i: usize| -> f64 {
            let h = basis.h1_vector(&terms[i]);
            let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            if scales[i] > 0.0 {
                norm / scales[i]
            } else {
                0.0
            }
        };
        Ok(BianchiSample {
            time: line.grid.times[t],
            cubic_gradient: proj(0),
            cubic_hessian: proj(1),
            quadratic: proj(2),
            quadratic_gradient: proj(3),
        })
    })
}

/// The expansion engine over one flow line.
pub struct Engine<'a> {
    pub imm: Immersion<'a>,
    /// Scales σ at which Φ is sampled for coefficient extraction.
    pub ladder: Vec<f64>,
    /// Scales s at which the sequences (Y_{k,s}, f_{k,s}) are built.
    pub targets: Vec<f64>,
    pub alpha: f64,
    pub tol: Tolerances,
    pub qs: Vec<QsSolver>,
    psolver: std::result::Result<PSolver, String>,
    interior: Vec<usize>,
    interior_grid: TimeGrid,
}

fn sup_over(values: &[f64], nn: usize, times: &[usize]) -> f64 {
    times.iter().flat_map(|&t| values[t * nn..(t + 1) * nn].iter()).fold(0.0, |m, v| m.max(v.abs()))
}

fn series_sup(y: &[Vec<f64>], times: &[usize]) -> f64 {
    times.iter().flat_map(|&t| y[t].iter()).fold(0.0, |m, v| m.max(v.abs()))
}

impl<'a> Engine<'a> {
    pub fn new(metric: &'a MetricField, line: &'a FlowLine, basis: &'a BandBasis, ladder: &[f64], alpha: f64) -> Result<Self> {
        if ladder.len() < 4 {
            return Err(Error::Input("the s-ladder needs at least 4 scales".into()));
        }
        if ladder.windows(2).any(|w| w[1] >= w[0]) || ladder.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Input("the s-ladder must be positive and strictly decreasing".into()));
        }
        let imm = Immersion::new(metric, line, basis)?;
        let grid = &line.grid;
        let qs = par::try_map(ladder.len(), |i| QsSolver::new(grid, basis, ladder[i]))?;
        let psolver = PSolver::new(line).map_err(|e| e.to_string());
        let interior = grid.interior();
        if interior.len() < 17 {
            return Err(Error::Input("interior window has fewer than 17 samples".into()));
        }
        let half = grid.times[interior[interior.len() - 1]];
        let interior_grid = TimeGrid::new(half, interior.len(), 0.0)?;
        Ok(Engine {
            imm,
            ladder: ladder.to_vec(),
            targets: ladder.to_vec(),
            alpha,
            tol: Tolerances::default(),
            qs,
            psolver,
            interior,
            interior_grid,
        })
    }

    /// Build the sequences at `targets` instead of at the ladder scales
    /// (coefficients are still extracted from samples on the ladder).
    pub fn with_targets(mut self, targets: &[f64]) -> Result<Self> {
        if targets.is_empty() || targets.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Input("target scales must be positive".into()));
        }
        let grid = &self.imm.line.grid;
        let basis = self.imm.basis;
        self.qs = par::try_map(targets.len(), |i| QsSolver::new(grid, basis, targets[i]))?;
        self.targets = targets.to_vec();
        Ok(self)
    }

    /// Ladder index of a target scale, if it is sampled by the ladder.
    fn ladder_index(&self, s: f64) -> Option<usize> {
        self.ladder.iter().position(|v| (v - s).abs() <= 1e-14 * s)
    }

    fn nt(&self) -> usize {
        self.imm.nt()
    }
    fn n(&self) -> usize {
        self.imm.n()
    }
    fn nn(&self) -> usize {
        self.imm.basis.nodes()
    }
    fn nb(&self) -> usize {
        self.imm.basis.len()
    }
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    /// Φ at the target scale itself for the partial sums of `state`.
    fn diagonal(&self, state: &ScaleState, ny: usize, nf: usize) -> Result<PhiField> {
        let c = state.candidate(state.s, ny, nf, self.nt(), self.n(), self.nb());
        self.imm.phi(&c, None)
    }

    /// Φ for the partial sums of `state` (first `ny` Y's, first `nf` f's) at
    /// every ladder scale σ.
    fn sweep(&self, state: &ScaleState, ny: usize, nf: usize) -> Result<Vec<PhiField>> {
        let (nt, n, nb) = (self.nt(), self.n(), self.nb());
        par::try_map(self.ladder.len(), |j| {
            let c = state.candidate(self.ladder[j], ny, nf, nt, n, nb);
            self.imm.phi(&c, None)
        })
    }

    /// Extraction over the ladder: the full fit from order 0 (for residues)
    /// and a fit from `lo` (for the coefficients).
    fn extract(&self, fields: &[PhiField], lo: usize) -> Result<(Extraction, Extraction)> {
        let refs: Vec<&[f64]> = fields.iter().map(|f| f.values.as_slice()).collect();
        let hi = self.ladder.len() - 2;
        let full = extract_coefficients(&self.ladder, &refs, 0, hi, self.tol.max_condition)?;
        let shifted = extract_coefficients(&self.ladder, &refs, lo, lo + hi, self.tol.max_condition)?;
        Ok((full, shifted))
    }

    /// Band coefficients of a nodal field and its largest relative tail
    /// energy on the interior. A field below `1e-8·scale` everywhere is
    /// extraction roundoff and maps to exactly zero; times where it is below
    /// that level do not count towards the tail.
    fn spectrum(&self, nodal: &[f64], scale: f64) -> (SpaceTimeField, f64) {
        let basis = self.imm.basis;
        let nn = self.nn();
        let mut out = SpaceTimeField::zeros(self.nt(), self.nb());
        if nodal.iter().all(|x| x.abs() <= 1e-8 * scale) {
            return (out, 0.0);
        }
        let mut tail = 0.0f64;
        for t in 0..self.nt() {
            let v = &nodal[t * nn..(t + 1) * nn];
            out.at_mut(t).copy_from_slice(&basis.analyze(v));
            if self.interior.contains(&t) && v.iter().any(|x| x.abs() > 1e-8 * scale) {
                tail = tail.max(basis.tail_energy(v));
            }
        }
        (out, tail)
    }

    fn h1_series(&self, nodal: &[f64]) -> Vec<Vec<f64>> {
        let nn = self.nn();
        (0..self.nt()).map(|t| self.imm.basis.h1_vector(&nodal[t * nn..(t + 1) * nn])).collect()
    }

    fn without_h1(&self, f: &SpaceTimeField) -> SpaceTimeField {
        let mut out = f.clone();
        let r = self.imm.basis.band_ranges[1].clone();
        for t in 0..out.nt {
            for v in &mut out.at_mut(t)[r.clone()] {
                *v = 0.0;
            }
        }
        out
    }

    fn solve_p(&self, rhs: &[Vec<f64>], scale: f64) -> Result<Vec<Vec<f64>>> {
        let size = series_sup(rhs, &(0..rhs.len()).collect::<Vec<_>>());
        if size <= 1e-8 * scale {
            return Ok(vec![vec![0.0; self.n()]; self.nt()]);
        }
        match &self.psolver {
            Ok(p) => Ok(p.solve(rhs)),
            Err(e) => Err(Error::Numerical(format!("P equation needed (right-hand side {size:.3e}) but unavailable: {e}"))),
        }
    }

    /// Substitution residual of Q_s f = rhs on the interior (absolute).
    fn substitution(&self, i: usize, f: &SpaceTimeField, rhs: &SpaceTimeField) -> f64 {
        let q = self.qs[i].apply(&self.imm.line.grid, self.imm.basis.m, f);
        let mut worst = 0.0f64;
        for &t in &self.interior {
            for (a, b) in q.at(t).iter().zip(rhs.at(t)) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    fn degree_of(&self, fields: &[&SpaceTimeField]) -> usize {
        let basis = self.imm.basis;
        let total: f64 = fields.iter().map(|f| f.coef.iter().map(|v| v * v).sum::<f64>()).sum();
        let mut deg = 0;
        for l in 0..=basis.cap {
            let r = basis.band_ranges[l].clone();
            let e: f64 = fields
                .iter()
                .map(|f| (0..f.nt).map(|t| f.at(t)[r.clone()].iter().map(|v| v * v).sum::<f64>()).sum::<f64>())
                .sum();
            if e > 1e-20 * total.max(1e-300) && e > 0.0 {
                deg = l;
            }
        }
        deg
    }

    fn restrict_interior_field(&self, f: &SpaceTimeField) -> SpaceTimeField {
        let mut out = SpaceTimeField::zeros(self.interior.len(), f.nb);
        for (q, &t) in self.interior.iter().enumerate() {
            out.at_mut(q).copy_from_slice(f.at(t));
        }
        out
    }

    fn restrict_interior_series(&self, y: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.interior.iter().map(|&t| y[t].clone()).collect()
    }

    /// Hölder norm ‖f‖_{1,α,in,s⁴} on the interior window.
    pub fn f_norm(&self, f: &SpaceTimeField, s: f64) -> f64 {
        holder_norm_field(&self.interior_grid, self.imm.basis, &self.restrict_interior_field(f), 1, self.alpha, s.powi(4))
    }

    /// Hölder norm ‖Y‖_{1,α} on the interior window.
    pub fn y_norm(&self, y: &[Vec<f64>]) -> f64 {
        holder_norm_series(&self.interior_grid, &self.restrict_interior_series(y), 1, self.alpha, 1.0)
    }

    /// Discrete ‖Φ‖_{0,α,in} on the interior window (band-limited part).
    pub fn phi_holder(&self, phi: &PhiField) -> f64 {
        let spec = phi.spectrum(self.imm.basis);
        holder_norm_field(&self.interior_grid, self.imm.basis, &self.restrict_interior_field(&spec), 0, self.alpha, 1.0)
    }

    /// Build the sequences up to order N at every ladder scale.
    pub fn build(&self, order: usize) -> Result<ExpansionState> {
        if order > MAX_ORDER {
            return Err(Error::Input(format!("expansion order {order} above the supported maximum {MAX_ORDER}")));
        }
        let nn = self.nn();
        let ns = self.targets.len();
        let basis = self.imm.basis;
        let base = ScaleState { s: self.ladder[0], y: Vec::new(), f: Vec::new() };
        // Φ(σ, 0, 0) is independent of the target scale.
        let phi0 = self.sweep(&base, 0, 0)?;
        let (full0, _) = self.extract(&phi0, 0)?;
        let c0 = full0.order(0);
        let phi_scale = {
            // below roundoff level the metric is treated as flat
            let v = sup_over(c0, nn, &self.interior);
            if v > 1e-12 {
                v
            } else {
                1.0
            }
        };
        let h1_norm = |nodal: &[f64]| -> f64 {
            self.interior.iter().map(|&t| basis.h1_vector(&nodal[t * nn..(t + 1) * nn]).iter().fold(0.0f64, |m, v| m.max(v.abs()))).fold(0.0, f64::max)
        };
        let h1_leading = [h1_norm(full0.order(0)) / phi_scale, h1_norm(full0.order(1)) / phi_scale];
        let (spec0, tail0) = self.spectrum(c0, phi_scale);
        let rhs0 = self.without_h1(&spec0);
        let mut scales: Vec<ScaleState> = Vec::with_capacity(ns);
        let mut subst = 0.0f64;
        for i in 0..ns {
            let f0 = self.qs[i].solve(&rhs0)?;
            subst = subst.max(self.substitution(i, &f0, &rhs0) / phi_scale);
            scales.push(ScaleState { s: self.targets[i], y: Vec::new(), f: vec![f0] });
        }
        let mut records = vec![OrderRecord {
            order: 0,
            degree: 0,
            f_norms: Vec::new(),
            y_norms: Vec::new(),
            h1_leak: 0.0,
            extraction_error: full0.error_of(0) / phi_scale,
            lower_residue: 0.0,
            tail: tail0,
            substitution: subst,
        }];
        let mut residuals: Vec<Vec<PhiField>> = Vec::new();
        for k in 0..order {
            // (i)-(ii): Π part of order k+2 gives Y_k.
            let sweeps_a = par::try_map(ns, |i| self.sweep(&scales[i], k, k + 1))?;
            let mut diag = Vec::with_capacity(ns);
            let mut residue = 0.0f64;
            let mut ext_err = 0.0f64;
            let mut ys = Vec::with_capacity(ns);
            for (i, sw) in sweeps_a.iter().enumerate() {
                diag.push(match self.ladder_index(self.targets[i]) {
                    Some(j) => sw[j].clone(),
                    None => self.diagonal(&scales[i], k, k + 1)?,
                });
                let (full, shifted) = self.extract(sw, k + 1)?;
                for p in 0..=k {
                    residue = residue.max(sup_over(full.order(p), nn, &self.interior) / phi_scale);
                }
                residue = residue.max(h1_norm(shifted.order(k + 1)) / phi_scale);
                let pi = self.h1_series(shifted.order(k + 2));
                ext_err = ext_err.max(shifted.error_of(k + 2) / phi_scale);
                ys.push(self.solve_p(&pi, phi_scale)?);
            }
            residuals.push(diag);
            for (st, y) in scales.iter_mut().zip(ys) {
                st.y.push(y);
            }
            // (iii): Π⊥ part of order k+1 (now including Y_k) gives f_{k+1}.
            let sweeps_b = par::try_map(ns, |i| self.sweep(&scales[i], k + 1, k + 1))?;
            let mut tail = 0.0f64;
            let mut subst = 0.0f64;
            for (i, sw) in sweeps_b.iter().enumerate() {
                let (full, shifted) = self.extract(sw, k + 1)?;
                for p in 0..=k {
                    residue = residue.max(sup_over(full.order(p), nn, &self.interior) / phi_scale);
                }
                let ck = shifted.order(k + 1);
                ext_err = ext_err.max(shifted.error_of(k + 1) / phi_scale);
                // (iv): Π of order k+2 now vanishes
                residue = residue.max(h1_norm(shifted.order(k + 2)) / phi_scale);
                let (spec, tl) = self.spectrum(ck, phi_scale);
                tail = tail.max(tl);
                let rhs = self.without_h1(&spec);
                let f = self.qs[i].solve(&rhs)?;
                subst = subst.max(self.substitution(i, &f, &rhs) / phi_scale);
                scales[i].f.push(f);
            }
            records[k].lower_residue = records[k].lower_residue.max(residue);
            records[k].extraction_error = records[k].extraction_error.max(ext_err);
            records.push(OrderRecord {
                order: k + 1,
                degree: 0,
                f_norms: Vec::new(),
                y_norms: Vec::new(),
                h1_leak: 0.0,
                extraction_error: ext_err,
                lower_residue: 0.0,
                tail,
                substitution: subst,
            });
        }
        // residual of the final order at the diagonal
        let last = par::try_map(ns, |i| self.diagonal(&scales[i], order, order + 1))?;
        residuals.push(last);
        for (k, rec) in records.iter_mut().enumerate() {
            let fields: Vec<&SpaceTimeField> = scales.iter().map(|st| &st.f[k]).collect();
            rec.degree = self.degree_of(&fields);
            rec.f_norms = scales.iter().map(|st| self.f_norm(&st.f[k], st.s)).collect();
            rec.y_norms = scales.iter().filter(|st| st.y.len() > k).map(|st| self.y_norm(&st.y[k])).collect();
            rec.h1_leak = fields.iter().map(|f| f.h1_size(basis)).fold(0.0, f64::max);
        }
        let state = ExpansionState {
            order,
            ladder: self.ladder.clone(),
            targets: self.targets.clone(),
            scales, records, phi_scale, h1_of_leading_orders: h1_leading, residuals };
        for rec in &state.records {
            if rec.tail > self.tol.max_tail {
                return Err(Error::Numerical(format!(
                    "order {} coefficient has relative tail {:.3e} beyond the degree cap",
                    rec.order, rec.tail
                )));
            }
        }
        Ok(state)
    }

    /// Residual sup norms and decay slopes for the orders of a built state.
    pub fn residual_sweep(&self, state: &ExpansionState) -> ResidualReport {
        let nn = self.nn();
        let orders = state
            .residuals
            .iter()
            .enumerate()
            .map(|(k, fields)| {
                let sup: Vec<f64> = fields.iter().map(|f| sup_over(&f.values, nn, &self.interior)).collect();
                let holder: Vec<f64> = fields.iter().map(|f| self.phi_holder(f)).collect();
                let threshold = k as f64 + 0.7;
                let negligible = sup.iter().all(|v| *v < 1e-12);
                let slope = if negligible { f64::INFINITY } else { loglog_slope(&state.targets, &sup) };
                ResidualOrder { order: k, ladder: state.targets.clone(), sup, holder, slope, threshold, pass: negligible || slope >= threshold }
            })
            .collect();
        ResidualReport { orders }
    }

    // ---- Newton refinement -------------------------------------------------

    fn unknown_len(&self) -> usize {
        self.nt() * (self.n() + self.nb())
    }

    fn pack(&self, y: &[Vec<f64>], f: &SpaceTimeField) -> DVector<f64> {
        let (nt, n, nb) = (self.nt(), self.n(), self.nb());
        let mut u = DVector::zeros(self.unknown_len());
        for t in 0..nt {
            for i in 0..n {
                u[t * n + i] = y[t][i];
            }
            for j in 0..nb {
                u[nt * n + t * nb + j] = f.at(t)[j];
            }
        }
        u
    }

    fn unpack(&self, u: &DVector<f64>) -> (Vec<Vec<f64>>, SpaceTimeField) {
        let (nt, n, nb) = (self.nt(), self.n(), self.nb());
        let y = (0..nt).map(|t| (0..n).map(|i| u[t * n + i]).collect()).collect();
        let mut f = SpaceTimeField::zeros(nt, nb);
        for t in 0..nt {
            for j in 0..nb {
                f.at_mut(t)[j] = u[nt * n + t * nb + j];
            }
        }
        (y, self.without_h1(&f))
    }

    /// Ψ = (s⁻²ΠΦ, Π⊥Φ) in the packed layout, together with Φ.
    fn psi(&self, s: f64, u: &DVector<f64>) -> Result<(DVector<f64>, PhiField)> {
        let (y, f) = self.unpack(u);
        let mut c = Candidate::zero(s, self.nt(), self.n(), self.nb());
        c.y = y;
        c.f = f;
        let phi = self.imm.phi(&c, None)?;
        let (spec, _) = self.spectrum(&phi.values, 0.0);
        let h1 = self.h1_series(&phi.values);
        let mut out = self.pack(&h1, &self.without_h1(&spec));
        let ny = self.nt() * self.n();
        for v in out.rows_mut(0, ny).iter_mut() {
            *v /= s * s;
        }
        Ok((out, phi))
    }

    /// Approximate inverse of the Ψ linearization: −blockdiag(G, H_s).
    fn precondition(&self, qs: &QsSolver, r: &DVector<f64>) -> Result<DVector<f64>> {
        let (y, f) = self.unpack(r);
        let gy = match &self.psolver {
            Ok(p) => p.solve(&y),
            Err(_) => y.clone(),
        };
        let hf = qs.solve(&f)?;
        Ok(-self.pack(&gy, &hf))
    }

    fn interior_norm(&self, v: &DVector<f64>) -> f64 {
        let (nt, n, nb) = (self.nt(), self.n(), self.nb());
        let mut worst = 0.0f64;
        for &t in &self.interior {
            for i in 0..n {
                worst = worst.max(v[t * n + i].abs());
            }
            for j in 0..nb {
                worst = worst.max(v[nt * n + t * nb + j].abs());
            }
        }
        worst
    }

    /// Damped Newton–GMRES on Ψ at scale index `i` of the ladder, started from
    /// the order-N partial sums of `state`.
    pub fn newton_refine(&self, state: &ExpansionState, i: usize, max_iter: usize) -> Result<RefineReport> {
        let st = &state.scales[i];
        let s = st.s;
        let order = state.order;
        let start = st.candidate(s, order, order + 1, self.nt(), self.n(), self.nb());
        let qs = &self.qs[i];
        let mut u = self.pack(&start.y, &start.f);
        let u0 = u.clone();
        let (mut r, phi) = self.psi(s, &u)?;
        let initial = self.interior_norm(&r);
        let initial_phi = sup_over(&phi.values, self.nn(), &self.interior);
        let mut res = initial;
        let mut phi_sup = initial_phi;
        let mut iters = 0;
        let mut krylov = Vec::new();
        let target = 1e-3 * initial;
        while iters < max_iter && res > target && res > ROUNDOFF_RESIDUAL {
            iters += 1;
            let base = r.clone();
            let apply = |z: &DVector<f64>| -> Result<DVector<f64>> {
                let w = self.precondition(qs, z)?;
                let wn = w.amax();
                if wn == 0.0 {
                    return Ok(DVector::zeros(z.len()));
                }
                let h = 1e-4 / wn;
                let (rp, _) = self.psi(s, &(&u + &w * h))?;
                Ok((rp - &base) / h)
            };
            let (z, its) = gmres(apply, &(-&r), 1e-4, 40)?;
            krylov.push(its);
            let du = self.precondition(qs, &z)?;
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..6 {
                let trial = &u + &du * step;
                let (rt, pt) = self.psi(s, &trial)?;
                let nr = self.interior_norm(&rt);
                if nr < res {
                    u = trial;
                    r = rt;
                    res = nr;
                    phi_sup = sup_over(&pt.values, self.nn(), &self.interior);
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                return Err(Error::Numerical(format!("Newton line search stagnated at s = {s} (residual {res:.3e})")));
            }
        }
        let (y, f) = self.unpack(&u);
        let (y0, f0) = self.unpack(&u0);
        let dy = self.interior.iter().flat_map(|&t| y[t].iter().zip(&y0[t]).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max);
        let mut df = f.clone();
        df.axpy(-1.0, &f0);
        let df = self.restrict_interior_field(&df).sup(self.imm.basis);
        Ok(RefineReport {
            s,
            initial_residual: initial,
            final_residual: res,
            initial_phi_sup: initial_phi,
            final_phi_sup: phi_sup,
            iterations: iters,
            krylov_iterations: krylov,
            distance_y: dy,
            distance_f: df,
            y,
            f: Some(f),
        })
    }
}

/// Restart-free GMRES with Givens rotations for a matrix-free operator.
/// Returns the approximate solution and the iteration count.
pub fn gmres<F>(apply: F, b: &DVector<f64>, rtol: f64, max_iter: usize) -> Result<(DVector<f64>, usize)>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let beta = b.norm();
    let nlen = b.len();
    if beta == 0.0 {
        return Ok((DVector::zeros(nlen), 0));
    }
    let mut basis: Vec<DVector<f64>> = vec![b / beta];
    let mut h = DMatrix::<f64>::zeros(max_iter + 1, max_iter);
    let mut cs = vec![0.0; max_iter];
    let mut sn = vec![0.0; max_iter];
    let mut g = DVector::<f64>::zeros(max_iter + 1);
    g[0] = beta;
    let mut k_done = 0;
    for k in 0..max_iter {
        let mut w = apply(&basis[k])?;
        for (j, vj) in basis.iter().enumerate() {
            let hij = w.dot(vj);
            h[(j, k)] = hij;
            w -= vj * hij;
        }
        let hn = w.norm();
        h[(k + 1, k)] = hn;
        for j in 0..k {
            let tmp = cs[j] * h[(j, k)] + sn[j] * h[(j + 1, k)];
            h[(j + 1, k)] = -sn[j] * h[(j, k)] + cs[j] * h[(j + 1, k)];
            h[(j, k)] = tmp;
        }
        let denom = (h[(k, k)].powi(2) + h[(k + 1, k)].powi(2)).sqrt();
        cs[k] = h[(k, k)] / denom;
        sn[k] = h[(k + 1, k)] / denom;
        h[(k, k)] = denom;
        h[(k + 1, k)] = 0.0;
        g[k + 1] = -sn[k] * g[k];
        g[k] *= cs[k];
        k_done = k + 1;
        if g[k + 1].abs() <= rtol * beta || hn == 0.0 {
            break;
        }
        basis.push(w / hn);
    }
    let mut yv = DVector::zeros(k_done);
    for i in (0..k_done).rev() {
        let mut acc = g[i];
        for j in i + 1..k_done {
            acc -= h[(i, j)] * yv[j];
        }
        yv[i] = acc / h[(i, i)];
    }
    let mut x = DVector::zeros(nlen);
    for (j, yj) in yv.iter().enumerate() {
        x += &basis[j] * *yj;
    }
    Ok((x, k_done))
}
