//! End-to-end checks of a scenario: each function runs one verification
//! (quadrature moments, normal-coordinate and mean-curvature expansions, the
//! flow line, the Bianchi projection identities, the Green solvers, the
//! residual decay of the expansion and Newton refinement) and returns a
//! serializable report carrying its own pass/fail verdict.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expansion::{bianchi_projections, BianchiSample, Engine, ExpansionState, OrderRecord, RefineReport, ResidualReport};
use crate::flowline::{scalar_green, CriticalPoint, FlowLine, PSolver, QsSolver, TimeGrid};
use crate::immersion::{Candidate, Immersion};
use crate::metric::{loglog_slope, verify_normal_expansion, CurvatureJet, MetricFamily, MetricField, NormalExpansionReport};
use crate::scenario::{Scenario, Setup};
use crate::sphere::{band_eigenvalue, build_grid, BandBasis, SpaceTimeField};
use crate::symtensor::sphere_moment;

/// Seed of every randomized check (reports are deterministic).
pub const SEED: u64 = 0x5eed_2024;

/// Thresholds of the checks.
pub mod tolerance {
    pub const MOMENT: f64 = 1e-8;
    pub const TAYLOR: f64 = 1e-4;
    pub const SLOPE_MARGIN: f64 = 0.7;
    pub const EUCLIDEAN_H: f64 = 1e-10;
    pub const SPACE_FORM_H: f64 = 1e-6;
    pub const BIANCHI: f64 = 1e-6;
    pub const SUBSTITUTION: f64 = 1e-7;
    pub const CLOSED_FORM: f64 = 1e-2;
    pub const NORM_SPREAD: f64 = 0.2;
    pub const REFINE_REDUCTION: f64 = 1e2;
    /// Fields below this level are roundoff.
    pub const NEGLIGIBLE: f64 = 1e-12;
}

// ---- moments --------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct MomentRow {
    pub m: usize,
    pub order: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentsReport {
    pub quadrature: usize,
    pub rows: Vec<MomentRow>,
    /// ∫_{S²} (x¹)⁴ by quadrature (closed form 4π/5).
    pub x1_fourth: f64,
    pub x1_fourth_expected: f64,
    /// max_ij |∫_{S²} x^i x^j − (4π/3) δ^ij|.
    pub second_moment_error: f64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn quadrature_moment_error(m: usize, lq: usize, l: usize) -> Result<f64> {
    let grid = build_grid(m, lq)?;
    let n = m + 1;
    let exact = sphere_moment(m, l);
    let scale = sphere_moment(m, l - l % 2).max_abs();
    let mut idx = vec![0usize; l];
    let mut worst = 0.0f64;
    for flat in 0..n.pow(l as u32) {
        let mut k = flat;
        for slot in idx.iter_mut().rev() {
            *slot = k % n;
            k /= n;
        }
        let vals: Vec<f64> = grid.nodes.iter().map(|x| idx.iter().map(|&i| x[i]).product()).collect();
        worst = worst.max((grid.integrate(&vals) - exact.get(&idx)).abs() / scale);
    }
    Ok(worst)
}

/// Quadrature moments of orders ≤ 8 on S² and S³ (and S^m of the scenario)
/// against the closed forms C_k δ^⊙k.
pub fn moments(scenario: &Scenario) -> Result<MomentsReport> {
    let lq = scenario.sphere.quadrature.max(9);
    let mut dims = vec![2, 3];
    if !dims.contains(&scenario.m) {
        dims.insert(0, scenario.m);
    }
    let mut rows = Vec::new();
    for &m in &dims {
        for l in 0..=8 {
            rows.push(MomentRow { m, order: l, max_rel_error: quadrature_moment_error(m, lq, l)? });
        }
    }
    let g2 = build_grid(2, lq)?;
    let pi = std::f64::consts::PI;
    let x1_fourth = g2.integrate(&g2.nodes.iter().map(|x| x[0].powi(4)).collect::<Vec<_>>());
    let mut second = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let q = g2.integrate(&g2.nodes.iter().map(|x| x[i] * x[j]).collect::<Vec<_>>());
            let want = if i == j { 4.0 * pi / 3.0 } else { 0.0 };
            second = second.max((q - want).abs());
        }
    }
    let x1_expected = 4.0 * pi / 5.0;
    let max_rel_error = rows
        .iter()
        .map(|r| r.max_rel_error)
        .fold((x1_fourth - x1_expected).abs() / x1_expected, f64::max)
        .max(second / (4.0 * pi / 3.0));
    Ok(MomentsReport {
        quadrature: lq,
        rows,
        x1_fourth,
        x1_fourth_expected: x1_expected,
        second_moment_error: second,
        max_rel_error,
        tolerance: tolerance::MOMENT,
        pass: max_rel_error <= tolerance::MOMENT,
    })
}

// ---- normal-coordinate and mean-curvature expansions ------------------------

/// Radii of the normal-chart fits.
pub const TAYLOR_RADII: [f64; 8] = [0.16, 0.12, 0.09, 0.065, 0.045, 0.03, 0.02, 0.012];

#[derive(Clone, Debug, Serialize)]
pub struct NormalExpansionAt {
    pub time: f64,
    pub point: Vec<f64>,
    pub report: NormalExpansionReport,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MeanCurvatureExpansion {
    pub ladder: Vec<f64>,
    /// max over nodes of s·|H − 1/s + (s/3) Ric(x,x)| per scale.
    pub remainder: Vec<f64>,
    pub slope: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct TaylorReport {
    pub normal_expansions: Vec<NormalExpansionAt>,
    pub mean_curvature: MeanCurvatureExpansion,
    /// max |H − 1/s|·s for round spheres in flat space.
    pub euclidean_h_error: f64,
    /// max |H − cot s| for geodesic spheres of the unit space form.
    pub space_form_h_error: f64,
    pub pass: bool,
}

/// A line frozen at `p` on a short window (for reference geometries).
fn frozen_line(g: &MetricField, p: &[f64]) -> Result<FlowLine> {
    let grid = TimeGrid::new(1.0, 17, 0.0)?;
    crate::flowline::integrate_flowline(g, p, &grid)
}

fn reference_h_errors(ladder: &[f64]) -> Result<(f64, f64)> {
    let basis = BandBasis::new(2, 4, 9)?;
    let flat = MetricField::euclidean(2);
    let sphere = MetricField::new(2, MetricFamily::SpaceForm { kappa: 1.0 }, None)?;
    let mut errs = [0.0f64; 2];
    for (q, g) in [&flat, &sphere].into_iter().enumerate() {
        let line = frozen_line(g, &[0.1, -0.05, 0.08])?;
        let imm = Immersion::new(g, &line, &basis)?;
        for &s in ladder {
            let geo = imm.geometry_at(&Candidate::zero(s, line.len(), 3, basis.len()), 8)?;
            for ng in &geo {
                let e = if q == 0 { s * (ng.mean_curvature - 1.0 / s).abs() } else { (ng.mean_curvature - 1.0 / s.tan()).abs() };
                errs[q] = errs[q].max(e);
            }
        }
    }
    Ok((errs[0], errs[1]))
}

/// Normal-chart expansions at three points of the flow line, the leading
/// terms of the mean curvature of small spheres at the middle of the line,
/// and the flat and space-form reference spheres.
pub fn taylor(scenario: &Scenario, setup: &Setup) -> Result<TaylorReport> {
    let g = &setup.metric;
    let line = &setup.line;
    let flat = g.is_flat();
    let nt = line.len();
    let picks = [nt / 4, nt / 2, 3 * nt / 4];
    let mut normal_expansions = Vec::new();
    for &t in &picks {
        let p = line.points[t][..line.dim()].to_vec();
        let report = verify_normal_expansion(g, &p, &TAYLOR_RADII)?;
        let pass = if flat {
            report.max_rel_err < tolerance::NEGLIGIBLE
        } else {
            report.max_rel_err <= tolerance::TAYLOR
                && report.min_slope_quadratic >= 2.0 + tolerance::SLOPE_MARGIN
                && report.min_slope_linear >= 1.0 + tolerance::SLOPE_MARGIN
        };
        normal_expansions.push(NormalExpansionAt { time: line.grid.times[t], point: p, report, pass });
    }
    // mean curvature: H = 1/s − (s/3) Ric(x, x) + O(s²)
    let ladder = scenario.expansion.ladder.clone();
    let imm = Immersion::new(g, line, &setup.basis)?;
    let t = nt / 2;
    let cj = line.curvature(g, t)?;
    let n = line.dim();
    let mut remainder = Vec::new();
    for &s in &ladder {
        let geo = imm.geometry_at(&Candidate::zero(s, nt, n, setup.basis.len()), t)?;
        let mut worst = 0.0f64;
        for (k, ng) in geo.iter().enumerate() {
            let x = &setup.basis.grid.nodes[k];
            let mut ricxx = 0.0;
            for a in 0..n {
                for b in 0..n {
                    ricxx += cj.ricci.at(&[a, b]) * x[a] * x[b];
                }
            }
            worst = worst.max(s * (ng.mean_curvature - 1.0 / s + s / 3.0 * ricxx).abs());
        }
        remainder.push(worst);
    }
    let negligible = remainder.iter().all(|v| *v < tolerance::NEGLIGIBLE);
    let slope = if negligible { f64::INFINITY } else { loglog_slope(&ladder, &remainder) };
    let threshold = 2.0 + tolerance::SLOPE_MARGIN;
    let mean_curvature = MeanCurvatureExpansion { ladder: ladder.clone(), remainder, slope, threshold, pass: slope >= threshold };
    let (euclidean_h_error, space_form_h_error) = reference_h_errors(&ladder)?;
    let pass = normal_expansions.iter().all(|e| e.pass)
        && mean_curvature.pass
        && euclidean_h_error <= tolerance::EUCLIDEAN_H
        && space_form_h_error <= tolerance::SPACE_FORM_H;
    Ok(TaylorReport { normal_expansions, mean_curvature, euclidean_h_error, space_form_h_error, pass })
}

// ---- flow line ---------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct FlowSample {
    pub time: f64,
    pub point: Vec<f64>,
    pub scalar: f64,
    pub speed: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlowlineReport {
    pub samples: Vec<FlowSample>,
    pub past_limit: Option<CriticalPoint>,
    pub future_limit: Option<CriticalPoint>,
    /// Largest increase of S between consecutive samples (≤ 0 for a gradient line).
    pub max_scalar_increase: f64,
    pub stationary: bool,
    pub connects_distinct_indices: bool,
    pub pass: bool,
}

pub fn flowline(scenario: &Scenario, setup: &Setup) -> Result<FlowlineReport> {
    let line = &setup.line;
    let n = line.dim();
    let samples: Vec<FlowSample> = (0..line.len())
        .map(|t| FlowSample {
            time: line.grid.times[t],
            point: line.points[t][..n].to_vec(),
            scalar: line.scalar[t],
            speed: line.velocity_frame[t].iter().map(|v| v * v).sum::<f64>().sqrt(),
        })
        .collect();
    let max_scalar_increase = line.scalar.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let stationary = samples.iter().all(|s| s.speed < tolerance::NEGLIGIBLE);
    let [past, future] = line.limits.clone();
    let connects = match (&past, &future) {
        (Some(a), Some(b)) => a.nondegenerate && b.nondegenerate && a.morse_index != b.morse_index,
        _ => false,
    };
    let needs_connection = matches!(scenario.flow.source, crate::scenario::FlowSource::ConnectingOrbit { .. });
    let pass = max_scalar_increase <= 1e-12 && (!needs_connection || connects);
    Ok(FlowlineReport {
        samples,
        past_limit: past,
        future_limit: future,
        max_scalar_increase,
        stationary,
        connects_distinct_indices: connects,
        pass,
    })
}

// ---- Bianchi projections -----------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct BianchiReport {
    pub samples: Vec<BianchiSample>,
    pub max: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Bianchi projection identities at `count` seeded random interior times with
/// random unit vectors V.
pub fn bianchi(setup: &Setup, count: usize) -> Result<BianchiReport> {
    let line = &setup.line;
    let interior = line.grid.interior();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let n = line.dim();
    let mut times = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count);
    for _ in 0..count {
        times.push(interior[rng.gen_range(0..interior.len())]);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        vectors.push(v.iter().map(|x| x / norm).collect());
    }
    let samples = bianchi_projections(&setup.metric, line, &setup.basis, &times, &vectors)?;
    let max = samples.iter().map(|s| s.max()).fold(0.0, f64::max);
    Ok(BianchiReport { samples, max, tolerance: tolerance::BIANCHI, pass: max <= tolerance::BIANCHI })
}

// ---- Green solvers -------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct GreenRow {
    pub s: f64,
    /// Interior sup of Q_s(H_s r) − r relative to sup |r|.
    pub qs_substitution: f64,
    /// Constant data: |H_s c − c/a_l| relative.
    pub constant_error: f64,
    /// Sinusoid data: interior error against the exact periodic response,
    /// relative to its amplitude.
    pub sinusoid_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GreensReport {
    pub rows: Vec<GreenRow>,
    /// Interior sup of P(G r) − r relative to sup |r| (absent when S has no
    /// nondegenerate Hessian along the line, e.g. for constant curvature).
    pub p_substitution: Option<f64>,
    pub p_kernel_dimension: Option<usize>,
    pub substitution_tolerance: f64,
    pub closed_form_tolerance: f64,
    pub pass: bool,
}

/// Band-limited random time series: a few random modes resolved by at least
/// 64 samples per period.
fn random_series(rng: &mut ChaCha8Rng, grid: &TimeGrid) -> Vec<f64> {
    let omega_max = std::f64::consts::TAU / (64.0 * grid.step);
    let times = &grid.times;
    let modes: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(0.0..omega_max), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    times.iter().map(|t| modes.iter().map(|(a, w, p)| a * (w * t + p).cos()).sum()).collect()
}

fn interior_sup(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn greens(scenario: &Scenario, setup: &Setup) -> Result<GreensReport> {
    let line = &setup.line;
    let grid = &line.grid;
    let basis = &setup.basis;
    let interior = grid.interior();
    let m = scenario.m;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut rhs = SpaceTimeField::zeros(grid.len(), basis.len());
    for j in 0..basis.len() {
        if basis.band[j] == 1 {
            continue;
        }
        let series = random_series(&mut rng, grid);
        for (t, v) in series.into_iter().enumerate() {
            rhs.at_mut(t)[j] = v;
        }
    }
    let rscale = rhs.max_abs_coef();
    let rows = crate::par::try_map(scenario.expansion.ladder.len(), |i| {
        let s = scenario.expansion.ladder[i];
        let q = QsSolver::new(grid, basis, s)?;
        let back = q.apply(grid, m, &q.solve(&rhs)?);
        let qs_substitution = interior_sup(
            interior.iter().flat_map(|&t| back.at(t).iter().zip(rhs.at(t)).map(|(a, b)| a - b).collect::<Vec<_>>()),
        ) / rscale;
        // closed forms on the scalar band equation s⁴u′ + a u = r
        let a = band_eigenvalue(m, 2);
        let u = scalar_green(grid, a, s, &vec![1.0; grid.len()])?;
        let constant_error = interior_sup(u.iter().map(|v| (v - 1.0 / a) * a));
        let omega = 2.0;
        let rsin: Vec<f64> = grid.times.iter().map(|t| (omega * t).sin()).collect();
        let u = scalar_green(grid, a, s, &rsin)?;
        let eps = s.powi(4);
        let amp = 1.0 / (a * a + eps * eps * omega * omega).sqrt();
        let phase = (eps * omega).atan2(a);
        let sinusoid_error =
            interior_sup(interior.iter().map(|&t| u[t] - amp * (omega * grid.times[t] - phase).sin())) / amp;
        Ok(GreenRow { s, qs_substitution, constant_error, sinusoid_error })
    })?;
    let (p_substitution, p_kernel_dimension) = match PSolver::new(line) {
        Ok(p) => {
            let n = line.dim();
            let r: Vec<Vec<f64>> = {
                let cols: Vec<Vec<f64>> = (0..n).map(|_| random_series(&mut rng, grid)).collect();
                (0..grid.len()).map(|t| (0..n).map(|i| cols[i][t]).collect()).collect()
            };
            let y = p.solve(&r);
            let back = p.apply(grid, &y);
            let scale = interior_sup(r.iter().flatten().copied());
            let err = interior_sup(interior.iter().flat_map(|&t| (0..n).map(|i| back[t][i] - r[t][i]).collect::<Vec<_>>())) / scale;
            (Some(err), Some(p.kernel.len()))
        }
        Err(_) => (None, None),
    };
    let pass = rows.iter().all(|r| {
        r.qs_substitution <= tolerance::SUBSTITUTION
            && r.constant_error <= tolerance::CLOSED_FORM
            && r.sinusoid_error <= tolerance::CLOSED_FORM
    }) && p_substitution.is_none_or(|e| e <= tolerance::SUBSTITUTION);
    Ok(GreensReport {
        rows,
        p_substitution,
        p_kernel_dimension,
        substitution_tolerance: tolerance::SUBSTITUTION,
        closed_form_tolerance: tolerance::CLOSED_FORM,
        pass,
    })
}

// ---- expansion -----------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct NormStability {
    pub order: usize,
    /// max |norm/median − 1| over the ladder for f_k and Y_k.
    pub f_spread: f64,
    pub y_spread: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpandReport {
    pub state: ExpansionState,
    pub residuals: ResidualReport,
    pub stability: Vec<NormStability>,
    pub pass: bool,
}

fn spread(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().all(|v| v.abs() < tolerance::NEGLIGIBLE) {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    values.iter().map(|v| (v / median - 1.0).abs()).fold(0.0, f64::max)
}

fn stability(records: &[OrderRecord]) -> Vec<NormStability> {
    records
        .iter()
        .map(|r| {
            let (f_spread, y_spread) = (spread(&r.f_norms), spread(&r.y_norms));
            NormStability {
                order: r.order,
                f_spread,
                y_spread,
                pass: f_spread <= tolerance::NORM_SPREAD && y_spread <= tolerance::NORM_SPREAD,
            }
        })
        .collect()
}

/// Build the expansion to `order` and measure the residual decay of every
/// partial order.
pub fn expand(engine: &Engine, order: usize) -> Result<ExpandReport> {
    let state = engine.build(order)?;
    let residuals = engine.residual_sweep(&state);
    let stability = stability(&state.records);
    let pass = residuals.pass() && residuals.orders.len() >= 1 && stability.iter().all(|s| s.pass) && engine.targets.len() >= 5;
    Ok(ExpandReport { state, residuals, stability, pass })
}

// ---- refinement ------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct RefineSummary {
    pub runs: Vec<RefineReport>,
    pub check_scale: f64,
    /// Initial over final interior sup of Φ at the check scale.
    pub reduction: f64,
    pub reduction_threshold: f64,
    /// Distances to the partial sums decrease with s along the refine ladder.
    pub monotone_y: bool,
    pub monotone_f: bool,
    pub pass: bool,
}

fn decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0] || w[0] < tolerance::NEGLIGIBLE)
}

/// Newton refinement at every refine target, started from the order-`order`
/// partial sums built at those scales.
pub fn refine(scenario: &Scenario, setup: &Setup, order: usize) -> Result<RefineSummary> {
    if order == 0 {
        return Err(Error::Input("refinement needs an expansion of order ≥ 1".into()));
    }
    let targets = scenario.refine_targets();
    let engine = setup.engine(scenario)?.with_targets(&targets)?;
    let state = engine.build(order)?;
    let mut runs = Vec::with_capacity(targets.len());
    for i in 0..targets.len() {
        runs.push(engine.newton_refine(&state, i, scenario.expansion.refine_iterations)?);
    }
    let check = scenario.expansion.refine_scale;
    let at = runs.iter().find(|r| (r.s - check).abs() <= 1e-14).expect("check scale is a target");
    // a partial sum already at roundoff level is exact: nothing left to reduce
    let reduction = if at.initial_phi_sup < tolerance::NEGLIGIBLE {
        f64::INFINITY
    } else if at.final_phi_sup > 0.0 {
        at.initial_phi_sup / at.final_phi_sup
    } else {
        f64::INFINITY
    };
    let ladder: Vec<&RefineReport> = runs.iter().filter(|r| scenario.expansion.refine_ladder.iter().any(|s| (s - r.s).abs() <= 1e-14)).collect();
    let dy: Vec<f64> = ladder.iter().map(|r| r.distance_y).collect();
    let df: Vec<f64> = ladder.iter().map(|r| r.distance_f).collect();
    let (monotone_y, monotone_f) = (decreasing(&dy), decreasing(&df));
    let pass = reduction >= tolerance::REFINE_REDUCTION && monotone_y && monotone_f;
    Ok(RefineSummary {
        runs,
        check_scale: check,
        reduction,
        reduction_threshold: tolerance::REFINE_REDUCTION,
        monotone_y,
        monotone_f,
        pass,
    })
}

/// Curvature jet at the middle of the line (reported by the flow-line command).
pub fn midpoint_curvature(setup: &Setup) -> Result<CurvatureJet> {
    setup.line.curvature(&setup.metric, setup.line.len() / 2)
}
