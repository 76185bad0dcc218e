use sphereflow::expansion::*;
use sphereflow::flowline::*;
use sphereflow::metric::*;
use sphereflow::scenario::Scenario;
use sphereflow::sphere::*;

const LADDER: [f64; 6] = [0.4, 0.3, 0.22, 0.16, 0.12, 0.08];

fn two_well_metric() -> MetricField {
    let a = -0.15;
    let bumps = vec![
        Bump { center: vec![1.2, 0.0, 0.0], width: 1.0, poly: vec![(a, vec![0, 0, 0]), (0.3 * a, vec![0, 1, 0])] },
        Bump { center: vec![-1.2, 0.1, 0.0], width: 1.1, poly: vec![(0.8 * a, vec![0, 0, 0])] },
    ];
    MetricField::new(2, MetricFamily::Conformal { bumps }, None).unwrap()
}

#[test]
fn extraction_recovers_a_pure_power() {
    let c = [1.5, -0.25, 3.0];
    let eval = |s: f64| -> sphereflow::Result<Vec<f64>> { Ok(c.iter().map(|v| v * s.powi(3)).collect()) };
    let ladder = [0.4, 0.3, 0.22, 0.16, 0.12, 0.1];
    let (c3, _) = extract_coefficient(eval, &ladder, 3).unwrap();
    for (a, b) in c3.iter().zip(&c) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
    let (c2, _) = extract_coefficient(eval, &ladder, 2).unwrap();
    assert!(c2.iter().all(|v| v.abs() < 1e-8), "{c2:?}");
}

#[test]
fn extraction_error_estimate_bounds_the_true_error() {
    // two-term polynomial whose top power is not resolved by the fit
    let eval = |s: f64| -> sphereflow::Result<Vec<f64>> { Ok(vec![0.7 * s.powi(2) + 2.0 * s.powi(5), -s + 0.5 * s.powi(5)]) };
    let ladder = LADDER;
    for (k, exact) in [(1usize, [0.0, -1.0]), (2, [0.7, 0.0])] {
        let (coef, est) = extract_coefficient(eval, &ladder, k).unwrap();
        let err = coef.iter().zip(&exact).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err > 0.0);
        assert!(est >= err, "order {k}: estimate {est:e} below true error {err:e}");
        assert!(est < 50.0 * err, "order {k}: estimate {est:e} not informative for {err:e}");
    }
}

#[test]
fn extraction_rejects_short_ladders() {
    let eval = |s: f64| -> sphereflow::Result<Vec<f64>> { Ok(vec![s]) };
    assert!(extract_coefficient(eval, &[0.3, 0.2, 0.1], 2).is_err());
    assert!(extract_coefficients(&[0.3, 0.2], &[&[1.0], &[2.0]], 0, 1, 1e10).is_err());
}

#[test]
fn euclidean_scenario_gives_an_all_zero_expansion() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/euclidean.toml")).unwrap();
    let sc = Scenario::from_toml(&text).unwrap();
    let setup = sc.setup().unwrap();
    let engine = setup.engine(&sc).unwrap();
    let state = engine.build(2).unwrap();
    for st in &state.scales {
        for f in &st.f {
            assert!(f.max_abs_coef() < 1e-12);
        }
        for y in &st.y {
            assert!(y.iter().flatten().all(|v| v.abs() < 1e-12));
        }
    }
    let report = engine.residual_sweep(&state);
    assert!(report.pass());
    for o in &report.orders {
        assert!(o.sup.iter().all(|v| *v < 1e-12), "{:?}", o.sup);
    }
    let refined = engine.newton_refine(&state, 2, 20).unwrap();
    assert_eq!(refined.iterations, 0);
    assert!(refined.final_residual < 1e-12);
}

#[test]
fn leading_coefficient_for_constant_ricci_matches_band_division() {
    // ψ even in every coordinate: the centre is a critical point of S, so the
    // flow line is frozen while Ricci is anisotropic.
    let a = -0.2;
    let bumps = vec![Bump { center: vec![0.0; 3], width: 1.0, poly: vec![(a, vec![0, 0, 0]), (0.6 * a, vec![2, 0, 0]), (0.3 * a, vec![0, 0, 2])] }];
    let g = MetricField::new(2, MetricFamily::Conformal { bumps }, None).unwrap();
    let grid = TimeGrid::new(3.0, 25, 0.5).unwrap();
    let line = integrate_flowline(&g, &[0.0; 3], &grid).unwrap();
    let basis = BandBasis::new(2, 4, 9).unwrap();
    let engine = Engine::new(&g, &line, &basis, &LADDER, 0.5).unwrap();
    let state = engine.build(0).unwrap();
    let m = 2.0;
    let t = line.len() / 2;
    let cj = line.curvature(&g, t).unwrap();
    let ric = |i: usize, j: usize| cj.ricci.at(&[i, j]);
    let tr = ric(0, 0) + ric(1, 1) + ric(2, 2);
    let aniso = (0..3).map(|i| (ric(i, i) - tr / 3.0).abs()).fold(0.0, f64::max);
    assert!(aniso > 1e-2, "test metric should have anisotropic Ricci ({aniso})");
    for st in &state.scales {
        let f0 = basis.synthesize(st.f[0].at(t));
        let mut worst = 0.0f64;
        let mut q = vec![0.0; basis.nodes()];
        for (k, x) in basis.grid.nodes.iter().enumerate() {
            let mut traceless = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let d = if i == j { tr / (m + 1.0) } else { 0.0 };
                    traceless += (ric(i, j) - d) * x[i] * x[j];
                    q[k] += ric(i, j) * x[i] * x[j] / 3.0;
                }
            }
            let closed = -(tr / (m + 1.0) - m / (m + 2.0) * traceless) / 3.0;
            worst = worst.max((f0[k] - closed).abs());
        }
        // the deviation is the extraction error of Φ₀ (bounded by its estimate)
        let bound = state.records[0].extraction_error * state.phi_scale;
        assert!(worst <= bound && bound < 1e-3 * tr.abs(), "s = {}: f₀ deviates by {worst:e} (bound {bound:e})", st.s);
        // Q_s f₀ = −⅓ Ric xx on the frozen line
        let i = state.targets.iter().position(|v| *v == st.s).unwrap();
        let qf = basis.synthesize(engine.qs[i].apply(&line.grid, 2, &st.f[0]).at(t));
        let sub = qf.iter().zip(&q).fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
        assert!(sub <= bound, "Q_s f₀ + ⅓Ric xx = {sub:e}");
        assert!(basis.h1_vector(&f0).iter().all(|v| v.abs() < 1e-12));
    }
    let rec = &state.records[0];
    assert!(rec.substitution < 1e-6, "substitution {}", rec.substitution);
    assert!(rec.h1_leak < 1e-12);
}

#[test]
fn bianchi_projections_vanish_along_the_two_well_line() {
    let g = two_well_metric();
    let (cps, _) = find_critical_points(&g, &[vec![-0.3, 0.15, 0.0]]).unwrap();
    let grid = TimeGrid::new(12.0, 97, 3.0).unwrap();
    let line = connecting_orbit(&g, &cps[0], 1.0, 1e-6, 80.0, &grid).unwrap();
    let basis = BandBasis::new(2, 6, 13).unwrap();
    let times = [20usize, 35, 48, 61, 77];
    let vectors: Vec<Vec<f64>> = times.iter().enumerate().map(|(q, _)| vec![0.3 + q as f64 * 0.1, -0.7, 0.45]).collect();
    let samples = bianchi_projections(&g, &line, &basis, &times, &vectors).unwrap();
    for s in &samples {
        assert!(s.max() < 1e-6, "{s:?}");
    }
}

#[test]
fn target_scales_off_the_ladder_match_ladder_targets() {
    let bumps = vec![Bump { center: vec![0.0; 3], width: 1.0, poly: vec![(-0.2, vec![0, 0, 0]), (-0.1, vec![2, 0, 0])] }];
    let g = MetricField::new(2, MetricFamily::Conformal { bumps }, None).unwrap();
    let grid = TimeGrid::new(3.0, 25, 0.5).unwrap();
    let line = integrate_flowline(&g, &[0.0; 3], &grid).unwrap();
    let basis = BandBasis::new(2, 4, 9).unwrap();
    let on = Engine::new(&g, &line, &basis, &LADDER, 0.5).unwrap().build(0).unwrap();
    let off = Engine::new(&g, &line, &basis, &LADDER, 0.5).unwrap().with_targets(&[0.3]).unwrap().build(0).unwrap();
    assert_eq!(off.targets, vec![0.3]);
    let a = &on.scales[1].f[0];
    let b = &off.scales[0].f[0];
    let d = a.coef.iter().zip(&b.coef).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(d < 1e-12, "{d:e}");
}
