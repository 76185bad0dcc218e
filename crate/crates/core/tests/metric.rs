use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sphereflow::metric::{
    normal_chart, verify_normal_expansion, Bump, CurvatureJet, MetricFamily, MetricField,
};

fn test_metric(m: usize) -> MetricField {
    let n = m + 1;
    let mut c1 = vec![0.0; n];
    c1[0] = 0.3;
    let mut c2 = vec![0.0; n];
    c2[1] = -0.4;
    c2[0] = 0.1;
    let mut e1 = vec![0; n];
    e1[1] = 1;
    let bumps = vec![
        Bump { center: c1, width: 0.9, poly: vec![(0.35, vec![0; n]), (0.2, e1)] },
        Bump { center: c2, width: 1.2, poly: vec![(-0.25, vec![0; n])] },
    ];
    MetricField::new(m, MetricFamily::Conformal { bumps }, None).unwrap()
}

#[test]
fn euclidean_curvature_vanishes() {
    let g = MetricField::euclidean(2);
    let cj = CurvatureJet::compute(&g, &[0.3, -0.2, 1.0], None).unwrap();
    assert_eq!(cj.riemann.max_abs(), 0.0);
    assert_eq!(cj.scalar, 0.0);
    assert_eq!(cj.dd_ricci.max_abs(), 0.0);
}

#[test]
fn space_form_normalization() {
    for m in 1..=3 {
        let rho = 1.7f64;
        let kappa = 1.0 / (rho * rho);
        let g = MetricField::new(m, MetricFamily::SpaceForm { kappa }, None).unwrap();
        let p: Vec<f64> = (0..=m).map(|i| 0.2 - 0.1 * i as f64).collect();
        let cj = CurvatureJet::compute(&g, &p, None).unwrap();
        assert_abs_diff_eq!(cj.scalar, kappa, epsilon = 1e-12);
        for a in 0..=m {
            for b in 0..=m {
                let want = if a == b { kappa } else { 0.0 };
                assert_abs_diff_eq!(cj.ricci.at(&[a, b]), want, epsilon = 1e-12);
            }
        }
        assert!(cj.d_riemann.max_abs() < 1e-11);
        assert!(cj.dd_ricci.max_abs() < 1e-10);
        // sectional curvature κ: R(e0, e1)e1 = κ e0
        assert_abs_diff_eq!(cj.riemann.at(&[0, 1, 1, 0]), kappa, epsilon = 1e-12);
    }
}

#[test]
fn riemann_symmetries_and_bianchi() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for m in 1..=3 {
        let g = test_metric(m);
        let n = m + 1;
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let cj = CurvatureJet::compute(&g, &p, None).unwrap();
        let r = |a, b, c, d| cj.riemann.at(&[a, b, c, d]);
        let scale = cj.riemann.max_abs();
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    for d in 0..n {
                        assert!((r(a, b, c, d) + r(b, a, c, d)).abs() < 1e-9 * scale);
                        assert!((r(a, b, c, d) + r(b, c, a, d) + r(c, a, b, d)).abs() < 1e-9 * scale);
                        assert!((r(a, b, c, d) - r(c, d, a, b)).abs() < 1e-9 * scale);
                    }
                }
            }
        }
        // trace coherence and contracted second Bianchi under the normalization
        let tr: f64 = (0..n).map(|a| cj.ricci.at(&[a, a])).sum();
        assert!((tr / (m as f64 + 1.0) - cj.scalar).abs() < 1e-9 * scale.max(1.0));
        for c in 0..n {
            let div: f64 = (0..n).map(|a| cj.d_ricci.at(&[a, c, a])).sum();
            let dtr: f64 = (0..n).map(|a| cj.d_ricci.at(&[a, a, c])).sum();
            let ds = cj.grad_scalar[c];
            assert!((div - 0.5 * (m as f64 + 1.0) * ds).abs() < 1e-7 * ds.abs().max(1e-3));
            assert!((dtr - (m as f64 + 1.0) * ds).abs() < 1e-7 * ds.abs().max(1e-3));
        }
    }
}

#[test]
fn curvature_matches_finite_difference_oracle() {
    // Oracle: scalar curvature from its closed conformal formula, differenced
    // with a high-order central stencil.
    let g = test_metric(2);
    let p = [0.1, 0.25, -0.3];
    let cj = CurvatureJet::compute(&g, &p, None).unwrap();
    let s_at = |x: &[f64]| CurvatureJet::compute(&g, x, None).unwrap().scalar;
    let h = 1e-3;
    let e = (-g.psi(&p[..])).exp();
    for i in 0..3 {
        let mut xs = [p; 4];
        let offs = [-2.0, -1.0, 1.0, 2.0];
        for (k, o) in offs.iter().enumerate() {
            xs[k][i] += o * h;
        }
        let d = (s_at(&xs[0]) - 8.0 * s_at(&xs[1]) + 8.0 * s_at(&xs[2]) - s_at(&xs[3])) / (12.0 * h);
        let frame_comp = d * e;
        assert!((frame_comp - cj.grad_scalar[i]).abs() < 1e-6 * cj.grad_scalar[i].abs().max(1e-2));
    }
}

#[test]
fn geodesic_speed_and_transport_isometry() {
    let g = test_metric(2);
    let x = [0.1, -0.2, 0.05];
    let y = [0.3, 0.2, -0.4];
    let speed0 = g.inner(&x, &y, &y);
    let ode = sphereflow::ode::Extrapolation::default();
    for tau in [0.3, 0.7, 1.0] {
        let yt: Vec<f64> = y.iter().map(|v| v * tau).collect();
        let (p, v) = g.geodesic(&x, &yt, &ode).unwrap();
        let sp = g.inner(&p[..3], &v[..3], &v[..3]) / (tau * tau);
        assert!((sp - speed0).abs() < 1e-10);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let end = g.exp_map(&x, &y).unwrap();
    let tu = g.parallel_transport(&x, &y, &u).unwrap();
    let tw = g.parallel_transport(&x, &y, &w).unwrap();
    assert!((g.inner(&end, &tu, &tw) - g.inner(&x, &u, &w)).abs() < 1e-10);
    assert_eq!(g.exp_map(&x, &[0.0; 3]).unwrap(), x.to_vec());
    let flat = MetricField::euclidean(2);
    let e = flat.exp_map(&x, &y).unwrap();
    for i in 0..3 {
        assert_abs_diff_eq!(e[i], x[i] + y[i], epsilon = 1e-14);
    }
}

#[test]
fn normal_chart_properties() {
    let g = test_metric(2);
    let p = [0.1, 0.0, 0.2];
    let chart = normal_chart(&g, &p, None, 0.3).unwrap();
    let a0 = chart.metric_at(&[0.0; 3]).unwrap();
    assert!((a0 - nalgebra::DMatrix::identity(3, 3)).amax() < 1e-9);
    // radial unit condition: A(z) z·z = |z|²
    for dir in [[1.0, 0.0, 0.0], [0.6, -0.8, 0.0], [0.2, 0.3, 0.9327379053]] {
        let z: Vec<f64> = dir.iter().map(|v| v * 0.25).collect();
        let a = chart.metric_at(&z).unwrap();
        let zz = nalgebra::DVector::from_vec(z.clone());
        assert!(((zz.transpose() * &a * &zz)[0] - zz.norm_squared()).abs() < 1e-10);
    }
    // space form: rotational symmetry of the pulled-back metric about 0
    let sf = MetricField::new(2, MetricFamily::SpaceForm { kappa: 1.0 }, None).unwrap();
    let c = normal_chart(&sf, &[0.2, 0.1, 0.0], None, 0.5).unwrap();
    let a1 = c.metric_at(&[0.4, 0.0, 0.0]).unwrap();
    let a2 = c.metric_at(&[0.0, 0.0, 0.4]).unwrap();
    assert!((a1[(1, 1)] - a2[(0, 0)]).abs() < 1e-7);
    assert!((a1[(1, 1)] - (0.4f64.sin() / 0.4).powi(2)).abs() < 1e-9);
    // euclidean chart is flat
    let e = MetricField::euclidean(2);
    let ce = normal_chart(&e, &[0.0; 3], None, 0.5).unwrap();
    assert!((ce.metric_at(&[0.3, -0.2, 0.5]).unwrap() - nalgebra::DMatrix::identity(3, 3)).amax() < 1e-13);
}

#[test]
fn chart_curvature_matches_frame_jet() {
    // Curvature of the pulled-back metric at the chart origin equals the
    // frame-transformed curvature at p.
    let g = test_metric(2);
    let p = [0.1, 0.0, 0.2];
    let chart = normal_chart(&g, &p, None, 0.3).unwrap();
    let a: Vec<sphereflow::jet::Jet<56>> = chart.metric_jets(&[0.0; 3], 4).unwrap();
    let id = nalgebra::DMatrix::identity(3, 3);
    let cj_chart = CurvatureJet::from_metric_jets::<56>(2, &[0.0; 3], &a, &id).unwrap();
    let cj = CurvatureJet::compute(&g, &p, None).unwrap();
    let scale = cj.dd_ricci.max_abs().max(cj.riemann.max_abs());
    for (u, v) in cj_chart.riemann.data.iter().zip(&cj.riemann.data) {
        assert!((u - v).abs() < 1e-7 * scale);
    }
    for (u, v) in cj_chart.dd_ricci.data.iter().zip(&cj.dd_ricci.data) {
        assert!((u - v).abs() < 1e-7 * scale);
    }
}

#[test]
fn normal_expansion_matches_curvature() {
    let g = test_metric(2);
    let radii = [0.16, 0.12, 0.09, 0.065, 0.045, 0.03, 0.02, 0.012];
    let rep = verify_normal_expansion(&g, &[0.1, 0.0, 0.2], &radii).unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    assert!(rep.min_slope_quadratic >= 2.7, "{rep:?}");
    assert!(rep.min_slope_linear >= 1.7, "{rep:?}");
    // transport matrix quadratic coefficient is (1/6) R
    for f in &rep.fits {
        assert!(f.rel_err_m < 1e-4, "{f:?}");
    }
    let flat = MetricField::euclidean(2);
    let rep = verify_normal_expansion(&flat, &[0.0; 3], &radii).unwrap();
    for f in &rep.fits {
        assert_eq!(f.m_coefficient, 0.0);
    }
}
