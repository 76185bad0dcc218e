use nalgebra::DMatrix;
use sphereflow::flowline::*;
use sphereflow::metric::{Bump, MetricFamily, MetricField};
use sphereflow::sphere::{band_eigenvalue, BandBasis, SpaceTimeField};

fn two_well_metric() -> MetricField {
    let a = -0.15;
    let bumps = vec![
        Bump { center: vec![1.2, 0.0, 0.0], width: 1.0, poly: vec![(a, vec![0, 0, 0]), (0.3 * a, vec![0, 1, 0])] },
        Bump { center: vec![-1.2, 0.1, 0.0], width: 1.1, poly: vec![(0.8 * a, vec![0, 0, 0])] },
    ];
    MetricField::new(2, MetricFamily::Conformal { bumps }, None).unwrap()
}

fn saddle(g: &MetricField) -> CriticalPoint {
    let (cps, _) = find_critical_points(g, &[vec![-0.3, 0.15, 0.0]]).unwrap();
    cps.into_iter().next().unwrap()
}

/// Constant-coefficient flow line: a fake line whose Hessian is fixed.
fn constant_line(hess: DMatrix<f64>, grid: TimeGrid) -> FlowLine {
    let n = hess.nrows();
    let nt = grid.len();
    FlowLine {
        m: n - 1,
        grid,
        points: vec![[0.0; 4]; nt],
        velocity: vec![[0.0; 4]; nt],
        frames: vec![DMatrix::identity(n, n); nt],
        frame_rates: vec![DMatrix::zeros(n, n); nt],
        scalar: vec![0.0; nt],
        velocity_frame: vec![vec![0.0; n]; nt],
        hessian_frame: vec![hess; nt],
        limits: [None, None],
    }
}

#[test]
fn derivative_and_interpolation_rules_are_high_order() {
    let grid = TimeGrid::new(5.0, 81, 1.0).unwrap();
    let d = grid.derivative_matrix();
    let f: Vec<f64> = grid.times.iter().map(|t| (0.7 * t).sin()).collect();
    for i in 0..grid.len() {
        let df: f64 = (0..grid.len()).map(|k| d[(i, k)] * f[k]).sum();
        assert!((df - 0.7 * (0.7 * grid.times[i]).cos()).abs() < 1e-7);
    }
    for t in [-4.97, -1.234, 0.0, 2.5001, 4.99] {
        let (start, w) = grid.interpolation(t);
        let v: f64 = w.iter().enumerate().map(|(q, wq)| wq * f[start + q]).sum();
        assert!((v - (0.7f64 * t).sin()).abs() < 1e-9);
    }
    assert_eq!(grid.interpolation(-9.0).1[0], 1.0);
    assert!(grid.interior().iter().all(|&i| grid.times[i].abs() <= 4.0 + 1e-12));
    let w = fd_weights(0.0, &[-1.0, 0.0, 1.0], 2);
    assert_eq!(w, vec![1.0, -2.0, 1.0]);
}

#[test]
fn scalar_green_constant_and_decaying_modes() {
    let grid = TimeGrid::new(4.0, 161, 1.0).unwrap();
    let s = 0.3;
    for a in [2.0, -2.0, 0.5] {
        let u = scalar_green(&grid, a, s, &vec![1.0; grid.len()]).unwrap();
        for v in &u {
            assert!((v - 1.0 / a).abs() < 1e-10, "a={a} v={v}");
        }
    }
    // sinusoid: amplitude 1/√(a² + s⁸ω²) away from the window ends
    let (a, omega) = (-2.0, 2.0);
    let rhs: Vec<f64> = grid.times.iter().map(|t| (omega * t).sin()).collect();
    let u = scalar_green(&grid, a, s, &rhs).unwrap();
    let eps = s.powi(4);
    let want_amp = 1.0 / (a * a + eps * eps * omega * omega).sqrt();
    let phase = (eps * omega).atan2(a);
    for i in grid.interior() {
        let t = grid.times[i];
        let want = want_amp * (omega * t - phase).sin();
        assert!((u[i] - want).abs() < 0.01 * want_amp, "t={t} {} {}", u[i], want);
    }
    // sup bound ‖u‖ ≤ ‖r‖/|a|
    let amax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(amax <= 1.0 / 2.0 * (1.0 + 1e-6));
    assert!(scalar_green(&grid, 0.0, s, &rhs).is_err());
}

#[test]
fn scalar_green_inverts_the_operator() {
    let grid = TimeGrid::new(6.0, 121, 1.5).unwrap();
    let s = 0.8;
    let a = band_eigenvalue(2, 2);
    let rhs: Vec<f64> = grid.times.iter().map(|t| (-0.1 * t * t).exp() * (1.0 + 0.3 * t)).collect();
    let u = scalar_green(&grid, a, s, &rhs).unwrap();
    let d = grid.derivative_matrix();
    for i in grid.interior() {
        let du: f64 = (0..grid.len()).map(|k| d[(i, k)] * u[k]).sum();
        assert!((s.powi(4) * du + a * u[i] - rhs[i]).abs() < 1e-7);
    }
}

#[test]
fn p_solver_constant_hessian() {
    let grid = TimeGrid::new(8.0, 81, 2.0).unwrap();
    let hess = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, 0.5, 2.0]));
    let line = constant_line(hess, grid.clone());
    let p = PSolver::new(&line).unwrap();
    assert_eq!(p.expected_kernel, 0);
    assert!(p.kernel.is_empty());
    let c = flow_constant(2);
    let v = [0.3, -0.2, 0.1];
    let y = p.solve(&vec![v.to_vec(); grid.len()]);
    let lam = [-1.0, 0.5, 2.0];
    for t in 0..grid.len() {
        for i in 0..3 {
            assert!((y[t][i] - v[i] / (c * lam[i])).abs() < 1e-8 * (v[i] / (c * lam[i])).abs(), "t={t} i={i} {} {}", y[t][i], v[i] / (c * lam[i]));
        }
    }
}

#[test]
fn flow_line_and_p_solver_along_heteroclinic() {
    let g = two_well_metric();
    let sad = saddle(&g);
    assert_eq!(sad.morse_index, 1);
    assert!(sad.nondegenerate);
    let grid = TimeGrid::new(12.0, 97, 3.0).unwrap();
    let line = connecting_orbit(&g, &sad, 1.0, 1e-6, 80.0, &grid).unwrap();
    let c = flow_constant(2);
    // dS/dt = −c |∇S|² and monotone decrease
    for i in 1..line.len() - 1 {
        let dsdt = (line.scalar[i + 1] - line.scalar[i - 1]) / (2.0 * grid.step);
        let v2: f64 = line.velocity_frame[i].iter().map(|v| v * v).sum();
        assert!((dsdt + v2 / c).abs() < 2e-3 * (v2 / c).max(1e-6), "i={i} {dsdt} {}", -v2 / c);
        assert!(line.scalar[i + 1] < line.scalar[i]);
    }
    // limits: the saddle in the past, a minimum in the future
    let lo = line.limits[0].as_ref().unwrap();
    let hi = line.limits[1].as_ref().unwrap();
    assert_eq!(lo.morse_index, 1);
    assert_eq!(hi.morse_index, 0);
    assert!((lo.scalar - sad.scalar).abs() < 1e-10);
    // frames stay orthonormal for the metric
    for i in [0, line.len() / 2, line.len() - 1] {
        let e = &line.frames[i];
        let p = &line.points[i][..3];
        for a in 0..3 {
            for b in 0..3 {
                let ea: Vec<f64> = e.column(a).iter().copied().collect();
                let eb: Vec<f64> = e.column(b).iter().copied().collect();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((g.inner(p, &ea, &eb) - want).abs() < 1e-9);
            }
        }
    }
    // P solver: kernel spanned by γ̇, solution satisfies P Y = rhs inside
    let p = PSolver::new(&line).unwrap();
    assert_eq!(p.expected_kernel, 1);
    assert_eq!(p.kernel.len(), 1);
    let tw = grid.trapezoid();
    let vn: f64 = (0..line.len()).map(|t| tw[t] * line.velocity_frame[t].iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    let overlap: f64 = (0..line.len())
        .map(|t| tw[t] * (0..3).map(|i| p.kernel[0][t * 3 + i] * line.velocity_frame[t][i]).sum::<f64>())
        .sum::<f64>();
    assert!((overlap.abs() / vn - 1.0).abs() < 1e-4, "overlap {}", overlap / vn);
    let rhs: Vec<Vec<f64>> = grid.times.iter().map(|t| vec![(0.3 * t).cos(), 0.2, (-0.05 * t * t).exp()]).collect();
    let y = p.solve(&rhs);
    let py = p.apply(&grid, &y);
    for t in grid.interior() {
        for i in 0..3 {
            assert!((py[t][i] - rhs[t][i]).abs() < 1e-6, "t={} {} {}", grid.times[t], py[t][i], rhs[t][i]);
        }
    }
    let ortho: f64 = (0..line.len()).map(|t| tw[t] * (0..3).map(|i| p.kernel[0][t * 3 + i] * y[t][i]).sum::<f64>()).sum();
    assert!(ortho.abs() < 1e-9);
    // the kernel itself solves the homogeneous equation
    let ky: Vec<Vec<f64>> = (0..line.len()).map(|t| p.kernel[0][t * 3..t * 3 + 3].to_vec()).collect();
    let pk = p.apply(&grid, &ky);
    for t in grid.interior() {
        assert!(pk[t].iter().all(|v| v.abs() < 1e-5));
    }
}

#[test]
fn critical_point_search_classifies() {
    let g = two_well_metric();
    let seeds = vec![vec![1.2, 0.2, 0.0], vec![-1.2, 0.1, 0.0], vec![-0.3, 0.15, 0.0], vec![1.15, 0.25, 0.01]];
    let (cps, outcomes) = find_critical_points(&g, &seeds).unwrap();
    assert_eq!(cps.len(), 3);
    assert_eq!(outcomes.len(), 4);
    let idx: Vec<usize> = cps.iter().map(|c| c.morse_index).collect();
    assert_eq!(idx, vec![0, 0, 1]);
    // Euclidean space has no nondegenerate critical points
    let flat = MetricField::euclidean(2);
    let (cps, _) = find_critical_points(&flat, &[vec![0.0; 3]]).unwrap();
    assert!(cps.iter().all(|c| !c.nondegenerate));
}

#[test]
fn qs_solver_bandwise_inverse() {
    let grid = TimeGrid::new(4.0, 81, 1.0).unwrap();
    let basis = BandBasis::new(2, 4, 9).unwrap();
    let s = 0.3;
    let q = QsSolver::new(&grid, &basis, s).unwrap();
    let mut rhs = SpaceTimeField::zeros(grid.len(), basis.len());
    for t in 0..grid.len() {
        for j in 0..basis.len() {
            if basis.band[j] != 1 {
                rhs.at_mut(t)[j] = ((j + 1) as f64 * 0.3 + 0.2 * grid.times[t]).sin();
            }
        }
    }
    let f = q.solve(&rhs).unwrap();
    let back = q.apply(&grid, 2, &f);
    for t in grid.interior() {
        for j in 0..basis.len() {
            assert!((back.at(t)[j] - rhs.at(t)[j]).abs() < 1e-7);
        }
    }
    // constants: f = rhs / a_l for time-independent data
    let mut cst = SpaceTimeField::zeros(grid.len(), basis.len());
    for t in 0..grid.len() {
        cst.at_mut(t)[0] = 1.0;
    }
    let f0 = q.solve(&cst).unwrap();
    assert!((f0.at(40)[0] - 1.0 / band_eigenvalue(2, 0)).abs() < 1e-10);
    // an H1 component is rejected and the message names the time samples
    let j1 = basis.band.iter().position(|&l| l == 1).unwrap();
    rhs.at_mut(5)[j1] = 1.0;
    let err = q.solve(&rhs).unwrap_err().to_string();
    assert!(err.contains("[5]"), "{err}");
}

#[test]
fn holder_norms_trivial_cases() {
    let grid = TimeGrid::new(4.0, 81, 1.0).unwrap();
    let cst = vec![vec![3.0, 4.0]; grid.len()];
    assert!((holder_norm_series(&grid, &cst, 0, 0.5, 0.1) - 5.0).abs() < 1e-12);
    assert!((holder_norm_series(&grid, &cst, 1, 0.5, 0.1) - 5.0).abs() < 1e-9);
    let lin: Vec<Vec<f64>> = grid.times.iter().map(|t| vec![*t]).collect();
    // sup 4, seminorm with α = 1 is 1, derivative 1 with weight w
    let n1 = holder_norm_series(&grid, &lin, 0, 1.0, 0.0);
    assert!((n1 - 5.0).abs() < 1e-9);
    let n2 = holder_norm_series(&grid, &lin, 1, 1.0, 0.25);
    assert!((n2 - 4.25).abs() < 1e-7);
    let basis = BandBasis::new(2, 2, 5).unwrap();
    let mut f = SpaceTimeField::zeros(grid.len(), basis.len());
    for t in 0..grid.len() {
        f.at_mut(t)[0] = 2.0;
    }
    let v0 = basis.node_jet(0, 0).value * 2.0;
    assert!((holder_norm_field(&grid, &basis, &f, 0, 0.5, 0.1) - v0).abs() < 1e-10);
    assert!((holder_norm_field(&grid, &basis, &f, 1, 0.5, 0.1) - v0).abs() < 1e-9);
}
