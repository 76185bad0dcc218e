use nalgebra::{DMatrix, DVector};
use sphereflow::flowline::{FlowLine, TimeGrid};
use sphereflow::immersion::{level_set_mean_curvature, Candidate, Immersion};
use sphereflow::jet::{jet_space, Jet};
use sphereflow::metric::{loglog_slope, normal_chart, Bump, CurvatureJet, MetricFamily, MetricField};
use sphereflow::ode::Extrapolation;
use sphereflow::sphere::{BandBasis, SpaceTimeField};

fn test_metric() -> MetricField {
    let bumps = vec![
        Bump { center: vec![0.3, 0.0, 0.0], width: 0.9, poly: vec![(0.35, vec![0, 0, 0]), (0.2, vec![0, 1, 0])] },
        Bump { center: vec![0.1, -0.4, 0.0], width: 1.2, poly: vec![(-0.25, vec![0, 0, 0])] },
    ];
    MetricField::new(2, MetricFamily::Conformal { bumps }, None).unwrap()
}

/// A line that moves with constant coordinate velocity `vel` through `p`,
/// carrying the frame e^{−ψ(p)}I (exact for flat metrics; for curved metrics
/// only used with zero velocity).
fn moving_line(g: &MetricField, p: &[f64], vel: &[f64]) -> FlowLine {
    let n = g.dim();
    let grid = TimeGrid::new(1.0, 17, 0.25).unwrap();
    let nt = grid.len();
    let frame = g.coordinate_frame(p);
    let points = grid
        .times
        .iter()
        .map(|t| {
            let mut q = [0.0; 4];
            for i in 0..n {
                q[i] = p[i] + t * vel[i];
            }
            q
        })
        .collect();
    let mut v4 = [0.0; 4];
    v4[..n].copy_from_slice(&vel[..n]);
    FlowLine {
        m: n - 1,
        grid,
        points,
        velocity: vec![v4; nt],
        frames: vec![frame; nt],
        frame_rates: vec![DMatrix::zeros(n, n); nt],
        scalar: vec![0.0; nt],
        velocity_frame: vec![vel.to_vec(); nt],
        hessian_frame: vec![DMatrix::zeros(n, n); nt],
        limits: [None, None],
    }
}

fn sample_graph(basis: &BandBasis, nt: usize) -> SpaceTimeField {
    let mut f = SpaceTimeField::zeros(nt, basis.len());
    for t in 0..nt {
        for j in 0..basis.len() {
            if basis.band[j] != 1 {
                f.at_mut(t)[j] = 0.3 * ((j as f64) * 0.7 + 0.1 * t as f64).cos() / (1.0 + basis.band[j] as f64);
            }
        }
    }
    f
}

#[test]
fn euclidean_round_sphere() {
    let g = MetricField::euclidean(2);
    let line = moving_line(&g, &[0.2, -0.1, 0.3], &[0.0; 3]);
    let basis = BandBasis::new(2, 4, 9).unwrap();
    let imm = Immersion::new(&g, &line, &basis).unwrap();
    for s in [0.4, 0.1] {
        let c = Candidate::zero(s, line.len(), 3, basis.len());
        let geo = imm.geometry_at(&c, 8).unwrap();
        for (k, ng) in geo.iter().enumerate() {
            let x = &basis.grid.nodes[k];
            assert!((ng.mean_curvature - 1.0 / s).abs() < 1e-10 / s);
            assert!(ng.phi.abs() < 1e-10);
            for i in 0..3 {
                assert!((ng.point[i] - line.points[8][i] - s * x[i]).abs() < 1e-13);
                assert!((ng.normal[i] - x[i]).abs() < 1e-12);
                assert!(ng.variation[i].abs() < 1e-14);
            }
        }
        let (area, vol, func) = imm.area_volume(&c, 8, 8).unwrap();
        let pi = std::f64::consts::PI;
        assert!((area - 4.0 * pi * s * s).abs() < 1e-12);
        assert!((vol - 4.0 / 3.0 * pi * s.powi(3)).abs() < 1e-12);
        assert!((func - 8.0 / 3.0 * pi * s * s).abs() < 1e-12);
        let phi = imm.phi(&c, None).unwrap();
        assert!(phi.values.iter().all(|v| v.abs() < 1e-10));
    }
}

#[test]
fn euclidean_variation_field_is_the_total_motion() {
    // Oracle: in flat space F = γ(t) + sY(t) + s(1 + s²f) x, so
    // ∂_t F = γ̇ + sẎ + s³ ḟ x and V = −∂_t F.
    let g = MetricField::euclidean(2);
    let vel = [0.3, -0.2, 0.1];
    let line = moving_line(&g, &[0.0; 3], &vel);
    let basis = BandBasis::new(2, 3, 7).unwrap();
    let imm = Immersion::new(&g, &line, &basis).unwrap();
    let s = 0.25;
    let nt = line.len();
    let mut c = Candidate::zero(s, nt, 3, basis.len());
    for t in 0..nt {
        let tt = line.grid.times[t];
        c.y[t] = vec![0.1 * tt, -0.05 * tt * tt, 0.2];
    }
    c.f = sample_graph(&basis, nt);
    let fdot = imm.field_rate(&c.f);
    let t = 8;
    let tt = line.grid.times[t];
    let ydot = [0.1, -0.1 * tt, 0.0];
    let geo = imm.geometry_at(&c, t).unwrap();
    let fd = basis.synthesize(fdot.at(t));
    for (k, ng) in geo.iter().enumerate() {
        let x = &basis.grid.nodes[k];
        for i in 0..3 {
            let want = -(vel[i] + s * ydot[i] + s.powi(3) * fd[k] * x[i]);
            assert!((ng.variation[i] - want).abs() < 1e-9, "{} {}", ng.variation[i], want);
        }
        // definition coherence
        let gvn: f64 = (0..3).map(|i| ng.variation[i] * ng.normal[i]).sum();
        assert!((s * ng.phi + (1.0 / s - ng.mean_curvature) - s * s * gvn).abs() < 1e-12 * (1.0 / s));
    }
}

#[test]
fn space_form_geodesic_sphere() {
    let g = MetricField::new(2, MetricFamily::SpaceForm { kappa: 1.0 }, None).unwrap();
    let line = moving_line(&g, &[0.1, 0.05, -0.1], &[0.0; 3]);
    let basis = BandBasis::new(2, 4, 9).unwrap();
    let imm = Immersion::new(&g, &line, &basis).unwrap();
    let pi = std::f64::consts::PI;
    for s in [0.4, 0.2, 0.1] {
        let c = Candidate::zero(s, line.len(), 3, basis.len());
        let geo = imm.geometry_at(&c, 3).unwrap();
        let hs: Vec<f64> = geo.iter().map(|ng| ng.mean_curvature).collect();
        for h in &hs {
            assert!((h - 1.0 / s.tan()).abs() < 1e-6, "{h} vs {}", 1.0 / s.tan());
        }
        // rotation invariance
        let spread = hs.iter().fold(0.0f64, |m, h| m.max((h - hs[0]).abs()));
        assert!(spread < 1e-8);
        let (area, _, _) = imm.area_volume(&c, 3, 8).unwrap();
        assert!((area - 4.0 * pi * s.sin().powi(2)).abs() < 1e-6 * area);
    }
}

#[test]
fn normal_and_tangent_consistency() {
    let g = test_metric();
    let p = [0.1, 0.0, 0.2];
    let line = moving_line(&g, &p, &[0.0; 3]);
    let basis = BandBasis::new(2, 4, 9).unwrap();
    let imm = Immersion::new(&g, &line, &basis).unwrap();
    let s = 0.3;
    let mut c = Candidate::zero(s, line.len(), 3, basis.len());
    c.f = sample_graph(&basis, line.len());
    let t = 4;
    let geo = imm.geometry_at(&c, t).unwrap();
    let coef = c.f.at(t);
    let frame = &line.frames[t];
    let ode = Extrapolation::with_tol(1e-13);
    for (k, ng) in geo.iter().enumerate() {
        let q = &ng.point;
        assert!((g.inner(q, &ng.normal, &ng.normal) - 1.0).abs() < 1e-10);
        for tang in &ng.tangents {
            assert!(g.inner(q, &ng.normal, tang).abs() < 1e-8);
        }
        // tangent vectors vs central differences of the embedding
        if k % 7 == 0 {
            let embed = |u: &[f64]| {
                let x = basis.chart_point(k, u);
                let vals = basis.eval_at(&x[..3]);
                let f: f64 = vals.iter().zip(coef).map(|(a, b)| a * b).sum();
                let y: Vec<f64> = (0..3).map(|i| s * (1.0 + s * s * f) * x[i]).collect();
                let v: Vec<f64> = (0..3).map(|i| (0..3).map(|a| frame[(i, a)] * y[a]).sum()).collect();
                let (pt, _) = g.geodesic(&p, &v, &ode).unwrap();
                pt
            };
            let h = 1e-4;
            for a in 0..2 {
                let mut up = [0.0; 2];
                let mut um = [0.0; 2];
                up[a] = h;
                um[a] = -h;
                let (fp, fm) = (embed(&up), embed(&um));
                for i in 0..3 {
                    let d = (fp[i] - fm[i]) / (2.0 * h);
                    assert!((d - ng.tangents[a][i]).abs() < 1e-6, "{d} {}", ng.tangents[a][i]);
                }
            }
        }
    }
}

#[test]
fn trace_formula_matches_level_set_formula() {
    let g = test_metric();
    let p = [0.1, 0.0, 0.2];
    let line = moving_line(&g, &p, &[0.0; 3]);
    let basis = BandBasis::new(2, 4, 9).unwrap();
    let imm = Immersion::new(&g, &line, &basis).unwrap();
    let chart = normal_chart(&g, &p, Some(&line.frames[0]), 0.5).unwrap();
    let s = 0.35;
    let mut c = Candidate::zero(s, line.len(), 3, basis.len());
    c.f = sample_graph(&basis, line.len());
    let t = 5;
    let geo = imm.geometry_at(&c, t).unwrap();
    let coef = c.f.at(t);
    let fvals = basis.synthesize(coef);
    for (k, ng) in geo.iter().enumerate().step_by(5) {
        let x = &basis.grid.nodes[k];
        let y: Vec<f64> = (0..3).map(|i| s * (1.0 + s * s * fvals[k]) * x[i]).collect();
        let h = level_set_mean_curvature(&chart, &basis, coef, s, &y).unwrap();
        assert!((h - ng.mean_curvature).abs() < 1e-8 * ng.mean_curvature.abs(), "{h} {}", ng.mean_curvature);
    }
}

#[test]
fn normal_expansion_in_chart() {
    // ‖N − x + s²∇̄f‖ = O(s⁴), with N pulled back to the normal chart.
    let g = test_metric();
    let p = [0.1, 0.0, 0.2];
    let line = moving_line(&g, &p, &[0.0; 3]);
    let basis = BandBasis::new(2, 4, 9).unwrap();
    let imm = Immersion::new(&g, &line, &basis).unwrap();
    let chart = normal_chart(&g, &p, Some(&line.frames[0]), 0.5).unwrap();
    let ladder = [0.4, 0.3, 0.22, 0.16, 0.12, 0.08];
    let k = 11;
    let t = 2;
    let mut errs = Vec::new();
    for &s in &ladder {
        let mut c = Candidate::zero(s, line.len(), 3, basis.len());
        c.f = sample_graph(&basis, line.len());
        let geo = imm.geometry_at(&c, t).unwrap();
        let coef = c.f.at(t);
        let fval: f64 = (0..basis.len()).map(|j| coef[j] * basis.node_jet(k, j).value).sum();
        let x = basis.grid.nodes[k];
        let y: Vec<f64> = (0..3).map(|i| s * (1.0 + s * s * fval) * x[i]).collect();
        let sp = jet_space(3, 1);
        let z: Vec<Jet<4>> = (0..3).map(|i| Jet::var(sp, i, y[i])).collect();
        let amb = chart.to_ambient(&z, &Extrapolation::with_tol(1e-13)).unwrap();
        let jac = DMatrix::from_fn(3, 3, |i, a| amb[i].d1(a));
        let nchart = jac.lu().solve(&DVector::from_vec(geo[k].normal.clone())).unwrap();
        let mut grad = [0.0; 3];
        for j in 0..basis.len() {
            let nj = basis.node_jet(k, j);
            for a in 0..2 {
                for i in 0..3 {
                    grad[i] += coef[j] * nj.grad[a] * basis.tangents[k][a][i];
                }
            }
        }
        let e: f64 = (0..3).map(|i| (nchart[i] - x[i] + s * s * grad[i]).powi(2)).sum::<f64>().sqrt();
        errs.push(e);
    }
    let slope = loglog_slope(&ladder, &errs);
    assert!(slope >= 3.5, "slope {slope} errs {errs:?}");
}

#[test]
fn mean_curvature_and_phi_leading_terms() {
    let g = test_metric();
    let p = [0.1, 0.0, 0.2];
    let line = moving_line(&g, &p, &[0.0; 3]);
    let basis = BandBasis::new(2, 4, 9).unwrap();
    let imm = Immersion::new(&g, &line, &basis).unwrap();
    let cj = CurvatureJet::compute(&g, &p, Some(&line.frames[0])).unwrap();
    let ladder = [0.4, 0.3, 0.22, 0.16, 0.12, 0.08];
    let mut h_err = Vec::new();
    let mut phi_err = Vec::new();
    for &s in &ladder {
        let c = Candidate::zero(s, line.len(), 3, basis.len());
        let geo = imm.geometry_at(&c, 1).unwrap();
        let mut eh = 0.0f64;
        let mut ep = 0.0f64;
        for (k, ng) in geo.iter().enumerate() {
            let x = &basis.grid.nodes[k];
            let ricxx: f64 = (0..3).flat_map(|a| (0..3).map(move |b| (a, b))).map(|(a, b)| cj.ricci.at(&[a, b]) * x[a] * x[b]).sum();
            eh = eh.max(s * (ng.mean_curvature - 1.0 / s + s / 3.0 * ricxx).abs());
            ep = ep.max((ng.phi + ricxx / 3.0).abs());
        }
        h_err.push(eh);
        phi_err.push(ep);
    }
    let sh = loglog_slope(&ladder, &h_err);
    let sp = loglog_slope(&ladder, &phi_err);
    assert!(sh >= 2.7, "H slope {sh} {h_err:?}");
    assert!(sp >= 0.8, "phi slope {sp} {phi_err:?}");
}

#[test]
fn area_volume_converge_under_refinement() {
    let g = test_metric();
    let p = [0.1, 0.0, 0.2];
    let line = moving_line(&g, &p, &[0.0; 3]);
    let coarse = BandBasis::new(2, 4, 20).unwrap();
    let fine = BandBasis::new(2, 4, 36).unwrap();
    let s = 0.3;
    let mut out = Vec::new();
    for (basis, radial) in [(&coarse, 8), (&fine, 16)] {
        let imm = Immersion::new(&g, &line, basis).unwrap();
        let mut c = Candidate::zero(s, line.len(), 3, basis.len());
        let vals: Vec<f64> = basis
            .grid
            .nodes
            .iter()
            .map(|x| 0.4 * x[0] * x[1] - 0.3 * x[2] * x[2] + 0.2 * x[0].powi(3) * x[2] + 0.1)
            .collect();
        c.f.at_mut(0).copy_from_slice(&basis.analyze(&vals));
        out.push(imm.area_volume(&c, 0, radial).unwrap());
    }
    assert!((out[0].0 - out[1].0).abs() < 1e-6 * out[1].0, "{out:?}");
    assert!((out[0].1 - out[1].1).abs() < 1e-6 * out[1].1);
}
