use proptest::prelude::*;
use sphereflow::symtensor::*;

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Random symmetric tensor of the given order over R^dim.
fn tensor(dim: usize, order: usize) -> impl Strategy<Value = SymTensor> {
    prop::collection::vec(-1.0f64..1.0, dim.pow(order as u32)).prop_map(move |e| SymTensor::symmetrize(dim, order, e))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn product_evaluates_to_binomial_times_values(
        a in tensor(3, 2),
        b in tensor(3, 3),
        x in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let ab = sym_product(&a, &b).unwrap();
        prop_assert_eq!(ab.order(), 5);
        let expected = binomial(5, 2) * a.eval(&x) * b.eval(&x);
        prop_assert!(close(ab.eval(&x), expected, 1e-12), "{} vs {}", ab.eval(&x), expected);
    }

    #[test]
    fn product_is_commutative_and_associative(a in tensor(3, 1), b in tensor(3, 2), c in tensor(3, 1)) {
        let ab = sym_product(&a, &b).unwrap();
        let ba = sym_product(&b, &a).unwrap();
        prop_assert!(ab.sub(&ba).unwrap().max_abs() < 1e-12);
        let left = sym_product(&ab, &c).unwrap();
        let right = sym_product(&a, &sym_product(&b, &c).unwrap()).unwrap();
        prop_assert!(left.sub(&right).unwrap().max_abs() < 1e-11);
    }

    #[test]
    fn symmetrized_entries_are_permutation_invariant(t in tensor(4, 3), i in 0usize..4, j in 0usize..4, k in 0usize..4) {
        let v = t.get(&[i, j, k]);
        for idx in [[i, k, j], [j, i, k], [j, k, i], [k, i, j], [k, j, i]] {
            prop_assert_eq!(t.get(&idx), v);
        }
    }

    #[test]
    fn contracting_delta_products_traces_the_identity(a in tensor(3, 2)) {
        let prod = sym_product(&a, &SymTensor::delta(3)).unwrap();
        let contracted = delta_contract(&prod).unwrap();
        let trace = a.get(&[0, 0]) + a.get(&[1, 1]) + a.get(&[2, 2]);
        // the six shuffles of (a ⊙ δ)_{ijkk} sum to (dim + 4) a_ij + tr(a) δ_ij
        for i in 0..3 {
            for j in 0..3 {
                let expected = 7.0 * a.get(&[i, j]) + if i == j { trace } else { 0.0 };
                prop_assert!(close(contracted.get(&[i, j]), expected, 1e-12));
            }
        }
    }

    #[test]
    fn moment_tensors_are_isotropic(
        m in 1usize..4,
        k in 1usize..4,
        x in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let x = &x[..m + 1];
        let moment = sphere_moment(m, 2 * k);
        let r2: f64 = x.iter().map(|v| v * v).sum();
        // δ^⊙k(x) = (2k)!/2^k · |x|^{2k}
        let count = (1..=2 * k).map(|i| i as f64).product::<f64>() / 2f64.powi(k as i32);
        let expected = moment_constant(m, k) * count * r2.powi(k as i32);
        prop_assert!(close(moment.eval(x), expected, 1e-12), "{} vs {}", moment.eval(x), expected);
    }
}

#[test]
fn odd_moments_vanish() {
    for m in 1..4 {
        for l in [1, 3, 5, 7] {
            assert_eq!(sphere_moment(m, l).max_abs(), 0.0);
        }
    }
}

#[test]
fn moment_traces_reduce_to_lower_moments() {
    // ∫ x^{⊗l} |x|² = ∫ x^{⊗(l−2)} on the unit sphere
    for m in 1..4 {
        for l in [2usize, 4, 6, 8] {
            let traced = delta_contract(&sphere_moment(m, l)).unwrap();
            let lower = sphere_moment(m, l - 2);
            let scale = lower.max_abs();
            assert!(traced.sub(&lower).unwrap().max_abs() < 1e-12 * scale, "m = {m}, l = {l}");
        }
    }
}

#[test]
fn sphere_volumes_match_closed_forms() {
    use std::f64::consts::PI;
    let expected = [2.0, 2.0 * PI, 4.0 * PI, 2.0 * PI * PI, 8.0 * PI * PI / 3.0];
    for (m, v) in expected.iter().enumerate() {
        assert!((sphere_volume(m) - v).abs() < 1e-12 * v);
    }
}

#[test]
fn asymmetric_entries_are_rejected() {
    assert!(SymTensor::new(2, 2, vec![1.0, 0.5, -0.5, 1.0]).is_err());
    assert!(SymTensor::new(2, 2, vec![1.0, 0.5, 0.5]).is_err());
    assert!(SymTensor::new(2, 2, vec![1.0, 0.5, 0.5, 2.0]).is_ok());
}
