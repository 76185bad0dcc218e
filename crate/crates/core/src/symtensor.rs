//! Dense symmetric tensors over R^(m+1).
//!
//! Entries are stored for every index tuple (no packing); at the orders and
//! dimensions used here (order ≤ 8, m ≤ 3) that costs little and keeps the
//! shuffle product and contractions transparent.

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct SymTensor {
    dim: usize,
    order: usize,
    entries: Vec<f64>,
}

impl SymTensor {
    /// Build from a full entry array (row-major over index tuples).
    ///
    /// Entries are symmetrized; an asymmetry above `1e-10` relative to the
    /// largest entry is rejected.
    pub fn new(dim: usize, order: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != dim.pow(order as u32) {
            return Err(Error::Input(format!(
                "expected {} entries for order {} over R^{}, got {}",
                dim.pow(order as u32),
                order,
                dim,
                entries.len()
            )));
        }
        let raw = SymTensor { dim, order, entries };
        let sym = raw.symmetrized();
        let scale = raw.max_abs().max(f64::MIN_POSITIVE);
        let asym = raw
            .entries
            .iter()
            .zip(&sym.entries)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::Input(format!("tensor not symmetric (asymmetry {asym:.3e})")));
        }
        Ok(sym)
    }

    /// Symmetrize an arbitrary entry array without checking.
    pub fn symmetrize(dim: usize, order: usize, entries: Vec<f64>) -> Self {
        SymTensor { dim, order, entries }.symmetrized()
    }

    pub fn scalar(dim: usize, v: f64) -> Self {
        SymTensor { dim, order: 0, entries: vec![v] }
    }

    pub fn zeros(dim: usize, order: usize) -> Self {
        SymTensor { dim, order, entries: vec![0.0; dim.pow(order as u32)] }
    }

    /// The identity form δ.
    pub fn delta(dim: usize) -> Self {
        let mut t = Self::zeros(dim, 2);
        for i in 0..dim {
            t.entries[i * dim + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }
    #[inline]
    pub fn order(&self) -> usize {
        self.order
    }
    #[inline]
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Entry at a (0-based) index tuple.
    pub fn get(&self, idx: &[usize]) -> f64 {
        self.entries[self.flat(idx)]
    }

    fn flat(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.order);
        idx.iter().fold(0, |acc, &i| acc * self.dim + i)
    }

    fn unflat(&self, mut k: usize, out: &mut [usize]) {
        for slot in (0..self.order).rev() {
            out[slot] = k % self.dim;
            k /= self.dim;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scale(&self, c: f64) -> Self {
        SymTensor { dim: self.dim, order: self.order, entries: self.entries.iter().map(|x| c * x).collect() }
    }

    pub fn sub(&self, other: &SymTensor) -> Result<Self> {
        self.check_same(other)?;
        Ok(SymTensor {
            dim: self.dim,
            order: self.order,
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a - b).collect(),
        })
    }

    fn check_same(&self, other: &SymTensor) -> Result<()> {
        if self.dim != other.dim || self.order != other.order {
            return Err(Error::Input(format!(
                "tensor shape mismatch: ({}, {}) vs ({}, {})",
                self.dim, self.order, other.dim, other.order
            )));
        }
        Ok(())
    }

    fn symmetrized(&self) -> Self {
        use std::collections::HashMap;
        let mut sums: HashMap<Vec<usize>, (f64, usize)> = HashMap::new();
        let mut idx = vec![0; self.order];
        let keys: Vec<Vec<usize>> = (0..self.entries.len())
            .map(|k| {
                self.unflat(k, &mut idx);
                let mut key = idx.clone();
                key.sort_unstable();
                key
            })
            .collect();
        for (k, key) in keys.iter().enumerate() {
            let e = sums.entry(key.clone()).or_insert((0.0, 0));
            e.0 += self.entries[k];
            e.1 += 1;
        }
        let entries = keys
            .iter()
            .map(|key| {
                let (s, c) = sums[key];
                s / c as f64
            })
            .collect();
        SymTensor { dim: self.dim, order: self.order, entries }
    }

    /// Full contraction with `order` copies of the vector `x`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut idx = vec![0; self.order];
        let mut total = 0.0;
        for (k, e) in self.entries.iter().enumerate() {
            self.unflat(k, &mut idx);
            total += e * idx.iter().map(|&i| x[i]).product::<f64>();
        }
        total
    }
}

/// Symmetric product: sum over (k,l)-shuffles, each ordered shuffle once.
pub fn sym_product(a: &SymTensor, b: &SymTensor) -> Result<SymTensor> {
    if a.dim != b.dim {
        return Err(Error::Input(format!("dimension mismatch: {} vs {}", a.dim, b.dim)));
    }
    let (k, l) = (a.order, b.order);
    let order = k + l;
    let mut out = SymTensor::zeros(a.dim, order);
    let subsets = shuffles(order, k);
    let mut idx = vec![0; order];
    let mut ia = vec![0; k];
    let mut ib = vec![0; l];
    for flat in 0..out.entries.len() {
        out.unflat(flat, &mut idx);
        let mut total = 0.0;
        for mask in &subsets {
            let (mut p, mut q) = (0, 0);
            for (pos, &i) in idx.iter().enumerate() {
                if mask[pos] {
                    ia[p] = i;
                    p += 1;
                } else {
                    ib[q] = i;
                    q += 1;
                }
            }
            total += a.get(&ia) * b.get(&ib);
        }
        out.entries[flat] = total;
    }
    Ok(out)
}

/// All position masks choosing `k` of `n` slots.
fn shuffles(n: usize, k: usize) -> Vec<Vec<bool>> {
    let mut out = Vec::new();
    for bits in 0u32..(1u32 << n) {
        if bits.count_ones() as usize == k {
            out.push((0..n).map(|p| bits & (1 << p) != 0).collect());
        }
    }
    out
}

/// Contract the last two slots against δ.
pub fn delta_contract(t: &SymTensor) -> Result<SymTensor> {
    if t.order < 2 {
        return Err(Error::Input(format!("contraction needs order ≥ 2, got {}", t.order)));
    }
    let d = t.dim;
    let mut out = SymTensor::zeros(d, t.order - 2);
    for (flat, e) in out.entries.iter_mut().enumerate() {
        let base = flat * d * d;
        *e = (0..d).map(|j| t.entries[base + j * d + j]).sum();
    }
    Ok(out)
}

/// δ^⊙k, built by repeated symmetric products.
pub fn delta_power(k: usize, m: usize) -> SymTensor {
    let dim = m + 1;
    let delta = SymTensor::delta(dim);
    let mut acc = SymTensor::scalar(dim, 1.0);
    for _ in 0..k {
        acc = sym_product(&acc, &delta).expect("same dimension");
    }
    acc
}

/// Double factorial with the convention (−1)!! = 0!! = 1.
pub fn double_factorial(n: i64) -> f64 {
    let mut acc = 1.0;
    let mut k = n;
    while k > 1 {
        acc *= k as f64;
        k -= 2;
    }
    acc
}

/// Volume of the unit sphere S^m.
pub fn sphere_volume(m: usize) -> f64 {
    // Vol(S^m) = 2 π^{(m+1)/2} / Γ((m+1)/2)
    let mut v = [2.0, 2.0 * std::f64::consts::PI];
    // recurrence Vol(S^m) = 2π/(m−1) · Vol(S^{m−2})
    if m < 2 {
        return v[m];
    }
    for j in 2..=m {
        let next = 2.0 * std::f64::consts::PI / (j as f64 - 1.0) * v[j % 2];
        v[j % 2] = next;
    }
    v[m % 2]
}

/// Coefficient C_k with ∫_{S^m} x^{⊗2k} dVol = C_k δ^⊙k.
pub fn moment_constant(m: usize, k: usize) -> f64 {
    let fact: f64 = (1..=k).map(|i| i as f64).product();
    sphere_volume(m) * double_factorial(m as i64 - 1)
        / (fact * double_factorial((m + 2 * k) as i64 - 1))
}

/// The moment tensor ∫_{S^m} x^{i1}…x^{il} dVol.
pub fn sphere_moment(m: usize, l: usize) -> SymTensor {
    if l % 2 == 1 {
        return SymTensor::zeros(m + 1, l);
    }
    delta_power(l / 2, m).scale(moment_constant(m, l / 2))
}
