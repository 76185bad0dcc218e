//! Quadrature grids and spherical-harmonic band analysis on S^m.
//!
//! Band bases are polynomials in the ambient coordinates, orthonormal in
//! L²(S^m, dVol). They are built band by band: monomials of degree l are
//! stripped of their components in the lower bands of equal parity and the
//! remainder is orthonormalized through an eigen-decomposition of its Gram
//! matrix. Every basis element keeps its monomial coefficients, so values,
//! sphere gradients and Hessians at grid nodes come from exact polynomial
//! jets rather than grid stencils.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::jet::{jet_space, Jet, Scalar};
use crate::metric::MAX_DIM;
use crate::symtensor::sphere_volume;

/// Gauss–Legendre nodes and weights on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, z);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, z);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn legendre(n: usize, z: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, z);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    (p1, n as f64 * (z * p1 - p0) / (z * z - 1.0))
}

/// Product quadrature on S^m exact for polynomials of degree ≤ `exactness`.
#[derive(Clone, Debug)]
pub struct SphereGrid {
    pub m: usize,
    pub nodes: Vec<[f64; MAX_DIM]>,
    pub weights: Vec<f64>,
    pub exactness: usize,
}

impl SphereGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.m + 1
    }
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }
}

fn circle(n: usize) -> Vec<(f64, f64, f64)> {
    (0..n)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            (a.cos(), a.sin(), 2.0 * std::f64::consts::PI / n as f64)
        })
        .collect()
}

fn sphere2(lq: usize) -> Vec<([f64; 3], f64)> {
    let (z, wz) = gauss_legendre(lq / 2 + 1);
    let mut out = Vec::new();
    for (zi, wi) in z.iter().zip(&wz) {
        let r = (1.0 - zi * zi).sqrt();
        for (c, s, w) in circle(lq + 1) {
            out.push(([r * c, r * s, *zi], wi * w));
        }
    }
    out
}

/// Quadrature grid on S^m with certified exactness degree `lq`:
/// trapezoidal (m = 1), Gauss–Legendre × trapezoidal (m = 2), and
/// Gauss–Chebyshev (second kind) in the polar angle nested with S² (m = 3).
pub fn build_grid(m: usize, lq: usize) -> Result<SphereGrid> {
    if lq > 40 {
        return Err(Error::Unsupported(format!("quadrature degree {lq} > 40")));
    }
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    match m {
        1 => {
            for (c, s, w) in circle(lq + 1) {
                nodes.push([c, s, 0.0, 0.0]);
                weights.push(w);
            }
        }
        2 => {
            for (x, w) in sphere2(lq) {
                nodes.push([x[0], x[1], x[2], 0.0]);
                weights.push(w);
            }
        }
        3 => {
            let n = lq / 2 + 1;
            let base = sphere2(lq);
            for k in 1..=n {
                let th = std::f64::consts::PI * k as f64 / (n as f64 + 1.0);
                let (u, sn) = (th.cos(), th.sin());
                let wu = std::f64::consts::PI / (n as f64 + 1.0) * sn * sn;
                for (x, w) in &base {
                    nodes.push([sn * x[0], sn * x[1], sn * x[2], u]);
                    weights.push(wu * w);
                }
            }
        }
        _ => return Err(Error::Unsupported(format!("sphere dimension m = {m} (supported: 1, 2, 3)"))),
    }
    Ok(SphereGrid { m, nodes, weights, exactness: lq })
}

/// Exponent vectors of all monomials of total degree ≤ `deg` in `n`
/// variables, graded.
fn monomials(n: usize, deg: usize) -> Vec<[u8; MAX_DIM]> {
    let mut out = Vec::new();
    for d in 0..=deg {
        let mut cur = [0u8; MAX_DIM];
        fill(n, d, 0, &mut cur, &mut out);
    }
    out
}

fn fill(n: usize, d: usize, v: usize, cur: &mut [u8; MAX_DIM], out: &mut Vec<[u8; MAX_DIM]>) {
    if v == n - 1 {
        cur[v] = d as u8;
        out.push(*cur);
        cur[v] = 0;
        return;
    }
    for k in (0..=d).rev() {
        cur[v] = k as u8;
        fill(n, d - k, v + 1, cur, out);
    }
    cur[v] = 0;
}

/// Number of harmonic polynomials of degree `l` on S^m.
pub fn band_dimension(m: usize, l: usize) -> usize {
    let binom = |a: usize, b: usize| -> usize { (0..b).fold(1usize, |acc, i| acc * (a - i) / (i + 1)) };
    let hom = |d: usize| binom(d + m, m);
    if l < 2 {
        hom(l)
    } else {
        hom(l) - hom(l - 2)
    }
}

/// Eigenvalue of (1/m)(m + Δ̄) on the band H_l: a_l = (m − l(m+l−1))/m.
pub fn band_eigenvalue(m: usize, l: usize) -> f64 {
    let (m, l) = (m as f64, l as f64);
    (m - l * (m + l - 1.0)) / m
}

/// Values and first/second sphere derivatives of a function at a node in
/// the node's tangent frame.
#[derive(Clone, Copy, Debug, Default)]
pub struct NodeJet {
    pub value: f64,
    pub grad: [f64; 3],
    /// Symmetric Hessian, full 3 × 3 (leading m × m block used).
    pub hess: [[f64; 3]; 3],
}

/// Orthonormal band basis up to a degree cap on a quadrature grid.
#[derive(Clone, Debug)]
pub struct BandBasis {
    pub m: usize,
    pub cap: usize,
    pub grid: SphereGrid,
    /// Band of every basis element.
    pub band: Vec<usize>,
    /// Index range of each band.
    pub band_ranges: Vec<std::ops::Range<usize>>,
    /// Monomial exponents shared by all basis polynomials.
    pub monomials: Vec<[u8; MAX_DIM]>,
    /// Monomial coefficients, one row per basis element.
    pub coefficients: DMatrix<f64>,
    /// Basis values at nodes (nodes × basis).
    pub values: DMatrix<f64>,
    /// Quadrature-weighted transpose (basis × nodes), for projections.
    pub analysis: DMatrix<f64>,
    /// Tangent frames at nodes: `tangents[node][α]`.
    pub tangents: Vec<[[f64; MAX_DIM]; 3]>,
    /// Node jets of the basis (nodes × basis, row-major).
    pub jets: Vec<NodeJet>,
    /// Tail tolerance for band-limited operations.
    pub tail_tol: f64,
}

impl BandBasis {
    /// Build the basis with `cap` bands on a grid of exactness `lq`
    /// (requires `lq ≥ 2·cap`).
    pub fn new(m: usize, cap: usize, lq: usize) -> Result<Self> {
        if lq < 2 * cap {
            return Err(Error::Input(format!("quadrature degree {lq} < 2 × degree cap {cap}")));
        }
        let grid = build_grid(m, lq)?;
        let n = m + 1;
        let mons = monomials(n, cap);
        let nn = grid.len();
        let mono_vals = DMatrix::from_fn(nn, mons.len(), |k, j| eval_monomial(&mons[j], &grid.nodes[k]));
        let w = &grid.weights;
        let mut rows: Vec<Vec<f64>> = Vec::new(); // monomial coefficients per basis element
        let mut vals: Vec<Vec<f64>> = Vec::new(); // node values per basis element
        let mut band = Vec::new();
        let mut band_ranges = Vec::new();
        let inner = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(w).map(|((x, y), z)| x * y * z).sum() };
        for l in 0..=cap {
            let start = vals.len();
            let cand: Vec<usize> = (0..mons.len()).filter(|&j| mons[j].iter().map(|&e| e as usize).sum::<usize>() == l).collect();
            let mut cv: Vec<Vec<f64>> = Vec::new();
            let mut cc: Vec<Vec<f64>> = Vec::new();
            for &j in &cand {
                let mut v: Vec<f64> = mono_vals.column(j).iter().copied().collect();
                let mut c = vec![0.0; mons.len()];
                c[j] = 1.0;
                // two passes of projection off the lower bands of equal parity
                for _ in 0..2 {
                    for b in 0..start {
                        if band[b] % 2 != l % 2 {
                            continue;
                        }
                        let d = inner(&v, &vals[b]);
                        for k in 0..nn {
                            v[k] -= d * vals[b][k];
                        }
                        for k in 0..mons.len() {
                            c[k] -= d * rows[b][k];
                        }
                    }
                }
                cv.push(v);
                cc.push(c);
            }
            let nc = cv.len();
            let gram = DMatrix::from_fn(nc, nc, |i, j| inner(&cv[i], &cv[j]));
            let eig = SymmetricEigen::new(gram);
            let lmax = eig.eigenvalues.max();
            let mut order: Vec<usize> = (0..nc).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
            let want = band_dimension(m, l);
            let keep: Vec<usize> = order.into_iter().filter(|&i| eig.eigenvalues[i] > 1e-11 * lmax).collect();
            if keep.len() != want {
                return Err(Error::Numerical(format!(
                    "band {l}: rank {} differs from harmonic dimension {want}",
                    keep.len()
                )));
            }
            for &i in &keep {
                let s = 1.0 / eig.eigenvalues[i].sqrt();
                let mut v = vec![0.0; nn];
                let mut c = vec![0.0; mons.len()];
                for q in 0..nc {
                    let e = eig.eigenvectors[(q, i)] * s;
                    for k in 0..nn {
                        v[k] += e * cv[q][k];
                    }
                    for k in 0..mons.len() {
                        c[k] += e * cc[q][k];
                    }
                }
                vals.push(v);
                rows.push(c);
                band.push(l);
            }
            band_ranges.push(start..vals.len());
        }
        let nb = vals.len();
        let coefficients = DMatrix::from_fn(nb, mons.len(), |i, j| rows[i][j]);
        let values = DMatrix::from_fn(nn, nb, |k, i| vals[i][k]);
        let analysis = DMatrix::from_fn(nb, nn, |i, k| vals[i][k] * w[k]);
        let tangents: Vec<_> = grid.nodes.iter().map(|x| tangent_frame(m, x)).collect();
        let mut basis = BandBasis {
            m,
            cap,
            grid,
            band,
            band_ranges,
            monomials: mons,
            coefficients,
            values,
            analysis,
            tangents,
            jets: Vec::new(),
            tail_tol: 1e-8,
        };
        basis.jets = basis.compute_node_jets();
        Ok(basis)
    }

    pub fn len(&self) -> usize {
        self.band.len()
    }
    pub fn is_empty(&self) -> bool {
        self.band.is_empty()
    }
    pub fn nodes(&self) -> usize {
        self.grid.len()
    }

    /// Point of S^m reached from node `k` by the gnomonic chart coordinates `u`.
    pub fn chart_point<T: Scalar>(&self, k: usize, u: &[T]) -> [T; MAX_DIM] {
        let n = self.m + 1;
        let x = &self.grid.nodes[k];
        let tf = &self.tangents[k];
        let zero = u[0].zero_like();
        let mut p = [zero; MAX_DIM];
        let mut r2 = zero;
        for i in 0..n {
            let mut v = u[0].cst(x[i]);
            for a in 0..self.m {
                v += u[a] * tf[a][i];
            }
            p[i] = v;
            r2 += v * v;
        }
        let inv = r2.sqrt().recip();
        for v in p.iter_mut().take(n) {
            *v = *v * inv;
        }
        p
    }

    /// Evaluate all monomials at a (jet) point.
    fn monomial_values<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let n = self.m + 1;
        let one = x[0].cst(1.0);
        let mut pw: Vec<Vec<T>> = (0..n)
            .map(|i| {
                let mut v = vec![one; self.cap + 1];
                for d in 1..=self.cap {
                    v[d] = v[d - 1] * x[i];
                }
                v
            })
            .collect();
        let out = self
            .monomials
            .iter()
            .map(|e| {
                let mut acc = pw[0][e[0] as usize];
                for i in 1..n {
                    if e[i] > 0 {
                        acc = acc * pw[i][e[i] as usize];
                    }
                }
                acc
            })
            .collect();
        pw.clear();
        out
    }

    /// Evaluate basis element `j` at an arbitrary (jet) point of S^m.
    pub fn eval_at<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mv = self.monomial_values(x);
        let zero = x[0].zero_like();
        (0..self.len())
            .map(|j| {
                let mut acc = zero;
                for (k, m) in mv.iter().enumerate() {
                    let c = self.coefficients[(j, k)];
                    if c != 0.0 {
                        acc += *m * c;
                    }
                }
                acc
            })
            .collect()
    }

    fn compute_node_jets(&self) -> Vec<NodeJet> {
        let m = self.m;
        let sp = jet_space(m, 2);
        let nb = self.len();
        let mut out = vec![NodeJet::default(); self.nodes() * nb];
        for k in 0..self.nodes() {
            let u: Vec<Jet<10>> = (0..m).map(|a| Jet::var(sp, a, 0.0)).collect();
            let x = self.chart_point(k, &u);
            let vals = self.eval_at(&x[..m + 1]);
            for (j, v) in vals.iter().enumerate() {
                let nj = &mut out[k * nb + j];
                nj.value = v.re();
                for a in 0..m {
                    nj.grad[a] = v.d1(a);
                    for b in 0..m {
                        nj.hess[a][b] = v.d2(a, b);
                    }
                }
            }
        }
        out
    }

    /// Basis jet of element `j` at node `k`.
    #[inline]
    pub fn node_jet(&self, k: usize, j: usize) -> &NodeJet {
        &self.jets[k * self.len() + j]
    }

    /// Band coefficients of nodal values.
    pub fn analyze(&self, values: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVector::from_column_slice(values);
        (&self.analysis * v).iter().copied().collect()
    }

    /// Nodal values of a coefficient vector.
    pub fn synthesize(&self, coef: &[f64]) -> Vec<f64> {
        let c = nalgebra::DVector::from_column_slice(coef);
        (&self.values * c).iter().copied().collect()
    }

    /// Relative L² energy of `values` outside the span of the basis.
    pub fn tail_energy(&self, values: &[f64]) -> f64 {
        let back = self.synthesize(&self.analyze(values));
        let total = self.grid.integrate(&values.iter().map(|v| v * v).collect::<Vec<_>>());
        let rest = self.grid.integrate(&values.iter().zip(&back).map(|(v, b)| (v - b).powi(2)).collect::<Vec<_>>());
        if total <= 0.0 {
            return 0.0;
        }
        (rest / total).sqrt()
    }

    /// L²-orthogonal projection onto band `l`.
    pub fn project_band(&self, values: &[f64], l: usize) -> Result<Vec<f64>> {
        if l > self.cap {
            return Err(Error::Input(format!("band {l} above degree cap {}", self.cap)));
        }
        let mut c = self.analyze(values);
        for (j, cj) in c.iter_mut().enumerate() {
            if self.band[j] != l {
                *cj = 0.0;
            }
        }
        Ok(self.synthesize(&c))
    }

    /// Π: projection onto H₁.
    pub fn project_h1(&self, values: &[f64]) -> Vec<f64> {
        self.project_band(values, 1).expect("band 1 below cap")
    }

    /// Π⊥ = identity − Π.
    pub fn project_perp(&self, values: &[f64]) -> Vec<f64> {
        let p = self.project_h1(values);
        values.iter().zip(&p).map(|(a, b)| a - b).collect()
    }

    /// (1/m)(m + Δ̄) applied band-wise.
    pub fn apply_jacobi(&self, values: &[f64]) -> Result<Vec<f64>> {
        let tail = self.tail_energy(values);
        if tail > self.tail_tol {
            return Err(Error::Numerical(format!("tail energy {tail:.3e} above tolerance")));
        }
        let mut c = self.analyze(values);
        for (j, cj) in c.iter_mut().enumerate() {
            *cj *= band_eigenvalue(self.m, self.band[j]);
        }
        Ok(self.synthesize(&c))
    }

    /// H₁ coefficients of nodal values, as a vector in R^(m+1): since
    /// ∫ x^i x^j = (Vol/(m+1)) δ^ij, Πf = Σ_i v_i x^i with v the returned vector.
    pub fn h1_vector(&self, values: &[f64]) -> Vec<f64> {
        let n = self.m + 1;
        let scale = (n as f64) / sphere_volume(self.m);
        (0..n)
            .map(|i| {
                scale * values.iter().zip(&self.grid.nodes).zip(&self.grid.weights).map(|((v, x), w)| v * x[i] * w).sum::<f64>()
            })
            .collect()
    }
}

fn eval_monomial(e: &[u8; MAX_DIM], x: &[f64; MAX_DIM]) -> f64 {
    let mut acc = 1.0;
    for i in 0..MAX_DIM {
        acc *= x[i].powi(e[i] as i32);
    }
    acc
}

/// Orthonormal basis of the tangent space x^⊥ (Gram–Schmidt on the axes,
/// skipping the one most aligned with x).
fn tangent_frame(m: usize, x: &[f64; MAX_DIM]) -> [[f64; MAX_DIM]; 3] {
    let n = m + 1;
    let mut skip = 0;
    for i in 1..n {
        if x[i].abs() > x[skip].abs() {
            skip = i;
        }
    }
    let mut out = [[0.0; MAX_DIM]; 3];
    let mut found: Vec<[f64; MAX_DIM]> = vec![*x];
    let mut a = 0;
    for i in 0..n {
        if i == skip {
            continue;
        }
        let mut v = [0.0; MAX_DIM];
        v[i] = 1.0;
        for f in &found {
            let d: f64 = (0..n).map(|k| v[k] * f[k]).sum();
            for k in 0..n {
                v[k] -= d * f[k];
            }
        }
        let nv = (0..n).map(|k| v[k] * v[k]).sum::<f64>().sqrt();
        for vk in v.iter_mut().take(n) {
            *vk /= nv;
        }
        found.push(v);
        out[a] = v;
        a += 1;
    }
    out
}

/// A function on TimeGrid × S^m held as band coefficients per time sample
/// (row-major: time × basis).
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimeField {
    pub nt: usize,
    pub nb: usize,
    pub coef: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(nt: usize, nb: usize) -> Self {
        SpaceTimeField { nt, nb, coef: vec![0.0; nt * nb] }
    }
    #[inline]
    pub fn at(&self, t: usize) -> &[f64] {
        &self.coef[t * self.nb..(t + 1) * self.nb]
    }
    #[inline]
    pub fn at_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.coef[t * self.nb..(t + 1) * self.nb]
    }
    pub fn axpy(&mut self, a: f64, other: &SpaceTimeField) {
        for (x, y) in self.coef.iter_mut().zip(&other.coef) {
            *x += a * y;
        }
    }
    pub fn scaled(&self, a: f64) -> Self {
        SpaceTimeField { nt: self.nt, nb: self.nb, coef: self.coef.iter().map(|x| a * x).collect() }
    }
    pub fn max_abs_coef(&self) -> f64 {
        self.coef.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
    /// Largest |H₁ coefficient| over all times.
    pub fn h1_size(&self, basis: &BandBasis) -> f64 {
        let r = basis.band_ranges[1].clone();
        (0..self.nt).flat_map(|t| self.at(t)[r.clone()].to_vec()).fold(0.0, |m, x| m.max(x.abs()))
    }
    /// Sup norm over the grid nodes.
    pub fn sup(&self, basis: &BandBasis) -> f64 {
        (0..self.nt)
            .map(|t| basis.synthesize(self.at(t)).iter().fold(0.0f64, |m, x| m.max(x.abs())))
            .fold(0.0, f64::max)
    }
}
