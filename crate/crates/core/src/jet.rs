//! Truncated multivariate Taylor arithmetic.
//!
//! A [`Jet`] stores the Taylor coefficients of a function of `nvars` variables
//! up to a total degree, in graded-lexicographic monomial order. Arithmetic is
//! exact for the truncated polynomial ring, so pushing jets through any
//! smooth computation (including an ODE integrator) yields exact derivatives
//! of that computation up to the truncation degree.
//!
//! Storage is a fixed-size array; the monomial layout lives in a shared,
//! leaked [`JetSpace`] obtained from [`jet_space`].

use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::{Mutex, OnceLock};

/// Largest number of variables a jet space may have.
pub const MAX_VARS: usize = 8;

/// Monomial layout and multiplication table for one (nvars, degree) pair.
pub struct JetSpace {
    pub nvars: usize,
    pub degree: usize,
    /// Exponent vectors, graded then lexicographic; index 0 is the constant.
    pub exps: Vec<[u8; MAX_VARS]>,
    /// Total degree of each monomial.
    pub deg: Vec<u8>,
    /// Triples `(i, j, k)`: monomial i times monomial j equals monomial k.
    mul: Vec<(u16, u16, u16)>,
    /// `down[v][k]`: index of monomial k with the exponent of v lowered by one.
    down: Vec<Vec<Option<usize>>>,
    index: HashMap<[u8; MAX_VARS], usize>,
}

impl JetSpace {
    fn new(nvars: usize, degree: usize) -> Self {
        assert!(nvars <= MAX_VARS, "too many jet variables");
        let mut exps = Vec::new();
        for d in 0..=degree {
            let mut cur = [0u8; MAX_VARS];
            gen_monomials(nvars, d, 0, &mut cur, &mut exps);
        }
        let deg: Vec<u8> = exps.iter().map(|e| e.iter().sum()).collect();
        let index: HashMap<_, _> = exps.iter().enumerate().map(|(i, e)| (*e, i)).collect();
        let mut mul = Vec::new();
        for (i, a) in exps.iter().enumerate() {
            for (j, b) in exps.iter().enumerate() {
                if deg[i] as usize + deg[j] as usize > degree {
                    continue;
                }
                let mut c = [0u8; MAX_VARS];
                for v in 0..MAX_VARS {
                    c[v] = a[v] + b[v];
                }
                mul.push((i as u16, j as u16, index[&c] as u16));
            }
        }
        let down = (0..nvars)
            .map(|v| {
                exps.iter()
                    .map(|e| {
                        if e[v] == 0 {
                            None
                        } else {
                            let mut c = *e;
                            c[v] -= 1;
                            Some(index[&c])
                        }
                    })
                    .collect()
            })
            .collect();
        JetSpace { nvars, degree, exps, deg, mul, down, index }
    }

    /// Number of coefficients.
    #[inline]
    pub fn len(&self) -> usize {
        self.exps.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.exps.is_empty()
    }

    /// Index of the monomial with the given exponents, if present.
    pub fn monomial(&self, exps: &[u8]) -> Option<usize> {
        let mut key = [0u8; MAX_VARS];
        key[..exps.len()].copy_from_slice(exps);
        self.index.get(&key).copied()
    }

    /// Index of the monomial `x_i x_j`.
    pub fn second(&self, i: usize, j: usize) -> usize {
        let mut key = [0u8; MAX_VARS];
        key[i] += 1;
        key[j] += 1;
        self.index[&key]
    }
}

fn gen_monomials(n: usize, d: usize, v: usize, cur: &mut [u8; MAX_VARS], out: &mut Vec<[u8; MAX_VARS]>) {
    if v + 1 == n || n == 0 {
        if n > 0 {
            cur[v] = d as u8;
        }
        if n > 0 || d == 0 {
            out.push(*cur);
        }
        if n > 0 {
            cur[v] = 0;
        }
        return;
    }
    for k in (0..=d).rev() {
        cur[v] = k as u8;
        gen_monomials(n, d - k, v + 1, cur, out);
    }
    cur[v] = 0;
}

/// Shared jet space for `nvars` variables truncated at total `degree`.
pub fn jet_space(nvars: usize, degree: usize) -> &'static JetSpace {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), &'static JetSpace>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("jet cache poisoned");
    *guard
        .entry((nvars, degree))
        .or_insert_with(|| Box::leak(Box::new(JetSpace::new(nvars, degree))))
}

/// Scalar types that support the arithmetic used by the geometric kernels.
///
/// Implemented by `f64` and by [`Jet`]; code written against this trait
/// computes values and, with jets, exact derivatives.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign<f64>
{
    /// Constant of the same kind as `self`.
    fn cst(&self, v: f64) -> Self;
    /// Value part.
    fn re(&self) -> f64;
    /// Largest coefficient magnitude (used for error control).
    fn size(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn recip(self) -> Self;
    #[inline]
    fn zero_like(&self) -> Self {
        self.cst(0.0)
    }
    #[inline]
    fn sq(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(&self, v: f64) -> Self {
        v
    }
    #[inline]
    fn re(&self) -> f64 {
        *self
    }
    #[inline]
    fn size(&self) -> f64 {
        self.abs()
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn recip(self) -> Self {
        1.0 / self
    }
}

/// Truncated Taylor polynomial with at most `N` coefficients.
#[derive(Clone, Copy)]
pub struct Jet<const N: usize> {
    sp: &'static JetSpace,
    pub c: [f64; N],
}

impl<const N: usize> fmt::Debug for Jet<N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Jet{:?}", &self.c[..self.sp.len()])
    }
}

impl<const N: usize> Jet<N> {
    #[inline]
    pub fn constant(sp: &'static JetSpace, v: f64) -> Self {
        assert!(sp.len() <= N, "jet space has {} coefficients, storage {}", sp.len(), N);
        let mut c = [0.0; N];
        c[0] = v;
        Jet { sp, c }
    }

    /// The variable `x_i` expanded about `value`.
    pub fn var(sp: &'static JetSpace, i: usize, value: f64) -> Self {
        let mut j = Self::constant(sp, value);
        if sp.degree >= 1 {
            j.c[1 + i] = 1.0;
        }
        j
    }

    #[inline]
    pub fn space(&self) -> &'static JetSpace {
        self.sp
    }

    /// Coefficient of the monomial at index `k`.
    #[inline]
    pub fn coef(&self, k: usize) -> f64 {
        self.c[k]
    }

    /// First partial derivative at the expansion point.
    #[inline]
    pub fn d1(&self, i: usize) -> f64 {
        self.c[1 + i]
    }

    /// Second partial derivative at the expansion point.
    pub fn d2(&self, i: usize, j: usize) -> f64 {
        let k = self.sp.second(i, j);
        if i == j {
            2.0 * self.c[k]
        } else {
            self.c[k]
        }
    }

    /// Derivative with respect to variable `v`, as a jet one degree lower
    /// (top-degree coefficients of the result are zero).
    pub fn diff(&self, v: usize) -> Self {
        let mut out = [0.0; N];
        let down = &self.sp.down[v];
        for k in 0..self.sp.len() {
            if let Some(t) = down[k] {
                out[t] += self.sp.exps[k][v] as f64 * self.c[k];
            }
        }
        Jet { sp: self.sp, c: out }
    }

    /// Evaluate `sum_k coefs[k] * (self - self.re())^k` by Horner's rule.
    fn compose(self, coefs: &[f64]) -> Self {
        let mut t = self;
        t.c[0] = 0.0;
        let d = coefs.len() - 1;
        let mut acc = Self::constant(self.sp, coefs[d]);
        for k in (0..d).rev() {
            acc = acc * t;
            acc.c[0] += coefs[k];
        }
        acc
    }

    /// Apply a scalar function given its value and derivatives at `self.re()`.
    pub fn apply(self, derivs: &[f64]) -> Self {
        let d = self.sp.degree.min(derivs.len() - 1);
        let mut coefs = Vec::with_capacity(d + 1);
        let mut fact = 1.0;
        for (k, dv) in derivs.iter().take(d + 1).enumerate() {
            if k > 0 {
                fact *= k as f64;
            }
            coefs.push(dv / fact);
        }
        self.compose(&coefs)
    }
}

impl<const N: usize> Scalar for Jet<N> {
    #[inline]
    fn cst(&self, v: f64) -> Self {
        Self::constant(self.sp, v)
    }
    #[inline]
    fn re(&self) -> f64 {
        self.c[0]
    }
    fn size(&self) -> f64 {
        self.c[..self.sp.len()].iter().fold(0.0, |m, x| m.max(x.abs()))
    }
    fn exp(self) -> Self {
        let d = self.sp.degree;
        let e = self.c[0].exp();
        let mut coefs = [0.0; 16];
        let mut f = 1.0;
        for (k, c) in coefs.iter_mut().enumerate().take(d + 1) {
            if k > 0 {
                f *= k as f64;
            }
            *c = e / f;
        }
        self.compose(&coefs[..=d])
    }
    fn ln(self) -> Self {
        let d = self.sp.degree;
        let a = self.c[0];
        let mut coefs = [0.0; 16];
        coefs[0] = a.ln();
        let mut p = 1.0;
        for k in 1..=d {
            p /= a;
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            coefs[k] = sign * p / k as f64;
        }
        self.compose(&coefs[..=d])
    }
    fn sqrt(self) -> Self {
        let d = self.sp.degree;
        let a = self.c[0];
        let mut coefs = [0.0; 16];
        let mut binom = 1.0;
        let mut p = a.sqrt();
        for (k, c) in coefs.iter_mut().enumerate().take(d + 1) {
            if k > 0 {
                binom *= (0.5 - (k as f64 - 1.0)) / k as f64;
                p /= a;
            }
            *c = binom * p;
        }
        self.compose(&coefs[..=d])
    }
    fn recip(self) -> Self {
        let d = self.sp.degree;
        let a = self.c[0];
        let mut coefs = [0.0; 16];
        let mut p = 1.0 / a;
        for (k, c) in coefs.iter_mut().enumerate().take(d + 1) {
            *c = if k % 2 == 0 { p } else { -p };
            p /= a;
        }
        self.compose(&coefs[..=d])
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: Self) -> Self {
        for k in 0..self.sp.len() {
            self.c[k] += o.c[k];
        }
        self
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: Self) -> Self {
        for k in 0..self.sp.len() {
            self.c[k] -= o.c[k];
        }
        self
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut out = [0.0; N];
        for &(i, j, k) in &self.sp.mul {
            out[k as usize] += self.c[i as usize] * o.c[j as usize];
        }
        Jet { sp: self.sp, c: out }
    }
}

impl<const N: usize> Div for Jet<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        self * o.recip()
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        for k in 0..self.sp.len() {
            self.c[k] = -self.c[k];
        }
        self
    }
}

impl<const N: usize> Add<f64> for Jet<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: f64) -> Self {
        self.c[0] += o;
        self
    }
}

impl<const N: usize> Sub<f64> for Jet<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: f64) -> Self {
        self.c[0] -= o;
        self
    }
}

impl<const N: usize> Mul<f64> for Jet<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, o: f64) -> Self {
        for k in 0..self.sp.len() {
            self.c[k] *= o;
        }
        self
    }
}

impl<const N: usize> Div<f64> for Jet<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: f64) -> Self {
        self * (1.0 / o)
    }
}

impl<const N: usize> AddAssign for Jet<N> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        for k in 0..self.sp.len() {
            self.c[k] += o.c[k];
        }
    }
}

impl<const N: usize> SubAssign for Jet<N> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        for k in 0..self.sp.len() {
            self.c[k] -= o.c[k];
        }
    }
}

impl<const N: usize> MulAssign<f64> for Jet<N> {
    #[inline]
    fn mul_assign(&mut self, o: f64) {
        for k in 0..self.sp.len() {
            self.c[k] *= o;
        }
    }
}
