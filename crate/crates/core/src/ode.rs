//! Adaptive Gragg–Bulirsch–Stoer integration.
//!
//! Modified-midpoint sweeps with step sequence 2, 4, 6, … are extrapolated
//! in h² (Aitken–Neville). The scheme is generic over [`Scalar`], so running it
//! on jets differentiates the discrete flow map exactly.

use crate::error::{numerical, Result};
use crate::jet::Scalar;

/// Tolerances and limits of the extrapolation integrator.
#[derive(Clone, Copy, Debug)]
pub struct Extrapolation {
    pub rtol: f64,
    pub atol: f64,
    /// Maximum number of extrapolation columns per step.
    pub max_cols: usize,
    /// Maximum accepted plus rejected macro steps.
    pub max_steps: usize,
}

impl Default for Extrapolation {
    fn default() -> Self {
        Extrapolation { rtol: 1e-13, atol: 1e-13, max_cols: 9, max_steps: 10_000 }
    }
}

impl Extrapolation {
    pub fn with_tol(tol: f64) -> Self {
        Extrapolation { rtol: tol, atol: tol, ..Default::default() }
    }

    /// Integrate `y' = f(t, y)` from `t0` to `t1`; only the first `len`
    /// components of the state are active.
    pub fn integrate<T, const S: usize, F>(
        &self,
        mut f: F,
        y0: [T; S],
        len: usize,
        t0: f64,
        t1: f64,
    ) -> Result<[T; S]>
    where
        T: Scalar,
        F: FnMut(f64, &[T; S]) -> Result<[T; S]>,
    {
        let span = t1 - t0;
        if span == 0.0 {
            return Ok(y0);
        }
        let dir = span.signum();
        let mut t = t0;
        let mut y = y0;
        let mut h = span;
        let mut steps = 0;
        while (t1 - t) * dir > 1e-15 * span.abs() {
            if (t + h - t1) * dir > 0.0 {
                h = t1 - t;
            }
            steps += 1;
            if steps > self.max_steps {
                return numerical(format!("extrapolation integrator exceeded {} steps", self.max_steps));
            }
            match self.step(&mut f, &y, len, t, h)? {
                Some((ynew, cols)) => {
                    y = ynew;
                    t += h;
                    if cols <= 5 {
                        h *= 1.6;
                    } else if cols >= self.max_cols - 1 {
                        h *= 0.7;
                    }
                }
                None => h *= 0.4,
            }
            if h.abs() < 1e-14 * span.abs() {
                return numerical("extrapolation step size underflow");
            }
        }
        Ok(y)
    }

    /// One macro step; returns the extrapolated state and the number of
    /// columns used, or `None` when the tolerance was not reached.
    fn step<T, const S: usize, F>(
        &self,
        f: &mut F,
        y: &[T; S],
        len: usize,
        t: f64,
        h: f64,
    ) -> Result<Option<([T; S], usize)>>
    where
        T: Scalar,
        F: FnMut(f64, &[T; S]) -> Result<[T; S]>,
    {
        let f0 = f(t, y)?;
        let mut table: Vec<[T; S]> = Vec::with_capacity(self.max_cols);
        for j in 0..self.max_cols {
            let n = 2 * (j + 1);
            let mut row = midpoint(f, y, &f0, len, t, h, n)?;
            // Neville recursion against previous row, in place.
            let mut prev_col_diff = 0.0;
            for k in 0..j {
                let nk = 2 * (j - k);
                let ratio = (n as f64 / nk as f64).powi(2) - 1.0;
                let mut next = row;
                let mut diff = 0.0f64;
                let mut scale = 0.0f64;
                for i in 0..len {
                    let d = (row[i] - table[k][i]) / ratio;
                    next[i] = row[i] + d;
                    diff = diff.max(d.size());
                    scale = scale.max(next[i].size());
                }
                table[k] = row;
                row = next;
                prev_col_diff = diff / (self.atol + self.rtol * scale);
            }
            table.push(row);
            if j >= 2 && prev_col_diff <= 1.0 {
                return Ok(Some((table[j], j + 1)));
            }
        }
        Ok(None)
    }
}

fn midpoint<T, const S: usize, F>(
    f: &mut F,
    y: &[T; S],
    f0: &[T; S],
    len: usize,
    t: f64,
    h: f64,
    n: usize,
) -> Result<[T; S]>
where
    T: Scalar,
    F: FnMut(f64, &[T; S]) -> Result<[T; S]>,
{
    let hs = h / n as f64;
    let mut z0 = *y;
    let mut z1 = *y;
    for i in 0..len {
        z1[i] = y[i] + f0[i] * hs;
    }
    for k in 1..n {
        let fz = f(t + k as f64 * hs, &z1)?;
        let mut z2 = z1;
        for i in 0..len {
            z2[i] = z0[i] + fz[i] * (2.0 * hs);
        }
        z0 = z1;
        z1 = z2;
    }
    let fz = f(t + h, &z1)?;
    let mut out = z1;
    for i in 0..len {
        out[i] = (z1[i] + z0[i] + fz[i] * hs) * 0.5;
    }
    Ok(out)
}
