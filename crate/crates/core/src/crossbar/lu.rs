//! Dense complex LU with partial pivoting.

use num_complex::Complex64;

pub(crate) struct Lu {
    n: usize,
    a: Vec<Complex64>,
    piv: Vec<usize>,
}

/// Factors the row-major `n`×`n` matrix in place. On a vanishing pivot the
/// offending column is returned.
pub(crate) fn factor(mut a: Vec<Complex64>, n: usize) -> Result<Lu, usize> {
    debug_assert_eq!(a.len(), n * n);
    let scale = a.iter().map(|x| x.norm()).fold(0.0, f64::max);
    let tiny = scale * f64::EPSILON * n.max(1) as f64;
    let mut piv: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (p, best) = (k..n)
            .map(|i| (i, a[i * n + k].norm()))
            .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if !(best > tiny) {
            return Err(k);
        }
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
            piv.swap(k, p);
        }
        let inv = 1.0 / a[k * n + k];
        for i in k + 1..n {
            let f = a[i * n + k] * inv;
            if f == Complex64::new(0.0, 0.0) {
                continue;
            }
            a[i * n + k] = f;
            for j in k + 1..n {
                let t = a[k * n + j];
                a[i * n + j] -= f * t;
            }
        }
    }
    Ok(Lu { n, a, piv })
}

impl Lu {
    pub(crate) fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        let mut x: Vec<Complex64> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.a[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.a[i * n + j] * x[j];
            }
            x[i] = s / self.a[i * n + i];
        }
        x
    }

    /// Column-major inverse: `inv[j]` is column `j`.
    pub(crate) fn inverse_columns(&self) -> Vec<Vec<Complex64>> {
        let zero = Complex64::new(0.0, 0.0);
        (0..self.n)
            .map(|j| {
                let mut e = vec![zero; self.n];
                e[j] = Complex64::new(1.0, 0.0);
                self.solve(&e)
            })
            .collect()
    }
}

pub(crate) fn mat_vec(a: &[Complex64], n: usize, x: &[Complex64]) -> Vec<Complex64> {
    (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum())
        .collect()
}

pub(crate) fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}
