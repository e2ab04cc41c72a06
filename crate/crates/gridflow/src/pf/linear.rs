//! LU factorization with partial pivoting for the Newton correction solve.
//! Jacobians at desk scale stay in the hundreds of unknowns, so the factor
//! works on a dense copy filled from the sparse triplets.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinearError {
    #[error("singular matrix (pivot below threshold at column {0})")]
    Singular(usize),
}

/// Solves A x = b in place, overwriting `a` (row-major n x n) and returning x.
pub fn lu_solve(a: &mut [f64], n: usize, b: &[f64]) -> Result<Vec<f64>, LinearError> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut piv = k;
        let mut best = a[k * n + k].abs();
        for i in k + 1..n {
            let v = a[i * n + k].abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best < 1e-14 {
            return Err(LinearError::Singular(k));
        }
        if piv != k {
            for j in 0..n {
                a.swap(k * n + j, piv * n + j);
            }
            perm.swap(k, piv);
        }
        let pivot = a[k * n + k];
        for i in k + 1..n {
            let factor = a[i * n + k] / pivot;
            a[i * n + k] = factor;
            if factor != 0.0 {
                let (upper, lower) = a.split_at_mut(i * n);
                let row_k = &upper[k * n..k * n + n];
                let row_i = &mut lower[..n];
                for j in k + 1..n {
                    row_i[j] -= factor * row_k[j];
                }
            }
        }
    }
    // forward/back substitution on the permuted right-hand side
    let mut x: Vec<f64> = perm.iter().map(|&p| b[p]).collect();
    for i in 1..n {
        let mut s = x[i];
        for j in 0..i {
            s -= a[i * n + j] * x[j];
        }
        x[i] = s;
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= a[i * n + j] * x[j];
        }
        x[i] = s / a[i * n + i];
    }
    Ok(x)
}
