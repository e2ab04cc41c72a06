//! Dense-tensor arithmetic with reverse-mode gradient recording. Just enough
//! surface to express the surrogate models and their losses; gradients are
//! verified against central finite differences.

mod tape;

pub use tape::{GradientMap, NodeId, Tape};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{primitive}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        primitive: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Row-major dense tensor, double precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (rows, cols) of a rank-2 tensor; rank-1 tensors are column vectors.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (self.shape[0], 1),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("dims2 on rank-{} tensor", self.shape.len()),
        }
    }
}

/// C = A * B for row-major matrices, ikj loop order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row_out = &mut out[i * n..(i + 1) * n];
        let row_a = &a[i * k..(i + 1) * k];
        for (kk, &aik) in row_a.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let row_b = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(row_b.iter()) {
                *o += aik * bv;
            }
        }
    }
}

/// Central-difference gradient check. `build` constructs the scalar loss on a
/// fresh tape from the registered parameter nodes; analytic gradients from the
/// tape are compared against central differences with the given step. Returns
/// the maximum relative error, with denominator max(1, |analytic|, |numeric|).
pub fn gradcheck<F>(build: F, params: &[Tensor], step: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let run = |values: &[Tensor]| -> Result<(f64, Option<GradientMap>), AutodiffError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        let value = tape.value(loss).data[0];
        let grads = tape.backward(loss)?;
        Ok((value, Some(grads)))
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).len() != 1 {
        return Err(AutodiffError::Invalid("gradcheck loss is not scalar".into()));
    }
    let grads = tape.backward(loss)?;

    let mut max_rel: f64 = 0.0;
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape.clone()));
        for e in 0..params[pi].len() {
            let mut plus = params.to_vec();
            plus[pi].data[e] += step;
            let mut minus = params.to_vec();
            minus[pi].data[e] -= step;
            let (fp, _) = run(&plus)?;
            let (fm, _) = run(&minus)?;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data[e];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_linear_is_exact() {
        // loss = sum(3*w)
        let w = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.1]);
        let err = gradcheck(
            |tape, ids| {
                let s = tape.scale(ids[0], 3.0)?;
                let target = tape.constant(Tensor::zeros(vec![2, 2]));
                let l = tape.mse_reduce(s, target)?;
                Ok(l)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err {err}");
    }
}
