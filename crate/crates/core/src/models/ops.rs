//! Small differentiable helpers built from primitive tensor ops.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

pub fn softmax_last(z: &Tensor) -> Result<Tensor> {
    let max = z.max_keepdim(D::Minus1)?.detach();
    let e = z.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(z: &Tensor) -> Result<Tensor> {
    let max = z.max_keepdim(D::Minus1)?.detach();
    let shifted = z.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Fails with the layer id when `t` holds NaN or infinities.
pub fn ensure_finite(t: &Tensor, layer: &str) -> Result<()> {
    let s = scalar(&t.abs()?.sum_all()?)?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer: layer.to_string(),
        })
    }
}

/// Row-wise argmax of a `(n, K)` tensor.
pub fn argmax_rows(t: &Tensor) -> Result<Vec<usize>> {
    let rows: Vec<Vec<f64>> = t.to_dtype(candle_core::DType::F64)?.to_vec2()?;
    Ok(rows.iter().map(|r| argmax(r)).collect())
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}
