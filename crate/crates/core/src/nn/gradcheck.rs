//! Central finite-difference gradient checking, in double precision.

use candle_core::Tensor;

use crate::error::Result;

/// Numeric gradient of a scalar-valued function at `x` (central differences).
/// `x` must be an F64 tensor.
pub fn numeric_grad<F>(f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let dims = x.dims().to_vec();
    let base = x.flatten_all()?.to_vec1::<f64>()?;
    let mut grad = vec![0f64; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = f(&Tensor::from_vec(plus, dims.as_slice(), x.device())?)?;
        let fm = f(&Tensor::from_vec(minus, dims.as_slice(), x.device())?)?;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Ok(Tensor::from_vec(grad, dims.as_slice(), x.device())?)
}

/// Comparison outcome between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy)]
pub struct GradDiff {
    pub max_abs_diff: f64,
    pub ref_scale: f64,
}

impl GradDiff {
    /// max |a - n| / (max |n| + tiny): a norm-wise relative error that stays
    /// meaningful when individual entries are near zero.
    pub fn rel_err(&self) -> f64 {
        self.max_abs_diff / (self.ref_scale + 1e-12)
    }

    /// allclose-style check. The absolute floor covers gradients that are
    /// exactly zero in theory (e.g. a key-projection bias: softmax is
    /// invariant to per-row constant shifts) where both sides are pure
    /// finite-difference noise.
    pub fn within(&self, rtol: f64, atol: f64) -> bool {
        self.max_abs_diff <= atol + rtol * self.ref_scale
    }
}

pub fn compare(analytic: &Tensor, numeric: &Tensor) -> Result<GradDiff> {
    let a = analytic.flatten_all()?.to_vec1::<f64>()?;
    let n = numeric.flatten_all()?.to_vec1::<f64>()?;
    assert_eq!(a.len(), n.len());
    let max_abs_diff = a
        .iter()
        .zip(n.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let ref_scale = n.iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(GradDiff {
        max_abs_diff,
        ref_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn quadratic_gradient() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(
            &Tensor::from_vec(vec![0.5f64, -1.0, 2.0], (3,), &dev).unwrap(),
        )
        .unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let analytic = grads.get(&x).unwrap();
        let numeric = numeric_grad(
            |t| {
                Ok(t.sqr()?
                    .sum_all()?
                    .to_scalar::<f64>()?)
            },
            x.as_tensor(),
            1e-5,
        )
        .unwrap();
        let diff = compare(analytic, &numeric).unwrap();
        assert!(diff.rel_err() < 1e-8, "rel err {}", diff.rel_err());
    }
}
