use super::{Tape, Tensor, TensorError};

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `x`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    assert!(eps > 0.0, "grad_check needs a positive step size");

    let mut tape = Tape::new();
    let tracked = tape.leaf(x);
    let out = f(&mut tape, &tracked)?;
    if out.shape() != [1] {
        return Err(TensorError::NonScalarLoss {
            shape: out.shape().to_vec(),
        });
    }
    // A function that never touches x produces an untracked output; its
    // gradient is identically zero.
    let analytic = if out.requires_grad() {
        tape.backward(&out)?
            .wrt(&tracked)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; x.numel()])
    } else {
        vec![0.0; x.numel()]
    };

    let mut eval = |point: &Tensor| -> Result<f64, TensorError> {
        let mut probe_tape = Tape::new();
        let out = f(&mut probe_tape, point)?;
        if out.shape() != [1] {
            return Err(TensorError::NonScalarLoss {
                shape: out.shape().to_vec(),
            });
        }
        Ok(out.item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] += eps;
        minus[i] -= eps;
        let fp = eval(&Tensor::new(plus, x.shape())?)?;
        let fm = eval(&Tensor::new(minus, x.shape())?)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_sum_matches_finite_differences() {
        let x = Tensor::new(vec![0.3, -1.2, 2.0, 0.0], &[4]).unwrap();
        let err = grad_check(
            |tape, x| {
                let s = tape.sigmoid(x)?;
                tape.sum(&s, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let err = grad_check(|_, _| Ok(Tensor::scalar(7.0)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let err = grad_check(|tape, x| tape.relu(x), &x, 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }
}
