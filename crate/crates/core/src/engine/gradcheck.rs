use super::{Tape, Tensor, TensorError, Var};

/// Central-difference gradient of `f` at `x`.
pub fn central_difference<F>(f: &F, x: &Tensor, step: f64) -> Result<Tensor, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let eval = |point: Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let v = tape.constant(point)?;
        let out = f(&mut tape, v)?;
        let value = tape.value(out).item()?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(value)
    };
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        grad.data_mut()[i] = (eval(plus)? - eval(minus)?) / (2.0 * step);
    }
    Ok(grad)
}

/// Largest relative disagreement between the tape gradient of `f` at `x`
/// and its central-difference estimate:
/// `max_i |analytic_i - numeric_i| / max(1e-12, |numeric_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::invalid(
            "grad_check",
            format!("step must be positive, got {step}"),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone())?;
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    if !analytic.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    let numeric = central_difference(&f, x, step)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-12))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::engine::CustomUnary;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.7, 2.2, 0.0]);
        let err = grad_check(|t, v| t.sum_all(v), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(grad_check(|t, v| t.sum_all(v), &x, 0.0).is_err());
    }

    struct WrongCube;

    impl CustomUnary for WrongCube {
        fn name(&self) -> &'static str {
            "wrong_cube"
        }
        fn forward(&self, x: &Tensor) -> Tensor {
            x.map(|v| v * v * v)
        }
        // true derivative is 3x^2
        fn backward(&self, x: &Tensor, _y: &Tensor, g: &Tensor) -> Tensor {
            x.zip_map(g, |v, gv| 2.0 * v * v * gv).unwrap()
        }
    }

    #[test]
    fn detects_a_wrong_backward() {
        let x = Tensor::from_vec(vec![0.5, -1.2, 1.9]);
        let op: Arc<dyn CustomUnary> = Arc::new(WrongCube);
        let err = grad_check(
            |t, v| {
                let y = t.custom(v, op.clone())?;
                t.sum_all(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }
}
