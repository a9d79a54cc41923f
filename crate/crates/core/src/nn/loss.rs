use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Mean over all elements of the squared difference.
pub fn loss_mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    mse_with_grad(pred, target).map(|(l, _)| l)
}

/// MSE and its gradient with respect to `pred`.
pub(crate) fn mse_with_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(
            "loss",
            format!("prediction {:?} vs target {:?}", pred.dims(), target.dims()),
        ));
    }
    let n = T::lit(pred.numel() as f64);
    let two = T::lit(2.0);
    let mut sum = 0.0f64;
    let mut grad = Vec::with_capacity(pred.numel());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        let df = d.to_f64().unwrap_or(f64::NAN);
        sum += df * df;
        grad.push(two * d / n);
    }
    let loss = T::lit(sum / pred.numel() as f64);
    Ok((loss, Tensor::new(pred.dims().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trivial_cases() {
        let a = Tensor::new(vec![2], vec![1.0f32, 0.0]).unwrap();
        let z = Tensor::<f32>::zeros(&[2]);
        assert_eq!(loss_mse(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_mse(&a, &z).unwrap(), 0.5);
        assert!(loss_mse(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = Tensor::from_fn(&[100], |_| rng.random_range(-5.0f32..5.0));
        let t = Tensor::from_fn(&[100], |_| rng.random_range(-5.0f32..5.0));
        let mut acc = 0.0f64;
        for i in 0..100 {
            let d = p.data()[i] as f64 - t.data()[i] as f64;
            acc += d * d;
        }
        let reference = acc / 100.0;
        let got = loss_mse(&p, &t).unwrap() as f64;
        assert!(((got - reference) / reference).abs() < 1e-6);
    }
}
