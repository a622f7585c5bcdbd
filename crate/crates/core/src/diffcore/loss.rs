use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean squared error over all elements and its gradient w.r.t. `pred`.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty prediction".into()));
    }
    let n = T::of_usize(pred.len());
    let two = T::of(2.0);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        loss += d * d;
        *g = two * d / n;
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_loss_is_zero() {
        let y = Tensor::from_vec(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let (l, g) = mse(&y, &y).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn value_and_grad() {
        let p = Tensor::from_vec(&[2], vec![1.0f64, 3.0]).unwrap();
        let t = Tensor::from_vec(&[2], vec![0.0f64, 1.0]).unwrap();
        let (l, g) = mse(&p, &t).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g.data(), &[1.0, 2.0]);
    }
}
