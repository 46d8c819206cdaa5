use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

fn check_pair<T: Scalar>(pred: &Tensor<T>, labels: &Tensor<T>, op: &'static str) -> Result<()> {
    if pred.shape() != labels.shape() || pred.ndim() != 2 || pred.shape()[1] != 1 {
        return Err(Error::dim(
            op,
            format!("predictions {:?} and labels {:?} must both be [N, 1]", pred.shape(), labels.shape()),
        ));
    }
    Ok(())
}

fn check_binary<T: Scalar>(labels: &Tensor<T>, op: &'static str) -> Result<()> {
    if let Some(i) = labels.data().iter().position(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::Invalid(format!(
            "{op}: label {i} is {:?}, expected 0 or 1",
            labels.data()[i]
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy over the batch and its gradient with respect to
/// the predictions. The gradient is zero where the clamp is active.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, labels: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check_pair(pred, labels, "bce_loss")?;
    check_binary(labels, "bce_loss")?;
    if let Some(i) = pred.data().iter().position(|&p| !(p >= T::zero() && p <= T::one())) {
        return Err(Error::Numeric {
            op: "bce_loss",
            detail: format!("prediction {i} is {:?}, outside [0, 1]", pred.data()[i]),
        });
    }
    let n = pred.shape()[0] as f64;
    let (lo, hi) = (BCE_CLAMP, 1.0 - BCE_CLAMP);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.data().iter().zip(labels.data()) {
        let raw = p.as_f64();
        let pc = raw.clamp(lo, hi);
        let y = y.as_f64();
        total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        let g = if raw < lo || raw > hi {
            0.0
        } else {
            -(y / pc - (1.0 - y) / (1.0 - pc)) / n
        };
        grad.push(T::from_f64(g));
    }
    Ok((total / n, Tensor::from_parts(pred.shape().to_vec(), grad)))
}

/// Mean squared error `(1/N) Σ (p − y)²` and its gradient. Used to check
/// gradients of models without a sigmoid head.
pub fn squared_error_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check_pair(pred, target, "squared_error_loss")?;
    let n = pred.shape()[0] as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let d = p.as_f64() - y.as_f64();
        total += d * d;
        grad.push(T::from_f64(2.0 * d / n));
    }
    Ok((total / n, Tensor::from_parts(pred.shape().to_vec(), grad)))
}

/// Fraction of samples where `(pred >= 0.5) == label`.
pub fn accuracy<T: Scalar>(pred: &Tensor<T>, labels: &Tensor<T>) -> Result<f64> {
    check_pair(pred, labels, "accuracy")?;
    check_binary(labels, "accuracy")?;
    let half = T::from_f64(0.5);
    let correct = pred
        .data()
        .iter()
        .zip(labels.data())
        .filter(|(&p, &y)| (p >= half) == (y == T::one()))
        .count();
    Ok(correct as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::*;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn half_prediction_is_ln2() {
        let (loss, _) = bce_loss(&col(&[0.5]), &col(&[1.0])).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-5);
    }

    #[test]
    fn perfect_prediction_hits_clamp_floor() {
        let (loss, grad) = bce_loss(&col(&[1.0, 0.0]), &col(&[1.0, 0.0])).unwrap();
        assert!((0.0..=1.7e-6).contains(&loss), "{loss}");
        assert!(grad.data().iter().all(|&g| g == 0.0));
        let p32 = Tensor::<f32>::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let (l32, _) = bce_loss(&p32, &p32.clone()).unwrap();
        assert!((0.0..=1.7e-6).contains(&l32));
    }

    #[test]
    fn non_binary_labels_rejected() {
        assert!(matches!(bce_loss(&col(&[0.3]), &col(&[0.5])), Err(Error::Invalid(_))));
        assert!(accuracy(&col(&[0.3]), &col(&[2.0])).is_err());
    }

    #[test]
    fn loss_is_non_negative() {
        for seed in 0..50 {
            let p = random::<f64>(&[6, 1], seed).map(|v| (v + 1.0) / 2.0);
            let y = random::<f64>(&[6, 1], seed + 1000).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            assert!(bce_loss(&p, &y).unwrap().0 >= 0.0);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let p = random::<f64>(&[5, 1], seed).map(|v| 0.05 + 0.9 * (v + 1.0) / 2.0);
            let y = random::<f64>(&[5, 1], seed + 99).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let (_, g) = bce_loss(&p, &y).unwrap();
            let n = numeric_grad(&p, 1e-5, |t| bce_loss(t, &y).unwrap().0);
            assert!(max_rel_err(g.data(), &n) < 1e-4);
        }
    }

    #[test]
    fn squared_error_gradient() {
        let p = random::<f64>(&[4, 1], 1);
        let y = random::<f64>(&[4, 1], 2);
        let (_, g) = squared_error_loss(&p, &y).unwrap();
        let n = numeric_grad(&p, 1e-5, |t| squared_error_loss(t, &y).unwrap().0);
        assert!(max_rel_err(g.data(), &n) < 1e-8);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&col(&[1.0, 0.0, 1.0]), &col(&[1.0, 0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(accuracy(&col(&[0.5, 0.5]), &col(&[1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(accuracy(&col(&[0.4, 0.6, 0.9, 0.1]), &col(&[1.0, 1.0, 0.0, 0.0])).unwrap(), 0.5);
    }
}
