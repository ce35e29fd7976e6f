use crate::error::{check_dim, Error, Result};

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax logits"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    Ok(softmax_unchecked(logits))
}

/// Softmax that treats `-inf` logits as masked-out entries with probability zero.
pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Pulls a gradient on softmax outputs back to the logits.
pub fn softmax_backward(probs: &[f64], upstream: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(upstream).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(upstream)
        .map(|(p, g)| p * (g - dot))
        .collect()
}

/// Mean squared error and its gradient with respect to the predictions.
pub fn mse_loss(predictions: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if predictions.is_empty() {
        return Err(Error::Empty("mse batch"));
    }
    check_dim("mse labels", predictions.len(), labels.len())?;
    let n = predictions.len() as f64;
    let loss = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (y - p) * (y - p))
        .sum::<f64>()
        / n;
    let grad = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| 2.0 / n * (p - y))
        .collect();
    Ok((loss, grad))
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::gradcheck::{numeric_gradient, relative_error};

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let p = softmax(&[1000.0, 0.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1] < 1e-300 && p[2] < 1e-300);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
        assert!(matches!(
            softmax(&[f64::NAN, 1.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn random_softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let s: f64 = softmax(&z).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let z = [0.3, -1.2, 0.8];
        let g = [1.0, -0.5, 2.0];
        let p = softmax(&z).unwrap();
        let analytic = softmax_backward(&p, &g);
        let numeric = numeric_gradient(
            |zs| {
                softmax(zs)
                    .unwrap()
                    .iter()
                    .zip(&g)
                    .map(|(a, b)| a * b)
                    .sum()
            },
            &z,
            1e-5,
        );
        assert!(relative_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let (loss, grad) = mse_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn single_element_arithmetic() {
        let (loss, grad) = mse_loss(&[0.5], &[1.0]).unwrap();
        assert_eq!(loss, 0.25);
        assert_eq!(grad, vec![-1.0]);
    }

    #[test]
    fn mse_errors() {
        assert!(mse_loss(&[], &[]).is_err());
        assert!(mse_loss(&[0.1, 0.2], &[1.0]).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let preds: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<f64> = (0..16).map(|_| f64::from(rng.gen_range(0u8..2))).collect();
        let (_, grad) = mse_loss(&preds, &labels).unwrap();
        let numeric = numeric_gradient(|p| mse_loss(p, &labels).unwrap().0, &preds, 1e-5);
        assert!(relative_error(&grad, &numeric) < 1e-5);
    }

    #[test]
    fn sigmoid_saturates_exactly() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(100.0), 1.0);
        assert!(sigmoid(-800.0) >= 0.0);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(z in prop::collection::vec(-1e3f64..1e3, 1..8)) {
            let p = softmax(&z).unwrap();
            prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
