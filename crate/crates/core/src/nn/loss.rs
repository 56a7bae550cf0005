/// Huber loss on the error `pred − target`, returning (loss, dLoss/dPred).
pub fn huber_loss(pred: f64, target: f64, delta: f64) -> (f64, f64) {
    debug_assert!(delta > 0.0);
    let e = pred - target;
    if e.abs() <= delta {
        (0.5 * e * e, e)
    } else {
        (delta * (e.abs() - 0.5 * delta), delta * e.signum())
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Cross-entropy of softmax(logits) against a one-hot (or any
/// probability) label. Returns (loss, dLoss/dlogits).
pub fn softmax_cross_entropy(logits: &[f64], label: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(logits.len(), label.len());
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let loss = label
        .iter()
        .zip(logits)
        .filter(|(y, _)| **y != 0.0)
        .map(|(y, l)| y * (lse - l))
        .sum();
    let grad = softmax(logits)
        .into_iter()
        .zip(label)
        .map(|(p, y)| p - y)
        .collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn huber_branches() {
        assert_eq!(huber_loss(0.5, 0.0, 1.0).0, 0.125);
        assert_eq!(huber_loss(2.0, 0.0, 1.0).0, 1.5);
        assert_eq!(huber_loss(-2.0, 0.0, 1.0), (1.5, -1.0));
        assert_eq!(huber_loss(3.0, 3.0, 1.0), (0.0, 0.0));
    }

    #[test]
    fn huber_gradient_continuous_at_knee() {
        let h = 1e-7;
        for knee in [1.0_f64, -1.0] {
            let f = |e: f64| huber_loss(e, 0.0, 1.0).0;
            let left = (f(knee) - f(knee - h)) / h;
            let right = (f(knee + h) - f(knee)) / h;
            assert!((left - right).abs() < 1e-6);
            assert!((huber_loss(knee, 0.0, 1.0).1 - left).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_logits_loss_is_log_classes() {
        let (l, _) = softmax_cross_entropy(&[0.3; 5], &[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_as_true_logit_grows() {
        let mut prev = f64::INFINITY;
        for k in 0..60 {
            let z = k as f64;
            let (l, _) = softmax_cross_entropy(&[z, 0.0, 0.0], &[1.0, 0.0, 0.0]);
            assert!(l < prev || l == 0.0);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = [0.4, -1.2, 2.0, 0.1];
        let label = [0.0, 0.0, 0.0, 1.0];
        let (_, g) = softmax_cross_entropy(&logits, &label);
        let h = 1e-6;
        for i in 0..4 {
            let mut up = logits;
            let mut dn = logits;
            up[i] += h;
            dn[i] -= h;
            let fd = (softmax_cross_entropy(&up, &label).0 - softmax_cross_entropy(&dn, &label).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in prop::collection::vec(-300.0..300.0f64, 2..10)) {
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn softmax_strictly_inside_unit_interval(logits in prop::collection::vec(-10.0..10.0f64, 2..10)) {
            let p = softmax(&logits);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
