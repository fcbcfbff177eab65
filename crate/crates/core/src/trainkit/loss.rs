//! Token-level cross-entropy with prompt masking.

use crate::autograd::cross_entropy_forward;
use crate::numerics::Tensor;

use super::TrainError;

/// Mean over non-ignored positions of `-log softmax(logits)[target]`.
/// Positions whose target equals `ignore_id` are excluded (prompt masking).
pub fn cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    ignore_id: usize,
) -> Result<f64, TrainError> {
    if logits.rows() != targets.len() {
        return Err(TrainError::LengthMismatch {
            logit_rows: logits.rows(),
            targets: targets.len(),
        });
    }
    cross_entropy_forward(logits, targets, ignore_id)
        .map(|(loss, _)| loss)
        .ok_or(TrainError::NoSupervisedTargets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainkit::IGNORE_TARGET;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::zeros(&[2, 16]);
        let loss = cross_entropy(&logits, &[3, 11], IGNORE_TARGET).unwrap();
        assert!((loss - (16.0f64).ln()).abs() < 1e-12);
        assert!((loss - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn peaked_logits_give_near_zero_loss() {
        let mut logits = Tensor::zeros(&[1, 8]);
        logits.data_mut()[5] = 1000.0;
        let loss = cross_entropy(&logits, &[5], IGNORE_TARGET).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn matches_explicit_log_sum_exp() {
        let logits = Tensor::from_rows(&[
            vec![1.0, -0.3, 0.0, 2.2, -1.7],
            vec![0.0, 0.5, 0.25, -0.25, 0.75],
            vec![3.0, 3.0, -3.0, 0.1, 0.9],
        ])
        .unwrap();
        let targets = [3usize, 0, 1];
        let mut want = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let lse = row.iter().map(|l| l.exp()).sum::<f64>().ln();
            want += lse - row[t];
        }
        want /= 3.0;
        let got = cross_entropy(&logits, &targets, IGNORE_TARGET).unwrap();
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn empty_effective_target_set_is_an_error() {
        let logits = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            cross_entropy(&logits, &[IGNORE_TARGET, IGNORE_TARGET], IGNORE_TARGET),
            Err(TrainError::NoSupervisedTargets)
        ));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let logits = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            cross_entropy(&logits, &[1], IGNORE_TARGET),
            Err(TrainError::LengthMismatch { .. })
        ));
    }
}
