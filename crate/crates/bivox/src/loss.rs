//! Masked cross-entropy losses and the multi-task combination.

use crate::scalar::Scalar;
use crate::tape::ce_row;

/// Mean negative log-likelihood over mask-true positions. `count == 0`
/// flags a fully masked stream; the value is then defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub count: usize,
}

impl LossValue {
    /// True when every position was masked out (warning condition).
    pub fn all_masked(&self) -> bool {
        self.count == 0
    }
}

fn masked_mean_ce<S: Scalar>(logits: &[Vec<S>], targets: &[u32], mask: &[bool]) -> LossValue {
    assert_eq!(logits.len(), targets.len(), "one target per position");
    assert_eq!(logits.len(), mask.len(), "one mask bit per position");
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for ((row, &t), &m) in logits.iter().zip(targets).zip(mask) {
        if !m {
            continue;
        }
        sum += ce_row(row, t as usize).as_f64();
        count += 1;
    }
    if count == 0 {
        LossValue { value: 0.0, count }
    } else {
        LossValue {
            value: sum / count as f64,
            count,
        }
    }
}

/// Text-head loss: mean NLL of the text targets over mask-true steps.
pub fn loss_text<S: Scalar>(logits: &[Vec<S>], targets: &[u32], mask: &[bool]) -> LossValue {
    masked_mean_ce(logits, targets, mask)
}

/// Refiner loss: mean NLL of the raw speech targets over mask-true
/// positions (`T` positions per utterance, not backbone steps).
pub fn loss_srh<S: Scalar>(logits: &[Vec<S>], targets: &[u32], mask: &[bool]) -> LossValue {
    masked_mean_ce(logits, targets, mask)
}

/// Multi-task combination: `λ·l_th + μ·l_srh`, one multiply-add per term.
pub fn loss_total(l_th: f64, l_srh: f64, lambda: f64, mu: f64) -> f64 {
    lambda * l_th + mu * l_srh
}
