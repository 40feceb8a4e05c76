//! Training objectives recorded on the tape.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Element;

/// Softmax cross-entropy over the class axis (last), averaged over pixels
/// whose label is not `ignore`. Ignored pixels receive exactly zero
/// gradient; an all-ignored input yields a zero loss.
pub fn masked_cross_entropy<E: Element>(
    tape: &mut Tape<E>,
    logits: Var,
    labels: &[usize],
    ignore: usize,
) -> Result<Var> {
    tape.masked_cross_entropy(logits, labels, ignore)
}

/// Focal loss `-(1 - p_y)^gamma · ln p_y`, averaged over rows of `logits`.
pub fn focal_loss<E: Element>(
    tape: &mut Tape<E>,
    logits: Var,
    labels: &[usize],
    gamma: f64,
) -> Result<Var> {
    tape.focal_loss(logits, labels, E::from_f64(gamma))
}
