//! Masked-sample generation for training and extraction.

use rand::Rng;

use crate::tokenizer::{TokenSequence, MASK_ID};

/// A framed message with exactly one position replaced by `MASK`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSample {
    pub input_ids: Vec<usize>,
    pub target_id: usize,
    /// Frame position of the mask, `1..=real_len`.
    pub position: usize,
}

impl MaskedSample {
    pub fn at(seq: &TokenSequence, position: usize) -> Self {
        let mut input_ids = seq.framed_ids.clone();
        let target_id = input_ids[position];
        input_ids[position] = MASK_ID;
        MaskedSample {
            input_ids,
            target_id,
            position,
        }
    }

    /// The original frame, with the target restored.
    pub fn unmasked(&self) -> Vec<usize> {
        let mut ids = self.input_ids.clone();
        ids[self.position] = self.target_id;
        ids
    }
}

/// Masks one uniformly chosen real token, or `None` for an empty message.
pub fn sample_random_mask<R: Rng + ?Sized>(seq: &TokenSequence, rng: &mut R) -> Option<MaskedSample> {
    let n = seq.real_len();
    if n == 0 {
        return None;
    }
    let position = rng.random_range(1..=n);
    Some(MaskedSample::at(seq, position))
}

/// One sample per real token, in token order.
pub fn enumerate_masks(seq: &TokenSequence) -> Vec<MaskedSample> {
    (1..=seq.real_len()).map(|p| MaskedSample::at(seq, p)).collect()
}
