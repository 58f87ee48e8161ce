use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{TrainingInstance, PAD};

/// Keeps the last `width` items of `prefix` and left-pads with [`PAD`].
pub fn left_pad(prefix: &[u32], width: usize) -> Vec<u32> {
    let keep = &prefix[prefix.len().saturating_sub(width)..];
    let mut out = vec![PAD; width - keep.len()];
    out.extend_from_slice(keep);
    out
}

/// A padded mini-batch.
///
/// The prefix matrix is `rows x width`, where `width` is the longest
/// truncated prefix in the batch (at most `max_len`). Column `c` sits at
/// absolute position `max_len - width + c`, so every row's last real item is
/// at position `max_len - 1` exactly as if the batch were padded to
/// `max_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub width: usize,
    pub max_len: usize,
    pub horizon: usize,
    pub prefixes: Vec<u32>,
    pub lengths: Vec<usize>,
    pub next_targets: Vec<u32>,
    /// `rows x (horizon - 1)` targets for steps 2..=K; zero on invalid rows.
    pub future_targets: Vec<u32>,
    pub fs_valid: Vec<bool>,
    pub fc_valid: Vec<bool>,
}

impl Batch {
    pub fn from_instances(instances: &[&TrainingInstance], horizon: usize, max_len: usize) -> Batch {
        let contexts: Vec<&[u32]> = instances.iter().map(|i| i.prefix.as_slice()).collect();
        let mut b = Batch::from_contexts(&contexts, max_len);
        let horizon = horizon.max(1);
        let steps = horizon - 1;
        b.horizon = horizon;
        b.next_targets = instances.iter().map(|i| i.next_target).collect();
        b.future_targets = vec![PAD; b.rows * steps];
        b.fs_valid = instances.iter().map(|i| i.fs_valid).collect();
        b.fc_valid = instances.iter().map(|i| i.fc_valid).collect();
        for (r, inst) in instances.iter().enumerate() {
            if inst.fs_valid {
                b.future_targets[r * steps..(r + 1) * steps].copy_from_slice(&inst.future_targets[..steps]);
            }
        }
        b
    }

    /// Inference-only batch: targets empty, all rows invalid for the
    /// auxiliary losses.
    pub fn from_contexts(contexts: &[&[u32]], max_len: usize) -> Batch {
        let rows = contexts.len();
        let lengths: Vec<usize> = contexts.iter().map(|c| c.len().min(max_len)).collect();
        let width = lengths.iter().copied().max().unwrap_or(0);
        let mut prefixes = Vec::with_capacity(rows * width);
        for c in contexts {
            prefixes.extend(left_pad(c, width));
        }
        Batch {
            rows,
            width,
            max_len,
            horizon: 1,
            prefixes,
            lengths,
            next_targets: Vec::new(),
            future_targets: Vec::new(),
            fs_valid: vec![false; rows],
            fc_valid: vec![false; rows],
        }
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.prefixes[r * self.width..(r + 1) * self.width]
    }

    /// Row `r` with left padding stripped.
    pub fn unpadded(&self, r: usize) -> &[u32] {
        &self.row(r)[self.width - self.lengths[r]..]
    }

    pub fn future_row(&self, r: usize) -> &[u32] {
        let steps = self.horizon - 1;
        &self.future_targets[r * steps..(r + 1) * steps]
    }

    /// Absolute position index of every column.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.width).map(|c| self.max_len - self.width + c).collect()
    }

    /// Padding mask over the prefix matrix.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.prefixes.iter().map(|&id| id == PAD).collect()
    }
}

/// Deterministically shuffled batches over a fixed instance list.
#[derive(Debug, Clone)]
pub struct BatchIter<'a> {
    instances: &'a [TrainingInstance],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    horizon: usize,
    max_len: usize,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let chunk: Vec<&TrainingInstance> = self.order[self.pos..end].iter().map(|&i| &self.instances[i]).collect();
        self.pos = end;
        Some(Batch::from_instances(&chunk, self.horizon, self.max_len))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

/// Shuffles under `seed` and yields padded batches; the final short batch
/// is kept.
pub fn make_batches(
    instances: &[TrainingInstance],
    horizon: usize,
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<BatchIter<'_>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size must be at least 2 for in-batch negatives, got {batch_size}"
        )));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(BatchIter {
        instances,
        order,
        pos: 0,
        batch_size,
        horizon,
        max_len,
    })
}
