//! In-batch contrastive alignment between the user state and its future.
//!
//! The anchor `z` is the mean embedding of the next `K` items. The user
//! state is mapped by an affine projection `h^z = W h + b`, and each row's
//! own `z` is the positive among the `z` of every other eligible row.

use rand::Rng;

use crate::data::{Batch, PAD};
use crate::error::Result;
use crate::params::{constant, truncated_normal, Bound, ParamStore, INIT_STD};
use crate::tensor::{Tape, TensorError, Var};

pub const FC_WEIGHT: &str = "fc.w";
pub const FC_BIAS: &str = "fc.b";

pub fn init_params<R: Rng + ?Sized>(params: &mut ParamStore, dim: usize, rng: &mut R) {
    params.insert(FC_WEIGHT, truncated_normal(vec![dim, dim], INIT_STD, rng));
    params.insert(FC_BIAS, constant(vec![dim], 0.0));
}

/// Mean of the embedding rows of each consecutive group of `horizon` ids.
/// `ids` is `N x K` row-major; the result is `N x d`.
pub fn horizon_pool(tape: &mut Tape, item_emb: Var, ids: &[u32], horizon: usize) -> Result<Var> {
    if ids.contains(&PAD) {
        return Err(TensorError::Contract("padding id inside a future horizon".into()).into());
    }
    let rows = tape.embedding_lookup(item_emb, ids)?;
    Ok(tape.group_mean_rows(rows, horizon)?)
}

pub fn project_state(tape: &mut Tape, vars: &Bound, h: Var) -> Result<Var> {
    let lin = tape.matmul_bt(h, vars.var(FC_WEIGHT))?;
    Ok(tape.add_row(lin, vars.var(FC_BIAS))?)
}

/// Mean over rows of `-log softmax_j(hz_i · z_j / temperature)[i]`.
///
/// Returns an exact zero with a warning when fewer than two rows are given.
pub fn infonce(tape: &mut Tape, hz: Var, z: Var, temperature: f64) -> Result<Var> {
    let n = tape.shape(hz)[0];
    if n < 2 {
        log::warn!("contrastive loss skipped: {n} eligible rows in batch");
        return Ok(tape.scalar_constant(0.0));
    }
    let sim = tape.matmul_bt(hz, z)?;
    let sim = if temperature == 1.0 {
        sim
    } else {
        tape.scalar_mul(sim, 1.0 / temperature)
    };
    let ls = tape.log_softmax_lastdim(sim)?;
    let diag: Vec<usize> = (0..n).collect();
    let pos = tape.pick(ls, &diag)?;
    let mean = tape.mean(pos);
    Ok(tape.scalar_mul(mean, -1.0))
}

#[derive(Debug, Clone)]
pub struct FcOutput {
    pub loss: Var,
    pub valid: usize,
    pub rows: usize,
    /// Mean positive similarity minus mean negative similarity.
    pub similarity_gap: f64,
}

/// Contrastive loss over the `fc_valid` rows of `batch`.
pub fn contrastive_loss(
    tape: &mut Tape,
    vars: &Bound,
    batch: &Batch,
    h: Var,
    item_emb: Var,
    temperature: f64,
) -> Result<FcOutput> {
    let valid_rows: Vec<usize> = (0..batch.rows).filter(|&r| batch.fc_valid[r]).collect();
    let n = valid_rows.len();
    if n < 2 {
        let loss = infonce_empty(tape, n);
        return Ok(FcOutput {
            loss,
            valid: n,
            rows: batch.rows,
            similarity_gap: 0.0,
        });
    }
    let horizon = batch.horizon;
    let mut ids = Vec::with_capacity(n * horizon);
    for &r in &valid_rows {
        ids.push(batch.next_targets[r]);
        ids.extend_from_slice(batch.future_row(r));
    }
    let z = horizon_pool(tape, item_emb, &ids, horizon)?;
    let hv = tape.gather_rows(h, &valid_rows)?;
    let hz = project_state(tape, vars, hv)?;
    let loss = infonce(tape, hz, z, temperature)?;
    let similarity_gap = similarity_gap(tape.value(hz), tape.value(z), tape.shape(z)[1]);
    Ok(FcOutput {
        loss,
        valid: n,
        rows: batch.rows,
        similarity_gap,
    })
}

fn infonce_empty(tape: &mut Tape, n: usize) -> Var {
    log::warn!("contrastive loss skipped: {n} eligible rows in batch");
    tape.scalar_constant(0.0)
}

fn similarity_gap(hz: &[f64], z: &[f64], d: usize) -> f64 {
    let n = hz.len() / d;
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let s: f64 = (0..d).map(|c| hz[i * d + c] * z[j * d + c]).sum();
            if i == j {
                pos += s;
            } else {
                neg += s;
            }
        }
    }
    pos / n as f64 - neg / (n * (n - 1)) as f64
}
