//! Multi-step future supervision with an entropy-derived confidence weight.
//!
//! For every horizon step `k = 2..=K` a projector `ReLU(W_k h + b_k)` turns
//! the user state into a step-specific query, which is scored against the
//! shared item table. The per-sample loss is the mean cross-entropy over the
//! steps, scaled by `ω = exp(-H(ŷ) / τ)` where `ŷ` is the next-item
//! prediction. `ω` is detached, so it scales the loss without training the
//! backbone to be confident.

use rand::Rng;

use crate::data::{Batch, PAD};
use crate::error::Result;
use crate::params::{constant, truncated_normal, Bound, ParamStore, INIT_STD};
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FsReduction {
    /// Mean over samples with a complete horizon.
    #[default]
    ValidMean,
    /// Sum over valid samples divided by the full batch size.
    BatchMean,
}

impl FsReduction {
    pub fn as_str(self) -> &'static str {
        match self {
            FsReduction::ValidMean => "valid_mean",
            FsReduction::BatchMean => "batch_mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "valid_mean" => Some(FsReduction::ValidMean),
            "batch_mean" => Some(FsReduction::BatchMean),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FutureSupConfig {
    pub horizon: usize,
    pub tau: f64,
    pub reduction: FsReduction,
}

impl Default for FutureSupConfig {
    fn default() -> Self {
        FutureSupConfig {
            horizon: 2,
            tau: 3.0,
            reduction: FsReduction::ValidMean,
        }
    }
}

/// How the per-sample future loss is weighted.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    /// Detached `exp(-H / τ)`.
    Uncertainty,
    /// `exp(-H / τ)` left in the graph. Only for testing the detach.
    Undetached,
    /// All weights 1.
    Uniform,
    /// Fixed weights, one per valid row in batch order.
    Frozen(Vec<f64>),
}

pub fn weight_name(k: usize) -> String {
    format!("fs.w{k}")
}

pub fn bias_name(k: usize) -> String {
    format!("fs.b{k}")
}

/// Adds the `K - 1` projectors to `params`.
pub fn init_params<R: Rng + ?Sized>(params: &mut ParamStore, dim: usize, horizon: usize, rng: &mut R) {
    for k in 2..=horizon {
        params.insert(weight_name(k), truncated_normal(vec![dim, dim], INIT_STD, rng));
        params.insert(bias_name(k), constant(vec![dim], 0.0));
    }
}

/// Step queries for steps `2..=K`, `N*(K-1) x d`, sample-major: row
/// `n*(K-1) + (k-2)` holds `h^(k)` of sample `n`.
///
/// All steps share one matrix product against the stacked projector weights.
pub fn project_future(tape: &mut Tape, vars: &Bound, h: Var, horizon: usize) -> Result<Var> {
    if horizon < 2 {
        return Err(TensorError::Contract(format!("future projection needs K >= 2, got {horizon}")).into());
    }
    let ws: Vec<Var> = (2..=horizon).map(|k| vars.var(&weight_name(k))).collect();
    let bs: Vec<Var> = (2..=horizon).map(|k| vars.var(&bias_name(k))).collect();
    let w = tape.concat_rows(&ws)?;
    let b = tape.concat_rows(&bs)?;
    let pre = tape.matmul_bt(h, w)?;
    let pre = tape.add_row(pre, b)?;
    let act = tape.relu(pre);
    let n = tape.shape(h)[0];
    let d = tape.shape(h)[1];
    Ok(tape.reshape(act, vec![n * (horizon - 1), d])?)
}

/// `exp(-H / τ)` for each entropy value.
pub fn confidence_weight(entropy: &[f64], tau: f64) -> Vec<f64> {
    entropy.iter().map(|h| (-h / tau).exp()).collect()
}

/// Per-sample mean cross-entropy over the `steps` future targets.
///
/// `logits` is `N*steps x (V+1)` in the layout of [`project_future`] and
/// `targets` is `N x steps` row-major.
pub fn step_cross_entropy(tape: &mut Tape, logits: Var, targets: &[u32], steps: usize) -> Result<Var> {
    Ok(step_ce_inner(tape, logits, targets, steps)?.0)
}

fn step_ce_inner(tape: &mut Tape, logits: Var, targets: &[u32], steps: usize) -> Result<(Var, Var)> {
    if targets.contains(&PAD) {
        return Err(TensorError::Contract("future target is padding on a valid sample".into()).into());
    }
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let ls = tape.log_softmax_lastdim(logits)?;
    let picked = tape.pick(ls, &idx)?;
    let per = tape.reshape(picked, vec![targets.len() / steps, steps])?;
    let mean = tape.mean_lastdim(per);
    Ok((tape.scalar_mul(mean, -1.0), picked))
}

/// Result of [`future_loss`] plus diagnostics.
#[derive(Debug, Clone)]
pub struct FsOutput {
    pub loss: Var,
    /// Weight applied to each valid row.
    pub omega: Vec<f64>,
    pub valid: usize,
    pub rows: usize,
    /// Mean cross-entropy at each step `k = 2..=K` over the valid rows.
    pub step_ce: Vec<f64>,
}

/// Weighted multi-step future loss over the `fs_valid` rows of `batch`.
///
/// `h` is the `N x d` user state and `main_logits` the `N x (V+1)`
/// next-item scores it produced.
#[allow(clippy::too_many_arguments)]
pub fn future_loss(
    tape: &mut Tape,
    vars: &Bound,
    config: &FutureSupConfig,
    batch: &Batch,
    h: Var,
    item_emb: Var,
    main_logits: Var,
    weighting: &Weighting,
) -> Result<FsOutput> {
    let steps = config.horizon.saturating_sub(1);
    let valid_rows: Vec<usize> = (0..batch.rows).filter(|&r| batch.fs_valid[r]).collect();
    if steps == 0 || valid_rows.is_empty() {
        return Ok(FsOutput {
            loss: tape.scalar_constant(0.0),
            omega: Vec::new(),
            valid: valid_rows.len(),
            rows: batch.rows,
            step_ce: vec![0.0; steps],
        });
    }
    let n = valid_rows.len();
    let hv = tape.gather_rows(h, &valid_rows)?;
    let queries = project_future(tape, vars, hv, config.horizon)?;
    let logits = tape.matmul_bt(queries, item_emb)?;
    let targets: Vec<u32> = valid_rows
        .iter()
        .flat_map(|&r| batch.future_row(r).iter().copied())
        .collect();

    let (per_sample, picked) = step_ce_inner(tape, logits, &targets, steps)?;
    let mut step_ce = vec![0.0; steps];
    for (row, lp) in tape.value(picked).iter().enumerate() {
        step_ce[row % steps] -= lp / n as f64;
    }

    let omega_var = match weighting {
        Weighting::Uniform => tape.constant(vec![n], vec![1.0; n])?,
        Weighting::Frozen(w) => {
            if w.len() != n {
                return Err(TensorError::Shape {
                    op: "future_loss",
                    left: vec![w.len()],
                    right: vec![n],
                }
                .into());
            }
            tape.constant(vec![n], w.clone())?
        }
        Weighting::Uncertainty | Weighting::Undetached => {
            let mv = tape.gather_rows(main_logits, &valid_rows)?;
            let p = tape.softmax_lastdim(mv)?;
            let ent = tape.entropy(p)?;
            let scaled = tape.scalar_mul(ent, -1.0 / config.tau);
            let w = tape.exp(scaled);
            if matches!(weighting, Weighting::Uncertainty) {
                tape.detach(w)
            } else {
                w
            }
        }
    };
    let omega = tape.value(omega_var).to_vec();
    let weighted = tape.mul(per_sample, omega_var)?;
    let total = tape.sum(weighted);
    let denom = match config.reduction {
        FsReduction::ValidMean => n,
        FsReduction::BatchMean => batch.rows,
    };
    let loss = tape.scalar_mul(total, 1.0 / denom as f64);
    Ok(FsOutput {
        loss,
        omega,
        valid: n,
        rows: batch.rows,
        step_ce,
    })
}
