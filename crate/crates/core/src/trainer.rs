//! Composite objective, optimization loop, early stopping and ablations.

use std::fmt::Write as _;
use std::time::Instant;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{main_loss, predict, Backbone, BackboneConfig, ITEM_EMB};
use crate::data::{expand_instances, make_batches, Batch, Splits, TrainingInstance};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::futurecl::{self, contrastive_loss, FcOutput};
use crate::futuresup::{self, future_loss, FsOutput, FsReduction, FutureSupConfig, Weighting};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Var};

/// Validation metric that drives early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValidMetric {
    #[default]
    Hr10,
    Ndcg10,
}

impl ValidMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            ValidMetric::Hr10 => "hr10",
            ValidMetric::Ndcg10 => "ndcg10",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hr10" => Some(ValidMetric::Hr10),
            "ndcg10" => Some(ValidMetric::Ndcg10),
            _ => None,
        }
    }

    pub fn of(self, r: &EvalReport) -> f64 {
        match self {
            ValidMetric::Hr10 => r.hr_at(10),
            ValidMetric::Ndcg10 => r.ndcg_at(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub horizon: usize,
    pub tau: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub use_fs: bool,
    pub use_ug: bool,
    pub use_fc: bool,
    pub fs_reduction: FsReduction,
    pub fc_temperature: f64,
    pub clip_norm: Option<f64>,
    pub valid_metric: ValidMetric,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 256,
            lambda: 0.1,
            horizon: 2,
            tau: 3.0,
            max_epochs: 200,
            patience: 10,
            seed: 42,
            use_fs: true,
            use_ug: true,
            use_fc: true,
            fs_reduction: FsReduction::ValidMean,
            fc_temperature: 1.0,
            clip_norm: None,
            valid_metric: ValidMetric::Hr10,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    // the negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if self.horizon < 1 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.fc_temperature > 0.0) {
            return bad(format!("fc_temperature must be positive, got {}", self.fc_temperature));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..self.adam
        }
    }

    fn fs_config(&self) -> FutureSupConfig {
        FutureSupConfig {
            horizon: self.horizon,
            tau: self.tau,
            reduction: self.fs_reduction,
        }
    }
}

/// Model variants compared by the ablation suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoFs,
    NoUg,
    NoFc,
    Backbone,
    /// Backbone plus unweighted future supervision.
    BackboneFs,
    /// Backbone plus uncertainty-weighted future supervision.
    BackboneUgFs,
}

impl Variant {
    pub const TABLE: [Variant; 5] = [
        Variant::NoFs,
        Variant::NoUg,
        Variant::NoFc,
        Variant::Backbone,
        Variant::Full,
    ];
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoFs,
        Variant::NoUg,
        Variant::NoFc,
        Variant::Backbone,
        Variant::BackboneFs,
        Variant::BackboneUgFs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFs => "w/o-fs",
            Variant::NoUg => "w/o-ug",
            Variant::NoFc => "w/o-fc",
            Variant::Backbone => "backbone",
            Variant::BackboneFs => "backbone+fs",
            Variant::BackboneUgFs => "backbone+ug-fs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Full => (true, true, true),
            Variant::NoFs => (false, false, true),
            Variant::NoUg => (true, false, true),
            Variant::NoFc => (true, true, false),
            Variant::Backbone => (false, false, false),
            Variant::BackboneFs => (true, false, false),
            Variant::BackboneUgFs => (true, true, false),
        }
    }

    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let (use_fs, use_ug, use_fc) = self.flags();
        TrainConfig {
            use_fs,
            use_ug,
            use_fc,
            ..config.clone()
        }
    }
}

/// Backbone plus training-only parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub aux: ParamStore,
}

impl Model {
    /// Initializes from `seed`. Auxiliary parameters are always created, so
    /// every variant starts from the same backbone weights.
    pub fn init(config: BackboneConfig, horizon: usize, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init(config, &mut rng)?;
        let mut aux = ParamStore::new();
        let d = backbone.config.dim;
        futuresup::init_params(&mut aux, d, horizon, &mut rng);
        futurecl::init_params(&mut aux, d, &mut rng);
        Ok(Model { backbone, aux })
    }

    pub fn bind(&self, tape: &mut Tape) -> (Bound, Bound) {
        (self.backbone.bind(tape), self.aux.bind(tape))
    }

    pub fn num_scalars(&self) -> usize {
        self.backbone.params.num_scalars() + self.aux.num_scalars()
    }
}

/// Tape handles of one forward pass through the composite objective.
#[derive(Debug, Clone)]
pub struct Losses {
    pub main: Var,
    pub future: Var,
    pub contrastive: Var,
    pub total: Var,
    pub fs: FsOutput,
    pub fc: FcOutput,
}

/// `L = L_M + L_FS + λ L_FC` with the ablation switches in `config`.
///
/// `weighting` overrides the future-loss weighting; by default it follows
/// `use_ug`.
#[allow(clippy::too_many_arguments)]
pub fn compute_losses<R: rand::Rng + ?Sized>(
    tape: &mut Tape,
    model: &Model,
    bb: &Bound,
    aux: &Bound,
    batch: &Batch,
    config: &TrainConfig,
    weighting: Option<&Weighting>,
    train: bool,
    rng: &mut R,
) -> Result<Losses> {
    let enc = model.backbone.forward(tape, bb, batch, train, rng)?;
    let m = bb.var(ITEM_EMB);
    let logits = predict(tape, m, enc.h)?;
    let main = main_loss(tape, logits, &batch.next_targets)?;

    let default_weighting = if config.use_ug {
        Weighting::Uncertainty
    } else {
        Weighting::Uniform
    };
    let weighting = weighting.unwrap_or(&default_weighting);
    let fs = if config.use_fs && config.horizon >= 2 {
        future_loss(tape, aux, &config.fs_config(), batch, enc.h, m, logits, weighting)?
    } else {
        FsOutput {
            loss: tape.scalar_constant(0.0),
            omega: Vec::new(),
            valid: 0,
            rows: batch.rows,
            step_ce: Vec::new(),
        }
    };
    let fc = if config.use_fc {
        contrastive_loss(tape, aux, batch, enc.h, m, config.fc_temperature)?
    } else {
        FcOutput {
            loss: tape.scalar_constant(0.0),
            valid: 0,
            rows: batch.rows,
            similarity_gap: 0.0,
        }
    };
    let with_fs = tape.add(main, fs.loss)?;
    let scaled = tape.scalar_mul(fc.loss, config.lambda);
    let total = tape.add(with_fs, scaled)?;
    Ok(Losses {
        main,
        future: fs.loss,
        contrastive: fc.loss,
        total,
        fs,
        fc,
    })
}

/// Gradients of every bound parameter, zero-filled where none arrived.
pub fn collect_grads(tape: &Tape, store: &ParamStore, bound: &Bound) -> IndexMap<String, Vec<f64>> {
    bound
        .iter()
        .map(|(name, v)| {
            let g = match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; store.get(name).map_or(0, |t| t.numel())],
            };
            (name.to_string(), g)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub main: f64,
    pub future: f64,
    pub contrastive: f64,
    pub total: f64,
    pub mean_omega: f64,
    pub min_omega: f64,
    pub max_omega: f64,
    pub rows: usize,
    pub fs_valid: usize,
    pub fc_valid: usize,
    pub step_ce: Vec<f64>,
    pub similarity_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub main: f64,
    pub future: f64,
    pub contrastive: f64,
    pub mean_omega: f64,
    pub min_omega: f64,
    pub max_omega: f64,
    pub fs_valid_frac: f64,
    pub fc_valid_frac: f64,
    pub step_ce: Vec<f64>,
    pub similarity_gap: f64,
    pub valid_hr10: f64,
    pub valid_ndcg10: f64,
    pub elapsed_secs: f64,
}

impl EpochLog {
    pub fn tsv_header(horizon: usize) -> String {
        let mut s = String::from(
            "epoch\tl_m\tl_fs\tl_fc\tmean_omega\tvalid_hr10\tvalid_ndcg10\telapsed_s\tmin_omega\tmax_omega\tfs_valid_frac\tfc_valid_frac\tsim_gap",
        );
        for k in 2..=horizon {
            let _ = write!(s, "\tce_k{k}");
        }
        s
    }

    pub fn tsv_line(&self) -> String {
        let mut s = format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.6}",
            self.epoch,
            self.main,
            self.future,
            self.contrastive,
            self.mean_omega,
            self.valid_hr10,
            self.valid_ndcg10,
            self.elapsed_secs,
            self.min_omega,
            self.max_omega,
            self.fs_valid_frac,
            self.fc_valid_frac,
            self.similarity_gap
        );
        for ce in &self.step_ce {
            let _ = write!(s, "\t{ce:.6}");
        }
        s
    }
}

#[derive(Debug, Default)]
struct EpochAccum {
    batches: usize,
    main: f64,
    future: f64,
    contrastive: f64,
    omega_sum: f64,
    omega_n: usize,
    min_omega: f64,
    max_omega: f64,
    rows: usize,
    fs_valid: usize,
    fc_valid: usize,
    step_ce: Vec<f64>,
    fs_batches: usize,
    gap: f64,
    fc_batches: usize,
}

impl EpochAccum {
    fn new() -> Self {
        EpochAccum {
            min_omega: f64::INFINITY,
            max_omega: f64::NEG_INFINITY,
            ..Default::default()
        }
    }

    fn add(&mut self, r: &StepReport, omega: &[f64]) {
        self.batches += 1;
        self.main += r.main;
        self.future += r.future;
        self.contrastive += r.contrastive;
        self.omega_sum += omega.iter().sum::<f64>();
        self.omega_n += omega.len();
        for &w in omega {
            self.min_omega = self.min_omega.min(w);
            self.max_omega = self.max_omega.max(w);
        }
        self.rows += r.rows;
        self.fs_valid += r.fs_valid;
        self.fc_valid += r.fc_valid;
        if !r.step_ce.is_empty() && r.fs_valid > 0 {
            self.step_ce.resize(r.step_ce.len(), 0.0);
            self.step_ce.iter_mut().zip(&r.step_ce).for_each(|(a, b)| *a += b);
            self.fs_batches += 1;
        }
        if r.fc_valid >= 2 {
            self.gap += r.similarity_gap;
            self.fc_batches += 1;
        }
    }

    fn finish(self, epoch: usize, valid: &EvalReport, elapsed: f64) -> EpochLog {
        let b = self.batches.max(1) as f64;
        let finite_or_zero = |v: f64| if v.is_finite() { v } else { 0.0 };
        EpochLog {
            epoch,
            main: self.main / b,
            future: self.future / b,
            contrastive: self.contrastive / b,
            mean_omega: if self.omega_n > 0 {
                self.omega_sum / self.omega_n as f64
            } else {
                0.0
            },
            min_omega: finite_or_zero(self.min_omega),
            max_omega: finite_or_zero(self.max_omega),
            fs_valid_frac: self.fs_valid as f64 / self.rows.max(1) as f64,
            fc_valid_frac: self.fc_valid as f64 / self.rows.max(1) as f64,
            step_ce: self.step_ce.iter().map(|v| v / self.fs_batches.max(1) as f64).collect(),
            similarity_gap: self.gap / self.fc_batches.max(1) as f64,
            valid_hr10: valid.hr_at(10),
            valid_ndcg10: valid.ndcg_at(10),
            elapsed_secs: elapsed,
        }
    }
}

/// Owns the model, optimizer state and the dropout stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    batches_seen: usize,
}

pub struct FitResult {
    /// Parameters from the epoch with the best validation metric.
    pub best: Model,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub best_report: EvalReport,
    pub epochs_run: usize,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            adam: Adam::new(config.adam()),
            model,
            config,
            rng,
            batches_seen: 0,
        })
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let (report, _) = self.train_step_inner(batch)?;
        Ok(report)
    }

    fn train_step_inner(&mut self, batch: &Batch) -> Result<(StepReport, Vec<f64>)> {
        let mut tape = Tape::new();
        let (bb, aux) = self.model.bind(&mut tape);
        let losses = compute_losses(
            &mut tape,
            &self.model,
            &bb,
            &aux,
            batch,
            &self.config,
            None,
            true,
            &mut self.rng,
        )?;
        let report = StepReport {
            main: tape.item(losses.main),
            future: tape.item(losses.future),
            contrastive: tape.item(losses.contrastive),
            total: tape.item(losses.total),
            mean_omega: mean(&losses.fs.omega),
            min_omega: losses.fs.omega.iter().copied().fold(f64::INFINITY, f64::min),
            max_omega: losses.fs.omega.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            rows: batch.rows,
            fs_valid: losses.fs.valid,
            fc_valid: losses.fc.valid,
            step_ce: losses.fs.step_ce.clone(),
            similarity_gap: losses.fc.similarity_gap,
        };
        let batch_id = self.batches_seen;
        self.batches_seen += 1;
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at batch {batch_id}: l_m={} l_fs={} l_fc={} total={}",
                report.main, report.future, report.contrastive, report.total
            )));
        }
        tape.backward(losses.total)?;
        let mut g_bb = collect_grads(&tape, &self.model.backbone.params, &bb);
        let mut g_aux = collect_grads(&tape, &self.model.aux, &aux);
        if let Some(max) = self.config.clip_norm {
            clip_global_norm(g_bb.values_mut().chain(g_aux.values_mut()), max);
        }
        if g_bb.values().chain(g_aux.values()).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at batch {batch_id}")));
        }
        self.adam.begin_step();
        self.adam.apply(&mut self.model.backbone.params, &g_bb)?;
        self.adam.apply(&mut self.model.aux, &g_aux)?;
        Ok((report, losses.fs.omega))
    }

    /// Epoch loop with early stopping on the validation metric.
    ///
    /// `validate` scores the backbone after each epoch; `on_epoch` sees every
    /// log row as it is produced.
    pub fn fit(
        mut self,
        train: &[Vec<u32>],
        mut validate: impl FnMut(&Backbone) -> Result<EvalReport>,
        mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
    ) -> Result<FitResult> {
        let instances: Vec<TrainingInstance> = expand_instances(train, self.config.horizon);
        if instances.is_empty() {
            return Err(Error::Data("no training instances".into()));
        }
        let mut best: Option<(Model, usize, f64, EvalReport)> = None;
        let mut since_best = 0;
        let mut log = Vec::new();
        let start = Instant::now();
        let max_len = self.model.backbone.config.max_len;
        for epoch in 1..=self.config.max_epochs {
            let mut acc = EpochAccum::new();
            let order_seed = shuffle_seed(self.config.seed, epoch);
            for batch in make_batches(
                &instances,
                self.config.horizon,
                self.config.batch_size,
                max_len,
                order_seed,
            )? {
                let (r, omega) = self.train_step_inner(&batch)?;
                acc.add(&r, &omega);
            }
            let report = validate(&self.model.backbone)?;
            let metric = self.config.valid_metric.of(&report);
            let row = acc.finish(epoch, &report, start.elapsed().as_secs_f64());
            log::info!(
                "epoch {epoch}: l_m {:.4} l_fs {:.4} l_fc {:.4} valid hr@10 {:.4}",
                row.main,
                row.future,
                row.contrastive,
                row.valid_hr10
            );
            on_epoch(&row)?;
            log.push(row);
            let improved = best.as_ref().is_none_or(|b| metric > b.2);
            if improved {
                best = Some((self.model.clone(), epoch, metric, report));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= self.config.patience {
                    break;
                }
            }
        }
        let epochs_run = log.len();
        let (best, best_epoch, best_metric, best_report) =
            best.ok_or_else(|| Error::Config("max_epochs must be at least 1".into()))?;
        Ok(FitResult {
            best,
            best_epoch,
            best_metric,
            best_report,
            epochs_run,
            log,
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Shuffle seed of `epoch`, derived from the run seed.
pub fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains with the standard validation split.
pub fn train_on_splits(
    splits: &Splits,
    backbone: BackboneConfig,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<FitResult> {
    let model = Model::init(backbone, config.horizon, config.seed)?;
    let trainer = Trainer::new(model, config.clone())?;
    trainer.fit(&splits.train, |b| evaluate(b, &splits.valid), on_epoch)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub valid: Vec<EvalReport>,
    pub test: Vec<EvalReport>,
    pub best_epochs: Vec<usize>,
}

impl AblationRow {
    pub fn mean_test(&self, metric: impl Fn(&EvalReport) -> f64) -> f64 {
        mean(&self.test.iter().map(&metric).collect::<Vec<_>>())
    }

    pub fn mean_valid(&self, metric: impl Fn(&EvalReport) -> f64) -> f64 {
        mean(&self.valid.iter().map(&metric).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Test-split means per variant.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<16}{:>10}{:>10}{:>10}{:>10}\n",
            "variant", "HR@10", "HR@20", "NDCG@10", "NDCG@20"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16}{:>10.4}{:>10.4}{:>10.4}{:>10.4}",
                r.variant.name(),
                r.mean_test(|e| e.hr_at(10)),
                r.mean_test(|e| e.hr_at(20)),
                r.mean_test(|e| e.ndcg_at(10)),
                r.mean_test(|e| e.ndcg_at(20)),
            );
        }
        s
    }
}

/// Trains every variant under every seed and scores the best checkpoints.
pub fn run_ablation_suite(
    splits: &Splits,
    backbone: &BackboneConfig,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &variant in variants {
        let mut row = AblationRow {
            variant,
            valid: Vec::new(),
            test: Vec::new(),
            best_epochs: Vec::new(),
        };
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..variant.apply(base)
            };
            let fit = train_on_splits(splits, backbone.clone(), &cfg, |_| Ok(()))?;
            row.test.push(evaluate(&fit.best.backbone, &splits.test)?);
            row.valid.push(fit.best_report);
            row.best_epochs.push(fit.best_epoch);
        }
        rows.push(row);
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
