use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use ufrec::checkpoint;
use ufrec::config::{parse_pairs, RunConfig};
use ufrec::data::{self, inject_noise, load_corpus, split_leave_one_out, synth_markov, CoreMode, InteractionCorpus};
use ufrec::eval::{evaluate, EvalReport};
use ufrec::trainer::{run_ablation_suite, train_on_splits, EpochLog, Variant};

#[derive(Parser, Debug)]
#[command(
    name = "ufrec",
    version,
    about = "Sequential recommender training with future supervision"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter a raw log to its k-core and write a dense-id corpus.
    Prepare(PrepareArgs),
    /// Train one configuration under each seed.
    Train(TrainArgs),
    /// Score a checkpoint on the valid or test split.
    Eval(EvalArgs),
    /// Train every ablation variant under the same seeds.
    Ablate(AblateArgs),
    /// Write a synthetic Markov-chain corpus.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Raw log, one `user item item ...` line per user.
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = data::DEFAULT_MIN_CORE)]
    min_core: usize,
    /// One item pass and one user pass instead of iterating to a fixpoint.
    #[arg(long)]
    single_pass: bool,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lambda=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Comma-separated seeds, same as `--set seeds=...`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    allow_offgrid: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Train a named variant instead of the configured flags.
    #[arg(long)]
    ablate: Option<String>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated variant names; defaults to the full table.
    #[arg(long)]
    variants: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared corpus the checkpoint was trained on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Seed label written into the machine-readable lines.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write machine-readable lines here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 50)]
    items: usize,
    #[arg(long, default_value_t = 20)]
    len: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Fraction of positions replaced by uniformly random items.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already carry their cause in the message
            match e.downcast_ref::<ufrec::Error>() {
                Some(err) => eprintln!("error: {err}"),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<ufrec::Error>() {
        Some(err) => err.exit_code() as u8,
        None => 2,
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn mkdir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

const STATS_HEADER: &str = "#Users\t#Items\t#Actions\tAvg.Length\tDensity";

fn write_corpus(corpus: &InteractionCorpus, out: &Path) -> anyhow::Result<()> {
    mkdir(out)?;
    let p = out.join("corpus.txt");
    corpus
        .write(create(&p)?)
        .with_context(|| format!("writing {}", p.display()))?;
    let p = out.join("items.tsv");
    corpus
        .write_item_map(create(&p)?)
        .with_context(|| format!("writing {}", p.display()))?;
    let p = out.join("users.tsv");
    corpus
        .write_user_map(create(&p)?)
        .with_context(|| format!("writing {}", p.display()))?;
    let stats = format!("{STATS_HEADER}\n{}\n", corpus.stats());
    write_file(&out.join("stats.tsv"), &stats)?;
    print!("{stats}");
    Ok(())
}

fn prepare(a: PrepareArgs) -> anyhow::Result<()> {
    let mode = if a.single_pass {
        CoreMode::SinglePass
    } else {
        CoreMode::Fixpoint
    };
    let corpus = load_corpus(&a.input, a.min_core, mode)?;
    write_corpus(&corpus, &a.out)
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    if !(0.0..1.0).contains(&a.noise) {
        return Err(ufrec::Error::Config(format!("noise must be in [0, 1), got {}", a.noise)).into());
    }
    let mut corpus = synth_markov(a.users, a.items, a.len, a.seed)?;
    if a.noise > 0.0 {
        corpus = inject_noise(&corpus, a.noise, a.seed.wrapping_add(1));
    }
    write_corpus(&corpus, &a.out)
}

fn resolve(a: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let file = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| ufrec::Error::Io {
                path: p.clone(),
                source: e,
            })?;
            parse_pairs(&text, &p.display().to_string())?
        }
        None => Vec::new(),
    };
    let mut overrides = Vec::new();
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ufrec::Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = &a.seeds {
        overrides.push(("seeds".into(), s.clone()));
    }
    if a.allow_offgrid {
        overrides.push(("allow_offgrid".into(), "true".into()));
    }
    Ok(RunConfig::resolve(&file, &overrides)?)
}

fn parse_variant(name: &str) -> ufrec::Result<Variant> {
    Variant::parse(name.trim()).ok_or_else(|| {
        let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        ufrec::Error::Config(format!(
            "unknown variant `{name}`, expected one of {}",
            known.join(", ")
        ))
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(title: &str, reports: &[&EvalReport]) -> String {
    let mut s = format!("{title} over {} seed(s)\n", reports.len());
    for m in ufrec::eval::CUTOFFS {
        let hr: Vec<f64> = reports.iter().map(|r| r.hr_at(m)).collect();
        let nd: Vec<f64> = reports.iter().map(|r| r.ndcg_at(m)).collect();
        let (hm, hs) = mean_std(&hr);
        let (nm, ns) = mean_std(&nd);
        s.push_str(&format!(
            "HR@{m:<3} {hm:.4} ± {hs:.4}   NDCG@{m:<3} {nm:.4} ± {ns:.4}\n"
        ));
    }
    s
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = resolve(&a.config)?;
    if let Some(name) = &a.ablate {
        cfg.train = parse_variant(name)?.apply(&cfg.train);
    }
    let corpus = load_corpus(&cfg.data, 1, CoreMode::Fixpoint)?;
    let splits = split_leave_one_out(&corpus)?;
    let bcfg = cfg.backbone(corpus.num_items);
    mkdir(&cfg.run_dir)?;
    write_file(&cfg.run_dir.join("config.resolved"), &cfg.to_resolved_string())?;

    let mut valid = Vec::new();
    let mut test = Vec::new();
    for &seed in &cfg.seeds {
        let dir = cfg.run_dir.join(format!("seed-{seed}"));
        mkdir(&dir)?;
        let seed_cfg = RunConfig {
            seeds: vec![seed],
            ..cfg.clone()
        };
        write_file(&dir.join("config.resolved"), &seed_cfg.to_resolved_string())?;

        let log_path = dir.join("epochs.tsv");
        let mut log = create(&log_path)?;
        writeln!(log, "{}", EpochLog::tsv_header(cfg.train.horizon))?;
        let fit = train_on_splits(&splits, bcfg.clone(), &cfg.train_config(seed), |row| {
            writeln!(log, "{}", row.tsv_line())
                .and_then(|_| log.flush())
                .map_err(|e| ufrec::Error::Io {
                    path: log_path.clone(),
                    source: e,
                })
        })?;
        drop(log);
        checkpoint::save_model(&dir.join("best.ckpt"), &fit.best)?;
        let test_report = evaluate(&fit.best.backbone, &splits.test)?;

        let mut report = format!(
            "seed {seed}: best epoch {} of {}, valid {} {:.6}\n\n",
            fit.best_epoch,
            fit.epochs_run,
            cfg.train.valid_metric.as_str(),
            fit.best_metric
        );
        report.push_str(&fit.best_report.table("valid"));
        report.push('\n');
        report.push_str(&test_report.table("test"));
        report.push('\n');
        report.push_str(&fit.best_report.machine_lines("valid", seed));
        report.push_str(&test_report.machine_lines("test", seed));
        write_file(&dir.join("report.txt"), &report)?;
        log::info!("seed {seed} done, best epoch {}", fit.best_epoch);

        valid.push(fit.best_report);
        test.push(test_report);
    }

    let summary = format!(
        "{}\n{}",
        summarize("valid", &valid.iter().collect::<Vec<_>>()),
        summarize("test", &test.iter().collect::<Vec<_>>())
    );
    write_file(&cfg.run_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let cfg = resolve(&a.config)?;
    let variants: Vec<Variant> = match &a.variants {
        Some(list) => list.split(',').map(parse_variant).collect::<ufrec::Result<_>>()?,
        None => Variant::TABLE.to_vec(),
    };
    let corpus = load_corpus(&cfg.data, 1, CoreMode::Fixpoint)?;
    let splits = split_leave_one_out(&corpus)?;
    mkdir(&cfg.run_dir)?;
    write_file(&cfg.run_dir.join("config.resolved"), &cfg.to_resolved_string())?;

    let table = run_ablation_suite(
        &splits,
        &cfg.backbone(corpus.num_items),
        &cfg.train,
        &variants,
        &cfg.seeds,
    )?;
    let mut lines = String::new();
    for row in &table.rows {
        for (seed, (v, t)) in table.seeds.iter().zip(row.valid.iter().zip(&row.test)) {
            for line in v
                .machine_lines("valid", *seed)
                .lines()
                .chain(t.machine_lines("test", *seed).lines())
            {
                lines.push_str(&format!("{}\t{line}\n", row.variant.name()));
            }
        }
    }
    write_file(&cfg.run_dir.join("ablation.tsv"), &lines)?;
    let rendered = table.render();
    write_file(&cfg.run_dir.join("ablation.txt"), &rendered)?;
    print!("{rendered}");
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.data, 1, CoreMode::Fixpoint)?;
    if corpus.num_items != ckpt.backbone.config.num_items {
        return Err(ufrec::Error::Checkpoint(format!(
            "checkpoint has {} items, corpus {} has {}",
            ckpt.backbone.config.num_items,
            a.data.display(),
            corpus.num_items
        ))
        .into());
    }
    let splits = split_leave_one_out(&corpus)?;
    let cases = match a.split.as_str() {
        "valid" => &splits.valid,
        "test" => &splits.test,
        other => {
            return Err(ufrec::Error::Config(format!("split must be `valid` or `test`, got `{other}`")).into());
        }
    };
    let report = evaluate(&ckpt.backbone, cases)?;
    print!("{}", report.table(&a.split));
    let lines = report.machine_lines(&a.split, a.seed);
    match &a.out {
        Some(p) => write_file(p, &lines)?,
        None => print!("\n{lines}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_over_seeds() {
        let (m, s) = mean_std(&[0.1, 0.2, 0.3]);
        assert!((m - 0.2).abs() < 1e-12);
        assert!((s - 0.1).abs() < 1e-12);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }
}
