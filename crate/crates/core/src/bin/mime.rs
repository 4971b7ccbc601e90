use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::json;

use mime::ehr::{read_cohort, split_folds, write_cohort, Cohort, DEFAULT_RATIOS};
use mime::experiment::{
    end_to_end_gradcheck, evaluate, fold_seed, run_experiment, split_seed, ExperimentConfig,
    ExperimentKind,
};
use mime::metrics::EvalReport;
use mime::model::{Checkpoint, Model, ModelKind, Task};
use mime::synth::{cohort_stats, generate, GenConfig};
use mime::trainer::{train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "mime",
    version,
    about = "Train and evaluate visit encoders on EHR cohorts"
)]
struct Cli {
    /// Worker threads for experiment grids.
    #[arg(long, global = true, env = "MIME_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and its rules sidecar.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on one fold and write its checkpoint.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        split: SplitArgs,
        /// Checkpoint path; the log goes next to it as `<out>.log.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one part of a fold.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        /// Split seed; defaults to the one recorded at training time.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        part: Part,
        /// Defaults to the task the checkpoint was trained for.
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        /// JSON report path; a CSV summary is written alongside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a model × dataset × fold grid and write the results table.
    Experiment {
        #[arg(value_enum)]
        kind: KindArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV path; the full result goes alongside as JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full model with both heads.
    Gradcheck {
        /// `mime` or a baseline name; repeat for several.
        #[arg(long = "model", default_values_t = vec!["mime".to_string()])]
        models: Vec<String>,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        patients: usize,
        #[arg(long, default_value_t = 0.015)]
        lambda_aux: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Hf,
    Sdp,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Complexity,
    Datasize,
    Sdp,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(file).with_context(|| format!("cannot parse {}", path.display()))
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

/// `a/b.jsonl` → `a/b.jsonl.<suffix>`
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn fold_parts(
    cohort: &Cohort,
    seed: u64,
    folds: usize,
    fold: usize,
) -> anyhow::Result<(Cohort, Cohort, Cohort)> {
    if fold >= folds {
        bail!("fold {fold} out of range for {folds} folds");
    }
    let splits = split_folds(cohort, split_seed(seed), folds, DEFAULT_RATIOS)?;
    Ok(splits[fold].cohorts(cohort))
}

fn cmd_gen(config: Option<&Path>, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let mut cfg: GenConfig = load_or_default(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (cohort, labels) = generate(&cfg)?;
    write_cohort(&cohort, out)?;
    let rules = sidecar(out, "rules.json");
    serde_json::to_writer_pretty(create(&rules)?, &json!({ "config": cfg, "labels": labels }))?;
    let st = cohort_stats(&cohort);
    println!(
        "patients {} visits {} visits/patient {:.2} dx/visit {:.2} (max {}) tx/dx {:.2} (max {}) prevalence {}",
        st.patients,
        st.visits,
        st.avg_visits_per_patient,
        st.avg_dx_per_visit,
        st.max_dx_per_visit,
        st.avg_tx_per_dx,
        st.max_tx_per_dx,
        st.prevalence.map_or("n/a".into(), |p| format!("{p:.4}"))
    );
    Ok(())
}

fn cmd_train(
    cohort: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    split: &SplitArgs,
    out: &Path,
) -> anyhow::Result<()> {
    let mut cfg: TrainConfig = load_or_default(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let cohort = read_cohort(cohort)?;
    let (folds, fold) = (split.folds.unwrap_or(5), split.fold.unwrap_or(0));
    let (tr, va, _) = fold_parts(&cohort, cfg.seed, folds, fold)?;
    let run_seed = cfg.seed;
    cfg.seed = fold_seed(run_seed, fold);
    let (model, log) = train(&tr, &va, &cfg)?;
    let mut ck = model.to_checkpoint();
    ck.meta.insert("config".into(), serde_json::to_value(&cfg)?);
    ck.meta.insert("seed".into(), json!(run_seed));
    ck.meta.insert("fold".into(), json!(fold));
    ck.meta.insert("folds".into(), json!(folds));
    ck.meta
        .insert("best_iteration".into(), json!(log.best_iteration));
    ck.write(out)?;
    log.write_csv(create(&sidecar(out, "log.csv"))?)?;
    println!(
        "best iteration {} validation loss {:.4} ({:.1}s)",
        log.best_iteration, log.best_val_loss, log.wall_seconds
    );
    Ok(())
}

fn meta_u64(ck: &Checkpoint, key: &str) -> Option<u64> {
    ck.meta.get(key).and_then(|v| v.as_u64())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    cohort: &Path,
    seed: Option<u64>,
    split: &SplitArgs,
    part: Part,
    task: Option<TaskArg>,
    out: &Path,
) -> anyhow::Result<()> {
    let ck = Checkpoint::read(checkpoint)?;
    let model = Model::from_checkpoint(&ck)?;
    let cohort = read_cohort(cohort)?;
    model.dims().check_vocab(&cohort.vocab)?;
    let seed = seed.or(meta_u64(&ck, "seed")).unwrap_or(1);
    let folds = split
        .folds
        .or(meta_u64(&ck, "folds").map(|v| v as usize))
        .unwrap_or(5);
    let fold = split
        .fold
        .or(meta_u64(&ck, "fold").map(|v| v as usize))
        .unwrap_or(0);
    let task = match task {
        Some(TaskArg::Hf) => Task::Hf,
        Some(TaskArg::Sdp) => Task::Sdp,
        None => ck
            .meta
            .get("config")
            .and_then(|c| c.get("task"))
            .map(|t| serde_json::from_value(t.clone()))
            .transpose()?
            .unwrap_or(Task::Hf),
    };
    let (tr, va, te) = fold_parts(&cohort, seed, folds, fold)?;
    let target = match part {
        Part::Train => &tr,
        Part::Val => &va,
        Part::Test => &te,
    };
    let report = EvalReport::from_folds(vec![evaluate(&model, &tr, target, task)?]);
    report.write_json(create(out)?)?;
    report.write_csv(create(&out.with_extension("csv"))?)?;
    for (k, s) in &report.summary {
        println!("{k} {:.4}", s.mean);
    }
    Ok(())
}

fn cmd_experiment(
    kind: KindArg,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> anyhow::Result<bool> {
    let mut cfg: ExperimentConfig = load_or_default(config)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let kind = match kind {
        KindArg::Complexity => ExperimentKind::Complexity,
        KindArg::Datasize => ExperimentKind::Datasize,
        KindArg::Sdp => ExperimentKind::Sdp,
    };
    let result = run_experiment(kind, &cfg)?;
    result.write_csv(create(out)?)?;
    serde_json::to_writer_pretty(create(&out.with_extension("json"))?, &result)?;
    for d in &result.datasets {
        println!(
            "{} patients {} prevalence {}",
            d.name,
            d.patients,
            d.prevalence.map_or("n/a".into(), |p| format!("{p:.4}"))
        );
    }
    for f in &result.failures {
        eprintln!(
            "failed: {} on {} fold {}: {}",
            f.model, f.dataset, f.fold, f.message
        );
    }
    Ok(result.failures.is_empty())
}

fn cmd_gradcheck(
    models: &[String],
    dim: usize,
    patients: usize,
    lambda_aux: f64,
    seed: u64,
    tolerance: f64,
) -> anyhow::Result<bool> {
    let mut ok = true;
    for name in models {
        let kind: ModelKind = serde_json::from_value(json!(name))
            .with_context(|| format!("unknown model {name:?}"))?;
        let report = end_to_end_gradcheck(kind, dim, patients, lambda_aux, seed)?;
        for (param, err) in &report.per_param {
            println!("{name} {param} {err:.3e}");
        }
        let pass = report.max_rel_error < tolerance;
        ok &= pass;
        println!(
            "{name} max {:.3e} over {} entries: {}",
            report.max_rel_error,
            report.entries_checked,
            if pass { "ok" } else { "FAILED" }
        );
    }
    Ok(ok)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    match &cli.command {
        Command::Gen { config, seed, out } => cmd_gen(config.as_deref(), *seed, out).map(|_| true),
        Command::Train {
            cohort,
            config,
            seed,
            split,
            out,
        } => cmd_train(cohort, config.as_deref(), *seed, split, out).map(|_| true),
        Command::Eval {
            checkpoint,
            cohort,
            seed,
            split,
            part,
            task,
            out,
        } => cmd_eval(checkpoint, cohort, *seed, split, *part, *task, out).map(|_| true),
        Command::Experiment {
            kind,
            config,
            seed,
            out,
        } => cmd_experiment(*kind, config.as_deref(), *seed, out),
        Command::Gradcheck {
            models,
            dim,
            patients,
            lambda_aux,
            seed,
            tolerance,
        } => cmd_gradcheck(models, *dim, *patients, *lambda_aux, *seed, *tolerance),
    }
}

/// The error chain, skipping causes already quoted by the message above.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
