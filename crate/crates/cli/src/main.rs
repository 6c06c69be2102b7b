//! `vitbis` command-line interface.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors (with a
//! synopsis on stderr), 2 for failures while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use vitbis::data::{Dataset, VtbContainer, VtbData, VtbTensor};
use vitbis::gradsuite::run_gradient_suite;
use vitbis::train::{
    ablate_scale, ablate_upsampling, normalize_image, predict_masks, sha256_hex, RunConfig, SplitKind, Trainer,
};

const SYNOPSIS: &str = "\
usage: vitbis <command> [--config <path.json>] [--seed <u64>] [--out <dir>] [--checkpoint <path>]
commands: train, eval, predict, gradcheck, ablate {upsample|scale}, gen-data
run `vitbis help <command>` for details";

#[derive(Parser, Debug)]
#[command(name = "vitbis", version, about = "Train, evaluate and ablate vitbis segmentation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint file (VTB1).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model, or resume from --checkpoint.
    Train(Common),
    /// Score a checkpoint on its held-out split.
    Eval(Common),
    /// Write one predicted mask per image as VTB1 files.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Dataset file from `gen-data`; defaults to the checkpoint's held-out images.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Finite-difference check of every autodiff primitive.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds per primitive.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Architecture ablations.
    Ablate {
        #[arg(value_enum)]
        kind: AblationKind,
        #[command(flatten)]
        common: Common,
        /// Depths of the scale grid.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        depths: Vec<usize>,
        /// Embedding widths of the scale grid.
        #[arg(long, value_delimiter = ',', default_value = "48,64")]
        dims: Vec<usize>,
    },
    /// Generate the synthetic train and held-out datasets.
    GenData(Common),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AblationKind {
    Upsample,
    Scale,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<vitbis::Error> for Failure {
    fn from(e: vitbis::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", e.render().to_string().trim_end());
            eprintln!("{SYNOPSIS}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{SYNOPSIS}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Train(c) => train(&c),
        Command::Eval(c) => eval(&c),
        Command::Predict { common, input } => predict(&common, input.as_deref()),
        Command::Gradcheck { common, seeds } => gradcheck(&common, seeds),
        Command::Ablate {
            kind,
            common,
            depths,
            dims,
        } => ablate(kind, &common, &depths, &dims),
        Command::GenData(c) => gen_data(&c),
    }
}

/// Reads and validates the configuration; every problem here is a usage error.
fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.optim.seed = seed;
    }
    cfg.validate()
        .map_err(|e| Failure::Usage(format!("invalid config: {e}")))?;
    Ok(cfg)
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    value
        .as_deref()
        .ok_or_else(|| Failure::Usage(format!("{flag} is required for this command")))
}

fn out_dir(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_trainer(path: &Path) -> Result<Trainer, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Trainer::load_checkpoint(path, None)?)
}

fn train(c: &Common) -> Outcome {
    let out = out_dir(c, "runs/train");
    let mut trainer = match &c.checkpoint {
        Some(path) => {
            let mut t = load_trainer(path)?;
            if c.config.is_some() || c.seed.is_some() {
                // Only the step budget may differ from the checkpoint's run.
                let cfg = load_config(c)?;
                let mut same = cfg.clone();
                same.optim.max_steps = t.config().optim.max_steps;
                if &same != t.config() {
                    return Err(Failure::Usage(
                        "the checkpoint was written with a different configuration".into(),
                    ));
                }
                t.set_max_steps(cfg.optim.max_steps);
            }
            t
        }
        None => Trainer::new(load_config(c)?)?,
    };
    let manifest = trainer.fit(Some(&out))?;
    println!(
        "trained {} steps; final loss {:.9}",
        manifest.loss_trace.len(),
        manifest.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    for (split, report) in &manifest.reports {
        print!("{}", report.format_table(split, None));
    }
    println!("run written to {}", out.display());
    Ok(())
}

fn eval(c: &Common) -> Outcome {
    let trainer = load_trainer(require(&c.checkpoint, "--checkpoint")?)?;
    let kind = if trainer.config().holdout_images > 0 {
        SplitKind::Holdout
    } else {
        SplitKind::Train
    };
    let report = trainer.evaluate(kind)?;
    print!("{}", report.format_table(kind.label(), None));
    if let Some(out) = &c.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join(format!("metrics_{}.csv", kind.label())), report.to_csv())?;
    }
    Ok(())
}

fn predict(c: &Common, input: Option<&Path>) -> Outcome {
    let ck = require(&c.checkpoint, "--checkpoint")?;
    let out = require(&c.out, "--out")?;
    let trainer = load_trainer(ck)?;
    let images: Vec<_> = match input {
        Some(path) => {
            let ds = Dataset::load(path)?;
            (0..ds.len()).map(|i| normalize_image(&ds.image(i))).collect()
        }
        None => {
            let kind = if trainer.config().holdout_images > 0 {
                SplitKind::Holdout
            } else {
                SplitKind::Train
            };
            trainer.split(kind).images.clone()
        }
    };
    let masks = predict_masks(trainer.model(), &images, trainer.config().optim.batch_size)?;
    let checkpoint_sha256 = sha256_hex(&std::fs::read(ck)?);
    std::fs::create_dir_all(out)?;
    for (i, m) in masks.iter().enumerate() {
        let mut c = VtbContainer::new(json!({
            "kind": "prediction",
            "index": i,
            "checkpoint_sha256": checkpoint_sha256,
        }));
        c.push("mask", VtbTensor::new(vec![m.height, m.width], VtbData::U8(m.labels.clone()))?);
        c.write(out.join(format!("mask_{i:04}.vtb")))?;
    }
    println!("wrote {} masks to {}", masks.len(), out.display());
    Ok(())
}

fn gradcheck(c: &Common, seeds: usize) -> Outcome {
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let start = std::time::Instant::now();
    let reports = run_gradient_suite(c.seed.unwrap_or(0), seeds)?;
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!("{status} {:<34} max rel err {:.3e}", r.name, r.max_rel_error);
        failed += usize::from(!r.passed());
    }
    println!(
        "{} checks, {failed} failed, {:.1}s",
        reports.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn ablate(kind: AblationKind, c: &Common, depths: &[usize], dims: &[usize]) -> Outcome {
    let cfg = load_config(c)?;
    let (name, out, table) = match kind {
        AblationKind::Upsample => {
            let out = out_dir(c, "runs/ablate_upsample");
            let table = ablate_upsampling(&cfg, Some(&out))?.format();
            ("ablate_upsample", out, table)
        }
        AblationKind::Scale => {
            if depths.is_empty() || dims.is_empty() {
                return Err(Failure::Usage("--depths and --dims must be non-empty".into()));
            }
            let out = out_dir(c, "runs/ablate_scale");
            let table = ablate_scale(&cfg, depths, dims, Some(&out))?.format();
            ("ablate_scale", out, table)
        }
    };
    print!("{table}");
    std::fs::write(out.join(format!("{name}.txt")), &table)?;
    Ok(())
}

fn gen_data(c: &Common) -> Outcome {
    let cfg = load_config(c)?;
    let out = out_dir(c, "data");
    std::fs::create_dir_all(&out)?;
    let n = cfg.data.num_images;
    let splits = [("train", 0..n), ("holdout", n..n + cfg.holdout_images)];
    for (name, range) in splits {
        if range.is_empty() {
            continue;
        }
        let items = range
            .clone()
            .map(|i| vitbis::data::generate_image(&cfg.data, i))
            .collect::<vitbis::Result<Vec<_>>>()?;
        let ds = Dataset::from_synthetic(&items)?;
        let path = out.join(format!("{name}.vtb"));
        ds.save(&path, json!({ "split": name, "first_index": range.start, "spec": cfg.data }))?;
        println!("wrote {} images to {}", ds.len(), path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
