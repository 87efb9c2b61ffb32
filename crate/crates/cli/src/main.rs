//! `mvcl`: synthesize data, train the staged model, evaluate checkpoints and
//! run gradient checks.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
//! configuration error.

mod config;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mvcl_core::data::{generate_synthetic, read_dataset, write_dataset, Dataset, Splits};
use mvcl_core::gradcheck_suite::{run_gradchecks, CHECK_NAMES};
use mvcl_core::pipeline::{
    evaluate, load_checkpoint, run_stage, save_checkpoint, Checkpoint, ClassifierTarget, StageId, StageReport,
};
use mvcl_core::ModalityId;
use serde_json::{json, Value};

use config::{usage, Overrides, Preset, RunConfig, Settings, UsageError};

#[derive(Parser)]
#[command(name = "mvcl", version, about = "Multi-view contrastive learning for multimodal sentiment analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Directory holding train.mvcl, val.mvcl and test.mvcl.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Run training phases and write one checkpoint per phase.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
    },
    /// Evaluate a checkpoint's classifier heads on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Corrupts the analytic gradient of the named check.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    Cls,
    All,
}

impl StageArg {
    fn stages(self) -> &'static [StageId] {
        match self {
            StageArg::One => &[StageId::Scl1],
            StageArg::Two => &[StageId::Sscl],
            StageArg::Three => &[StageId::Scl2],
            StageArg::Cls => &[StageId::ClsUnimodal, StageId::ClsMultimodal],
            StageArg::All => &StageId::TRAINING,
        }
    }
}

/// Writes JSON lines to stdout and, with an output directory, appends them
/// to `metrics.jsonl`.
struct Reporter {
    file: Option<File>,
}

impl Reporter {
    fn new(out: Option<&Path>) -> Result<Self> {
        let file = match out {
            Some(dir) => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("metrics.jsonl"))
                    .with_context(|| format!("opening {}/metrics.jsonl", dir.display()))?,
            ),
            None => None,
        };
        Ok(Self { file })
    }

    fn emit(&mut self, v: Value) -> Result<()> {
        let line = serde_json::to_string(&v)?;
        println!("{line}");
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

fn settings(common: &Common) -> Result<(Settings, bool)> {
    let file = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let has_synth = file.synth.is_some();
    let s = file.resolve(Overrides {
        preset: common.preset,
        seed: common.seed,
        out: common.out.clone(),
        dataset: common.dataset.clone(),
    })?;
    Ok((s, has_synth))
}

fn out_dir(s: &Settings) -> Result<PathBuf> {
    let dir = s.out.clone().ok_or_else(|| usage("an output directory is required (--out or `out` in the config)"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn load_splits(s: &Settings, has_synth: bool) -> Result<Splits> {
    match &s.dataset {
        Some(dir) => {
            let files = SPLITS.map(|n| dir.join(format!("{n}.mvcl")));
            if let Some(missing) = files.iter().find(|f| !f.is_file()) {
                return Err(usage(format!("dataset file {} does not exist", missing.display())));
            }
            let [train, val, test] = files.map(|f| read_dataset(&f).with_context(|| format!("reading {}", f.display())));
            Ok(Splits {
                train: train?,
                val: val?,
                test: test?,
            })
        }
        None if has_synth => Ok(generate_synthetic(&s.synth)?),
        None => Err(usage("no dataset: pass --dataset DIR or add a [synth] table to the config")),
    }
}

fn header_json(split: &str, d: &Dataset) -> Value {
    json!({ "event": "dataset", "split": split, "header": d.header })
}

fn cmd_synth(common: &Common) -> Result<()> {
    let (s, _) = settings(common)?;
    s.synth.validate().map_err(|e| usage(format!("invalid [synth] table: {e}")))?;
    let dir = out_dir(&s)?;
    let splits = generate_synthetic(&s.synth)?;
    let mut rep = Reporter { file: None };
    for (name, d) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
        let path = dir.join(format!("{name}.mvcl"));
        write_dataset(&path, d).with_context(|| format!("writing {}", path.display()))?;
        rep.emit(header_json(name, d))?;
    }
    Ok(())
}

fn stage_json(report: &StageReport, path: &Path) -> Result<Value> {
    let mut v = serde_json::to_value(report)?;
    v["event"] = json!("stage");
    v["checkpoint"] = json!(path.file_name().map(|n| n.to_string_lossy().into_owned()));
    Ok(v)
}

fn checkpoint_path(dir: &Path, stage: StageId) -> PathBuf {
    dir.join(format!("{stage}.mvck"))
}

fn previous(stage: StageId) -> StageId {
    match stage {
        StageId::Init | StageId::Scl1 => StageId::Init,
        StageId::Sscl => StageId::Scl1,
        StageId::Scl2 => StageId::Sscl,
        StageId::ClsUnimodal => StageId::Scl2,
        StageId::ClsMultimodal => StageId::ClsUnimodal,
    }
}

fn cmd_train(common: &Common, stage: StageArg) -> Result<()> {
    let (s, has_synth) = settings(common)?;
    let splits = load_splits(&s, has_synth)?;
    let dir = out_dir(&s)?;
    let model_cfg = s.model_config(&splits.train.header)?;
    let plan = s.plan();
    let stages = stage.stages();
    let mut ckpt = match previous(stages[0]) {
        StageId::Init => Checkpoint::initial(model_cfg.clone(), s.seed)?,
        prev => {
            let path = checkpoint_path(&dir, prev);
            load_checkpoint(&path, &model_cfg)
                .with_context(|| format!("stage {}: loading {}", stages[0], path.display()))?
        }
    };
    let mut rep = Reporter::new(Some(&dir))?;
    for &id in stages {
        let (next, report) = run_stage(id, &ckpt, &splits, &plan).with_context(|| format!("stage {id} failed"))?;
        let path = checkpoint_path(&dir, id);
        save_checkpoint(&path, &next).with_context(|| format!("stage {id}: writing {}", path.display()))?;
        rep.emit(stage_json(&report, &path)?)?;
        ckpt = next;
    }
    if ckpt.stage == StageId::ClsMultimodal {
        let metrics = evaluate(&ckpt.model, &splits.test, ClassifierTarget::Multimodal)?;
        rep.emit(json!({ "event": "final", "split": "test", "seed": s.seed, "metrics": metrics }))?;
    }
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let (s, has_synth) = settings(common)?;
    if !checkpoint.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let splits = load_splits(&s, has_synth)?;
    let model_cfg = s.model_config(&splits.train.header)?;
    let ckpt = load_checkpoint(checkpoint, &model_cfg).with_context(|| format!("loading {}", checkpoint.display()))?;
    if ckpt.stage < StageId::ClsUnimodal {
        return Err(anyhow!(
            "checkpoint is at stage {}; classifier heads are trained from {} on",
            ckpt.stage,
            StageId::ClsUnimodal
        ));
    }
    let mut unimodal = serde_json::Map::new();
    for m in ModalityId::ALL {
        let r = evaluate(&ckpt.model, &splits.test, ClassifierTarget::Unimodal(m))?;
        unimodal.insert(m.letter().to_string(), serde_json::to_value(r)?);
    }
    let mut line = json!({
        "event": "eval",
        "split": "test",
        "stage": ckpt.stage,
        "unimodal": unimodal,
    });
    if ckpt.stage == StageId::ClsMultimodal {
        line["metrics"] = serde_json::to_value(evaluate(&ckpt.model, &splits.test, ClassifierTarget::Multimodal)?)?;
    }
    if let Some(d) = &s.out {
        fs::create_dir_all(d)?;
    }
    Reporter::new(s.out.as_deref())?.emit(line)
}

fn cmd_gradcheck(common: &Common, seeds: u64, fault: Option<&str>) -> Result<()> {
    let (s, _) = settings(common)?;
    if seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    if let Some(f) = fault {
        if !CHECK_NAMES.contains(&f) {
            return Err(usage(format!("unknown check {f}; expected one of {CHECK_NAMES:?}")));
        }
    }
    let seed_list: Vec<u64> = (s.seed..s.seed + seeds).collect();
    let rows = run_gradchecks(&seed_list, fault)?;
    println!("{:<20} {:>6} {:>12}  result", "check", "seeds", "max rel err");
    for r in &rows {
        println!(
            "{:<20} {:>6} {:>12.3e}  {}",
            r.name,
            r.seeds,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(dir) = &s.out {
        fs::create_dir_all(dir)?;
        let mut rep = Reporter::new(Some(dir))?;
        for r in &rows {
            let mut v = serde_json::to_value(r)?;
            v["event"] = json!("gradcheck");
            if let Some(f) = &mut rep.file {
                writeln!(f, "{}", serde_json::to_string(&v)?)?;
            }
        }
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(anyhow!("gradient check failed: {}", failed.join(", ")))
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MVCL_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| usage(format!("MVCL_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Synth { common } => cmd_synth(common),
        Command::Train { common, stage } => cmd_train(common, *stage),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Gradcheck {
            common,
            seeds,
            inject_fault,
        } => cmd_gradcheck(common, *seeds, inject_fault.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
