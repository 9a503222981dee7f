//! Command implementations behind the `kgfuse` binary.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::Result;
use crate::model::QueryMode;
use crate::pipeline::{EvalExtras, Experiment, Generate, ModelRef, RunOptions, Stage};
use crate::synth::read_qa_jsonl;

#[derive(Debug, Parser)]
#[command(name = "kgfuse", version, about = "KG expert adapters with zero-shot fusion for commonsense QA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Replace the config's master seed.
    #[arg(long)]
    pub seed_override: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic QA, KG-classification and mixture datasets.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Which datasets: qa, kgc, mixture or all.
        #[arg(long, default_value = "all")]
        which: String,
        #[arg(long)]
        force: bool,
    },
    /// Train one stage: backbone, expert:<kg>, kgc, fusion, stl-plm:<kg> or mtl.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: String,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        resume: bool,
        #[arg(long, value_parser = ["plm", "kgc"])]
        query_mode: Option<String>,
    },
    /// Generate every dataset and train backbone, experts, KG classifier and fusion.
    RunAll {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        resume: bool,
        #[arg(long, value_parser = ["plm", "kgc"])]
        query_mode: Option<String>,
    },
    /// Evaluate a model on a QA dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// plm, expert:<kg>, fusion, stl-plm:<kg> or mtl.
        #[arg(long)]
        model: String,
        /// QA JSONL file; defaults to the mixed validation set.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Write per-layer expert attention (fusion models).
        #[arg(long)]
        attention: bool,
        /// Write CLS embeddings of the questions.
        #[arg(long)]
        embeddings: bool,
        /// Single-KG models anchoring the interference ratio, comma separated.
        #[arg(long, value_delimiter = ',')]
        interference: Vec<String>,
    },
}

fn query_mode(s: &Option<String>) -> Result<Option<QueryMode>> {
    s.as_deref().map(str::parse).transpose()
}

pub fn cmd_generate(exp: &Experiment, which: Generate, force: bool, out: &mut dyn Write) -> Result<()> {
    let stats = exp.generate(which, force)?;
    write!(out, "{stats}")?;
    Ok(())
}

pub fn cmd_train(exp: &Experiment, stage: &Stage, opts: RunOptions, out: &mut dyn Write) -> Result<()> {
    let m = exp.train_stage(stage, opts)?;
    if m.skipped {
        writeln!(out, "{stage}: already complete, skipped")?;
    } else {
        let r = m.report.as_ref();
        writeln!(
            out,
            "{stage}: {} steps, final loss {:.4}, {:.1}s",
            r.map_or(0, |r| r.steps),
            r.and_then(|r| r.loss_curve.last().copied()).unwrap_or(f64::NAN),
            m.wall_time_secs
        )?;
    }
    writeln!(out, "checkpoint: {}", exp.paths.checkpoint(stage).display())?;
    Ok(())
}

pub fn cmd_run_all(exp: &Experiment, opts: RunOptions, out: &mut dyn Write) -> Result<()> {
    let mut io = Ok(());
    exp.run_all(opts, |msg| {
        if io.is_ok() {
            io = writeln!(out, "{msg}");
        }
    })?;
    io?;
    writeln!(out, "artifacts: {}", exp.paths.root.display())?;
    Ok(())
}

pub fn cmd_eval(
    exp: &Experiment,
    model: &ModelRef,
    dataset: Option<&Path>,
    extras: &EvalExtras,
    out: &mut dyn Write,
) -> Result<()> {
    let (data, name) = match dataset {
        Some(p) => (
            read_qa_jsonl(p)?,
            p.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned()),
        ),
        None => (exp.mixed_valid()?, "mixture.valid".to_owned()),
    };
    let summary = exp.eval(model, &data, &name, extras)?;
    writeln!(out, "model: {model}  dataset: {name} ({} samples)", summary.samples)?;
    writeln!(out, "accuracy: {:.4}", summary.accuracy)?;
    if let Some(r) = summary.interference_ratio {
        writeln!(out, "interference ratio: {r:.4}")?;
    }
    writeln!(out, "outputs: {}", exp.paths.eval_dir(&model.tag()).display())?;
    Ok(())
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Generate { common, which, force } => {
            let which: Generate = which.parse()?;
            let exp = Experiment::load(&common.config, common.seed_override)?;
            cmd_generate(&exp, which, force, out)
        }
        Command::Train {
            common,
            stage,
            force,
            resume,
            query_mode: qm,
        } => {
            let stage: Stage = stage.parse()?;
            let opts = RunOptions {
                force,
                resume,
                query_mode: query_mode(&qm)?,
            };
            let exp = Experiment::load(&common.config, common.seed_override)?;
            cmd_train(&exp, &stage, opts, out)
        }
        Command::RunAll {
            common,
            force,
            resume,
            query_mode: qm,
        } => {
            let opts = RunOptions {
                force,
                resume,
                query_mode: query_mode(&qm)?,
            };
            let exp = Experiment::load(&common.config, common.seed_override)?;
            cmd_run_all(&exp, opts, out)
        }
        Command::Eval {
            common,
            model,
            dataset,
            attention,
            embeddings,
            interference,
        } => {
            let model: ModelRef = model.parse()?;
            let extras = EvalExtras {
                attention,
                embeddings,
                interference: interference.iter().map(|s| s.parse()).collect::<Result<_>>()?,
            };
            let exp = Experiment::load(&common.config, common.seed_override)?;
            cmd_eval(&exp, &model, dataset.as_deref(), &extras, out)
        }
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 for usage or config errors, 2 otherwise.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

