//! `kpdet`: corpus synthesis, training, detection, evaluation, retrieval and
//! ablations behind one command line. Every artifact-producing command writes
//! a `manifest.json` next to its outputs.

pub mod cmd;
pub mod error;
pub mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use error::{CliError, Result, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
pub use manifest::RunManifest;

/// Environment variable that sizes the worker pool.
pub const WORKERS_ENV: &str = "KPDET_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "kpdet", version, about = "Matching-heatmap keypoint detector toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a training corpus (anchors, warped views, matching heatmaps).
    Synth(cmd::synth::SynthArgs),
    /// Train the detector on a corpus.
    Train(cmd::train::TrainArgs),
    /// Detect keypoints in one image.
    Detect(cmd::detect::DetectArgs),
    /// Generate a synthetic benchmark of warped image pairs.
    MakeBench(cmd::bench::MakeBenchArgs),
    /// Evaluate detectors on a benchmark.
    Eval(cmd::eval::EvalArgs),
    /// Generate a labelled database/query image set for retrieval.
    MakeRetrieval(cmd::retrieve::MakeRetrievalArgs),
    /// Bag-of-visual-words retrieval with accuracy@K.
    Retrieve(cmd::retrieve::RetrieveArgs),
    /// Train and evaluate the loss, branch and heatmap-weighting variants.
    Ablate(cmd::ablate::AblateArgs),
    /// Re-execute the settings stored in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output location (directory, or keypoint file for `detect`).
    #[arg(long)]
    pub out: PathBuf,
}

/// Image size given as `WIDTHxHEIGHT`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Size {
    pub width: usize,
    pub height: usize,
}

impl Size {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }
}

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        let size = Size::new(parse(w)?, parse(h)?);
        if size.width < 8 || size.height < 8 {
            return Err(format!("{s}: images must be at least 8x8"));
        }
        Ok(size)
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Runs one parsed command and returns the manifest it wrote.
pub fn run(command: &Command) -> Result<RunManifest> {
    match command {
        Command::Synth(a) => a.plan()?.execute(&a.out),
        Command::Train(a) => a.plan()?.execute(&a.out),
        Command::Detect(a) => a.plan()?.execute(&a.out),
        Command::MakeBench(a) => a.plan()?.execute(&a.out),
        Command::Eval(a) => a.plan()?.execute(&a.out),
        Command::MakeRetrieval(a) => a.plan()?.execute(&a.out),
        Command::Retrieve(a) => a.plan()?.execute(&a.out),
        Command::Ablate(a) => a.plan()?.execute(&a.out),
        Command::Rerun(a) => rerun(&RunManifest::load(&a.manifest)?, &a.out),
    }
}

/// Executes the resolved settings of `manifest` again, writing to `out`.
pub fn rerun(manifest: &RunManifest, out: &Path) -> Result<RunManifest> {
    fn plan<T: serde::de::DeserializeOwned>(m: &RunManifest) -> Result<T> {
        serde_json::from_value(m.config.clone())
            .map_err(|e| CliError::usage(format!("manifest settings for `{}`: {e}", m.command)))
    }
    match manifest.command.as_str() {
        "synth" => plan::<cmd::synth::SynthPlan>(manifest)?.execute(out),
        "train" => plan::<cmd::train::TrainPlan>(manifest)?.execute(out),
        "detect" => plan::<cmd::detect::DetectPlan>(manifest)?.execute(out),
        "make-bench" => plan::<cmd::bench::BenchPlan>(manifest)?.execute(out),
        "eval" => plan::<cmd::eval::EvalPlan>(manifest)?.execute(out),
        "make-retrieval" => plan::<cmd::retrieve::RetrievalSetPlan>(manifest)?.execute(out),
        "retrieve" => plan::<cmd::retrieve::RetrievePlan>(manifest)?.execute(out),
        "ablate" => plan::<cmd::ablate::AblationConfig>(manifest)?.execute(out),
        other => Err(CliError::usage(format!("unknown command `{other}` in manifest"))),
    }
}

/// Sizes the global worker pool from [`WORKERS_ENV`] when set.
pub fn init_workers() -> Result<()> {
    let Ok(value) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("{WORKERS_ENV}={value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("worker pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        assert_eq!("192x144".parse::<Size>(), Ok(Size::new(192, 144)));
        assert_eq!("400X300".parse::<Size>(), Ok(Size::new(400, 300)));
        assert!("192".parse::<Size>().is_err());
        assert!("4x4".parse::<Size>().is_err());
        assert_eq!(Size::new(10, 9).to_string(), "10x9");
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
