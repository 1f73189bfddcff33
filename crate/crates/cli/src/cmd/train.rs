use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use kpdet_core::heatmap::load_corpus;
use kpdet_core::training::{train, StepLog, TrainConfig, LOG_HEADER};
use kpdet_nn::{save_weights, UNet};
use serde::{Deserialize, Serialize};

use super::{create_dir, read_config, write_json, write_text};
use crate::error::{CliError, Result};
use crate::manifest::{RunManifest, MANIFEST_NAME};

/// Epochs when no config is given: a smoke-scale run.
pub const DESK_EPOCHS: usize = 2;

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training settings as JSON (loss weights, optimizer, network, epochs).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus written by `kpdet synth`; overrides the config's corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub train: TrainConfig,
}

impl TrainArgs {
    pub fn plan(&self) -> Result<TrainPlan> {
        let mut cfg: TrainConfig = match &self.config {
            Some(_) => read_config(self.config.as_deref())?,
            None => TrainConfig {
                epochs: DESK_EPOCHS,
                ..TrainConfig::default()
            },
        };
        if let Some(c) = &self.corpus {
            cfg.corpus = Some(c.clone());
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if cfg.corpus.is_none() {
            return Err(CliError::usage("no corpus: pass --corpus or set \"corpus\" in the config"));
        }
        cfg.checkpoint_dir = None;
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(TrainPlan { train: cfg })
    }
}

pub fn log_csv(log: &[StepLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

impl TrainPlan {
    pub fn execute(&self, out: &Path) -> Result<RunManifest> {
        let (_, manifest) = self.execute_with_model(out)?;
        Ok(manifest)
    }

    pub fn execute_with_model(&self, out: &Path) -> Result<(UNet<f32>, RunManifest)> {
        let corpus_dir = self.train.corpus.clone().expect("plan has a corpus");
        let mut manifest = RunManifest::new("train", self);
        manifest.seed("root", self.train.seed);
        create_dir(out)?;
        manifest.add_input(&corpus_dir)?;

        let t = Instant::now();
        let corpus = load_corpus(&corpus_dir)?;
        manifest.time("load_corpus", t);

        let cfg = TrainConfig {
            checkpoint_dir: Some(out.join("checkpoints")),
            ..self.train.clone()
        };
        let t = Instant::now();
        let stderr = std::io::stderr();
        let (model, log) = train(&cfg, &corpus, |row| {
            if row.step % 10 == 0 {
                let _ = writeln!(stderr.lock(), "epoch {} {}", row.epoch, row.csv_row());
            }
        })?;
        manifest.time("train", t);

        save_weights(&model, out.join("weights.nkw"))?;
        write_text(&out.join("train_log.csv"), &log_csv(&log))?;
        write_json(&out.join("train_config.json"), &self.train)?;
        manifest.add_output_tree(out)?;
        manifest.save(&out.join(MANIFEST_NAME))?;
        Ok((model, manifest))
    }
}
