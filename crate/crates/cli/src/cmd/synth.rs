use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use kpdet_core::heatmap::{build_corpus, save_corpus, HeatmapConfig};
use serde::{Deserialize, Serialize};

use super::{create_dir, read_config, require_positive, write_json};
use crate::error::Result;
use crate::manifest::{RunManifest, MANIFEST_NAME};
use crate::Size;

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of training samples (anchor plus two deformed views each).
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value = "192x144")]
    pub size: Size,
    /// Heatmap/warp settings as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPlan {
    pub seed: u64,
    pub count: usize,
    pub size: Size,
    pub heatmap: HeatmapConfig,
}

impl SynthArgs {
    pub fn plan(&self) -> Result<SynthPlan> {
        require_positive("count", self.count)?;
        Ok(SynthPlan {
            seed: self.seed,
            count: self.count,
            size: self.size,
            heatmap: read_config(self.config.as_deref())?,
        })
    }
}

impl SynthPlan {
    pub fn execute(&self, out: &Path) -> Result<RunManifest> {
        let mut manifest = RunManifest::new("synth", self);
        manifest.seed("root", self.seed);
        create_dir(out)?;
        let t = Instant::now();
        let corpus = build_corpus(self.seed, self.count, self.size.width, self.size.height, &self.heatmap)?;
        manifest.time("synthesize", t);
        let t = Instant::now();
        save_corpus(out, &corpus)?;
        write_json(&out.join("heatmap_config.json"), &self.heatmap)?;
        manifest.time("write", t);
        manifest.add_output_tree(out)?;
        manifest.save(&out.join(MANIFEST_NAME))?;
        Ok(manifest)
    }
}
