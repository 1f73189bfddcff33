use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use kpdet_core::evalbench::generate_benchmark;
use kpdet_core::warp::WarpParams;
use serde::{Deserialize, Serialize};

use super::{create_dir, read_config, require_positive};
use crate::error::Result;
use crate::manifest::{RunManifest, MANIFEST_NAME};
use crate::Size;

#[derive(Debug, Clone, Args)]
pub struct MakeBenchArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    #[arg(long, default_value = "400x300")]
    pub size: Size,
    /// Warp sampling ranges as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPlan {
    pub seed: u64,
    pub count: usize,
    pub size: Size,
    pub warp: WarpParams,
}

impl MakeBenchArgs {
    pub fn plan(&self) -> Result<BenchPlan> {
        require_positive("count", self.count)?;
        Ok(BenchPlan {
            seed: self.seed,
            count: self.count,
            size: self.size,
            warp: read_config(self.config.as_deref())?,
        })
    }
}

impl BenchPlan {
    pub fn execute(&self, out: &Path) -> Result<RunManifest> {
        let mut manifest = RunManifest::new("make-bench", self);
        manifest.seed("root", self.seed);
        create_dir(out)?;
        let t = Instant::now();
        generate_benchmark(out, self.seed, self.count, (self.size.width, self.size.height), &self.warp)?;
        manifest.time("generate", t);
        manifest.add_output_tree(out)?;
        manifest.save(&out.join(MANIFEST_NAME))?;
        Ok(manifest)
    }
}
