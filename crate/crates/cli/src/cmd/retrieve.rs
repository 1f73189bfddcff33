use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use kpdet_core::retrieval::{
    accuracy_csv, build_retrieval_set, encode_dictionary, encode_globals, load_labelled_images, run_retrieval,
    save_retrieval_set, write_bytes, RetrievalResult, RetrievalSet, RetrievalSetConfig, DEFAULT_WORDS,
};
use kpdet_core::warp::WarpParams;
use serde::{Deserialize, Serialize};

use super::eval::DetectorSpec;
use super::{create_dir, read_config, require_positive, write_text};
use crate::error::{CliError, Result};
use crate::manifest::{RunManifest, MANIFEST_NAME};
use crate::Size;

#[derive(Debug, Clone, Args)]
pub struct MakeRetrievalArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub objects: usize,
    /// Database views per object.
    #[arg(long, default_value_t = 8)]
    pub variants: usize,
    /// Query views per object.
    #[arg(long, default_value_t = 2)]
    pub queries: usize,
    #[arg(long, default_value = "192x144")]
    pub size: Size,
    /// Warp sampling ranges as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSetPlan {
    pub seed: u64,
    pub set: RetrievalSetConfig,
}

impl MakeRetrievalArgs {
    pub fn plan(&self) -> Result<RetrievalSetPlan> {
        require_positive("objects", self.objects)?;
        require_positive("variants", self.variants)?;
        require_positive("queries", self.queries)?;
        let warp: WarpParams = read_config(self.config.as_deref())?;
        Ok(RetrievalSetPlan {
            seed: self.seed,
            set: RetrievalSetConfig {
                objects: self.objects,
                variants: self.variants,
                queries_per_object: self.queries,
                width: self.size.width,
                height: self.size.height,
                warp,
            },
        })
    }
}

impl RetrievalSetPlan {
    pub fn execute(&self, out: &Path) -> Result<RunManifest> {
        let mut manifest = RunManifest::new("make-retrieval", self);
        manifest.seed("root", self.seed);
        create_dir(out)?;
        let t = Instant::now();
        let set = build_retrieval_set(self.seed, &self.set)?;
        save_retrieval_set(out, &set)?;
        manifest.time("generate", t);
        manifest.add_output_tree(out)?;
        manifest.save(&out.join(MANIFEST_NAME))?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, Args)]
pub struct RetrieveArgs {
    /// Database images named `LABEL_VIEW.png`.
    #[arg(long)]
    pub db: PathBuf,
    /// Query images named `LABEL_VIEW.png`.
    #[arg(long)]
    pub query: PathBuf,
    /// Largest K of the accuracy curve.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// Visual words in the dictionary.
    #[arg(long, default_value_t = DEFAULT_WORDS)]
    pub words: usize,
    /// Keypoints per image.
    #[arg(long, default_value_t = 512)]
    pub budget: usize,
    /// harris, or NAME=WEIGHTS.nkw.
    #[arg(long, default_value = "harris")]
    pub detector: DetectorSpec,
    /// k-means seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievePlan {
    pub db: PathBuf,
    pub query: PathBuf,
    pub k: usize,
    pub words: usize,
    pub budget: usize,
    pub detector: DetectorSpec,
    pub seed: u64,
}

impl RetrieveArgs {
    pub fn plan(&self) -> Result<RetrievePlan> {
        require_positive("k", self.k)?;
        require_positive("budget", self.budget)?;
        if self.words < 2 {
            return Err(CliError::usage("--words must be at least 2"));
        }
        if self.detector == DetectorSpec::Planted {
            return Err(CliError::usage("the planted detector needs a benchmark pair"));
        }
        Ok(RetrievePlan {
            db: self.db.clone(),
            query: self.query.clone(),
            k: self.k,
            words: self.words,
            budget: self.budget,
            detector: self.detector.clone(),
            seed: self.seed,
        })
    }
}

/// One line per query: its label and the top-K database ids with their labels.
pub fn rankings_csv(set: &RetrievalSet, result: &RetrievalResult, k: usize) -> String {
    let mut out = String::from("query,label,ranked_ids,ranked_labels\n");
    for (q, ((label, _), ranking)) in set.queries.iter().zip(&result.rankings).enumerate() {
        let top = &ranking[..k.min(ranking.len())];
        let ids: Vec<String> = top.iter().map(|i| i.to_string()).collect();
        let labels: Vec<String> = top.iter().map(|&i| set.database[i].0.to_string()).collect();
        let _ = writeln!(out, "{q},{label},{},{}", ids.join(" "), labels.join(" "));
    }
    out
}

impl RetrievePlan {
    pub fn execute(&self, out: &Path) -> Result<RunManifest> {
        let (_, manifest) = self.execute_with_result(out)?;
        Ok(manifest)
    }

    pub fn execute_with_result(&self, out: &Path) -> Result<(RetrievalResult, RunManifest)> {
        let mut manifest = RunManifest::new("retrieve", self);
        manifest.seed("kmeans", self.seed);
        create_dir(out)?;
        manifest.add_input(&self.db)?;
        manifest.add_input(&self.query)?;
        if let Some(w) = self.detector.weights() {
            manifest.add_input(w)?;
        }
        let set = RetrievalSet {
            database: load_labelled_images(&self.db)?,
            queries: load_labelled_images(&self.query)?,
        };
        if set.database.is_empty() || set.queries.is_empty() {
            return Err(CliError::usage("database and query directories need PNG images"));
        }
        let det = self.detector.build()?;
        let t = Instant::now();
        let result = run_retrieval(det.as_ref(), &set, self.budget, self.words, self.seed, self.k)?;
        manifest.time("retrieve", t);

        write_bytes(out.join("dictionary.nkd"), &encode_dictionary(&result.dictionary))?;
        write_bytes(out.join("database.nkg"), &encode_globals(&result.database)?)?;
        write_text(&out.join("rankings.csv"), &rankings_csv(&set, &result, self.k))?;
        let curve = accuracy_csv(&result.curve);
        write_text(&out.join("accuracy.csv"), &curve)?;
        print!("{curve}");
        manifest.add_output_tree(out)?;
        manifest.save(&out.join(MANIFEST_NAME))?;
        Ok((result, manifest))
    }
}
