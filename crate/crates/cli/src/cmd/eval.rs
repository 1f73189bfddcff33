use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::Args;
use kpdet_core::detector::{DetectionConfig, Detector};
use kpdet_core::evalbench::{
    evaluate_detector_on_pair, load_benchmark, match_overlay, run_benchmark, BenchmarkSettings, DetectorRun,
    HarrisDetector, LearnedDetector, PairDetector, PlantedDetector, DEFAULT_BUDGET, DEFAULT_TOLERANCE,
};
use kpdet_core::features::DEFAULT_RATIO;
use kpdet_core::image::write_image;
use kpdet_nn::load_weights;
use serde::{Deserialize, Serialize};

use super::{create_dir, require_positive, write_text};
use crate::error::{CliError, Result};
use crate::manifest::{RunManifest, MANIFEST_NAME};

/// A detector named on the command line: `harris`, `planted`, or
/// `NAME=WEIGHTS.nkw` for a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DetectorSpec {
    Harris,
    Planted,
    Learned {
        name: String,
        weights: PathBuf,
        detection: DetectionConfig,
    },
}

impl FromStr for DetectorSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "harris" => Ok(DetectorSpec::Harris),
            "planted" => Ok(DetectorSpec::Planted),
            other => {
                let (name, path) = match other.split_once('=') {
                    Some((n, p)) => (n.to_string(), p),
                    None => ("learned".to_string(), other),
                };
                if name.is_empty() || path.is_empty() || !path.ends_with(".nkw") {
                    return Err(format!("{other:?}: expected harris, planted or NAME=WEIGHTS.nkw"));
                }
                Ok(DetectorSpec::Learned {
                    name,
                    weights: PathBuf::from(path),
                    detection: DetectionConfig::default(),
                })
            }
        }
    }
}

impl DetectorSpec {
    pub fn name(&self) -> &str {
        match self {
            DetectorSpec::Harris => "harris",
            DetectorSpec::Planted => "planted",
            DetectorSpec::Learned { name, .. } => name,
        }
    }

    pub fn weights(&self) -> Option<&Path> {
        match self {
            DetectorSpec::Learned { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn build(&self) -> Result<Box<dyn PairDetector>> {
        Ok(match self {
            DetectorSpec::Harris => Box::new(HarrisDetector),
            DetectorSpec::Planted => Box::new(PlantedDetector),
            DetectorSpec::Learned {
                name,
                weights,
                detection,
            } => {
                let model = load_weights::<f32>(weights)?;
                Box::new(LearnedDetector::new(name.clone(), Detector::new(model, detection.clone())?))
            }
        })
    }
}

pub fn parse_detectors(list: &str) -> Result<Vec<DetectorSpec>> {
    let specs = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<DetectorSpec>().map_err(CliError::usage))
        .collect::<Result<Vec<_>>>()?;
    if specs.is_empty() {
        return Err(CliError::usage("--detectors is empty"));
    }
    for (i, s) in specs.iter().enumerate() {
        if specs[..i].iter().any(|t| t.name() == s.name()) {
            return Err(CliError::usage(format!("detector name {:?} given twice", s.name())));
        }
    }
    Ok(specs)
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Benchmark written by `kpdet make-bench`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated: harris, planted, NAME=WEIGHTS.nkw.
    #[arg(long, default_value = "harris")]
    pub detectors: String,
    /// Keypoints per image per detector.
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    pub budget: usize,
    /// Reprojection error threshold in pixels.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, default_value_t = DEFAULT_RATIO)]
    pub ratio: f32,
    /// Match overlays for the first N pairs of every detector.
    #[arg(long, default_value_t = 0)]
    pub overlays: usize,
    /// Dataset label in the table; defaults to the directory name.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub dataset: PathBuf,
    pub dataset_name: String,
    pub detectors: Vec<DetectorSpec>,
    pub budget: usize,
    pub tolerance: f64,
    pub ratio: f32,
    pub overlays: usize,
}

impl EvalArgs {
    pub fn plan(&self) -> Result<EvalPlan> {
        require_positive("budget", self.budget)?;
        if !(self.tolerance > 0.0) || !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(CliError::usage("--tolerance must be positive and --ratio in (0, 1]"));
        }
        let dataset_name = self.name.clone().unwrap_or_else(|| {
            self.dataset
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        });
        Ok(EvalPlan {
            dataset: self.dataset.clone(),
            dataset_name,
            detectors: parse_detectors(&self.detectors)?,
            budget: self.budget,
            tolerance: self.tolerance,
            ratio: self.ratio,
            overlays: self.overlays,
        })
    }
}

pub const PAIR_HEADER: &str =
    "detector,pair,keypoints_a,keypoints_b,shared_a,shared_b,possible,correct,total,rr,ms,mma_paper,mma_std";

pub fn per_pair_csv(runs: &[DetectorRun]) -> String {
    let mut out = format!("{PAIR_HEADER}\n");
    for run in runs {
        for (i, r) in run.reports.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{i},{},{},{},{},{},{},{},{},{},{},{}",
                run.detector,
                r.keypoints_a,
                r.keypoints_b,
                r.shared_a,
                r.shared_b,
                r.possible_matches,
                r.correct_matches,
                r.total_matches,
                r.rr(),
                r.ms(),
                r.mma_paper(),
                r.mma_std()
            );
        }
    }
    out
}

impl EvalPlan {
    pub fn settings(&self) -> BenchmarkSettings {
        BenchmarkSettings {
            budget: self.budget,
            tolerance: self.tolerance,
            ratio: self.ratio,
        }
    }

    pub fn execute(&self, out: &Path) -> Result<RunManifest> {
        let mut manifest = RunManifest::new("eval", self);
        create_dir(out)?;
        manifest.add_input(&self.dataset)?;
        for w in self.detectors.iter().filter_map(DetectorSpec::weights) {
            manifest.add_input(w)?;
        }
        let pairs = load_benchmark(&self.dataset)?;
        if pairs.is_empty() {
            return Err(CliError::usage(format!("{}: no pairs", self.dataset.display())));
        }
        let detectors = self.detectors.iter().map(DetectorSpec::build).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&dyn PairDetector> = detectors.iter().map(|d| d.as_ref()).collect();

        let t = Instant::now();
        let (table, runs) = run_benchmark(&refs, &pairs, &self.dataset_name, &self.settings())?;
        manifest.time("evaluate", t);

        write_text(&out.join("results.csv"), &table.to_csv())?;
        write_text(&out.join("results.txt"), &table.to_text())?;
        write_text(&out.join("per_pair.csv"), &per_pair_csv(&runs))?;
        if self.overlays > 0 {
            let dir = out.join("overlays");
            create_dir(&dir)?;
            for det in &refs {
                for (i, pair) in pairs.iter().enumerate().take(self.overlays) {
                    let (r, a, b) = evaluate_detector_on_pair(*det, pair, self.budget, self.tolerance, self.ratio)?;
                    write_image(&dir.join(format!("{}_{i:04}.png", det.name())), &match_overlay(pair, &a, &b, &r))?;
                }
            }
        }
        print!("{}", table.to_text());
        manifest.add_output_tree(out)?;
        manifest.save(&out.join(MANIFEST_NAME))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detector_lists() {
        let specs = parse_detectors("harris, planted,net=w/a.nkw").unwrap();
        assert_eq!(specs.len(), 3);
        assert_eq!(specs[2].name(), "net");
        assert_eq!(specs[2].weights(), Some(Path::new("w/a.nkw")));
        assert_eq!("x.nkw".parse::<DetectorSpec>().unwrap().name(), "learned");
        assert!(parse_detectors("sift").is_err());
        assert!(parse_detectors("harris,harris").is_err());
        assert!(parse_detectors("").is_err());
    }
}
