use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use kpdet_core::detector::{DetectionConfig, Detector};
use kpdet_core::evalbench::{
    generate_pairs, run_benchmark, BenchmarkPair, BenchmarkRow, BenchmarkSettings, HarrisDetector, LearnedDetector,
    PairDetector,
};
use kpdet_core::heatmap::{build_corpus, HeatmapConfig, TrainingSample};
use kpdet_core::training::{train, LossWeights, TrainConfig};
use kpdet_core::warp::WarpParams;
use kpdet_nn::save_weights;
use serde::{Deserialize, Serialize};

use super::train::{log_csv, DESK_EPOCHS};
use super::{create_dir, read_config, write_text};
use crate::error::{CliError, Result};
use crate::manifest::{RunManifest, MANIFEST_NAME};
use crate::Size;

/// One trained variant of the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setup {
    /// Cosine-similarity term only.
    Cossim,
    /// Cosine-similarity and simple terms (with the peak term at its default weight).
    CossimSimple,
    /// All three terms with the default weights.
    Complete,
    /// Complete loss on the anchor branch alone.
    SingleBranch,
    /// Complete loss on heatmaps whose peaks all weigh 1.0.
    EqualWeight,
}

impl Setup {
    pub const ALL: [Setup; 5] = [
        Setup::Cossim,
        Setup::CossimSimple,
        Setup::Complete,
        Setup::SingleBranch,
        Setup::EqualWeight,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Setup::Cossim => "cossim",
            Setup::CossimSimple => "cossim+simple",
            Setup::Complete => "complete",
            Setup::SingleBranch => "single-branch",
            Setup::EqualWeight => "equal-weight-mh",
        }
    }

    pub fn loss_weights(self, base: &LossWeights) -> LossWeights {
        match self {
            Setup::Cossim => LossWeights {
                cossim: 1.0,
                simple: 0.0,
                peak: 0.0,
                ..base.clone()
            },
            Setup::CossimSimple => LossWeights {
                cossim: 1.0,
                simple: 1.0,
                peak: 0.3,
                ..base.clone()
            },
            Setup::Complete | Setup::SingleBranch | Setup::EqualWeight => base.clone(),
        }
    }

    pub fn siamese(self) -> bool {
        self != Setup::SingleBranch
    }

    pub fn equal_weights(self) -> bool {
        self == Setup::EqualWeight
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seed: u64,
    pub corpus_count: usize,
    pub corpus_size: Size,
    pub heatmap: HeatmapConfig,
    /// Base training settings; each setup overrides loss weights and branches.
    pub train: TrainConfig,
    pub bench_seed: u64,
    pub bench_count: usize,
    pub bench_size: Size,
    pub bench_warp: WarpParams,
    pub budget: usize,
    pub tolerance: f64,
    pub ratio: f32,
    pub detection: DetectionConfig,
    pub setups: Vec<Setup>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus_count: 200,
            corpus_size: Size::new(192, 144),
            heatmap: HeatmapConfig::default(),
            train: TrainConfig {
                epochs: DESK_EPOCHS,
                ..TrainConfig::default()
            },
            bench_seed: 1000,
            bench_count: 20,
            bench_size: Size::new(400, 300),
            bench_warp: WarpParams::default(),
            budget: 512,
            tolerance: 3.0,
            ratio: kpdet_core::features::DEFAULT_RATIO,
            detection: DetectionConfig::default(),
            setups: Setup::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    /// Ablation settings as JSON (corpus, training, benchmark, setups).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

impl AblateArgs {
    pub fn plan(&self) -> Result<AblationConfig> {
        let cfg: AblationConfig = read_config(self.config.as_deref())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub setup: String,
    pub weights: Option<LossWeights>,
    pub siamese: Option<bool>,
    pub equal_weights: Option<bool>,
    pub metrics: BenchmarkRow,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

const ABLATION_HEADER: [&str; 12] = [
    "setup",
    "l_cossim",
    "l_simple",
    "l_peak",
    "branches",
    "mh",
    "keypoints",
    "inliers",
    "mma_paper",
    "mma_std",
    "ms",
    "rr",
];

impl AblationTable {
    pub fn row(&self, setup: Setup) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setup == setup.label())
    }

    fn cells(r: &AblationRow) -> [String; 12] {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v}"));
        let m = &r.metrics;
        [
            r.setup.clone(),
            opt(r.weights.as_ref().map(|w| w.cossim)),
            opt(r.weights.as_ref().map(|w| w.simple)),
            opt(r.weights.as_ref().map(|w| w.peak)),
            r.siamese.map_or("-".into(), |s| if s { "siamese" } else { "single" }.into()),
            r.equal_weights.map_or("-".into(), |e| if e { "equal" } else { "weighted" }.into()),
            format!("{:.1}", m.keypoints),
            format!("{:.2}", m.inliers),
            format!("{:.4}", m.mma_paper),
            format!("{:.4}", m.mma_std),
            format!("{:.4}", m.ms),
            format!("{:.4}", m.rr),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut out = ABLATION_HEADER.join(",") + "\n";
        for r in &self.rows {
            out.push_str(&Self::cells(r).join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let body: Vec<[String; 12]> = self.rows.iter().map(Self::cells).collect();
        let mut widths: Vec<usize> = ABLATION_HEADER.iter().map(|h| h.len()).collect();
        for cells in &body {
            for (w, c) in widths.iter_mut().zip(cells) {
                *w = (*w).max(c.len());
            }
        }
        let header = ABLATION_HEADER.map(String::from);
        let mut out = String::new();
        for cells in std::iter::once(&header).chain(&body) {
            let line: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  "));
        }
        out
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        let usage = |e: kpdet_core::CoreError| CliError::usage(e.to_string());
        self.train.validate().map_err(usage)?;
        self.train.weights.validate().map_err(usage)?;
        self.bench_warp.validate().map_err(usage)?;
        self.detection.validate().map_err(usage)?;
        if self.corpus_count == 0 || self.bench_count == 0 || self.budget == 0 {
            return Err(CliError::usage("corpus, benchmark and budget must be non-empty"));
        }
        if self.setups.is_empty() {
            return Err(CliError::usage("no setups selected"));
        }
        Ok(())
    }

    fn corpus(&self, equal_weights: bool) -> Result<Vec<TrainingSample>> {
        let cfg = HeatmapConfig {
            equal_weights,
            ..self.heatmap.clone()
        };
        Ok(build_corpus(self.seed, self.corpus_count, self.corpus_size.width, self.corpus_size.height, &cfg)?)
    }

    pub fn execute(&self, out: &Path) -> Result<RunManifest> {
        Ok(self.execute_with_table(out)?.1)
    }

    pub fn execute_with_table(&self, out: &Path) -> Result<(AblationTable, RunManifest)> {
        self.validate()?;
        let mut manifest = RunManifest::new("ablate", self);
        manifest.seed("corpus", self.seed).seed("train", self.train.seed).seed("bench", self.bench_seed);
        create_dir(out)?;

        let t = Instant::now();
        let weighted = self.corpus(false)?;
        let equal = if self.setups.iter().any(|s| s.equal_weights()) {
            Some(self.corpus(true)?)
        } else {
            None
        };
        let (bw, bh) = (self.bench_size.width, self.bench_size.height);
        let pairs = generate_pairs(self.bench_seed, self.bench_count, bw, bh, &self.bench_warp)?;
        manifest.time("data", t);

        let settings = BenchmarkSettings {
            budget: self.budget,
            tolerance: self.tolerance,
            ratio: self.ratio,
        };
        let evaluate = |det: &dyn PairDetector, pairs: &[BenchmarkPair]| -> Result<BenchmarkRow> {
            let (table, _) = run_benchmark(&[det], pairs, "ablation", &settings)?;
            Ok(table.rows.into_iter().next().expect("one detector"))
        };

        let mut rows = vec![AblationRow {
            setup: "harris".into(),
            weights: None,
            siamese: None,
            equal_weights: None,
            metrics: evaluate(&HarrisDetector, &pairs)?,
        }];
        for &setup in &self.setups {
            let t = Instant::now();
            let cfg = TrainConfig {
                weights: setup.loss_weights(&self.train.weights),
                siamese: setup.siamese(),
                checkpoint_dir: None,
                ..self.train.clone()
            };
            let corpus = if setup.equal_weights() { equal.as_ref().expect("built above") } else { &weighted };
            eprintln!("ablation: training {}", setup.label());
            let (model, log) = train(&cfg, corpus, |_| {})?;
            let dir = out.join("runs").join(setup.label());
            create_dir(&dir)?;
            save_weights(&model, dir.join("weights.nkw"))?;
            write_text(&dir.join("train_log.csv"), &log_csv(&log))?;
            let det = LearnedDetector::new(setup.label(), Detector::new(model, self.detection.clone())?);
            rows.push(AblationRow {
                setup: setup.label().into(),
                weights: Some(cfg.weights.clone()),
                siamese: Some(cfg.siamese),
                equal_weights: Some(setup.equal_weights()),
                metrics: evaluate(&det, &pairs)?,
            });
            manifest.time(setup.label(), t);
        }
        let table = AblationTable { rows };
        write_text(&out.join("ablation.csv"), &table.to_csv())?;
        write_text(&out.join("ablation.txt"), &table.to_text())?;
        print!("{}", table.to_text());
        manifest.add_output_tree(out)?;
        manifest.save(&out.join(MANIFEST_NAME))?;
        Ok((table, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn setups_cover_the_loss_rows_and_toggles() {
        let base = LossWeights::default();
        let w: Vec<(f64, f64, f64)> = Setup::ALL
            .iter()
            .map(|s| {
                let w = s.loss_weights(&base);
                (w.cossim, w.simple, w.peak)
            })
            .collect();
        assert_eq!(w[0], (1.0, 0.0, 0.0));
        assert_eq!(w[1], (1.0, 1.0, 0.3));
        assert_eq!(w[2], (3.0, 1.0, 0.3));
        assert!(!Setup::SingleBranch.siamese() && Setup::Complete.siamese());
        assert!(Setup::EqualWeight.equal_weights() && !Setup::Complete.equal_weights());
        let json = serde_json::to_string(&Setup::ALL).unwrap();
        assert_eq!(json, r#"["cossim","cossim-simple","complete","single-branch","equal-weight"]"#);
    }
}
