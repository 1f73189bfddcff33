use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use kpdet_core::detector::{DetectionConfig, Detector};
use kpdet_core::draw::{keypoint_overlay, GREEN};
use kpdet_core::features::{describe_all, write_features};
use kpdet_core::image::{read_image, write_image, write_pgm16};
use kpdet_nn::load_weights;
use serde::{Deserialize, Serialize};

use super::{create_dir, read_config, require_positive};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 1024)]
    pub top_k: usize,
    /// NMS window, edge ratio and score floor as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the score map as 16-bit PGM (`<out stem>.score.pgm`).
    #[arg(long)]
    pub score_map: bool,
    /// Also write the keypoints drawn on the image (`<out stem>.overlay.png`).
    #[arg(long)]
    pub overlay: bool,
    /// Keypoint file to write (NKF1).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectPlan {
    pub weights: PathBuf,
    pub image: PathBuf,
    pub detection: DetectionConfig,
    pub score_map: bool,
    pub overlay: bool,
}

impl DetectArgs {
    pub fn plan(&self) -> Result<DetectPlan> {
        require_positive("top-k", self.top_k)?;
        let mut detection: DetectionConfig = read_config(self.config.as_deref())?;
        detection.top_k = self.top_k;
        detection.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(DetectPlan {
            weights: self.weights.clone(),
            image: self.image.clone(),
            detection,
            score_map: self.score_map,
            overlay: self.overlay,
        })
    }
}

/// `dir/stem.suffix` next to the keypoint file.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

impl DetectPlan {
    pub fn execute(&self, out: &Path) -> Result<RunManifest> {
        let mut manifest = RunManifest::new("detect", self);
        let root = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        create_dir(root)?;
        manifest.add_input(&self.weights)?;
        manifest.add_input(&self.image)?;

        let model = load_weights::<f32>(&self.weights)?;
        let detector = Detector::new(model, self.detection.clone())?;
        let img = read_image(&self.image)?;
        let t = Instant::now();
        let (kps, map) = detector.detect_with_map(&img)?;
        let descs = describe_all(&img, &kps);
        manifest.time("detect", t);

        write_features(out, &kps, Some(&descs))?;
        manifest.add_output_file(root, out)?;
        if self.score_map {
            let path = sibling(out, "score.pgm");
            write_pgm16(&path, &map.to_image())?;
            manifest.add_output_file(root, &path)?;
        }
        if self.overlay {
            let path = sibling(out, "overlay.png");
            write_image(&path, &keypoint_overlay(&img, &kps, GREEN))?;
            manifest.add_output_file(root, &path)?;
        }
        manifest.save(&sibling(out, "manifest.json"))?;
        println!("{} keypoints", kps.len());
        Ok(manifest)
    }
}
