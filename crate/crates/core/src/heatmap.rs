//! Matching heatmaps: where the base descriptor was correctly matched across
//! an anchor `A` and two deformed copies `B = g(A)`, `B′ = g′(A)`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::features::{budget_for, describe_all, detect_base, match_descriptors, Keypoint, MatchSet};
use crate::image::{clamp01, decode_pgm, gaussian_blur, read_image, write_image, write_pgm16, Image, Kernel2D};
use crate::rng::substream;
use crate::synth::synth_image;
use crate::warp::{random_warp, InverseMap, WarpParams, WarpSpec};

pub type Pixel = (usize, usize);

pub const MH_SIGMA: f64 = 0.8;
pub const MH_KERNEL: usize = 3;

/// Per-pixel match confidence in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingHeatmap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl MatchingHeatmap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(CoreError::invalid(format!(
                "{width}x{height} heatmap with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoreError::invalid("heatmap value outside [0, 1]"));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn nonzero(&self) -> Vec<Pixel> {
        (0..self.values.len())
            .filter(|&i| self.values[i] != 0.0)
            .map(|i| (i % self.width, i / self.width))
            .collect()
    }

    pub fn to_image(&self) -> Image {
        Image::new(self.width, self.height, 1, self.values.clone()).expect("values are in [0, 1]")
    }

    pub fn from_image(img: &Image) -> Self {
        let g = img.to_grayscale();
        Self {
            width: g.width(),
            height: g.height(),
            values: g.data().to_vec(),
        }
    }

    fn same_size(&self, other: &Self) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(CoreError::invalid(format!(
                "heatmaps of size {}x{} and {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_size(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| clamp01(f(a, b)))
                .collect(),
        })
    }
}

/// A descriptor match that passed the tests and agrees with the known warp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectMatch {
    pub index_a: usize,
    pub index_b: usize,
    pub pos_a: Pixel,
    pub pos_b: Pixel,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrectMatchSet {
    pub matches: Vec<CorrectMatch>,
}

impl CorrectMatchSet {
    pub fn positions_a(&self) -> Vec<Pixel> {
        self.matches.iter().map(|m| m.pos_a).collect()
    }

    pub fn positions_b(&self) -> Vec<Pixel> {
        self.matches.iter().map(|m| m.pos_b).collect()
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// Keeps accepted matches whose `B` keypoint lies within `tol` pixels of the
/// warped `A` keypoint.
pub fn correct_matches(
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    matches: &MatchSet,
    warp: &WarpSpec,
    tol: f64,
) -> CorrectMatchSet {
    assert!(tol > 0.0, "tolerance {tol}");
    let matches = matches
        .accepted()
        .filter_map(|m| {
            let (a, b) = (&kps_a[m.a], &kps_b[m.b]);
            let (x, y) = warp.warp_point(a.pos()).ok()?;
            ((x - b.x).hypot(y - b.y) <= tol).then_some(CorrectMatch {
                index_a: m.a,
                index_b: m.b,
                pos_a: a.pixel(),
                pos_b: b.pixel(),
            })
        })
        .collect();
    CorrectMatchSet { matches }
}

/// Zero map with 1.0 stamped at every position (duplicates saturate).
pub fn pairwise_mh(positions: &[Pixel], width: usize, height: usize) -> MatchingHeatmap {
    let mut mh = MatchingHeatmap::zeros(width, height);
    for &(x, y) in positions {
        if x < width && y < height {
            mh.values[y * width + x] = 1.0;
        }
    }
    mh
}

/// `M_a = (M_a1 + M_a2) / 2`.
pub fn combine_anchor(m_a1: &MatchingHeatmap, m_a2: &MatchingHeatmap) -> Result<MatchingHeatmap> {
    m_a1.zip_with(m_a2, |a, b| (a + b) / 2.0)
}

/// Resamples a heatmap into the warped frame (bilinear, clamped).
pub fn warp_heatmap(mh: &MatchingHeatmap, map: &InverseMap) -> MatchingHeatmap {
    MatchingHeatmap::from_image(&map.resample(&mh.to_image()).0)
}

/// `M_b = (g(M_a) + M_b1) / 2`.
pub fn combine_warped(m_a: &MatchingHeatmap, m_b1: &MatchingHeatmap, warp: &WarpSpec) -> Result<MatchingHeatmap> {
    combine_warped_with_map(m_a, m_b1, &warp.inverse_map(m_b1.width, m_b1.height))
}

pub fn combine_warped_with_map(
    m_a: &MatchingHeatmap,
    m_b1: &MatchingHeatmap,
    map: &InverseMap,
) -> Result<MatchingHeatmap> {
    warp_heatmap(m_a, map).zip_with(m_b1, |a, b| (a + b) / 2.0)
}

/// 3×3 Gaussian smoothing (σ = 0.8), clamped to `[0, 1]`.
pub fn finalize_mh(mh: &MatchingHeatmap) -> MatchingHeatmap {
    let k = Kernel2D::gaussian(MH_KERNEL, MH_SIGMA).expect("valid kernel");
    MatchingHeatmap::from_image(&gaussian_blur(&mh.to_image(), &k).expect("single channel"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapConfig {
    pub warp: WarpParams,
    /// Base keypoints per image as a fraction of `H·W`.
    pub budget_fraction: f64,
    pub ratio: f32,
    pub tolerance: f64,
    /// Combine with `max` instead of averaging: every peak weighs 1.0.
    pub equal_weights: bool,
    /// Minimum positives per heatmap for a sample to enter a batch.
    pub min_positives: usize,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            warp: WarpParams::default(),
            budget_fraction: 0.02,
            ratio: crate::features::DEFAULT_RATIO,
            tolerance: 3.0,
            equal_weights: false,
            min_positives: 32,
        }
    }
}

impl HeatmapConfig {
    pub fn budget(&self, width: usize, height: usize) -> usize {
        budget_for(self.budget_fraction, width, height)
    }
}

/// Anchor plus two deformed views with their heatmaps and positive pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub anchor: Image,
    pub b: Image,
    pub b2: Image,
    pub g: WarpSpec,
    pub g2: WarpSpec,
    pub m_a: MatchingHeatmap,
    pub m_b: MatchingHeatmap,
    pub m_b2: MatchingHeatmap,
    pub positives_a: Vec<Pixel>,
    pub positives_b: Vec<Pixel>,
    pub positives_b2: Vec<Pixel>,
}

impl TrainingSample {
    pub fn images(&self) -> [&Image; 3] {
        [&self.anchor, &self.b, &self.b2]
    }

    pub fn heatmaps(&self) -> [&MatchingHeatmap; 3] {
        [&self.m_a, &self.m_b, &self.m_b2]
    }

    pub fn positives(&self) -> [&[Pixel]; 3] {
        [&self.positives_a, &self.positives_b, &self.positives_b2]
    }

    pub fn min_positives(&self) -> usize {
        self.positives().iter().map(|p| p.len()).min().unwrap_or(0)
    }

    pub fn is_admissible(&self, min_positives: usize) -> bool {
        self.min_positives() >= min_positives
    }

    /// Writes `a.png b.png b2.png g.json g2.json m_a.pgm m_b.pgm m_b2.pgm positives.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| CoreError::file(dir, e))?;
        write_image(dir.join("a.png"), &self.anchor)?;
        write_image(dir.join("b.png"), &self.b)?;
        write_image(dir.join("b2.png"), &self.b2)?;
        self.g.save(dir.join("g.json"))?;
        self.g2.save(dir.join("g2.json"))?;
        write_pgm16(dir.join("m_a.pgm"), &self.m_a.to_image())?;
        write_pgm16(dir.join("m_b.pgm"), &self.m_b.to_image())?;
        write_pgm16(dir.join("m_b2.pgm"), &self.m_b2.to_image())?;
        let pos = PositivesJson {
            a: self.positives_a.iter().map(|&(x, y)| [x, y]).collect(),
            b: self.positives_b.iter().map(|&(x, y)| [x, y]).collect(),
            b2: self.positives_b2.iter().map(|&(x, y)| [x, y]).collect(),
        };
        let path = dir.join("positives.json");
        fs::write(&path, serde_json::to_string(&pos)?).map_err(|e| CoreError::file(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let heat = |name: &str| -> Result<MatchingHeatmap> {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| CoreError::file(&path, e))?;
            Ok(MatchingHeatmap::from_image(&decode_pgm(&bytes)?))
        };
        let path = dir.join("positives.json");
        let text = fs::read_to_string(&path).map_err(|e| CoreError::file(&path, e))?;
        let pos: PositivesJson = serde_json::from_str(&text)?;
        let px = |v: Vec<[usize; 2]>| v.into_iter().map(|[x, y]| (x, y)).collect();
        Ok(Self {
            anchor: read_image(dir.join("a.png"))?,
            b: read_image(dir.join("b.png"))?,
            b2: read_image(dir.join("b2.png"))?,
            g: WarpSpec::load(dir.join("g.json"))?,
            g2: WarpSpec::load(dir.join("g2.json"))?,
            m_a: heat("m_a.pgm")?,
            m_b: heat("m_b.pgm")?,
            m_b2: heat("m_b2.pgm")?,
            positives_a: px(pos.a),
            positives_b: px(pos.b),
            positives_b2: px(pos.b2),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PositivesJson {
    a: Vec<[usize; 2]>,
    b: Vec<[usize; 2]>,
    b2: Vec<[usize; 2]>,
}

/// Intermediate products of [`build_training_sample`], exposed for inspection.
#[derive(Clone, Debug)]
pub struct SampleTrace {
    pub kps: [Vec<Keypoint>; 3],
    pub matches_ab: MatchSet,
    pub matches_ab2: MatchSet,
    pub correct_ab: CorrectMatchSet,
    pub correct_ab2: CorrectMatchSet,
}

/// Sorted, de-duplicated pixel set.
fn pixel_set(p: impl IntoIterator<Item = Pixel>) -> Vec<Pixel> {
    let set: BTreeSet<(usize, usize)> = p.into_iter().map(|(x, y)| (y, x)).collect();
    set.into_iter().map(|(y, x)| (x, y)).collect()
}

/// Match centers of the anchor carried into a warped frame, plus that
/// frame's own centers: the nonzero pixels of the unsmoothed combined map.
fn warped_positives(anchor_pos: &[Pixel], own: &[Pixel], warp: &WarpSpec, width: usize, height: usize) -> Vec<Pixel> {
    let carried = anchor_pos.iter().filter_map(|&(x, y)| {
        let (u, v) = warp.warp_point((x as f64, y as f64)).ok()?;
        let (u, v) = (u.round(), v.round());
        (u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64).then_some((u as usize, v as usize))
    });
    pixel_set(carried.chain(own.iter().copied()))
}

/// Full ground-truth pipeline for one anchor: warps, base detection,
/// description, matching, correctness filtering, pairwise maps, smoothing and
/// weighted combination.
pub fn build_training_sample(anchor: &Image, seed: u64, cfg: &HeatmapConfig) -> Result<TrainingSample> {
    build_training_sample_traced(anchor, seed, cfg).map(|(s, _)| s)
}

pub fn build_training_sample_traced(
    anchor: &Image,
    seed: u64,
    cfg: &HeatmapConfig,
) -> Result<(TrainingSample, SampleTrace)> {
    let (w, h) = (anchor.width(), anchor.height());
    if w < 32 || h < 32 {
        return Err(CoreError::invalid(format!("anchor {w}x{h} is smaller than 32x32")));
    }
    let g = random_warp(substream(seed, "warp", 0), w, h, &cfg.warp)?;
    let g2 = random_warp(substream(seed, "warp", 1), w, h, &cfg.warp)?;
    let map_b = g.inverse_map(w, h);
    let map_b2 = g2.inverse_map(w, h);
    let b = map_b.resample(anchor).0;
    let b2 = map_b2.resample(anchor).0;

    let k = cfg.budget(w, h);
    let kps = [detect_base(anchor, k)?, detect_base(&b, k)?, detect_base(&b2, k)?];
    let desc_a = describe_all(anchor, &kps[0]);
    let desc_b = describe_all(&b, &kps[1]);
    let desc_b2 = describe_all(&b2, &kps[2]);
    let matches_ab = match_descriptors(&desc_a, &desc_b, cfg.ratio);
    let matches_ab2 = match_descriptors(&desc_a, &desc_b2, cfg.ratio);
    let correct_ab = correct_matches(&kps[0], &kps[1], &matches_ab, &g, cfg.tolerance);
    let correct_ab2 = correct_matches(&kps[0], &kps[2], &matches_ab2, &g2, cfg.tolerance);

    let m_a1 = finalize_mh(&pairwise_mh(&correct_ab.positions_a(), w, h));
    let m_a2 = finalize_mh(&pairwise_mh(&correct_ab2.positions_a(), w, h));
    let m_b1 = finalize_mh(&pairwise_mh(&correct_ab.positions_b(), w, h));
    let m_b2 = finalize_mh(&pairwise_mh(&correct_ab2.positions_b(), w, h));

    let (m_a, m_b, m_b2) = if cfg.equal_weights {
        let m_a = m_a1.zip_with(&m_a2, f64::max)?;
        let m_b = warp_heatmap(&m_a, &map_b).zip_with(&m_b1, f64::max)?;
        let m_b2 = warp_heatmap(&m_a, &map_b2).zip_with(&m_b2, f64::max)?;
        (m_a, m_b, m_b2)
    } else {
        let m_a = combine_anchor(&m_a1, &m_a2)?;
        let m_b = combine_warped_with_map(&m_a, &m_b1, &map_b)?;
        let m_b2 = combine_warped_with_map(&m_a, &m_b2, &map_b2)?;
        (m_a, m_b, m_b2)
    };

    let positives_a = pixel_set(correct_ab.positions_a().into_iter().chain(correct_ab2.positions_a()));
    let positives_b = warped_positives(&positives_a, &correct_ab.positions_b(), &g, w, h);
    let positives_b2 = warped_positives(&positives_a, &correct_ab2.positions_b(), &g2, w, h);

    let sample = TrainingSample {
        anchor: anchor.clone(),
        b,
        b2,
        g,
        g2,
        m_a,
        m_b,
        m_b2,
        positives_a,
        positives_b,
        positives_b2,
    };
    let trace = SampleTrace {
        kps,
        matches_ab,
        matches_ab2,
        correct_ab,
        correct_ab2,
    };
    Ok((sample, trace))
}

/// Training sample `index` of the corpus rooted at `seed`.
pub fn corpus_sample(seed: u64, index: usize, width: usize, height: usize, cfg: &HeatmapConfig) -> Result<TrainingSample> {
    let anchor = synth_image(substream(seed, "corpus_image", index as u64), width, height);
    build_training_sample(&anchor, substream(seed, "corpus_sample", index as u64), cfg)
}

pub fn build_corpus(seed: u64, count: usize, width: usize, height: usize, cfg: &HeatmapConfig) -> Result<Vec<TrainingSample>> {
    (0..count)
        .into_par_iter()
        .map(|i| corpus_sample(seed, i, width, height, cfg))
        .collect()
}

/// Writes `out/samples/NNNN/` for every sample and returns the sample dirs.
pub fn save_corpus(out: impl AsRef<Path>, samples: &[TrainingSample]) -> Result<Vec<PathBuf>> {
    let root = out.as_ref().join("samples");
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let dir = root.join(format!("{i:04}"));
            s.save(&dir)?;
            Ok(dir)
        })
        .collect()
}

/// Loads every sample dir under `corpus/samples` in name order.
pub fn load_corpus(corpus: impl AsRef<Path>) -> Result<Vec<TrainingSample>> {
    let root = corpus.as_ref().join("samples");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| CoreError::file(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.par_iter().map(TrainingSample::load).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::Homography;

    fn one_hot(w: usize, h: usize, x: usize, y: usize) -> MatchingHeatmap {
        pairwise_mh(&[(x, y)], w, h)
    }

    #[test]
    fn stamping() {
        assert!(pairwise_mh(&[], 8, 8).values().iter().all(|&v| v == 0.0));
        let m = one_hot(8, 8, 2, 3);
        assert_eq!(m.values().iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(m.get(2, 3), 1.0);
        assert_eq!(pairwise_mh(&[(2, 3), (2, 3)], 8, 8), m);
    }

    #[test]
    fn anchor_combination() {
        let both = combine_anchor(&one_hot(8, 8, 1, 1), &one_hot(8, 8, 1, 1)).unwrap();
        assert_eq!(both.get(1, 1), 1.0);
        let one = combine_anchor(&one_hot(8, 8, 1, 1), &MatchingHeatmap::zeros(8, 8)).unwrap();
        assert_eq!(one.get(1, 1), 0.5);
        let none = combine_anchor(&MatchingHeatmap::zeros(8, 8), &MatchingHeatmap::zeros(8, 8)).unwrap();
        assert!(none.values().iter().all(|&v| v == 0.0));
        assert!(combine_anchor(&MatchingHeatmap::zeros(8, 8), &MatchingHeatmap::zeros(4, 8)).is_err());
    }

    #[test]
    fn warped_combination_weights() {
        let id = WarpSpec::identity();
        let m = one_hot(8, 8, 4, 4);
        assert_eq!(combine_warped(&m, &m, &id).unwrap().get(4, 4), 1.0);
        // present only through the other pair: M_a = 0.5 there, M_b1 = 0
        let shift = WarpSpec::from_homography(Homography::translation(1.0, 2.0)).unwrap();
        let m_a = combine_anchor(&one_hot(8, 8, 2, 3), &MatchingHeatmap::zeros(8, 8)).unwrap();
        let mb = combine_warped(&m_a, &MatchingHeatmap::zeros(8, 8), &shift).unwrap();
        assert_eq!(mb.get(3, 5), 0.25);
        assert_eq!(mb.values().iter().filter(|&&v| v != 0.0).count(), 1);
        // zero anchor map halves the pairwise map
        let m_b1 = finalize_mh(&one_hot(8, 8, 5, 5));
        let half = combine_warped(&MatchingHeatmap::zeros(8, 8), &m_b1, &shift).unwrap();
        for (a, b) in half.values().iter().zip(m_b1.values()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_ordering() {
        // B-frame positions under identity: p1 correct in both pairs, p2 only in A↔B, p3 only in A↔B′
        let id = WarpSpec::identity();
        let (p1, p2, p3) = ((5, 5), (15, 5), (5, 15));
        let m_a1 = finalize_mh(&pairwise_mh(&[p1, p2], 24, 24));
        let m_a2 = finalize_mh(&pairwise_mh(&[p1, p3], 24, 24));
        let m_b1 = finalize_mh(&pairwise_mh(&[p1, p2], 24, 24));
        let m_a = combine_anchor(&m_a1, &m_a2).unwrap();
        let m_b = combine_warped(&m_a, &m_b1, &id).unwrap();
        let (v1, v2, v3) = (m_b.get(5, 5), m_b.get(15, 5), m_b.get(5, 15));
        assert!(v1 > v2 && v2 > v3 && v3 > 0.0, "{v1} {v2} {v3}");
    }

    #[test]
    fn smoothing() {
        let z = finalize_mh(&MatchingHeatmap::zeros(6, 6));
        assert!(z.values().iter().all(|&v| v == 0.0));
        let s = finalize_mh(&one_hot(7, 7, 3, 3));
        let k = Kernel2D::gaussian(3, 0.8).unwrap();
        assert!((s.get(3, 3) - k.at(0, 0)).abs() < 1e-15);
        assert!(s.get(3, 3) > s.get(2, 3) && s.get(2, 3) > s.get(2, 2));
        assert_eq!(s.get(0, 0), 0.0);
    }

    #[test]
    fn correct_match_threshold() {
        use crate::features::{MatchCandidate, MatchSet};
        let kps_a = vec![Keypoint::new(10.0, 10.0, 1.0), Keypoint::new(20.0, 20.0, 1.0)];
        let kps_b = vec![Keypoint::new(10.0, 10.0, 1.0), Keypoint::new(25.0, 20.0, 1.0)];
        let ms = MatchSet {
            candidates: (0..2)
                .map(|i| MatchCandidate {
                    a: i,
                    b: i,
                    distance: 0.0,
                    mutual: true,
                    ratio_ok: true,
                })
                .collect(),
        };
        let c = correct_matches(&kps_a, &kps_b, &ms, &WarpSpec::identity(), 3.0);
        assert_eq!(c.positions_a(), vec![(10, 10)]);
    }
}
