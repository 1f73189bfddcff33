//! Matching benchmark: warped image pairs with known ground truth, possible /
//! correct match counting, RR, MS, MMA and detector comparison tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::detector::{DetectionConfig, Detector};
use crate::draw::{Canvas, GREEN, RED};
use crate::error::{CoreError, Result};
use crate::features::{describe_all, detect_base, match_descriptors, sort_keypoints, Descriptor, Keypoint};
use crate::image::{read_image, write_image, Image};
use crate::rng::substream;
use crate::synth::synth_image;
use crate::warp::{random_warp, ValidityMask, WarpParams, WarpSpec};

pub const DEFAULT_TOLERANCE: f64 = 3.0;
pub const DEFAULT_BUDGET: usize = 1024;

/// Image `A`, its warp `B` and the ground truth mapping `A → B`.
#[derive(Clone, Debug)]
pub struct BenchmarkPair {
    pub image_a: Image,
    pub image_b: Image,
    pub warp: WarpSpec,
    /// Pixels of `B` whose source lies inside `A`.
    pub mask_b: ValidityMask,
}

impl BenchmarkPair {
    /// Renders `B` by warping `image_a`.
    pub fn from_warp(image_a: Image, warp: WarpSpec) -> Self {
        let map = warp.inverse_map(image_a.width(), image_a.height());
        let (image_b, mask_b) = map.resample(&image_a);
        Self {
            image_a,
            image_b,
            warp,
            mask_b,
        }
    }

    pub fn identity(image: Image) -> Self {
        Self::from_warp(image, WarpSpec::identity())
    }

    /// Whether the correspondent of `A`-frame point `p` lies in `B`'s valid region.
    pub fn a_in_shared_view(&self, p: (f64, f64)) -> bool {
        self.warp
            .warp_point(p)
            .map(|q| self.mask_b.is_valid_at(q))
            .unwrap_or(false)
    }

    pub fn b_in_shared_view(&self, p: (f64, f64)) -> bool {
        self.mask_b.is_valid_at(p)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| CoreError::file(dir, e))?;
        write_image(dir.join("a.png"), &self.image_a)?;
        write_image(dir.join("b.png"), &self.image_b)?;
        self.warp.save(dir.join("warp.json"))
    }

    /// Loads `a.png`, `b.png` and `warp.json`; the mask is recomputed from the warp.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let image_a = read_image(dir.join("a.png"))?;
        let image_b = read_image(dir.join("b.png"))?;
        let warp = WarpSpec::load(dir.join("warp.json"))?;
        let mask_b = warp.inverse_map(image_b.width(), image_b.height()).resample(&image_a).1;
        Ok(Self {
            image_a,
            image_b,
            warp,
            mask_b,
        })
    }
}

/// Pair `index` of the benchmark rooted at `seed`.
pub fn benchmark_pair(seed: u64, index: usize, width: usize, height: usize, params: &WarpParams) -> Result<BenchmarkPair> {
    let anchor = synth_image(substream(seed, "bench_image", index as u64), width, height);
    let warp = random_warp(substream(seed, "bench_warp", index as u64), width, height, params)?;
    Ok(BenchmarkPair::from_warp(anchor, warp))
}

pub fn generate_pairs(seed: u64, count: usize, width: usize, height: usize, params: &WarpParams) -> Result<Vec<BenchmarkPair>> {
    (0..count)
        .into_par_iter()
        .map(|i| benchmark_pair(seed, i, width, height, params))
        .collect()
}

/// Writes `out/pairs/NNNN/{a.png, b.png, warp.json}` and returns the pair dirs.
pub fn generate_benchmark(
    out: impl AsRef<Path>,
    seed: u64,
    count: usize,
    (width, height): (usize, usize),
    params: &WarpParams,
) -> Result<Vec<PathBuf>> {
    params.validate()?;
    let root = out.as_ref().join("pairs");
    (0..count)
        .into_par_iter()
        .map(|i| {
            let dir = root.join(format!("{i:04}"));
            benchmark_pair(seed, i, width, height, params)?.save(&dir)?;
            Ok(dir)
        })
        .collect()
}

/// Pair dirs of a benchmark in name order.
pub fn list_benchmark(dataset: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = dataset.as_ref().join("pairs");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| CoreError::file(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_benchmark(dataset: impl AsRef<Path>) -> Result<Vec<BenchmarkPair>> {
    list_benchmark(dataset)?.par_iter().map(BenchmarkPair::load).collect()
}

/// Maximum one-to-one assignment between `kps_a` and `kps_b` where a pair is
/// admissible when the warped `A` keypoint lies within `tol` of the `B`
/// keypoint. Returned as `(index_a, index_b)` sorted by `index_a`.
pub fn possible_assignment(kps_a: &[Keypoint], kps_b: &[Keypoint], warp: &WarpSpec, tol: f64) -> Vec<(usize, usize)> {
    let adj: Vec<Vec<usize>> = kps_a
        .iter()
        .map(|a| {
            let Ok((x, y)) = warp.warp_point(a.pos()) else {
                return Vec::new();
            };
            let mut near: Vec<(f64, usize)> = kps_b
                .iter()
                .enumerate()
                .map(|(j, b)| ((x - b.x).hypot(y - b.y), j))
                .filter(|&(d, _)| d <= tol)
                .collect();
            near.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
            near.into_iter().map(|(_, j)| j).collect()
        })
        .collect();

    // augmenting paths (Kuhn); each A keypoint is tried once in index order
    let mut owner: Vec<Option<usize>> = vec![None; kps_b.len()];
    for i in 0..kps_a.len() {
        if adj[i].is_empty() {
            continue;
        }
        let mut seen = vec![false; kps_b.len()];
        augment(i, &adj, &mut owner, &mut seen);
    }
    let mut pairs: Vec<(usize, usize)> = owner
        .iter()
        .enumerate()
        .filter_map(|(j, o)| o.map(|i| (i, j)))
        .collect();
    pairs.sort_unstable();
    pairs
}

fn augment(i: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &j in &adj[i] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        if owner[j].map_or(true, |k| augment(k, adj, owner, seen)) {
            owner[j] = Some(i);
            return true;
        }
    }
    false
}

/// Number of keypoints that can be put in one-to-one ground-truth
/// correspondence within `tol` pixels.
pub fn possible_matches(kps_a: &[Keypoint], kps_b: &[Keypoint], warp: &WarpSpec, tol: f64) -> usize {
    possible_assignment(kps_a, kps_b, warp, tol).len()
}

/// Everything measured on one evaluated pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchReport {
    pub keypoints_a: usize,
    pub keypoints_b: usize,
    pub shared_a: usize,
    pub shared_b: usize,
    /// Accepted matcher output as `(index_a, index_b)`.
    pub matches: Vec<(usize, usize)>,
    /// Reprojection error per accepted match (infinite when the warp is undefined).
    pub errors: Vec<f64>,
    /// Whether each accepted match is correct.
    pub correct: Vec<bool>,
    pub possible_matches: usize,
    pub correct_matches: usize,
    pub total_matches: usize,
    pub inliers: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MatchReport {
    pub fn min_shared(&self) -> usize {
        self.shared_a.min(self.shared_b)
    }

    /// Repeatability: possible matches over the smaller shared-view count.
    pub fn rr(&self) -> f64 {
        ratio(self.possible_matches, self.min_shared())
    }

    /// Matching score: correct matches over the smaller shared-view count.
    pub fn ms(&self) -> f64 {
        ratio(self.correct_matches, self.min_shared())
    }

    /// Correct over possible matches.
    pub fn mma_paper(&self) -> f64 {
        ratio(self.correct_matches, self.possible_matches)
    }

    /// Correct over all accepted matches.
    pub fn mma_std(&self) -> f64 {
        ratio(self.correct_matches, self.total_matches)
    }
}

/// Matches the descriptors and scores the result against the pair's ground
/// truth. A match is correct when both keypoints are in the shared view and
/// the reprojection error is at most `tol`.
pub fn evaluate_pair(
    (kps_a, desc_a): (&[Keypoint], &[Descriptor]),
    (kps_b, desc_b): (&[Keypoint], &[Descriptor]),
    pair: &BenchmarkPair,
    tol: f64,
    ratio_test: f32,
) -> MatchReport {
    let shared_a: Vec<bool> = kps_a.iter().map(|k| pair.a_in_shared_view(k.pos())).collect();
    let shared_b: Vec<bool> = kps_b.iter().map(|k| pair.b_in_shared_view(k.pos())).collect();
    let sub = |kps: &[Keypoint], flags: &[bool]| -> Vec<Keypoint> {
        kps.iter().zip(flags).filter(|(_, &s)| s).map(|(k, _)| *k).collect()
    };
    let possible = possible_matches(&sub(kps_a, &shared_a), &sub(kps_b, &shared_b), &pair.warp, tol);

    let matches = match_descriptors(desc_a, desc_b, ratio_test).accepted_pairs();
    let errors: Vec<f64> = matches
        .iter()
        .map(|&(i, j)| match pair.warp.warp_point(kps_a[i].pos()) {
            Ok((x, y)) => (x - kps_b[j].x).hypot(y - kps_b[j].y),
            Err(_) => f64::INFINITY,
        })
        .collect();
    let correct: Vec<bool> = matches
        .iter()
        .zip(&errors)
        .map(|(&(i, j), &e)| shared_a[i] && shared_b[j] && e <= tol)
        .collect();
    let n_correct = correct.iter().filter(|&&c| c).count();
    MatchReport {
        keypoints_a: kps_a.len(),
        keypoints_b: kps_b.len(),
        shared_a: shared_a.iter().filter(|&&s| s).count(),
        shared_b: shared_b.iter().filter(|&&s| s).count(),
        total_matches: matches.len(),
        matches,
        errors,
        correct,
        possible_matches: possible,
        correct_matches: n_correct,
        inliers: n_correct,
    }
}

/// Something that produces keypoints for both images of a pair.
pub trait PairDetector: Sync {
    fn name(&self) -> &str;

    fn detect(&self, img: &Image, budget: usize) -> Result<Vec<Keypoint>>;

    fn detect_pair(&self, pair: &BenchmarkPair, budget: usize) -> Result<(Vec<Keypoint>, Vec<Keypoint>)> {
        Ok((self.detect(&pair.image_a, budget)?, self.detect(&pair.image_b, budget)?))
    }
}

/// Harris corners, the handcrafted baseline.
#[derive(Clone, Debug, Default)]
pub struct HarrisDetector;

impl PairDetector for HarrisDetector {
    fn name(&self) -> &str {
        "harris"
    }

    fn detect(&self, img: &Image, budget: usize) -> Result<Vec<Keypoint>> {
        detect_base(img, budget)
    }
}

/// Trained network; `budget` overrides the configured top-k.
#[derive(Clone, Debug)]
pub struct LearnedDetector {
    pub name: String,
    pub detector: Detector,
}

impl LearnedDetector {
    pub fn new(name: impl Into<String>, detector: Detector) -> Self {
        Self {
            name: name.into(),
            detector,
        }
    }
}

impl PairDetector for LearnedDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn detect(&self, img: &Image, budget: usize) -> Result<Vec<Keypoint>> {
        let cfg = DetectionConfig {
            top_k: budget,
            ..self.detector.config.clone()
        };
        crate::detector::detect(&self.detector.model, img, &cfg)
    }
}

/// Uses the ground truth: Harris corners of `A` in the shared view and their
/// exact (rounded) correspondents in `B`. Its repeatability is 1.
#[derive(Clone, Debug, Default)]
pub struct PlantedDetector;

impl PairDetector for PlantedDetector {
    fn name(&self) -> &str {
        "planted"
    }

    fn detect(&self, img: &Image, budget: usize) -> Result<Vec<Keypoint>> {
        detect_base(img, budget)
    }

    fn detect_pair(&self, pair: &BenchmarkPair, budget: usize) -> Result<(Vec<Keypoint>, Vec<Keypoint>)> {
        let mut kps_a = Vec::new();
        let mut kps_b = Vec::new();
        let mut taken = std::collections::HashSet::new();
        for k in detect_base(&pair.image_a, usize::MAX)? {
            if kps_a.len() == budget {
                break;
            }
            let Ok((x, y)) = pair.warp.warp_point(k.pos()) else { continue };
            let (bx, by) = (x.round(), y.round());
            if !pair.mask_b.is_valid_at((bx, by)) || !taken.insert((bx as i64, by as i64)) {
                continue;
            }
            kps_a.push(k);
            kps_b.push(Keypoint::new(bx, by, k.score));
        }
        sort_keypoints(&mut kps_b);
        Ok((kps_a, kps_b))
    }
}

/// Detects, describes and evaluates one pair.
pub fn evaluate_detector_on_pair(
    det: &dyn PairDetector,
    pair: &BenchmarkPair,
    budget: usize,
    tol: f64,
    ratio_test: f32,
) -> Result<(MatchReport, Vec<Keypoint>, Vec<Keypoint>)> {
    let (kps_a, kps_b) = det.detect_pair(pair, budget)?;
    let desc_a = describe_all(&pair.image_a, &kps_a);
    let desc_b = describe_all(&pair.image_b, &kps_b);
    let report = evaluate_pair((&kps_a, &desc_a), (&kps_b, &desc_b), pair, tol, ratio_test);
    Ok((report, kps_a, kps_b))
}

/// Mean metrics of one detector over one dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub detector: String,
    pub dataset: String,
    pub pairs: usize,
    pub keypoints: f64,
    pub rr: f64,
    pub ms: f64,
    pub mma_paper: f64,
    pub mma_std: f64,
    pub inliers: f64,
    pub total_matches: f64,
}

impl BenchmarkRow {
    pub fn from_reports(detector: &str, dataset: &str, reports: &[MatchReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: &dyn Fn(&MatchReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            detector: detector.to_string(),
            dataset: dataset.to_string(),
            pairs: reports.len(),
            keypoints: mean(&|r| (r.keypoints_a + r.keypoints_b) as f64 / 2.0),
            rr: mean(&|r| r.rr()),
            ms: mean(&|r| r.ms()),
            mma_paper: mean(&|r| r.mma_paper()),
            mma_std: mean(&|r| r.mma_std()),
            inliers: mean(&|r| r.inliers as f64),
            total_matches: mean(&|r| r.total_matches as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkTable {
    pub rows: Vec<BenchmarkRow>,
}

pub const TABLE_HEADER: [&str; 10] = [
    "detector",
    "dataset",
    "pairs",
    "keypoints",
    "rr",
    "ms",
    "mma_paper",
    "mma_std",
    "inliers",
    "matches",
];

impl BenchmarkTable {
    fn cells(row: &BenchmarkRow) -> [String; 10] {
        [
            row.detector.clone(),
            row.dataset.clone(),
            row.pairs.to_string(),
            format!("{:.1}", row.keypoints),
            format!("{:.4}", row.rr),
            format!("{:.4}", row.ms),
            format!("{:.4}", row.mma_paper),
            format!("{:.4}", row.mma_std),
            format!("{:.2}", row.inliers),
            format!("{:.2}", row.total_matches),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut out = TABLE_HEADER.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&Self::cells(row).join(","));
            out.push('\n');
        }
        out
    }

    /// Space-aligned text table.
    pub fn to_text(&self) -> String {
        let body: Vec<[String; 10]> = self.rows.iter().map(Self::cells).collect();
        let mut widths: Vec<usize> = TABLE_HEADER.iter().map(|h| h.len()).collect();
        for cells in &body {
            for (w, c) in widths.iter_mut().zip(cells) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let header: Vec<String> = TABLE_HEADER.iter().map(|s| s.to_string()).collect();
        for cells in std::iter::once(&header[..]).chain(body.iter().map(|c| &c[..])) {
            let line: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// Per-pair results of one detector, in pair order.
#[derive(Clone, Debug)]
pub struct DetectorRun {
    pub detector: String,
    pub reports: Vec<MatchReport>,
}

#[derive(Clone, Debug)]
pub struct BenchmarkSettings {
    pub budget: usize,
    pub tolerance: f64,
    pub ratio: f32,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            tolerance: DEFAULT_TOLERANCE,
            ratio: crate::features::DEFAULT_RATIO,
        }
    }
}

/// Evaluates every detector on every pair (pairs in parallel).
pub fn run_benchmark(
    detectors: &[&dyn PairDetector],
    pairs: &[BenchmarkPair],
    dataset: &str,
    settings: &BenchmarkSettings,
) -> Result<(BenchmarkTable, Vec<DetectorRun>)> {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for det in detectors {
        let reports = pairs
            .par_iter()
            .map(|p| {
                evaluate_detector_on_pair(*det, p, settings.budget, settings.tolerance, settings.ratio)
                    .map(|r| r.0)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(BenchmarkRow::from_reports(det.name(), dataset, &reports));
        runs.push(DetectorRun {
            detector: det.name().to_string(),
            reports,
        });
    }
    Ok((BenchmarkTable { rows }, runs))
}

/// Side-by-side pair with correct matches in green and incorrect ones in red.
pub fn match_overlay(pair: &BenchmarkPair, kps_a: &[Keypoint], kps_b: &[Keypoint], report: &MatchReport) -> Image {
    let mut canvas = Canvas::side_by_side(&pair.image_a, &pair.image_b);
    let off = pair.image_a.width() as f64;
    for (&(i, j), &ok) in report.matches.iter().zip(&report.correct) {
        let color = if ok { GREEN } else { RED };
        canvas.line(kps_a[i].pos(), (kps_b[j].x + off, kps_b[j].y), color);
    }
    canvas.into_image()
}
