//! Handcrafted base detector (Harris) and descriptor (gradient-orientation
//! histograms), the mutual-nearest + ratio matcher, and the keypoint file
//! format.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::image::Image;

pub const HARRIS_KAPPA: f64 = 0.06;
pub const DESC_DIM: usize = 128;
pub const DEFAULT_RATIO: f32 = 0.8;

const PATCH: isize = 16;
const CELLS: usize = 4;
const BINS: usize = 8;
const CLIP: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, score: f64) -> Self {
        Self { x, y, score }
    }

    pub fn pos(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn pixel(&self) -> (usize, usize) {
        (self.x.round().max(0.0) as usize, self.y.round().max(0.0) as usize)
    }
}

/// Sorts by score descending, then row-major position.
pub fn sort_keypoints(kps: &mut [Keypoint]) {
    kps.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
}

/// Sobel gradients with replicate borders.
pub fn sobel(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width(), img.height());
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| img.get_clamped(x + dx, y + dy, 0);
            let i = y as usize * w + x as usize;
            gx[i] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            gy[i] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        }
    }
    (gx, gy)
}

/// Harris response `det(M) − κ·tr(M)²` with `M` summed over a 3×3 window.
pub fn harris_response(img: &Image) -> Result<Vec<f64>> {
    if img.channels() != 1 {
        return Err(CoreError::invalid("harris_response expects a single-channel image"));
    }
    let (w, h) = (img.width(), img.height());
    let (gx, gy) = sobel(img);
    let mut r = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            for dy in -1..=1 {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -1..=1 {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    let (a, b) = (gx[yy * w + xx], gy[yy * w + xx]);
                    sxx += a * a;
                    sxy += a * b;
                    syy += b * b;
                }
            }
            let tr = sxx + syy;
            r[y as usize * w + x as usize] = sxx * syy - sxy * sxy - HARRIS_KAPPA * tr * tr;
        }
    }
    Ok(r)
}

/// Positions that are strictly greater than every in-frame neighbour of the
/// `window × window` square around them.
pub(crate) fn strict_local_maxima(map: &[f64], w: usize, h: usize, window: usize) -> Vec<(usize, usize)> {
    let r = (window / 2) as isize;
    let mut out = Vec::new();
    for y in 0..h as isize {
        'px: for x in 0..w as isize {
            let v = map[y as usize * w + x as usize];
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x + dx, y + dy);
                    if (dx, dy) == (0, 0) || xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    if map[yy as usize * w + xx as usize] >= v {
                        continue 'px;
                    }
                }
            }
            out.push((x as usize, y as usize));
        }
    }
    out
}

/// Top-`k` Harris corners: positive response, strict 3×3 maxima, sorted by
/// response (ties row-major).
pub fn detect_base(img: &Image, k: usize) -> Result<Vec<Keypoint>> {
    let gray = img.to_grayscale();
    let r = harris_response(&gray)?;
    let (w, h) = (gray.width(), gray.height());
    let mut kps: Vec<Keypoint> = strict_local_maxima(&r, w, h, 3)
        .into_iter()
        .filter_map(|(x, y)| {
            let s = r[y * w + x];
            (s > 0.0).then(|| Keypoint::new(x as f64, y as f64, s))
        })
        .collect();
    sort_keypoints(&mut kps);
    kps.truncate(k);
    Ok(kps)
}

/// Base detector budget for an image: `0.02 · H · W`.
pub fn base_budget(width: usize, height: usize) -> usize {
    budget_for(0.02, width, height)
}

pub fn budget_for(fraction: f64, width: usize, height: usize) -> usize {
    ((fraction * (width * height) as f64).round() as usize).max(1)
}

/// 128-d descriptor: unit L2 norm, or all zeros for a flat patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    values: Vec<f32>,
}

impl Descriptor {
    pub fn from_values(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn zero(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Gaussian-weighted gradient orientation histograms over a 16×16 patch
/// (4×4 cells × 8 bins), L2-normalized, clipped at 0.2 and renormalized.
pub fn describe(gray: &Image, kp: &Keypoint) -> Descriptor {
    let raw = orientation_histogram(gray, kp);
    Descriptor::from_values(normalize_descriptor(raw).into_iter().map(|v| v as f32).collect())
}

pub fn describe_all(img: &Image, kps: &[Keypoint]) -> Vec<Descriptor> {
    let gray = img.to_grayscale();
    kps.par_iter().map(|kp| describe(&gray, kp)).collect()
}

fn orientation_histogram(gray: &Image, kp: &Keypoint) -> Vec<f64> {
    let (cx, cy) = (kp.x.round() as isize, kp.y.round() as isize);
    let sigma = PATCH as f64 / 2.0;
    let bin_width = std::f64::consts::TAU / BINS as f64;
    let mut hist = vec![0.0; DESC_DIM];
    for py in 0..PATCH {
        for px in 0..PATCH {
            let (x, y) = (cx + px - PATCH / 2, cy + py - PATCH / 2);
            let gx = (gray.get_clamped(x + 1, y, 0) - gray.get_clamped(x - 1, y, 0)) / 2.0;
            let gy = (gray.get_clamped(x, y + 1, 0) - gray.get_clamped(x, y - 1, 0)) / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            // offsets from the patch center, which sits between pixels 7 and 8
            let (ox, oy) = (px as f64 - 7.5, py as f64 - 7.5);
            let weight = (-(ox * ox + oy * oy) / (2.0 * sigma * sigma)).exp();
            let theta = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
            let f = theta / bin_width;
            let b0 = f.floor() as usize % BINS;
            let frac = f - f.floor();
            let cell = (py as usize / CELLS) * CELLS + px as usize / CELLS;
            hist[cell * BINS + b0] += weight * mag * (1.0 - frac);
            hist[cell * BINS + (b0 + 1) % BINS] += weight * mag * frac;
        }
    }
    hist
}

fn normalize_descriptor(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return vec![0.0; v.len()];
    }
    v.iter_mut().for_each(|x| *x = (*x / norm).min(CLIP));
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Nearest neighbour of one descriptor in the other set, with test outcomes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchCandidate {
    pub a: usize,
    pub b: usize,
    pub distance: f32,
    /// `a` is also the nearest neighbour of `b`.
    pub mutual: bool,
    /// Ratio test passed on both sides.
    pub ratio_ok: bool,
}

impl MatchCandidate {
    pub fn accepted(&self) -> bool {
        self.mutual && self.ratio_ok
    }
}

/// Nearest-neighbour candidates for every non-zero descriptor of `A`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub candidates: Vec<MatchCandidate>,
}

impl MatchSet {
    pub fn accepted(&self) -> impl Iterator<Item = &MatchCandidate> + '_ {
        self.candidates.iter().filter(|c| c.accepted())
    }

    pub fn accepted_pairs(&self) -> Vec<(usize, usize)> {
        self.accepted().map(|c| (c.a, c.b)).collect()
    }

    pub fn num_accepted(&self) -> usize {
        self.accepted().count()
    }
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy)]
struct Nearest {
    idx: usize,
    d1: f32,
    d2: f32,
}

impl Nearest {
    fn empty() -> Self {
        Self {
            idx: usize::MAX,
            d1: f32::INFINITY,
            d2: f32::INFINITY,
        }
    }

    fn push(&mut self, idx: usize, d: f32) {
        if d < self.d1 {
            self.d2 = self.d1;
            self.d1 = d;
            self.idx = idx;
        } else if d < self.d2 {
            self.d2 = d;
        }
    }

    /// `d1 < ratio · d2` on squared distances.
    fn passes(&self, ratio: f32) -> bool {
        self.d1 < ratio * ratio * self.d2
    }
}

/// Exhaustive mutual-nearest-neighbour matching with the ratio test applied
/// on both sides. Zero descriptors never take part.
pub fn match_descriptors(desc_a: &[Descriptor], desc_b: &[Descriptor], ratio: f32) -> MatchSet {
    assert!(ratio > 0.0 && ratio <= 1.0, "ratio {ratio}");
    let valid_a: Vec<usize> = (0..desc_a.len()).filter(|&i| !desc_a[i].is_zero()).collect();
    let valid_b: Vec<usize> = (0..desc_b.len()).filter(|&j| !desc_b[j].is_zero()).collect();
    if valid_a.is_empty() || valid_b.is_empty() {
        return MatchSet::default();
    }
    let dist: Vec<Vec<f32>> = valid_a
        .par_iter()
        .map(|&i| {
            valid_b
                .iter()
                .map(|&j| sq_dist(desc_a[i].values(), desc_b[j].values()))
                .collect()
        })
        .collect();
    let mut nn_b = vec![Nearest::empty(); valid_b.len()];
    let mut nn_a = Vec::with_capacity(valid_a.len());
    for (ia, row) in dist.iter().enumerate() {
        let mut n = Nearest::empty();
        for (jb, &d) in row.iter().enumerate() {
            n.push(jb, d);
            nn_b[jb].push(ia, d);
        }
        nn_a.push(n);
    }
    let candidates = nn_a
        .iter()
        .enumerate()
        .map(|(ia, n)| {
            let back = &nn_b[n.idx];
            MatchCandidate {
                a: valid_a[ia],
                b: valid_b[n.idx],
                distance: n.d1.sqrt(),
                mutual: back.idx == ia,
                ratio_ok: n.passes(ratio) && back.passes(ratio),
            }
        })
        .collect();
    MatchSet { candidates }
}

// ----- keypoint file -----------------------------------------------------------

pub const FEATURE_MAGIC: &[u8; 4] = b"NKF1";

/// Little-endian: magic, `u32` count, `u32` dim, then per record
/// `x, y, score, values[dim]` as `f32`.
pub fn encode_features(kps: &[Keypoint], descs: Option<&[Descriptor]>) -> Result<Vec<u8>> {
    let dim = match descs {
        Some(d) => {
            if d.len() != kps.len() {
                return Err(CoreError::invalid(format!("{} keypoints but {} descriptors", kps.len(), d.len())));
            }
            d.first().map_or(DESC_DIM, |x| x.dim())
        }
        None => 0,
    };
    let mut out = Vec::with_capacity(12 + kps.len() * (3 + dim) * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(kps.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for (i, kp) in kps.iter().enumerate() {
        for v in [kp.x as f32, kp.y as f32, kp.score as f32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(d) = descs {
            if d[i].dim() != dim {
                return Err(CoreError::invalid("descriptors of mixed dimension"));
            }
            for v in d[i].values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<(Vec<Keypoint>, Vec<Descriptor>)> {
    let err = |offset: usize, msg: &str| CoreError::Decode {
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 12 {
        return Err(err(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(err(0, "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let (count, dim) = (u32_at(4), u32_at(8));
    let rec = (3 + dim) * 4;
    if bytes.len() != 12 + count * rec {
        return Err(err(bytes.len().min(12 + count * rec), "length does not match header"));
    }
    let f = |o: usize| f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let mut kps = Vec::with_capacity(count);
    let mut descs = Vec::new();
    for i in 0..count {
        let o = 12 + i * rec;
        kps.push(Keypoint::new(f(o) as f64, f(o + 4) as f64, f(o + 8) as f64));
        if dim > 0 {
            descs.push(Descriptor::from_values((0..dim).map(|k| f(o + 12 + 4 * k)).collect()));
        }
    }
    Ok((kps, descs))
}

pub fn write_features(path: impl AsRef<Path>, kps: &[Keypoint], descs: Option<&[Descriptor]>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(kps, descs)?).map_err(|e| CoreError::file(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<(Vec<Keypoint>, Vec<Descriptor>)> {
    let path = path.as_ref();
    decode_features(&fs::read(path).map_err(|e| CoreError::file(path, e))?)
}
