//! Score map → keypoints: non-maximum suppression, Hessian edge elimination,
//! score floor and top-k.

use kpdet_nn::{UNet, Scalar};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::features::{sort_keypoints, Keypoint};
use crate::image::Image;
use crate::training::images_to_tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub nms_window: usize,
    pub edge_ratio: f64,
    pub score_floor: f64,
    pub top_k: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            nms_window: 5,
            edge_ratio: 10.0,
            score_floor: 0.2,
            top_k: 1024,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nms_window < 3 || self.nms_window % 2 == 0 {
            return Err(CoreError::invalid(format!("NMS window {}", self.nms_window)));
        }
        if !(self.edge_ratio > 0.0) || !(0.0..1.0).contains(&self.score_floor) {
            return Err(CoreError::invalid(format!("detection config {self:?}")));
        }
        Ok(())
    }

    /// Largest accepted `tr² / det` of the score-map Hessian: `(r + 1)² / r`.
    pub fn edge_threshold(&self) -> f64 {
        (self.edge_ratio + 1.0).powi(2) / self.edge_ratio
    }
}

/// Dense per-pixel detection scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(CoreError::invalid("score map size"));
        }
        Ok(Self { width, height, values })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        Self {
            width,
            height,
            values: (0..width * height).map(|i| f(i % width, i / width)).collect(),
        }
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

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc)
    }

    /// Copy with every pixel outside `keep` set to zero.
    pub fn keep_only(&self, keep: &[Keypoint]) -> ScoreMap {
        let mut values = vec![0.0; self.values.len()];
        for k in keep {
            let (x, y) = k.pixel();
            values[y * self.width + x] = self.get(x, y);
        }
        ScoreMap {
            width: self.width,
            height: self.height,
            values,
        }
    }

    pub fn to_image(&self) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y))
    }

    /// 2×2 Hessian `(dxx, dyy, dxy)` by central differences.
    pub fn hessian(&self, x: usize, y: usize) -> (f64, f64, f64) {
        let (x, y) = (x as isize, y as isize);
        let v = |dx: isize, dy: isize| self.get_clamped(x + dx, y + dy);
        let dxx = v(1, 0) - 2.0 * v(0, 0) + v(-1, 0);
        let dyy = v(0, 1) - 2.0 * v(0, 0) + v(0, -1);
        let dxy = (v(1, 1) - v(1, -1) - v(-1, 1) + v(-1, -1)) / 4.0;
        (dxx, dyy, dxy)
    }
}

/// Keeps positive pixels that dominate their `window × window` neighbourhood:
/// every other pixel in the window is smaller, or equal and later in
/// row-major order. Output is row-major.
pub fn nms(map: &ScoreMap, window: usize) -> Vec<Keypoint> {
    assert!(window % 2 == 1, "NMS window must be odd");
    let r = (window / 2) as isize;
    let (w, h) = (map.width as isize, map.height as isize);
    let mut out = Vec::new();
    for y in 0..h {
        'px: for x in 0..w {
            let v = map.get(x as usize, y as usize);
            if !(v > 0.0) {
                continue;
            }
            for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                    if (xx, yy) == (x, y) {
                        continue;
                    }
                    let u = map.get(xx as usize, yy as usize);
                    let earlier = (yy, xx) < (y, x);
                    if u > v || (u == v && earlier) {
                        continue 'px;
                    }
                }
            }
            out.push(Keypoint::new(x as f64, y as f64, v));
        }
    }
    out
}

/// Drops keypoints whose score-map Hessian is not definite or is too
/// elongated (`tr² / det ≥ (r + 1)² / r`).
pub fn edge_filter(map: &ScoreMap, kps: &[Keypoint], r: f64) -> Vec<Keypoint> {
    assert!(r > 0.0, "edge ratio {r}");
    let limit = (r + 1.0).powi(2) / r;
    kps.iter()
        .copied()
        .filter(|k| {
            let (x, y) = k.pixel();
            let (dxx, dyy, dxy) = map.hessian(x, y);
            let det = dxx * dyy - dxy * dxy;
            let tr = dxx + dyy;
            det > 0.0 && tr * tr / det < limit
        })
        .collect()
}

/// NMS → edge elimination → score floor → sort → top-k on a score map.
pub fn keypoints_from_scores(map: &ScoreMap, cfg: &DetectionConfig) -> Vec<Keypoint> {
    let peaks = nms(map, cfg.nms_window);
    let mut kps: Vec<Keypoint> = edge_filter(map, &peaks, cfg.edge_ratio)
        .into_iter()
        .filter(|k| k.score >= cfg.score_floor)
        .collect();
    sort_keypoints(&mut kps);
    kps.truncate(cfg.top_k);
    kps
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Reflect-pads the bottom/right edges so both sides are multiples of `stride`.
pub fn pad_to_multiple(img: &Image, stride: usize) -> Image {
    let w = img.width().div_ceil(stride) * stride;
    let h = img.height().div_ceil(stride) * stride;
    if (w, h) == (img.width(), img.height()) {
        return img.clone();
    }
    Image::from_fn(w, h, img.channels(), |x, y, c| {
        img.get(reflect(x as isize, img.width()), reflect(y as isize, img.height()), c)
    })
}

/// Eval-mode score map of `img`, cropped back to the image size.
pub fn score_map<T: Scalar>(model: &UNet<T>, img: &Image) -> Result<ScoreMap> {
    let padded = pad_to_multiple(img, model.config().stride());
    let out = model.predict(images_to_tensor::<T>(&[&padded])?)?;
    let pw = padded.width();
    let data = out.data();
    Ok(ScoreMap::from_fn(img.width(), img.height(), |x, y| data[y * pw + x].as_f64()))
}

/// Learned detector: network plus post-processing settings.
#[derive(Clone, Debug)]
pub struct Detector {
    pub model: UNet<f32>,
    pub config: DetectionConfig,
}

impl Detector {
    pub fn new(model: UNet<f32>, config: DetectionConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { model, config })
    }

    pub fn detect(&self, img: &Image) -> Result<Vec<Keypoint>> {
        Ok(self.detect_with_map(img)?.0)
    }

    pub fn detect_with_map(&self, img: &Image) -> Result<(Vec<Keypoint>, ScoreMap)> {
        let map = score_map(&self.model, img)?;
        Ok((keypoints_from_scores(&map, &self.config), map))
    }
}

/// [`Detector::detect`] as a free function.
pub fn detect(model: &UNet<f32>, img: &Image, cfg: &DetectionConfig) -> Result<Vec<Keypoint>> {
    cfg.validate()?;
    Ok(keypoints_from_scores(&score_map(model, img)?, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use kpdet_nn::UNetConfig;

    fn gaussian_peaks(w: usize, h: usize, peaks: &[(f64, f64, f64)]) -> ScoreMap {
        ScoreMap::from_fn(w, h, |x, y| {
            peaks
                .iter()
                .map(|&(px, py, a)| a * (-((x as f64 - px).powi(2) + (y as f64 - py).powi(2)) / 4.0).exp())
                .sum()
        })
    }

    #[test]
    fn window_dominance() {
        let map = ScoreMap::from_fn(12, 12, |x, y| match (x, y) {
            (5, 5) => 0.9,
            (6, 6) => 0.8,
            _ => 0.0,
        });
        let k = nms(&map, 5);
        assert_eq!(k.len(), 1);
        assert_eq!(k[0].pos(), (5.0, 5.0));
    }

    #[test]
    fn constant_map_keeps_first_pixel() {
        let map = ScoreMap::from_fn(9, 7, |_, _| 0.5);
        let k = nms(&map, 5);
        assert_eq!(k.len(), 1);
        assert_eq!(k[0].pos(), (0.0, 0.0));
    }

    #[test]
    fn edge_ratio_threshold() {
        assert!((DetectionConfig::default().edge_threshold() - 12.1).abs() < 1e-12);
        let iso = gaussian_peaks(15, 15, &[(7.0, 7.0, 0.9)]);
        let k = vec![Keypoint::new(7.0, 7.0, 0.9)];
        let (dxx, dyy, dxy) = iso.hessian(7, 7);
        assert!(((dxx + dyy).powi(2) / (dxx * dyy - dxy * dxy) - 4.0).abs() < 1e-9);
        assert_eq!(edge_filter(&iso, &k, 10.0).len(), 1);
        let ridge = ScoreMap::from_fn(15, 15, |x, _| (-((x as f64 - 7.0).powi(2)) / 4.0).exp());
        assert!(edge_filter(&ridge, &k, 10.0).is_empty());
    }

    #[test]
    fn floor_and_top_k() {
        let map = gaussian_peaks(40, 20, &[(6.0, 10.0, 0.9), (20.0, 10.0, 0.5), (33.0, 10.0, 0.1)]);
        let cfg = DetectionConfig::default();
        let k = keypoints_from_scores(&map, &cfg);
        assert_eq!(k.len(), 2);
        assert_eq!(k[0].pos(), (6.0, 10.0));
        assert_eq!(k[1].pos(), (20.0, 10.0));
        let one = keypoints_from_scores(&map, &DetectionConfig { top_k: 1, ..cfg });
        assert_eq!(one.len(), 1);
        assert!((one[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn reflect_padding() {
        let img = Image::from_fn(5, 3, 1, |x, y, _| (x + 5 * y) as f64 / 20.0);
        let p = pad_to_multiple(&img, 4);
        assert_eq!((p.width(), p.height()), (8, 4));
        assert_eq!(p.get(5, 0, 0), img.get(3, 0, 0));
        assert_eq!(p.get(7, 3, 0), img.get(1, 1, 0));
    }

    #[test]
    fn fresh_model_detects_nothing() {
        let cfg = UNetConfig {
            in_channels: 3,
            widths: vec![4, 8],
            bottleneck: 8,
        };
        let model = UNet::<f32>::new(cfg, 1).unwrap();
        let img = Image::from_fn(30, 21, 3, |x, y, c| ((x * 3 + y * 7 + c) % 13) as f64 / 12.0);
        let map = score_map(&model, &img).unwrap();
        assert!(map.values().iter().all(|&v| v == 0.5));
        // NMS keeps the first pixel of the plateau; the flat Hessian then rejects it
        assert_eq!(nms(&map, 5).len(), 1);
        assert!(detect(&model, &img, &DetectionConfig::default()).unwrap().is_empty());
    }
}
