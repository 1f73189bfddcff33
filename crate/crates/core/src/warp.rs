//! Homography + thin-plate-spline deformations, applied as
//! `p ↦ tps(H·p)`, with a Newton inverse for image resampling.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::linalg::{mat3_det, mat3_inverse, mat3_mul, solve, Mat3, IDENTITY3};

pub type Point = (f64, f64);

/// Homogeneous depth at or below which a point is treated as sent to infinity.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Homography {
    m: Mat3,
}

impl Homography {
    pub fn new(m: Mat3) -> Result<Self> {
        let det = mat3_det(&m);
        if !det.is_finite() || det.abs() <= 1e-8 {
            return Err(CoreError::Singular(format!("homography determinant {det:e}")));
        }
        let mut m = m;
        if m[2][2].abs() > 1e-12 {
            let s = m[2][2];
            m.iter_mut().flatten().for_each(|v| *v /= s);
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self { m: IDENTITY3 }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]],
        }
    }

    /// Exact homography taking four source points onto four targets.
    pub fn from_correspondences(src: &[Point; 4], dst: &[Point; 4]) -> Result<Self> {
        let mut a = Vec::with_capacity(64);
        let mut b = Vec::with_capacity(8);
        for (&(x, y), &(u, v)) in src.iter().zip(dst) {
            a.extend_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            b.push(u);
            a.extend_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b.push(v);
        }
        let h = solve(8, &a, 1, &b)?;
        Self::new([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.m
    }

    pub fn apply(&self, (x, y): Point) -> Result<Point> {
        let m = &self.m;
        let z = m[2][0] * x + m[2][1] * y + m[2][2];
        if z <= MIN_DEPTH {
            return Err(CoreError::MappedToInfinity { x, y });
        }
        Ok((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / z,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / z,
        ))
    }

    /// Mapped point and its 2×2 Jacobian `[[du/dx, du/dy], [dv/dx, dv/dy]]`.
    fn apply_with_jacobian(&self, (x, y): Point) -> Option<(Point, [[f64; 2]; 2])> {
        let m = &self.m;
        let z = m[2][0] * x + m[2][1] * y + m[2][2];
        if z <= MIN_DEPTH {
            return None;
        }
        let u = (m[0][0] * x + m[0][1] * y + m[0][2]) / z;
        let v = (m[1][0] * x + m[1][1] * y + m[1][2]) / z;
        let j = [
            [(m[0][0] - u * m[2][0]) / z, (m[0][1] - u * m[2][1]) / z],
            [(m[1][0] - v * m[2][0]) / z, (m[1][1] - v * m[2][1]) / z],
        ];
        Some(((u, v), j))
    }

    /// `self` followed by `next`, i.e. the matrix `next · self`.
    pub fn then(&self, next: &Homography) -> Result<Homography> {
        Homography::new(mat3_mul(&next.m, &self.m))
    }

    pub fn inverse(&self) -> Result<Homography> {
        Homography::new(mat3_inverse(&self.m)?)
    }

    pub fn is_identity(&self) -> bool {
        self.m == IDENTITY3
    }
}

/// Thin-plate spline kernel `U(r) = r² log r²`, written in terms of `s = r²`.
#[inline]
pub fn tps_kernel(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else {
        s * s.ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThinPlateSpline {
    control_points: Vec<Point>,
    targets: Vec<Point>,
    regularization: f64,
    weights: Vec<[f64; 2]>,
    /// Row `i` gives output coordinate `i` as `a0 + a1·x + a2·y`.
    affine: [[f64; 3]; 2],
}

impl ThinPlateSpline {
    pub fn identity() -> Self {
        Self {
            control_points: Vec::new(),
            targets: Vec::new(),
            regularization: 0.0,
            weights: Vec::new(),
            affine: [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn control_points(&self) -> &[Point] {
        &self.control_points
    }

    pub fn targets(&self) -> &[Point] {
        &self.targets
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    pub fn weights(&self) -> &[[f64; 2]] {
        &self.weights
    }

    pub fn affine(&self) -> &[[f64; 3]; 2] {
        &self.affine
    }

    pub fn is_identity(&self) -> bool {
        self.control_points.is_empty() && self.affine == Self::identity().affine
    }

    pub fn apply(&self, (x, y): Point) -> Point {
        let a = &self.affine;
        let mut u = a[0][0] + a[0][1] * x + a[0][2] * y;
        let mut v = a[1][0] + a[1][1] * x + a[1][2] * y;
        for (&(cx, cy), w) in self.control_points.iter().zip(&self.weights) {
            let k = tps_kernel((x - cx).powi(2) + (y - cy).powi(2));
            u += w[0] * k;
            v += w[1] * k;
        }
        (u, v)
    }

    fn apply_with_jacobian(&self, (x, y): Point) -> (Point, [[f64; 2]; 2]) {
        let a = &self.affine;
        let mut u = a[0][0] + a[0][1] * x + a[0][2] * y;
        let mut v = a[1][0] + a[1][1] * x + a[1][2] * y;
        let mut j = [[a[0][1], a[0][2]], [a[1][1], a[1][2]]];
        for (&(cx, cy), w) in self.control_points.iter().zip(&self.weights) {
            let (dx, dy) = (x - cx, y - cy);
            let s = dx * dx + dy * dy;
            if s <= 0.0 {
                continue;
            }
            let ln = s.ln();
            let k = s * ln;
            // dU/dx = 2·dx·(ln s + 1)
            let g = 2.0 * (ln + 1.0);
            u += w[0] * k;
            v += w[1] * k;
            j[0][0] += w[0] * g * dx;
            j[0][1] += w[0] * g * dy;
            j[1][0] += w[1] * g * dx;
            j[1][1] += w[1] * g * dy;
        }
        ((u, v), j)
    }
}

/// Fits the spline taking `src[i]` onto `dst[i]` by solving
/// `[K + λI, P; Pᵀ, 0] [w; a] = [dst; 0]`.
pub fn tps_fit(src: &[Point], dst: &[Point], regularization: f64) -> Result<ThinPlateSpline> {
    if src.len() != dst.len() {
        return Err(CoreError::invalid(format!(
            "{} source points but {} targets",
            src.len(),
            dst.len()
        )));
    }
    if !(regularization >= 0.0) {
        return Err(CoreError::invalid(format!("regularization {regularization}")));
    }
    let n = src.len();
    if n < 3 {
        return Err(CoreError::Singular(format!("{n} control points")));
    }
    let size = n + 3;
    let mut a = vec![0.0; size * size];
    let mut b = vec![0.0; size * 2];
    for i in 0..n {
        let (xi, yi) = src[i];
        for j in 0..n {
            let (xj, yj) = src[j];
            a[i * size + j] = tps_kernel((xi - xj).powi(2) + (yi - yj).powi(2));
        }
        a[i * size + i] += regularization;
        for (k, p) in [1.0, xi, yi].into_iter().enumerate() {
            a[i * size + n + k] = p;
            a[(n + k) * size + i] = p;
        }
        b[i * 2] = dst[i].0;
        b[i * 2 + 1] = dst[i].1;
    }
    let x = solve(size, &a, 2, &b)?;
    let weights = (0..n).map(|i| [x[i * 2], x[i * 2 + 1]]).collect();
    let affine = [
        [x[n * 2], x[(n + 1) * 2], x[(n + 2) * 2]],
        [x[n * 2 + 1], x[(n + 1) * 2 + 1], x[(n + 2) * 2 + 1]],
    ];
    Ok(ThinPlateSpline {
        control_points: src.to_vec(),
        targets: dst.to_vec(),
        regularization,
        weights,
        affine,
    })
}

/// Newton inverse settings used for resampling.
pub const INVERSE_MAX_ITERS: usize = 10;
pub const INVERSE_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct WarpSpec {
    homography: Homography,
    tps: ThinPlateSpline,
    h_inv: Homography,
}

impl WarpSpec {
    pub fn new(homography: Homography, tps: ThinPlateSpline) -> Result<Self> {
        let h_inv = homography.inverse()?;
        Ok(Self {
            homography,
            tps,
            h_inv,
        })
    }

    pub fn identity() -> Self {
        Self {
            homography: Homography::identity(),
            tps: ThinPlateSpline::identity(),
            h_inv: Homography::identity(),
        }
    }

    pub fn from_homography(h: Homography) -> Result<Self> {
        Self::new(h, ThinPlateSpline::identity())
    }

    pub fn homography(&self) -> &Homography {
        &self.homography
    }

    pub fn tps(&self) -> &ThinPlateSpline {
        &self.tps
    }

    pub fn is_identity(&self) -> bool {
        self.homography.is_identity() && self.tps.is_identity()
    }

    pub fn warp_point(&self, p: Point) -> Result<Point> {
        Ok(self.tps.apply(self.homography.apply(p)?))
    }

    fn forward_with_jacobian(&self, p: Point) -> Option<(Point, [[f64; 2]; 2])> {
        let (hp, jh) = self.homography.apply_with_jacobian(p)?;
        let (q, jt) = self.tps.apply_with_jacobian(hp);
        let mut j = [[0.0; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                j[r][c] = jt[r][0] * jh[0][c] + jt[r][1] * jh[1][c];
            }
        }
        Some((q, j))
    }

    /// Jacobian determinant of the forward map at `p`, if defined.
    pub fn jacobian_det(&self, p: Point) -> Option<f64> {
        self.forward_with_jacobian(p)
            .map(|(_, j)| j[0][0] * j[1][1] - j[0][1] * j[1][0])
    }

    /// Source point `p` with `warp_point(p) ≈ q`: Newton iterations seeded
    /// by the inverse homography. `None` when it does not converge.
    pub fn invert_point(&self, q: Point) -> Option<Point> {
        let mut p = self.h_inv.apply(q).ok()?;
        if self.tps.is_identity() {
            return Some(p);
        }
        for it in 0..=INVERSE_MAX_ITERS {
            let ((u, v), j) = self.forward_with_jacobian(p)?;
            let (rx, ry) = (u - q.0, v - q.1);
            if (rx * rx + ry * ry).sqrt() <= INVERSE_TOL {
                return Some(p);
            }
            if it == INVERSE_MAX_ITERS {
                break;
            }
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if !det.is_finite() || det.abs() < 1e-12 {
                return None;
            }
            let dx = (j[1][1] * rx - j[0][1] * ry) / det;
            let dy = (-j[1][0] * rx + j[0][0] * ry) / det;
            p = (p.0 - dx, p.1 - dy);
            if !(p.0.is_finite() && p.1.is_finite()) {
                return None;
            }
        }
        None
    }

    /// Source location for every pixel of a `width × height` output frame.
    pub fn inverse_map(&self, width: usize, height: usize) -> InverseMap {
        let rows: Vec<Vec<Option<Point>>> = (0..height)
            .into_par_iter()
            .map(|y| {
                (0..width)
                    .map(|x| self.invert_point((x as f64, y as f64)))
                    .collect()
            })
            .collect();
        InverseMap {
            width,
            height,
            sources: rows.into_iter().flatten().collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&WarpJson::from(self)).expect("plain numeric document")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: WarpJson = serde_json::from_str(text)?;
        doc.into_spec()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| CoreError::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::file(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct TpsJson {
    src: Vec<[f64; 2]>,
    dst: Vec<[f64; 2]>,
    reg: f64,
}

#[derive(Serialize, Deserialize)]
struct WarpJson {
    homography: [f64; 9],
    tps: TpsJson,
}

impl From<&WarpSpec> for WarpJson {
    fn from(w: &WarpSpec) -> Self {
        let m = w.homography.matrix();
        let pts = |v: &[Point]| v.iter().map(|&(x, y)| [x, y]).collect();
        WarpJson {
            homography: [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]],
            tps: TpsJson {
                src: pts(w.tps.control_points()),
                dst: pts(w.tps.targets()),
                reg: w.tps.regularization(),
            },
        }
    }
}

impl WarpJson {
    fn into_spec(self) -> Result<WarpSpec> {
        let h = self.homography;
        let homography = Homography::new([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], h[8]]])?;
        let pts = |v: Vec<[f64; 2]>| v.into_iter().map(|[x, y]| (x, y)).collect::<Vec<_>>();
        let tps = if self.tps.src.is_empty() && self.tps.dst.is_empty() {
            ThinPlateSpline::identity()
        } else {
            tps_fit(&pts(self.tps.src), &pts(self.tps.dst), self.tps.reg)?
        };
        WarpSpec::new(homography, tps)
    }
}

/// Per-pixel source coordinates of an output frame (`None` = no valid source).
#[derive(Clone, Debug)]
pub struct InverseMap {
    width: usize,
    height: usize,
    sources: Vec<Option<Point>>,
}

impl InverseMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn source(&self, x: usize, y: usize) -> Option<Point> {
        self.sources[y * self.width + x]
    }

    /// Resamples `img` (bilinear, zero outside the frame).
    pub fn resample(&self, img: &Image) -> (Image, ValidityMask) {
        let c = img.channels();
        let mut data = vec![0.0; self.width * self.height * c];
        let mut valid = vec![false; self.width * self.height];
        for (i, src) in self.sources.iter().enumerate() {
            if let Some((x, y)) = *src {
                valid[i] = img.sample_bilinear_into(x, y, &mut data[i * c..(i + 1) * c]);
            }
        }
        let out = Image::from_fn(self.width, self.height, c, |x, y, ch| data[(y * self.width + x) * c + ch]);
        (
            out,
            ValidityMask {
                width: self.width,
                height: self.height,
                valid,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    valid: Vec<bool>,
}

impl ValidityMask {
    pub fn all_valid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            valid: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.valid[y * self.width + x]
    }

    /// Validity of the pixel nearest to a subpixel location.
    pub fn is_valid_at(&self, (x, y): Point) -> bool {
        let (rx, ry) = (x.round(), y.round());
        rx >= 0.0 && ry >= 0.0 && self.is_valid(rx as usize, ry as usize)
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn to_image(&self) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| {
            if self.valid[y * self.width + x] {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn from_image(img: &Image) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            valid: img.data().iter().step_by(img.channels()).map(|&v| v >= 0.5).collect(),
        }
    }
}

/// Inverse-mapping resampling of `img` through `spec`; output has the input's size.
pub fn warp_image(spec: &WarpSpec, img: &Image) -> (Image, ValidityMask) {
    spec.inverse_map(img.width(), img.height()).resample(img)
}

/// Sampling ranges for [`random_warp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarpParams {
    /// Corner jitter as a fraction of the image side (uniform ±).
    pub corner_jitter: f64,
    /// Control grid is `tps_grid × tps_grid`.
    pub tps_grid: usize,
    /// Displacement standard deviation as a fraction of `min(W, H)`.
    pub tps_sigma: f64,
    pub tps_regularization: f64,
    pub max_retries: usize,
}

impl Default for WarpParams {
    fn default() -> Self {
        Self {
            corner_jitter: 0.10,
            tps_grid: 4,
            tps_sigma: 0.04,
            tps_regularization: 0.0,
            max_retries: 20,
        }
    }
}

impl WarpParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.corner_jitter)
            || !(0.0..0.5).contains(&self.tps_sigma)
            || self.tps_grid < 2
            || !(self.tps_regularization >= 0.0)
            || self.max_retries == 0
        {
            return Err(CoreError::invalid(format!("warp parameters {self:?}")));
        }
        Ok(())
    }
}

/// Random homography (jittered corners) followed by a TPS with Gaussian
/// displacements on a regular control grid. Deterministic given `seed`.
pub fn random_warp(seed: u64, width: usize, height: usize, params: &WarpParams) -> Result<WarpSpec> {
    params.validate()?;
    if width < 2 || height < 2 {
        return Err(CoreError::invalid(format!("image size {width}x{height}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    for _ in 0..params.max_retries {
        let homography = if params.corner_jitter == 0.0 {
            Homography::identity()
        } else {
            let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
            let jw = params.corner_jitter * width as f64;
            let jh = params.corner_jitter * height as f64;
            let moved = corners.map(|(x, y)| (x + rng.gen_range(-jw..=jw), y + rng.gen_range(-jh..=jh)));
            match Homography::from_correspondences(&corners, &moved) {
                Ok(hm) => hm,
                Err(_) => continue,
            }
        };
        let tps = if params.tps_sigma == 0.0 {
            ThinPlateSpline::identity()
        } else {
            let sigma = params.tps_sigma * width.min(height) as f64;
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            let g = params.tps_grid;
            let mut src = Vec::with_capacity(g * g);
            let mut dst = Vec::with_capacity(g * g);
            for j in 0..g {
                for i in 0..g {
                    let p = (w * i as f64 / (g - 1) as f64, h * j as f64 / (g - 1) as f64);
                    src.push(p);
                    dst.push((p.0 + normal.sample(&mut rng), p.1 + normal.sample(&mut rng)));
                }
            }
            match tps_fit(&src, &dst, params.tps_regularization) {
                Ok(t) => t,
                Err(_) => continue,
            }
        };
        let Ok(spec) = WarpSpec::new(homography, tps) else {
            continue;
        };
        if is_well_behaved(&spec, width, height) {
            return Ok(spec);
        }
    }
    Err(CoreError::DegenerateWarp(params.max_retries))
}

/// Orientation-preserving and finite over a grid covering the frame.
fn is_well_behaved(spec: &WarpSpec, width: usize, height: usize) -> bool {
    let step = (width.min(height) / 16).max(1);
    let xs = (0..width).step_by(step).chain(std::iter::once(width - 1));
    xs.flat_map(|x| {
        (0..height)
            .step_by(step)
            .chain(std::iter::once(height - 1))
            .map(move |y| (x as f64, y as f64))
    })
    .all(|p| matches!(spec.jacobian_det(p), Some(d) if d.is_finite() && d > 0.05))
}
