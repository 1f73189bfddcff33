//! Losses on the score map (cosine, masked L2, local peakiness), the balanced
//! sampling mask, and the Siamese training loop.

use std::path::PathBuf;

use kpdet_nn::{save_weights, Adam, AdamConfig, Graph, Mode, Scalar, Tensor, UNet, UNetConfig, Var};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::heatmap::{MatchingHeatmap, Pixel, TrainingSample};
use crate::image::Image;
use crate::rng::{stream_rng, substream};

/// Pixel mask holding every positive plus as many uniformly drawn negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMask {
    width: usize,
    height: usize,
    mask: Vec<bool>,
    positives: usize,
}

impl SampleMask {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.mask
    }

    /// Number of positives `n`; the mask holds `2n` pixels.
    pub fn n(&self) -> usize {
        self.positives
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn from_bits(width: usize, height: usize, mask: Vec<bool>, positives: usize) -> Result<Self> {
        if mask.len() != width * height {
            return Err(CoreError::invalid("mask size"));
        }
        Ok(Self {
            width,
            height,
            mask,
            positives,
        })
    }
}

/// Positives plus `n` negatives drawn without replacement from the remaining
/// pixels. Deterministic given `seed`.
pub fn sample_mask(positives: &[Pixel], width: usize, height: usize, seed: u64) -> Result<SampleMask> {
    let total = width * height;
    let mut mask = vec![false; total];
    for &(x, y) in positives {
        if x >= width || y >= height {
            return Err(CoreError::invalid(format!("positive ({x}, {y}) outside {width}x{height}")));
        }
        mask[y * width + x] = true;
    }
    let n = mask.iter().filter(|&&b| b).count();
    if n == 0 || n > total - n {
        return Err(CoreError::invalid(format!("{n} positives in {total} pixels")));
    }
    let negatives: Vec<usize> = (0..total).filter(|&i| !mask[i]).collect();
    let mut rng = stream_rng(seed, "negatives", 0);
    for i in sample_indices(&mut rng, negatives.len(), n) {
        mask[negatives[i]] = true;
    }
    Ok(SampleMask {
        width,
        height,
        mask,
        positives: n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cossim: f64,
    pub simple: f64,
    pub peak: f64,
    /// Side of the non-overlapping patches of the peak term.
    pub patch: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cossim: 3.0,
            simple: 1.0,
            peak: 0.3,
            patch: 5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.cossim >= 0.0 && self.simple >= 0.0 && self.peak >= 0.0) || self.patch < 2 {
            return Err(CoreError::invalid(format!("loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Scalar loss values of one score map.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub cossim: f64,
    pub simple: f64,
    pub peak: f64,
    /// False when no patch qualified and the peak term was inert.
    pub peak_active: bool,
    pub total: f64,
}

impl LossTerms {
    fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.cossim += s * o.cossim;
        self.simple += s * o.simple;
        self.peak += s * o.peak;
        self.total += s * o.total;
        self.peak_active |= o.peak_active;
    }
}

/// Loss nodes built on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cossim: Var,
    pub simple: Var,
    pub peak: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossTerms {
        let v = |x: Var| g.value(x).item().as_f64();
        LossTerms {
            cossim: v(self.cossim),
            simple: v(self.simple),
            peak: self.peak.map_or(0.0, v),
            peak_active: self.peak.is_some(),
            total: v(self.total),
        }
    }
}

fn plane<T: Scalar>(g: &mut Graph<T>, w: usize, h: usize, values: impl Iterator<Item = f64>) -> Var {
    let data = values.map(T::from_f64).collect();
    g.input(Tensor::new(vec![1, 1, h, w], data).expect("plane size"))
}

fn check_shape<T: Scalar>(g: &Graph<T>, s: Var, w: usize, h: usize) -> Result<()> {
    let shape = g.value(s).shape();
    if shape != [1, 1, h, w] {
        return Err(CoreError::invalid(format!("score map {shape:?} vs target {w}x{h}")));
    }
    Ok(())
}

/// `S′ = S × F`.
pub fn masked_scores<T: Scalar>(g: &mut Graph<T>, s: Var, f: &SampleMask) -> Result<Var> {
    check_shape(g, s, f.width, f.height)?;
    let fv = plane(g, f.width, f.height, f.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    Ok(g.mul(s, fv)?)
}

/// `1 − cos(S·F, M)`; a zero `S·F` counts as orthogonal (loss 1).
pub fn loss_cossim<T: Scalar>(g: &mut Graph<T>, s: Var, m: &MatchingHeatmap, f: &SampleMask) -> Result<Var> {
    let sm = masked_scores(g, s, f)?;
    cossim_of_masked(g, sm, m)
}

fn cossim_of_masked<T: Scalar>(g: &mut Graph<T>, sm: Var, m: &MatchingHeatmap) -> Result<Var> {
    let mv = plane(g, m.width(), m.height(), m.values().iter().copied());
    let c = g.cosine(sm, mv)?;
    Ok(g.affine(c, -T::one(), T::one()))
}

/// `(1 / 2n) Σ (S·F − M)²` over all pixels.
pub fn loss_simple<T: Scalar>(g: &mut Graph<T>, s: Var, m: &MatchingHeatmap, f: &SampleMask) -> Result<Var> {
    let sm = masked_scores(g, s, f)?;
    simple_of_masked(g, sm, m, f.n())
}

fn simple_of_masked<T: Scalar>(g: &mut Graph<T>, sm: Var, m: &MatchingHeatmap, n: usize) -> Result<Var> {
    let mv = plane(g, m.width(), m.height(), m.values().iter().copied());
    let d = g.sub(sm, mv)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.affine(s, T::from_f64(0.5 / n as f64), T::zero()))
}

/// Grid of non-overlapping `n × n` patches (anchored at the origin, ragged
/// border dropped) whose heatmap patch has a nonzero pixel.
pub fn qualifying_patches(m: &MatchingHeatmap, n: usize) -> Vec<bool> {
    let (gw, gh) = (m.width() / n, m.height() / n);
    let mut q = vec![false; gw * gh];
    for py in 0..gh {
        for px in 0..gw {
            q[py * gw + px] = (0..n).any(|dy| (0..n).any(|dx| m.get(px * n + dx, py * n + dy) != 0.0));
        }
    }
    q
}

/// `1 − mean over qualifying patches of (max S − mean S)`; `None` when no
/// patch qualifies.
pub fn loss_peak<T: Scalar>(g: &mut Graph<T>, s: Var, m: &MatchingHeatmap, n: usize) -> Result<Option<Var>> {
    check_shape(g, s, m.width(), m.height())?;
    if n < 2 {
        return Err(CoreError::invalid(format!("peak patch size {n}")));
    }
    let q = qualifying_patches(m, n);
    let count = q.iter().filter(|&&b| b).count();
    if count == 0 {
        return Ok(None);
    }
    let mx = g.max_pool(s, n)?;
    let av = g.avg_pool(s, n)?;
    let diff = g.sub(mx, av)?;
    let qv = plane(g, m.width() / n, m.height() / n, q.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    let sel = g.mul(diff, qv)?;
    let sum = g.sum(sel);
    Ok(Some(g.affine(sum, T::from_f64(-1.0 / count as f64), T::one())))
}

/// `λ1·L_cossim + λ2·L_simple + λ3·L_peak` for one score map of shape (1, 1, H, W).
pub fn loss_total<T: Scalar>(
    g: &mut Graph<T>,
    s: Var,
    m: &MatchingHeatmap,
    f: &SampleMask,
    w: &LossWeights,
) -> Result<LossVars> {
    let sm = masked_scores(g, s, f)?;
    let cossim = cossim_of_masked(g, sm, m)?;
    let simple = simple_of_masked(g, sm, m, f.n())?;
    let peak = loss_peak(g, s, m, w.patch)?;
    let a = g.affine(cossim, T::from_f64(w.cossim), T::zero());
    let b = g.affine(simple, T::from_f64(w.simple), T::zero());
    let mut total = g.add(a, b)?;
    if let Some(p) = peak {
        let c = g.affine(p, T::from_f64(w.peak), T::zero());
        total = g.add(total, c)?;
    }
    Ok(LossVars {
        cossim,
        simple,
        peak,
        total,
    })
}

/// Planar RGB tensor data for an image (grayscale is replicated).
pub fn image_planes<T: Scalar>(img: &Image) -> Vec<T> {
    img.to_rgb().to_planar().into_iter().map(T::from_f64).collect()
}

pub fn images_to_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| CoreError::invalid("empty image batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(CoreError::invalid("images of different sizes in one batch"));
        }
        data.extend(image_planes::<T>(img));
    }
    Ok(Tensor::new(vec![images.len(), 3, h, w], data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Images per optimizer step; each training sample contributes three.
    pub batch_images: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub unet: UNetConfig,
    /// Forward `A`, `B` and `B′` together; otherwise only the anchor branch is trained.
    pub siamese: bool,
    pub min_positives: usize,
    pub corpus: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 7,
            batch_images: 12,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            unet: UNetConfig::default(),
            siamese: true,
            min_positives: 32,
            corpus: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_images == 0 {
            return Err(CoreError::invalid("epochs and batch size must be positive"));
        }
        if self.unet.in_channels != 3 {
            return Err(CoreError::invalid("the detector consumes RGB input"));
        }
        Ok(())
    }

    pub fn branches(&self) -> usize {
        if self.siamese {
            3
        } else {
            1
        }
    }

    /// Training samples per optimizer step.
    pub fn samples_per_batch(&self) -> usize {
        (self.batch_images / self.branches()).max(1)
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossTerms,
}

pub const LOG_HEADER: &str = "step,lr,L_cossim,L_simple,L_peak,total";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.lr, self.loss.cossim, self.loss.simple, self.loss.peak, self.loss.total
        )
    }
}

fn mask_seed(root: u64, sample_id: usize, epoch: usize, branch: usize) -> u64 {
    substream(substream(root, "mask", sample_id as u64), "epoch", (epoch * 3 + branch) as u64)
}

/// Forward/backward of one sample; gradients (scaled by `scale`) are added
/// to the model's accumulators. Returns the per-sample loss (mean over branches).
pub fn accumulate_sample(
    model: &mut UNet<f32>,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    mask_seeds: &[u64],
    scale: f64,
) -> Result<LossTerms> {
    let branches = cfg.branches();
    let images = &sample.images()[..branches];
    let (w, h) = (sample.anchor.width(), sample.anchor.height());
    let mut g = Graph::<f32>::new();
    let x = g.input(images_to_tensor(images)?);
    let out = model.forward(&mut g, x, Mode::Train)?;
    let mut terms = LossTerms::default();
    let mut total = None;
    for i in 0..branches {
        let s = g.select(out, i)?;
        let f = sample_mask(sample.positives()[i], w, h, mask_seeds[i])?;
        let lv = loss_total(&mut g, s, sample.heatmaps()[i], &f, &cfg.weights)?;
        terms.add_scaled(&lv.values(&g), 1.0 / branches as f64);
        total = Some(match total {
            None => lv.total,
            Some(t) => g.add(t, lv.total)?,
        });
    }
    let total = total.expect("at least one branch");
    if !terms.total.is_finite() {
        return Err(CoreError::Numeric(format!("non-finite loss {terms:?}")));
    }
    let objective = g.affine(total, (scale / branches as f64) as f32, 0.0);
    g.backward_into(objective, model.params_mut())?;
    Ok(terms)
}

fn grads_finite(model: &UNet<f32>) -> bool {
    model.params().iter().all(|p| p.grad.iter().all(|v| v.is_finite()))
}

/// One Siamese update on a single sample.
pub fn siamese_step(
    model: &mut UNet<f32>,
    opt: &mut Adam<f32>,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LossTerms> {
    model.params_mut().zero_grad();
    let seeds: Vec<u64> = (0..3).map(|b| substream(seed, "mask", b)).collect();
    let terms = accumulate_sample(model, sample, cfg, &seeds, 1.0)?;
    if !grads_finite(model) {
        model.params_mut().zero_grad();
        return Err(CoreError::Numeric("non-finite gradient".into()));
    }
    opt.step(model.params_mut());
    Ok(terms)
}

/// Full training run. Samples below the positives minimum are skipped; order
/// is reshuffled every epoch and negatives are redrawn per (sample, epoch).
pub fn train(
    cfg: &TrainConfig,
    corpus: &[TrainingSample],
    mut on_step: impl FnMut(&StepLog),
) -> Result<(UNet<f32>, Vec<StepLog>)> {
    cfg.validate()?;
    let admitted: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus[i].is_admissible(cfg.min_positives))
        .collect();
    if admitted.is_empty() {
        return Err(CoreError::invalid(format!(
            "no sample has {} positives in every heatmap",
            cfg.min_positives
        )));
    }
    let mut model = UNet::<f32>::new(cfg.unet.clone(), substream(cfg.seed, "init", 0))?;
    let mut opt = Adam::new(cfg.adam.clone());
    let per_batch = cfg.samples_per_batch();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order = admitted.clone();
        order.shuffle(&mut stream_rng(cfg.seed, "order", epoch as u64));
        for chunk in order.chunks(per_batch) {
            model.params_mut().zero_grad();
            let mut terms = LossTerms::default();
            let scale = 1.0 / chunk.len() as f64;
            for &id in chunk {
                let seeds: Vec<u64> = (0..3).map(|b| mask_seed(cfg.seed, id, epoch, b)).collect();
                let t = accumulate_sample(&mut model, &corpus[id], cfg, &seeds, scale)?;
                terms.add_scaled(&t, scale);
            }
            if !grads_finite(&model) {
                return Err(CoreError::Numeric(format!("non-finite gradient at step {}", opt.steps())));
            }
            let row = StepLog {
                step: opt.steps(),
                epoch,
                lr: opt.current_lr(),
                loss: terms,
            };
            opt.step(model.params_mut());
            on_step(&row);
            log.push(row);
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::file(dir, e))?;
            save_weights(&model, dir.join(format!("epoch_{:03}.nkw", epoch + 1)))?;
        }
    }
    Ok((model, log))
}
