//! U-Net backbone: encoder levels of double (conv 3×3, batch norm, ReLU) blocks
//! with 2×2 max pooling, a bottleneck, decoder levels that upsample (nearest
//! 2× then conv 3×3), concatenate the skip connection and apply another double
//! block, and a 1×1 convolution head with sigmoid output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channel width of each encoder/decoder level, shallowest first.
    pub widths: Vec<usize>,
    pub bottleneck: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64, 128],
            bottleneck: 256,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Spatial dimensions must be divisible by this.
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; the forward pass is a pure function of weights and input.
    Eval,
}

#[derive(Clone, Debug)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: Option<ParamId>,
    pad: usize,
}

#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: ConvLayer,
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Clone, Debug)]
struct DoubleConv {
    first: ConvBnRelu,
    second: ConvBnRelu,
}

#[derive(Clone, Debug)]
struct UpLevel {
    up: ConvLayer,
    block: DoubleConv,
}

#[derive(Clone, Debug)]
pub struct UNet<T> {
    config: UNetConfig,
    params: ParamStore<T>,
    running: Vec<RunningStats<T>>,
    encoder: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    /// Indexed by level, shallowest first.
    decoder: Vec<UpLevel>,
    head: ConvLayer,
}

struct Builder<'a, T> {
    params: &'a mut ParamStore<T>,
    running: &'a mut Vec<RunningStats<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> ConvLayer {
        let fan_in = (cin * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let data = (0..cout * cin * k * k)
            .map(|_| T::from_f64(self.rng.gen_range(-bound..bound)))
            .collect();
        let weight = self.params.add(
            format!("{name}.weight"),
            Tensor::new(vec![cout, cin, k, k], data).expect("conv shape"),
        );
        let bias = bias.then(|| self.params.add(format!("{name}.bias"), Tensor::zeros(vec![cout])));
        ConvLayer {
            weight,
            bias,
            pad: k / 2,
        }
    }

    fn conv_bn_relu(&mut self, name: &str, idx: usize, cin: usize, cout: usize) -> ConvBnRelu {
        let conv = self.conv(&format!("{name}.conv{idx}"), cin, cout, 3, false);
        let bn = format!("{name}.bn{idx}");
        let gamma = self
            .params
            .add(format!("{bn}.gamma"), Tensor::full(vec![cout], T::one()));
        let beta = self.params.add(format!("{bn}.beta"), Tensor::zeros(vec![cout]));
        self.running.push(RunningStats {
            name: bn,
            mean: vec![T::zero(); cout],
            var: vec![T::one(); cout],
        });
        ConvBnRelu {
            conv,
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }

    fn double(&mut self, name: &str, cin: usize, cout: usize) -> DoubleConv {
        DoubleConv {
            first: self.conv_bn_relu(name, 1, cin, cout),
            second: self.conv_bn_relu(name, 2, cout, cout),
        }
    }
}

impl<T: Scalar> UNet<T> {
    /// He-uniform convolutions, identity batch norm, zero head (score 0.5 everywhere).
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.widths.is_empty() || config.in_channels == 0 || config.bottleneck == 0 {
            return Err(NnError::Shape(format!("invalid U-Net config {:?}", config)));
        }
        let mut params = ParamStore::new();
        let mut running = Vec::new();
        let mut b = Builder {
            params: &mut params,
            running: &mut running,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut encoder = Vec::new();
        let mut cin = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            encoder.push(b.double(&format!("enc{i}"), cin, w));
            cin = w;
        }
        let bottleneck = b.double("mid", cin, config.bottleneck);
        let mut decoder = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            let below = config.widths.get(i + 1).copied().unwrap_or(config.bottleneck);
            let up = b.conv(&format!("dec{i}.up"), below, w, 3, true);
            let block = b.double(&format!("dec{i}"), 2 * w, w);
            decoder.push(UpLevel { up, block });
        }
        let w0 = config.widths[0];
        let head = ConvLayer {
            weight: params.add("head.weight", Tensor::zeros(vec![1, w0, 1, 1])),
            bias: Some(params.add("head.bias", Tensor::zeros(vec![1]))),
            pad: 0,
        };
        Ok(Self {
            config,
            params,
            running,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    /// Checks an (N, C, H, W) input shape against the architecture.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(NnError::Shape(format!("expected NCHW input, got {:?}", shape)));
        };
        if c != self.config.in_channels {
            return Err(NnError::Shape(format!(
                "expected {} input channels, got {}",
                self.config.in_channels, c
            )));
        }
        let s = self.config.stride();
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(NnError::Shape(format!(
                "spatial size {}x{} not divisible by {}",
                w, h, s
            )));
        }
        Ok(())
    }

    /// Builds the forward pass on `g`. Output shape is (N, 1, H, W) in (0, 1).
    /// Train mode blends batch statistics into the running statistics.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut batch_stats = Vec::new();
        let out = self.build(g, x, mode, &mut batch_stats)?;
        let mom = T::from_f64(BN_MOMENTUM);
        let rest = T::one() - mom;
        for (idx, stats) in batch_stats {
            let r = &mut self.running[idx];
            for (m, &b) in r.mean.iter_mut().zip(&stats.mean) {
                *m = mom * *m + rest * b;
            }
            for (v, &b) in r.var.iter_mut().zip(&stats.var_unbiased) {
                *v = mom * *v + rest * b;
            }
        }
        Ok(out)
    }

    /// Eval-mode forward that leaves the model untouched.
    pub fn forward_eval(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.build(g, x, Mode::Eval, &mut Vec::new())
    }

    /// Convenience eval-mode inference on a plain tensor.
    pub fn predict(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(input);
        let y = self.forward_eval(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    fn build(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        stats: &mut Vec<(usize, crate::graph::BatchStats<T>)>,
    ) -> Result<Var> {
        self.check_input(g.value(x).shape())?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for level in &self.encoder {
            let out = self.double(g, level, h, mode, stats)?;
            skips.push(out);
            h = g.max_pool(out, 2)?;
        }
        h = self.double(g, &self.bottleneck, h, mode, stats)?;
        for (level, skip) in self.decoder.iter().zip(skips).rev() {
            let up = g.upsample2x(h)?;
            let up = self.conv(g, &level.up, up)?;
            let cat = g.concat(skip, up)?;
            h = self.double(g, &level.block, cat, mode, stats)?;
        }
        let logits = self.conv(g, &self.head, h)?;
        Ok(g.sigmoid(logits))
    }

    fn conv(&self, g: &mut Graph<T>, layer: &ConvLayer, x: Var) -> Result<Var> {
        let w = g.param(&self.params, layer.weight);
        let b = layer.bias.map(|b| g.param(&self.params, b));
        g.conv2d(x, w, b, layer.pad)
    }

    fn double(
        &self,
        g: &mut Graph<T>,
        block: &DoubleConv,
        x: Var,
        mode: Mode,
        stats: &mut Vec<(usize, crate::graph::BatchStats<T>)>,
    ) -> Result<Var> {
        let h = self.conv_bn_relu(g, &block.first, x, mode, stats)?;
        self.conv_bn_relu(g, &block.second, h, mode, stats)
    }

    fn conv_bn_relu(
        &self,
        g: &mut Graph<T>,
        layer: &ConvBnRelu,
        x: Var,
        mode: Mode,
        stats: &mut Vec<(usize, crate::graph::BatchStats<T>)>,
    ) -> Result<Var> {
        let c = self.conv(g, &layer.conv, x)?;
        let gamma = g.param(&self.params, layer.gamma);
        let beta = g.param(&self.params, layer.beta);
        let eps = T::from_f64(BN_EPS);
        let n = match mode {
            Mode::Train => {
                let (v, s) = g.batch_norm_train(c, gamma, beta, eps)?;
                stats.push((layer.stats, s));
                v
            }
            Mode::Eval => {
                let r = &self.running[layer.stats];
                g.batch_norm_eval(c, gamma, beta, &r.mean, &r.var, eps)?
            }
        };
        Ok(g.relu(n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig {
            in_channels: 3,
            widths: vec![4, 8],
            bottleneck: 8,
        }
    }

    #[test]
    fn fresh_model_outputs_one_half() {
        let model = UNet::<f32>::new(tiny(), 1).unwrap();
        let input = Tensor::new(
            vec![1, 3, 16, 16],
            (0..768).map(|i| (i % 17) as f32 / 17.0).collect(),
        )
        .unwrap();
        let out = model.predict(input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 16, 16]);
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn default_shape_contract() {
        let model = UNet::<f32>::new(UNetConfig::default(), 7).unwrap();
        let input = Tensor::full(vec![2, 3, 64, 96], 0.25f32);
        let out = model.predict(input).unwrap();
        assert_eq!(out.shape(), &[2, 1, 64, 96]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let model = UNet::<f32>::new(UNetConfig::default(), 7).unwrap();
        let err = model.predict(Tensor::zeros(vec![1, 3, 40, 64])).unwrap_err();
        assert!(matches!(err, NnError::Shape(_)));
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut model = UNet::<f64>::new(tiny(), 3).unwrap();
        let before = model.running_stats()[0].mean.clone();
        let mut g = Graph::new();
        let x = g.input(Tensor::full(vec![1, 3, 16, 16], 1.0));
        model.forward(&mut g, x, Mode::Train).unwrap();
        assert_ne!(before, model.running_stats()[0].mean);
    }
}
