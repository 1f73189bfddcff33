//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape is already a topological order of the DAG and
//! the backward sweep simply walks it in reverse, visiting each node once.

use crate::error::{NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one train-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the value blended into running statistics.
    pub var_unbiased: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Eval-mode normalization does not depend on the batch.
        frozen: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Upsample2x(Var),
    Concat(Var, Var),
    Select {
        x: Var,
        index: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    Sum(Var),
    Mean(Var),
    Cosine {
        a: Var,
        b: Var,
        norm_a: T,
        norm_b: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf whose gradient is tracked and readable through [`Graph::grad`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a parameter of `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ----- convolution -------------------------------------------------------

    /// Stride-1 2D convolution with square kernel and symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin || kh != kw {
            return Err(NnError::Shape(format!(
                "conv weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        let k = kh;
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(NnError::Shape("conv kernel larger than padded input".into()));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(NnError::Shape("conv bias length mismatch".into()));
            }
        }
        let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let geo = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            pad,
            ho,
            wo,
        };
        let kk = cin * k * k;
        let p = ho * wo;
        let mut out = vec![T::zero(); n * cout * p];
        let mut col = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kk * p]
        };
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            for i in 0..n {
                let xi = &xs[i * cin * h * wd..(i + 1) * cin * h * wd];
                let cols: &[T] = if geo.is_pointwise() {
                    xi
                } else {
                    im2col(xi, &geo, &mut col);
                    &col
                };
                let oi = &mut out[i * cout * p..(i + 1) * cout * p];
                T::gemm(
                    cout,
                    kk,
                    p,
                    T::one(),
                    ws,
                    kk as isize,
                    1,
                    cols,
                    p as isize,
                    1,
                    T::zero(),
                    oi,
                    p as isize,
                    1,
                );
                if let Some(b) = b {
                    let bs = self.value(b).data();
                    for (co, row) in oi.chunks_exact_mut(p).enumerate() {
                        let bv = bs[co];
                        row.iter_mut().for_each(|v| *v = *v + bv);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }, rg))
    }

    // ----- normalization ---------------------------------------------------

    /// Batch normalization with batch statistics over (N, H, W).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.check_channel_vec(gamma, c)?;
        self.check_channel_vec(beta, c)?;
        let hw = h * w;
        let m = n * hw;
        let xs = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var_unbiased = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); xs.len()];
        for ch in 0..c {
            let mut s = 0.0f64;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                s += xs[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mu = s / m as f64;
            let mut ss = 0.0f64;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                ss += xs[base..base + hw]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mu;
                        d * d
                    })
                    .sum::<f64>();
            }
            let var = ss / m as f64;
            let istd = 1.0 / (var + eps.as_f64()).sqrt();
            mean[ch] = T::from_f64(mu);
            var_unbiased[ch] = T::from_f64(if m > 1 { ss / (m - 1) as f64 } else { 0.0 });
            inv_std[ch] = T::from_f64(istd);
            let mu_t = T::from_f64(mu);
            let istd_t = T::from_f64(istd);
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    xhat[j] = (xs[j] - mu_t) * istd_t;
                }
            }
        }
        let out = self.bn_affine(&xhat, gamma, beta, c, hw);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                frozen: false,
            },
            rg,
        );
        Ok((
            v,
            BatchStats {
                mean,
                var_unbiased,
            },
        ))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.check_channel_vec(gamma, c)?;
        self.check_channel_vec(beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(NnError::Shape("running statistics length mismatch".into()));
        }
        let hw = h * w;
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let xs = self.value(x).data();
        let mut xhat = vec![T::zero(); xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    xhat[j] = (xs[j] - running_mean[ch]) * inv_std[ch];
                }
            }
        }
        let out = self.bn_affine(&xhat, gamma, beta, c, hw);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                frozen: true,
            },
            rg,
        ))
    }

    fn check_channel_vec(&self, v: Var, c: usize) -> Result<()> {
        if self.value(v).numel() != c {
            return Err(NnError::Shape(format!(
                "per-channel vector of length {} for {} channels",
                self.value(v).numel(),
                c
            )));
        }
        Ok(())
    }

    fn bn_affine(&self, xhat: &[T], gamma: Var, beta: Var, c: usize, hw: usize) -> Vec<T> {
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); xhat.len()];
        for (plane, (o, x)) in out.chunks_exact_mut(hw).zip(xhat.chunks_exact(hw)).enumerate() {
            let (gc, bc) = (g[plane % c], b[plane % c]);
            for (ov, &xv) in o.iter_mut().zip(x) {
                *ov = gc * xv + bc;
            }
        }
        out
    }

    // ----- activations ---------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    // ----- resampling ----------------------------------------------------------

    /// Non-overlapping k×k max pooling; trailing rows/columns that do not fill
    /// a window are dropped. Ties resolve to the first element in row-major order.
    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k == 0 || h < k || w < k {
            return Err(NnError::Shape(format!("max_pool {} on {}x{}", k, h, w)));
        }
        let (ho, wo) = (h / k, w / k);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Non-overlapping k×k mean pooling, same window grid as [`Graph::max_pool`].
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k == 0 || h < k || w < k {
            return Err(NnError::Shape(format!("avg_pool {} on {}x{}", k, h, w)));
        }
        let (ho, wo) = (h / k, w / k);
        let xs = self.value(x).data();
        let inv = T::one() / T::from_f64((k * k) as f64);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = T::zero();
                    for dy in 0..k {
                        let row = base + (oy * k + dy) * w + ox * k;
                        s = s + xs[row..row + k].iter().copied().sum::<T>();
                    }
                    out.push(s * inv);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::AvgPool { x, k }, rg))
    }

    /// 2× nearest-neighbour upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xs = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for plane in 0..n * c {
            for y in 0..h2 {
                let src = &xs[plane * h * w + (y / 2) * w..plane * h * w + (y / 2) * w + w];
                let dst = &mut out[plane * h2 * w2 + y * w2..plane * h2 * w2 + (y + 1) * w2];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / 2];
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![n, c, h2, w2], out)?;
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(NnError::Shape(format!(
                "concat {:?} with {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = h * w;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&xa[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&xb[i * cb * hw..(i + 1) * cb * hw]);
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Picks batch entry `index`, keeping a leading batch axis of 1.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if index >= n {
            return Err(NnError::Shape(format!("select {} of batch {}", index, n)));
        }
        let sz = c * h * w;
        let data = self.value(x).data()[index * sz..(index + 1) * sz].to_vec();
        let rg = self.rg(x);
        let value = Tensor::new(vec![1, c, h, w], data)?;
        Ok(self.push(value, Op::Select { x, index }, rg))
    }

    // ----- elementwise / reductions ----------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NnError::Shape(format!(
                "elementwise {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.map(x, |v| scale * v + shift);
        let rg = self.rg(x);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_f64(t.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Cosine similarity of the flattened tensors. A zero-norm side yields 0
    /// with a zero gradient.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(NnError::Shape("cosine of different sizes".into()));
        }
        let dot = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).sum::<T>();
        let norm_a = ta.data().iter().map(|&x| x * x).sum::<T>().sqrt();
        let norm_b = tb.data().iter().map(|&x| x * x).sum::<T>().sqrt();
        let c = if norm_a > T::zero() && norm_b > T::zero() {
            dot / (norm_a * norm_b)
        } else {
            T::zero()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::scalar(c),
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            },
            rg,
        ))
    }

    // ----- backward -------------------------------------------------------------

    /// Populates gradients of `loss` for every node that requires them.
    /// Gradients of leaves are kept; intermediate buffers are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(NnError::NonScalarLoss(numel));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g)?;
        }
        Ok(())
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?;
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                store.accumulate_grad(id, g);
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&mut self, idx: usize, g: &[T]) -> Result<()> {
        // The op is moved out so input buffers can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => self.conv2d_backward(*x, *w, *b, *pad, g)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                frozen,
            } => {
                let (n, c, h, wd) = self.value(*x).dims4()?;
                let hw = h * wd;
                let m = T::from_f64((n * hw) as f64);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (plane, (gc, xc)) in g.chunks_exact(hw).zip(xhat.chunks_exact(hw)).enumerate() {
                    let ch = plane % c;
                    for (&gv, &xv) in gc.iter().zip(xc) {
                        sum_g[ch] = sum_g[ch] + gv;
                        sum_gx[ch] = sum_gx[ch] + gv * xv;
                    }
                }
                let gam = self.value(*gamma).data().to_vec();
                if let Some(dg) = self.grad_buf(*gamma) {
                    for ch in 0..c {
                        dg[ch] = dg[ch] + sum_gx[ch];
                    }
                }
                if let Some(db) = self.grad_buf(*beta) {
                    for ch in 0..c {
                        db[ch] = db[ch] + sum_g[ch];
                    }
                }
                let frozen = *frozen;
                if let Some(dx) = self.grad_buf(*x) {
                    for (plane, ((dxc, gc), xc)) in dx
                        .chunks_exact_mut(hw)
                        .zip(g.chunks_exact(hw))
                        .zip(xhat.chunks_exact(hw))
                        .enumerate()
                    {
                        let ch = plane % c;
                        let s = gam[ch] * inv_std[ch];
                        if frozen {
                            for (d, &gv) in dxc.iter_mut().zip(gc) {
                                *d = *d + s * gv;
                            }
                        } else {
                            let mg = sum_g[ch] / m;
                            let mgx = sum_gx[ch] / m;
                            for ((d, &gv), &xv) in dxc.iter_mut().zip(gc).zip(xc) {
                                *d = *d + s * (gv - mg - xv * mgx);
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data().to_vec();
                if let Some(dx) = self.grad_buf(*x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(&xs) {
                        if xv > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let ys = self.nodes[idx].value.data().to_vec();
                if let Some(dx) = self.grad_buf(*x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(&ys) {
                        *d = *d + gv * y * (T::one() - y);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = self.grad_buf(*x) {
                    for (&gv, &src) in g.iter().zip(argmax) {
                        dx[src] = dx[src] + gv;
                    }
                }
            }
            Op::AvgPool { x, k } => {
                let k = *k;
                let (_, _, h, w) = self.value(*x).dims4()?;
                let (ho, wo) = (h / k, w / k);
                let inv = T::one() / T::from_f64((k * k) as f64);
                if let Some(dx) = self.grad_buf(*x) {
                    for (plane, gp) in g.chunks_exact(ho * wo).enumerate() {
                        let base = plane * h * w;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = gp[oy * wo + ox] * inv;
                                for dy in 0..k {
                                    let row = base + (oy * k + dy) * w + ox * k;
                                    for d in &mut dx[row..row + k] {
                                        *d = *d + gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample2x(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let w2 = 2 * w;
                if let Some(dx) = self.grad_buf(*x) {
                    for (plane, gp) in g.chunks_exact(4 * h * w).enumerate() {
                        let base = plane * h * w;
                        for (j, &gv) in gp.iter().enumerate() {
                            let (y, xo) = (j / w2, j % w2);
                            let t = base + (y / 2) * w + xo / 2;
                            dx[t] = dx[t] + gv;
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).dims4()?.1;
                let hw = h * w;
                if let Some(da) = self.grad_buf(*a) {
                    for i in 0..n {
                        let src = &g[i * (ca + cb) * hw..i * (ca + cb) * hw + ca * hw];
                        add_into(&mut da[i * ca * hw..(i + 1) * ca * hw], src);
                    }
                }
                if let Some(db) = self.grad_buf(*b) {
                    for i in 0..n {
                        let off = i * (ca + cb) * hw + ca * hw;
                        add_into(&mut db[i * cb * hw..(i + 1) * cb * hw], &g[off..off + cb * hw]);
                    }
                }
            }
            Op::Select { x, index } => {
                let sz = g.len();
                let index = *index;
                if let Some(dx) = self.grad_buf(*x) {
                    add_into(&mut dx[index * sz..(index + 1) * sz], g);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.grad_buf(*a) {
                    add_into(da, g);
                }
                if let Some(db) = self.grad_buf(*b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.grad_buf(*a) {
                    add_into(da, g);
                }
                if let Some(db) = self.grad_buf(*b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d = *d - gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                if let Some(da) = self.grad_buf(*a) {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(&bv) {
                        *d = *d + gv * y;
                    }
                }
                if let Some(db) = self.grad_buf(*b) {
                    for ((d, &gv), &x) in db.iter_mut().zip(g).zip(&av) {
                        *d = *d + gv * x;
                    }
                }
            }
            Op::Affine { x, scale } => {
                let scale = *scale;
                if let Some(dx) = self.grad_buf(*x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d = *d + scale * gv;
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g[0];
                if let Some(dx) = self.grad_buf(*x) {
                    dx.iter_mut().for_each(|d| *d = *d + gv);
                }
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).numel() as f64);
                let gv = g[0] / n;
                if let Some(dx) = self.grad_buf(*x) {
                    dx.iter_mut().for_each(|d| *d = *d + gv);
                }
            }
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let (na, nb) = (*norm_a, *norm_b);
                if na > T::zero() && nb > T::zero() {
                    let c = self.nodes[idx].value.item();
                    let gv = g[0];
                    let av = self.value(*a).data().to_vec();
                    let bv = self.value(*b).data().to_vec();
                    let nab = na * nb;
                    if let Some(da) = self.grad_buf(*a) {
                        let ca = c / (na * na);
                        for ((d, &x), &y) in da.iter_mut().zip(&av).zip(&bv) {
                            *d = *d + gv * (y / nab - ca * x);
                        }
                    }
                    if let Some(db) = self.grad_buf(*b) {
                        let cb = c / (nb * nb);
                        for ((d, &x), &y) in db.iter_mut().zip(&av).zip(&bv) {
                            *d = *d + gv * (x / nab - cb * y);
                        }
                    }
                }
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }

    fn conv2d_backward(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize, g: &[T]) -> Result<()> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, _, k, _) = self.value(w).dims4()?;
        let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let geo = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            pad,
            ho,
            wo,
        };
        let kk = cin * k * k;
        let p = ho * wo;
        let need_w = self.rg(w);
        let need_x = self.rg(x);

        if let Some(b) = b {
            if let Some(db) = self.grad_buf(b) {
                for i in 0..n {
                    for (co, row) in g[i * cout * p..(i + 1) * cout * p].chunks_exact(p).enumerate() {
                        db[co] = db[co] + row.iter().copied().sum::<T>();
                    }
                }
            }
        }

        if need_w {
            let mut dw = self.grads[w.0].take().unwrap_or_else(|| vec![T::zero(); cout * kk]);
            let mut col = if geo.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); kk * p]
            };
            let xs = self.value(x).data();
            for i in 0..n {
                let xi = &xs[i * cin * h * wd..(i + 1) * cin * h * wd];
                let cols: &[T] = if geo.is_pointwise() {
                    xi
                } else {
                    im2col(xi, &geo, &mut col);
                    &col
                };
                let gi = &g[i * cout * p..(i + 1) * cout * p];
                // dW (cout x kk) += G (cout x p) * col^T (p x kk)
                T::gemm(
                    cout,
                    p,
                    kk,
                    T::one(),
                    gi,
                    p as isize,
                    1,
                    cols,
                    1,
                    p as isize,
                    T::one(),
                    &mut dw,
                    kk as isize,
                    1,
                );
            }
            self.grads[w.0] = Some(dw);
        }

        if need_x {
            let ws = self.value(w).data().to_vec();
            let mut dx = self.grads[x.0].take().unwrap_or_else(|| vec![T::zero(); n * cin * h * wd]);
            let mut dcol = vec![T::zero(); kk * p];
            for i in 0..n {
                let gi = &g[i * cout * p..(i + 1) * cout * p];
                // dcol (kk x p) = W^T (kk x cout) * G (cout x p)
                T::gemm(
                    kk,
                    cout,
                    p,
                    T::one(),
                    &ws,
                    1,
                    kk as isize,
                    gi,
                    p as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    p as isize,
                    1,
                );
                let dxi = &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd];
                if geo.is_pointwise() {
                    add_into(dxi, &dcol);
                } else {
                    col2im_add(&dcol, &geo, dxi);
                }
            }
            self.grads[x.0] = Some(dx);
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }

    /// Valid output column range for kernel column `kx`.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo);
        (lo, hi.max(lo))
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = g.ox_range(kx);
                for oy in 0..g.ho {
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        d.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    d[..lo].iter_mut().for_each(|v| *v = T::zero());
                    d[hi..].iter_mut().for_each(|v| *v = T::zero());
                    if hi > lo {
                        let s0 = lo + kx - g.pad;
                        d[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = g.ox_range(kx);
                if hi <= lo {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let s0 = lo + kx - g.pad;
                    let d = &mut plane[iy as usize * g.w + s0..iy as usize * g.w + s0 + (hi - lo)];
                    add_into(d, s);
                }
            }
        }
    }
}
