//! Central finite-difference checks of every differentiable op in f64.

use kpdet_nn::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero and pairwise distinct, so ReLU and max-pool
/// stay differentiable under the finite-difference step.
fn kink_free(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0) * 0.05).collect();
    for v in vals.iter_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    // shuffle with the same rng
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Builds `sum(op(inputs) * r)` for a fixed random `r`, differentiates it and
/// compares every input gradient against central differences.
fn check(name: &str, inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let forward = |inputs: &[Tensor<f64>], r: Option<&Tensor<f64>>| -> (Graph<f64>, Vec<Var>, Var, Tensor<f64>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = op(&mut g, &vars);
        let shape = g.value(out).shape().to_vec();
        let r = r.cloned().unwrap_or_else(|| {
            let mut rr = ChaCha8Rng::seed_from_u64(5);
            random(&shape, &mut rr)
        });
        let rv = g.input(r.clone());
        let prod = g.mul(out, rv).unwrap();
        let loss = g.sum(prod);
        (g, vars, loss, r)
    };
    let (mut g, vars, loss, r) = forward(&inputs, None);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        // every element for small tensors, a random subset otherwise
        let n = inputs[i].numel();
        let idx: Vec<usize> = if n <= 200 { (0..n).collect() } else { (0..200).map(|_| rng.gen_range(0..n)).collect() };
        for k in idx {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= H;
            let (gp, _, lp, _) = forward(&plus, Some(&r));
            let (gm, _, lm, _) = forward(&minus, Some(&r));
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * H);
            let e = rel_err(analytic[k], numeric);
            assert!(
                e < TOL,
                "{name}: input {i} element {k}: analytic {} numeric {numeric} (rel {e:.2e})",
                analytic[k]
            );
            worst = worst.max(e);
        }
    }
    println!("{name}: max relative error {worst:.2e}");
}

#[test]
fn conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![random(&[2, 3, 5, 6], &mut rng), random(&[4, 3, 3, 3], &mut rng), random(&[4], &mut rng)];
    check("conv2d pad 1", inputs.clone(), |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1).unwrap());
    check("conv2d pad 0", inputs[..2].to_vec(), |g, v| g.conv2d(v[0], v[1], None, 0).unwrap());
    let pointwise = vec![random(&[1, 3, 4, 4], &mut rng), random(&[2, 3, 1, 1], &mut rng), random(&[2], &mut rng)];
    check("conv2d 1x1", pointwise, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 0).unwrap());
}

#[test]
fn batch_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![random(&[3, 2, 4, 3], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)];
    check("batch_norm_train", inputs.clone(), |g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0);
    let mean = Tensor::new(vec![2], vec![0.1, -0.3]).unwrap();
    let var = Tensor::new(vec![2], vec![0.8, 1.7]).unwrap();
    check("batch_norm_eval", inputs, move |g, v| {
        g.batch_norm_eval(v[0], v[1], v[2], mean.data(), var.data(), 1e-5).unwrap()
    });
}

#[test]
fn activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check("relu", vec![kink_free(&[2, 2, 3, 3], &mut rng)], |g, v| g.relu(v[0]));
    check("sigmoid", vec![random(&[2, 2, 3, 3], &mut rng)], |g, v| g.sigmoid(v[0]));
}

#[test]
fn pooling_and_resampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check("max_pool 2", vec![kink_free(&[2, 2, 4, 6], &mut rng)], |g, v| g.max_pool(v[0], 2).unwrap());
    check("max_pool 5 ragged", vec![kink_free(&[1, 1, 11, 7], &mut rng)], |g, v| g.max_pool(v[0], 5).unwrap());
    check("avg_pool 5", vec![random(&[1, 2, 10, 5], &mut rng)], |g, v| g.avg_pool(v[0], 5).unwrap());
    check("upsample2x", vec![random(&[2, 2, 3, 2], &mut rng)], |g, v| g.upsample2x(v[0]).unwrap());
}

#[test]
fn structural() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check("concat", vec![random(&[2, 1, 3, 3], &mut rng), random(&[2, 3, 3, 3], &mut rng)], |g, v| {
        g.concat(v[0], v[1]).unwrap()
    });
    check("select", vec![random(&[3, 2, 2, 3], &mut rng)], |g, v| g.select(v[0], 1).unwrap());
}

#[test]
fn elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pair = vec![random(&[1, 2, 3, 4], &mut rng), random(&[1, 2, 3, 4], &mut rng)];
    check("add", pair.clone(), |g, v| g.add(v[0], v[1]).unwrap());
    check("sub", pair.clone(), |g, v| g.sub(v[0], v[1]).unwrap());
    check("mul", pair.clone(), |g, v| g.mul(v[0], v[1]).unwrap());
    check("affine", pair[..1].to_vec(), |g, v| g.affine(v[0], -1.7, 0.3));
    check("sum", pair[..1].to_vec(), |g, v| g.sum(v[0]));
    check("mean", pair[..1].to_vec(), |g, v| g.mean(v[0]));
    check("cosine", pair, |g, v| g.cosine(v[0], v[1]).unwrap());
}

#[test]
fn composed_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![random(&[2, 2, 4, 4], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)];
    check("conv-bn-sigmoid-pool-upsample", inputs, |g, v| {
        let c = g.conv2d(v[0], v[1], None, 1).unwrap();
        let (b, _) = g.batch_norm_train(c, v[2], v[3], 1e-5).unwrap();
        let s = g.sigmoid(b);
        let p = g.avg_pool(s, 2).unwrap();
        g.upsample2x(p).unwrap()
    });
}
