use kpdet_core::heatmap::{finalize_mh, pairwise_mh, MatchingHeatmap, Pixel};
use kpdet_core::training::{loss_cossim, loss_peak, loss_simple, loss_total, sample_mask, LossWeights, SampleMask};
use kpdet_nn::{Graph, Mode, Tensor, UNet, UNetConfig, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hm(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> MatchingHeatmap {
    MatchingHeatmap::from_values(w, h, (0..w * h).map(|i| f(i % w, i / w)).collect()).unwrap()
}

fn plane(g: &mut Graph<f64>, w: usize, h: usize, f: impl Fn(usize, usize) -> f64, track: bool) -> Var {
    let t = Tensor::new(vec![1, 1, h, w], (0..w * h).map(|i| f(i % w, i / w)).collect()).unwrap();
    if track {
        g.variable(t)
    } else {
        g.input(t)
    }
}

fn fixture(w: usize, h: usize, seed: u64) -> (Vec<Pixel>, MatchingHeatmap, SampleMask, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives: Vec<Pixel> = {
        let mut p: Vec<Pixel> = (0..6).map(|_| (rng.gen_range(0..w), rng.gen_range(0..h))).collect();
        p.sort_unstable();
        p.dedup();
        p
    };
    let m = finalize_mh(&pairwise_mh(&positives, w, h));
    let f = sample_mask(&positives, w, h, seed).unwrap();
    // distinct scores keep max-pooling differentiable under small steps
    let mut s: Vec<f64> = (0..w * h).map(|i| 0.05 + 0.9 * (i as f64 + 0.5) / (w * h) as f64).collect();
    for i in (1..s.len()).rev() {
        s.swap(i, rng.gen_range(0..=i));
    }
    (positives, m, f, s)
}

#[test]
fn total_loss_gradient_matches_finite_differences_and_vanishes_off_support() {
    let (w, h) = (15, 13);
    let (_, m, f, s) = fixture(w, h, 4);
    let weights = LossWeights::default();
    let eval = |s: &[f64]| {
        let mut g = Graph::<f64>::new();
        let sv = plane(&mut g, w, h, |x, y| s[y * w + x], false);
        let l = loss_total(&mut g, sv, &m, &f, &weights).unwrap();
        g.value(l.total).item()
    };
    let mut g = Graph::<f64>::new();
    let sv = plane(&mut g, w, h, |x, y| s[y * w + x], true);
    let l = loss_total(&mut g, sv, &m, &f, &weights).unwrap();
    assert!(l.peak.is_some());
    g.backward(l.total).unwrap();
    let grad = g.grad(sv).unwrap().to_vec();

    let n = weights.patch;
    let qualifying = |x: usize, y: usize| {
        x / n < w / n && y / n < h / n && (0..n).any(|dy| (0..n).any(|dx| m.get((x / n) * n + dx, (y / n) * n + dy) != 0.0))
    };
    let step = 1e-6;
    let mut checked = 0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !f.is_set(x, y) && !qualifying(x, y) {
                assert_eq!(grad[i], 0.0, "pixel ({x}, {y}) is outside F and every qualifying patch");
                continue;
            }
            let mut p = s.clone();
            p[i] += step;
            let mut q = s.clone();
            q[i] -= step;
            let numeric = (eval(&p) - eval(&q)) / (2.0 * step);
            let rel = (grad[i] - numeric).abs() / (grad[i].abs() + numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "({x}, {y}): analytic {} numeric {numeric}", grad[i]);
            checked += 1;
        }
    }
    assert!(checked > 2 * f.n());
}

#[test]
fn end_to_end_gradient_through_two_level_unet() {
    let cfg = UNetConfig {
        in_channels: 3,
        widths: vec![4, 8],
        bottleneck: 8,
    };
    let mut model = UNet::<f64>::new(cfg, 21).unwrap();
    // the head starts at zero, which would block every upstream gradient
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for p in model.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let (w, h) = (16, 16);
    let x = Tensor::new(vec![1, 3, h, w], (0..3 * w * h).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let (_, m, f, _) = fixture(w, h, 23);
    let weights = LossWeights::default();

    let loss = |model: &mut UNet<f64>, backward: bool| -> f64 {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let s = model.forward(&mut g, xv, Mode::Train).unwrap();
        let l = loss_total(&mut g, s, &m, &f, &weights).unwrap();
        let v = g.value(l.total).item();
        if backward {
            model.params_mut().zero_grad();
            g.backward_into(l.total, model.params_mut()).unwrap();
        }
        v
    };
    loss(&mut model, true);
    let ids: Vec<_> = model.params().ids().collect();
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..25 {
        let id = ids[(k * 7) % ids.len()];
        let len = model.params().value(id).numel();
        let e = rng.gen_range(0..len);
        let analytic = model.params().grad(id)[e];
        let orig = model.params().value(id).data()[e];
        model.params_mut().get_mut(id).value.data_mut()[e] = orig + step;
        let lp = loss(&mut model, false);
        model.params_mut().get_mut(id).value.data_mut()[e] = orig - step;
        let lm = loss(&mut model, false);
        model.params_mut().get_mut(id).value.data_mut()[e] = orig;
        let numeric = (lp - lm) / (2.0 * step);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
        let name = &model.params().get(id).name;
        assert!(rel < 1e-3, "{name}[{e}]: analytic {analytic} numeric {numeric}");
        worst = worst.max(rel);
    }
    println!("end-to-end max relative error {worst:.2e}");
}

#[test]
fn cossim_identities() {
    let (w, h) = (12, 10);
    let (_, m, f, s) = fixture(w, h, 5);
    // S' = M when S equals M on the mask (M vanishes off the positives' neighbourhood)
    let mut g = Graph::<f64>::new();
    let on_mask = |x: usize, y: usize| if f.is_set(x, y) { 1.0 } else { 0.0 };
    let m_masked = hm(w, h, |x, y| m.get(x, y) * on_mask(x, y));
    let sv = plane(&mut g, w, h, |x, y| m_masked.get(x, y), false);
    let l = loss_cossim(&mut g, sv, &m_masked, &f).unwrap();
    assert!(g.value(l).item().abs() < 1e-6);

    let s1 = plane(&mut g, w, h, |x, y| s[y * w + x], false);
    let s2 = plane(&mut g, w, h, |x, y| 2.0 * s[y * w + x], false);
    let l1 = loss_cossim(&mut g, s1, &m, &f).unwrap();
    let l2 = loss_cossim(&mut g, s2, &m, &f).unwrap();
    assert!((g.value(l1).item() - g.value(l2).item()).abs() < 1e-6);

    let zero = plane(&mut g, w, h, |_, _| 0.0, false);
    let lz = loss_cossim(&mut g, zero, &m, &f).unwrap();
    assert_eq!(g.value(lz).item(), 1.0);
}

#[test]
fn cossim_orthogonal_fixture() {
    let m = hm(4, 4, |x, y| if (x, y) == (1, 1) { 1.0 } else { 0.0 });
    let f = SampleMask::from_bits(4, 4, (0..16).map(|i| i == 5 || i == 10).collect(), 1).unwrap();
    let mut g = Graph::<f64>::new();
    let s = plane(&mut g, 4, 4, |x, y| if (x, y) == (2, 2) { 0.7 } else { 0.0 }, false);
    let l = loss_cossim(&mut g, s, &m, &f).unwrap();
    assert_eq!(g.value(l).item(), 1.0);
}

#[test]
fn simple_loss_arithmetic_and_oracle() {
    let m = hm(4, 4, |x, y| if (x, y) == (1, 2) { 1.0 } else { 0.0 });
    let f = SampleMask::from_bits(4, 4, (0..16).map(|i| i == 9 || i == 0).collect(), 1).unwrap();
    let mut g = Graph::<f64>::new();
    let s = plane(&mut g, 4, 4, |x, y| if (x, y) == (1, 2) { 0.5 } else { 0.3 }, false);
    let l = loss_simple(&mut g, s, &m, &f).unwrap();
    // masked (1,2) misses by 0.5, masked (0,0) holds 0.3 against a zero target
    assert!((g.value(l).item() - (0.25 + 0.09) / 2.0).abs() < 1e-12);

    let (w, h) = (17, 11);
    let (_, m, f, s) = fixture(w, h, 6);
    let mut reference = 0.0;
    for y in 0..h {
        for x in 0..w {
            let sp = if f.is_set(x, y) { s[y * w + x] } else { 0.0 };
            reference += (sp - m.get(x, y)).powi(2);
        }
    }
    reference /= 2.0 * f.n() as f64;
    let sv = plane(&mut g, w, h, |x, y| s[y * w + x], false);
    let l = loss_simple(&mut g, sv, &m, &f).unwrap();
    assert!((g.value(l).item() - reference).abs() < 1e-9);
}

#[test]
fn single_pixel_error_gives_one_eighth() {
    let m = hm(3, 3, |x, y| if (x, y) == (1, 1) { 1.0 } else { 0.0 });
    let f = SampleMask::from_bits(3, 3, (0..9).map(|i| i == 4 || i == 0).collect(), 1).unwrap();
    let mut g = Graph::<f64>::new();
    let s = plane(&mut g, 3, 3, |x, y| if (x, y) == (1, 1) { 0.5 } else { 0.0 }, false);
    let l = loss_simple(&mut g, s, &m, &f).unwrap();
    assert!((g.value(l).item() - 0.125).abs() < 1e-12);
}

#[test]
fn peak_loss_identities_and_oracle() {
    let m = hm(10, 10, |x, y| if (x, y) == (2, 3) { 0.4 } else { 0.0 });
    let mut g = Graph::<f64>::new();
    let one_hot = plane(&mut g, 10, 10, |x, y| if (x, y) == (4, 0) { 1.0 } else { 0.0 }, false);
    let l = loss_peak(&mut g, one_hot, &m, 5).unwrap().unwrap();
    assert!((g.value(l).item() - 0.04).abs() < 1e-9);

    let flat = plane(&mut g, 10, 10, |_, _| 0.3, false);
    let l = loss_peak(&mut g, flat, &m, 5).unwrap().unwrap();
    assert!((g.value(l).item() - 1.0).abs() < 1e-12);

    let empty = hm(10, 10, |_, _| 0.0);
    assert!(loss_peak(&mut g, flat, &empty, 5).unwrap().is_none());

    let (w, h) = (23, 17);
    let (_, m, _, s) = fixture(w, h, 7);
    let n = 5;
    let (mut sum, mut count) = (0.0, 0);
    for py in 0..h / n {
        for px in 0..w / n {
            let cells: Vec<(usize, usize)> = (0..n).flat_map(|dy| (0..n).map(move |dx| (px * n + dx, py * n + dy))).collect();
            if cells.iter().all(|&(x, y)| m.get(x, y) == 0.0) {
                continue;
            }
            let vals: Vec<f64> = cells.iter().map(|&(x, y)| s[y * w + x]).collect();
            let max = vals.iter().cloned().fold(f64::MIN, f64::max);
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            sum += max - mean;
            count += 1;
        }
    }
    assert!(count > 0);
    let sv = plane(&mut g, w, h, |x, y| s[y * w + x], false);
    let l = loss_peak(&mut g, sv, &m, n).unwrap().unwrap();
    assert!((g.value(l).item() - (1.0 - sum / count as f64)).abs() < 1e-9);
}

#[test]
fn total_is_the_weighted_sum() {
    let (w, h) = (14, 12);
    let (_, m, f, s) = fixture(w, h, 8);
    let weights = LossWeights::default();
    assert_eq!((weights.cossim, weights.simple, weights.peak), (3.0, 1.0, 0.3));
    assert!((weights.cossim * 0.2 + weights.simple * 0.1 + weights.peak * 0.5 - 0.85).abs() < 1e-12);
    let mut g = Graph::<f64>::new();
    let sv = plane(&mut g, w, h, |x, y| s[y * w + x], false);
    let terms = loss_total(&mut g, sv, &m, &f, &weights).unwrap().values(&g);
    assert!(terms.peak_active);
    let expect = 3.0 * terms.cossim + terms.simple + 0.3 * terms.peak;
    assert!((terms.total - expect).abs() < 1e-12);

    // perfect prediction on the mask: only the peak term remains
    let m_masked = hm(w, h, |x, y| if f.is_set(x, y) { m.get(x, y) } else { 0.0 });
    let sv = plane(&mut g, w, h, |x, y| m_masked.get(x, y), false);
    let t = loss_total(&mut g, sv, &m_masked, &f, &weights).unwrap().values(&g);
    assert!(t.cossim.abs() < 1e-9 && t.simple.abs() < 1e-12);
    assert!((t.total - 0.3 * t.peak).abs() < 1e-9);
}

#[test]
fn negatives_are_uniform_over_non_positive_pixels() {
    let positives: Vec<Pixel> = vec![(0, 0), (3, 7), (8, 8), (15, 2), (10, 14), (6, 1), (12, 11), (1, 13)];
    let (w, h) = (16, 16);
    let draws = 10_000;
    let mut hits = vec![0u32; w * h];
    for seed in 0..draws {
        let f = sample_mask(&positives, w, h, seed).unwrap();
        assert_eq!(f.count(), 2 * positives.len());
        for (i, &b) in f.bits().iter().enumerate() {
            hits[i] += b as u32;
        }
    }
    let n = positives.len() as f64;
    let p = n / (256.0 - n);
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let mut beyond_3 = 0;
    for y in 0..h {
        for x in 0..w {
            let c = hits[y * w + x] as f64;
            if positives.contains(&(x, y)) {
                assert_eq!(c, draws as f64);
                continue;
            }
            // 248 pixels: a 4σ excursion anywhere is already very unlikely
            assert!((c - mean).abs() < 4.0 * sigma, "({x}, {y}): {c} vs {mean} ± {sigma}");
            if (c - mean).abs() > 3.0 * sigma {
                beyond_3 += 1;
            }
        }
    }
    // about 0.27% of pixels are expected outside 3σ
    assert!(beyond_3 <= 3, "{beyond_3} pixels beyond 3σ");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn loss_terms_are_bounded(seed in any::<u64>(), scale in 0.01f64..10.0) {
        let (w, h) = (12, 11);
        let (_, m, f, s) = fixture(w, h, seed);
        let mut g = Graph::<f64>::new();
        let sv = plane(&mut g, w, h, |x, y| (s[y * w + x] * scale).min(1.0), false);
        let t = loss_total(&mut g, sv, &m, &f, &LossWeights::default()).unwrap().values(&g);
        prop_assert!(t.cossim >= 0.0 && t.cossim <= 1.0 + 1e-9);
        prop_assert!(t.peak >= 0.0 && t.peak <= 1.0 + 1e-9);
        prop_assert!(t.simple >= 0.0 && t.total >= 0.0);
    }
}
