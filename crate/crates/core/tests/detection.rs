mod common;

use common::nms_oracle::nms_oracle;
use kpdet_core::detector::{detect, edge_filter, keypoints_from_scores, nms, DetectionConfig, ScoreMap};
use kpdet_core::features::Keypoint;
use kpdet_core::image::Image;
use kpdet_nn::{UNet, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(seed: u64) -> ScoreMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (rng.gen_range(5..40), rng.gen_range(5..30));
    // coarse levels create plenty of ties, including zero plateaus
    let levels = rng.gen_range(2..12);
    let values = (0..w * h).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
    ScoreMap::new(w, h, values).unwrap()
}

fn gaussian_peaks(w: usize, h: usize, peaks: &[(f64, f64, f64)]) -> ScoreMap {
    ScoreMap::from_fn(w, h, |x, y| {
        peaks
            .iter()
            .map(|&(px, py, a)| a * (-((x as f64 - px).powi(2) + (y as f64 - py).powi(2)) / 6.0).exp())
            .sum()
    })
}

#[test]
fn nms_matches_reference_on_random_maps() {
    for seed in 0..100 {
        let map = random_map(seed);
        for window in [3, 5, 7] {
            let got: Vec<(usize, usize)> = nms(&map, window).iter().map(|k| k.pixel()).collect();
            let want = nms_oracle(map.values(), map.width(), map.height(), window);
            assert_eq!(got, want, "seed {seed} window {window}");
        }
    }
}

#[test]
fn survivors_are_separated_and_stable() {
    for seed in 0..100 {
        let map = random_map(seed);
        let kept = nms(&map, 5);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                let (dx, dy) = ((a.x - b.x).abs(), (a.y - b.y).abs());
                assert!(dx > 2.0 || dy > 2.0, "seed {seed}: {a:?} and {b:?} share a window");
            }
        }
        assert_eq!(nms(&map.keep_only(&kept), 5), kept, "seed {seed}: not idempotent");
    }
}

#[test]
fn constant_map_fixture() {
    // the plateau keeps only its first pixel, whose flat Hessian then fails
    // the edge test, so detection returns nothing
    let map = ScoreMap::from_fn(20, 16, |_, _| 0.5);
    let kept = nms(&map, 5);
    assert_eq!(kept, vec![Keypoint::new(0.0, 0.0, 0.5)]);
    assert!(edge_filter(&map, &kept, 10.0).is_empty());
    assert!(keypoints_from_scores(&map, &DetectionConfig::default()).is_empty());
}

#[test]
fn edge_filter_separates_ridges_from_blobs() {
    let blob = gaussian_peaks(21, 21, &[(10.0, 10.0, 0.9)]);
    let ridge = ScoreMap::from_fn(21, 21, |x, _| 0.9 * (-((x as f64 - 10.0).powi(2)) / 6.0).exp());
    let k = [Keypoint::new(10.0, 10.0, 0.9)];
    assert_eq!(edge_filter(&blob, &k, 10.0).len(), 1);
    assert!(edge_filter(&ridge, &k, 10.0).is_empty());
    // an elongated blob passes a loose ratio but not a strict one
    let ellipse = ScoreMap::from_fn(41, 21, |x, y| {
        0.9 * (-((x as f64 - 20.0).powi(2) / 60.0 + (y as f64 - 10.0).powi(2) / 3.0)).exp()
    });
    let k = [Keypoint::new(20.0, 10.0, 0.9)];
    assert_eq!(edge_filter(&ellipse, &k, 30.0).len(), 1);
    assert!(edge_filter(&ellipse, &k, 10.0).is_empty());
}

#[test]
fn floor_then_top_k() {
    let map = gaussian_peaks(60, 24, &[(10.0, 12.0, 0.9), (30.0, 12.0, 0.5), (50.0, 12.0, 0.1)]);
    let cfg = DetectionConfig::default();
    let kps = keypoints_from_scores(&map, &cfg);
    assert_eq!(kps.iter().map(|k| k.pixel()).collect::<Vec<_>>(), vec![(10, 12), (30, 12)]);
    assert!(kps.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(kps.iter().all(|k| k.score >= 0.2));
    let top = keypoints_from_scores(&map, &DetectionConfig { top_k: 1, ..cfg.clone() });
    assert_eq!(top.len(), 1);
    assert_eq!(top[0].pixel(), (10, 12));
}

#[test]
fn detection_is_deterministic_and_inside_the_image() {
    let mut model = UNet::<f32>::new(
        UNetConfig {
            in_channels: 3,
            widths: vec![4, 8],
            bottleneck: 8,
        },
        7,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in model.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.3f32..0.3);
        }
    }
    let img = Image::from_fn(45, 30, 3, |x, y, c| (((x * 5) ^ (y * 3)) % 23 + c) as f64 / 25.0);
    let cfg = DetectionConfig {
        score_floor: 0.0,
        ..DetectionConfig::default()
    };
    let a = detect(&model, &img, &cfg).unwrap();
    let b = detect(&model, &img, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty());
    assert!(a.iter().all(|k| k.x < 45.0 && k.y < 30.0));
}
