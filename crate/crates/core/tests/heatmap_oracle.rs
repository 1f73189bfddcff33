mod common;

use common::mh_oracle::oracle_sample;
use kpdet_core::heatmap::{build_training_sample, HeatmapConfig};
use kpdet_core::synth::synth_image;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn compare(cfg: &HeatmapConfig, seeds: std::ops::Range<u64>) {
    let mut nonempty = 0;
    for seed in seeds {
        let anchor = synth_image(seed, 64, 64);
        let s = build_training_sample(&anchor, seed, cfg).unwrap();
        let o = oracle_sample(&anchor, seed, cfg);
        for (name, got, want) in [("m_a", &s.m_a, &o.m_a), ("m_b", &s.m_b, &o.m_b), ("m_b2", &s.m_b2, &o.m_b2)] {
            let d = max_diff(got.values(), want);
            assert!(d <= 1e-9, "seed {seed} {name}: max difference {d}");
        }
        for (i, got) in s.positives().iter().enumerate() {
            assert_eq!(*got, &o.positives[i][..], "seed {seed} positives {i}");
        }
        if !o.positives[0].is_empty() {
            nonempty += 1;
        }
    }
    assert!(nonempty > 0, "fixtures produced no correct matches at all");
}

#[test]
fn weighted_heatmaps_match_oracle() {
    compare(&HeatmapConfig::default(), 0..20);
}

#[test]
fn equal_weight_heatmaps_match_oracle() {
    let cfg = HeatmapConfig {
        equal_weights: true,
        ..HeatmapConfig::default()
    };
    compare(&cfg, 100..105);
}
