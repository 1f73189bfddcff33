use kpdet_core::heatmap::{build_corpus, HeatmapConfig};
use kpdet_core::training::{sample_mask, train, TrainConfig};
use kpdet_nn::UNetConfig;

const WINDOW: usize = 20;

fn running_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn two_hundred_steps_halve_the_running_mean_loss() {
    let heat = HeatmapConfig {
        min_positives: 8,
        ..HeatmapConfig::default()
    };
    let corpus = build_corpus(11, 20, 64, 64, &heat).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        batch_images: 12,
        min_positives: 8,
        unet: UNetConfig {
            in_channels: 3,
            widths: vec![8, 16],
            bottleneck: 32,
        },
        ..TrainConfig::default()
    };
    let admitted = corpus.iter().filter(|s| s.is_admissible(cfg.min_positives)).count();
    assert!(admitted >= 16, "only {admitted} admissible samples");
    let (_, log) = train(&cfg, &corpus, |_| {}).unwrap();
    let totals: Vec<f64> = log.iter().take(200).map(|r| r.loss.total).collect();
    assert_eq!(totals.len(), 200);
    assert!(totals.iter().all(|t| t.is_finite()));

    // best cossim reachable under the mask: S′ = M restricted to F
    let mut floor = 0.0;
    for s in &corpus {
        let m = &s.m_a;
        let f = sample_mask(&s.positives_a, m.width(), m.height(), 0).unwrap();
        let (mut inside, mut all) = (0.0, 0.0);
        for (i, v) in m.values().iter().enumerate() {
            all += v * v;
            if f.bits()[i] {
                inside += v * v;
            }
        }
        floor += 1.0 - (inside / all).sqrt();
    }
    floor /= corpus.len() as f64;

    let first = running_mean(&totals[..WINDOW]);
    let last = running_mean(&totals[200 - WINDOW..]);
    println!("running-mean loss {first:.4} -> {last:.4} (ratio {:.3}); cossim floor {floor:.4}", last / first);
    assert!(last < 0.5 * first, "running-mean loss {first:.4} -> {last:.4}");
}
