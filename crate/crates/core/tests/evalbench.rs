use kpdet_core::evalbench::{
    evaluate_detector_on_pair, evaluate_pair, generate_benchmark, generate_pairs, load_benchmark, match_overlay,
    possible_assignment, possible_matches, run_benchmark, BenchmarkPair, BenchmarkSettings, HarrisDetector,
    PairDetector, PlantedDetector,
};
use kpdet_core::features::{Descriptor, Keypoint};
use kpdet_core::synth::synth_image;
use kpdet_core::warp::{Homography, WarpParams, WarpSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest one-to-one assignment by exhaustive search, component by component.
fn exhaustive_possible(a: &[(f64, f64)], b: &[(f64, f64)], tol: f64) -> usize {
    let edges: Vec<Vec<usize>> = a
        .iter()
        .map(|p| (0..b.len()).filter(|&j| (p.0 - b[j].0).hypot(p.1 - b[j].1) <= tol).collect())
        .collect();
    // connected components over A ∪ B
    let mut comp_a = vec![usize::MAX; a.len()];
    let mut comp_b = vec![usize::MAX; b.len()];
    let mut comps = 0;
    for start in 0..a.len() {
        if comp_a[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        comp_a[start] = comps;
        while let Some(i) = stack.pop() {
            for &j in &edges[i] {
                if comp_b[j] == usize::MAX {
                    comp_b[j] = comps;
                    for (k, e) in edges.iter().enumerate() {
                        if comp_a[k] == usize::MAX && e.contains(&j) {
                            comp_a[k] = comps;
                            stack.push(k);
                        }
                    }
                }
            }
        }
        comps += 1;
    }
    fn best(i: usize, members: &[usize], edges: &[Vec<usize>], used: &mut Vec<usize>) -> usize {
        if i == members.len() {
            return 0;
        }
        let mut top = best(i + 1, members, edges, used);
        for &j in &edges[members[i]] {
            if !used.contains(&j) {
                used.push(j);
                top = top.max(1 + best(i + 1, members, edges, used));
                used.pop();
            }
        }
        top
    }
    (0..comps)
        .map(|c| {
            let members: Vec<usize> = (0..a.len()).filter(|&i| comp_a[i] == c).collect();
            best(0, &members, &edges, &mut Vec::new())
        })
        .sum()
}

#[test]
fn possible_matches_equal_exhaustive_assignment() {
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<(f64, f64)> = (0..30).map(|_| (rng.gen_range(0.0..40.0), rng.gen_range(0.0..30.0))).collect();
        let b: Vec<(f64, f64)> = (0..30).map(|_| (rng.gen_range(0.0..40.0), rng.gen_range(0.0..30.0))).collect();
        let ka: Vec<Keypoint> = a.iter().map(|&(x, y)| Keypoint::new(x, y, 1.0)).collect();
        let kb: Vec<Keypoint> = b.iter().map(|&(x, y)| Keypoint::new(x, y, 1.0)).collect();
        let got = possible_matches(&ka, &kb, &WarpSpec::identity(), 3.0);
        assert_eq!(got, exhaustive_possible(&a, &b, 3.0), "seed {seed}");
        let pairs = possible_assignment(&ka, &kb, &WarpSpec::identity(), 3.0);
        let mut bs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        bs.sort_unstable();
        bs.dedup();
        assert_eq!(bs.len(), pairs.len(), "assignment is not one-to-one");
    }
}

fn one_hot(i: usize, dim: usize) -> Descriptor {
    let mut v = vec![0.0f32; dim];
    v[i] = 1.0;
    Descriptor::from_values(v)
}

#[test]
fn planted_outliers_fixture() {
    let warp = WarpSpec::from_homography(Homography::translation(6.0, -4.0)).unwrap();
    let pair = BenchmarkPair::from_warp(synth_image(2, 120, 90), warp);
    let kps_a: Vec<Keypoint> = (0..16)
        .map(|i| Keypoint::new(20.0 + (i % 4) as f64 * 20.0, 20.0 + (i / 4) as f64 * 15.0, 1.0))
        .collect();
    let kps_b: Vec<Keypoint> = kps_a.iter().map(|k| Keypoint::new(k.x + 6.0, k.y - 4.0, 1.0)).collect();
    let desc_a: Vec<Descriptor> = (0..16).map(|i| one_hot(i, 16)).collect();
    // the last four B descriptors are rotated, so those matches land on the wrong keypoint
    let desc_b: Vec<Descriptor> = (0..16).map(|i| one_hot(if i < 12 { i } else { 12 + (i - 11) % 4 }, 16)).collect();
    let r = evaluate_pair((&kps_a, &desc_a), (&kps_b, &desc_b), &pair, 3.0, 0.8);
    assert_eq!(r.total_matches, 16);
    assert_eq!(r.correct_matches, 12);
    assert_eq!(r.inliers, 12);
    assert_eq!(r.possible_matches, 16);
    assert_eq!((r.shared_a, r.shared_b), (16, 16));
    assert_eq!(r.mma_paper(), 12.0 / 16.0);
    assert_eq!(r.mma_std(), 12.0 / 16.0);
    assert_eq!(r.ms(), 12.0 / 16.0);
    assert_eq!(r.rr(), 1.0);
    assert!(r.errors[..12].iter().all(|&e| e < 1e-9));
    assert!(r.errors[12..].iter().all(|&e| e > 3.0));
}

#[test]
fn identity_pair_scores_one() {
    let pair = BenchmarkPair::identity(synth_image(31, 160, 120));
    let (r, _, _) = evaluate_detector_on_pair(&HarrisDetector, &pair, 300, 3.0, 0.8).unwrap();
    assert!(r.possible_matches > 100);
    assert_eq!(r.rr(), 1.0);
    assert_eq!(r.mma_paper(), 1.0);
    assert_eq!(r.mma_std(), 1.0);
}

#[test]
fn metric_bounds_and_repeatability_over_a_benchmark() {
    let pairs = generate_pairs(5, 12, 160, 120, &WarpParams::default()).unwrap();
    let settings = BenchmarkSettings {
        budget: 256,
        ..Default::default()
    };
    let dets: [&dyn PairDetector; 2] = [&HarrisDetector, &PlantedDetector];
    let (table, runs) = run_benchmark(&dets, &pairs, "synthetic", &settings).unwrap();
    for run in &runs {
        for r in &run.reports {
            for m in [r.rr(), r.ms(), r.mma_paper(), r.mma_std()] {
                assert!((0.0..=1.0).contains(&m));
            }
            assert!(r.ms() <= r.rr());
            assert!(r.correct_matches <= r.total_matches);
            assert!(r.possible_matches <= r.min_shared());
        }
    }
    assert!(runs[1].reports.iter().all(|r| r.rr() == 1.0));
    let (again, _) = run_benchmark(&dets, &pairs, "synthetic", &settings).unwrap();
    assert_eq!(table, again);
    assert!(table.to_csv().lines().next().unwrap().contains("mma_paper,mma_std"));
}

#[test]
fn benchmark_files_round_trip() {
    let dir = std::env::temp_dir().join(format!("kpdet-bench-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let dirs = generate_benchmark(&dir, 9, 3, (64, 48), &WarpParams::default()).unwrap();
    assert_eq!(dirs.len(), 3);
    assert!(dirs[2].ends_with("pairs/0002"));
    for name in ["a.png", "b.png", "warp.json"] {
        assert!(dirs[0].join(name).is_file());
    }
    let loaded = load_benchmark(&dir).unwrap();
    let fresh = generate_pairs(9, 3, 64, 48, &WarpParams::default()).unwrap();
    for (l, f) in loaded.iter().zip(&fresh) {
        assert_eq!(l.warp, f.warp);
        assert_eq!(l.mask_b, f.mask_b);
        assert_eq!((l.image_b.width(), l.image_b.height()), (64, 48));
    }
    let (a, b) = PlantedDetector.detect_pair(&loaded[0], 50).unwrap();
    let (r, _, _) = evaluate_detector_on_pair(&PlantedDetector, &loaded[0], 50, 3.0, 0.8).unwrap();
    let overlay = match_overlay(&loaded[0], &a, &b, &r);
    assert_eq!((overlay.width(), overlay.height()), (128, 48));
    std::fs::remove_dir_all(&dir).unwrap();
}
