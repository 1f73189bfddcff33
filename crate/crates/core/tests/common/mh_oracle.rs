//! Monolithic matching-heatmap builder written directly from the definition:
//! correct matches by explicit distance checks, stamping, an explicit 3×3
//! Gaussian with replicate borders, and combination by per-pixel inverse
//! lookup with hand-rolled bilinear interpolation. Shares only warp sampling,
//! base detection, description and matching with the library.

use kpdet_core::features::{budget_for, describe_all, detect_base, match_descriptors};
use kpdet_core::heatmap::HeatmapConfig;
use kpdet_core::image::Image;
use kpdet_core::rng::substream;
use kpdet_core::warp::{random_warp, warp_image, WarpSpec};

pub struct OracleSample {
    pub m_a: Vec<f64>,
    pub m_b: Vec<f64>,
    pub m_b2: Vec<f64>,
    pub positives: [Vec<(usize, usize)>; 3],
}

fn smooth(raw: &[f64], w: usize, h: usize) -> Vec<f64> {
    let sigma: f64 = 0.8;
    let mut k = [[0.0f64; 3]; 3];
    let mut total = 0.0;
    for (j, row) in k.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let (dx, dy) = (i as f64 - 1.0, j as f64 - 1.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut s = 0.0;
            for j in 0..3i64 {
                for i in 0..3i64 {
                    let xx = (x + i - 1).clamp(0, w as i64 - 1) as usize;
                    let yy = (y + j - 1).clamp(0, h as i64 - 1) as usize;
                    s += k[j as usize][i as usize] / total * raw[yy * w + xx];
                }
            }
            out[y as usize * w + x as usize] = s.clamp(0.0, 1.0);
        }
    }
    out
}

fn bilinear(map: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return 0.0;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| map[yy * w + xx];
    (at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx) * (1.0 - fy) + (at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx) * fy
}

fn into_frame(map_a: &[f64], own: &[f64], warp: &WarpSpec, w: usize, h: usize, equal: bool) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let carried = match warp.invert_point((x as f64, y as f64)) {
                Some((sx, sy)) => bilinear(map_a, w, h, sx, sy),
                None => 0.0,
            };
            let v = if equal { carried.max(own[y * w + x]) } else { (carried + own[y * w + x]) / 2.0 };
            out[y * w + x] = v.clamp(0.0, 1.0);
        }
    }
    out
}

fn sorted_unique(mut v: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    v.sort_by_key(|&(x, y)| (y, x));
    v.dedup();
    v
}

pub fn oracle_sample(anchor: &Image, seed: u64, cfg: &HeatmapConfig) -> OracleSample {
    let (w, h) = (anchor.width(), anchor.height());
    let g1 = random_warp(substream(seed, "warp", 0), w, h, &cfg.warp).unwrap();
    let g2 = random_warp(substream(seed, "warp", 1), w, h, &cfg.warp).unwrap();
    let b1 = warp_image(&g1, anchor).0;
    let b2 = warp_image(&g2, anchor).0;
    let k = budget_for(cfg.budget_fraction, w, h);
    let kps_a = detect_base(anchor, k).unwrap();
    let desc_a = describe_all(anchor, &kps_a);

    let mut raw_a = [vec![0.0; w * h], vec![0.0; w * h]];
    let mut raw_b = [vec![0.0; w * h], vec![0.0; w * h]];
    let mut centers_a = Vec::new();
    let mut centers_b: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
    for (v, (img, warp)) in [(&b1, &g1), (&b2, &g2)].into_iter().enumerate() {
        let kps_b = detect_base(img, k).unwrap();
        let desc_b = describe_all(img, &kps_b);
        let matches = match_descriptors(&desc_a, &desc_b, cfg.ratio);
        for c in &matches.candidates {
            if !(c.mutual && c.ratio_ok) {
                continue;
            }
            let (pa, pb) = (kps_a[c.a], kps_b[c.b]);
            let Ok((u, q)) = warp.warp_point((pa.x, pa.y)) else { continue };
            if ((u - pb.x).powi(2) + (q - pb.y).powi(2)).sqrt() > cfg.tolerance {
                continue;
            }
            let (ax, ay) = (pa.x.round() as usize, pa.y.round() as usize);
            let (bx, by) = (pb.x.round() as usize, pb.y.round() as usize);
            raw_a[v][ay * w + ax] = 1.0;
            raw_b[v][by * w + bx] = 1.0;
            centers_a.push((ax, ay));
            centers_b[v].push((bx, by));
        }
    }
    let s_a1 = smooth(&raw_a[0], w, h);
    let s_a2 = smooth(&raw_a[1], w, h);
    let m_a: Vec<f64> = s_a1
        .iter()
        .zip(&s_a2)
        .map(|(&p, &q)| if cfg.equal_weights { p.max(q) } else { (p + q) / 2.0 }.clamp(0.0, 1.0))
        .collect();
    let m_b = into_frame(&m_a, &smooth(&raw_b[0], w, h), &g1, w, h, cfg.equal_weights);
    let m_b2 = into_frame(&m_a, &smooth(&raw_b[1], w, h), &g2, w, h, cfg.equal_weights);

    let pos_a = sorted_unique(centers_a);
    let carry = |warp: &WarpSpec, own: &[(usize, usize)]| {
        let mut v: Vec<(usize, usize)> = own.to_vec();
        for &(x, y) in &pos_a {
            if let Ok((u, q)) = warp.warp_point((x as f64, y as f64)) {
                let (u, q) = (u.round(), q.round());
                if u >= 0.0 && q >= 0.0 && u < w as f64 && q < h as f64 {
                    v.push((u as usize, q as usize));
                }
            }
        }
        sorted_unique(v)
    };
    let pos_b = carry(&g1, &centers_b[0]);
    let pos_b2 = carry(&g2, &centers_b[1]);
    OracleSample {
        m_a,
        m_b,
        m_b2,
        positives: [pos_a, pos_b, pos_b2],
    }
}
