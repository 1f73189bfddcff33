//! Procedural RGB textures used as anchors: smooth backgrounds overlaid with
//! polygons, ellipses, striped and checkered patches and small blobs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::image::Image;
use crate::rng::stream_rng;

type Rgb = [f64; 3];

#[derive(Clone, Debug)]
enum Fill {
    Solid(Rgb),
    Stripes { a: Rgb, b: Rgb, period: f64, angle: f64 },
    Checker { a: Rgb, b: Rgb, cell: f64 },
}

impl Fill {
    fn color(&self, x: f64, y: f64) -> Rgb {
        match self {
            Fill::Solid(c) => *c,
            Fill::Stripes { a, b, period, angle } => {
                let t = x * angle.cos() + y * angle.sin();
                if (t / period).rem_euclid(1.0) < 0.5 {
                    *a
                } else {
                    *b
                }
            }
            Fill::Checker { a, b, cell } => {
                if ((x / cell).floor() + (y / cell).floor()) as i64 % 2 == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, rot: f64 },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, rx, ry, rot } => {
                let (dx, dy) = (x - cx, y - cy);
                let (c, s) = (rot.cos(), rot.sin());
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(pts) => {
                // even-odd rule
                let mut inside = false;
                let n = pts.len();
                for i in 0..n {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn contrasting(rng: &mut ChaCha8Rng, c: Rgb) -> Rgb {
    let lum = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    let shift = if lum > 0.5 { -0.45 } else { 0.45 };
    [
        (c[0] + shift + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0),
        (c[1] + shift + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0),
        (c[2] + shift + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0),
    ]
}

fn random_fill(rng: &mut ChaCha8Rng, scale: f64) -> Fill {
    let a = random_color(rng);
    match rng.gen_range(0..10) {
        0..=5 => Fill::Solid(a),
        6..=7 => Fill::Stripes {
            b: contrasting(rng, a),
            a,
            period: rng.gen_range(0.03..0.08) * scale,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        },
        _ => Fill::Checker {
            b: contrasting(rng, a),
            a,
            cell: rng.gen_range(0.02..0.06) * scale,
        },
    }
}

fn random_shape(rng: &mut ChaCha8Rng, w: f64, h: f64, size: f64) -> Shape {
    let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
    if rng.gen_bool(0.4) {
        Shape::Ellipse {
            cx,
            cy,
            rx: size * rng.gen_range(0.3..1.0),
            ry: size * rng.gen_range(0.3..1.0),
            rot: rng.gen_range(0.0..std::f64::consts::PI),
        }
    } else {
        let n = rng.gen_range(3..7);
        let start = rng.gen_range(0.0..std::f64::consts::TAU);
        let pts = (0..n)
            .map(|i| {
                let t = start + std::f64::consts::TAU * i as f64 / n as f64 + rng.gen_range(-0.3..0.3);
                let r = size * rng.gen_range(0.4..1.0);
                (cx + r * t.cos(), cy + r * t.sin())
            })
            .collect();
        Shape::Polygon(pts)
    }
}

/// Deterministic RGB texture for `seed`.
pub fn synth_image(seed: u64, width: usize, height: usize) -> Image {
    let mut rng = stream_rng(seed, "synth", 0);
    let (w, h) = (width as f64, height as f64);
    let scale = w.min(h);

    // background: two-color gradient plus a low-frequency wave
    let c0 = random_color(&mut rng);
    let c1 = random_color(&mut rng);
    let ang = rng.gen_range(0.0..std::f64::consts::TAU);
    let (fx, fy) = (rng.gen_range(1.0..4.0) / w, rng.gen_range(1.0..4.0) / h);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut layers: Vec<(Shape, Fill)> = Vec::new();
    let n_big = rng.gen_range(6..11);
    for _ in 0..n_big {
        let size = scale * rng.gen_range(0.12..0.3);
        layers.push((random_shape(&mut rng, w, h, size), random_fill(&mut rng, scale)));
    }
    let n_small = rng.gen_range(25..45);
    for _ in 0..n_small {
        let size = scale * rng.gen_range(0.02..0.07);
        layers.push((random_shape(&mut rng, w, h, size), Fill::Solid(random_color(&mut rng))));
    }
    let noise_seed: u64 = rng.gen();

    let mut data = vec![0.0; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64, y as f64);
            let t = ((px / w) * ang.cos() + (py / h) * ang.sin()) * 0.5 + 0.5;
            let wave = 0.08 * (std::f64::consts::TAU * (fx * px + fy * py) + phase).sin();
            let mut c = [0.0; 3];
            for k in 0..3 {
                c[k] = c0[k] * (1.0 - t) + c1[k] * t + wave;
            }
            for (shape, fill) in &layers {
                if shape.contains(px, py) {
                    c = fill.color(px, py);
                }
            }
            data[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&c);
        }
    }
    let mut noise = stream_rng(noise_seed, "noise", 0);
    for v in data.iter_mut() {
        *v += noise.gen_range(-0.02..0.02);
    }
    Image::from_fn(width, height, 3, |x, y, c| data[(y * width + x) * 3 + c])
}
