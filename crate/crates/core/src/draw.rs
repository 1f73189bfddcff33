//! Inspection overlays: keypoint circles and match lines on RGB canvases.

use crate::features::Keypoint;
use crate::image::Image;

pub type Color = [f64; 3];

pub const GREEN: Color = [0.0, 1.0, 0.0];
pub const RED: Color = [1.0, 0.0, 0.0];
pub const YELLOW: Color = [1.0, 1.0, 0.0];

/// Mutable interleaved RGB buffer.
#[derive(Clone, Debug)]
pub struct Canvas {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Canvas {
    pub fn from_image(img: &Image) -> Self {
        let rgb = img.to_rgb();
        Self {
            width: rgb.width(),
            height: rgb.height(),
            data: rgb.data().to_vec(),
        }
    }

    /// Two images next to each other; the right one starts at `x = left.width()`.
    pub fn side_by_side(left: &Image, right: &Image) -> Self {
        let (l, r) = (left.to_rgb(), right.to_rgb());
        let w = l.width() + r.width();
        let h = l.height().max(r.height());
        let img = Image::from_fn(w, h, 3, |x, y, c| {
            if x < l.width() {
                if y < l.height() { l.get(x, y, c) } else { 0.0 }
            } else if y < r.height() {
                r.get(x - l.width(), y, c)
            } else {
                0.0
            }
        });
        Self::from_image(&img)
    }

    pub fn set(&mut self, x: isize, y: isize, color: Color) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    pub fn circle(&mut self, cx: f64, cy: f64, radius: f64, color: Color) {
        let steps = ((radius * 8.0).ceil() as usize).max(8);
        for i in 0..steps {
            let t = std::f64::consts::TAU * i as f64 / steps as f64;
            self.set(
                (cx + radius * t.cos()).round() as isize,
                (cy + radius * t.sin()).round() as isize,
                color,
            );
        }
    }

    /// Bresenham line between rounded endpoints.
    pub fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Color) {
        let (mut x, mut y) = (x0.round() as isize, y0.round() as isize);
        let (x1, y1) = (x1.round() as isize, y1.round() as isize);
        let dx = (x1 - x).abs();
        let dy = -(y1 - y).abs();
        let sx = if x < x1 { 1 } else { -1 };
        let sy = if y < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn into_image(self) -> Image {
        Image::new(self.width, self.height, 3, self.data).expect("canvas buffer matches its size")
    }
}

/// Image with every keypoint drawn as a circle.
pub fn keypoint_overlay(img: &Image, kps: &[Keypoint], color: Color) -> Image {
    let mut canvas = Canvas::from_image(img);
    for k in kps {
        canvas.circle(k.x, k.y, 3.0, color);
    }
    canvas.into_image()
}
