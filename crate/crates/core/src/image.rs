//! Floating-point images and the handful of filters the pipeline needs.
//!
//! Coordinates are `(x = column, y = row)` with the origin at the top-left
//! pixel and pixel centers on integers.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

/// Row-major, channel-interleaved image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(CoreError::invalid(format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(CoreError::invalid(format!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CoreError::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image from a per-sample function; results are clamped to `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(channels == 1 || channels == 3, "{channels} channels");
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(clamp01(f(x, y, c)));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::from_fn(width, height, channels, |_, _, _| 0.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Value at integer coordinates with replicate-border clamping.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc, c)
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    /// Bilinear interpolation of every channel into `out`. Points outside
    /// `[0, W-1] × [0, H-1]` produce zeros and `false`.
    pub fn sample_bilinear_into(&self, x: f64, y: f64, out: &mut [f64]) -> bool {
        if !(self.width > 0 && self.height > 0 && self.contains(x, y)) {
            out.iter_mut().for_each(|v| *v = 0.0);
            return false;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
            let bottom = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        true
    }

    pub fn sample_bilinear(&self, x: f64, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_bilinear_into(x, y, &mut out);
        out
    }

    pub fn to_grayscale(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| clamp01(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]))
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Replicates a single channel into three.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Planar (C, H, W) copy of the data.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v;
            }
        }
        out
    }
}

#[inline]
pub(crate) fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Square convolution kernel of odd side.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2D {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel2D {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || weights.len() != size * size {
            return Err(CoreError::invalid(format!(
                "kernel of side {size} with {} weights",
                weights.len()
            )));
        }
        Ok(Self { size, weights })
    }

    /// Sampled isotropic Gaussian normalized to unit sum.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if size % 2 == 0 || sigma <= 0.0 {
            return Err(CoreError::invalid(format!("gaussian size {size} sigma {sigma}")));
        }
        let r = (size / 2) as isize;
        let mut w = Vec::with_capacity(size * size);
        for dy in -r..=r {
            for dx in -r..=r {
                w.push((-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp());
            }
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        Ok(Self { size, weights: w })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let r = (self.size / 2) as isize;
        self.weights[((dy + r) as usize) * self.size + (dx + r) as usize]
    }
}

/// Convolution of a single-channel image with replicate-border padding.
pub fn gaussian_blur(img: &Image, kernel: &Kernel2D) -> Result<Image> {
    if img.channels != 1 {
        return Err(CoreError::invalid("gaussian_blur expects a single-channel image"));
    }
    let r = (kernel.size / 2) as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    let mut data = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h - 1) as usize;
                let row = &img.data[yy * img.width..(yy + 1) * img.width];
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w - 1) as usize;
                    s += kernel.at(dx, dy) * row[xx];
                }
            }
            data[(y * w + x) as usize] = clamp01(s);
        }
    }
    Ok(Image {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    })
}

// ----- file IO -----------------------------------------------------------------

/// Reads an 8-bit (or 16-bit) PNG, or a binary PGM (P5, 8 or 16 bit).
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::file(path, e))?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else {
        Err(CoreError::Decode {
            offset: 0,
            msg: "unrecognized image signature".into(),
        })
    }
}

/// Writes PNG or 8-bit PGM depending on the extension.
pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => encode_pgm(img, 255)?,
        _ => encode_png(img)?,
    };
    fs::write(path, bytes).map_err(|e| CoreError::file(path, e))
}

/// 16-bit PGM with `value = round(v * 65535)`.
pub fn write_pgm16(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(img, 65535)?;
    fs::write(path, bytes).map_err(|e| CoreError::file(path, e))
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| CoreError::Png(e.to_string()))?;
        let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| CoreError::Png(e.to_string()))?;
        writer.finish().map_err(|e| CoreError::Png(e.to_string()))?;
    }
    Ok(out)
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| CoreError::Png(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| CoreError::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let (src_ch, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(CoreError::Png("indexed color was not expanded".into()));
        }
    };
    let mut data = Vec::with_capacity(w * h * keep);
    for y in 0..h {
        let row = &buf[y * stride..y * stride + w * src_ch];
        for px in row.chunks_exact(src_ch) {
            data.extend(px[..keep].iter().map(|&b| b as f64 / 255.0));
        }
    }
    Image::new(w, h, keep, data)
}

fn to_u8(v: f64) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}

fn encode_pgm(img: &Image, maxval: u32) -> Result<Vec<u8>> {
    if img.channels != 1 {
        return Err(CoreError::invalid("PGM needs a single-channel image"));
    }
    let mut out = Vec::new();
    write!(out, "P5\n{} {}\n{}\n", img.width, img.height, maxval)?;
    for &v in &img.data {
        let q = (clamp01(v) * maxval as f64).round() as u32;
        if maxval > 255 {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    Ok(out)
}

/// Parses a binary PGM. Errors carry the byte offset where parsing failed.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let err = |offset: usize, msg: &str| CoreError::Decode {
        offset,
        msg: msg.to_string(),
    };
    if !bytes.starts_with(b"P5") {
        return Err(err(0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a decimal header field"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(err(pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(err(pos - 1, "maxval must be in 1..=65535"));
    }
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = w * h * bps;
    if bytes.len() < pos + need {
        return Err(err(bytes.len(), "truncated pixel data"));
    }
    let px = &bytes[pos..pos + need];
    let data: Vec<f64> = if bps == 1 {
        px.iter().map(|&b| (b as f64 / maxval as f64).min(1.0)).collect()
    } else {
        px.chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64).min(1.0))
            .collect()
    };
    Image::new(w, h, 1, data)
}
