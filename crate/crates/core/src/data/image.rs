use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Height × width × channels values, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels, "image buffer size");
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Resolution and per-channel standardization applied by [`load_image`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageConfig {
    pub size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ImageConfig {
    /// CLIP/EVA-style normalization constants.
    pub fn with_size(size: usize) -> Self {
        Self {
            size,
            mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
        }
    }
}

/// Triangle-filter taps for one output coordinate. When downsampling the
/// filter widens by the scale factor, which antialiases; taps that fall
/// outside the source are dropped and the rest renormalized.
fn taps(out_index: usize, in_len: usize, out_len: usize) -> Vec<(usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    let support = scale.max(1.0);
    let center = (out_index as f64 + 0.5) * scale - 0.5;
    let lo = (center - support).floor().max(0.0) as usize;
    let hi = ((center + support).ceil() as usize).min(in_len - 1);
    let mut taps: Vec<(usize, f64)> = (lo..=hi)
        .map(|i| (i, (1.0 - (i as f64 - center).abs() / support).max(0.0)))
        .filter(|&(_, w)| w > 0.0)
        .collect();
    let total: f64 = taps.iter().map(|t| t.1).sum();
    for t in &mut taps {
        t.1 /= total;
    }
    taps
}

/// Separable, antialiased bilinear resize.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    let c = img.channels;
    // horizontal pass
    let mut tmp = vec![0.0; img.height * out_w * c];
    for x in 0..out_w {
        let tx = taps(x, img.width, out_w);
        for y in 0..img.height {
            for ch in 0..c {
                tmp[(y * out_w + x) * c + ch] = tx.iter().map(|&(sx, w)| w * img.at(y, sx, ch)).sum();
            }
        }
    }
    // vertical pass
    let mut out = vec![0.0; out_h * out_w * c];
    for y in 0..out_h {
        let ty = taps(y, img.height, out_h);
        for x in 0..out_w {
            for ch in 0..c {
                out[(y * out_w + x) * c + ch] = ty.iter().map(|&(sy, w)| w * tmp[(sy * out_w + x) * c + ch]).sum();
            }
        }
    }
    Image::new(out_h, out_w, c, out)
}

pub fn standardize(img: &mut Image, mean: &[f64; 3], std: &[f64; 3]) {
    let c = img.channels;
    for (i, v) in img.data.iter_mut().enumerate() {
        let ch = i % c;
        *v = (*v - mean[ch]) / std[ch];
    }
}

/// Decoded RGB values in `[0, 1]`; grayscale inputs are replicated across channels.
pub fn decode_rgb(path: &Path) -> Result<Image, DataError> {
    let decoded = image::open(path).map_err(|e| DataError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let rgb = decoded.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(f64::from).collect();
    Ok(Image::new(h as usize, w as usize, 3, data))
}

/// Decode, resize to `cfg.size` square, and standardize.
pub fn load_image(path: &Path, cfg: &ImageConfig) -> Result<Image, DataError> {
    let raw = decode_rgb(path)?;
    let mut img = if raw.height == cfg.size && raw.width == cfg.size {
        raw
    } else {
        resize_bilinear(&raw, cfg.size, cfg.size)
    };
    standardize(&mut img, &cfg.mean, &cfg.std);
    Ok(img)
}
