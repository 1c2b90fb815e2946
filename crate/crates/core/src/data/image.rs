//! 8-bit images: binary PGM/PPM IO, resize + ImageNet normalisation, and the
//! training augmentations.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// 1 or 3, interleaved.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Data(format!("images need 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Data(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    fn sample_clamped(&self, x: isize, y: isize, c: usize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y, c) as f64
    }

    /// Bilinear sample at continuous pixel coordinates, edges extended.
    pub fn bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let a = self.sample_clamped(x0, y0, c);
        let b = self.sample_clamped(x0 + 1, y0, c);
        let d = self.sample_clamped(x0, y0 + 1, c);
        let e = self.sample_clamped(x0 + 1, y0 + 1, c);
        let top = a + (b - a) * fx;
        let bot = d + (e - d) * fx;
        top + (bot - top) * fy
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Parses binary P5 (gray) or P6 (RGB) with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte before the raster
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Data(format!("unsupported PNM magic `{m}` (only P5/P6)"))),
    };
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Data(format!("bad PNM header field `{s}`")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Data(format!("only maxval 255 is supported, got {maxval}")));
    }
    let need = w * h * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Data(format!("PNM raster needs {need} bytes")))?;
    ImageBuffer::new(w, h, channels, raster.to_vec())
}

pub fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_pnm(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_pnm(path: &Path, img: &ImageBuffer) -> Result<()> {
    fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

/// Bilinear resize with half-pixel centres; same-size input is unchanged.
pub fn resize(img: &ImageBuffer, width: usize, height: usize) -> Result<ImageBuffer> {
    if img.width == 0 || img.height == 0 || width == 0 || height == 0 {
        return Err(Error::Data(format!(
            "cannot resize {}x{} to {width}x{height}",
            img.width, img.height
        )));
    }
    if (img.width, img.height) == (width, height) {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let mut out = ImageBuffer::filled(width, height, img.channels, 0);
    for y in 0..height {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..width {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            for c in 0..img.channels {
                out.set(x, y, c, to_u8(img.bilinear(src_x, src_y, c)));
            }
        }
    }
    Ok(out)
}

/// `[3, size, size]`: resize, replicate gray to RGB, ImageNet-normalise.
pub fn preprocess_image(img: &ImageBuffer, size: usize) -> Result<Tensor> {
    let r = resize(img, size, size)?;
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for c in 0..3 {
        let src_c = if r.channels == 1 { 0 } else { c };
        for i in 0..plane {
            let v = r.data[i * r.channels + src_c] as f64 / 255.0;
            data[c * plane + i] = (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    Tensor::new(vec![3, size, size], data)
}

/// Stacks preprocessed images into `[B, 3, size, size]`.
pub fn stack_images(images: &[Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("empty image batch".into()))?
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for t in images {
        if t.shape() != first.as_slice() {
            return Err(Error::Shape(format!(
                "batch mixes image shapes {:?} and {:?}",
                first,
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![images.len()];
    shape.extend(first);
    Tensor::new(shape, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub p_flip: f64,
    pub p_rotate: f64,
    pub p_brightness: f64,
    pub p_contrast: f64,
    pub p_noise: f64,
    pub max_rotation_deg: f64,
    /// Factors drawn from `[1 − r, 1 + r]`.
    pub brightness_range: f64,
    pub contrast_range: f64,
    /// Fraction of the 0..255 range.
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_flip: 0.5,
            p_rotate: 0.5,
            p_brightness: 0.5,
            p_contrast: 0.5,
            p_noise: 0.5,
            max_rotation_deg: 10.0,
            brightness_range: 0.2,
            contrast_range: 0.2,
            noise_std: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            p_flip: 0.0,
            p_rotate: 0.0,
            p_brightness: 0.0,
            p_contrast: 0.0,
            p_noise: 0.0,
            ..Self::default()
        }
    }
}

pub fn flip_horizontal(img: &ImageBuffer) -> ImageBuffer {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(img.width - 1 - x, y, c, img.get(x, y, c));
            }
        }
    }
    out
}

/// Rotation about the centre, bilinear, edge padding.
pub fn rotate(img: &ImageBuffer, degrees: f64) -> ImageBuffer {
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // inverse map: rotate the output coordinate back
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            for ch in 0..img.channels {
                out.set(x, y, ch, to_u8(img.bilinear(sx, sy, ch)));
            }
        }
    }
    out
}

pub fn adjust_brightness(img: &ImageBuffer, factor: f64) -> ImageBuffer {
    ImageBuffer {
        data: img.data.iter().map(|&v| to_u8(v as f64 * factor)).collect(),
        ..img.clone()
    }
}

/// Scales deviations from the image mean.
pub fn adjust_contrast(img: &ImageBuffer, factor: f64) -> ImageBuffer {
    let mean = img.data.iter().map(|&v| v as f64).sum::<f64>() / img.data.len().max(1) as f64;
    ImageBuffer {
        data: img
            .data
            .iter()
            .map(|&v| to_u8((v as f64 - mean) * factor + mean))
            .collect(),
        ..img.clone()
    }
}

pub fn add_noise(img: &ImageBuffer, std: f64, rng: &mut Rng) -> ImageBuffer {
    ImageBuffer {
        data: img
            .data
            .iter()
            .map(|&v| to_u8(v as f64 + rng.normal() * std * 255.0))
            .collect(),
        ..img.clone()
    }
}

/// Each transform fires independently with its probability.
pub fn augment(img: &ImageBuffer, rng: &mut Rng, cfg: &AugmentConfig) -> ImageBuffer {
    let mut out = img.clone();
    if rng.bernoulli(cfg.p_flip) {
        out = flip_horizontal(&out);
    }
    if rng.bernoulli(cfg.p_rotate) {
        let a = rng.uniform_range(-cfg.max_rotation_deg, cfg.max_rotation_deg);
        out = rotate(&out, a);
    }
    if rng.bernoulli(cfg.p_brightness) {
        let f = rng.uniform_range(1.0 - cfg.brightness_range, 1.0 + cfg.brightness_range);
        out = adjust_brightness(&out, f);
    }
    if rng.bernoulli(cfg.p_contrast) {
        let f = rng.uniform_range(1.0 - cfg.contrast_range, 1.0 + cfg.contrast_range);
        out = adjust_contrast(&out, f);
    }
    if rng.bernoulli(cfg.p_noise) {
        out = add_noise(&out, cfg.noise_std, rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> ImageBuffer {
        let mut rng = Rng::new(seed);
        ImageBuffer::new(w, h, c, (0..w * h * c).map(|_| rng.below(256) as u8).collect()).unwrap()
    }

    #[test]
    fn pnm_round_trip_with_comment() {
        for c in [1, 3] {
            let img = random_image(5, 3, c, c as u64);
            assert_eq!(decode_pnm(&encode_pnm(&img)).unwrap(), img);
        }
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([7, 9]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.data.clone()), (2, 1, vec![7, 9]));
    }

    #[test]
    fn pnm_rejects_other_formats() {
        assert!(decode_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn gray_replicated_to_three_equal_channels() {
        let t = preprocess_image(&ImageBuffer::filled(6, 4, 1, 128), 8).unwrap();
        assert_eq!(t.shape(), &[3, 8, 8]);
        for i in 0..64 {
            let raw: Vec<f64> = (0..3)
                .map(|c| t.data()[c * 64 + i] * IMAGENET_STD[c] + IMAGENET_MEAN[c])
                .collect();
            assert!((raw[0] - raw[1]).abs() < 1e-12 && (raw[1] - raw[2]).abs() < 1e-12);
            assert!((raw[0] - 128.0 / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn imagenet_mean_normalises_to_zero() {
        let mut img = ImageBuffer::filled(2, 2, 3, 0);
        let r = (0.485f64 * 255.0).round() as u8;
        for p in 0..4 {
            img.data[p * 3] = r;
        }
        let t = preprocess_image(&img, 2).unwrap();
        // 124/255 vs 0.485 differs by under half a gray level
        assert!(t.data()[0].abs() < 0.5 / 255.0 / 0.229 + 1e-12);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = random_image(7, 7, 3, 4);
        assert_eq!(resize(&img, 7, 7).unwrap(), img);
        assert!(resize(&ImageBuffer::filled(0, 3, 1, 0), 4, 4).is_err());
    }

    #[test]
    fn upscale_constant_stays_constant() {
        let img = ImageBuffer::filled(3, 5, 1, 77);
        assert!(resize(&img, 11, 4).unwrap().data.iter().all(|&v| v == 77));
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let img = random_image(8, 8, 1, 1);
        let mut rng = Rng::new(3);
        assert_eq!(augment(&img, &mut rng, &AugmentConfig::none()), img);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = random_image(9, 4, 3, 2);
        assert_ne!(flip_horizontal(&img), img);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn brightness_clamps() {
        let img = ImageBuffer::filled(1, 1, 1, 250);
        assert_eq!(adjust_brightness(&img, 1.2).data, vec![255]);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = random_image(6, 6, 1, 5);
        assert_eq!(rotate(&img, 0.0), img);
    }

    #[test]
    fn rotation_of_constant_is_constant() {
        let img = ImageBuffer::filled(6, 6, 1, 90);
        assert!(rotate(&img, 9.0).data.iter().all(|&v| v == 90));
    }

    #[test]
    fn augmentation_reproducible() {
        let img = random_image(8, 8, 1, 6);
        let cfg = AugmentConfig::default();
        let a = augment(&img, &mut Rng::new(11), &cfg);
        let b = augment(&img, &mut Rng::new(11), &cfg);
        assert_eq!(a, b);
    }
}
