//! Signature image normalization: center-of-mass placement on a fixed canvas,
//! OTSU background removal, inversion, resize, and network-input crops.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit grayscale raster, row-major, dark ink on a light background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!("{height}x{width} image")));
        }
        if pixels.len() != height * width {
            return Err(Error::InvalidDimensions(format!(
                "{height}x{width} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(RawImage {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        RawImage::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        RawImage::new(h as usize, w as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf =
            image::GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
                .expect("buffer matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub resize_height: usize,
    pub resize_width: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Multiplier applied to inverted intensities when building network inputs.
    pub input_scale: f32,
}

impl PreprocessConfig {
    pub fn with_canvas(canvas_height: usize, canvas_width: usize) -> Self {
        PreprocessConfig {
            canvas_height,
            canvas_width,
            resize_height: 170,
            resize_width: 242,
            input_height: 150,
            input_width: 220,
            input_scale: 1.0 / 255.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.canvas_height,
            self.canvas_width,
            self.resize_height,
            self.resize_width,
            self.input_height,
            self.input_width,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(
                "preprocess dimensions must be positive".into(),
            ));
        }
        if self.input_height > self.resize_height
            || self.input_width > self.resize_width
            || self.resize_height > self.canvas_height
            || self.resize_width > self.canvas_width
        {
            return Err(Error::Config(format!(
                "need input {}x{} <= resize {}x{} <= canvas {}x{}",
                self.input_height,
                self.input_width,
                self.resize_height,
                self.resize_width,
                self.canvas_height,
                self.canvas_width
            )));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::Config("input scale must be positive".into()));
        }
        Ok(())
    }
}

/// Inverted, resized image: background exactly 0, ink in (0, 255].
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ProcessedImage {
    pub fn from_raw(img: &RawImage) -> Self {
        ProcessedImage {
            height: img.height,
            width: img.width,
            pixels: img.pixels.iter().map(|&p| f32::from(p)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Back to 8 bits for PNG output; values are already integral.
    pub fn to_raw(&self) -> RawImage {
        RawImage {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|&p| p.round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }
}

/// OTSU's threshold over the 256-bin histogram. Pixels `<= t` form the dark
/// (ink) class. Ties in between-class variance resolve to the smallest `t`.
pub fn otsu_threshold(img: &RawImage) -> Result<u8> {
    let mut hist = [0u64; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let total = img.pixels.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0f64, 0f64);
    let mut best = (f64::NEG_INFINITY, 0u8);
    for (t, &count) in hist.iter().enumerate().take(255) {
        w0 += count as f64;
        sum0 += t as f64 * count as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let var = between_class_variance(w0 / total, w1 / total, mu0, mu1);
        if var > best.0 {
            best = (var, t as u8);
        }
    }
    Ok(best.1)
}

#[inline]
pub(crate) fn between_class_variance(p0: f64, p1: f64, mu0: f64, mu1: f64) -> f64 {
    p0 * p1 * (mu0 - mu1) * (mu0 - mu1)
}

/// `floor(num / den + 1/2)` for non-negative integers, exact.
fn round_div(num: u64, den: u64) -> u64 {
    (2 * num + den) / (2 * den)
}

/// Places the signature on a white canvas so that the center of mass of its
/// binarized foreground lands on the canvas center. Only the foreground
/// bounding box is copied, so translating the signature inside its source
/// image does not change the result.
pub fn center_on_canvas_with_threshold(
    img: &RawImage,
    threshold: u8,
    canvas_height: usize,
    canvas_width: usize,
) -> Result<RawImage> {
    let (mut n, mut sum_r, mut sum_c) = (0u64, 0u64, 0u64);
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..img.height {
        for c in 0..img.width {
            if img.get(r, c) <= threshold {
                n += 1;
                sum_r += r as u64;
                sum_c += c as u64;
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyForeground);
    }
    let (box_h, box_w) = (r1 - r0 + 1, c1 - c0 + 1);
    let does_not_fit = || Error::DoesNotFit {
        sig_h: box_h,
        sig_w: box_w,
        canvas_h: canvas_height,
        canvas_w: canvas_width,
    };
    if box_h > canvas_height || box_w > canvas_width {
        return Err(does_not_fit());
    }
    let com_r = round_div(sum_r, n) as isize;
    let com_c = round_div(sum_c, n) as isize;
    let dy = (canvas_height / 2) as isize - com_r;
    let dx = (canvas_width / 2) as isize - com_c;
    let top = r0 as isize + dy;
    let left = c0 as isize + dx;
    if top < 0
        || left < 0
        || top as usize + box_h > canvas_height
        || left as usize + box_w > canvas_width
    {
        return Err(does_not_fit());
    }
    let mut canvas = RawImage::filled(canvas_height, canvas_width, 255)?;
    for r in 0..box_h {
        let src = &img.pixels[(r0 + r) * img.width + c0..][..box_w];
        let start = (top as usize + r) * canvas_width + left as usize;
        canvas.pixels[start..start + box_w].copy_from_slice(src);
    }
    Ok(canvas)
}

pub fn center_on_canvas(img: &RawImage, cfg: &PreprocessConfig) -> Result<RawImage> {
    let t = otsu_threshold(img)?;
    center_on_canvas_with_threshold(img, t, cfg.canvas_height, cfg.canvas_width)
}

/// Background (`> threshold`) becomes white, then every pixel maps to
/// `255 - I`, leaving a zero background and inverted grayscale ink.
pub fn remove_background_and_invert(img: &RawImage, threshold: u8) -> RawImage {
    RawImage {
        height: img.height,
        width: img.width,
        pixels: img
            .pixels
            .iter()
            .map(|&p| if p > threshold { 0 } else { 255 - p })
            .collect(),
    }
}

/// Corner-aligned source coordinate for output index `i`.
#[inline]
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        0.0
    } else {
        (i * (n_in - 1)) as f64 / (n_out - 1) as f64
    }
}

/// Bilinear resize with corner-aligned sampling, rounded to the nearest level.
pub fn resize(img: &RawImage, target_height: usize, target_width: usize) -> Result<RawImage> {
    if target_height == 0 || target_width == 0 {
        return Err(Error::InvalidDimensions(format!(
            "resize target {target_height}x{target_width}"
        )));
    }
    let xs: Vec<(usize, usize, f64)> = (0..target_width)
        .map(|x| {
            let sx = source_coord(x, img.width, target_width);
            let x0 = sx.floor() as usize;
            (x0, (x0 + 1).min(img.width - 1), sx - x0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(target_height * target_width);
    for y in 0..target_height {
        let sy = source_coord(y, img.height, target_height);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = sy - y0 as f64;
        for &(x0, x1, fx) in &xs {
            let top = f64::from(img.get(y0, x0)) * (1.0 - fx) + f64::from(img.get(y0, x1)) * fx;
            let bottom = f64::from(img.get(y1, x0)) * (1.0 - fx) + f64::from(img.get(y1, x1)) * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    RawImage::new(target_height, target_width, out)
}

/// Canvas placement, background removal, inversion and resize.
pub fn preprocess(img: &RawImage, cfg: &PreprocessConfig) -> Result<ProcessedImage> {
    let t = otsu_threshold(img)?;
    let canvas = center_on_canvas_with_threshold(img, t, cfg.canvas_height, cfg.canvas_width)?;
    let clean = remove_background_and_invert(&canvas, t);
    let small = resize(&clean, cfg.resize_height, cfg.resize_width)?;
    Ok(ProcessedImage::from_raw(&small))
}

/// Copies the `h x w` window at (`top`, `left`) into a `[1, h, w]` tensor,
/// multiplying by `scale`.
pub fn crop_at(
    img: &ProcessedImage,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
    scale: f32,
) -> Result<Tensor<f32>> {
    if h == 0 || w == 0 || top + h > img.height || left + w > img.width {
        return Err(Error::InvalidDimensions(format!(
            "{h}x{w} crop at ({top}, {left}) of a {}x{} image",
            img.height, img.width
        )));
    }
    let mut data = Vec::with_capacity(h * w);
    for r in top..top + h {
        data.extend(
            img.pixels[r * img.width + left..][..w]
                .iter()
                .map(|&p| p * scale),
        );
    }
    Tensor::from_vec(&[1, h, w], data)
}

/// Uniformly drawn valid top-left offset for an `h x w` crop.
pub fn draw_crop_offset<R: Rng + ?Sized>(
    img: &ProcessedImage,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if h == 0 || w == 0 || h > img.height || w > img.width {
        return Err(Error::InvalidDimensions(format!(
            "{h}x{w} crop of a {}x{} image",
            img.height, img.width
        )));
    }
    Ok((
        rng.random_range(0..=img.height - h),
        rng.random_range(0..=img.width - w),
    ))
}

pub fn random_crop(
    img: &ProcessedImage,
    h: usize,
    w: usize,
    seed: u64,
    scale: f32,
) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (top, left) = draw_crop_offset(img, h, w, &mut rng)?;
    crop_at(img, top, left, h, w, scale)
}

pub fn center_crop_offset(img: &ProcessedImage, h: usize, w: usize) -> Result<(usize, usize)> {
    if h == 0 || w == 0 || h > img.height || w > img.width {
        return Err(Error::InvalidDimensions(format!(
            "{h}x{w} crop of a {}x{} image",
            img.height, img.width
        )));
    }
    Ok(((img.height - h) / 2, (img.width - w) / 2))
}

pub fn center_crop(img: &ProcessedImage, h: usize, w: usize, scale: f32) -> Result<Tensor<f32>> {
    let (top, left) = center_crop_offset(img, h, w)?;
    crop_at(img, top, left, h, w, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive sweep straight over the pixel list.
    fn otsu_oracle(img: &RawImage) -> Option<u8> {
        let n = img.pixels().len() as f64;
        let mut best: Option<(f64, u8)> = None;
        for t in 0..=254u8 {
            let (mut n0, mut s0, mut n1, mut s1) = (0f64, 0f64, 0f64, 0f64);
            for &p in img.pixels() {
                if p <= t {
                    n0 += 1.0;
                    s0 += f64::from(p);
                } else {
                    n1 += 1.0;
                    s1 += f64::from(p);
                }
            }
            if n0 == 0.0 || n1 == 0.0 {
                continue;
            }
            let v = between_class_variance(n0 / n, n1 / n, s0 / n0, s1 / n1);
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, t));
            }
        }
        best.map(|(_, t)| t)
    }

    fn img(h: usize, w: usize, px: Vec<u8>) -> RawImage {
        RawImage::new(h, w, px).unwrap()
    }

    #[test]
    fn otsu_two_level_image() {
        let i = img(2, 2, vec![0, 0, 255, 255]);
        let t = otsu_threshold(&i).unwrap();
        assert_eq!(Some(t), otsu_oracle(&i));
        assert_eq!(t, 0, "smallest of the tied thresholds");
    }

    #[test]
    fn otsu_bimodal_populations() {
        let mut px = vec![10u8; 50];
        px.extend(vec![240u8; 50]);
        let i = img(10, 10, px);
        let t = otsu_threshold(&i).unwrap();
        assert!((10..=239).contains(&t));
        assert_eq!(Some(t), otsu_oracle(&i));
    }

    #[test]
    fn otsu_constant_image_is_degenerate() {
        let i = img(2, 2, vec![5; 4]);
        assert!(matches!(
            otsu_threshold(&i),
            Err(Error::DegenerateHistogram)
        ));
    }

    #[test]
    fn single_pixel_lands_on_canvas_center() {
        let mut px = vec![255u8; 9];
        px[0] = 0;
        let i = img(3, 3, px);
        let c = center_on_canvas_with_threshold(&i, 128, 100, 100).unwrap();
        assert_eq!(c.get(50, 50), 0);
        assert_eq!(c.pixels().iter().filter(|&&p| p != 255).count(), 1);
    }

    #[test]
    fn oversized_glyph_does_not_fit() {
        let i = RawImage::filled(300, 300, 0).unwrap();
        assert!(matches!(
            center_on_canvas_with_threshold(&i, 128, 200, 200),
            Err(Error::DoesNotFit { .. })
        ));
    }

    #[test]
    fn inversion_rules() {
        let i = img(1, 3, vec![255, 40, 128]);
        let o = remove_background_and_invert(&i, 128);
        assert_eq!(o.pixels(), &[0, 215, 127]);
        let bg = RawImage::filled(4, 4, 200).unwrap();
        assert!(remove_background_and_invert(&bg, 128)
            .pixels()
            .iter()
            .all(|&p| p == 0));
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = RawImage::filled(100, 100, 77).unwrap();
        let r = resize(&c, 37, 53).unwrap();
        assert!(r.pixels().iter().all(|&p| p == 77));
        let px: Vec<u8> = (0..35).map(|i| (i * 7 % 256) as u8).collect();
        let i = img(5, 7, px);
        assert_eq!(resize(&i, 5, 7).unwrap(), i);
        assert!(matches!(resize(&i, 0, 3), Err(Error::InvalidDimensions(_))));
    }

    #[test]
    fn resize_checkerboard_upscale_matches_bilinear_formula() {
        let px: Vec<u8> = (0..16)
            .map(|i| if (i / 4 + i % 4) % 2 == 0 { 0 } else { 200 })
            .collect();
        let i = img(4, 4, px);
        let r = resize(&i, 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let sy = y as f64 * 3.0 / 7.0;
                let sx = x as f64 * 3.0 / 7.0;
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(3), (x0 + 1).min(3));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let p = |r: usize, c: usize| f64::from(i.get(r, c));
                let v = p(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + p(y0, x1) * (1.0 - fy) * fx
                    + p(y1, x0) * fy * (1.0 - fx)
                    + p(y1, x1) * fy * fx;
                assert!((f64::from(r.get(y, x)) - v).abs() <= 0.5 + 1e-9);
            }
        }
    }

    fn ramp(h: usize, w: usize) -> ProcessedImage {
        ProcessedImage {
            height: h,
            width: w,
            pixels: (0..h * w).map(|i| i as f32).collect(),
        }
    }

    #[test]
    fn crops_of_exact_size_return_whole_image() {
        let p = ramp(150, 220);
        let full = crop_at(&p, 0, 0, 150, 220, 1.0).unwrap();
        for seed in 0..5 {
            assert_eq!(random_crop(&p, 150, 220, seed, 1.0).unwrap(), full);
        }
        assert!(random_crop(&p, 151, 220, 0, 1.0).is_err());
    }

    #[test]
    fn center_crop_offsets_and_corners() {
        let p = ramp(170, 242);
        assert_eq!(center_crop_offset(&p, 150, 220).unwrap(), (10, 11));
        let c = center_crop(&p, 150, 220, 1.0).unwrap();
        for corner in [0.0, 241.0, 169.0 * 242.0, 170.0 * 242.0 - 1.0] {
            assert!(!c.data().contains(&corner));
        }
        assert_eq!(c.data()[75 * 220 + 110], p.pixels()[85 * 242 + 121]);
    }

    #[test]
    fn random_crop_is_reproducible() {
        let p = ramp(170, 242);
        assert_eq!(
            random_crop(&p, 150, 220, 99, 1.0).unwrap(),
            random_crop(&p, 150, 220, 99, 1.0).unwrap()
        );
    }
}
