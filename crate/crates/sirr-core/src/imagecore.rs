//! Primitive image operations shared by every other module.
//!
//! An [`Image`] is a planar (channel-major) f64 raster with values kept in
//! [0, 1] by the clamped operations. All functions here are pure; the
//! differentiable network path has its own graph ops and the routines below
//! double as independent oracles for it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// Fixed 3x3 Laplacian stencil; also the initialization for the learnable
/// multi-scale kernels in the detection network.
pub const LAPLACIAN_KERNEL: [f64; 9] = [0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Vec<f64>, // planar: channel, then row, then column
    height: usize,
    width: usize,
    channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    Reflect,
    Zero,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image { data: vec![0.0; height * width * channels], height, width, channels }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image { data: vec![value; height * width * channels], height, width, channels }
    }

    pub fn from_planar(data: Vec<f64>, height: usize, width: usize, channels: usize) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dims(format!(
                "planar buffer of {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Image { data, height, width, channels })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Image::zeros(height, width, channels);
        for ch in 0..channels {
            for r in 0..height {
                for c in 0..width {
                    img.set(r, c, ch, f(r, c, ch));
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(ch * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.data[(ch * self.height + row) * self.width + col] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel_plane(&self, ch: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[ch * plane..(ch + 1) * plane]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        debug_assert!(self.same_dims(other));
        Image {
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// View as a `[C, H, W]` tensor (copy).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Image {
        let (c, h, w) = t.chw();
        Image { data: t.data().to_vec(), height: h, width: w, channels: c }
    }

    /// Replicate a single channel into `n` identical channels.
    pub fn replicate_channels(&self, n: usize) -> Image {
        debug_assert_eq!(self.channels, 1);
        let mut data = Vec::with_capacity(self.data.len() * n);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Image { data, height: self.height, width: self.width, channels: n }
    }

    /// Luma-weighted grayscale, replicated back to the original channel count.
    pub fn grayscale(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        debug_assert_eq!(self.channels, 3);
        let mut gray = Image::zeros(self.height, self.width, 1);
        for r in 0..self.height {
            for c in 0..self.width {
                let v = 0.299 * self.get(r, c, 0) + 0.587 * self.get(r, c, 1)
                    + 0.114 * self.get(r, c, 2);
                gray.set(r, c, 0, v);
            }
        }
        gray.replicate_channels(3)
    }

    /// Rotate by `turns` quarter-turns counter-clockwise.
    pub fn rot90(&self, turns: u8) -> Image {
        let turns = turns % 4;
        match turns {
            0 => self.clone(),
            1 => {
                let mut out = Image::zeros(self.width, self.height, self.channels);
                for ch in 0..self.channels {
                    for r in 0..self.height {
                        for c in 0..self.width {
                            out.set(self.width - 1 - c, r, ch, self.get(r, c, ch));
                        }
                    }
                }
                out
            }
            2 => {
                let mut out = Image::zeros(self.height, self.width, self.channels);
                for ch in 0..self.channels {
                    for r in 0..self.height {
                        for c in 0..self.width {
                            out.set(self.height - 1 - r, self.width - 1 - c, ch, self.get(r, c, ch));
                        }
                    }
                }
                out
            }
            _ => self.rot90(2).rot90(1),
        }
    }

    pub fn hflip(&self) -> Image {
        let mut out = Image::zeros(self.height, self.width, self.channels);
        for ch in 0..self.channels {
            for r in 0..self.height {
                for c in 0..self.width {
                    out.set(r, self.width - 1 - c, ch, self.get(r, c, ch));
                }
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        debug_assert!(top + height <= self.height && left + width <= self.width);
        let mut out = Image::zeros(height, width, self.channels);
        for ch in 0..self.channels {
            for r in 0..height {
                for c in 0..width {
                    out.set(r, c, ch, self.get(top + r, left + c, ch));
                }
            }
        }
        out
    }

    // ---- 8-bit PNG IO (values map linearly to [0,1], RGB channel order) ----

    pub fn load_png(path: &Path) -> Result<Image> {
        let dynimg = image::open(path)?;
        let rgb = dynimg.to_rgb8();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut img = Image::zeros(h, w, 3);
        for (x, y, p) in rgb.enumerate_pixels() {
            for ch in 0..3 {
                img.set(y as usize, x as usize, ch, p.0[ch] as f64 / 255.0);
            }
        }
        Ok(img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels {
            1 => {
                let mut buf = image::GrayImage::new(self.width as u32, self.height as u32);
                for (x, y, p) in buf.enumerate_pixels_mut() {
                    p.0[0] = to_u8(self.get(y as usize, x as usize, 0));
                }
                buf.save(path)?;
            }
            3 => {
                let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
                for (x, y, p) in buf.enumerate_pixels_mut() {
                    for ch in 0..3 {
                        p.0[ch] = to_u8(self.get(y as usize, x as usize, ch));
                    }
                }
                buf.save(path)?;
            }
            c => {
                return Err(Error::invalid(format!("cannot write {c}-channel PNG")));
            }
        }
        Ok(())
    }
}

/// Odd-sized square convolution kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    taps: Vec<f64>,
    k: usize,
}

impl Kernel2D {
    pub fn new(taps: Vec<f64>, k: usize) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::invalid(format!("kernel size {k} must be odd")));
        }
        if taps.len() != k * k {
            return Err(Error::dims(format!("kernel wants {} taps, got {}", k * k, taps.len())));
        }
        Ok(Kernel2D { taps, k })
    }

    pub fn laplacian() -> Self {
        Kernel2D { taps: LAPLACIAN_KERNEL.to_vec(), k: 3 }
    }

    pub fn identity(k: usize) -> Result<Self> {
        let mut taps = vec![0.0; k * k];
        if k % 2 == 1 {
            taps[(k / 2) * k + k / 2] = 1.0;
        }
        Kernel2D::new(taps, k)
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Power-law brightening: `v -> v^(1/gamma)`.
pub fn gamma_correct(img: &Image, gamma: f64) -> Result<Image> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    Ok(img.map(|v| v.max(0.0).powf(1.0 / gamma)))
}

/// Inverse of [`gamma_correct`]: `v -> v^gamma`.
pub fn inverse_gamma(img: &Image, gamma: f64) -> Result<Image> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    Ok(img.map(|v| v.max(0.0).powf(gamma)))
}

/// Same-size per-channel convolution with an odd square kernel.
pub fn conv2d(img: &Image, kernel: &Kernel2D, pad: Pad) -> Image {
    let k = kernel.size();
    let half = (k / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut out = Image::zeros(h, w, img.channels());
    for ch in 0..img.channels() {
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = r as isize + ky as isize - half;
                        let sx = c as isize + kx as isize - half;
                        let v = match pad {
                            Pad::Reflect => img.get(reflect(sy, h), reflect(sx, w), ch),
                            Pad::Zero => {
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    0.0
                                } else {
                                    img.get(sy as usize, sx as usize, ch)
                                }
                            }
                        };
                        acc += v * kernel.taps()[ky * k + kx];
                    }
                }
                out.set(r, c, ch, acc);
            }
        }
    }
    out
}

/// Corner-aligned bilinear resampling to `(height, width)`.
pub fn bilinear_resize(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    let axis = |n_src: usize, n_dst: usize, i: usize| -> (usize, usize, f64) {
        if n_dst == 1 || n_src == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (n_src - 1) as f64 / (n_dst - 1) as f64;
        let i0 = (s.floor() as usize).min(n_src - 1);
        let i1 = (i0 + 1).min(n_src - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Image::zeros(height, width, img.channels());
    for ch in 0..img.channels() {
        for r in 0..height {
            let (y0, y1, fy) = axis(img.height(), height, r);
            for c in 0..width {
                let (x0, x1, fx) = axis(img.width(), width, c);
                let top = img.get(y0, x0, ch) + fx * (img.get(y0, x1, ch) - img.get(y0, x0, ch));
                let bot = img.get(y1, x0, ch) + fx * (img.get(y1, x1, ch) - img.get(y1, x0, ch));
                out.set(r, c, ch, top + fy * (bot - top));
            }
        }
    }
    Ok(out)
}

/// Convenience wrapper for the pyramid scales 1/2, 1/4, 1/8.
pub fn downscale_by(img: &Image, divisor: usize) -> Result<Image> {
    bilinear_resize(img, img.height() / divisor, img.width() / divisor)
}

/// Max-normalized absolute Laplacian response, reduced over channels.
///
/// The stencil is evaluated on the interior only (the one-pixel border is
/// zero) so constant and affine inputs map to exactly zero. Division is
/// guarded: an all-zero response stays all-zero.
pub fn laplacian_map(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = Image::zeros(h, w, 1);
    if h < 3 || w < 3 {
        return out;
    }
    for ch in 0..img.channels() {
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                let v = 4.0 * img.get(r, c, ch)
                    - img.get(r - 1, c, ch)
                    - img.get(r + 1, c, ch)
                    - img.get(r, c - 1, ch)
                    - img.get(r, c + 1, ch);
                let v = v.abs();
                if v > out.get(r, c, 0) {
                    out.set(r, c, 0, v);
                }
            }
        }
    }
    normalize_by_max(out)
}

/// Gradient-magnitude map from forward differences (backward at the last
/// row/column), max over channels, normalized like [`laplacian_map`].
pub fn edge_map(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = Image::zeros(h, w, 1);
    for ch in 0..img.channels() {
        for r in 0..h {
            for c in 0..w {
                let dx = if c + 1 < w {
                    img.get(r, c + 1, ch) - img.get(r, c, ch)
                } else if w > 1 {
                    img.get(r, c, ch) - img.get(r, c - 1, ch)
                } else {
                    0.0
                };
                let dy = if r + 1 < h {
                    img.get(r + 1, c, ch) - img.get(r, c, ch)
                } else if h > 1 {
                    img.get(r, c, ch) - img.get(r - 1, c, ch)
                } else {
                    0.0
                };
                let v = (dx * dx + dy * dy).sqrt();
                if v > out.get(r, c, 0) {
                    out.set(r, c, 0, v);
                }
            }
        }
    }
    normalize_by_max(out)
}

fn normalize_by_max(mut map: Image) -> Image {
    let max = map.data().iter().fold(0.0f64, |m, &v| m.max(v));
    // responses at rounding-noise level count as zero, so constant and
    // affine inputs normalize to an all-zero map rather than amplified noise
    if max <= 1e-12 {
        return Image::zeros(map.height(), map.width(), 1);
    }
    for v in map.data_mut() {
        *v /= max;
    }
    map
}

/// Reflect-pad so both spatial dims are multiples of `n`; returns the padded
/// image and the original size for [`crop_back`].
pub fn pad_to_multiple(img: &Image, n: usize) -> (Image, (usize, usize)) {
    let (h, w) = (img.height(), img.width());
    let ph = (n - h % n) % n;
    let pw = (n - w % n) % n;
    if ph == 0 && pw == 0 {
        return (img.clone(), (h, w));
    }
    let mut out = Image::zeros(h + ph, w + pw, img.channels());
    for ch in 0..img.channels() {
        for r in 0..h + ph {
            for c in 0..w + pw {
                out.set(r, c, ch, img.get(reflect(r as isize, h), reflect(c as isize, w), ch));
            }
        }
    }
    (out, (h, w))
}

pub fn crop_back(img: &Image, dims: (usize, usize)) -> Image {
    img.crop(0, 0, dims.0, dims.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = crate::rng::rng_from_seed(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn gamma_fixed_points_and_value() {
        let img = Image::from_planar(vec![0.0, 1.0, 0.25], 1, 3, 1).unwrap();
        let out = gamma_correct(&img, 2.2).unwrap();
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert_eq!(out.get(0, 1, 0), 1.0);
        assert!((out.get(0, 2, 0) - 0.25f64.powf(1.0 / 2.2)).abs() < 1e-12);
        assert!((out.get(0, 2, 0) - 0.5326).abs() < 1e-4);
    }

    #[test]
    fn gamma_round_trip() {
        let img = Image::filled(2, 2, 3, 0.7);
        let back = inverse_gamma(&gamma_correct(&img, 2.2).unwrap(), 2.2).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-6);
        // 256-value grid
        let grid = Image::from_fn(1, 256, 1, |_, c, _| c as f64 / 255.0);
        let rt = gamma_correct(&inverse_gamma(&grid, 2.2).unwrap(), 2.2).unwrap();
        assert!(rt.max_abs_diff(&grid) < 1e-6);
    }

    #[test]
    fn gamma_rejects_non_positive() {
        let img = Image::filled(1, 1, 1, 0.5);
        assert!(gamma_correct(&img, 0.0).is_err());
        assert!(gamma_correct(&img, -1.0).is_err());
        assert!(inverse_gamma(&img, 0.0).is_err());
    }

    #[test]
    fn conv_identity_and_zero_sum() {
        let img = rand_image(6, 7, 3, 1);
        let id = Kernel2D::identity(3).unwrap();
        assert!(conv2d(&img, &id, Pad::Reflect).max_abs_diff(&img) < 1e-15);

        let constant = Image::filled(5, 5, 1, 0.42);
        let lap = Kernel2D::laplacian();
        let out = conv2d(&constant, &lap, Pad::Reflect);
        assert!(out.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn conv_box_on_one_hot_matches_sliding_window_oracle() {
        let mut img = Image::zeros(7, 7, 1);
        img.set(3, 3, 0, 1.0);
        let boxk = Kernel2D::new(vec![1.0 / 9.0; 9], 3).unwrap();
        let out = conv2d(&img, &boxk, Pad::Reflect);
        // direct sliding-window evaluation
        for r in 0..7 {
            for c in 0..7 {
                let mut want = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let sy = reflect(r as isize + dy, 7);
                        let sx = reflect(c as isize + dx, 7);
                        want += img.get(sy, sx, 0) / 9.0;
                    }
                }
                assert!((out.get(r, c, 0) - want).abs() < 1e-15);
                let expected = if r.abs_diff(3) <= 1 && c.abs_diff(3) <= 1 { 1.0 / 9.0 } else { 0.0 };
                assert!((out.get(r, c, 0) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernel() {
        assert!(Kernel2D::new(vec![0.25; 4], 2).is_err());
    }

    #[test]
    fn conv_linearity() {
        let x = rand_image(16, 16, 1, 2);
        let y = rand_image(16, 16, 1, 3);
        let k = Kernel2D::new(
            (0..9).map(|i| (i as f64 - 4.0) * 0.21).collect(),
            3,
        )
        .unwrap();
        let (a, b) = (0.7, -1.3);
        let combo = x.zip_map(&y, |xv, yv| a * xv + b * yv);
        let lhs = conv2d(&combo, &k, Pad::Reflect);
        let cx = conv2d(&x, &k, Pad::Reflect);
        let cy = conv2d(&y, &k, Pad::Reflect);
        let rhs = cx.zip_map(&cy, |xv, yv| a * xv + b * yv);
        assert!(lhs.max_abs_diff(&rhs) < 1e-6);
    }

    #[test]
    fn resize_constant_ramp_and_hand_case() {
        let constant = Image::filled(5, 9, 3, 0.613);
        let out = bilinear_resize(&constant, 3, 4).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.613).abs() < 1e-12));

        // 2x2 [[0,1],[0,1]] -> 2x4: rows interpolate linearly 0..1
        let img = Image::from_planar(vec![0.0, 1.0, 0.0, 1.0], 2, 2, 1).unwrap();
        let up = bilinear_resize(&img, 2, 4).unwrap();
        for r in 0..2 {
            for (c, want) in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].iter().enumerate() {
                assert!((up.get(r, c, 0) - want).abs() < 1e-12);
            }
        }

        // affine ramp round trip
        let ramp = Image::from_fn(8, 8, 1, |r, c, _| 0.07 * r as f64 + 0.05 * c as f64);
        let down = bilinear_resize(&ramp, 4, 4).unwrap();
        let back = bilinear_resize(&down, 8, 8).unwrap();
        assert!(back.max_abs_diff(&ramp) < 1e-6);
    }

    #[test]
    fn resize_rejects_zero_target() {
        let img = Image::filled(4, 4, 1, 0.5);
        assert!(bilinear_resize(&img, 0, 4).is_err());
        assert!(bilinear_resize(&img, 4, 0).is_err());
    }

    #[test]
    fn laplacian_map_cases() {
        let constant = Image::filled(8, 8, 3, 0.77);
        assert!(laplacian_map(&constant).data().iter().all(|&v| v == 0.0));

        let ramp = Image::from_fn(8, 8, 3, |r, c, _| 0.02 * r as f64 + 0.03 * c as f64);
        assert!(laplacian_map(&ramp).data().iter().all(|&v| v.abs() < 1e-12));

        let mut hot = Image::zeros(9, 9, 1);
        hot.set(4, 4, 0, 1.0);
        let map = laplacian_map(&hot);
        assert_eq!(map.get(4, 4, 0), 1.0); // center response 4 normalized to 1
        assert!((map.get(4, 5, 0) - 0.25).abs() < 1e-12);

        let random = rand_image(12, 12, 3, 4);
        let map = laplacian_map(&random);
        assert!(map.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn edge_map_cases() {
        let constant = Image::filled(6, 6, 3, 0.2);
        assert!(edge_map(&constant).data().iter().all(|&v| v == 0.0));

        // vertical step 0|1 between columns 2 and 3
        let step = Image::from_fn(6, 6, 1, |_, c, _| if c >= 3 { 1.0 } else { 0.0 });
        let map = edge_map(&step);
        for r in 0..6 {
            assert_eq!(map.get(r, 2, 0), 1.0);
            assert_eq!(map.get(r, 0, 0), 0.0);
            assert_eq!(map.get(r, 4, 0), 0.0);
        }

        let ramp = Image::from_fn(6, 6, 1, |r, c, _| 0.04 * r as f64 + 0.01 * c as f64);
        let map = edge_map(&ramp);
        assert!(map.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn pad_crop_round_trip() {
        let img = rand_image(13, 21, 3, 5);
        let (padded, dims) = pad_to_multiple(&img, 8);
        assert_eq!(padded.height() % 8, 0);
        assert_eq!(padded.width() % 8, 0);
        assert_eq!(padded.height(), 16);
        assert_eq!(padded.width(), 24);
        let back = crop_back(&padded, dims);
        assert!(back.max_abs_diff(&img) < 1e-15);
    }

    #[test]
    fn png_round_trip_is_exact_at_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        // values on the u8 lattice survive a save/load round trip exactly
        let img = Image::from_fn(5, 7, 3, |r, c, ch| {
            ((r * 31 + c * 7 + ch * 11) % 256) as f64 / 255.0
        });
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn rotations_and_flip() {
        let img = rand_image(4, 6, 3, 6);
        assert!(img.rot90(1).rot90(1).rot90(1).rot90(1).max_abs_diff(&img) < 1e-15);
        assert!(img.hflip().hflip().max_abs_diff(&img) < 1e-15);
        assert_eq!(img.rot90(1).height(), 6);
        assert_eq!(img.rot90(1).width(), 4);
        assert_eq!(img.rot90(2).get(0, 0, 0), img.get(3, 5, 0));
    }

    #[test]
    fn grayscale_channels_identical() {
        let img = rand_image(4, 4, 3, 7);
        let gray = img.grayscale();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(gray.get(r, c, 0), gray.get(r, c, 1));
                assert_eq!(gray.get(r, c, 0), gray.get(r, c, 2));
            }
        }
    }
}
