//! Raw Bayer synthesis, packed/masked representations, sensor noise and PSNR.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use stereoisp_tensor::{Scalar, Shape, Tensor};

use crate::error::{dims, invalid, Error, Result};

/// Color index within an RGB triple.
pub const RED: usize = 0;
pub const GREEN: usize = 1;
pub const BLUE: usize = 2;

/// Fixed-point scale for 16-bit mosaic PNGs (headroom up to 8.0 for noisy values).
pub const MOSAIC_PNG_SCALE: f32 = 8192.0;

/// Color-filter layout. Only RGGB (red at the top-left) is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfaPattern {
    #[default]
    Rggb,
}

impl CfaPattern {
    /// Color sampled at `(y, x)`.
    #[inline]
    pub fn color_at(self, y: usize, x: usize) -> usize {
        match self {
            CfaPattern::Rggb => match (y % 2, x % 2) {
                (0, 0) => RED,
                (1, 1) => BLUE,
                _ => GREEN,
            },
        }
    }
}

fn check_even(height: usize, width: usize) -> Result<()> {
    if height < 2 || width < 2 || height % 2 != 0 || width % 2 != 0 {
        return Err(dims(format!("image must have even dimensions >= 2, got {height}x{width}")));
    }
    Ok(())
}

/// Planar RGB image, values nominally in `[0, 1]`.
///
/// Images built from files or ground truth are validated; noisy images
/// produced by [`add_noise`] may exceed 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_even(height, width)?;
        if data.len() != 3 * height * width {
            return Err(dims(format!("{} values for a 3x{height}x{width} image", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("RGB value {v} outside [0, 1]")));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Window `[y0, y0 + h) x [x0, x0 + w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(dims(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        check_even(h, w)?;
        let data = (0..3)
            .flat_map(|c| (0..h).flat_map(move |y| (0..w).map(move |x| (c, y0 + y, x0 + x))))
            .map(|(c, y, x)| self.get(c, y, x))
            .collect();
        Ok(RgbImage { height: h, width: w, data })
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|v| T::lit(*v as f64)).collect();
        Tensor::new(Shape::new(1, 3, self.height, self.width), data).expect("sized by construction")
    }

    /// Batch item `n` of an N x 3 x H x W tensor, clamped to `[0, 1]`.
    pub fn from_tensor_clamped<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.c != 3 || n >= s.n {
            return Err(dims(format!("cannot take RGB image {n} from tensor {s}")));
        }
        let len = 3 * s.plane();
        let data = t.data()[n * len..(n + 1) * len].iter().map(|v| (v.as_f64() as f32).clamp(0.0, 1.0)).collect();
        Self::new(s.h, s.w, data)
    }

    /// Reads an 8-bit RGB PNG, scaling by 1/255. Odd trailing rows/columns
    /// are dropped so the result has even dimensions.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
        let (w, h) = (img.width() as usize & !1, img.height() as usize & !1);
        Self::from_fn(h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
    }

    /// Writes an 8-bit RGB PNG; values are clipped to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                px[c] = to_u8(self.get(c, y as usize, x as usize));
            }
        }
        img.save(path).map_err(|e| Error::image(path, e))
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantize_8bit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = to_u8(*v) as f32 / 255.0);
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel raw measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct BayerMosaic {
    height: usize,
    width: usize,
    data: Vec<f32>,
    pattern: CfaPattern,
}

impl BayerMosaic {
    /// Negative values are clamped to 0.
    pub fn new(height: usize, width: usize, mut data: Vec<f32>, pattern: CfaPattern) -> Result<Self> {
        check_even(height, width)?;
        if data.len() != height * width {
            return Err(dims(format!("{} values for a {height}x{width} mosaic", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("mosaic contains non-finite values"));
        }
        data.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(BayerMosaic { height, width, data, pattern })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pattern(&self) -> CfaPattern {
        self.pattern
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 % 2 != 0 || x0 % 2 != 0 {
            return Err(invalid(format!("crop offset ({y0}, {x0}) would break the Bayer phase")));
        }
        if y0 + h > self.height || x0 + w > self.width {
            return Err(dims(format!("crop {h}x{w} at ({y0}, {x0}) exceeds {}x{}", self.height, self.width)));
        }
        let data = (0..h).flat_map(|y| (0..w).map(move |x| (y0 + y, x0 + x))).map(|(y, x)| self.get(y, x)).collect();
        Self::new(h, w, data, self.pattern)
    }

    /// 1 x 1 x H x W tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|v| T::lit(*v as f64)).collect();
        Tensor::new(Shape::new(1, 1, self.height, self.width), data).expect("sized by construction")
    }

    /// 16-bit grayscale PNG holding `round(v * MOSAIC_PNG_SCALE)`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(self.width as u32, self.height as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            px[0] = (self.get(y as usize, x as usize) * MOSAIC_PNG_SCALE).round().clamp(0.0, 65535.0) as u16;
        }
        img.save(path).map_err(|e| Error::image(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        let img = match img {
            image::DynamicImage::ImageLuma16(g) => g,
            other => {
                return Err(invalid(format!(
                    "{}: mosaic must be a 16-bit grayscale PNG, got {:?}",
                    path.display(),
                    other.color()
                )))
            }
        };
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.pixels().map(|p| p[0] as f32 / MOSAIC_PNG_SCALE).collect();
        Self::new(h, w, data, CfaPattern::Rggb)
    }
}

/// Keeps one color per pixel according to the pattern. No filtering.
pub fn bayer_mosaic(image: &RgbImage, pattern: CfaPattern) -> Result<BayerMosaic> {
    let (h, w) = (image.height, image.width);
    let data = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| image.get(pattern.color_at(y, x), y, x)).collect();
    BayerMosaic::new(h, w, data, pattern)
}

/// 0/1 indicator planes (R, G, B) of the pattern, each `h * w` long.
pub fn cfa_masks(pattern: CfaPattern, h: usize, w: usize) -> [Vec<f32>; 3] {
    let mut masks = [vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]];
    for y in 0..h {
        for x in 0..w {
            masks[pattern.color_at(y, x)][y * w + x] = 1.0;
        }
    }
    masks
}

/// 1 x 3 x H x W tensor with each raw sample in its own color channel.
pub fn mask_mosaic(mosaic: &BayerMosaic) -> Tensor<f32> {
    let (h, w) = (mosaic.height, mosaic.width);
    let masks = cfa_masks(mosaic.pattern, h, w);
    let data = masks.iter().flat_map(|m| m.iter().zip(&mosaic.data).map(|(m, v)| m * v)).collect();
    Tensor::new(Shape::new(1, 3, h, w), data).expect("sized by construction")
}

/// 1 x 4 x H/2 x W/2 tensor with channels (R, G1, G2, B) for RGGB.
pub fn pack_mosaic(mosaic: &BayerMosaic) -> Tensor<f32> {
    stereoisp_tensor::pixel_unshuffle(&mosaic.to_tensor(), 2).expect("even dimensions by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseModel {
    /// Additive white noise with standard deviation `sigma` (normalized units).
    Gaussian { sigma: f64 },
    /// Shot noise with `photons` expected photons at full scale.
    Poisson { photons: f64 },
    PoissonGaussian { photons: f64, sigma: f64 },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let (photons, sigma) = match *self {
            NoiseModel::Gaussian { sigma } => (None, sigma),
            NoiseModel::Poisson { photons } => (Some(photons), 0.0),
            NoiseModel::PoissonGaussian { photons, sigma } => (Some(photons), sigma),
        };
        if let Some(l) = photons {
            if !(l > 0.0 && l.is_finite()) {
                return Err(invalid(format!("photon count must be positive, got {l}")));
            }
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("gaussian sigma must be non-negative, got {sigma}")));
        }
        Ok(())
    }

    /// Scalar noise level fed to the network as an extra input plane.
    pub fn level(&self) -> f32 {
        (match *self {
            NoiseModel::Gaussian { sigma } => sigma,
            NoiseModel::Poisson { photons } => 1.0 / photons.sqrt(),
            NoiseModel::PoissonGaussian { photons, sigma } => (1.0 / photons + sigma * sigma).sqrt(),
        }) as f32
    }
}

/// Images that [`add_noise`] can corrupt.
pub trait Noisy: Sized {
    fn samples(&self) -> &[f32];
    fn with_samples(&self, samples: Vec<f32>) -> Self;
}

impl Noisy for BayerMosaic {
    fn samples(&self) -> &[f32] {
        &self.data
    }

    fn with_samples(&self, samples: Vec<f32>) -> Self {
        BayerMosaic { data: samples, ..self.clone() }
    }
}

impl Noisy for RgbImage {
    fn samples(&self) -> &[f32] {
        &self.data
    }

    fn with_samples(&self, samples: Vec<f32>) -> Self {
        RgbImage { height: self.height, width: self.width, data: samples }
    }
}

/// Corrupts `clean` with the given model. `Poisson(lambda * x) / lambda`
/// for shot noise, `x + N(0, sigma^2)` for read noise, both for the mixed
/// model. Negatives clamp to 0; values above 1 are kept.
pub fn add_noise<I: Noisy>(clean: &I, model: &NoiseModel, seed: u64) -> Result<I> {
    model.validate()?;
    let src = clean.samples();
    if let Some(v) = src.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!("clean value {v} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (photons, sigma) = match *model {
        NoiseModel::Gaussian { sigma } => (None, sigma),
        NoiseModel::Poisson { photons } => (Some(photons), 0.0),
        NoiseModel::PoissonGaussian { photons, sigma } => (Some(photons), sigma),
    };
    let mut out = Vec::with_capacity(src.len());
    for &x in src {
        let mut y = x as f64;
        if let Some(l) = photons {
            let rate = l * y;
            y = if rate > 0.0 {
                let d = Poisson::new(rate).map_err(|e| invalid(format!("poisson rate {rate}: {e}")))?;
                d.sample(&mut rng) / l
            } else {
                0.0
            };
        }
        if sigma > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            y += sigma * z;
        }
        out.push(y.max(0.0) as f32);
    }
    Ok(clean.with_samples(out))
}

/// `10 log10(max^2 / MSE)` in dB; `f64::INFINITY` when the images match.
pub fn psnr(output: &RgbImage, reference: &RgbImage, max_value: f64) -> Result<f64> {
    if (output.height, output.width) != (reference.height, reference.width) {
        return Err(dims(format!(
            "psnr of {}x{} against {}x{}",
            output.height, output.width, reference.height, reference.width
        )));
    }
    psnr_slices(&output.data, &reference.data, max_value)
}

pub fn psnr_slices(output: &[f32], reference: &[f32], max_value: f64) -> Result<f64> {
    if output.len() != reference.len() || output.is_empty() {
        return Err(dims(format!("psnr over {} vs {} values", output.len(), reference.len())));
    }
    if !(max_value > 0.0) {
        return Err(invalid(format!("psnr peak value must be positive, got {max_value}")));
    }
    let mse = output.iter().zip(reference).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>()
        / output.len() as f64;
    Ok(psnr_from_mse(mse, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

/// Value written to reports in place of an infinite PSNR.
pub const PSNR_SENTINEL_DB: f64 = 100.0;

pub fn reportable_db(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        PSNR_SENTINEL_DB
    }
}

/// Bilinear demosaicking, used for previews.
///
/// Missing colors are the mean of the nearest same-color neighbors: the
/// 4-connected ones when any carries the color, the diagonals otherwise.
pub fn demosaic_bilinear(mosaic: &BayerMosaic) -> RgbImage {
    let (h, w) = (mosaic.height as isize, mosaic.width as isize);
    let p = mosaic.pattern;
    const CROSS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    const DIAG: [(isize, isize); 4] = [(-1, -1), (-1, 1), (1, -1), (1, 1)];
    let mut data = vec![0.0f32; 3 * (h * w) as usize];
    for y in 0..h {
        for x in 0..w {
            let own = p.color_at(y as usize, x as usize);
            for c in 0..3 {
                let v = if c == own {
                    mosaic.get(y as usize, x as usize)
                } else {
                    let avg = |offsets: &[(isize, isize)]| {
                        let (mut sum, mut n) = (0.0f32, 0);
                        for (dy, dx) in offsets {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy >= 0 && xx >= 0 && yy < h && xx < w && p.color_at(yy as usize, xx as usize) == c {
                                sum += mosaic.get(yy as usize, xx as usize);
                                n += 1;
                            }
                        }
                        (n > 0).then(|| sum / n as f32)
                    };
                    avg(&CROSS).or_else(|| avg(&DIAG)).unwrap_or(0.0)
                };
                data[((c as isize * h + y) * w + x) as usize] = v.clamp(0.0, 1.0);
            }
        }
    }
    RgbImage { height: h as usize, width: w as usize, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, v: f32) -> RgbImage {
        RgbImage::from_fn(h, w, |_, _, _| v).unwrap()
    }

    #[test]
    fn constant_gray_mosaic() {
        let m = bayer_mosaic(&gray(4, 6, 0.5), CfaPattern::Rggb).unwrap();
        assert!(m.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn defining_pattern() {
        let img = RgbImage::from_fn(2, 2, |c, y, x| (c * 4 + y * 2 + x) as f32 / 16.0).unwrap();
        let m = bayer_mosaic(&img, CfaPattern::Rggb).unwrap();
        assert_eq!(m.data(), &[img.get(RED, 0, 0), img.get(GREEN, 0, 1), img.get(GREEN, 1, 0), img.get(BLUE, 1, 1)]);
    }

    #[test]
    fn odd_dimensions_rejected() {
        assert!(RgbImage::from_fn(3, 4, |_, _, _| 0.0).is_err());
        assert!(BayerMosaic::new(2, 3, vec![0.0; 6], CfaPattern::Rggb).is_err());
    }

    #[test]
    fn masks_place_values_by_color() {
        let m = BayerMosaic::new(4, 4, vec![1.0; 16], CfaPattern::Rggb).unwrap();
        let t = mask_mosaic(&m);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(t.at(0, RED, y, x), if y % 2 == 0 && x % 2 == 0 { 1.0 } else { 0.0 });
                assert_eq!(t.at(0, BLUE, y, x), if y % 2 == 1 && x % 2 == 1 { 1.0 } else { 0.0 });
            }
        }
        let greens = (0..16).filter(|i| t.data()[16 + i] != 0.0).count();
        assert_eq!(greens, 2 * 16 / 4);
    }

    #[test]
    fn pack_of_2x2() {
        let m = BayerMosaic::new(2, 2, vec![0.1, 0.2, 0.3, 0.4], CfaPattern::Rggb).unwrap();
        assert_eq!(pack_mosaic(&m).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn noise_level_channel() {
        assert_eq!(NoiseModel::Gaussian { sigma: 0.1 }.level(), 0.1);
        assert!((NoiseModel::Poisson { photons: 100.0 }.level() - 0.1).abs() < 1e-7);
        let mixed = NoiseModel::PoissonGaussian { photons: 100.0, sigma: 0.1 }.level();
        assert!((mixed - 0.02f32.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn noise_rejects_bad_parameters() {
        let m = bayer_mosaic(&gray(2, 2, 0.5), CfaPattern::Rggb).unwrap();
        assert!(add_noise(&m, &NoiseModel::Poisson { photons: 0.0 }, 1).is_err());
        assert!(add_noise(&m, &NoiseModel::Poisson { photons: -3.0 }, 1).is_err());
        assert!(add_noise(&m, &NoiseModel::Gaussian { sigma: -0.1 }, 1).is_err());
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = RgbImage::from_fn(4, 4, |c, y, x| ((c + y + x) % 5) as f32 / 4.0).unwrap();
        assert_eq!(add_noise(&img, &NoiseModel::Gaussian { sigma: 0.0 }, 9).unwrap(), img);
    }

    #[test]
    fn noise_is_seeded() {
        let m = bayer_mosaic(&gray(8, 8, 0.3), CfaPattern::Rggb).unwrap();
        let model = NoiseModel::PoissonGaussian { photons: 10.0, sigma: 0.05 };
        assert_eq!(add_noise(&m, &model, 5).unwrap(), add_noise(&m, &model, 5).unwrap());
        assert_ne!(add_noise(&m, &model, 5).unwrap(), add_noise(&m, &model, 6).unwrap());
        assert!(add_noise(&m, &model, 5).unwrap().data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn psnr_shape_mismatch() {
        assert!(psnr(&gray(2, 2, 0.0), &gray(2, 4, 0.0), 1.0).is_err());
        assert!(psnr(&gray(2, 2, 0.0), &gray(2, 2, 0.0), 0.0).is_err());
    }

    #[test]
    fn bilinear_demosaic_of_flat_field_is_flat() {
        let m = bayer_mosaic(&gray(6, 8, 0.25), CfaPattern::Rggb).unwrap();
        let rgb = demosaic_bilinear(&m);
        assert!(rgb.data().iter().all(|v| (*v - 0.25).abs() < 1e-7));
    }
}
