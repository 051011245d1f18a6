//! Disparity maps, backward warping of the secondary view onto the primary
//! view, and a block-matching disparity estimator.
//!
//! Convention: the left camera is primary. A point at column `x` in the
//! left image appears at `x - d` in the right image, so warping samples the
//! secondary at `(y, x - D(y, x))`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dims, invalid, Error, Result};
use crate::raw::BayerMosaic;

/// Scale of the 16-bit disparity PNG encoding (KITTI devkit convention).
pub const DISPARITY_PNG_SCALE: f32 = 256.0;

/// Per-pixel horizontal disparity (pixels) with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
    valid: Vec<bool>,
}

impl DisparityMap {
    /// Invalid entries are stored as 0.
    pub fn new(height: usize, width: usize, mut values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != height * width || valid.len() != height * width {
            return Err(dims(format!(
                "{}/{} disparity values/flags for {height}x{width}",
                values.len(),
                valid.len()
            )));
        }
        for (v, ok) in values.iter_mut().zip(&valid) {
            if !*ok {
                *v = 0.0;
            } else if !(v.is_finite() && *v >= 0.0 && (*v as f64) < width as f64) {
                return Err(invalid(format!("valid disparity {v} outside [0, {width})")));
            }
        }
        Ok(DisparityMap { height, width, values, valid })
    }

    pub fn constant(height: usize, width: usize, d: f32) -> Result<Self> {
        Self::new(height, width, vec![d; height * width], vec![true; height * width])
    }

    pub fn invalid(height: usize, width: usize) -> Self {
        DisparityMap { height, width, values: vec![0.0; height * width], valid: vec![false; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Disparity at `(y, x)` if valid.
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Option<f32> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.values[i])
    }

    /// Window of the map. Disparities keep their values; entries that would
    /// point past the window's own width are invalidated.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(dims(format!("crop {h}x{w} at ({y0}, {x0}) exceeds {}x{}", self.height, self.width)));
        }
        let mut values = Vec::with_capacity(h * w);
        let mut valid = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let i = y * self.width + x;
                let ok = self.valid[i] && (self.values[i] as f64) < w as f64;
                values.push(if ok { self.values[i] } else { 0.0 });
                valid.push(ok);
            }
        }
        Self::new(h, w, values, valid)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// 16-bit grayscale PNG, `round(d * 256)`, 0 for invalid pixels.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(self.width as u32, self.height as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            px[0] = match self.get(y as usize, x as usize) {
                Some(d) => (d * DISPARITY_PNG_SCALE).round().clamp(0.0, 65535.0) as u16,
                None => 0,
            };
        }
        img.save(path).map_err(|e| Error::image(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpMode {
    /// Linear interpolation along rows of the flat mosaic.
    #[default]
    Raw,
    /// Each packed color plane is warped at half resolution with `D / 2`,
    /// which keeps every sample in its own Bayer phase.
    Packed,
}

/// Value given to pixels that receive no warped sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillPolicy {
    /// Copy the primary mosaic's own value.
    #[default]
    Primary,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub image: BayerMosaic,
    /// True where the pixel holds a warped sample.
    pub coverage: Vec<bool>,
    pub fill: FillPolicy,
}

/// Linear interpolation of `row` at real position `pos`; `None` outside
/// `[0, len - 1]`.
#[inline]
fn lerp_row(pos: f64, len: usize, sample: impl Fn(usize) -> f32) -> Option<f32> {
    if !(pos >= 0.0) || pos > (len - 1) as f64 {
        return None;
    }
    let x0 = pos.floor() as usize;
    let t = pos - x0 as f64;
    if t == 0.0 {
        return Some(sample(x0));
    }
    let (a, b) = (sample(x0) as f64, sample(x0 + 1) as f64);
    Some((a * (1.0 - t) + b * t) as f32)
}

/// Resamples `secondary` into the primary view: `W(y, x) = S(y, x - D(y, x))`.
pub fn warp_backward(
    secondary: &BayerMosaic,
    disparity: &DisparityMap,
    mode: WarpMode,
    fill: FillPolicy,
    primary: Option<&BayerMosaic>,
) -> Result<WarpResult> {
    let (h, w) = (secondary.height(), secondary.width());
    if (disparity.height, disparity.width) != (h, w) {
        return Err(dims(format!("disparity {}x{} vs secondary {h}x{w}", disparity.height, disparity.width)));
    }
    if let Some(p) = primary {
        if (p.height(), p.width()) != (h, w) {
            return Err(dims(format!("primary {}x{} vs secondary {h}x{w}", p.height(), p.width())));
        }
    }
    if fill == FillPolicy::Primary && primary.is_none() {
        return Err(invalid("fill policy `primary` needs the primary mosaic"));
    }

    let mut data = vec![0.0f32; h * w];
    let mut coverage = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sampled = disparity.get(y, x).and_then(|d| match mode {
                WarpMode::Raw => lerp_row(x as f64 - d as f64, w, |xx| secondary.get(y, xx)),
                WarpMode::Packed => {
                    let phase = x % 2;
                    let pos = (x / 2) as f64 - d as f64 / 2.0;
                    lerp_row(pos, w / 2, |j| secondary.get(y, 2 * j + phase))
                }
            });
            match sampled {
                Some(v) => {
                    data[i] = v;
                    coverage[i] = true;
                }
                None => {
                    data[i] = match fill {
                        FillPolicy::Primary => primary.expect("checked above").get(y, x),
                        FillPolicy::Zero => 0.0,
                    }
                }
            }
        }
    }
    Ok(WarpResult { image: BayerMosaic::new(h, w, data, secondary.pattern())?, coverage, fill })
}

/// Half-resolution green plane: mean of the two packed green channels.
fn green_plane(m: &BayerMosaic) -> Vec<f64> {
    let (hh, hw) = (m.height() / 2, m.width() / 2);
    let mut out = Vec::with_capacity(hh * hw);
    for i in 0..hh {
        for j in 0..hw {
            out.push(0.5 * (m.get(2 * i, 2 * j + 1) as f64 + m.get(2 * i + 1, 2 * j) as f64));
        }
    }
    out
}

/// Sum-of-absolute-differences block matching on the half-resolution green
/// plane.
///
/// `max_disp` counts half-resolution steps; returned disparities are in
/// full-resolution pixels (`2 * d`), nearest-neighbor upsampled. Ties go to
/// the smallest disparity, and a border of `block / 2` half-resolution
/// pixels is marked invalid.
pub fn estimate_disparity_blockmatch(
    left: &BayerMosaic,
    right: &BayerMosaic,
    max_disp: usize,
    block: usize,
) -> Result<DisparityMap> {
    let (h, w) = (left.height(), left.width());
    if (right.height(), right.width()) != (h, w) {
        return Err(dims(format!("left {h}x{w} vs right {}x{}", right.height(), right.width())));
    }
    let (hh, hw) = (h / 2, w / 2);
    if max_disp == 0 {
        return Err(invalid("max_disp must be at least 1"));
    }
    if max_disp >= hw {
        return Err(invalid(format!("max_disp {max_disp} must be below the half-resolution width {hw}")));
    }
    if block < 3 || block % 2 == 0 {
        return Err(invalid(format!("block size must be odd and >= 3, got {block}")));
    }
    let r = block / 2;
    if hh < block || hw < block {
        return Err(dims(format!("half-resolution image {hh}x{hw} smaller than block {block}")));
    }

    let gl = green_plane(left);
    let gr = green_plane(right);
    let mut best_cost = vec![f64::INFINITY; hh * hw];
    let mut best_d = vec![0usize; hh * hw];
    // Integral image of |L(i, j) - R(i, j - d)| for columns j >= d.
    let stride = hw + 1;
    let mut integral = vec![0.0f64; (hh + 1) * stride];
    for d in 0..=max_disp {
        for i in 0..hh {
            let mut row = 0.0;
            for j in 0..hw {
                if j >= d {
                    row += (gl[i * hw + j] - gr[i * hw + j - d]).abs();
                }
                integral[(i + 1) * stride + j + 1] = integral[i * stride + j + 1] + row;
            }
        }
        for i in r..hh - r {
            // the whole window must see valid right columns: j - r - d >= 0
            for j in (r + d).max(r)..hw - r {
                let (y0, y1, x0, x1) = (i - r, i + r + 1, j - r, j + r + 1);
                let cost = integral[y1 * stride + x1] - integral[y0 * stride + x1] - integral[y1 * stride + x0]
                    + integral[y0 * stride + x0];
                let k = i * hw + j;
                if cost < best_cost[k] {
                    best_cost[k] = cost;
                    best_d[k] = d;
                }
            }
        }
    }

    let mut values = vec![0.0f32; h * w];
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (i, j) = (y / 2, x / 2);
            if i >= r && i < hh - r && j >= r && j < hw - r {
                values[y * w + x] = 2.0 * best_d[i * hw + j] as f32;
                valid[y * w + x] = true;
            }
        }
    }
    DisparityMap::new(h, w, values, valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raw::CfaPattern;

    fn ramp(h: usize, w: usize) -> BayerMosaic {
        BayerMosaic::new(h, w, (0..h * w).map(|i| (i % 97) as f32 / 97.0).collect(), CfaPattern::Rggb).unwrap()
    }

    #[test]
    fn zero_disparity_is_identity() {
        let s = ramp(4, 8);
        let d = DisparityMap::constant(4, 8, 0.0).unwrap();
        for mode in [WarpMode::Raw, WarpMode::Packed] {
            let r = warp_backward(&s, &d, mode, FillPolicy::Zero, None).unwrap();
            assert_eq!(r.image, s);
            assert!(r.coverage.iter().all(|c| *c));
        }
    }

    #[test]
    fn invalid_disparity_fills_with_primary() {
        let (s, m) = (ramp(4, 8), BayerMosaic::new(4, 8, vec![0.25; 32], CfaPattern::Rggb).unwrap());
        let r = warp_backward(&s, &DisparityMap::invalid(4, 8), WarpMode::Raw, FillPolicy::Primary, Some(&m)).unwrap();
        assert_eq!(r.image, m);
        assert!(r.coverage.iter().all(|c| !*c));
    }

    #[test]
    fn warp_errors() {
        let s = ramp(4, 8);
        let d = DisparityMap::constant(4, 8, 1.0).unwrap();
        assert!(warp_backward(&s, &d, WarpMode::Raw, FillPolicy::Primary, None).is_err());
        assert!(warp_backward(&s, &DisparityMap::constant(4, 6, 0.0).unwrap(), WarpMode::Raw, FillPolicy::Zero, None).is_err());
        assert!(warp_backward(&s, &d, WarpMode::Raw, FillPolicy::Primary, Some(&ramp(2, 8))).is_err());
    }

    #[test]
    fn half_pixel_raw_interpolates() {
        let s = BayerMosaic::new(2, 4, vec![0.0, 1.0, 0.5, 0.25, 0.0, 0.0, 0.0, 0.0], CfaPattern::Rggb).unwrap();
        let d = DisparityMap::constant(2, 4, 0.5).unwrap();
        let r = warp_backward(&s, &d, WarpMode::Raw, FillPolicy::Zero, None).unwrap();
        assert_eq!(&r.image.data()[..4], &[0.0, 0.5, 0.75, 0.375]);
        assert_eq!(&r.coverage[..4], &[false, true, true, true]);
    }

    #[test]
    fn disparity_validation() {
        assert!(DisparityMap::new(1, 4, vec![4.0; 4], vec![true; 4]).is_err());
        assert!(DisparityMap::new(1, 4, vec![-1.0; 4], vec![true; 4]).is_err());
        let d = DisparityMap::new(1, 4, vec![f32::NAN; 4], vec![false; 4]).unwrap();
        assert_eq!(d.valid_count(), 0);
    }

    #[test]
    fn blockmatch_argument_checks() {
        let m = ramp(16, 32);
        assert!(estimate_disparity_blockmatch(&m, &m, 0, 3).is_err());
        assert!(estimate_disparity_blockmatch(&m, &m, 16, 3).is_err());
        assert!(estimate_disparity_blockmatch(&m, &m, 4, 4).is_err());
        assert!(estimate_disparity_blockmatch(&m, &m, 4, 1).is_err());
    }

    #[test]
    fn constant_scene_resolves_ties_to_zero() {
        let m = BayerMosaic::new(16, 32, vec![0.4; 512], CfaPattern::Rggb).unwrap();
        let d = estimate_disparity_blockmatch(&m, &m, 5, 3).unwrap();
        assert!(d.valid_count() > 0);
        assert!(d.values().iter().all(|v| *v == 0.0));
        // border of block/2 half-res pixels is invalid
        assert!(d.get(0, 5).is_none() && d.get(1, 5).is_none() && d.get(2, 5).is_some());
    }
}
