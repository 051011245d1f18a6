//! Stereo dataset loading (KITTI-2015 and DrivingStereo directory layouts),
//! the 16-bit disparity encoding, and a synthetic layered toy dataset with
//! exact disparity.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::raw::RgbImage;
use crate::seed::derive_seed;
use crate::warp::{DisparityMap, DISPARITY_PNG_SCALE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Kitti,
    DrivingStereo,
    Toy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub id: String,
    /// Primary view; also the reconstruction target.
    pub left: RgbImage,
    pub right: RgbImage,
    /// Disparity in the primary (left) frame.
    pub disparity: DisparityMap,
    /// Pixels of the left view that are visible in the right view, when known.
    pub non_occluded: Option<Vec<bool>>,
    pub provenance: Provenance,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.left.height()
    }

    pub fn width(&self) -> usize {
        self.left.width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `image_2/` (left), `image_3/` (right), `disp_occ_0/` (disparity);
    /// frame `*_10.png` only. `disp_noc_0/`, when present, supplies the
    /// non-occluded mask.
    Kitti,
    /// `left/`, `right/`, `disparity/` with matching file names.
    DrivingStereo,
}

impl Layout {
    fn dirs(self) -> (&'static str, &'static str, &'static str) {
        match self {
            Layout::Kitti => ("image_2", "image_3", "disp_occ_0"),
            Layout::DrivingStereo => ("left", "right", "disparity"),
        }
    }

    fn provenance(self) -> Provenance {
        match self {
            Layout::Kitti => Provenance::Kitti,
            Layout::DrivingStereo => Provenance::DrivingStereo,
        }
    }
}

pub const KITTI_NOC_DIR: &str = "disp_noc_0";

/// Decodes a 16-bit disparity image: `d = stored / 256`, stored 0 = invalid.
pub fn decode_disparity_png(img: &image::DynamicImage) -> Result<DisparityMap> {
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(invalid(format!(
                "disparity maps must be single-channel 16-bit, got {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut values = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for p in gray.pixels() {
        let d = p[0] as f32 / DISPARITY_PNG_SCALE;
        let ok = p[0] != 0 && (d as f64) < w as f64;
        values.push(if ok { d } else { 0.0 });
        valid.push(ok);
    }
    DisparityMap::new(h, w, values, valid)
}

pub fn load_disparity_png(path: &Path) -> Result<DisparityMap> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    decode_disparity_png(&img).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn list_ids(dir: &Path, layout: Layout) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if layout == Layout::Kitti && !stem.ends_with("_10") {
            continue;
        }
        ids.push(stem.to_string());
    }
    ids.sort();
    Ok(ids)
}

/// Loads every sample under `root`, sorted by id.
///
/// `disparity_dir` overrides the layout's default disparity folder (e.g.
/// `disp_noc_0` for KITTI's non-occluded ground truth).
pub fn load_stereo_dataset(root: &Path, layout: Layout, disparity_dir: Option<&str>) -> Result<Vec<StereoSample>> {
    let (left_dir, right_dir, default_disp) = layout.dirs();
    let disp_dir = disparity_dir.unwrap_or(default_disp);
    let ids = list_ids(&root.join(left_dir), layout)?;
    let noc_root = (layout == Layout::Kitti && disp_dir != KITTI_NOC_DIR).then(|| root.join(KITTI_NOC_DIR));

    ids.par_iter()
        .map(|id| {
            let file = format!("{id}.png");
            let paths: [PathBuf; 3] = [root.join(left_dir).join(&file), root.join(right_dir).join(&file), root.join(disp_dir).join(&file)];
            for (p, what) in paths.iter().zip(["left image", "right image", "disparity map"]) {
                if !p.is_file() {
                    return Err(Error::Dataset(format!("sample `{id}`: missing {what} {}", p.display())));
                }
            }
            let left = RgbImage::load_png(&paths[0])?;
            let right = RgbImage::load_png(&paths[1])?;
            let (h, w) = (left.height(), left.width());
            if (right.height(), right.width()) != (h, w) {
                return Err(Error::Dataset(format!("sample `{id}`: left and right sizes differ")));
            }
            let fit = |d: DisparityMap| -> Result<DisparityMap> {
                if d.height() < h || d.width() < w {
                    return Err(Error::Dataset(format!("sample `{id}`: disparity smaller than image")));
                }
                d.crop(0, 0, h, w)
            };
            let disparity = fit(load_disparity_png(&paths[2])?)?;
            let non_occluded = match &noc_root {
                Some(dir) if dir.join(&file).is_file() => Some(fit(load_disparity_png(&dir.join(&file))?)?.valid().to_vec()),
                _ => None,
            };
            Ok(StereoSample { id: id.clone(), left, right, disparity, non_occluded, provenance: layout.provenance() })
        })
        .collect()
}

/// Writes samples in the KITTI layout (`image_2`, `image_3`, `disp_occ_0`,
/// and `disp_noc_0` for samples with a known occlusion mask).
pub fn write_kitti_layout(root: &Path, samples: &[StereoSample]) -> Result<()> {
    for dir in ["image_2", "image_3", "disp_occ_0", KITTI_NOC_DIR] {
        fs::create_dir_all(root.join(dir)).map_err(|e| Error::io(root.join(dir), e))?;
    }
    samples.par_iter().try_for_each(|s| {
        let file = format!("{}.png", s.id);
        s.left.save_png(&root.join("image_2").join(&file))?;
        s.right.save_png(&root.join("image_3").join(&file))?;
        s.disparity.save_png(&root.join("disp_occ_0").join(&file))?;
        if let Some(mask) = &s.non_occluded {
            let valid: Vec<bool> = s.disparity.valid().iter().zip(mask).map(|(a, b)| *a && *b).collect();
            let noc = DisparityMap::new(s.height(), s.width(), s.disparity.values().to_vec(), valid)?;
            noc.save_png(&root.join(KITTI_NOC_DIR).join(&file))?;
        }
        Ok(())
    })
}

/// Smooth random color field: bilinear interpolation of a random lattice,
/// summed over octaves.
struct ValueNoise {
    octaves: Vec<Lattice>,
}

struct Lattice {
    cell: f64,
    rows: usize,
    cols: usize,
    amplitude: f64,
    values: Vec<[f64; 3]>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, height: usize, width: usize, cells: &[(f64, f64)]) -> Self {
        let octaves = cells
            .iter()
            .map(|&(cell, amplitude)| {
                let rows = (height as f64 / cell).ceil() as usize + 2;
                let cols = (width as f64 / cell).ceil() as usize + 2;
                let values = (0..rows * cols).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
                Lattice { cell, rows, cols, amplitude, values }
            })
            .collect();
        ValueNoise { octaves }
    }

    fn sample(&self, y: f64, x: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for o in &self.octaves {
            let (fy, fx) = (y / o.cell, x / o.cell);
            let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
            let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
            let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
            let at = |r: usize, c: usize| o.values[r.min(o.rows - 1) * o.cols + c.min(o.cols - 1)];
            for (ch, v) in out.iter_mut().enumerate() {
                let top = at(iy, ix)[ch] * (1.0 - tx) + at(iy, ix + 1)[ch] * tx;
                let bottom = at(iy + 1, ix)[ch] * (1.0 - tx) + at(iy + 1, ix + 1)[ch] * tx;
                *v += o.amplitude * (top * (1.0 - ty) + bottom * ty);
            }
        }
        out
    }
}

struct Layer {
    disparity: usize,
    /// `[y0, y1) x [x0, x1)` in left-view coordinates.
    rect: (usize, usize, usize, usize),
    texture: ValueNoise,
    tint: [f64; 3],
}

impl Layer {
    fn contains(&self, y: usize, x: isize) -> bool {
        let (y0, y1, x0, x1) = self.rect;
        y >= y0 && y < y1 && x >= x0 as isize && x < x1 as isize
    }

    fn color(&self, c: usize, y: usize, x: isize) -> f64 {
        // textures are shifted so negative columns are still well defined
        let v = self.texture.sample(y as f64, x as f64 + 64.0)[c];
        (0.15 + 0.7 * v * self.tint[c]).clamp(0.0, 1.0)
    }
}

/// Front-most layer covering left-view position `(y, x)`; layers are stored
/// in increasing disparity, later layers winning ties.
fn front(layers: &[Layer], y: usize, x: isize) -> Option<usize> {
    (0..layers.len()).rev().find(|&k| layers[k].contains(y, x))
}

/// Front-most layer seen by the right camera at `(y, x)`.
fn front_right(layers: &[Layer], y: usize, x: usize) -> usize {
    (0..layers.len())
        .rev()
        .find(|&k| layers[k].contains(y, x as isize + layers[k].disparity as isize))
        .expect("background covers the extended view")
}

/// Synthetic layered scenes with exact dense disparity.
///
/// Each scene is a textured background at an even disparity plus one to
/// three textured rectangles at larger even disparities (at most
/// `max_disp`). The right view is rendered by shifting every layer, with
/// nearer layers occluding farther ones. Images are quantized to 8 bits so
/// a KITTI-layout round trip is lossless.
pub fn generate_toy_dataset(count: usize, size: (usize, usize), seed: u64, max_disp: usize) -> Result<Vec<StereoSample>> {
    let (h, w) = size;
    if h < 16 || w < 16 || h % 2 != 0 || w % 2 != 0 {
        return Err(invalid(format!("toy images must have even dimensions >= 16, got {h}x{w}")));
    }
    if max_disp % 2 != 0 || max_disp < 4 || max_disp >= w / 4 {
        return Err(invalid(format!("toy max_disp must be even, >= 4 and below width/4 = {}, got {max_disp}", w / 4)));
    }
    (0..count).into_par_iter().map(|i| toy_scene(i, h, w, derive_seed(seed, &[i as u64]), max_disp)).collect()
}

fn toy_scene(index: usize, h: usize, w: usize, seed: u64, max_disp: usize) -> Result<StereoSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = w + 2 * 64;
    // background disparity in {2, 4, ..., max_disp / 2}
    let bg_d = 2 * rng.random_range(1..=max_disp / 4);
    let background = Layer {
        disparity: bg_d,
        rect: (0, h, 0, usize::MAX / 4),
        texture: ValueNoise::new(&mut rng, h, ext, &[(16.0, 0.5), (6.0, 0.3), (3.0, 0.2)]),
        tint: [rng.random_range(0.6..1.2), rng.random_range(0.6..1.2), rng.random_range(0.6..1.2)],
    };
    let mut layers = vec![background];
    let n_rects = rng.random_range(1..=3);
    let mut rects = Vec::new();
    for _ in 0..n_rects {
        let d = 2 * rng.random_range(bg_d / 2 + 1..=max_disp / 2);
        let rh = rng.random_range(h / 4..=h / 2);
        let rw = rng.random_range(w / 8..=w / 3);
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        let texture = ValueNoise::new(&mut rng, h, ext, &[(8.0, 0.4), (3.0, 0.4), (1.5, 0.2)]);
        let tint = [rng.random_range(0.3..1.3), rng.random_range(0.3..1.3), rng.random_range(0.3..1.3)];
        rects.push(Layer { disparity: d, rect: (y0, y0 + rh, x0, x0 + rw), texture, tint });
    }
    rects.sort_by_key(|l| l.disparity);
    layers.extend(rects);

    let mut disparity = vec![0.0f32; h * w];
    let mut visible = vec![false; h * w];
    let mut owner = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let k = front(&layers, y, x as isize).expect("background covers the view");
            owner[y * w + x] = k;
            let d = layers[k].disparity;
            disparity[y * w + x] = d as f32;
            visible[y * w + x] = x >= d && front_right(&layers, y, x - d) == k;
        }
    }
    let mut left = RgbImage::from_fn(h, w, |c, y, x| layers[owner[y * w + x]].color(c, y, x as isize) as f32)?;
    let mut right = RgbImage::from_fn(h, w, |c, y, x| {
        let k = front_right(&layers, y, x);
        layers[k].color(c, y, x as isize + layers[k].disparity as isize) as f32
    })?;
    left.quantize_8bit();
    right.quantize_8bit();

    Ok(StereoSample {
        id: format!("{index:06}_10"),
        left,
        right,
        disparity: DisparityMap::new(h, w, disparity, vec![true; h * w])?,
        non_occluded: Some(visible),
        provenance: Provenance::Toy,
    })
}
