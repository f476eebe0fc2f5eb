//! Synthetic shape datasets and dataset plumbing.
//!
//! Each image shows one anti-aliased shape (disc, square, or cross) in one of
//! six saturated colors on a dark background, with the shape center placed in
//! one of nine grid cells. Classes are sampled first and uniformly, so label
//! distributions are near-uniform by construction, and each image is fully
//! determined by the dataset seed. Shapes are centrally symmetric and never
//! clipped by the image border, so the intensity centroid of an image equals
//! the sampled center and the position label always matches the centroid's
//! grid cell.
//!
//! Pixel values live in [-1, 1] (tanh range). The background is -0.9, not
//! -1, so translation's zero-fill is distinguishable from background.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of shape classes (disc, square, cross).
pub const SHAPE_CLASSES: usize = 3;
/// Number of color classes.
pub const COLOR_CLASSES: usize = 6;
/// Number of position classes (3x3 grid, row-major).
pub const POSITION_CLASSES: usize = 9;

/// Background intensity on every channel.
pub const BACKGROUND: f64 = -0.9;

/// The six palette colors in pixel space.
pub const PALETTE: [[f64; 3]; COLOR_CLASSES] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

/// Which label family a probe trains against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Shape,
    Color,
    Position,
}

impl LabelKind {
    pub const ALL: [LabelKind; 3] = [LabelKind::Shape, LabelKind::Color, LabelKind::Position];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shape" => Ok(LabelKind::Shape),
            "color" => Ok(LabelKind::Color),
            "position" => Ok(LabelKind::Position),
            other => Err(Error::Config(format!(
                "unknown label kind '{}' (expected shape, color, position)",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelKind::Shape => "shape",
            LabelKind::Color => "color",
            LabelKind::Position => "position",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            LabelKind::Shape => SHAPE_CLASSES,
            LabelKind::Color => COLOR_CLASSES,
            LabelKind::Position => POSITION_CLASSES,
        }
    }
}

/// A labeled synthetic dataset, images shaped [N, C, S, S] in [-1, 1].
#[derive(Debug, Clone)]
pub struct ShapesDataset {
    pub images: Tensor,
    pub shape_labels: Vec<usize>,
    pub color_labels: Vec<usize>,
    pub position_labels: Vec<usize>,
    pub seed: u64,
}

fn signed_distance(shape: usize, dx: f64, dy: f64, r: f64) -> f64 {
    match shape {
        // Disc of radius r.
        0 => (dx * dx + dy * dy).sqrt() - r,
        // Axis-aligned square of half-side 0.9 r.
        1 => dx.abs().max(dy.abs()) - 0.9 * r,
        // Cross: two bars, half-length 1.1 r, half-width 0.35 r.
        _ => {
            let l = 1.1 * r;
            let w = 0.35 * r;
            let horiz = (dx.abs() - l).max(dy.abs() - w);
            let vert = (dx.abs() - w).max(dy.abs() - l);
            horiz.min(vert)
        }
    }
}

/// Generate `n` images of side `size`. Deterministic per seed.
pub fn make_shapes_dataset(n: usize, seed: u64, size: usize) -> Result<ShapesDataset> {
    if n == 0 {
        return Err(Error::Parameter("dataset needs at least one image".into()));
    }
    if size < 8 {
        return Err(Error::Parameter(format!(
            "image size must be at least 8 to fit the shape grid, got {}",
            size
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let s = size as f64;
    let cell = s / 3.0;
    let radius = 0.30 * cell;
    // Keep the full anti-aliased support inside the image so shapes are never
    // clipped; the sampled center then equals the intensity centroid.
    let border = 1.3 * radius + 1.0;
    let inset = 0.3;

    let mut data = vec![0.0; n * 3 * size * size];
    let mut shape_labels = Vec::with_capacity(n);
    let mut color_labels = Vec::with_capacity(n);
    let mut position_labels = Vec::with_capacity(n);

    for i in 0..n {
        let shape = rng.gen_range(0..SHAPE_CLASSES);
        let color = rng.gen_range(0..COLOR_CLASSES);
        let position = rng.gen_range(0..POSITION_CLASSES);
        let (gy, gx) = (position / 3, position % 3);

        let range = |g: usize| -> (f64, f64) {
            let lo = (g as f64 * cell + inset).max(border);
            let hi = ((g as f64 + 1.0) * cell - inset).min(s - border);
            (lo, hi)
        };
        let (x_lo, x_hi) = range(gx);
        let (y_lo, y_hi) = range(gy);
        debug_assert!(x_lo < x_hi && y_lo < y_hi);
        let cx = rng.gen_range(x_lo..x_hi);
        let cy = rng.gen_range(y_lo..y_hi);

        let rgb = PALETTE[color];
        let base = i * 3 * size * size;
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f64 + 0.5) - cx;
                let dy = (y as f64 + 0.5) - cy;
                let sd = signed_distance(shape, dx, dy, radius);
                let coverage = (0.5 - sd).clamp(0.0, 1.0);
                for c in 0..3 {
                    data[base + c * size * size + y * size + x] =
                        BACKGROUND + coverage * (rgb[c] - BACKGROUND);
                }
            }
        }
        shape_labels.push(shape);
        color_labels.push(color);
        position_labels.push(position);
    }

    Ok(ShapesDataset {
        images: Tensor::from_parts(vec![n, 3, size, size], data),
        shape_labels,
        color_labels,
        position_labels,
        seed,
    })
}

impl ShapesDataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn labels(&self, kind: LabelKind) -> &[usize] {
        match kind {
            LabelKind::Shape => &self.shape_labels,
            LabelKind::Color => &self.color_labels,
            LabelKind::Position => &self.position_labels,
        }
    }

    /// True when the dataset carries meaningful labels (imported image-only
    /// datasets do not).
    pub fn has_labels(&self) -> bool {
        !self.shape_labels.is_empty()
    }

    /// Gather images at `indices` into one [B, C, S, S] batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let per = self.channels() * self.image_size() * self.image_size();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Parameter(format!(
                    "index {} out of range for dataset of {}",
                    i,
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Ok(Tensor::from_parts(
            vec![
                indices.len(),
                self.channels(),
                self.image_size(),
                self.image_size(),
            ],
            data,
        ))
    }

    /// Keep floor(fraction * N) items chosen without replacement, indices
    /// sorted ascending, deterministic per seed.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<ShapesDataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Parameter(format!(
                "subsample fraction must be in (0, 1], got {}",
                fraction
            )));
        }
        let keep = ((fraction * self.len() as f64).floor() as usize).min(self.len());
        if keep == 0 {
            return Err(Error::Parameter(format!(
                "fraction {} of {} images keeps nothing",
                fraction,
                self.len()
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..self.len()).collect();
        // Partial Fisher-Yates: the first `keep` entries are the sample.
        for i in 0..keep {
            let j = rng.gen_range(i..indices.len());
            indices.swap(i, j);
        }
        let mut chosen = indices[..keep].to_vec();
        chosen.sort_unstable();

        let images = self.batch(&chosen)?;
        let pick = |labels: &[usize]| -> Vec<usize> {
            if labels.is_empty() {
                Vec::new()
            } else {
                chosen.iter().map(|&i| labels[i]).collect()
            }
        };
        Ok(ShapesDataset {
            images,
            shape_labels: pick(&self.shape_labels),
            color_labels: pick(&self.color_labels),
            position_labels: pick(&self.position_labels),
            seed: self.seed,
        })
    }
}

/// Read an IDX image file (big-endian magic 0x00000803) into an unlabeled
/// dataset shaped [N, 1, rows, cols], bytes mapped by v / 127.5 - 1.
pub fn import_idx_images(path: &Path) -> Result<ShapesDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let name = path.display().to_string();
    let take_u32 = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
            .ok_or_else(|| Error::Numeric(format!("truncated IDX header in '{}'", name)))
    };
    let magic = take_u32(0)?;
    if magic != 0x0000_0803 {
        return Err(Error::Numeric(format!(
            "'{}' is not an IDX image file (magic {:#010x})",
            name, magic
        )));
    }
    let n = take_u32(4)? as usize;
    let rows = take_u32(8)? as usize;
    let cols = take_u32(12)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Numeric(format!("'{}' declares an empty image set", name)));
    }
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Numeric(format!(
            "'{}' has {} bytes, expected {} for {} images of {}x{}",
            name,
            bytes.len(),
            expected,
            n,
            rows,
            cols
        )));
    }
    let data: Vec<f64> = bytes[16..].iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
    Ok(ShapesDataset {
        images: Tensor::from_parts(vec![n, 1, rows, cols], data),
        shape_labels: Vec::new(),
        color_labels: Vec::new(),
        position_labels: Vec::new(),
        seed: 0,
    })
}
