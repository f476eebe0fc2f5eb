//! Differentiable image augmentations parameterized by their own strengths.
//!
//! Every augmentation strength lives in [0, 1]; the full parameter vector
//! omega has seven components in the fixed order color (brightness,
//! saturation, contrast), translation (x, y), cutout (x, y). The value 0.5 is
//! the exact identity for every component, and the maps are differentiable
//! with respect to the image for any fixed omega, so adversarial gradients
//! pass through augmented images into the generator.
//!
//! Color mapping: brightness adds `lambda_b - 0.5`; saturation scales the
//! deviation from the per-pixel channel mean by `2 lambda_s`; contrast scales
//! the deviation from the per-image mean by `lambda_c + 0.5`. Translation
//! shifts by `round((omega - 0.5) * 2 * s_max)` pixels with zero fill, where
//! `s_max = ceil(ratio * side)`. Cutout zeroes a window of side
//! `ceil(ratio * side)` placed at offset `floor(omega * (side - cut) + 0.5)`,
//! always fully inside the image.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// The three augmentation families, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AugCategory {
    Color,
    Translation,
    Cutout,
}

impl AugCategory {
    pub const ALL: [AugCategory; 3] =
        [AugCategory::Color, AugCategory::Translation, AugCategory::Cutout];

    /// Number of omega components this category owns.
    pub fn dim(self) -> usize {
        match self {
            AugCategory::Color => 3,
            AugCategory::Translation => 2,
            AugCategory::Cutout => 2,
        }
    }

    /// Index of this category's first component in the full omega vector.
    pub fn offset(self) -> usize {
        match self {
            AugCategory::Color => 0,
            AugCategory::Translation => 3,
            AugCategory::Cutout => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugCategory::Color => "color",
            AugCategory::Translation => "translation",
            AugCategory::Cutout => "cutout",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "color" => Ok(AugCategory::Color),
            "translation" => Ok(AugCategory::Translation),
            "cutout" => Ok(AugCategory::Cutout),
            other => Err(Error::Config(format!(
                "unknown augmentation category '{}' (expected color, translation, cutout)",
                other
            ))),
        }
    }
}

/// Total omega dimension across all categories.
pub const OMEGA_DIM: usize = 7;

/// Geometry and gating for the augmentation pipeline.
#[derive(Debug, Clone)]
pub struct AugConfig {
    /// Maximum shift as a fraction of the image side; s_max = ceil(ratio * side).
    pub translation_ratio: f64,
    /// Cutout window side as a fraction of the image side.
    pub cutout_ratio: f64,
    /// Which categories `apply_all` actually applies, by canonical index.
    pub enabled: [bool; 3],
}

impl AugConfig {
    /// Default strength: shift up to 1/8 of the side, cut 1/2 of the side.
    pub fn normal() -> Self {
        Self {
            translation_ratio: 1.0 / 8.0,
            cutout_ratio: 1.0 / 2.0,
            enabled: [true, true, true],
        }
    }

    /// Strong preset: shift up to 1/4 of the side, cut 3/4 of the side.
    pub fn strong() -> Self {
        Self {
            translation_ratio: 1.0 / 4.0,
            cutout_ratio: 3.0 / 4.0,
            enabled: [true, true, true],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.translation_ratio > 0.0 && self.translation_ratio <= 0.5) {
            return Err(Error::Parameter(format!(
                "translation_ratio must be in (0, 0.5], got {}",
                self.translation_ratio
            )));
        }
        if !(self.cutout_ratio > 0.0 && self.cutout_ratio <= 1.0) {
            return Err(Error::Parameter(format!(
                "cutout_ratio must be in (0, 1], got {}",
                self.cutout_ratio
            )));
        }
        Ok(())
    }

    pub fn is_enabled(&self, cat: AugCategory) -> bool {
        self.enabled[cat as usize]
    }
}

/// One omega vector per batch sample, split by category.
#[derive(Debug, Clone, PartialEq)]
pub struct AugParams {
    color: Vec<[f64; 3]>,
    translation: Vec<[f64; 2]>,
    cutout: Vec<[f64; 2]>,
}

impl AugParams {
    /// Draw all seven components uniformly from [0, 1] for each sample.
    pub fn sample<R: Rng>(rng: &mut R, batch: usize) -> Self {
        let color = (0..batch)
            .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        let translation = (0..batch).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        let cutout = (0..batch).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        Self {
            color,
            translation,
            cutout,
        }
    }

    /// Replicate one omega vector (canonical component order) across a batch.
    pub fn from_omega(batch: usize, omega: &[f64; OMEGA_DIM]) -> Result<Self> {
        if omega.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter(format!(
                "omega components must lie in [0, 1], got {:?}",
                omega
            )));
        }
        Ok(Self {
            color: vec![[omega[0], omega[1], omega[2]]; batch],
            translation: vec![[omega[3], omega[4]]; batch],
            cutout: vec![[omega[5], omega[6]]; batch],
        })
    }

    /// Exact identity parameters (all components 0.5).
    pub fn identity(batch: usize) -> Self {
        Self::from_omega(batch, &[0.5; OMEGA_DIM]).unwrap()
    }

    pub fn batch(&self) -> usize {
        self.color.len()
    }

    pub fn color(&self) -> &[[f64; 3]] {
        &self.color
    }

    pub fn translation(&self) -> &[[f64; 2]] {
        &self.translation
    }

    pub fn cutout(&self) -> &[[f64; 2]] {
        &self.cutout
    }

    /// Regression target matrix [batch, dim] for one category.
    pub fn targets(&self, cat: AugCategory) -> Tensor {
        let batch = self.batch();
        let mut data = Vec::with_capacity(batch * cat.dim());
        match cat {
            AugCategory::Color => {
                for row in &self.color {
                    data.extend_from_slice(row);
                }
            }
            AugCategory::Translation => {
                for row in &self.translation {
                    data.extend_from_slice(row);
                }
            }
            AugCategory::Cutout => {
                for row in &self.cutout {
                    data.extend_from_slice(row);
                }
            }
        }
        Tensor::from_parts(vec![batch, cat.dim()], data)
    }

    /// All targets concatenated in canonical order: [batch, 7].
    pub fn concat_targets(&self) -> Tensor {
        let batch = self.batch();
        let mut data = Vec::with_capacity(batch * OMEGA_DIM);
        for i in 0..batch {
            data.extend_from_slice(&self.color[i]);
            data.extend_from_slice(&self.translation[i]);
            data.extend_from_slice(&self.cutout[i]);
        }
        Tensor::from_parts(vec![batch, OMEGA_DIM], data)
    }

    /// The canonical 7-vector for one sample.
    pub fn omega_row(&self, i: usize) -> [f64; OMEGA_DIM] {
        [
            self.color[i][0],
            self.color[i][1],
            self.color[i][2],
            self.translation[i][0],
            self.translation[i][1],
            self.cutout[i][0],
            self.cutout[i][1],
        ]
    }
}

fn check_image(tape: &Tape, img: TensorId, params: &AugParams, what: &str) -> Result<[usize; 4]> {
    let shape = tape.value(img).shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "{} needs an [N,C,H,W] image batch, got {:?}",
            what, shape
        )));
    }
    let dims = [shape[0], shape[1], shape[2], shape[3]];
    if dims[1] != 1 && dims[1] != 3 {
        return Err(Error::Shape(format!(
            "{} supports 1 or 3 channels, got {}",
            what, dims[1]
        )));
    }
    if params.batch() != dims[0] {
        return Err(Error::Shape(format!(
            "{} got {} omega rows for batch {}",
            what,
            params.batch(),
            dims[0]
        )));
    }
    Ok(dims)
}

/// Maximum translation shift in pixels for one side length.
pub fn max_shift(side: usize, ratio: f64) -> usize {
    (ratio * side as f64).ceil() as usize
}

/// Cutout window side in pixels for one side length.
pub fn cutout_side(side: usize, ratio: f64) -> usize {
    (ratio * side as f64).ceil() as usize
}

/// Integer shift for one translation component.
pub fn translation_shift(omega: f64, s_max: usize) -> i64 {
    ((omega - 0.5) * 2.0 * s_max as f64).round() as i64
}

/// Window offset for one cutout component.
pub fn cutout_offset(omega: f64, side: usize, cut: usize) -> usize {
    (omega * (side - cut) as f64 + 0.5).floor() as usize
}

/// Brightness, saturation, contrast, in that order. Sub-steps whose whole
/// batch sits at the identity value are skipped so omega = 0.5 is bit-exact.
pub fn apply_color(tape: &mut Tape, img: TensorId, params: &AugParams) -> Result<TensorId> {
    let dims = check_image(tape, img, params, "apply_color")?;
    let target_shape = [dims[0], dims[1], dims[2], dims[3]];
    let mut current = img;

    let shifts: Vec<f64> = params.color.iter().map(|c| c[0] - 0.5).collect();
    if shifts.iter().any(|s| *s != 0.0) {
        current = tape.shift_per_sample(current, &shifts)?;
    }

    let sat: Vec<f64> = params.color.iter().map(|c| 2.0 * c[1]).collect();
    if sat.iter().any(|s| *s != 1.0) {
        let mean = tape.channel_mean(current)?;
        let mean_full = tape.expand_to(mean, &target_shape)?;
        let centered = tape.sub(current, mean_full)?;
        let scaled = tape.scale_per_sample(centered, &sat)?;
        current = tape.add(scaled, mean_full)?;
    }

    let con: Vec<f64> = params.color.iter().map(|c| c[2] + 0.5).collect();
    if con.iter().any(|s| *s != 1.0) {
        let mean = tape.sample_mean(current)?;
        let mean_full = tape.expand_to(mean, &target_shape)?;
        let centered = tape.sub(current, mean_full)?;
        let scaled = tape.scale_per_sample(centered, &con)?;
        current = tape.add(scaled, mean_full)?;
    }

    Ok(current)
}

/// Per-sample integer translation with zero fill.
pub fn apply_translation(
    tape: &mut Tape,
    img: TensorId,
    params: &AugParams,
    config: &AugConfig,
) -> Result<TensorId> {
    config.validate()?;
    let dims = check_image(tape, img, params, "apply_translation")?;
    let (h, w) = (dims[2], dims[3]);
    let s_max_y = max_shift(h, config.translation_ratio);
    let s_max_x = max_shift(w, config.translation_ratio);
    let shifts: Vec<(i64, i64)> = params
        .translation
        .iter()
        .map(|t| {
            (
                translation_shift(t[1], s_max_y),
                translation_shift(t[0], s_max_x),
            )
        })
        .collect();
    tape.shift2d(img, &shifts)
}

/// Per-sample square cutout; the window always lies fully inside the image.
pub fn apply_cutout(
    tape: &mut Tape,
    img: TensorId,
    params: &AugParams,
    config: &AugConfig,
) -> Result<TensorId> {
    config.validate()?;
    let dims = check_image(tape, img, params, "apply_cutout")?;
    let (h, w) = (dims[2], dims[3]);
    let cut_h = cutout_side(h, config.cutout_ratio);
    let cut_w = cutout_side(w, config.cutout_ratio);
    let origins: Vec<(usize, usize)> = params
        .cutout
        .iter()
        .map(|c| {
            (
                cutout_offset(c[1], h, cut_h),
                cutout_offset(c[0], w, cut_w),
            )
        })
        .collect();
    tape.mask_window(img, &origins, (cut_h, cut_w))
}

/// The full pipeline: color, then translation, then cutout, gated by
/// `config.enabled`.
pub fn apply_all(
    tape: &mut Tape,
    img: TensorId,
    params: &AugParams,
    config: &AugConfig,
) -> Result<TensorId> {
    config.validate()?;
    let mut current = img;
    if config.is_enabled(AugCategory::Color) {
        current = apply_color(tape, current, params)?;
    }
    if config.is_enabled(AugCategory::Translation) {
        current = apply_translation(tape, current, params, config)?;
    }
    if config.is_enabled(AugCategory::Cutout) {
        current = apply_cutout(tape, current, params, config)?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_image(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    #[test]
    fn identity_omega_is_bit_exact() {
        // Color and translation have exact no-op parameters at 0.5; cutout
        // always removes a window, so it is disabled here.
        let img = random_image(3, &[2, 3, 16, 16]);
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let params = AugParams::identity(2);
        let mut config = AugConfig::normal();
        config.enabled[AugCategory::Cutout as usize] = false;
        let y = apply_all(&mut tape, x, &params, &config).unwrap();
        assert_eq!(tape.value(y).data(), img.data());

        // With cutout enabled the centered window is still zeroed.
        let y_cut = apply_all(&mut tape, x, &params, &AugConfig::normal()).unwrap();
        let zeros = tape
            .value(y_cut)
            .data()
            .iter()
            .filter(|v| **v == 0.0)
            .count();
        assert!(zeros >= 8 * 8 * 3 * 2);
    }

    #[test]
    fn brightness_on_zero_image() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let params = AugParams::from_omega(1, &[0.7, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let y = apply_color(&mut tape, x, &params).unwrap();
        let expected = 0.7_f64 - 0.5;
        assert!(tape.value(y).data().iter().all(|v| *v == expected));
    }

    #[test]
    fn saturation_scales_channel_deviation() {
        // One pixel with channels (1, 0, -1): channel mean 0, so saturation
        // lambda = 1 doubles every channel.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3, 1, 1], vec![1.0, 0.0, -1.0]).unwrap());
        let params = AugParams::from_omega(1, &[0.5, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let y = apply_color(&mut tape, x, &params).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 0.0, -2.0]);
    }

    #[test]
    fn contrast_scales_image_deviation() {
        // Two pixels 1 and -1, image mean 0; contrast lambda 1 scales by 1.5.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, -1.0]).unwrap());
        let params = AugParams::from_omega(1, &[0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let y = apply_color(&mut tape, x, &params).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -1.5]);
    }

    #[test]
    fn translation_example_vacates_one_column() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 8, 8], 1.0));
        let params = AugParams::from_omega(1, &[0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5]).unwrap();
        let cfg = AugConfig::normal(); // ratio 1/8 of side 8 gives s_max 1
        let y = apply_translation(&mut tape, x, &params, &cfg).unwrap();
        let out = tape.value(y);
        assert_eq!(out.data().iter().sum::<f64>(), 56.0);
        for row in 0..8 {
            assert_eq!(out.at4(0, 0, row, 0), 0.0, "vacated column should be zero");
        }
    }

    #[test]
    fn translation_shift_range_is_symmetric() {
        let s_max = 2;
        assert_eq!(translation_shift(0.0, s_max), -2);
        assert_eq!(translation_shift(0.5, s_max), 0);
        assert_eq!(translation_shift(1.0, s_max), 2);
    }

    #[test]
    fn cutout_example_zeroes_top_left_block() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 16, 16], 1.0));
        let params = AugParams::from_omega(1, &[0.5, 0.5, 0.5, 0.5, 0.5, 0.0, 0.0]).unwrap();
        let cfg = AugConfig::normal(); // ratio 1/2 of side 16 gives an 8x8 window
        let y = apply_cutout(&mut tape, x, &params, &cfg).unwrap();
        let out = tape.value(y);
        let zeros = out.data().iter().filter(|v| **v == 0.0).count();
        assert_eq!(zeros, 64);
        assert_eq!(out.at4(0, 0, 0, 0), 0.0);
        assert_eq!(out.at4(0, 0, 7, 7), 0.0);
        assert_eq!(out.at4(0, 0, 8, 8), 1.0);
    }

    #[test]
    fn cutout_window_stays_inside_at_extremes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 16, 16], 1.0));
        for omega in [0.0, 0.37, 0.99, 1.0] {
            let params =
                AugParams::from_omega(1, &[0.5, 0.5, 0.5, 0.5, 0.5, omega, omega]).unwrap();
            let y = apply_cutout(&mut tape, x, &params, &AugConfig::normal()).unwrap();
            let zeros = tape.value(y).data().iter().filter(|v| **v == 0.0).count();
            assert_eq!(zeros, 64, "window clipped at omega {}", omega);
        }
    }

    #[test]
    fn strong_preset_ratios() {
        let cfg = AugConfig::strong();
        assert_eq!(cutout_side(16, cfg.cutout_ratio), 12);
        assert_eq!(max_shift(16, cfg.translation_ratio), 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_ratios_are_rejected() {
        let mut cfg = AugConfig::normal();
        cfg.translation_ratio = 0.6;
        assert!(cfg.validate().is_err());
        let mut cfg = AugConfig::normal();
        cfg.cutout_ratio = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn figure_omega_matches_manual_composition() {
        let img = random_image(11, &[1, 3, 16, 16]);
        let omega = [0.2, 0.3, 0.5, 0.1, 0.8, 0.4, 0.6];
        let params = AugParams::from_omega(1, &omega).unwrap();
        let cfg = AugConfig::normal();

        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let composed = apply_all(&mut tape, x, &params, &cfg).unwrap();

        let mut manual = Tape::new();
        let x2 = manual.constant(img);
        let c = apply_color(&mut manual, x2, &params).unwrap();
        let t = apply_translation(&mut manual, c, &params, &cfg).unwrap();
        let k = apply_cutout(&mut manual, t, &params, &cfg).unwrap();

        assert_eq!(tape.value(composed).data(), manual.value(k).data());
    }

    #[test]
    fn disabled_category_makes_pipeline_independent_of_its_omega() {
        let img = random_image(5, &[2, 3, 16, 16]);
        let mut cfg = AugConfig::normal();
        cfg.enabled[AugCategory::Translation as usize] = false;

        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut a = AugParams::sample(&mut rng, 2);
        let mut b = a.clone();
        a.translation = vec![[0.0, 0.0]; 2];
        b.translation = vec![[1.0, 1.0]; 2];

        let mut t1 = Tape::new();
        let x1 = t1.constant(img.clone());
        let y1 = apply_all(&mut t1, x1, &a, &cfg).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.constant(img);
        let y2 = apply_all(&mut t2, x2, &b, &cfg).unwrap();
        assert_eq!(t1.value(y1).data(), t2.value(y2).data());
    }

    #[test]
    fn sampled_parameters_are_deterministic_and_in_range() {
        let mut r1 = ChaCha12Rng::seed_from_u64(42);
        let mut r2 = ChaCha12Rng::seed_from_u64(42);
        let a = AugParams::sample(&mut r1, 8);
        let b = AugParams::sample(&mut r2, 8);
        assert_eq!(a, b);
        for i in 0..8 {
            for v in a.omega_row(i) {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn targets_follow_canonical_order() {
        let params = AugParams::from_omega(2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]).unwrap();
        let cat = params.targets(AugCategory::Translation);
        assert_eq!(cat.shape(), &[2, 2]);
        assert_eq!(cat.data(), &[0.4, 0.5, 0.4, 0.5]);
        let all = params.concat_targets();
        assert_eq!(all.shape(), &[2, 7]);
        assert_eq!(&all.data()[..7], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]);
    }

    #[test]
    fn rejects_wrong_channel_count_and_batch() {
        let mut tape = Tape::new();
        let bad_c = tape.constant(Tensor::zeros(vec![1, 2, 8, 8]));
        let params = AugParams::identity(1);
        assert!(apply_color(&mut tape, bad_c, &params).is_err());
        let ok = tape.constant(Tensor::zeros(vec![2, 3, 8, 8]));
        assert!(apply_color(&mut tape, ok, &params).is_err());
    }
}
