//! Toy generator and discriminator models, and the self-supervised heads that
//! predict augmentation strengths from pairs of discriminator features.
//!
//! The discriminator is split into a shared convolutional backbone phi, a
//! scalar adversarial head, and one small prediction head per augmentation
//! category. A head sees phi of the augmented image and phi of the reference
//! image, fuses them (subtract by default), and regresses the category's
//! omega components. With the default linear-subtract heads the extra
//! parameter cost is feat_dim * d + d per category, a fraction of a percent
//! of the discriminator.
//!
//! Parameters live off-tape as plain tensors; `bind` registers them on a tape
//! (trainable or frozen) for one forward/backward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::AugCategory;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Leaky ReLU slope used throughout the models.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Channel widths of the two backbone conv layers.
pub const CONV_WIDTHS: [usize; 2] = [24, 48];

/// Hidden width of the generator MLP and the backbone's fully connected part.
pub const HIDDEN_DIM: usize = 256;

/// How a self-supervised head fuses augmented and reference features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// phi(aug) - phi(ref); the default.
    Subtract,
    /// [phi(aug), phi(ref)] concatenated.
    Concat,
    /// phi(aug) alone; ignores the reference.
    AugOnly,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "subtract" => Ok(FusionMode::Subtract),
            "concat" => Ok(FusionMode::Concat),
            "aug_only" => Ok(FusionMode::AugOnly),
            other => Err(Error::Config(format!(
                "unknown fusion mode '{}' (expected subtract, concat, aug_only)",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Subtract => "subtract",
            FusionMode::Concat => "concat",
            FusionMode::AugOnly => "aug_only",
        }
    }
}

/// Head architecture on top of the fused features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadArch {
    Linear,
    TwoLayerMlp,
    /// pred_k = phi(aug)^T W_k phi(ref); ignores the fusion mode.
    Bilinear,
}

impl HeadArch {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadArch::Linear),
            "two_layer_mlp" => Ok(HeadArch::TwoLayerMlp),
            "bilinear" => Ok(HeadArch::Bilinear),
            other => Err(Error::Config(format!(
                "unknown head arch '{}' (expected linear, two_layer_mlp, bilinear)",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadArch::Linear => "linear",
            HeadArch::TwoLayerMlp => "two_layer_mlp",
            HeadArch::Bilinear => "bilinear",
        }
    }
}

/// Architecture hyperparameters for one model bundle.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub feat_dim: usize,
    pub channels: usize,
    pub image_size: usize,
    pub fusion: FusionMode,
    pub head_arch: HeadArch,
    /// Categories that get a prediction head, in canonical order.
    pub head_categories: Vec<AugCategory>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            feat_dim: 128,
            channels: 3,
            image_size: 16,
            fusion: FusionMode::Subtract,
            head_arch: HeadArch::Linear,
            head_categories: AugCategory::ALL.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.feat_dim == 0 {
            return Err(Error::Parameter(
                "latent_dim and feat_dim must be positive".into(),
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Parameter(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.image_size < 4 {
            return Err(Error::Parameter(format!(
                "image_size must be at least 4, got {}",
                self.image_size
            )));
        }
        let mut seen = Vec::new();
        for cat in &self.head_categories {
            if seen.contains(cat) {
                return Err(Error::Parameter(format!(
                    "duplicate head category {}",
                    cat.name()
                )));
            }
            seen.push(*cat);
        }
        Ok(())
    }
}

fn randn(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(shape, data)
}

/// Spatial side length after one stride-2, pad-1, 3x3 convolution.
fn halved(side: usize) -> usize {
    (side - 1) / 2 + 1
}

// ---- generator ---------------------------------------------------------

/// MLP generator: latent -> 256 -> 256 -> C*H*W, tanh output in [-1, 1].
#[derive(Debug, Clone)]
pub struct Generator {
    pub latent_dim: usize,
    pub channels: usize,
    pub image_size: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
}

/// Tape handles for one bound generator.
pub struct GeneratorVars {
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
    w3: TensorId,
    b3: TensorId,
}

impl Generator {
    pub fn init(latent_dim: usize, channels: usize, image_size: usize, rng: &mut impl Rng) -> Self {
        let out = channels * image_size * image_size;
        Self {
            latent_dim,
            channels,
            image_size,
            w1: randn(rng, vec![latent_dim, HIDDEN_DIM], (2.0 / latent_dim as f64).sqrt()),
            b1: Tensor::zeros(vec![HIDDEN_DIM]),
            w2: randn(rng, vec![HIDDEN_DIM, HIDDEN_DIM], (2.0 / HIDDEN_DIM as f64).sqrt()),
            b2: Tensor::zeros(vec![HIDDEN_DIM]),
            w3: randn(rng, vec![HIDDEN_DIM, out], (1.0 / HIDDEN_DIM as f64).sqrt()),
            b3: Tensor::zeros(vec![out]),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("generator.w1".into(), &self.w1),
            ("generator.b1".into(), &self.b1),
            ("generator.w2".into(), &self.w2),
            ("generator.b2".into(), &self.b2),
            ("generator.w3".into(), &self.w3),
            ("generator.b3".into(), &self.b3),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("generator.w1".into(), &mut self.w1),
            ("generator.b1".into(), &mut self.b1),
            ("generator.w2".into(), &mut self.w2),
            ("generator.b2".into(), &mut self.b2),
            ("generator.w3".into(), &mut self.w3),
            ("generator.b3".into(), &mut self.b3),
        ]
    }

    /// Register parameters on the tape; `trainable` controls whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GeneratorVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone().with_grad())
            } else {
                tape.constant(t.clone())
            }
        };
        GeneratorVars {
            w1: reg(&self.w1),
            b1: reg(&self.b1),
            w2: reg(&self.w2),
            b2: reg(&self.b2),
            w3: reg(&self.w3),
            b3: reg(&self.b3),
        }
    }

    /// Tape ids in `named_params` order, for gradient collection.
    pub fn named_ids(&self, vars: &GeneratorVars) -> Vec<(String, TensorId)> {
        vec![
            ("generator.w1".into(), vars.w1),
            ("generator.b1".into(), vars.b1),
            ("generator.w2".into(), vars.w2),
            ("generator.b2".into(), vars.b2),
            ("generator.w3".into(), vars.w3),
            ("generator.b3".into(), vars.b3),
        ]
    }

    /// z [N, latent] -> images [N, C, S, S] in (-1, 1).
    pub fn forward(&self, tape: &mut Tape, vars: &GeneratorVars, z: TensorId) -> Result<TensorId> {
        let zs = tape.value(z).shape();
        if zs.len() != 2 || zs[1] != self.latent_dim {
            return Err(Error::Shape(format!(
                "generator expects [N, {}] latents, got {:?}",
                self.latent_dim, zs
            )));
        }
        let n = zs[0];
        let h1 = tape.matmul(z, vars.w1)?;
        let h1 = tape.add(h1, vars.b1)?;
        let h1 = tape.leaky_relu(h1, LEAKY_SLOPE);
        let h2 = tape.matmul(h1, vars.w2)?;
        let h2 = tape.add(h2, vars.b2)?;
        let h2 = tape.leaky_relu(h2, LEAKY_SLOPE);
        let out = tape.matmul(h2, vars.w3)?;
        let out = tape.add(out, vars.b3)?;
        let out = tape.tanh(out);
        tape.reshape(out, vec![n, self.channels, self.image_size, self.image_size])
    }

    /// Convenience forward without gradients, off any caller tape.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zid = tape.constant(z.clone());
        let vars = self.bind(&mut tape, false);
        let img = self.forward(&mut tape, &vars, zid)?;
        Ok(tape.value(img).clone())
    }
}

// ---- backbone ----------------------------------------------------------

/// Shared feature extractor phi: two stride-2 convolutions and a two-layer
/// MLP down to feat_dim.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub channels: usize,
    pub image_size: usize,
    pub feat_dim: usize,
    flat_dim: usize,
    c1w: Tensor,
    c1b: Tensor,
    c2w: Tensor,
    c2b: Tensor,
    f1w: Tensor,
    f1b: Tensor,
    f2w: Tensor,
    f2b: Tensor,
}

pub struct BackboneVars {
    c1w: TensorId,
    c1b: TensorId,
    c2w: TensorId,
    c2b: TensorId,
    f1w: TensorId,
    f1b: TensorId,
    f2w: TensorId,
    f2b: TensorId,
}

impl Backbone {
    pub fn init(channels: usize, image_size: usize, feat_dim: usize, rng: &mut impl Rng) -> Self {
        let [w1, w2] = CONV_WIDTHS;
        let side = halved(halved(image_size));
        let flat_dim = w2 * side * side;
        let fan1 = channels * 9;
        let fan2 = w1 * 9;
        Self {
            channels,
            image_size,
            feat_dim,
            flat_dim,
            c1w: randn(rng, vec![w1, channels, 3, 3], (2.0 / fan1 as f64).sqrt()),
            c1b: Tensor::zeros(vec![w1]),
            c2w: randn(rng, vec![w2, w1, 3, 3], (2.0 / fan2 as f64).sqrt()),
            c2b: Tensor::zeros(vec![w2]),
            f1w: randn(rng, vec![flat_dim, HIDDEN_DIM], (2.0 / flat_dim as f64).sqrt()),
            f1b: Tensor::zeros(vec![HIDDEN_DIM]),
            f2w: randn(rng, vec![HIDDEN_DIM, feat_dim], (1.0 / HIDDEN_DIM as f64).sqrt()),
            f2b: Tensor::zeros(vec![feat_dim]),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("backbone.c1w".into(), &self.c1w),
            ("backbone.c1b".into(), &self.c1b),
            ("backbone.c2w".into(), &self.c2w),
            ("backbone.c2b".into(), &self.c2b),
            ("backbone.f1w".into(), &self.f1w),
            ("backbone.f1b".into(), &self.f1b),
            ("backbone.f2w".into(), &self.f2w),
            ("backbone.f2b".into(), &self.f2b),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("backbone.c1w".into(), &mut self.c1w),
            ("backbone.c1b".into(), &mut self.c1b),
            ("backbone.c2w".into(), &mut self.c2w),
            ("backbone.c2b".into(), &mut self.c2b),
            ("backbone.f1w".into(), &mut self.f1w),
            ("backbone.f1b".into(), &mut self.f1b),
            ("backbone.f2w".into(), &mut self.f2w),
            ("backbone.f2b".into(), &mut self.f2b),
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BackboneVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone().with_grad())
            } else {
                tape.constant(t.clone())
            }
        };
        BackboneVars {
            c1w: reg(&self.c1w),
            c1b: reg(&self.c1b),
            c2w: reg(&self.c2w),
            c2b: reg(&self.c2b),
            f1w: reg(&self.f1w),
            f1b: reg(&self.f1b),
            f2w: reg(&self.f2w),
            f2b: reg(&self.f2b),
        }
    }

    /// Tape ids in `named_params` order, for gradient collection.
    pub fn named_ids(&self, vars: &BackboneVars) -> Vec<(String, TensorId)> {
        vec![
            ("backbone.c1w".into(), vars.c1w),
            ("backbone.c1b".into(), vars.c1b),
            ("backbone.c2w".into(), vars.c2w),
            ("backbone.c2b".into(), vars.c2b),
            ("backbone.f1w".into(), vars.f1w),
            ("backbone.f1b".into(), vars.f1b),
            ("backbone.f2w".into(), vars.f2w),
            ("backbone.f2b".into(), vars.f2b),
        ]
    }

    /// x [N, C, S, S] -> features [N, feat_dim].
    pub fn forward(&self, tape: &mut Tape, vars: &BackboneVars, x: TensorId) -> Result<TensorId> {
        let xs = tape.value(x).shape();
        if xs.len() != 4 || xs[1] != self.channels || xs[2] != self.image_size || xs[3] != self.image_size
        {
            return Err(Error::Shape(format!(
                "backbone expects [N, {}, {}, {}] images, got {:?}",
                self.channels, self.image_size, self.image_size, xs
            )));
        }
        let n = xs[0];
        let h = tape.conv2d(x, vars.c1w, 2, 1)?;
        let h = tape.add_channel_bias(h, vars.c1b)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = tape.conv2d(h, vars.c2w, 2, 1)?;
        let h = tape.add_channel_bias(h, vars.c2b)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = tape.reshape(h, vec![n, self.flat_dim])?;
        let h = tape.matmul(h, vars.f1w)?;
        let h = tape.add(h, vars.f1b)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = tape.matmul(h, vars.f2w)?;
        tape.add(h, vars.f2b)
    }

    /// Features without gradients, off any caller tape.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let vars = self.bind(&mut tape, false);
        let f = self.forward(&mut tape, &vars, xid)?;
        Ok(tape.value(f).clone())
    }
}

// ---- adversarial head --------------------------------------------------

/// Linear map from features to one real/fake score.
#[derive(Debug, Clone)]
pub struct AdvHead {
    w: Tensor,
    b: Tensor,
}

pub struct AdvHeadVars {
    w: TensorId,
    b: TensorId,
}

impl AdvHead {
    pub fn init(feat_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: randn(rng, vec![feat_dim, 1], (1.0 / feat_dim as f64).sqrt()),
            b: Tensor::zeros(vec![1]),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("adv.w".into(), &self.w), ("adv.b".into(), &self.b)]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("adv.w".into(), &mut self.w), ("adv.b".into(), &mut self.b)]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AdvHeadVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone().with_grad())
            } else {
                tape.constant(t.clone())
            }
        };
        AdvHeadVars {
            w: reg(&self.w),
            b: reg(&self.b),
        }
    }

    /// Tape ids in `named_params` order, for gradient collection.
    pub fn named_ids(&self, vars: &AdvHeadVars) -> Vec<(String, TensorId)> {
        vec![("adv.w".into(), vars.w), ("adv.b".into(), vars.b)]
    }

    /// features [N, F] -> scores [N, 1].
    pub fn forward(&self, tape: &mut Tape, vars: &AdvHeadVars, feat: TensorId) -> Result<TensorId> {
        let s = tape.matmul(feat, vars.w)?;
        tape.add(s, vars.b)
    }
}

// ---- self-supervised heads ---------------------------------------------

/// Prediction head for one augmentation category.
#[derive(Debug, Clone)]
pub struct SelfSupHead {
    pub category: AugCategory,
    pub fusion: FusionMode,
    pub arch: HeadArch,
    pub feat_dim: usize,
    /// Parameter tensors; layout depends on `arch` (see `bind`).
    params: Vec<(String, Tensor)>,
}

pub struct SelfSupHeadVars {
    ids: Vec<TensorId>,
}

impl SelfSupHead {
    pub fn init(
        category: AugCategory,
        fusion: FusionMode,
        arch: HeadArch,
        feat_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = category.dim();
        let prefix = format!("ss.{}", category.name());
        let in_dim = match fusion {
            FusionMode::Concat => 2 * feat_dim,
            _ => feat_dim,
        };
        let params = match arch {
            HeadArch::Linear => vec![
                (
                    format!("{}.w", prefix),
                    randn(rng, vec![in_dim, d], (1.0 / in_dim as f64).sqrt()),
                ),
                (format!("{}.b", prefix), Tensor::zeros(vec![d])),
            ],
            HeadArch::TwoLayerMlp => vec![
                (
                    format!("{}.w1", prefix),
                    randn(rng, vec![in_dim, feat_dim], (2.0 / in_dim as f64).sqrt()),
                ),
                (format!("{}.b1", prefix), Tensor::zeros(vec![feat_dim])),
                (
                    format!("{}.w2", prefix),
                    randn(rng, vec![feat_dim, d], (1.0 / feat_dim as f64).sqrt()),
                ),
                (format!("{}.b2", prefix), Tensor::zeros(vec![d])),
            ],
            HeadArch::Bilinear => (0..d)
                .map(|k| {
                    (
                        format!("{}.m{}", prefix, k),
                        randn(rng, vec![feat_dim, feat_dim], 1.0 / feat_dim as f64),
                    )
                })
                .collect(),
        };
        Self {
            category,
            fusion,
            arch,
            feat_dim,
            params,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.params
            .iter_mut()
            .map(|(n, t)| (n.clone(), t))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> SelfSupHeadVars {
        let ids = self
            .params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone().with_grad())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        SelfSupHeadVars { ids }
    }

    /// Tape ids in `named_params` order, for gradient collection.
    pub fn named_ids(&self, vars: &SelfSupHeadVars) -> Vec<(String, TensorId)> {
        self.params
            .iter()
            .zip(vars.ids.iter())
            .map(|((n, _), &id)| (n.clone(), id))
            .collect()
    }

    /// Predict the category's omega components from a feature pair:
    /// [N, F] x [N, F] -> [N, dim].
    pub fn predict(
        &self,
        tape: &mut Tape,
        vars: &SelfSupHeadVars,
        feat_aug: TensorId,
        feat_ref: TensorId,
    ) -> Result<TensorId> {
        match self.arch {
            HeadArch::Bilinear => {
                let mut cols = Vec::with_capacity(self.category.dim());
                for m in &vars.ids {
                    let t = tape.matmul(feat_aug, *m)?;
                    let prod = tape.mul(t, feat_ref)?;
                    cols.push(tape.row_sums(prod)?);
                }
                tape.concat_cols(&cols)
            }
            arch => {
                let fused = match self.fusion {
                    FusionMode::Subtract => tape.sub(feat_aug, feat_ref)?,
                    FusionMode::Concat => tape.concat_cols(&[feat_aug, feat_ref])?,
                    FusionMode::AugOnly => feat_aug,
                };
                match arch {
                    HeadArch::Linear => {
                        let y = tape.matmul(fused, vars.ids[0])?;
                        tape.add(y, vars.ids[1])
                    }
                    HeadArch::TwoLayerMlp => {
                        let h = tape.matmul(fused, vars.ids[0])?;
                        let h = tape.add(h, vars.ids[1])?;
                        let h = tape.leaky_relu(h, LEAKY_SLOPE);
                        let y = tape.matmul(h, vars.ids[2])?;
                        tape.add(y, vars.ids[3])
                    }
                    HeadArch::Bilinear => unreachable!(),
                }
            }
        }
    }
}

/// Full self-supervised prediction for one category: runs the backbone on
/// both images and applies the head.
pub fn selfsup_predict(
    tape: &mut Tape,
    backbone: &Backbone,
    bvars: &BackboneVars,
    head: &SelfSupHead,
    hvars: &SelfSupHeadVars,
    x_aug: TensorId,
    x_ref: TensorId,
) -> Result<TensorId> {
    let fa = backbone.forward(tape, bvars, x_aug)?;
    let fr = backbone.forward(tape, bvars, x_ref)?;
    head.predict(tape, hvars, fa, fr)
}

// ---- bundle ------------------------------------------------------------

/// Everything trained in one experiment.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub generator: Generator,
    pub backbone: Backbone,
    pub adv_head: AdvHead,
    /// One head per `config.head_categories` entry, same order.
    pub ss_heads: Vec<SelfSupHead>,
}

impl ModelBundle {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let generator = Generator::init(config.latent_dim, config.channels, config.image_size, rng);
        let backbone = Backbone::init(config.channels, config.image_size, config.feat_dim, rng);
        let adv_head = AdvHead::init(config.feat_dim, rng);
        let ss_heads = config
            .head_categories
            .iter()
            .map(|&cat| SelfSupHead::init(cat, config.fusion, config.head_arch, config.feat_dim, rng))
            .collect();
        Ok(Self {
            config,
            generator,
            backbone,
            adv_head,
            ss_heads,
        })
    }

    pub fn head_for(&self, cat: AugCategory) -> Option<&SelfSupHead> {
        self.ss_heads.iter().find(|h| h.category == cat)
    }

    /// All parameters with stable names, generator first.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.generator.named_params();
        out.extend(self.backbone.named_params());
        out.extend(self.adv_head.named_params());
        for head in &self.ss_heads {
            out.extend(head.named_params());
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.generator.named_params_mut();
        out.extend(self.backbone.named_params_mut());
        out.extend(self.adv_head.named_params_mut());
        for head in &mut self.ss_heads {
            out.extend(head.named_params_mut());
        }
        out
    }

    /// Discriminator-side parameters (backbone, adversarial head, ss heads).
    pub fn named_d_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.backbone.named_params_mut();
        out.extend(self.adv_head.named_params_mut());
        for head in &mut self.ss_heads {
            out.extend(head.named_params_mut());
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(path, &self.named_params())
    }

    /// Load a checkpoint into this bundle; names and shapes must match the
    /// current architecture exactly.
    pub fn load_into(&mut self, path: &std::path::Path) -> Result<()> {
        let loaded = load_checkpoint(path)?;
        let mut params = self.named_params_mut();
        if loaded.len() != params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model has {}",
                loaded.len(),
                params.len()
            )));
        }
        for ((lname, ltensor), (mname, mtensor)) in loaded.into_iter().zip(params.iter_mut()) {
            if lname != *mname {
                return Err(Error::Shape(format!(
                    "checkpoint tensor '{}' does not match model tensor '{}'",
                    lname, mname
                )));
            }
            if ltensor.shape() != mtensor.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor '{}' has shape {:?}, model expects {:?}",
                    lname,
                    ltensor.shape(),
                    mtensor.shape()
                )));
            }
            mtensor.data_mut().copy_from_slice(ltensor.data());
        }
        Ok(())
    }
}

/// Parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCounts {
    pub generator: usize,
    pub backbone: usize,
    pub adv_head: usize,
    pub ss_heads: usize,
    pub total: usize,
    /// ss_heads / (backbone + adv_head + ss_heads): the relative cost of
    /// adding the heads to the discriminator.
    pub ss_fraction: f64,
}

pub fn count_params(bundle: &ModelBundle) -> ParamCounts {
    let sum = |params: Vec<(String, &Tensor)>| -> usize {
        params.iter().map(|(_, t)| t.numel()).sum()
    };
    let generator = sum(bundle.generator.named_params());
    let backbone = sum(bundle.backbone.named_params());
    let adv_head = sum(bundle.adv_head.named_params());
    let ss_heads: usize = bundle.ss_heads.iter().map(|h| h.param_count()).sum();
    let disc = backbone + adv_head + ss_heads;
    ParamCounts {
        generator,
        backbone,
        adv_head,
        ss_heads,
        total: generator + disc,
        ss_fraction: if disc == 0 { 0.0 } else { ss_heads as f64 / disc as f64 },
    }
}

// ---- checkpoint format -------------------------------------------------

/// File magic for model checkpoints.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AUGSELF1";

/// Serialize named tensors: magic, then per tensor a little-endian u32 name
/// length, the name bytes, a u32 rank, u64 dims, and raw f64 data.
pub fn encode_checkpoint(named: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for (name, tensor) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Numeric(format!(
                "truncated checkpoint '{}' at offset {}",
                self.path, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parse a checkpoint byte stream back into named tensors.
pub fn decode_checkpoint(bytes: &[u8], path: &str) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Numeric(format!(
            "'{}' is not a model checkpoint (bad magic)",
            path
        )));
    }
    let mut r = ByteReader {
        bytes,
        pos: 8,
        path,
    };
    let mut out = Vec::new();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Numeric(format!("bad tensor name in '{}'", path)))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        out.push((name, Tensor::from_parts(shape, data)));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &std::path::Path, named: &[(String, &Tensor)]) -> Result<()> {
    std::fs::write(path, encode_checkpoint(named))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

/// Run backbone and adversarial head together: x -> (features, scores).
pub fn discriminator_forward(
    tape: &mut Tape,
    backbone: &Backbone,
    bvars: &BackboneVars,
    adv: &AdvHead,
    avars: &AdvHeadVars,
    x: TensorId,
) -> Result<(TensorId, TensorId)> {
    let feat = backbone.forward(tape, bvars, x)?;
    let score = adv.forward(tape, avars, feat)?;
    Ok((feat, score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn default_bundle(seed: u64) -> ModelBundle {
        ModelBundle::init(ModelConfig::default(), &mut rng(seed)).unwrap()
    }

    #[test]
    fn generator_output_shape_and_range() {
        let bundle = default_bundle(1);
        let z = Tensor::full(vec![4, 32], 0.3);
        let img = bundle.generator.generate(&z).unwrap();
        assert_eq!(img.shape(), &[4, 3, 16, 16]);
        assert!(img.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn backbone_feature_shape() {
        let bundle = default_bundle(2);
        let x = Tensor::zeros(vec![2, 3, 16, 16]);
        let f = bundle.backbone.features(&x).unwrap();
        assert_eq!(f.shape(), &[2, 128]);
        assert!(f.is_finite());
    }

    #[test]
    fn discriminator_scores_are_per_sample() {
        let bundle = default_bundle(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![5, 3, 16, 16]));
        let bv = bundle.backbone.bind(&mut tape, false);
        let av = bundle.adv_head.bind(&mut tape, false);
        let (feat, score) =
            discriminator_forward(&mut tape, &bundle.backbone, &bv, &bundle.adv_head, &av, x)
                .unwrap();
        assert_eq!(tape.value(feat).shape(), &[5, 128]);
        assert_eq!(tape.value(score).shape(), &[5, 1]);
    }

    #[test]
    fn head_output_dims_follow_category() {
        let bundle = default_bundle(4);
        let mut tape = Tape::new();
        let fa = tape.constant(Tensor::full(vec![3, 128], 0.1));
        let fr = tape.constant(Tensor::full(vec![3, 128], -0.2));
        for head in &bundle.ss_heads {
            let hv = head.bind(&mut tape, false);
            let pred = head.predict(&mut tape, &hv, fa, fr).unwrap();
            assert_eq!(tape.value(pred).shape(), &[3, head.category.dim()]);
        }
    }

    #[test]
    fn all_head_variants_produce_finite_predictions() {
        let mut tape = Tape::new();
        let fa = tape.constant(Tensor::full(vec![2, 16], 0.5));
        let fr = tape.constant(Tensor::full(vec![2, 16], -0.5));
        for fusion in [FusionMode::Subtract, FusionMode::Concat, FusionMode::AugOnly] {
            for arch in [HeadArch::Linear, HeadArch::TwoLayerMlp, HeadArch::Bilinear] {
                let head = SelfSupHead::init(AugCategory::Cutout, fusion, arch, 16, &mut rng(7));
                let hv = head.bind(&mut tape, false);
                let pred = head.predict(&mut tape, &hv, fa, fr).unwrap();
                assert_eq!(tape.value(pred).shape(), &[2, 2]);
                assert!(tape.value(pred).is_finite());
            }
        }
    }

    #[test]
    fn subtract_fusion_is_antisymmetric_in_gradients() {
        let head = SelfSupHead::init(
            AugCategory::Color,
            FusionMode::Subtract,
            HeadArch::Linear,
            16,
            &mut rng(9),
        );
        let mut tape = Tape::new();
        let fa = tape.leaf(Tensor::full(vec![2, 16], 0.3).with_grad());
        let fr = tape.leaf(Tensor::full(vec![2, 16], -0.1).with_grad());
        let hv = head.bind(&mut tape, false);
        let pred = head.predict(&mut tape, &hv, fa, fr).unwrap();
        let loss = tape.sum_all(pred);
        tape.backward(loss).unwrap();
        let ga = tape.grad(fa).unwrap().to_vec();
        let gb = tape.grad(fr).unwrap().to_vec();
        assert_eq!(ga.len(), gb.len());
        for (x, y) in ga.iter().zip(gb.iter()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn default_head_cost_is_903_parameters() {
        let bundle = default_bundle(5);
        let counts = count_params(&bundle);
        // feat_dim * dim + dim per category: 3 + 2 + 2 components total.
        assert_eq!(counts.ss_heads, 128 * 7 + 7);
        assert_eq!(counts.ss_heads, 903);
        assert!(
            counts.ss_fraction < 0.005,
            "ss fraction {} too large",
            counts.ss_fraction
        );
        assert_eq!(
            counts.total,
            counts.generator + counts.backbone + counts.adv_head + counts.ss_heads
        );
    }

    #[test]
    fn no_heads_means_zero_ss_parameters() {
        let config = ModelConfig {
            head_categories: vec![],
            ..ModelConfig::default()
        };
        let bundle = ModelBundle::init(config, &mut rng(6)).unwrap();
        let counts = count_params(&bundle);
        assert_eq!(counts.ss_heads, 0);
        assert_eq!(counts.ss_fraction, 0.0);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = default_bundle(11);
        let b = default_bundle(11);
        let c = default_bundle(12);
        for ((_, ta), (_, tb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
        let differs = a
            .named_params()
            .iter()
            .zip(c.named_params().iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(differs);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let bundle = default_bundle(21);
        bundle.save(&path).unwrap();

        let mut other = default_bundle(22);
        let before_differs = bundle
            .named_params()
            .iter()
            .zip(other.named_params().iter())
            .any(|((_, a), (_, b))| a.data() != b.data());
        assert!(before_differs);

        other.load_into(&path).unwrap();
        for ((na, ta), (nb, tb)) in bundle.named_params().iter().zip(other.named_params().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_mismatched_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC rest").unwrap();
        assert!(load_checkpoint(&path).is_err());

        let small = ModelBundle::init(
            ModelConfig {
                feat_dim: 8,
                ..ModelConfig::default()
            },
            &mut rng(1),
        )
        .unwrap();
        let path2 = dir.path().join("small.ckpt");
        small.save(&path2).unwrap();
        let mut big = default_bundle(2);
        assert!(big.load_into(&path2).is_err());
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut cfg = ModelConfig::default();
        cfg.channels = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.head_categories = vec![AugCategory::Color, AugCategory::Color];
        assert!(cfg.validate().is_err());
    }
}
