//! Experiment configuration, the adversarial training loop, evaluation,
//! checkpointing, and the lambda sweep.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::augment::{apply_all, AugCategory, AugConfig, AugParams};
use crate::data::{import_idx_images, make_shapes_dataset, LabelKind, ShapesDataset};
use crate::error::{Error, Result};
use crate::losses::{
    gan_d_loss, gan_g_loss, ss_variant_d_loss, ss_variant_g_loss, GanKind, GenSsVariant,
    LossConfig, SsTask,
};
use crate::metrics::{frechet_distance, linear_probe, mode_coverage, MetricsRecord, CSV_HEADER};
use crate::models::{
    discriminator_forward, load_checkpoint, save_checkpoint, FusionMode, HeadArch, ModelBundle,
    ModelConfig,
};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Tape, Tensor};

/// Dedicated ChaCha streams derived from one master seed.
const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_LATENT: u64 = 2;
const STREAM_AUG: u64 = 3;
const STREAM_EVAL: u64 = 4;

/// Mode-coverage radius: this multiple of the median member-to-center
/// distance within each (shape, color) class.
pub const MODE_RADIUS_FACTOR: f64 = 1.5;

/// Probe features are computed on at most this many dataset images.
const PROBE_SAMPLE_CAP: usize = 512;

/// Seed for the probe's train/test split, fixed across evaluations.
const PROBE_SEED: u64 = 17;

const META_NAME: &str = "state.meta";
const META_LEN: usize = 29;

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---- configuration -----------------------------------------------------

/// Embedding used for the Fréchet distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdFeatures {
    /// Raw flattened pixels (the default, self-contained choice).
    Pixels,
    /// Frozen discriminator backbone features.
    Discriminator,
}

impl FdFeatures {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pixels" => Ok(FdFeatures::Pixels),
            "discriminator" => Ok(FdFeatures::Discriminator),
            other => Err(Error::Parameter(format!(
                "unknown fd feature space '{}' (expected pixels|discriminator)",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FdFeatures::Pixels => "pixels",
            FdFeatures::Discriminator => "discriminator",
        }
    }
}

/// Everything one experiment needs. Builders: `Default`, then `apply_kv`
/// with the documented `section.key` strings.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset_n: usize,
    pub dataset_seed: u64,
    pub dataset_size: usize,
    /// Optional IDX image file; when set, it replaces the generated dataset
    /// and `dataset.n`/`dataset.seed`/`dataset.size` are ignored.
    pub dataset_idx: Option<PathBuf>,
    pub fraction: f64,
    pub fraction_seed: u64,
    pub model: ModelConfig,
    pub aug: AugConfig,
    pub loss: LossConfig,
    /// Augmentation categories whose parameters the self-supervised task
    /// predicts. Must be enabled and have heads.
    pub signals: Vec<AugCategory>,
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch: usize,
    pub d_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    /// Separate seed for the augmentation stream; `None` follows `seed`.
    pub aug_seed: Option<u64>,
    pub fd_samples: usize,
    pub fd_features: FdFeatures,
    pub probe_steps: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_n: 2000,
            dataset_seed: 0,
            dataset_size: 16,
            dataset_idx: None,
            fraction: 1.0,
            fraction_seed: 1,
            model: ModelConfig::default(),
            aug: AugConfig::normal(),
            loss: LossConfig::default(),
            signals: AugCategory::ALL.to_vec(),
            adam: AdamConfig::default(),
            steps: 2000,
            batch: 32,
            d_steps: 1,
            eval_interval: 100,
            seed: 0,
            aug_seed: None,
            fd_samples: 256,
            fd_features: FdFeatures::Pixels,
            probe_steps: 300,
            out_dir: PathBuf::from("runs/exp"),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("key '{}': cannot parse '{}': {}", key, value, e)))
}

fn wrap_key(key: &str, err: Error) -> Error {
    Error::Config(format!("key '{}': {}", key, err))
}

fn parse_list(value: &str) -> Vec<&str> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

impl ExperimentConfig {
    pub fn effective_aug_seed(&self) -> u64 {
        self.aug_seed.unwrap_or(self.seed)
    }

    /// Apply one `section.key=value` override.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset.n" => self.dataset_n = parse_num(key, value)?,
            "dataset.seed" => self.dataset_seed = parse_num(key, value)?,
            "dataset.size" => {
                self.dataset_size = parse_num(key, value)?;
                self.model.image_size = self.dataset_size;
            }
            "dataset.idx" => self.dataset_idx = Some(PathBuf::from(value)),
            "data.fraction" => self.fraction = parse_num(key, value)?,
            "data.seed" => self.fraction_seed = parse_num(key, value)?,
            "model.latent_dim" => self.model.latent_dim = parse_num(key, value)?,
            "model.feat_dim" => self.model.feat_dim = parse_num(key, value)?,
            "model.channels" => self.model.channels = parse_num(key, value)?,
            "model.fusion" => {
                self.model.fusion = FusionMode::parse(value).map_err(|e| wrap_key(key, e))?
            }
            "model.head_arch" => {
                self.model.head_arch = HeadArch::parse(value).map_err(|e| wrap_key(key, e))?
            }
            "aug.preset" => {
                self.aug = match value {
                    "normal" => AugConfig::normal(),
                    "strong" => AugConfig::strong(),
                    other => {
                        return Err(Error::Config(format!(
                            "key 'aug.preset': unknown preset '{}' (expected normal|strong)",
                            other
                        )))
                    }
                }
            }
            "aug.translation_ratio" => self.aug.translation_ratio = parse_num(key, value)?,
            "aug.cutout_ratio" => self.aug.cutout_ratio = parse_num(key, value)?,
            "aug.enabled" => {
                let mut enabled = [false; 3];
                for name in parse_list(value) {
                    let cat = AugCategory::parse(name).map_err(|e| wrap_key(key, e))?;
                    enabled[cat as usize] = true;
                }
                self.aug.enabled = enabled;
            }
            "loss.gan_kind" => {
                self.loss.gan = GanKind::parse(value).map_err(|e| wrap_key(key, e))?
            }
            "loss.ss_task" => {
                self.loss.ss_task = SsTask::parse(value).map_err(|e| wrap_key(key, e))?
            }
            "loss.gen_ss_variant" => {
                self.loss.gen_variant = GenSsVariant::parse(value).map_err(|e| wrap_key(key, e))?
            }
            "loss.signals" => {
                let mut signals = Vec::new();
                for name in parse_list(value) {
                    let cat = AugCategory::parse(name).map_err(|e| wrap_key(key, e))?;
                    if signals.contains(&cat) {
                        return Err(Error::Config(format!(
                            "key 'loss.signals': duplicate category '{}'",
                            name
                        )));
                    }
                    signals.push(cat);
                }
                self.signals = signals;
            }
            "loss.lambda_d" => self.loss.lambda_d = parse_num(key, value)?,
            "loss.lambda_g" => self.loss.lambda_g = parse_num(key, value)?,
            "loss.fixed_c" => {
                let parts = parse_list(value);
                let mut c = Vec::with_capacity(parts.len());
                for p in parts {
                    c.push(parse_num::<f64>(key, p)?);
                }
                if c.len() != crate::augment::OMEGA_DIM {
                    return Err(Error::Config(format!(
                        "key 'loss.fixed_c': expected {} comma-separated values, got {}",
                        crate::augment::OMEGA_DIM,
                        c.len()
                    )));
                }
                self.loss.fixed_c = c;
            }
            "train.steps" => self.steps = parse_num(key, value)?,
            "train.lr" => self.adam.lr = parse_num(key, value)?,
            "train.beta1" => self.adam.beta1 = parse_num(key, value)?,
            "train.beta2" => self.adam.beta2 = parse_num(key, value)?,
            "train.batch" => self.batch = parse_num(key, value)?,
            "train.d_steps" => self.d_steps = parse_num(key, value)?,
            "train.eval_interval" => self.eval_interval = parse_num(key, value)?,
            "train.seed" => self.seed = parse_num(key, value)?,
            "train.aug_seed" => self.aug_seed = Some(parse_num(key, value)?),
            "eval.fd_samples" => self.fd_samples = parse_num(key, value)?,
            "eval.fd_features" => {
                self.fd_features = FdFeatures::parse(value).map_err(|e| wrap_key(key, e))?
            }
            "eval.probe_steps" => self.probe_steps = parse_num(key, value)?,
            "out.dir" => self.out_dir = PathBuf::from(value),
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key '{}'",
                    other
                )))
            }
        }
        Ok(())
    }

    /// The effective configuration as canonical key=value pairs, in
    /// documented key order. Re-applying them reproduces this config.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let cat_list = |cats: &[AugCategory]| {
            cats.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")
        };
        let enabled: Vec<AugCategory> = AugCategory::ALL
            .into_iter()
            .filter(|&c| self.aug.is_enabled(c))
            .collect();
        let fixed_c = self
            .loss
            .fixed_c
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut kv: Vec<(String, String)> = vec![
            ("dataset.n".into(), self.dataset_n.to_string()),
            ("dataset.seed".into(), self.dataset_seed.to_string()),
            ("dataset.size".into(), self.dataset_size.to_string()),
        ];
        if let Some(idx) = &self.dataset_idx {
            kv.push(("dataset.idx".into(), idx.display().to_string()));
        }
        kv.extend([
            ("data.fraction".into(), self.fraction.to_string()),
            ("data.seed".into(), self.fraction_seed.to_string()),
            ("model.latent_dim".into(), self.model.latent_dim.to_string()),
            ("model.feat_dim".into(), self.model.feat_dim.to_string()),
            ("model.channels".into(), self.model.channels.to_string()),
            ("model.fusion".into(), self.model.fusion.name().into()),
            ("model.head_arch".into(), self.model.head_arch.name().into()),
            (
                "aug.translation_ratio".into(),
                self.aug.translation_ratio.to_string(),
            ),
            ("aug.cutout_ratio".into(), self.aug.cutout_ratio.to_string()),
            ("aug.enabled".into(), cat_list(&enabled)),
            ("loss.gan_kind".into(), self.loss.gan.name().into()),
            ("loss.ss_task".into(), self.loss.ss_task.name().into()),
            (
                "loss.gen_ss_variant".into(),
                self.loss.gen_variant.name().into(),
            ),
            ("loss.signals".into(), cat_list(&self.signals)),
            ("loss.lambda_d".into(), self.loss.lambda_d.to_string()),
            ("loss.lambda_g".into(), self.loss.lambda_g.to_string()),
            ("loss.fixed_c".into(), fixed_c),
            ("train.steps".into(), self.steps.to_string()),
            ("train.lr".into(), self.adam.lr.to_string()),
            ("train.beta1".into(), self.adam.beta1.to_string()),
            ("train.beta2".into(), self.adam.beta2.to_string()),
            ("train.batch".into(), self.batch.to_string()),
            ("train.d_steps".into(), self.d_steps.to_string()),
            (
                "train.eval_interval".into(),
                self.eval_interval.to_string(),
            ),
            ("train.seed".into(), self.seed.to_string()),
            ("train.aug_seed".into(), self.effective_aug_seed().to_string()),
            ("eval.fd_samples".into(), self.fd_samples.to_string()),
            ("eval.fd_features".into(), self.fd_features.name().into()),
            ("eval.probe_steps".into(), self.probe_steps.to_string()),
            ("out.dir".into(), self.out_dir.display().to_string()),
        ]);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_idx.is_none() {
            if self.dataset_n == 0 {
                return Err(Error::Config("key 'dataset.n': must be at least 1".into()));
            }
            if self.dataset_size < 8 {
                return Err(Error::Config(
                    "key 'dataset.size': generated shapes need a side of at least 8".into(),
                ));
            }
            if self.dataset_size != self.model.image_size {
                return Err(Error::Config(format!(
                    "key 'dataset.size': dataset images are {} but the model expects {}",
                    self.dataset_size, self.model.image_size
                )));
            }
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "key 'data.fraction': must lie in (0, 1], got {}",
                self.fraction
            )));
        }
        self.model.validate()?;
        self.aug.validate()?;
        self.loss.validate()?;
        self.adam.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("key 'train.batch': must be at least 1".into()));
        }
        if self.d_steps == 0 {
            return Err(Error::Config(
                "key 'train.d_steps': must be at least 1".into(),
            ));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config(
                "key 'train.eval_interval': must be at least 1".into(),
            ));
        }
        if self.fd_samples < 2 {
            return Err(Error::Config(
                "key 'eval.fd_samples': must be at least 2".into(),
            ));
        }
        if self.probe_steps == 0 {
            return Err(Error::Config(
                "key 'eval.probe_steps': must be at least 1".into(),
            ));
        }
        if self.loss.ss_task != SsTask::None {
            if self.signals.is_empty() {
                return Err(Error::Config(
                    "key 'loss.signals': must name at least one augmentation category".into(),
                ));
            }
            for &cat in &self.signals {
                if !self.aug.is_enabled(cat) {
                    return Err(Error::Config(format!(
                        "key 'loss.signals': '{}' is not an enabled augmentation",
                        cat.name()
                    )));
                }
                if !self.model.head_categories.contains(&cat) {
                    return Err(Error::Config(format!(
                        "key 'loss.signals': '{}' has no prediction head",
                        cat.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---- training state ----------------------------------------------------

/// Loss components of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    /// Full discriminator objective (adversarial + lambda_d * ss).
    pub d_loss: f64,
    /// Full generator objective (adversarial + lambda_g * ss).
    pub g_loss: f64,
    /// Discriminator-side ss components: color, translation, cutout.
    pub ss_d: [f64; 3],
    /// Generator-side ss components: color, translation, cutout.
    pub ss_g: [f64; 3],
}

/// Everything that evolves during a run.
pub struct TrainState {
    pub config: ExperimentConfig,
    pub dataset: ShapesDataset,
    pub models: ModelBundle,
    pub opt_d: Adam,
    pub opt_g: Adam,
    pub step: usize,
    pub last: StepLosses,
    pub history: Vec<StepLosses>,
    data_rng: ChaCha12Rng,
    latent_rng: ChaCha12Rng,
    aug_rng: ChaCha12Rng,
    eval_rng: ChaCha12Rng,
}

fn sample_latents(rng: &mut ChaCha12Rng, n: usize, dim: usize) -> Result<Tensor> {
    let data: Vec<f64> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![n, dim], data)
}

/// [N, C, H, W] -> [N, C*H*W] with the same data.
fn flatten_images(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 2 && s.len() != 4 {
        return Err(Error::Shape(format!(
            "expected an image batch or matrix, got {:?}",
            s
        )));
    }
    let n = s[0];
    let d = t.numel() / n.max(1);
    Tensor::new(vec![n, d], t.data().to_vec())
}

fn split_u64(v: u64) -> [f64; 2] {
    [(v & 0xffff_ffff) as f64, (v >> 32) as f64]
}

fn join_u64(lo: f64, hi: f64) -> u64 {
    (lo as u64) | ((hi as u64) << 32)
}

fn split_u128(v: u128) -> [f64; 4] {
    [
        (v & 0xffff_ffff) as f64,
        ((v >> 32) & 0xffff_ffff) as f64,
        ((v >> 64) & 0xffff_ffff) as f64,
        ((v >> 96) & 0xffff_ffff) as f64,
    ]
}

fn join_u128(limbs: &[f64]) -> u128 {
    (limbs[0] as u128)
        | ((limbs[1] as u128) << 32)
        | ((limbs[2] as u128) << 64)
        | ((limbs[3] as u128) << 96)
}

impl TrainState {
    pub fn new(mut config: ExperimentConfig) -> Result<Self> {
        let full = match &config.dataset_idx {
            Some(path) => {
                let ds = import_idx_images(path)?;
                config.model.channels = ds.channels();
                config.model.image_size = ds.image_size();
                config.dataset_size = ds.image_size();
                ds
            }
            None => make_shapes_dataset(config.dataset_n, config.dataset_seed, config.dataset_size)?,
        };
        config.validate()?;
        let dataset = full.subsample(config.fraction, config.fraction_seed)?;
        let mut init_rng = stream_rng(config.seed, STREAM_INIT);
        let models = ModelBundle::init(config.model.clone(), &mut init_rng)?;
        let opt_d = Adam::new(config.adam.clone())?;
        let opt_g = Adam::new(config.adam.clone())?;
        let data_rng = stream_rng(config.seed, STREAM_DATA);
        let latent_rng = stream_rng(config.seed, STREAM_LATENT);
        let aug_rng = stream_rng(config.effective_aug_seed(), STREAM_AUG);
        let eval_rng = stream_rng(config.seed, STREAM_EVAL);
        Ok(Self {
            config,
            dataset,
            models,
            opt_d,
            opt_g,
            step: 0,
            last: StepLosses::default(),
            history: Vec::new(),
            data_rng,
            latent_rng,
            aug_rng,
            eval_rng,
        })
    }

    fn draw_batch_indices(&mut self) -> Vec<usize> {
        let n = self.dataset.len();
        (0..self.config.batch)
            .map(|_| self.data_rng.gen_range(0..n))
            .collect()
    }

    /// One discriminator update: adversarial loss on augmented real and
    /// augmented (detached) fake, plus the weighted self-supervised loss.
    /// Real and fake share one omega draw; targets differ by task.
    fn d_update(&mut self) -> Result<(f64, [f64; 3])> {
        let b = self.config.batch;
        let idx = self.draw_batch_indices();
        let real = self.dataset.batch(&idx)?;
        let z = sample_latents(&mut self.latent_rng, b, self.config.model.latent_dim)?;
        let aug_params = AugParams::sample(&mut self.aug_rng, b);
        let fake = self.models.generator.generate(&z)?;
        let use_ss = self.config.loss.d_uses_ss() && !self.config.signals.is_empty();

        let (total_val, components, grads) = {
            let models = &self.models;
            let cfg = &self.config;
            let mut tape = Tape::new();
            let bvars = models.backbone.bind(&mut tape, true);
            let avars = models.adv_head.bind(&mut tape, true);
            let mut head_binds = Vec::new();
            if use_ss {
                for &cat in &cfg.signals {
                    let head = models.head_for(cat).ok_or_else(|| {
                        Error::Contract(format!("no head for signal '{}'", cat.name()))
                    })?;
                    head_binds.push((cat, head.bind(&mut tape, true)));
                }
            }
            let x_real = tape.constant(real);
            let x_fake = tape.constant(fake);
            let aug_real = apply_all(&mut tape, x_real, &aug_params, &cfg.aug)?;
            let aug_fake = apply_all(&mut tape, x_fake, &aug_params, &cfg.aug)?;
            let (feat_real_aug, score_real) =
                discriminator_forward(&mut tape, &models.backbone, &bvars, &models.adv_head, &avars, aug_real)?;
            let (feat_fake_aug, score_fake) =
                discriminator_forward(&mut tape, &models.backbone, &bvars, &models.adv_head, &avars, aug_fake)?;
            let d_adv = gan_d_loss(&mut tape, score_real, score_fake, cfg.loss.gan)?;

            let mut components = [0.0; 3];
            let mut total = d_adv;
            if use_ss {
                let feat_real_ref = models.backbone.forward(&mut tape, &bvars, x_real)?;
                let feat_fake_ref = models.backbone.forward(&mut tape, &bvars, x_fake)?;
                let mut ss_total = None;
                for (cat, hvars) in &head_binds {
                    let head = models.head_for(*cat).expect("bound above");
                    let pred_real =
                        head.predict(&mut tape, hvars, feat_real_aug, feat_real_ref)?;
                    let pred_fake =
                        head.predict(&mut tape, hvars, feat_fake_aug, feat_fake_ref)?;
                    let omega = tape.constant(aug_params.targets(*cat));
                    let cat_loss = ss_variant_d_loss(
                        &mut tape,
                        pred_real,
                        pred_fake,
                        omega,
                        cfg.loss.ss_task,
                        cfg.loss.fixed_c_for(*cat),
                    )?;
                    components[*cat as usize] = tape.value(cat_loss).scalar_value()?;
                    ss_total = Some(match ss_total {
                        None => cat_loss,
                        Some(acc) => tape.add(acc, cat_loss)?,
                    });
                }
                if let Some(ss) = ss_total {
                    let weighted = tape.mul_scalar(ss, cfg.loss.lambda_d);
                    total = tape.add(total, weighted)?;
                }
            }

            let total_val = tape.value(total).scalar_value()?;
            let adv_val = tape.value(d_adv).scalar_value()?;
            if !total_val.is_finite() || !adv_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite discriminator loss at step {}: adv={}, ss_color={}, ss_translation={}, ss_cutout={}",
                    self.step, adv_val, components[0], components[1], components[2]
                )));
            }
            tape.backward(total)?;

            let mut named_ids = models.backbone.named_ids(&bvars);
            named_ids.extend(models.adv_head.named_ids(&avars));
            for (cat, hvars) in &head_binds {
                let head = models.head_for(*cat).expect("bound above");
                named_ids.extend(head.named_ids(hvars));
            }
            let grads: Vec<(String, Vec<f64>)> = named_ids
                .into_iter()
                .map(|(name, id)| (name, tape.grad_tensor(id).data().to_vec()))
                .collect();
            (total_val, components, grads)
        };

        let mut pool: BTreeMap<String, &mut Tensor> =
            self.models.named_d_params_mut().into_iter().collect();
        let mut params = Vec::with_capacity(grads.len());
        for (name, _) in &grads {
            let tensor = pool.remove(name).ok_or_else(|| {
                Error::Contract(format!("gradient for unknown parameter '{}'", name))
            })?;
            params.push((name.clone(), tensor));
        }
        drop(pool);
        self.opt_d.step(&mut params, &grads)?;
        Ok((total_val, components))
    }

    /// One generator update: adversarial loss through the frozen
    /// discriminator on augmented generated images, plus the weighted
    /// self-supervised generator loss. Fresh omega, independent of the
    /// discriminator pass.
    fn g_update(&mut self) -> Result<(f64, [f64; 3])> {
        let b = self.config.batch;
        let z = sample_latents(&mut self.latent_rng, b, self.config.model.latent_dim)?;
        let aug_params = AugParams::sample(&mut self.aug_rng, b);
        let use_ss = self.config.loss.g_uses_ss() && !self.config.signals.is_empty();

        let (total_val, components, grads) = {
            let models = &self.models;
            let cfg = &self.config;
            let mut tape = Tape::new();
            let gvars = models.generator.bind(&mut tape, true);
            let bvars = models.backbone.bind(&mut tape, false);
            let avars = models.adv_head.bind(&mut tape, false);
            let mut head_binds = Vec::new();
            if use_ss {
                for &cat in &cfg.signals {
                    let head = models.head_for(cat).ok_or_else(|| {
                        Error::Contract(format!("no head for signal '{}'", cat.name()))
                    })?;
                    head_binds.push((cat, head.bind(&mut tape, false)));
                }
            }
            let z_id = tape.constant(z);
            let x_fake = models.generator.forward(&mut tape, &gvars, z_id)?;
            let x_aug = apply_all(&mut tape, x_fake, &aug_params, &cfg.aug)?;
            let (feat_aug, score) =
                discriminator_forward(&mut tape, &models.backbone, &bvars, &models.adv_head, &avars, x_aug)?;
            let g_adv = gan_g_loss(&mut tape, score, cfg.loss.gan)?;

            let mut components = [0.0; 3];
            let mut total = g_adv;
            if use_ss {
                let feat_ref = models.backbone.forward(&mut tape, &bvars, x_fake)?;
                let mut ss_total = None;
                for (cat, hvars) in &head_binds {
                    let head = models.head_for(*cat).expect("bound above");
                    let pred = head.predict(&mut tape, hvars, feat_aug, feat_ref)?;
                    let omega = tape.constant(aug_params.targets(*cat));
                    let cat_loss = ss_variant_g_loss(
                        &mut tape,
                        pred,
                        omega,
                        cfg.loss.ss_task,
                        cfg.loss.gen_variant,
                        cfg.loss.fixed_c_for(*cat),
                    )?;
                    components[*cat as usize] = tape.value(cat_loss).scalar_value()?;
                    ss_total = Some(match ss_total {
                        None => cat_loss,
                        Some(acc) => tape.add(acc, cat_loss)?,
                    });
                }
                if let Some(ss) = ss_total {
                    let weighted = tape.mul_scalar(ss, cfg.loss.lambda_g);
                    total = tape.add(total, weighted)?;
                }
            }

            let total_val = tape.value(total).scalar_value()?;
            let adv_val = tape.value(g_adv).scalar_value()?;
            if !total_val.is_finite() || !adv_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite generator loss at step {}: adv={}, ss_color={}, ss_translation={}, ss_cutout={}",
                    self.step, adv_val, components[0], components[1], components[2]
                )));
            }
            tape.backward(total)?;

            let grads: Vec<(String, Vec<f64>)> = models
                .generator
                .named_ids(&gvars)
                .into_iter()
                .map(|(name, id)| (name, tape.grad_tensor(id).data().to_vec()))
                .collect();
            (total_val, components, grads)
        };

        let mut params = self.models.generator.named_params_mut();
        self.opt_g.step(&mut params, &grads)?;
        Ok((total_val, components))
    }

    /// One full training step: `d_steps` discriminator updates, then one
    /// generator update.
    pub fn train_step(&mut self) -> Result<StepLosses> {
        let mut d_loss = 0.0;
        let mut ss_d = [0.0; 3];
        for _ in 0..self.config.d_steps {
            let (l, c) = self.d_update()?;
            d_loss = l;
            ss_d = c;
        }
        let (g_loss, ss_g) = self.g_update()?;
        self.step += 1;
        let losses = StepLosses {
            d_loss,
            g_loss,
            ss_d,
            ss_g,
        };
        self.last = losses;
        self.history.push(losses);
        Ok(losses)
    }

    /// Mode centers (mean image per present (shape, color) class, flattened)
    /// and the coverage radius.
    fn class_modes(&self) -> Result<(Tensor, f64)> {
        let flat = flatten_images(&self.dataset.images)?;
        let n = flat.shape()[0];
        let d = flat.shape()[1];
        let shapes = self.dataset.labels(LabelKind::Shape);
        let colors = self.dataset.labels(LabelKind::Color);
        let mut groups: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for i in 0..n {
            let key = shapes[i] * LabelKind::Color.classes() + colors[i];
            let entry = groups.entry(key).or_insert_with(|| (vec![0.0; d], 0));
            for (s, &v) in entry.0.iter_mut().zip(&flat.data()[i * d..(i + 1) * d]) {
                *s += v;
            }
            entry.1 += 1;
        }
        let mut key_to_row = BTreeMap::new();
        let mut centers = Vec::with_capacity(groups.len() * d);
        for (row, (key, (sum, count))) in groups.iter().enumerate() {
            key_to_row.insert(*key, row);
            centers.extend(sum.iter().map(|s| s / *count as f64));
        }
        let centers = Tensor::new(vec![groups.len(), d], centers)?;
        let mut dists: Vec<f64> = (0..n)
            .map(|i| {
                let key = shapes[i] * LabelKind::Color.classes() + colors[i];
                let row = key_to_row[&key];
                let c = &centers.data()[row * d..(row + 1) * d];
                flat.data()[i * d..(i + 1) * d]
                    .iter()
                    .zip(c.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        let median = if dists.is_empty() {
            0.0
        } else if dists.len() % 2 == 1 {
            dists[dists.len() / 2]
        } else {
            0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
        };
        Ok((centers, MODE_RADIUS_FACTOR * median))
    }

    /// Evaluate generation quality and representation quality. Consumes the
    /// dedicated eval RNG stream only.
    pub fn evaluate(&mut self) -> Result<MetricsRecord> {
        let m = self.config.fd_samples;
        let z = sample_latents(&mut self.eval_rng, m, self.config.model.latent_dim)?;
        let fake = self.models.generator.generate(&z)?;
        let n = self.dataset.len();
        let real_idx: Vec<usize> = if n <= m {
            (0..n).collect()
        } else {
            // Partial Fisher-Yates: first m entries of a seeded shuffle.
            let mut pool: Vec<usize> = (0..n).collect();
            for i in 0..m {
                let j = self.eval_rng.gen_range(i..n);
                pool.swap(i, j);
            }
            pool.truncate(m);
            pool
        };
        let real = self.dataset.batch(&real_idx)?;

        let (fake_emb, real_emb) = match self.config.fd_features {
            FdFeatures::Pixels => (flatten_images(&fake)?, flatten_images(&real)?),
            FdFeatures::Discriminator => (
                self.models.backbone.features(&fake)?,
                self.models.backbone.features(&real)?,
            ),
        };
        let fd = frechet_distance(&fake_emb, &real_emb)?;

        let (coverage, probe) = if self.dataset.has_labels() {
            let (centers, radius) = self.class_modes()?;
            let fake_flat = flatten_images(&fake)?;
            let coverage = mode_coverage(&fake_flat, &centers, radius)?;
            let cap = self.dataset.len().min(PROBE_SAMPLE_CAP);
            let probe_idx: Vec<usize> = (0..cap).collect();
            let imgs = self.dataset.batch(&probe_idx)?;
            let feats = self.models.backbone.features(&imgs)?;
            let mut probe = [0.0; 3];
            for (slot, kind) in [
                (0, LabelKind::Shape),
                (1, LabelKind::Color),
                (2, LabelKind::Position),
            ] {
                let labels = &self.dataset.labels(kind)[..cap];
                probe[slot] = linear_probe(
                    &feats,
                    labels,
                    kind.classes(),
                    self.config.probe_steps,
                    PROBE_SEED,
                )?;
            }
            (coverage, probe)
        } else {
            (0, [0.0; 3])
        };

        Ok(MetricsRecord {
            step: self.step,
            d_loss: self.last.d_loss,
            g_loss: self.last.g_loss,
            ss_d: self.last.ss_d,
            ss_g: self.last.ss_g,
            fd,
            mode_coverage: coverage,
            probe,
        })
    }

    fn meta_tensor(&self) -> Tensor {
        let mut m = Vec::with_capacity(META_LEN);
        m.push(self.step as f64);
        m.extend(split_u64(self.config.seed));
        m.extend(split_u64(self.config.effective_aug_seed()));
        m.extend(split_u128(self.data_rng.get_word_pos()));
        m.extend(split_u128(self.latent_rng.get_word_pos()));
        m.extend(split_u128(self.aug_rng.get_word_pos()));
        m.extend(split_u128(self.eval_rng.get_word_pos()));
        m.push(self.last.d_loss);
        m.push(self.last.g_loss);
        m.extend_from_slice(&self.last.ss_d);
        m.extend_from_slice(&self.last.ss_g);
        Tensor::from_parts(vec![META_LEN], m)
    }

    /// Write a checkpoint: model weights, both optimizer states, the step
    /// counter, RNG stream positions, and the latest losses.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = self.meta_tensor();
        let od = self.opt_d.state_tensors("opt_d");
        let og = self.opt_g.state_tensors("opt_g");
        let mut named = self.models.named_params();
        named.push((META_NAME.into(), &meta));
        for (n, t) in &od {
            named.push((n.clone(), t));
        }
        for (n, t) in &og {
            named.push((n.clone(), t));
        }
        save_checkpoint(path, &named)
    }

    /// Restore a checkpoint written by `save` under the same config.
    /// Training resumes bit-identically to the uninterrupted run.
    pub fn load(path: &Path, config: ExperimentConfig) -> Result<Self> {
        let mut state = Self::new(config)?;
        let tensors = load_checkpoint(path)?;
        let mut meta = None;
        let mut od = Vec::new();
        let mut og = Vec::new();
        let mut model_map = BTreeMap::new();
        for (name, t) in tensors {
            if name == META_NAME {
                meta = Some(t);
            } else if name.starts_with("opt_d.") {
                od.push((name, t));
            } else if name.starts_with("opt_g.") {
                og.push((name, t));
            } else {
                model_map.insert(name, t);
            }
        }
        for (name, param) in state.models.named_params_mut() {
            let loaded = model_map
                .remove(&name)
                .ok_or_else(|| Error::Contract(format!("checkpoint missing tensor '{}'", name)))?;
            if loaded.shape() != param.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor '{}' has shape {:?}, model expects {:?}",
                    name,
                    loaded.shape(),
                    param.shape()
                )));
            }
            param.data_mut().copy_from_slice(loaded.data());
        }
        if let Some(name) = model_map.keys().next() {
            return Err(Error::Contract(format!(
                "checkpoint has unexpected tensor '{}'",
                name
            )));
        }
        state.opt_d.load_state_tensors("opt_d", &od)?;
        state.opt_g.load_state_tensors("opt_g", &og)?;
        let meta =
            meta.ok_or_else(|| Error::Contract(format!("checkpoint missing '{}'", META_NAME)))?;
        let m = meta.data();
        if m.len() != META_LEN {
            return Err(Error::Contract(format!(
                "checkpoint metadata has {} entries, expected {}",
                m.len(),
                META_LEN
            )));
        }
        let saved_seed = join_u64(m[1], m[2]);
        if saved_seed != state.config.seed {
            return Err(Error::Contract(format!(
                "checkpoint was written with train.seed {}, config has {}",
                saved_seed, state.config.seed
            )));
        }
        let saved_aug_seed = join_u64(m[3], m[4]);
        if saved_aug_seed != state.config.effective_aug_seed() {
            return Err(Error::Contract(format!(
                "checkpoint was written with train.aug_seed {}, config has {}",
                saved_aug_seed,
                state.config.effective_aug_seed()
            )));
        }
        state.step = m[0] as usize;
        state.data_rng.set_word_pos(join_u128(&m[5..9]));
        state.latent_rng.set_word_pos(join_u128(&m[9..13]));
        state.aug_rng.set_word_pos(join_u128(&m[13..17]));
        state.eval_rng.set_word_pos(join_u128(&m[17..21]));
        state.last = StepLosses {
            d_loss: m[21],
            g_loss: m[22],
            ss_d: [m[23], m[24], m[25]],
            ss_g: [m[26], m[27], m[28]],
        };
        Ok(state)
    }
}

// ---- experiment runner -------------------------------------------------

/// Result of one full run.
#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub records: Vec<MetricsRecord>,
    pub best_fd: f64,
    pub best_fd_step: usize,
    pub wall_seconds: f64,
    pub out_dir: PathBuf,
}

impl ExperimentSummary {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("at least the step-0 record")
    }
}

fn record_json(r: &MetricsRecord) -> serde_json::Value {
    json!({
        "step": r.step,
        "d_loss": r.d_loss,
        "g_loss": r.g_loss,
        "ss_d": r.ss_d.to_vec(),
        "ss_g": r.ss_g.to_vec(),
        "fd": r.fd,
        "mode_coverage": r.mode_coverage,
        "probe_shape": r.probe[0],
        "probe_color": r.probe[1],
        "probe_pos": r.probe[2],
    })
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Train per config, evaluating at step 0, every `eval_interval` steps, and
/// at the final step. Writes `metrics.csv`, `checkpoint.bin`, and
/// `summary.json` into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    let start = Instant::now();
    fs::create_dir_all(&config.out_dir)
        .map_err(|e| Error::io(config.out_dir.display().to_string(), e))?;
    let mut state = TrainState::new(config.clone())?;
    let mut records = vec![state.evaluate()?];
    for step in 1..=config.steps {
        state.train_step()?;
        if step % config.eval_interval == 0 || step == config.steps {
            records.push(state.evaluate()?);
        }
    }

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &records {
        csv.push_str(&r.to_csv_row());
        csv.push('\n');
    }
    write_text(&config.out_dir.join("metrics.csv"), &csv)?;
    state.save(&config.out_dir.join("checkpoint.bin"))?;

    let (best_fd_step, best_fd) = records
        .iter()
        .map(|r| (r.step, r.fd))
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("fd is finite"))
        .expect("at least one record");
    let wall_seconds = start.elapsed().as_secs_f64();

    let config_echo: serde_json::Map<String, serde_json::Value> = config
        .to_key_values()
        .into_iter()
        .map(|(k, v)| (k, serde_json::Value::String(v)))
        .collect();
    let summary = json!({
        "config": config_echo,
        "final": record_json(records.last().expect("nonempty")),
        "best": { "fd": best_fd, "step": best_fd_step },
        "wall_seconds": wall_seconds,
    });
    let pretty = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Contract(format!("summary serialization failed: {}", e)))?;
    write_text(&config.out_dir.join("summary.json"), &pretty)?;

    Ok(ExperimentSummary {
        records,
        best_fd,
        best_fd_step,
        wall_seconds,
        out_dir: config.out_dir.clone(),
    })
}

// ---- lambda sweep ------------------------------------------------------

/// The canonical lambda grid.
pub const SWEEP_LAMBDAS: [f64; 8] = [0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0];

/// One grid point's outcome.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub lambda: f64,
    pub seed: u64,
    pub final_fd: f64,
    pub best_fd: f64,
    pub probe: [f64; 3],
    pub out_dir: PathBuf,
}

/// Per-lambda medians across seeds.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub lambda: f64,
    pub median_final_fd: f64,
    pub median_best_fd: f64,
    pub median_probe: [f64; 3],
}

/// Comparative report against the lambda = 0 baseline (monitored, not a
/// pass/fail gate).
#[derive(Debug, Clone)]
pub struct SweepComparison {
    pub lambda: f64,
    /// Seeds where this lambda's final fd <= the baseline's.
    pub wins: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub runs: Vec<SweepRun>,
    pub rows: Vec<SweepRow>,
    pub comparisons: Vec<SweepComparison>,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Run the full grid: every lambda in `lambdas` x every seed in `seeds`,
/// with lambda_d = lambda_g = lambda. Each grid point trains in its own
/// subdirectory of `base.out_dir`; per-lambda medians land in `sweep.csv`,
/// per-run rows in `runs.csv`, and everything in `sweep_summary.json`.
pub fn run_sweep(
    base: &ExperimentConfig,
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<SweepSummary> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one lambda and one seed".into(),
        ));
    }
    fs::create_dir_all(&base.out_dir)
        .map_err(|e| Error::io(base.out_dir.display().to_string(), e))?;
    let mut runs = Vec::new();
    for &lambda in lambdas {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.loss.lambda_d = lambda;
            cfg.loss.lambda_g = lambda;
            cfg.seed = seed;
            cfg.out_dir = base
                .out_dir
                .join(format!("lam_{}", lambda))
                .join(format!("seed_{}", seed));
            let summary = run_experiment(&cfg)?;
            let fin = summary.final_record();
            runs.push(SweepRun {
                lambda,
                seed,
                final_fd: fin.fd,
                best_fd: summary.best_fd,
                probe: fin.probe,
                out_dir: summary.out_dir,
            });
        }
    }

    let mut rows = Vec::new();
    for &lambda in lambdas {
        let of_lambda: Vec<&SweepRun> = runs.iter().filter(|r| r.lambda == lambda).collect();
        let mut finals: Vec<f64> = of_lambda.iter().map(|r| r.final_fd).collect();
        let mut bests: Vec<f64> = of_lambda.iter().map(|r| r.best_fd).collect();
        let mut probe = [0.0; 3];
        for (k, p) in probe.iter_mut().enumerate() {
            let mut vals: Vec<f64> = of_lambda.iter().map(|r| r.probe[k]).collect();
            *p = median(&mut vals);
        }
        rows.push(SweepRow {
            lambda,
            median_final_fd: median(&mut finals),
            median_best_fd: median(&mut bests),
            median_probe: probe,
        });
    }

    let mut comparisons = Vec::new();
    if lambdas.contains(&0.0) {
        let baseline: BTreeMap<u64, f64> = runs
            .iter()
            .filter(|r| r.lambda == 0.0)
            .map(|r| (r.seed, r.final_fd))
            .collect();
        for &lambda in lambdas.iter().filter(|&&l| l != 0.0) {
            let wins = runs
                .iter()
                .filter(|r| r.lambda == lambda && r.final_fd <= baseline[&r.seed])
                .count();
            comparisons.push(SweepComparison {
                lambda,
                wins,
                total: seeds.len(),
            });
        }
    }

    let fmt = |v: f64| format!("{:.9e}", v);
    let mut sweep_csv = String::from(
        "lambda,median_final_fd,median_best_fd,median_probe_shape,median_probe_color,median_probe_pos\n",
    );
    for row in &rows {
        sweep_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.lambda,
            fmt(row.median_final_fd),
            fmt(row.median_best_fd),
            fmt(row.median_probe[0]),
            fmt(row.median_probe[1]),
            fmt(row.median_probe[2]),
        ));
    }
    write_text(&base.out_dir.join("sweep.csv"), &sweep_csv)?;

    let mut runs_csv =
        String::from("lambda,seed,final_fd,best_fd,probe_shape,probe_color,probe_pos,dir\n");
    for run in &runs {
        runs_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            run.lambda,
            run.seed,
            fmt(run.final_fd),
            fmt(run.best_fd),
            fmt(run.probe[0]),
            fmt(run.probe[1]),
            fmt(run.probe[2]),
            run.out_dir.display(),
        ));
    }
    write_text(&base.out_dir.join("runs.csv"), &runs_csv)?;

    let summary = json!({
        "lambdas": lambdas,
        "seeds": seeds,
        "runs": runs.iter().map(|r| json!({
            "lambda": r.lambda,
            "seed": r.seed,
            "final_fd": r.final_fd,
            "best_fd": r.best_fd,
            "probe_shape": r.probe[0],
            "probe_color": r.probe[1],
            "probe_pos": r.probe[2],
            "dir": r.out_dir.display().to_string(),
        })).collect::<Vec<_>>(),
        "per_lambda": rows.iter().map(|row| json!({
            "lambda": row.lambda,
            "median_final_fd": row.median_final_fd,
            "median_best_fd": row.median_best_fd,
            "median_probe_shape": row.median_probe[0],
            "median_probe_color": row.median_probe[1],
            "median_probe_pos": row.median_probe[2],
        })).collect::<Vec<_>>(),
        "vs_baseline": comparisons.iter().map(|c| json!({
            "lambda": c.lambda,
            "wins": c.wins,
            "total": c.total,
            "majority": c.wins * 2 > c.total,
        })).collect::<Vec<_>>(),
    });
    let pretty = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Contract(format!("sweep serialization failed: {}", e)))?;
    write_text(&base.out_dir.join("sweep_summary.json"), &pretty)?;

    Ok(SweepSummary {
        runs,
        rows,
        comparisons,
    })
}
