//! Adversarial and self-supervised training objectives.
//!
//! Self-supervised losses share one shape: a head prediction `pred` is pulled
//! toward a target vector by `mean_n ||pred_n - t_n||^2` (squared error summed
//! over components, averaged over the batch). The task decides the targets:
//!
//! * `Ass` - discriminator pulls real-image predictions toward `+omega` and
//!   fake-image predictions toward `-omega`; the sign carries the real/fake
//!   decision into the prediction space.
//! * `Ss` - predictions on real images only; fakes contribute nothing.
//! * `SsPlus` - both real and fake predictions are pulled toward `+omega`.
//! * `Fixed` - like `Ass` but with a constant vector `c` instead of the
//!   sampled `omega`, so the targets ignore the augmentation strength.
//!
//! Generator-side variants mirror saturating / non-saturating GAN losses:
//! `NonSaturating` pulls generated-image predictions toward the real target,
//! `Saturating` pushes them away from the fake target, and `Combination` does
//! both; for `Ass` the combination telescopes to `-4 mean <pred, omega>`.
//! `Ss` and `SsPlus` have a single sensible generator objective (match
//! `+omega`), so the variant flag is ignored for them.

use crate::augment::{AugCategory, OMEGA_DIM};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Adversarial loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanKind {
    /// Hinge: D minimizes mean relu(1 - s_real) + mean relu(1 + s_fake),
    /// G minimizes -mean s_fake.
    Hinge,
    /// Non-saturating logistic: D minimizes mean softplus(-s_real) +
    /// mean softplus(s_fake), G minimizes mean softplus(-s_fake).
    Log,
    /// Least squares: D minimizes mean (s_real - 1)^2 + mean (s_fake + 1)^2,
    /// G minimizes mean (s_fake - 1)^2.
    Lsgan,
}

impl GanKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(GanKind::Hinge),
            "log" => Ok(GanKind::Log),
            "lsgan" => Ok(GanKind::Lsgan),
            other => Err(Error::Config(format!(
                "unknown gan loss '{}' (expected hinge, log, lsgan)",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GanKind::Hinge => "hinge",
            GanKind::Log => "log",
            GanKind::Lsgan => "lsgan",
        }
    }
}

/// Which self-supervised task the discriminator trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsTask {
    /// No self-supervision; the model reduces to the plain GAN.
    None,
    /// Real images only, target +omega.
    Ss,
    /// Real and fake images, both targeted at +omega.
    SsPlus,
    /// Real at +omega, fake at -omega.
    Ass,
    /// Real at +c, fake at -c for a constant c.
    Fixed,
}

impl SsTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SsTask::None),
            "ss" => Ok(SsTask::Ss),
            "ss_plus" => Ok(SsTask::SsPlus),
            "ass" => Ok(SsTask::Ass),
            "fixed" => Ok(SsTask::Fixed),
            other => Err(Error::Config(format!(
                "unknown ss task '{}' (expected none, ss, ss_plus, ass, fixed)",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SsTask::None => "none",
            SsTask::Ss => "ss",
            SsTask::SsPlus => "ss_plus",
            SsTask::Ass => "ass",
            SsTask::Fixed => "fixed",
        }
    }
}

/// Generator-side form of the self-supervised objective (`Ass` and `Fixed`
/// tasks only; `Ss` and `SsPlus` ignore it).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenSsVariant {
    /// mean ||pred - t_real||^2
    NonSaturating,
    /// -mean ||pred - t_fake||^2
    Saturating,
    /// Difference of the two.
    Combination,
}

impl GenSsVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "non_saturating" => Ok(GenSsVariant::NonSaturating),
            "saturating" => Ok(GenSsVariant::Saturating),
            "combination" => Ok(GenSsVariant::Combination),
            other => Err(Error::Config(format!(
                "unknown generator ss variant '{}' (expected non_saturating, saturating, combination)",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GenSsVariant::NonSaturating => "non_saturating",
            GenSsVariant::Saturating => "saturating",
            GenSsVariant::Combination => "combination",
        }
    }
}

// ---- adversarial losses ------------------------------------------------

/// Discriminator adversarial loss over raw scores (any shape, averaged over
/// all entries).
pub fn gan_d_loss(
    tape: &mut Tape,
    score_real: TensorId,
    score_fake: TensorId,
    kind: GanKind,
) -> Result<TensorId> {
    match kind {
        GanKind::Hinge => {
            let neg_r = tape.neg(score_real);
            let one_minus_r = tape.add_scalar(neg_r, 1.0);
            let hr = tape.relu(one_minus_r);
            let real_term = tape.mean_all(hr);
            let one_plus_f = tape.add_scalar(score_fake, 1.0);
            let hf = tape.relu(one_plus_f);
            let fake_term = tape.mean_all(hf);
            tape.add(real_term, fake_term)
        }
        GanKind::Log => {
            let neg_r = tape.neg(score_real);
            let sr = tape.softplus(neg_r);
            let real_term = tape.mean_all(sr);
            let sf = tape.softplus(score_fake);
            let fake_term = tape.mean_all(sf);
            tape.add(real_term, fake_term)
        }
        GanKind::Lsgan => {
            let rm1 = tape.add_scalar(score_real, -1.0);
            let rsq = tape.square(rm1)?;
            let real_term = tape.mean_all(rsq);
            let fp1 = tape.add_scalar(score_fake, 1.0);
            let fsq = tape.square(fp1)?;
            let fake_term = tape.mean_all(fsq);
            tape.add(real_term, fake_term)
        }
    }
}

/// Generator adversarial loss over fake scores.
pub fn gan_g_loss(tape: &mut Tape, score_fake: TensorId, kind: GanKind) -> Result<TensorId> {
    match kind {
        GanKind::Hinge => {
            let m = tape.mean_all(score_fake);
            Ok(tape.neg(m))
        }
        GanKind::Log => {
            let neg_f = tape.neg(score_fake);
            let s = tape.softplus(neg_f);
            Ok(tape.mean_all(s))
        }
        GanKind::Lsgan => {
            let fm1 = tape.add_scalar(score_fake, -1.0);
            let sq = tape.square(fm1)?;
            Ok(tape.mean_all(sq))
        }
    }
}

// ---- self-supervised losses --------------------------------------------

/// mean_n ||pred_n - target_n||^2, or with `negate_target` the target enters
/// with a flipped sign (pred + target).
fn quad_term(
    tape: &mut Tape,
    pred: TensorId,
    target: TensorId,
    negate_target: bool,
) -> Result<TensorId> {
    let n = tape.value(pred).shape()[0];
    let diff = if negate_target {
        tape.add(pred, target)?
    } else {
        tape.sub(pred, target)?
    };
    let sq = tape.square(diff)?;
    let total = tape.sum_all(sq);
    Ok(tape.mul_scalar(total, 1.0 / n as f64))
}

fn check_pred_shapes(tape: &Tape, pred: TensorId, omega: TensorId) -> Result<(usize, usize)> {
    let ps = tape.value(pred).shape();
    let os = tape.value(omega).shape();
    if ps.len() != 2 || os.len() != 2 || ps != os {
        return Err(Error::Shape(format!(
            "prediction {:?} and omega {:?} must be matching [batch, dim] matrices",
            ps, os
        )));
    }
    Ok((ps[0], ps[1]))
}

/// Constant target rows for the `Fixed` task: one copy of `c` per sample.
fn fixed_target(tape: &mut Tape, batch: usize, dim: usize, c: &[f64]) -> Result<TensorId> {
    if c.len() != dim {
        return Err(Error::Parameter(format!(
            "fixed target has {} components but predictions have {}",
            c.len(),
            dim
        )));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("fixed target must be finite".into()));
    }
    let mut data = Vec::with_capacity(batch * dim);
    for _ in 0..batch {
        data.extend_from_slice(c);
    }
    Ok(tape.constant(Tensor::new(vec![batch, dim], data)?))
}

/// Discriminator-side self-supervised loss for one augmentation category.
///
/// `pred_real` and `pred_fake` are head outputs on the (augmented) real and
/// generated images, `omega` the regression targets for this category, all
/// shaped [batch, dim]. `c` supplies the constant target for the `Fixed`
/// task and is ignored otherwise.
pub fn ss_variant_d_loss(
    tape: &mut Tape,
    pred_real: TensorId,
    pred_fake: TensorId,
    omega: TensorId,
    task: SsTask,
    c: &[f64],
) -> Result<TensorId> {
    let (batch, dim) = check_pred_shapes(tape, pred_real, omega)?;
    let (fb, fd) = check_pred_shapes(tape, pred_fake, omega)?;
    debug_assert_eq!((batch, dim), (fb, fd));
    match task {
        SsTask::None => Err(Error::Contract(
            "self-supervised loss requested with task 'none'".into(),
        )),
        SsTask::Ss => quad_term(tape, pred_real, omega, false),
        SsTask::SsPlus => {
            let r = quad_term(tape, pred_real, omega, false)?;
            let f = quad_term(tape, pred_fake, omega, false)?;
            tape.add(r, f)
        }
        SsTask::Ass => {
            let r = quad_term(tape, pred_real, omega, false)?;
            let f = quad_term(tape, pred_fake, omega, true)?;
            tape.add(r, f)
        }
        SsTask::Fixed => {
            let target = fixed_target(tape, batch, dim, c)?;
            let r = quad_term(tape, pred_real, target, false)?;
            let f = quad_term(tape, pred_fake, target, true)?;
            tape.add(r, f)
        }
    }
}

/// Generator-side self-supervised loss for one augmentation category, over
/// head predictions on generated images.
pub fn ss_variant_g_loss(
    tape: &mut Tape,
    pred: TensorId,
    omega: TensorId,
    task: SsTask,
    variant: GenSsVariant,
    c: &[f64],
) -> Result<TensorId> {
    let (batch, dim) = check_pred_shapes(tape, pred, omega)?;
    let target = match task {
        SsTask::None => {
            return Err(Error::Contract(
                "self-supervised loss requested with task 'none'".into(),
            ))
        }
        SsTask::Ss | SsTask::SsPlus => {
            // Single sensible objective: make generated images predictable.
            return quad_term(tape, pred, omega, false);
        }
        SsTask::Ass => omega,
        SsTask::Fixed => fixed_target(tape, batch, dim, c)?,
    };
    match variant {
        GenSsVariant::NonSaturating => quad_term(tape, pred, target, false),
        GenSsVariant::Saturating => {
            let t = quad_term(tape, pred, target, true)?;
            Ok(tape.neg(t))
        }
        GenSsVariant::Combination => {
            let pos = quad_term(tape, pred, target, false)?;
            let neg = quad_term(tape, pred, target, true)?;
            tape.sub(pos, neg)
        }
    }
}

// ---- configuration -----------------------------------------------------

/// Everything the trainer needs to assemble losses.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub gan: GanKind,
    pub ss_task: SsTask,
    pub gen_variant: GenSsVariant,
    /// Weight of the self-supervised term in the discriminator loss.
    pub lambda_d: f64,
    /// Weight of the self-supervised term in the generator loss.
    pub lambda_g: f64,
    /// Constant target for the `Fixed` task, one entry per omega component.
    pub fixed_c: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gan: GanKind::Hinge,
            ss_task: SsTask::Ass,
            gen_variant: GenSsVariant::Combination,
            lambda_d: 1.0,
            lambda_g: 1.0,
            fixed_c: vec![1.0; OMEGA_DIM],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_d.is_finite() || self.lambda_d < 0.0 {
            return Err(Error::Parameter(format!(
                "lambda_d must be finite and non-negative, got {}",
                self.lambda_d
            )));
        }
        if !self.lambda_g.is_finite() || self.lambda_g < 0.0 {
            return Err(Error::Parameter(format!(
                "lambda_g must be finite and non-negative, got {}",
                self.lambda_g
            )));
        }
        if self.ss_task == SsTask::Fixed {
            if self.fixed_c.len() != OMEGA_DIM {
                return Err(Error::Parameter(format!(
                    "fixed_c must have {} components, got {}",
                    OMEGA_DIM,
                    self.fixed_c.len()
                )));
            }
            if self.fixed_c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parameter("fixed_c must be finite".into()));
            }
        }
        Ok(())
    }

    /// Slice of `fixed_c` belonging to one category.
    pub fn fixed_c_for(&self, cat: AugCategory) -> &[f64] {
        let start = cat.offset();
        &self.fixed_c[start..start + cat.dim()]
    }

    /// True when the discriminator trains a self-supervised term.
    pub fn d_uses_ss(&self) -> bool {
        self.ss_task != SsTask::None && self.lambda_d > 0.0
    }

    /// True when the generator trains a self-supervised term.
    pub fn g_uses_ss(&self) -> bool {
        self.ss_task != SsTask::None && self.lambda_g > 0.0
    }
}
