//! Central finite-difference verification of the reverse-mode gradients.
//!
//! `finite_diff_check` compares the tape's analytic gradient of a scalar
//! function against central differences, coordinate by coordinate. The suites
//! at the bottom run it over randomized instances of every differentiable
//! operation and every loss; they back both the `gradcheck` CLI command and
//! the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::augment::{self, AugConfig, AugParams};
use crate::error::{Error, Result};
use crate::losses::{self, GanKind, GenSsVariant, SsTask};
use crate::tensor::{Tape, Tensor, TensorId};

/// Default perturbation size for central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Largest relative error considered a pass by the CLI and acceptance gates.
pub const PASS_THRESHOLD: f64 = 1e-4;

/// Compare analytic and central-difference gradients of `build`, a scalar
/// function of `params`. Returns the maximum over all coordinates of the
/// guarded relative error
///
///   |analytic - central| / max(|analytic|, |central|, 1e-4 * max(1, |f|))
///
/// The floor keeps finite-difference roundoff out of the verdict: a central
/// difference on a function of magnitude |f| carries about eps * |f| / (2h)
/// of absolute noise, so coordinates whose gradient sits near that noise
/// floor would otherwise fail on arithmetic alone. Any genuinely wrong
/// gradient still lands orders of magnitude above the pass threshold, since
/// the floor concedes only absolute disagreements below 1e-8 * max(1, |f|).
pub fn finite_diff_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::Parameter(format!(
            "finite difference eps must be positive, got {}",
            eps
        )));
    }

    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_grad()))
        .collect();
    let out = build(&mut tape, &ids)?;
    let value = tape.value(out).scalar_value()?;
    if !value.is_finite() {
        return Err(Error::Numeric(
            "gradient check function produced a non-finite value".into(),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| tape.grad_tensor(id)).collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = build(&mut tape, &ids)?;
        let v = tape.value(out).scalar_value()?;
        if !v.is_finite() {
            return Err(Error::Numeric(
                "gradient check function produced a non-finite value".into(),
            ));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let floor = 1e-4 * value.abs().max(1.0);
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..work[pi].numel() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let central = (up - down) / (2.0 * eps);
            let a = grad.data()[ci];
            let err = (a - central).abs() / central.abs().max(a.abs()).max(floor);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Outcome of checking one operation over many random instances.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
}

impl OpReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < PASS_THRESHOLD
    }
}

fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Random values bounded away from zero, for ops with a kink at the origin.
fn rand_tensor_offset(rng: &mut ChaCha12Rng, shape: &[usize], min_abs: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * rng.gen_range(min_abs..2.0)
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Reduce `id` to a scalar with a fixed random weighting so every output
/// coordinate influences the loss.
fn weighted_sum(tape: &mut Tape, id: TensorId, weights: &Tensor) -> Result<TensorId> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(id, w)?;
    Ok(tape.sum_all(prod))
}

fn check_op<F>(
    name: &str,
    trials: usize,
    rng: &mut ChaCha12Rng,
    mut instance: F,
) -> Result<OpReport>
where
    F: FnMut(&mut ChaCha12Rng) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let err = instance(rng)?;
        if err > worst {
            worst = err;
        }
    }
    Ok(OpReport {
        name: name.to_string(),
        trials,
        max_rel_err: worst,
    })
}

/// Finite-difference checks for every differentiable tensor operation.
pub fn run_op_suite(trials: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    // Elementwise binaries, with and without trailing broadcast.
    for (name, which) in [
        ("add", 0),
        ("sub", 1),
        ("mul", 2),
        ("add_trailing", 3),
        ("sub_trailing", 4),
        ("mul_trailing", 5),
    ] {
        reports.push(check_op(name, trials, &mut rng, |rng| {
            let a = rand_tensor(rng, &[2, 3, 4], -2.0, 2.0);
            let b = if which < 3 {
                rand_tensor(rng, &[2, 3, 4], -2.0, 2.0)
            } else {
                rand_tensor(rng, &[4], -2.0, 2.0)
            };
            let w = rand_tensor(rng, &[2, 3, 4], -1.0, 1.0);
            finite_diff_check(
                |tape, ids| {
                    let y = match which % 3 {
                        0 => tape.add(ids[0], ids[1])?,
                        1 => tape.sub(ids[0], ids[1])?,
                        _ => tape.mul(ids[0], ids[1])?,
                    };
                    weighted_sum(tape, y, &w)
                },
                &[a, b],
                DEFAULT_EPS,
            )
        })?);
    }

    reports.push(check_op("neg", trials, &mut rng, |rng| {
        let a = rand_tensor(rng, &[3, 5], -2.0, 2.0);
        let w = rand_tensor(rng, &[3, 5], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.neg(ids[0]);
                weighted_sum(tape, y, &w)
            },
            &[a],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("add_scalar", trials, &mut rng, |rng| {
        let a = rand_tensor(rng, &[4, 3], -2.0, 2.0);
        let w = rand_tensor(rng, &[4, 3], -1.0, 1.0);
        let c = rng.gen_range(-2.0..2.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.add_scalar(ids[0], c);
                weighted_sum(tape, y, &w)
            },
            &[a],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("mul_scalar", trials, &mut rng, |rng| {
        let a = rand_tensor(rng, &[4, 3], -2.0, 2.0);
        let w = rand_tensor(rng, &[4, 3], -1.0, 1.0);
        let c = rng.gen_range(-2.0..2.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.mul_scalar(ids[0], c);
                weighted_sum(tape, y, &w)
            },
            &[a],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("matmul", trials, &mut rng, |rng| {
        let a = rand_tensor(rng, &[3, 4], -1.5, 1.5);
        let b = rand_tensor(rng, &[4, 2], -1.5, 1.5);
        let w = rand_tensor(rng, &[3, 2], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                weighted_sum(tape, y, &w)
            },
            &[a, b],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("conv2d", trials, &mut rng, |rng| {
        let stride = rng.gen_range(1..3usize);
        let pad = rng.gen_range(0..2usize);
        let x = rand_tensor(rng, &[2, 2, 6, 6], -1.5, 1.5);
        let k = rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0);
        let out_side = (6 + 2 * pad - 3) / stride + 1;
        let w = rand_tensor(rng, &[2, 3, out_side, out_side], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], stride, pad)?;
                weighted_sum(tape, y, &w)
            },
            &[x, k],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("pad2d", trials, &mut rng, |rng| {
        let pad = rng.gen_range(1..3usize);
        let x = rand_tensor(rng, &[2, 2, 4, 4], -2.0, 2.0);
        let w = rand_tensor(rng, &[2, 2, 4 + 2 * pad, 4 + 2 * pad], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.pad2d(ids[0], pad)?;
                weighted_sum(tape, y, &w)
            },
            &[x],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("shift2d", trials, &mut rng, |rng| {
        let x = rand_tensor(rng, &[3, 2, 5, 5], -2.0, 2.0);
        let shifts: Vec<(i64, i64)> = (0..3)
            .map(|_| (rng.gen_range(-2..3), rng.gen_range(-2..3)))
            .collect();
        let w = rand_tensor(rng, &[3, 2, 5, 5], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.shift2d(ids[0], &shifts)?;
                weighted_sum(tape, y, &w)
            },
            &[x],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("mask_window", trials, &mut rng, |rng| {
        let x = rand_tensor(rng, &[3, 2, 5, 6], -2.0, 2.0);
        let origins: Vec<(usize, usize)> = (0..3)
            .map(|_| (rng.gen_range(0..4usize), rng.gen_range(0..4usize)))
            .collect();
        let w = rand_tensor(rng, &[3, 2, 5, 6], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.mask_window(ids[0], &origins, (2, 3))?;
                weighted_sum(tape, y, &w)
            },
            &[x],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("add_channel_bias", trials, &mut rng, |rng| {
        let x = rand_tensor(rng, &[2, 3, 4, 4], -2.0, 2.0);
        let b = rand_tensor(rng, &[3], -1.0, 1.0);
        let w = rand_tensor(rng, &[2, 3, 4, 4], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.add_channel_bias(ids[0], ids[1])?;
                weighted_sum(tape, y, &w)
            },
            &[x, b],
            DEFAULT_EPS,
        )
    })?);

    // Pointwise nonlinearities. Inputs for kinked activations stay away from
    // the kink so the central difference is a valid oracle.
    for name in ["tanh", "sigmoid", "softplus", "relu", "leaky_relu", "ln"] {
        reports.push(check_op(name, trials, &mut rng, |rng| {
            let a = match name {
                "relu" | "leaky_relu" => rand_tensor_offset(rng, &[3, 4], 0.05),
                "ln" => rand_tensor(rng, &[3, 4], 0.1, 3.0),
                _ => rand_tensor(rng, &[3, 4], -2.0, 2.0),
            };
            let w = rand_tensor(rng, &[3, 4], -1.0, 1.0);
            finite_diff_check(
                |tape, ids| {
                    let y = match name {
                        "tanh" => tape.tanh(ids[0]),
                        "sigmoid" => tape.sigmoid(ids[0]),
                        "softplus" => tape.softplus(ids[0]),
                        "relu" => tape.relu(ids[0]),
                        "leaky_relu" => tape.leaky_relu(ids[0], 0.2),
                        _ => tape.ln(ids[0])?,
                    };
                    weighted_sum(tape, y, &w)
                },
                &[a],
                DEFAULT_EPS,
            )
        })?);
    }

    reports.push(check_op("sum_all", trials, &mut rng, |rng| {
        let a = rand_tensor(rng, &[3, 4], -2.0, 2.0);
        finite_diff_check(|tape, ids| Ok(tape.sum_all(ids[0])), &[a], DEFAULT_EPS)
    })?);

    reports.push(check_op("mean_all", trials, &mut rng, |rng| {
        let a = rand_tensor(rng, &[3, 4], -2.0, 2.0);
        finite_diff_check(|tape, ids| Ok(tape.mean_all(ids[0])), &[a], DEFAULT_EPS)
    })?);

    reports.push(check_op("channel_mean", trials, &mut rng, |rng| {
        let a = rand_tensor(rng, &[2, 3, 4, 4], -2.0, 2.0);
        let w = rand_tensor(rng, &[2, 1, 4, 4], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.channel_mean(ids[0])?;
                weighted_sum(tape, y, &w)
            },
            &[a],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("sample_mean", trials, &mut rng, |rng| {
        let a = rand_tensor(rng, &[3, 2, 4, 4], -2.0, 2.0);
        let w = rand_tensor(rng, &[3, 1, 1, 1], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.sample_mean(ids[0])?;
                weighted_sum(tape, y, &w)
            },
            &[a],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("row_sums", trials, &mut rng, |rng| {
        let a = rand_tensor(rng, &[4, 5], -2.0, 2.0);
        let w = rand_tensor(rng, &[4, 1], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.row_sums(ids[0])?;
                weighted_sum(tape, y, &w)
            },
            &[a],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("expand_to", trials, &mut rng, |rng| {
        let a = rand_tensor(rng, &[2, 1, 3, 1], -2.0, 2.0);
        let w = rand_tensor(rng, &[2, 3, 3, 2], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.expand_to(ids[0], &[2, 3, 3, 2])?;
                weighted_sum(tape, y, &w)
            },
            &[a],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("scale_per_sample", trials, &mut rng, |rng| {
        let a = rand_tensor(rng, &[3, 4], -2.0, 2.0);
        let s: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.scale_per_sample(ids[0], &s)?;
                weighted_sum(tape, y, &w)
            },
            &[a],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("shift_per_sample", trials, &mut rng, |rng| {
        let a = rand_tensor(rng, &[3, 4], -2.0, 2.0);
        let s: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.shift_per_sample(ids[0], &s)?;
                weighted_sum(tape, y, &w)
            },
            &[a],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("reshape", trials, &mut rng, |rng| {
        let a = rand_tensor(rng, &[2, 6], -2.0, 2.0);
        let w = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.reshape(ids[0], vec![3, 4])?;
                weighted_sum(tape, y, &w)
            },
            &[a],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("narrow", trials, &mut rng, |rng| {
        let a = rand_tensor(rng, &[3, 6], -2.0, 2.0);
        let start = rng.gen_range(0..3usize);
        let w = rand_tensor(rng, &[3, 3], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.narrow(ids[0], 1, start, 3)?;
                weighted_sum(tape, y, &w)
            },
            &[a],
            DEFAULT_EPS,
        )
    })?);

    reports.push(check_op("concat_cols", trials, &mut rng, |rng| {
        let a = rand_tensor(rng, &[3, 2], -2.0, 2.0);
        let b = rand_tensor(rng, &[3, 4], -2.0, 2.0);
        let w = rand_tensor(rng, &[3, 6], -1.0, 1.0);
        finite_diff_check(
            |tape, ids| {
                let y = tape.concat_cols(&[ids[0], ids[1]])?;
                weighted_sum(tape, y, &w)
            },
            &[a, b],
            DEFAULT_EPS,
        )
    })?);

    Ok(reports)
}

/// Finite-difference checks for the augmentations and every loss, each built
/// through a toy discriminator pipeline so gradients flow the same paths as in
/// training.
pub fn run_loss_suite(trials: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x10ad);
    let mut reports = Vec::new();
    let cfg = AugConfig::normal();

    // Augmentations as functions of the raw image, at fixed omega.
    for name in ["aug_color", "aug_translation", "aug_cutout", "aug_all"] {
        reports.push(check_op(name, trials, &mut rng, |rng| {
            let batch = 2;
            let img = rand_tensor(rng, &[batch, 3, 8, 8], -1.0, 1.0);
            let params = AugParams::sample(rng, batch);
            let w = rand_tensor(rng, &[batch, 3, 8, 8], -1.0, 1.0);
            finite_diff_check(
                |tape, ids| {
                    let y = match name {
                        "aug_color" => augment::apply_color(tape, ids[0], &params)?,
                        "aug_translation" => {
                            augment::apply_translation(tape, ids[0], &params, &cfg)?
                        }
                        "aug_cutout" => augment::apply_cutout(tape, ids[0], &params, &cfg)?,
                        _ => augment::apply_all(tape, ids[0], &params, &cfg)?,
                    };
                    weighted_sum(tape, y, &w)
                },
                &[img],
                DEFAULT_EPS,
            )
        })?);
    }

    // Adversarial losses as functions of raw scores. Hinge scores stay away
    // from the kink at |score| = 1.
    for kind in [GanKind::Hinge, GanKind::Log, GanKind::Lsgan] {
        let d_name = format!("gan_d_{}", kind.name());
        reports.push(check_op(&d_name, trials, &mut rng, |rng| {
            let real = gan_scores(rng, kind);
            let fake = gan_scores(rng, kind);
            finite_diff_check(
                |tape, ids| losses::gan_d_loss(tape, ids[0], ids[1], kind),
                &[real, fake],
                DEFAULT_EPS,
            )
        })?);
        let g_name = format!("gan_g_{}", kind.name());
        reports.push(check_op(&g_name, trials, &mut rng, |rng| {
            let fake = gan_scores(rng, kind);
            finite_diff_check(
                |tape, ids| losses::gan_g_loss(tape, ids[0], kind),
                &[fake],
                DEFAULT_EPS,
            )
        })?);
    }

    // Self-supervised losses as functions of head predictions.
    let omega_dim = 3;
    for (name, task) in [
        ("augself_d", SsTask::Ass),
        ("ss_d", SsTask::Ss),
        ("ssplus_d", SsTask::SsPlus),
        ("fixed_d", SsTask::Fixed),
    ] {
        reports.push(check_op(name, trials, &mut rng, |rng| {
            let batch = 4;
            let pred_real = rand_tensor(rng, &[batch, omega_dim], -1.5, 1.5);
            let pred_fake = rand_tensor(rng, &[batch, omega_dim], -1.5, 1.5);
            let omega = rand_tensor(rng, &[batch, omega_dim], 0.0, 1.0);
            let c = vec![1.0; omega_dim];
            finite_diff_check(
                |tape, ids| {
                    let om = tape.constant(omega.clone());
                    losses::ss_variant_d_loss(tape, ids[0], ids[1], om, task, &c)
                },
                &[pred_real, pred_fake],
                DEFAULT_EPS,
            )
        })?);
    }

    for (name, task, variant) in [
        ("augself_g_combination", SsTask::Ass, GenSsVariant::Combination),
        ("augself_g_saturating", SsTask::Ass, GenSsVariant::Saturating),
        (
            "augself_g_non_saturating",
            SsTask::Ass,
            GenSsVariant::NonSaturating,
        ),
        ("ss_g", SsTask::Ss, GenSsVariant::Combination),
        ("fixed_g", SsTask::Fixed, GenSsVariant::Combination),
    ] {
        reports.push(check_op(name, trials, &mut rng, |rng| {
            let batch = 4;
            let pred = rand_tensor(rng, &[batch, omega_dim], -1.5, 1.5);
            let omega = rand_tensor(rng, &[batch, omega_dim], 0.0, 1.0);
            let c = vec![1.0; omega_dim];
            finite_diff_check(
                |tape, ids| {
                    let om = tape.constant(omega.clone());
                    losses::ss_variant_g_loss(tape, ids[0], om, task, variant, &c)
                },
                &[pred],
                DEFAULT_EPS,
            )
        })?);
    }

    // Full pipeline: loss(weight, image) through augment -> conv -> heads.
    // This exercises the same graph shapes as a training step.
    reports.push(check_op("pipeline_d", trials, &mut rng, |rng| {
        let batch = 2;
        let img = rand_tensor(rng, &[batch, 3, 8, 8], -1.0, 1.0);
        let kern = rand_tensor(rng, &[4, 3, 3, 3], -0.4, 0.4);
        let head = rand_tensor(rng, &[4 * 3 * 3, 1], -0.4, 0.4);
        let ss_w = rand_tensor(rng, &[4 * 3 * 3, 7], -0.4, 0.4);
        let params = AugParams::sample(rng, batch);
        let omega = params.concat_targets();
        finite_diff_check(
            |tape, ids| {
                let aug = augment::apply_all(tape, ids[0], &params, &cfg)?;
                let feat_aug = toy_features(tape, aug, ids[1])?;
                let feat_ref = toy_features(tape, ids[0], ids[1])?;
                let score_real = tape.matmul(feat_aug, ids[2])?;
                let score_fake = tape.matmul(feat_ref, ids[2])?;
                let adv = losses::gan_d_loss(tape, score_real, score_fake, GanKind::Lsgan)?;
                let diff = tape.sub(feat_aug, feat_ref)?;
                let pred = tape.matmul(diff, ids[3])?;
                let om = tape.constant(omega.clone());
                let err = tape.sub(pred, om)?;
                let sq = tape.square(err)?;
                let tot = tape.sum_all(sq);
                let ss = tape.mul_scalar(tot, 1.0 / batch as f64);
                tape.add(adv, ss)
            },
            &[img, kern, head, ss_w],
            DEFAULT_EPS,
        )
    })?);

    Ok(reports)
}

fn gan_scores(rng: &mut ChaCha12Rng, kind: GanKind) -> Tensor {
    // Hinge has kinks at -1 and 1; sample away from both.
    let data: Vec<f64> = (0..4)
        .map(|_| match kind {
            GanKind::Hinge => {
                let v = rng.gen_range(0.05..0.9);
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let base = if rng.gen::<bool>() { 0.0 } else { 1.1 };
                sign * (base + v)
            }
            _ => rng.gen_range(-2.0..2.0),
        })
        .collect();
    Tensor::from_parts(vec![4, 1], data)
}

fn toy_features(tape: &mut Tape, img: TensorId, kern: TensorId) -> Result<TensorId> {
    let conv = tape.conv2d(img, kern, 2, 0)?;
    let act = tape.tanh(conv);
    let batch = tape.value(act).shape()[0];
    let flat: usize = tape.value(act).shape()[1..].iter().product();
    tape.reshape(act, vec![batch, flat])
}

/// Run both suites back to back.
pub fn run_full_suite(trials: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut reports = run_op_suite(trials, seed)?;
    reports.extend(run_loss_suite(trials, seed)?);
    Ok(reports)
}
