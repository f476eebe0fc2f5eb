//! The gating acceptance suite: eleven criteria covering gradients, the
//! divergence theory, the augmentation kernels, model bookkeeping, and the
//! training loop. Every criterion prints exactly one pass/fail line with its
//! pinned tolerance; run with
//!
//!     cargo test --test acceptance -- --nocapture
//!
//! to see the lines as they are produced. The whole suite takes on the order
//! of fifteen minutes because criterion 9 performs a real 2000-step training
//! run (shared with criterion 10).

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use augself::augment::{
    apply_all, apply_color, apply_cutout, apply_translation, cutout_offset, cutout_side, max_shift,
    translation_shift, AugConfig, AugParams, OMEGA_DIM,
};
use augself::data::make_shapes_dataset;
use augself::divergences::{
    thm1_check, trained_dhat_agreement, verify_cor1, DiscreteDistribution, TabularProblem,
    DEFAULT_DHAT_LR,
};
use augself::gradcheck::{run_full_suite, PASS_THRESHOLD};
use augself::losses::{ss_variant_g_loss, GenSsVariant, SsTask};
use augself::metrics::majority_frequency;
use augself::models::{count_params, ModelBundle, ModelConfig};
use augself::tensor::{Tape, Tensor};
use augself::train::{run_experiment, ExperimentConfig, ExperimentSummary, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use tempfile::TempDir;

type CriterionResult = Result<String, String>;

fn protect<F: FnOnce() -> CriterionResult>(f: F) -> CriterionResult {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(payload) => {
            let text = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "non-string panic payload".into());
            Err(format!("panicked: {}", text))
        }
    }
}

fn random_image(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid tensor")
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---- criterion 1: finite-difference gradient suite ---------------------

fn criterion_gradients() -> CriterionResult {
    let start = Instant::now();
    let reports = run_full_suite(100, 1).map_err(|e| format!("suite error: {}", e))?;
    let secs = start.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .ok_or("suite produced no reports")?;
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passes())
        .map(|r| r.name.as_str())
        .collect();
    let detail = format!(
        "{} checks x 100 trials, worst '{}' rel err {:.3e} (tolerance {:.0e}), {:.1}s (budget 120s)",
        reports.len(),
        worst.name,
        worst.max_rel_err,
        PASS_THRESHOLD,
        secs
    );
    if !failing.is_empty() {
        return Err(format!("{}; failing: {}", detail, failing.join(", ")));
    }
    if secs >= 120.0 {
        return Err(format!("{}; over the 120s budget", detail));
    }
    Ok(detail)
}

// ---- criterion 2: corollary identities over random pairs ---------------

fn criterion_cor1() -> CriterionResult {
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let start = Instant::now();
    let mut worst_sym = 0.0f64;
    let mut worst_w = 0.0f64;
    let mut min_ahm = f64::INFINITY;
    let mut max_ahm = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let dims = rng.gen_range(2..=16);
        let p = DiscreteDistribution::random(&mut rng, dims);
        let q = DiscreteDistribution::random(&mut rng, dims);
        let r = verify_cor1(&p, &q).map_err(|e| format!("verify_cor1 error: {}", e))?;
        worst_sym = worst_sym.max(r.residual_sym);
        worst_w = worst_w.max(r.residual_w);
        for v in [r.ahm_pq, r.ahm_qp] {
            min_ahm = min_ahm.min(v);
            max_ahm = max_ahm.max(v);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "1000 pairs (dims <= 16): |ahm+ahm'-lecam| <= {:.2e}, |ahm-(1-w)| <= {:.2e} (tolerance 1e-12), ahm in [{:.2e}, {:.6}], {:.2}s (budget 10s)",
        worst_sym, worst_w, min_ahm, max_ahm, secs
    );
    if worst_sym >= TOL || worst_w >= TOL {
        return Err(format!("{}; residual over tolerance", detail));
    }
    if min_ahm < -TOL || max_ahm > 1.0 + TOL {
        return Err(format!("{}; ahm escaped [0, 1]", detail));
    }
    if secs >= 10.0 {
        return Err(format!("{}; over the 10s budget", detail));
    }
    Ok(detail)
}

// ---- criterion 3: constant-target equivalence --------------------------

fn criterion_thm1() -> CriterionResult {
    const TOL_RANDOM: f64 = 1e-10;
    const TOL_WORKED: f64 = 1e-14;
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let cells = rng.gen_range(2..=4);
        let d = rng.gen_range(1..=4);
        let p = DiscreteDistribution::random(&mut rng, cells);
        let q = DiscreteDistribution::random(&mut rng, cells);
        let c: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let r = thm1_check(&p, &q, &c).map_err(|e| format!("thm1_check error: {}", e))?;
        worst = worst.max(r.residual);
    }
    let p = DiscreteDistribution::new(vec![0.5, 0.5]).map_err(|e| e.to_string())?;
    let q = DiscreteDistribution::new(vec![0.25, 0.75]).map_err(|e| e.to_string())?;
    let worked = thm1_check(&p, &q, &[1.0]).map_err(|e| e.to_string())?;
    let target = 4.0 / 15.0;
    let lhs_err = (worked.lhs - target).abs();
    let rhs_err = (worked.rhs - target).abs();
    let detail = format!(
        "1000 random joints (dims <= 4): residual <= {:.2e} (tolerance 1e-10); worked instance lhs/rhs err {:.2e}/{:.2e} from 4/15 (tolerance 1e-14)",
        worst, lhs_err, rhs_err
    );
    if worst >= TOL_RANDOM {
        return Err(format!("{}; random residual over tolerance", detail));
    }
    if lhs_err > TOL_WORKED || rhs_err > TOL_WORKED {
        return Err(format!("{}; worked instance off 4/15", detail));
    }
    Ok(detail)
}

// ---- criterion 4: trained head matches the closed form -----------------

fn criterion_prop1() -> CriterionResult {
    const TOL: f64 = 1e-3;
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let problem = TabularProblem::random(&mut rng, 4, 3, 4, 2);
    let start = Instant::now();
    let gap = trained_dhat_agreement(&problem, 10_000, DEFAULT_DHAT_LR)
        .map_err(|e| format!("training error: {}", e))?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "4x3x4 tabular problem: sup-norm gap {:.3e} after 10^4 steps (tolerance 1e-3), {:.2}s (budget 30s)",
        gap, secs
    );
    if gap >= TOL {
        return Err(format!("{}; gap over tolerance", detail));
    }
    if secs >= 30.0 {
        return Err(format!("{}; over the 30s budget", detail));
    }
    Ok(detail)
}

// ---- criterion 5: combination loss is -4 mean <pred, omega> ------------

fn criterion_combination() -> CriterionResult {
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let (batches, rows) = (100usize, 100usize);
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let pred: Vec<f64> = (0..rows * OMEGA_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let omega: Vec<f64> = (0..rows * OMEGA_DIM).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![rows, OMEGA_DIM], pred.clone()).expect("valid tensor"));
        let o = tape.constant(Tensor::new(vec![rows, OMEGA_DIM], omega.clone()).expect("valid tensor"));
        let loss = ss_variant_g_loss(&mut tape, p, o, SsTask::Ass, GenSsVariant::Combination, &[])
            .map_err(|e| format!("loss error: {}", e))?;
        let lhs = tape
            .value(loss)
            .scalar_value()
            .map_err(|e| format!("scalar error: {}", e))?;
        let dot: f64 = pred.iter().zip(&omega).map(|(a, b)| a * b).sum();
        let rhs = -4.0 * dot / rows as f64;
        worst = worst.max((lhs - rhs).abs());
    }
    let detail = format!(
        "10^4 random vectors (100 batches x 100 rows): |combination + 4 mean<pred, omega>| <= {:.2e} (tolerance 1e-12)",
        worst
    );
    if worst >= TOL {
        return Err(format!("{}; identity violated", detail));
    }
    Ok(detail)
}

// ---- criterion 6: augmentation exactness -------------------------------

fn criterion_augmentations() -> CriterionResult {
    // (a) identity parameters are a bit-exact no-op for color and
    // translation; cutout always removes a window, so it stays disabled.
    let img = random_image(60, &[2, 3, 16, 16], -1.0, 1.0);
    let params = AugParams::from_omega(2, &[0.5; OMEGA_DIM]).map_err(|e| e.to_string())?;
    let config = AugConfig {
        enabled: [true, true, false],
        ..AugConfig::normal()
    };
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let out = apply_all(&mut tape, x, &params, &config).map_err(|e| e.to_string())?;
    if !bits_equal(tape.value(out), &img) {
        return Err("identity omega = 0.5 is not bit-exact for color + translation".into());
    }

    // (b) cutout zeroes exactly cut_h * cut_w pixels per channel on an image
    // with no zero values of its own.
    let img = random_image(61, &[2, 3, 16, 16], 0.2, 1.0);
    let mut rng = ChaCha12Rng::seed_from_u64(62);
    let params = AugParams::sample(&mut rng, 2);
    let config = AugConfig {
        enabled: [false, false, true],
        ..AugConfig::normal()
    };
    let cut = cutout_side(16, config.cutout_ratio);
    let mut tape = Tape::new();
    let x = tape.constant(img);
    let out = apply_all(&mut tape, x, &params, &config).map_err(|e| e.to_string())?;
    let zeros = tape.value(out).data().iter().filter(|v| **v == 0.0).count();
    let expected_zeros = 2 * 3 * cut * cut;
    if zeros != expected_zeros {
        return Err(format!(
            "cutout zero count {} != {} (2 samples x 3 channels x {}x{})",
            zeros, expected_zeros, cut, cut
        ));
    }

    // (c) the reference parameter vector composes color, then translation,
    // then cutout, with the documented integer shift and offset mapping.
    let omega = [0.2, 0.3, 0.5, 0.1, 0.8, 0.4, 0.6];
    let (h, w) = (8usize, 8usize);
    let img = random_image(63, &[1, 3, h, w], 0.4, 1.0);
    let params = AugParams::from_omega(1, &omega).map_err(|e| e.to_string())?;
    let config = AugConfig::normal();
    if max_shift(w, config.translation_ratio) != 1 {
        return Err("max shift on side 8 at ratio 1/8 is not 1".into());
    }
    if translation_shift(0.1, 1) != -1 || translation_shift(0.8, 1) != 1 {
        return Err("translation shifts for omega 0.1/0.8 are not -1/+1".into());
    }
    if cutout_side(w, config.cutout_ratio) != 4 {
        return Err("cutout side on side 8 at ratio 1/2 is not 4".into());
    }
    if cutout_offset(0.4, w, 4) != 2 || cutout_offset(0.6, h, 4) != 2 {
        return Err("cutout offsets for omega 0.4/0.6 are not 2/2".into());
    }

    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let full = apply_all(&mut tape, x, &params, &config).map_err(|e| e.to_string())?;

    let mut tape_seq = Tape::new();
    let x_seq = tape_seq.constant(img.clone());
    let colored = apply_color(&mut tape_seq, x_seq, &params).map_err(|e| e.to_string())?;
    let shifted =
        apply_translation(&mut tape_seq, colored, &params, &config).map_err(|e| e.to_string())?;
    let cutout =
        apply_cutout(&mut tape_seq, shifted, &params, &config).map_err(|e| e.to_string())?;
    if !bits_equal(tape.value(full), tape_seq.value(cutout)) {
        return Err("apply_all differs from color -> translation -> cutout".into());
    }

    // Independent reference: brightness -0.3, saturation 0.6 about the
    // per-pixel channel mean, contrast scale exactly 1 (skipped), shift
    // (dy, dx) = (+1, -1), zero window rows 2..6 x cols 2..6.
    let src = img.data();
    let mut color_ref = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for xp in 0..w {
            let mut mean = 0.0;
            for ch in 0..3 {
                mean += src[(ch * h + y) * w + xp] - 0.3;
            }
            mean /= 3.0;
            for ch in 0..3 {
                let v = src[(ch * h + y) * w + xp] - 0.3;
                color_ref[(ch * h + y) * w + xp] = mean + (v - mean) * 0.6;
            }
        }
    }
    let mut expected = vec![0.0f64; 3 * h * w];
    for ch in 0..3 {
        for y in 0..h {
            for xp in 0..w {
                let (sy, sx) = (y as i64 - 1, xp as i64 + 1);
                let mut v = 0.0;
                if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                    v = color_ref[(ch * h + sy as usize) * w + sx as usize];
                }
                if (2..6).contains(&y) && (2..6).contains(&xp) {
                    v = 0.0;
                }
                expected[(ch * h + y) * w + xp] = v;
            }
        }
    }
    let got = tape.value(full).data();
    let mut worst = 0.0f64;
    for (g, e) in got.iter().zip(&expected) {
        worst = worst.max((g - e).abs());
    }
    if worst >= 1e-12 {
        return Err(format!(
            "composed output deviates from the reference by {:.2e} (tolerance 1e-12)",
            worst
        ));
    }
    for ch in 0..3 {
        for y in 0..h {
            for xp in 0..w {
                let v = got[(ch * h + y) * w + xp];
                let structural_zero =
                    y == 0 || xp == w - 1 || ((2..6).contains(&y) && (2..6).contains(&xp));
                if structural_zero && v != 0.0 {
                    return Err(format!("expected exact zero at ({}, {}, {})", ch, y, xp));
                }
                if !structural_zero && v == 0.0 {
                    return Err(format!("unexpected zero at ({}, {}, {})", ch, y, xp));
                }
            }
        }
    }
    Ok(format!(
        "identity bit-exact; cutout zeroes exactly {}x{} per channel; omega {:?} composes color -> shift(+1, -1) -> 4x4 window at (2, 2) within 1e-12",
        cut, cut, omega
    ))
}

// ---- criterion 7: head parameter overhead ------------------------------

fn criterion_param_overhead() -> CriterionResult {
    let config = ModelConfig::default();
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let bundle = ModelBundle::init(config.clone(), &mut rng).map_err(|e| e.to_string())?;
    for head in &bundle.ss_heads {
        let d = head.category.dim();
        let expected = config.feat_dim * d + d;
        if head.param_count() != expected {
            return Err(format!(
                "{:?} head has {} params, formula gives {}",
                head.category,
                head.param_count(),
                expected
            ));
        }
    }
    let counts = count_params(&bundle);
    let detail = format!(
        "heads add {} params at feat_dim {} ({:.4}% of the discriminator; threshold 0.5%)",
        counts.ss_heads,
        config.feat_dim,
        100.0 * counts.ss_fraction
    );
    if counts.ss_heads != 903 {
        return Err(format!("{}; expected exactly 903", detail));
    }
    if counts.ss_fraction >= 0.005 {
        return Err(format!("{}; fraction over threshold", detail));
    }
    Ok(detail)
}

// ---- criterion 8: zero weight reduces to the plain pipeline ------------

fn tiny_config(dir: &Path) -> Result<ExperimentConfig, String> {
    let mut config = ExperimentConfig::default();
    for (key, value) in [
        ("dataset.n", "24"),
        ("dataset.size", "8"),
        ("model.latent_dim", "8"),
        ("model.feat_dim", "16"),
        ("train.steps", "4"),
        ("train.batch", "4"),
        ("train.eval_interval", "2"),
        ("eval.fd_samples", "8"),
        ("eval.probe_steps", "30"),
    ] {
        config
            .apply_kv(key, value)
            .map_err(|e| format!("config error on {}: {}", key, e))?;
    }
    config.out_dir = dir.to_path_buf();
    Ok(config)
}

fn criterion_reduction() -> CriterionResult {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let mut with_zero_weight = tiny_config(&dir.path().join("zero"))?;
    for (key, value) in [
        ("loss.ss_task", "ass"),
        ("loss.lambda_d", "0"),
        ("loss.lambda_g", "0"),
    ] {
        with_zero_weight.apply_kv(key, value).map_err(|e| e.to_string())?;
    }
    let mut with_no_task = tiny_config(&dir.path().join("none"))?;
    with_no_task.apply_kv("loss.ss_task", "none").map_err(|e| e.to_string())?;

    let mut a = TrainState::new(with_zero_weight).map_err(|e| e.to_string())?;
    let mut b = TrainState::new(with_no_task).map_err(|e| e.to_string())?;
    let steps = a.config.steps;
    for step in 0..steps {
        let la = a.train_step().map_err(|e| e.to_string())?;
        let lb = b.train_step().map_err(|e| e.to_string())?;
        if la != lb {
            return Err(format!(
                "losses diverge at step {}: {:?} vs {:?}",
                step, la, lb
            ));
        }
    }
    let pa = a.models.named_params();
    let pb = b.models.named_params();
    if pa.len() != pb.len() {
        return Err("parameter lists differ in length".into());
    }
    for ((na, ta), (nb, tb)) in pa.iter().zip(&pb) {
        if na != nb {
            return Err(format!("parameter order differs: {} vs {}", na, nb));
        }
        if !bits_equal(ta, tb) {
            return Err(format!("parameter {} differs bitwise after {} steps", na, steps));
        }
    }
    Ok(format!(
        "lambda = 0 and task = none agree for {} steps: identical losses, all {} tensors bitwise equal",
        steps,
        pa.len()
    ))
}

// ---- criteria 9 and 10: one shared 2000-step training run --------------

struct SmokeFixture {
    config: ExperimentConfig,
    summary: ExperimentSummary,
    _dir: TempDir,
}

fn run_smoke() -> Result<SmokeFixture, String> {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let mut config = ExperimentConfig::default();
    config.apply_kv("data.fraction", "0.1").map_err(|e| e.to_string())?;
    config.out_dir = dir.path().join("smoke");
    let summary = run_experiment(&config).map_err(|e| format!("training error: {}", e))?;
    Ok(SmokeFixture {
        config,
        summary,
        _dir: dir,
    })
}

fn criterion_smoke(fixture: &SmokeFixture) -> CriterionResult {
    let records = &fixture.summary.records;
    let first = records.first().ok_or("run produced no metric records")?;
    let last = fixture.summary.final_record();
    let non_finite = records.iter().filter(|r| !r.is_finite()).count();
    let ratio = last.fd / first.fd;
    let secs = fixture.summary.wall_seconds;
    let detail = format!(
        "2000 steps on the 10% split: fd {:.1} -> {:.1} (ratio {:.3}, threshold 0.5), {} eval rows all finite, {:.0}s (budget 1200s); lambda sweep comparison is reported by `augself sweep`, monitored not gating",
        first.fd,
        last.fd,
        ratio,
        records.len(),
        secs,
    );
    if non_finite > 0 {
        return Err(format!("{}; {} non-finite records", detail, non_finite));
    }
    if !(ratio <= 0.5) {
        return Err(format!("{}; final fd did not halve", detail));
    }
    if secs >= 1200.0 {
        return Err(format!("{}; over the 20-minute budget", detail));
    }
    Ok(detail)
}

fn criterion_probe(fixture: &SmokeFixture) -> CriterionResult {
    let config = &fixture.config;
    let dataset = make_shapes_dataset(config.dataset_n, config.dataset_seed, config.dataset_size)
        .map_err(|e| e.to_string())?
        .subsample(config.fraction, config.fraction_seed)
        .map_err(|e| e.to_string())?;
    let baseline = majority_frequency(&dataset.position_labels);
    let probe_pos = fixture.summary.final_record().probe[2];
    let detail = format!(
        "position probe {:.3} vs best-constant {:.3} ({:.2}x, threshold 1.5x)",
        probe_pos,
        baseline,
        probe_pos / baseline
    );
    if !(probe_pos >= 1.5 * baseline) {
        return Err(format!("{}; probe under threshold", detail));
    }
    Ok(detail)
}

// ---- criterion 11: byte-identical reruns -------------------------------

fn criterion_determinism() -> CriterionResult {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let mut csvs = Vec::new();
    for name in ["first", "second"] {
        let config = tiny_config(&dir.path().join(name))?;
        let summary = run_experiment(&config).map_err(|e| format!("run {}: {}", name, e))?;
        let csv = std::fs::read(summary.out_dir.join("metrics.csv"))
            .map_err(|e| format!("read {}: {}", name, e))?;
        csvs.push(csv);
    }
    if csvs[0].is_empty() {
        return Err("metrics.csv came out empty".into());
    }
    if csvs[0] != csvs[1] {
        return Err("repeated runs produced different metrics.csv bytes".into());
    }
    Ok(format!(
        "two identical runs produced byte-identical metrics.csv ({} bytes)",
        csvs[0].len()
    ))
}

// ---- harness -----------------------------------------------------------

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &'static str, CriterionResult)> = vec![
        (1, "gradient suite", protect(criterion_gradients)),
        (2, "divergence identities", protect(criterion_cor1)),
        (3, "constant-target equivalence", protect(criterion_thm1)),
        (4, "closed-form head agreement", protect(criterion_prop1)),
        (5, "combination loss identity", protect(criterion_combination)),
        (6, "augmentation exactness", protect(criterion_augmentations)),
        (7, "parameter overhead", protect(criterion_param_overhead)),
        (8, "baseline reduction", protect(criterion_reduction)),
    ];

    let smoke = match panic::catch_unwind(run_smoke) {
        Ok(r) => r,
        Err(_) => Err("smoke run panicked".into()),
    };
    results.push((
        9,
        "training smoke",
        match &smoke {
            Ok(fixture) => protect(|| criterion_smoke(fixture)),
            Err(e) => Err(format!("smoke run failed: {}", e)),
        },
    ));
    results.push((
        10,
        "probe sanity",
        match &smoke {
            Ok(fixture) => protect(|| criterion_probe(fixture)),
            Err(e) => Err(format!("smoke run failed: {}", e)),
        },
    ));
    results.push((11, "determinism", protect(criterion_determinism)));

    let mut failures = Vec::new();
    for (id, name, result) in &results {
        match result {
            Ok(detail) => println!("criterion {:>2} ({}): PASS - {}", id, name, detail),
            Err(detail) => {
                println!("criterion {:>2} ({}): FAIL - {}", id, name, detail);
                failures.push(format!("criterion {} ({})", id, name));
            }
        }
    }
    assert!(
        failures.is_empty(),
        "acceptance failures: {}",
        failures.join(", ")
    );
}
