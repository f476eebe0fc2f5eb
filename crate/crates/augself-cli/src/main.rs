//! Command-line front end: experiment orchestration, theory verification,
//! gradient checks, divergence computation, probing, and augmentation
//! previews.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use augself::augment::{apply_all, AugParams, OMEGA_DIM};
use augself::data::{make_shapes_dataset, LabelKind};
use augself::divergences::{f_div, run_verification, DiscreteDistribution, FKind};
use augself::gradcheck::{run_full_suite, PASS_THRESHOLD};
use augself::metrics::{linear_probe, majority_frequency};
use augself::models::{load_checkpoint, ModelBundle};
use augself::pnm::{extension, write_image};
use augself::tensor::{Tape, Tensor};
use augself::train::{run_experiment, run_sweep, ExperimentConfig, SWEEP_LAMBDAS};
use augself::{Error, Result};

#[derive(Parser)]
#[command(
    name = "augself",
    about = "Augmentation-aware self-supervised GAN laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// key=value configuration: optional file plus repeatable overrides.
/// Overrides win over file values; unknown keys are rejected.
#[derive(Args)]
struct ConfigArgs {
    /// Path to a key=value config file ('#' starts a comment)
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one key, e.g. --set loss.lambda_d=0.5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one training experiment and write metrics, checkpoint, summary
    Train(ConfigArgs),

    /// Verify the divergence theory on random instances; emits a JSON report
    VerifyTheory {
        /// Random instances per identity check
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },

    /// Finite-difference checks for every differentiable op and loss
    Gradcheck {
        /// Random trials per op
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },

    /// Compute an f-divergence between two mass files (comma/whitespace
    /// separated, normalized automatically)
    Divergence {
        p: PathBuf,
        q: PathBuf,
        /// One of: kl, rkl, js, lc, ahm
        #[arg(long)]
        kind: String,
    },

    /// Linear-probe a trained discriminator's features on the dataset labels
    Probe {
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },

    /// Apply the augmentation pipeline to one dataset image and write
    /// original / augmented / difference images
    AugmentPreview {
        #[command(flatten)]
        config: ConfigArgs,
        /// Seven comma-separated omega components in [0,1]; sampled if absent
        #[arg(long)]
        omega: Option<String>,
        /// Seed for omega sampling when --omega is absent
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset image index to augment
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },

    /// Train the full lambda grid and write per-point metrics plus a
    /// combined comparative summary
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated lambda values (default: the canonical grid)
        #[arg(long)]
        lambdas: Option<String>,
        /// Comma-separated training seeds (default: 0,1,2,3,4)
        #[arg(long)]
        seeds: Option<String>,
    },
}

fn split_kv(raw: &str, origin: &str) -> Result<(String, String)> {
    match raw.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => Err(Error::Config(format!(
            "{}: expected key=value, got '{}'",
            origin, raw
        ))),
    }
}

fn build_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let origin = format!("{}:{}", path.display(), lineno + 1);
            let (k, v) = split_kv(line, &origin)?;
            cfg.apply_kv(&k, &v)?;
        }
    }
    for raw in &args.set {
        let (k, v) = split_kv(raw, "--set")?;
        cfg.apply_kv(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_f64_list(raw: &str, what: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| Error::Config(format!("{}: cannot parse '{}': {}", what, s, e)))
        })
        .collect()
}

fn parse_u64_list(raw: &str, what: &str) -> Result<Vec<u64>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u64>()
                .map_err(|e| Error::Config(format!("{}: cannot parse '{}': {}", what, s, e)))
        })
        .collect()
}

fn read_masses(path: &Path) -> Result<DiscreteDistribution> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let masses: Vec<f64> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>().map_err(|e| {
                Error::Config(format!(
                    "{}: cannot parse '{}' as a mass: {}",
                    path.display(),
                    s,
                    e
                ))
            })
        })
        .collect::<Result<_>>()?;
    DiscreteDistribution::from_masses(&masses)
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let cfg = build_config(args)?;
    let summary = run_experiment(&cfg)?;
    let fin = summary.final_record();
    println!(
        "step {}: d_loss={:.6} g_loss={:.6} fd={:.6} coverage={} probe(shape/color/pos)={:.3}/{:.3}/{:.3}",
        fin.step,
        fin.d_loss,
        fin.g_loss,
        fin.fd,
        fin.mode_coverage,
        fin.probe[0],
        fin.probe[1],
        fin.probe[2],
    );
    println!(
        "best fd {:.6} at step {} ({:.1}s); artifacts in {}",
        summary.best_fd,
        summary.best_fd_step,
        summary.wall_seconds,
        summary.out_dir.display()
    );
    Ok(())
}

fn cmd_verify_theory(instances: usize, seed: u64) -> Result<()> {
    let report = run_verification(instances, seed)?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Contract(format!("report serialization failed: {}", e)))?;
    println!("{}", text);
    if !report.pass {
        return Err(Error::Numeric(
            "at least one theory residual exceeds its tolerance".into(),
        ));
    }
    Ok(())
}

fn cmd_gradcheck(trials: usize, seed: u64) -> Result<()> {
    let reports = run_full_suite(trials, seed)?;
    let mut worst: f64 = 0.0;
    let mut all_pass = true;
    for r in &reports {
        let status = if r.passes() { "ok" } else { "FAIL" };
        println!(
            "{:<28} trials={:<4} max_rel_err={:.3e}  {}",
            r.name, r.trials, r.max_rel_err, status
        );
        worst = worst.max(r.max_rel_err);
        all_pass &= r.passes();
    }
    println!("worst max_rel_err = {:.3e} (threshold {:.0e})", worst, PASS_THRESHOLD);
    if !all_pass {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
            worst, PASS_THRESHOLD
        )));
    }
    Ok(())
}

fn cmd_divergence(p: &Path, q: &Path, kind: &str) -> Result<()> {
    let kind = FKind::parse(kind)?;
    let p = read_masses(p)?;
    let q = read_masses(q)?;
    let value = f_div(&p, &q, kind)?;
    println!("{:.6e}", value);
    Ok(())
}

/// Load only the model tensors out of a training checkpoint (which also
/// carries optimizer and RNG state).
fn load_model_params(bundle: &mut ModelBundle, path: &Path) -> Result<()> {
    let tensors = load_checkpoint(path)?;
    let mut map: std::collections::BTreeMap<String, Tensor> = tensors
        .into_iter()
        .filter(|(name, _)| {
            name != "state.meta" && !name.starts_with("opt_d.") && !name.starts_with("opt_g.")
        })
        .collect();
    for (name, param) in bundle.named_params_mut() {
        let loaded = map.remove(&name).ok_or_else(|| {
            Error::Contract(format!("checkpoint missing tensor '{}'", name))
        })?;
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
    if let Some(name) = map.keys().next() {
        return Err(Error::Contract(format!(
            "checkpoint has unexpected tensor '{}'",
            name
        )));
    }
    Ok(())
}

fn cmd_probe(checkpoint: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = build_config(args)?;
    if cfg.dataset_idx.is_some() {
        return Err(Error::Config(
            "key 'dataset.idx': probing needs labeled data, which IDX imports lack".into(),
        ));
    }
    let dataset = make_shapes_dataset(cfg.dataset_n, cfg.dataset_seed, cfg.dataset_size)?
        .subsample(cfg.fraction, cfg.fraction_seed)?;
    let mut init_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut bundle = ModelBundle::init(cfg.model.clone(), &mut init_rng)?;
    load_model_params(&mut bundle, checkpoint)?;

    let cap = dataset.len().min(512);
    let idx: Vec<usize> = (0..cap).collect();
    let images = dataset.batch(&idx)?;
    let feats = bundle.backbone.features(&images)?;
    let mut entries = Vec::new();
    for kind in [LabelKind::Shape, LabelKind::Color, LabelKind::Position] {
        let labels = &dataset.labels(kind)[..cap];
        let accuracy = linear_probe(&feats, labels, kind.classes(), cfg.probe_steps, 17)?;
        let baseline = majority_frequency(labels);
        entries.push(format!(
            "  \"{}\": {{ \"accuracy\": {:.6}, \"baseline\": {:.6} }}",
            kind.name(),
            accuracy,
            baseline
        ));
    }
    println!("{{\n{}\n}}", entries.join(",\n"));
    Ok(())
}

fn cmd_augment_preview(
    args: &ConfigArgs,
    omega: Option<&str>,
    seed: u64,
    index: usize,
    out: &Path,
) -> Result<()> {
    let cfg = build_config(args)?;
    if cfg.dataset_idx.is_some() {
        return Err(Error::Config(
            "key 'dataset.idx': preview works on the generated dataset".into(),
        ));
    }
    let dataset = make_shapes_dataset(cfg.dataset_n, cfg.dataset_seed, cfg.dataset_size)?;
    if index >= dataset.len() {
        return Err(Error::Config(format!(
            "--index {} is out of range for a dataset of {}",
            index,
            dataset.len()
        )));
    }
    let original = dataset.batch(&[index])?;
    let params = match omega {
        Some(raw) => {
            let vals = parse_f64_list(raw, "--omega")?;
            if vals.len() != OMEGA_DIM {
                return Err(Error::Config(format!(
                    "--omega needs exactly {} components, got {}",
                    OMEGA_DIM,
                    vals.len()
                )));
            }
            let mut omega = [0.0; OMEGA_DIM];
            omega.copy_from_slice(&vals);
            AugParams::from_omega(1, &omega)?
        }
        None => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            AugParams::sample(&mut rng, 1)
        }
    };

    let mut tape = Tape::new();
    let x = tape.constant(original.clone());
    let y = apply_all(&mut tape, x, &params, &cfg.aug)?;
    let augmented = tape.value(y).clone();

    let diff_data: Vec<f64> = augmented
        .data()
        .iter()
        .zip(original.data().iter())
        .map(|(a, o)| 0.5 * (a - o))
        .collect();
    let difference = Tensor::new(original.shape().to_vec(), diff_data)?;

    fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let ext = extension(&original)?;
    let paths = [
        ("original", &original),
        ("augmented", &augmented),
        ("difference", &difference),
    ];
    let omega_row = params.omega_row(0);
    println!(
        "omega = {}",
        omega_row
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    for (stem, img) in paths {
        let path = out.join(format!("{}.{}", stem, ext));
        write_image(&path, img)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_sweep(args: &ConfigArgs, lambdas: Option<&str>, seeds: Option<&str>) -> Result<()> {
    let cfg = build_config(args)?;
    let lambdas = match lambdas {
        Some(raw) => parse_f64_list(raw, "--lambdas")?,
        None => SWEEP_LAMBDAS.to_vec(),
    };
    let seeds = match seeds {
        Some(raw) => parse_u64_list(raw, "--seeds")?,
        None => vec![0, 1, 2, 3, 4],
    };
    let summary = run_sweep(&cfg, &lambdas, &seeds)?;
    for row in &summary.rows {
        println!(
            "lambda {:>5}: median final fd {:.6}, median best fd {:.6}",
            row.lambda, row.median_final_fd, row.median_best_fd
        );
    }
    for c in &summary.comparisons {
        println!(
            "lambda {:>5} vs baseline: final fd better or equal in {}/{} seeds",
            c.lambda, c.wins, c.total
        );
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::VerifyTheory { instances, seed } => cmd_verify_theory(*instances, *seed),
        Cmd::Gradcheck { trials, seed } => cmd_gradcheck(*trials, *seed),
        Cmd::Divergence { p, q, kind } => cmd_divergence(p, q, kind),
        Cmd::Probe { checkpoint, config } => cmd_probe(checkpoint, config),
        Cmd::AugmentPreview {
            config,
            omega,
            seed,
            index,
            out,
        } => cmd_augment_preview(config, omega.as_deref(), *seed, *index, out),
        Cmd::Sweep {
            config,
            lambdas,
            seeds,
        } => cmd_sweep(config, lambdas.as_deref(), seeds.as_deref()),
    }
}

fn main() -> ExitCode {
    // Die quietly when the read end of a pipe closes (`augself ... | head`),
    // like any other command-line tool, instead of panicking on EPIPE.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code())
        }
    }
}
