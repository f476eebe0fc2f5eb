//! Evaluation metrics: Fréchet distance between Gaussian fits, mode
//! coverage, the linear representation probe, and the metrics CSV schema.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Covariance ridge applied when a set has fewer than dim + 1 samples.
pub const COV_RIDGE: f64 = 1e-6;

/// Exact column order of the metrics CSV.
pub const CSV_HEADER: &str = "step,d_loss,g_loss,ss_d_color,ss_d_trans,ss_d_cutout,ss_g_color,ss_g_trans,ss_g_cutout,fd,mode_coverage,probe_shape,probe_color,probe_pos";

/// One evaluated row of the metrics CSV. Self-supervised components and
/// probe accuracies follow the canonical category order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Discriminator-side ss components: color, translation, cutout.
    pub ss_d: [f64; 3],
    /// Generator-side ss components: color, translation, cutout.
    pub ss_g: [f64; 3],
    pub fd: f64,
    pub mode_coverage: usize,
    /// Probe accuracies: shape, color, position.
    pub probe: [f64; 3],
}

impl MetricsRecord {
    pub fn is_finite(&self) -> bool {
        let mut vals = vec![self.d_loss, self.g_loss, self.fd];
        vals.extend_from_slice(&self.ss_d);
        vals.extend_from_slice(&self.ss_g);
        vals.extend_from_slice(&self.probe);
        vals.iter().all(|v| v.is_finite())
    }

    pub fn to_csv_row(&self) -> String {
        let f = |v: f64| format!("{:.9e}", v);
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            f(self.d_loss),
            f(self.g_loss),
            f(self.ss_d[0]),
            f(self.ss_d[1]),
            f(self.ss_d[2]),
            f(self.ss_g[0]),
            f(self.ss_g[1]),
            f(self.ss_g[2]),
            f(self.fd),
            self.mode_coverage,
            f(self.probe[0]),
            f(self.probe[1]),
            f(self.probe[2]),
        )
    }
}

// ---- Frechet distance --------------------------------------------------

fn check_matrix(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!(
            "{} must be a [samples, dim] matrix, got {:?}",
            what, s
        )));
    }
    Ok((s[0], s[1]))
}

/// Mean and row-major covariance (ddof = 1) of a [N, D] sample matrix, with
/// the ridge applied when N < D + 1.
pub fn sample_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = check_matrix(x, "sample set")?;
    if n == 0 {
        return Err(Error::Parameter("moment estimation needs at least one sample".into()));
    }
    let data = x.data();
    let mut mean = vec![0.0; d];
    for row in 0..n {
        for (m, &v) in mean.iter_mut().zip(&data[row * d..(row + 1) * d]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    if n >= 2 {
        for row in 0..n {
            let r = &data[row * d..(row + 1) * d];
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        let denom = (n - 1) as f64;
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] /= denom;
                cov[j * d + i] = cov[i * d + j];
            }
        }
    }
    if n < d + 1 {
        for i in 0..d {
            cov[i * d + i] += COV_RIDGE;
        }
    }
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Frechet distance from exact moments: ||mu_a - mu_b||^2 +
/// tr(Sa + Sb - 2 (Sa Sb)^(1/2)), with the cross term computed through the
/// symmetric product Sa^(1/2) Sb Sa^(1/2). Clamped at zero.
pub fn frechet_from_moments(
    mu_a: &[f64],
    cov_a: &[f64],
    mu_b: &[f64],
    cov_b: &[f64],
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.len() != d * d || cov_b.len() != d * d {
        return Err(Error::Shape(format!(
            "moment dimensions disagree: means {}/{}, covariances {}/{} (need {})",
            mu_a.len(),
            mu_b.len(),
            cov_a.len(),
            cov_b.len(),
            d * d
        )));
    }
    let sa = DMatrix::from_row_slice(d, d, cov_a);
    let sb = DMatrix::from_row_slice(d, d, cov_b);
    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let root_a = psd_sqrt(&sa);
    let inner = &root_a * &sb * &root_a;
    let cross: f64 = inner
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Numeric("Frechet distance is non-finite".into()));
    }
    Ok(value.max(0.0))
}

/// Frechet distance between two sample sets shaped [N, D].
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (_, da) = check_matrix(a, "set a")?;
    let (_, db) = check_matrix(b, "set b")?;
    if da != db {
        return Err(Error::Shape(format!(
            "sample sets have dimensions {} and {}",
            da, db
        )));
    }
    let (mu_a, cov_a) = sample_moments(a)?;
    let (mu_b, cov_b) = sample_moments(b)?;
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

// ---- mode coverage -----------------------------------------------------

/// Number of centers with at least one sample within `radius` (Euclidean).
/// An empty sample set covers nothing.
pub fn mode_coverage(samples: &Tensor, centers: &Tensor, radius: f64) -> Result<usize> {
    let (ns, ds) = check_matrix(samples, "samples")?;
    let (nc, dc) = check_matrix(centers, "centers")?;
    if nc == 0 {
        return Err(Error::Parameter("mode coverage needs at least one center".into()));
    }
    if ns > 0 && ds != dc {
        return Err(Error::Shape(format!(
            "samples have dimension {}, centers {}",
            ds, dc
        )));
    }
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(Error::Parameter(format!(
            "radius must be finite and non-negative, got {}",
            radius
        )));
    }
    let r_sq = radius * radius;
    let mut covered = 0;
    for c in 0..nc {
        let center = &centers.data()[c * dc..(c + 1) * dc];
        let hit = (0..ns).any(|s| {
            let row = &samples.data()[s * dc..(s + 1) * dc];
            let dist_sq: f64 = row
                .iter()
                .zip(center.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist_sq <= r_sq
        });
        if hit {
            covered += 1;
        }
    }
    Ok(covered)
}

// ---- linear probe ------------------------------------------------------

/// Multinomial logistic regression on standardized features, trained by
/// full-batch gradient descent on an 80/20 split; returns held-out accuracy.
///
/// The step size is set from a power-iteration estimate of the feature
/// Gram spectral norm, which upper-bounds the softmax Hessian, so descent
/// cannot diverge regardless of feature scale.
pub fn linear_probe(
    features: &Tensor,
    labels: &[usize],
    n_classes: usize,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let (n, d) = check_matrix(features, "probe features")?;
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} feature rows but {} labels",
            n,
            labels.len()
        )));
    }
    if n_classes < 2 {
        return Err(Error::Parameter("probe needs at least two classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Parameter(format!(
            "label {} out of range for {} classes",
            bad, n_classes
        )));
    }
    let distinct = {
        let mut seen = vec![false; n_classes];
        for &l in labels {
            seen[l] = true;
        }
        seen.iter().filter(|s| **s).count()
    };
    if distinct < 2 {
        return Err(Error::DegenerateLabels(
            "probe labels contain fewer than two classes".into(),
        ));
    }
    if n < 5 {
        return Err(Error::Parameter(format!(
            "probe needs at least 5 samples for an 80/20 split, got {}",
            n
        )));
    }

    // Seed-fixed shuffle, first 80% train, rest held out.
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (n * 4) / 5;
    let (train_idx, test_idx) = order.split_at(n_train);
    if test_idx.is_empty() {
        return Err(Error::Parameter("empty held-out split".into()));
    }

    // Standardize with train-split statistics.
    let data = features.data();
    let mut mean = vec![0.0; d];
    for &i in train_idx {
        for (m, &v) in mean.iter_mut().zip(&data[i * d..(i + 1) * d]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n_train as f64;
    }
    let mut var = vec![0.0; d];
    for &i in train_idx {
        for (s, (&v, m)) in var.iter_mut().zip(data[i * d..(i + 1) * d].iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|s| (s / n_train as f64).sqrt().max(1e-8))
        .collect();
    let standardized = |i: usize| -> Vec<f64> {
        data[i * d..(i + 1) * d]
            .iter()
            .zip(mean.iter().zip(std.iter()))
            .map(|(&v, (m, s))| (v - m) / s)
            .collect()
    };
    let x_train: Vec<Vec<f64>> = train_idx.iter().map(|&i| standardized(i)).collect();

    // Spectral-norm estimate of X^T X / n by power iteration.
    let mut v: Vec<f64> = (0..d).map(|k| ((k as f64) * 0.7).sin() + 0.1).collect();
    let mut lambda = 1.0;
    for _ in 0..20 {
        let mut xv = vec![0.0; x_train.len()];
        for (row, x) in x_train.iter().enumerate() {
            xv[row] = x.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        }
        let mut next = vec![0.0; d];
        for (row, x) in x_train.iter().enumerate() {
            for (nx, &xk) in next.iter_mut().zip(x.iter()) {
                *nx += xv[row] * xk;
            }
        }
        for nx in &mut next {
            *nx /= n_train as f64;
        }
        let norm: f64 = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-12 {
            break;
        }
        lambda = norm;
        for (vk, nx) in v.iter_mut().zip(next.iter()) {
            *vk = nx / norm;
        }
    }
    let lr = 1.8 / (0.5 * lambda + 1e-3);

    let mut w = vec![0.0; d * n_classes];
    let mut b = vec![0.0; n_classes];
    let mut logits = vec![0.0; n_classes];
    let mut grad_w = vec![0.0; d * n_classes];
    let mut grad_b = vec![0.0; n_classes];
    for _ in 0..steps {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        grad_b.iter_mut().for_each(|g| *g = 0.0);
        for (row, x) in x_train.iter().enumerate() {
            for (k, l) in logits.iter_mut().enumerate() {
                *l = b[k]
                    + x.iter()
                        .zip(w[k * d..(k + 1) * d].iter())
                        .map(|(a, c)| a * c)
                        .sum::<f64>();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                z += *l;
            }
            let target = labels[train_idx[row]];
            for k in 0..n_classes {
                let p = logits[k] / z - if k == target { 1.0 } else { 0.0 };
                grad_b[k] += p;
                for (gw, &xk) in grad_w[k * d..(k + 1) * d].iter_mut().zip(x.iter()) {
                    *gw += p * xk;
                }
            }
        }
        let scale = lr / n_train as f64;
        for (wk, gw) in w.iter_mut().zip(grad_w.iter()) {
            *wk -= scale * gw;
        }
        for (bk, gb) in b.iter_mut().zip(grad_b.iter()) {
            *bk -= scale * gb;
        }
    }

    let mut correct = 0usize;
    for &i in test_idx {
        let x = standardized(i);
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for k in 0..n_classes {
            let score = b[k]
                + x.iter()
                    .zip(w[k * d..(k + 1) * d].iter())
                    .map(|(a, c)| a * c)
                    .sum::<f64>();
            if score > best_score {
                best_score = score;
                best = k;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_idx.len() as f64)
}

/// Frequency of the most common label — the accuracy of the best constant
/// predictor, the probe's chance baseline.
pub fn majority_frequency(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max_label + 1];
    for &l in labels {
        counts[l] += 1;
    }
    *counts.iter().max().unwrap() as f64 / labels.len() as f64
}
