//! Exact f-divergences on finite distributions and numerical verification of
//! the theory behind the augmentation-aware self-supervised loss.
//!
//! Three facts are checked, all on finite probability spaces where every
//! quantity is computable in closed form:
//!
//! 1. The discriminator head minimizing the +/-omega squared loss has the
//!    closed form `Dhat*(x, xhat) = [sum_w pd*w - sum_w pg*w] / (pd + pg)`
//!    (`optimal_selfsup_discriminator`), and gradient descent on the loss
//!    actually reaches it (`trained_dhat_agreement`).
//! 2. With constant targets c, the generator-side loss evaluated at `Dhat*`
//!    equals `4 ||c||^2 * M_AH(p_data || p_G)`, where `M_AH` is the
//!    arithmetic-minus-harmonic-mean divergence (`thm1_check`).
//! 3. `M_AH(p||q) + M_AH(q||p) = LeCam(p,q)` and `M_AH = 1 - W` for the
//!    harmonic-mean overlap `W = sum 2pq/(p+q)` (`verify_cor1`), which pins
//!    `M_AH` into [0, 1].
//!
//! Zero-mass conventions: `0 * f(0/0) = 0`; bounded kinds (JS, LC, AHM) take
//! their finite limits on cells where one side vanishes; KL-type kinds raise
//! a domain error on support violations instead of returning infinity.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Sum tolerance for a valid probability vector.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Default learning rate for `trained_dhat_agreement`.
pub const DEFAULT_DHAT_LR: f64 = 0.25;

/// A probability distribution over a finite index set.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Parameter("distribution needs at least one cell".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Parameter(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Parameter(format!(
                "probabilities must sum to 1 (+/- {:e}), got {}",
                MASS_TOLERANCE, sum
            )));
        }
        Ok(Self { probs })
    }

    /// Normalize arbitrary non-negative masses into a distribution.
    pub fn from_masses(masses: &[f64]) -> Result<Self> {
        if masses.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Parameter(
                "masses must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = masses.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Parameter("total mass must be positive".into()));
        }
        Self::new(masses.iter().map(|m| m / sum).collect())
    }

    /// Random distribution with all cells bounded away from zero.
    pub fn random(rng: &mut impl Rng, cells: usize) -> Self {
        let masses: Vec<f64> = (0..cells).map(|_| rng.gen_range(0.05..1.0)).collect();
        Self::from_masses(&masses).expect("positive masses always normalize")
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// The five f-divergence generators compared in the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FKind {
    /// f(x) = x ln x
    Kl,
    /// f(x) = -ln x
    ReverseKl,
    /// f(x) = -(x+1) ln((x+1)/2) + x ln x
    Js,
    /// f(x) = (x-1)^2 / (x+1)
    LeCam,
    /// f(x) = (1-x) / (x+1)
    Ahm,
}

impl FKind {
    pub const ALL: [FKind; 5] = [FKind::Kl, FKind::ReverseKl, FKind::Js, FKind::LeCam, FKind::Ahm];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(FKind::Kl),
            "rkl" => Ok(FKind::ReverseKl),
            "js" => Ok(FKind::Js),
            "lc" => Ok(FKind::LeCam),
            "ahm" => Ok(FKind::Ahm),
            other => Err(Error::Config(format!(
                "unknown divergence kind '{}' (expected kl, rkl, js, lc, ahm)",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FKind::Kl => "kl",
            FKind::ReverseKl => "rkl",
            FKind::Js => "js",
            FKind::LeCam => "lc",
            FKind::Ahm => "ahm",
        }
    }
}

/// The raw generator f(x) for x >= 0, using finite limits where they exist.
/// Reverse KL at x = 0 is unbounded and raises a numeric error.
pub fn generator(kind: FKind, x: f64) -> Result<f64> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::Parameter(format!(
            "generator argument must be finite and non-negative, got {}",
            x
        )));
    }
    Ok(match kind {
        FKind::Kl => {
            if x == 0.0 {
                0.0
            } else {
                x * x.ln()
            }
        }
        FKind::ReverseKl => {
            if x == 0.0 {
                return Err(Error::Numeric("reverse KL generator unbounded at 0".into()));
            }
            -x.ln()
        }
        FKind::Js => {
            let t = if x == 0.0 { 0.0 } else { x * x.ln() };
            -(x + 1.0) * ((x + 1.0) / 2.0).ln() + t
        }
        FKind::LeCam => (x - 1.0) * (x - 1.0) / (x + 1.0),
        FKind::Ahm => (1.0 - x) / (x + 1.0),
    })
}

fn check_pair(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions have {} and {} cells",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// D_f(p || q) = sum_i q_i f(p_i / q_i), evaluated cell by cell with exact
/// handling of zero-mass cells.
pub fn f_div(p: &DiscreteDistribution, q: &DiscreteDistribution, kind: FKind) -> Result<f64> {
    check_pair(p, q)?;
    let mut total = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs().iter()) {
        total += match kind {
            FKind::Kl => {
                if pi == 0.0 {
                    0.0
                } else if qi == 0.0 {
                    return Err(Error::Numeric(
                        "KL domain error: p has mass where q does not".into(),
                    ));
                } else {
                    pi * (pi / qi).ln()
                }
            }
            FKind::ReverseKl => {
                if qi == 0.0 {
                    0.0
                } else if pi == 0.0 {
                    return Err(Error::Numeric(
                        "reverse KL domain error: q has mass where p does not".into(),
                    ));
                } else {
                    qi * (qi / pi).ln()
                }
            }
            FKind::Js => {
                let s = pi + qi;
                if s == 0.0 {
                    0.0
                } else {
                    let mut t = 0.0;
                    if pi > 0.0 {
                        t += pi * (2.0 * pi / s).ln();
                    }
                    if qi > 0.0 {
                        t += qi * (2.0 * qi / s).ln();
                    }
                    t
                }
            }
            FKind::LeCam => {
                let s = pi + qi;
                if s == 0.0 {
                    0.0
                } else {
                    (pi - qi) * (pi - qi) / s
                }
            }
            FKind::Ahm => {
                let s = pi + qi;
                if s == 0.0 {
                    0.0
                } else {
                    qi * (qi - pi) / s
                }
            }
        };
    }
    Ok(total)
}

/// Arithmetic-minus-harmonic-mean divergence M_AH(p || q) = sum q(q-p)/(p+q).
pub fn ahm(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    f_div(p, q, FKind::Ahm)
}

/// LeCam divergence Delta(p, q) = sum (p-q)^2/(p+q).
pub fn lecam(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    f_div(p, q, FKind::LeCam)
}

/// Harmonic-mean overlap W(p, q) = sum 2pq/(p+q), in [0, 1].
pub fn harmonic_w(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    check_pair(p, q)?;
    let mut total = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs().iter()) {
        let s = pi + qi;
        if s > 0.0 {
            total += 2.0 * pi * qi / s;
        }
    }
    Ok(total)
}

/// Residuals of the two corollary identities for one distribution pair.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Cor1Report {
    pub ahm_pq: f64,
    pub ahm_qp: f64,
    /// |ahm(p||q) + ahm(q||p) - lecam(p,q)|
    pub residual_sym: f64,
    /// |ahm(p||q) - (1 - W(p,q))|
    pub residual_w: f64,
}

/// Verify the corollary identities and the 0 <= M_AH <= 1 bound for one pair.
pub fn verify_cor1(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<Cor1Report> {
    let ahm_pq = ahm(p, q)?;
    let ahm_qp = ahm(q, p)?;
    let delta = lecam(p, q)?;
    let w = harmonic_w(p, q)?;
    for v in [ahm_pq, ahm_qp] {
        if !(-1e-9..=1.0 + 1e-9).contains(&v) {
            return Err(Error::Numeric(format!(
                "M_AH = {} escapes [0, 1]; the bound proof must be wrong or the inputs invalid",
                v
            )));
        }
    }
    Ok(Cor1Report {
        ahm_pq,
        ahm_qp,
        residual_sym: (ahm_pq + ahm_qp - delta).abs(),
        residual_w: (ahm_pq - (1.0 - w)).abs(),
    })
}

// ---- joints and the optimal discriminator ------------------------------

/// A joint distribution over (x, omega, xhat) with vector-valued omega
/// targets attached to each omega index.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    nx: usize,
    nxh: usize,
    omega_values: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(
        nx: usize,
        nxh: usize,
        omega_values: Vec<Vec<f64>>,
        probs: Vec<f64>,
    ) -> Result<Self> {
        if nx == 0 || nxh == 0 || omega_values.is_empty() {
            return Err(Error::Parameter(
                "joint needs at least one x, omega, and xhat index".into(),
            ));
        }
        let d = omega_values[0].len();
        if d == 0 {
            return Err(Error::Parameter("omega values must have at least one component".into()));
        }
        for w in &omega_values {
            if w.len() != d {
                return Err(Error::Shape(format!(
                    "omega values must share one dimension, got {} and {}",
                    d,
                    w.len()
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parameter("omega values must be finite".into()));
            }
        }
        let expected = nx * omega_values.len() * nxh;
        if probs.len() != expected {
            return Err(Error::Shape(format!(
                "joint table needs {} entries for {}x{}x{}, got {}",
                expected,
                nx,
                omega_values.len(),
                nxh,
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Parameter(
                "joint masses must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Parameter(format!(
                "joint mass must sum to 1 (+/- {:e}), got {}",
                MASS_TOLERANCE, sum
            )));
        }
        Ok(Self {
            nx,
            nxh,
            omega_values,
            probs,
        })
    }

    /// Random joint with cells bounded away from zero and omega targets in
    /// [-1, 1]^d.
    pub fn random(rng: &mut impl Rng, nx: usize, nw: usize, nxh: usize, d: usize) -> Self {
        let omega_values: Vec<Vec<f64>> = (0..nw)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let masses: Vec<f64> = (0..nx * nw * nxh).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = masses.iter().sum();
        let probs = masses.into_iter().map(|m| m / sum).collect();
        Self::new(nx, nxh, omega_values, probs).expect("random joint construction is valid")
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nw(&self) -> usize {
        self.omega_values.len()
    }

    pub fn nxh(&self) -> usize {
        self.nxh
    }

    pub fn omega_dim(&self) -> usize {
        self.omega_values[0].len()
    }

    pub fn omega_values(&self) -> &[Vec<f64>] {
        &self.omega_values
    }

    pub fn mass(&self, x: usize, w: usize, xh: usize) -> f64 {
        self.probs[(x * self.nw() + w) * self.nxh + xh]
    }

    /// Marginal p(x, xhat), summing over omega.
    pub fn marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.nx * self.nxh];
        for x in 0..self.nx {
            for w in 0..self.nw() {
                for xh in 0..self.nxh {
                    out[x * self.nxh + xh] += self.mass(x, w, xh);
                }
            }
        }
        out
    }

    /// Per (x, xhat) cell: sum_w p(x, w, xhat) * omega_w.
    pub fn omega_moment(&self) -> Vec<Vec<f64>> {
        let d = self.omega_dim();
        let mut out = vec![vec![0.0; d]; self.nx * self.nxh];
        for x in 0..self.nx {
            for (w, omega) in self.omega_values.iter().enumerate() {
                for xh in 0..self.nxh {
                    let m = self.mass(x, w, xh);
                    for (acc, &o) in out[x * self.nxh + xh].iter_mut().zip(omega.iter()) {
                        *acc += m * o;
                    }
                }
            }
        }
        out
    }

    pub fn compatible_with(&self, other: &DiscreteJoint) -> Result<()> {
        if self.nx != other.nx
            || self.nxh != other.nxh
            || self.omega_values != other.omega_values
        {
            return Err(Error::Shape(
                "joints must share x/omega/xhat index sets and omega targets".into(),
            ));
        }
        Ok(())
    }
}

/// The closed-form optimal head, one vector per (x, xhat) cell; cells with
/// zero total mass are undefined rather than zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DhatTable {
    nx: usize,
    nxh: usize,
    dim: usize,
    values: Vec<Option<Vec<f64>>>,
}

impl DhatTable {
    pub fn get(&self, x: usize, xh: usize) -> Option<&[f64]> {
        self.values[x * self.nxh + xh].as_deref()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> &[Option<Vec<f64>>] {
        &self.values
    }
}

/// Dhat*(x, xhat) = [sum_w pd*omega - sum_w pg*omega] / [pd(x,xhat) + pg(x,xhat)].
pub fn optimal_selfsup_discriminator(
    joint_data: &DiscreteJoint,
    joint_gen: &DiscreteJoint,
) -> Result<DhatTable> {
    joint_data.compatible_with(joint_gen)?;
    let pd = joint_data.marginal();
    let pg = joint_gen.marginal();
    let md = joint_data.omega_moment();
    let mg = joint_gen.omega_moment();
    let d = joint_data.omega_dim();
    let values = pd
        .iter()
        .zip(pg.iter())
        .zip(md.iter().zip(mg.iter()))
        .map(|((&a, &b), (va, vb))| {
            let mass = a + b;
            if mass == 0.0 {
                None
            } else {
                Some(
                    va.iter()
                        .zip(vb.iter())
                        .map(|(&x, &y)| (x - y) / mass)
                        .collect(),
                )
            }
        })
        .collect();
    Ok(DhatTable {
        nx: joint_data.nx(),
        nxh: joint_data.nxh(),
        dim: d,
        values,
    })
}

// ---- theorem 1 ---------------------------------------------------------

/// Both sides of the constant-target equivalence.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Thm1Report {
    /// sum_cells pg * (||Dhat* - c||^2 - ||Dhat* + c||^2)
    pub lhs: f64,
    /// 4 ||c||^2 * M_AH(p_data || p_G)
    pub rhs: f64,
    pub residual: f64,
}

/// Evaluate the generator-side loss at the closed-form head against the
/// divergence form, for constant targets +/- c over (x, xhat) cells.
pub fn thm1_check(
    p_data: &DiscreteDistribution,
    p_gen: &DiscreteDistribution,
    c: &[f64],
) -> Result<Thm1Report> {
    check_pair(p_data, p_gen)?;
    if c.is_empty() || c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("c must be nonempty and finite".into()));
    }
    let c_sq: f64 = c.iter().map(|v| v * v).sum();
    let mut lhs = 0.0;
    for (&pd, &pg) in p_data.probs().iter().zip(p_gen.probs().iter()) {
        let mass = pd + pg;
        if mass == 0.0 {
            continue;
        }
        let scale = (pd - pg) / mass;
        let mut minus = 0.0;
        let mut plus = 0.0;
        for &ck in c {
            let dk = scale * ck;
            minus += (dk - ck) * (dk - ck);
            plus += (dk + ck) * (dk + ck);
        }
        lhs += pg * (minus - plus);
    }
    let rhs = 4.0 * c_sq * ahm(p_data, p_gen)?;
    Ok(Thm1Report {
        lhs,
        rhs,
        residual: (lhs - rhs).abs(),
    })
}

// ---- proposition 1, empirically ----------------------------------------

/// A pair of joints defining one tabular self-supervision problem.
#[derive(Debug, Clone)]
pub struct TabularProblem {
    pub joint_data: DiscreteJoint,
    pub joint_gen: DiscreteJoint,
}

impl TabularProblem {
    pub fn new(joint_data: DiscreteJoint, joint_gen: DiscreteJoint) -> Result<Self> {
        joint_data.compatible_with(&joint_gen)?;
        Ok(Self {
            joint_data,
            joint_gen,
        })
    }

    pub fn random(rng: &mut impl Rng, nx: usize, nw: usize, nxh: usize, d: usize) -> Self {
        let jd = DiscreteJoint::random(rng, nx, nw, nxh, d);
        let jg = DiscreteJoint::new(
            nx,
            nxh,
            jd.omega_values().to_vec(),
            DiscreteDistribution::random(rng, nx * nw * nxh).probs().to_vec(),
        )
        .unwrap();
        Self::new(jd, jg).unwrap()
    }

    /// The worked single-cell instance: one (x, xhat) cell holds data
    /// mass 0.75 and generator mass 0.25 with scalar target 1, another cell
    /// carries the remainder, so Dhat* = 0.5 there and -0.5 in the remainder.
    pub fn worked_single_cell() -> Self {
        let omega = vec![vec![1.0]];
        let jd = DiscreteJoint::new(2, 1, omega.clone(), vec![0.75, 0.25]).unwrap();
        let jg = DiscreteJoint::new(2, 1, omega, vec![0.25, 0.75]).unwrap();
        Self::new(jd, jg).unwrap()
    }

    /// Expected +/-omega loss of a candidate lookup table.
    fn loss(&self, table: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        let nxh = self.joint_data.nxh();
        for x in 0..self.joint_data.nx() {
            for (w, omega) in self.joint_data.omega_values().iter().enumerate() {
                for xh in 0..nxh {
                    let d = &table[x * nxh + xh];
                    let pd = self.joint_data.mass(x, w, xh);
                    let pg = self.joint_gen.mass(x, w, xh);
                    let mut minus = 0.0;
                    let mut plus = 0.0;
                    for (dk, &ok) in d.iter().zip(omega.iter()) {
                        minus += (dk - ok) * (dk - ok);
                        plus += (dk + ok) * (dk + ok);
                    }
                    total += pd * minus + pg * plus;
                }
            }
        }
        total
    }
}

/// Train a lookup-table head by plain gradient descent on the tabular loss
/// and report the sup-norm gap to the closed form. Raises a non-convergence
/// error when the loss increases 100 steps in a row.
pub fn trained_dhat_agreement(
    problem: &TabularProblem,
    steps: usize,
    lr: f64,
) -> Result<f64> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Parameter(format!("learning rate must be positive, got {}", lr)));
    }
    let closed = optimal_selfsup_discriminator(&problem.joint_data, &problem.joint_gen)?;
    let nx = problem.joint_data.nx();
    let nxh = problem.joint_data.nxh();
    let d = problem.joint_data.omega_dim();
    let mut table = vec![vec![0.0; d]; nx * nxh];
    let mut prev_loss = f64::INFINITY;
    let mut rising = 0usize;
    for step in 0..steps {
        let loss = problem.loss(&table);
        if !loss.is_finite() {
            return Err(Error::NonConvergence(format!(
                "tabular loss became non-finite at step {}",
                step
            )));
        }
        if loss > prev_loss {
            rising += 1;
            if rising >= 100 {
                return Err(Error::NonConvergence(format!(
                    "tabular loss rose for 100 consecutive steps (step {}, loss {})",
                    step, loss
                )));
            }
        } else {
            rising = 0;
        }
        prev_loss = loss;

        let mut grads = vec![vec![0.0; d]; nx * nxh];
        for x in 0..nx {
            for (w, omega) in problem.joint_data.omega_values().iter().enumerate() {
                for xh in 0..nxh {
                    let pd = problem.joint_data.mass(x, w, xh);
                    let pg = problem.joint_gen.mass(x, w, xh);
                    let cell = x * nxh + xh;
                    for k in 0..d {
                        let dk = table[cell][k];
                        grads[cell][k] +=
                            2.0 * pd * (dk - omega[k]) + 2.0 * pg * (dk + omega[k]);
                    }
                }
            }
        }
        for (row, grow) in table.iter_mut().zip(grads.iter()) {
            for (v, g) in row.iter_mut().zip(grow.iter()) {
                *v -= lr * g;
            }
        }
    }

    let mut gap: f64 = 0.0;
    for (cell, closed_cell) in closed.cells().iter().enumerate() {
        if let Some(target) = closed_cell {
            for (v, t) in table[cell].iter().zip(target.iter()) {
                gap = gap.max((v - t).abs());
            }
        }
    }
    Ok(gap)
}

// ---- aggregate verification --------------------------------------------

/// Summary of one full theory-verification run, serialized by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub instances: usize,
    pub cor1_max_residual_sym: f64,
    pub cor1_max_residual_w: f64,
    pub cor1_tolerance: f64,
    pub thm1_max_residual: f64,
    pub thm1_tolerance: f64,
    pub thm1_worked_residual: f64,
    pub thm1_worked_tolerance: f64,
    pub prop1_gap: f64,
    pub prop1_steps: usize,
    pub prop1_tolerance: f64,
    pub pass: bool,
}

/// Run the whole battery: corollary identities on random pairs, the
/// constant-target equivalence on random instances plus the worked one, and
/// descent-vs-closed-form agreement on a random 4x3x4 problem.
pub fn run_verification(instances: usize, seed: u64) -> Result<TheoryReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);

    let mut cor1_max_residual_sym: f64 = 0.0;
    let mut cor1_max_residual_w: f64 = 0.0;
    for _ in 0..instances {
        let cells = rng.gen_range(2..=16);
        let p = DiscreteDistribution::random(&mut rng, cells);
        let q = DiscreteDistribution::random(&mut rng, cells);
        let report = verify_cor1(&p, &q)?;
        cor1_max_residual_sym = cor1_max_residual_sym.max(report.residual_sym);
        cor1_max_residual_w = cor1_max_residual_w.max(report.residual_w);
    }

    let mut thm1_max_residual: f64 = 0.0;
    for _ in 0..instances {
        let cells = rng.gen_range(1..=4);
        let dim = rng.gen_range(1..=4);
        let p = DiscreteDistribution::random(&mut rng, cells);
        let q = DiscreteDistribution::random(&mut rng, cells);
        let c: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let report = thm1_check(&p, &q, &c)?;
        thm1_max_residual = thm1_max_residual.max(report.residual);
    }

    let worked = thm1_check(
        &DiscreteDistribution::new(vec![0.5, 0.5])?,
        &DiscreteDistribution::new(vec![0.25, 0.75])?,
        &[1.0],
    )?;
    let expected = 4.0 / 15.0;
    let thm1_worked_residual = (worked.lhs - expected)
        .abs()
        .max((worked.rhs - expected).abs());

    let prop1_steps = 10_000;
    let problem = TabularProblem::random(&mut rng, 4, 3, 4, 2);
    let prop1_gap = trained_dhat_agreement(&problem, prop1_steps, DEFAULT_DHAT_LR)?;

    let (cor1_tol, thm1_tol, worked_tol, prop1_tol) = (1e-12, 1e-10, 1e-14, 1e-3);
    let pass = cor1_max_residual_sym < cor1_tol
        && cor1_max_residual_w < cor1_tol
        && thm1_max_residual < thm1_tol
        && thm1_worked_residual < worked_tol
        && prop1_gap < prop1_tol;
    Ok(TheoryReport {
        seed,
        instances,
        cor1_max_residual_sym,
        cor1_max_residual_w,
        cor1_tolerance: cor1_tol,
        thm1_max_residual,
        thm1_tolerance: thm1_tol,
        thm1_worked_residual,
        thm1_worked_tolerance: worked_tol,
        prop1_gap,
        prop1_steps,
        prop1_tolerance: prop1_tol,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn dist(v: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn generators_vanish_at_one() {
        for kind in FKind::ALL {
            assert_eq!(generator(kind, 1.0).unwrap(), 0.0, "{}", kind.name());
        }
    }

    #[test]
    fn kl_on_the_worked_pair() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.25, 0.75]);
        let expected = 0.5 * (4.0f64 / 3.0).ln();
        assert!((f_div(&p, &q, FKind::Kl).unwrap() - expected).abs() < 1e-16);
    }

    #[test]
    fn ahm_lecam_w_on_the_worked_pair() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.25, 0.75]);
        assert!((ahm(&p, &q).unwrap() - 1.0 / 15.0).abs() < 1e-15);
        assert!((ahm(&q, &p).unwrap() - 1.0 / 15.0).abs() < 1e-15);
        assert!((lecam(&p, &q).unwrap() - 2.0 / 15.0).abs() < 1e-15);
        assert!((harmonic_w(&p, &q).unwrap() - 14.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn equal_distributions_give_zero_divergence() {
        let p = dist(&[0.2, 0.3, 0.5]);
        for kind in FKind::ALL {
            assert_eq!(f_div(&p, &p, kind).unwrap(), 0.0, "{}", kind.name());
        }
        assert!((harmonic_w(&p, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_supports_hit_the_limit_values() {
        let p = dist(&[1.0, 0.0]);
        let q = dist(&[0.0, 1.0]);
        assert_eq!(ahm(&p, &q).unwrap(), 1.0);
        assert_eq!(lecam(&p, &q).unwrap(), 2.0);
        assert_eq!(harmonic_w(&p, &q).unwrap(), 0.0);
    }

    #[test]
    fn kl_type_kinds_reject_support_violations() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[1.0, 0.0]);
        assert!(matches!(f_div(&p, &q, FKind::Kl), Err(Error::Numeric(_))));
        assert!(matches!(
            f_div(&q, &p, FKind::ReverseKl),
            Err(Error::Numeric(_))
        ));
        // The harmless directions are fine.
        assert!(f_div(&q, &p, FKind::Kl).is_ok());
        assert!(f_div(&p, &q, FKind::ReverseKl).is_ok());
    }

    #[test]
    fn js_is_symmetric_and_bounded() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..100 {
            let cells = rng.gen_range(2..=8);
            let p = DiscreteDistribution::random(&mut rng, cells);
            let q = DiscreteDistribution::random(&mut rng, cells);
            let fwd = f_div(&p, &q, FKind::Js).unwrap();
            let bwd = f_div(&q, &p, FKind::Js).unwrap();
            assert!((fwd - bwd).abs() < 1e-13);
            assert!(fwd >= -1e-15);
            assert!(fwd <= 2.0 * std::f64::consts::LN_2 + 1e-12);
        }
    }

    #[test]
    fn generators_are_convex_on_spot_checks() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for kind in FKind::ALL {
            for _ in 0..1000 {
                let a = rng.gen_range(1e-6..100.0);
                let b = rng.gen_range(1e-6..100.0);
                let mid = generator(kind, 0.5 * (a + b)).unwrap();
                let avg = 0.5 * (generator(kind, a).unwrap() + generator(kind, b).unwrap());
                assert!(mid <= avg + 1e-9, "{} not convex at {} {}", kind.name(), a, b);
            }
        }
    }

    #[test]
    fn tail_behavior_separates_bounded_from_unbounded() {
        let x = 1e6;
        assert!(generator(FKind::Ahm, x).unwrap() > -1.0);
        assert!(generator(FKind::Ahm, x).unwrap() < 0.0);
        assert!(generator(FKind::LeCam, x).unwrap() > 1e5);
        // AHM decreasing in x.
        let f1 = generator(FKind::Ahm, 0.5).unwrap();
        let f2 = generator(FKind::Ahm, 1.0).unwrap();
        let f3 = generator(FKind::Ahm, 2.0).unwrap();
        assert!(f1 > f2 && f2 > f3);
    }

    #[test]
    fn cor1_identities_hold_exactly_on_the_worked_pair() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.25, 0.75]);
        let r = verify_cor1(&p, &q).unwrap();
        assert!(r.residual_sym < 1e-15);
        assert!(r.residual_w < 1e-15);
        let same = verify_cor1(&p, &p).unwrap();
        assert_eq!(same.residual_sym, 0.0);
        assert!(same.residual_w < 1e-12);
    }

    #[test]
    fn cor1_identities_hold_on_random_pairs() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut max_sym: f64 = 0.0;
        let mut max_w: f64 = 0.0;
        for _ in 0..1000 {
            let cells = rng.gen_range(2..=16);
            let p = DiscreteDistribution::random(&mut rng, cells);
            let q = DiscreteDistribution::random(&mut rng, cells);
            let r = verify_cor1(&p, &q).unwrap();
            max_sym = max_sym.max(r.residual_sym);
            max_w = max_w.max(r.residual_w);
        }
        assert!(max_sym < 1e-12, "max symmetric residual {}", max_sym);
        assert!(max_w < 1e-12, "max W residual {}", max_w);
    }

    #[test]
    fn optimal_head_on_the_single_cell_instance() {
        let problem = TabularProblem::worked_single_cell();
        let dhat =
            optimal_selfsup_discriminator(&problem.joint_data, &problem.joint_gen).unwrap();
        assert_eq!(dhat.get(0, 0).unwrap(), &[0.5]);
        assert_eq!(dhat.get(1, 0).unwrap(), &[-0.5]);
    }

    #[test]
    fn optimal_head_is_zero_for_identical_joints() {
        let omega = vec![vec![0.7, -0.3]];
        let j = DiscreteJoint::new(2, 2, omega, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let dhat = optimal_selfsup_discriminator(&j, &j).unwrap();
        for cell in dhat.cells() {
            assert_eq!(cell.as_deref().unwrap(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn zero_mass_cells_are_undefined_not_zero() {
        let omega = vec![vec![1.0]];
        let jd = DiscreteJoint::new(2, 1, omega.clone(), vec![1.0, 0.0]).unwrap();
        let jg = DiscreteJoint::new(2, 1, omega, vec![1.0, 0.0]).unwrap();
        let dhat = optimal_selfsup_discriminator(&jd, &jg).unwrap();
        assert!(dhat.get(0, 0).is_some());
        assert!(dhat.get(1, 0).is_none());
    }

    #[test]
    fn mismatched_joints_are_rejected() {
        let ja = DiscreteJoint::new(1, 1, vec![vec![1.0]], vec![1.0]).unwrap();
        let jb = DiscreteJoint::new(1, 1, vec![vec![0.5]], vec![1.0]).unwrap();
        assert!(optimal_selfsup_discriminator(&ja, &jb).is_err());
    }

    #[test]
    fn thm1_worked_instance_matches_four_fifteenths() {
        let r = thm1_check(
            &dist(&[0.5, 0.5]),
            &dist(&[0.25, 0.75]),
            &[1.0],
        )
        .unwrap();
        let expected = 4.0 / 15.0;
        assert!((r.lhs - expected).abs() < 1e-14, "lhs {}", r.lhs);
        assert!((r.rhs - expected).abs() < 1e-14, "rhs {}", r.rhs);
        assert!(r.residual < 1e-14);
    }

    #[test]
    fn thm1_equal_and_disjoint_edge_cases() {
        let p = dist(&[0.4, 0.6]);
        let eq = thm1_check(&p, &p, &[1.0, -0.5]).unwrap();
        assert_eq!(eq.lhs, 0.0);
        assert_eq!(eq.rhs, 0.0);

        let disjoint = thm1_check(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0]), &[1.0]).unwrap();
        assert_eq!(disjoint.lhs, 4.0);
        assert_eq!(disjoint.rhs, 4.0);
    }

    #[test]
    fn thm1_residual_small_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let mut max_res: f64 = 0.0;
        for _ in 0..1000 {
            let cells = rng.gen_range(1..=4);
            let dim = rng.gen_range(1..=4);
            let p = DiscreteDistribution::random(&mut rng, cells);
            let q = DiscreteDistribution::random(&mut rng, cells);
            let c: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            max_res = max_res.max(thm1_check(&p, &q, &c).unwrap().residual);
        }
        assert!(max_res < 1e-10, "max residual {}", max_res);
    }

    #[test]
    fn descent_reaches_the_closed_form_on_the_single_cell() {
        let problem = TabularProblem::worked_single_cell();
        let gap = trained_dhat_agreement(&problem, 10_000, DEFAULT_DHAT_LR).unwrap();
        assert!(gap < 1e-3, "gap {}", gap);
    }

    #[test]
    fn descent_reaches_the_closed_form_on_a_random_4x3x4_problem() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let problem = TabularProblem::random(&mut rng, 4, 3, 4, 2);
        let gap = trained_dhat_agreement(&problem, 10_000, DEFAULT_DHAT_LR).unwrap();
        assert!(gap < 1e-3, "gap {}", gap);
    }

    #[test]
    fn descent_on_a_symmetric_problem_stays_at_zero() {
        let omega = vec![vec![0.9], vec![-0.4]];
        let j = DiscreteJoint::new(2, 1, omega, vec![0.3, 0.1, 0.25, 0.35]).unwrap();
        let problem = TabularProblem::new(j.clone(), j).unwrap();
        let gap = trained_dhat_agreement(&problem, 5_000, DEFAULT_DHAT_LR).unwrap();
        assert!(gap < 1e-6, "gap {}", gap);
    }

    #[test]
    fn absurd_learning_rate_raises_non_convergence() {
        let problem = TabularProblem::worked_single_cell();
        let err = trained_dhat_agreement(&problem, 10_000, 50.0);
        assert!(matches!(err, Err(Error::NonConvergence(_))));
    }

    #[test]
    fn distribution_and_joint_validation() {
        assert!(DiscreteDistribution::new(vec![0.5, -0.5]).is_err());
        assert!(DiscreteDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(DiscreteDistribution::new(vec![f64::NAN]).is_err());
        assert!(DiscreteDistribution::from_masses(&[2.0, 6.0]).is_ok());

        assert!(DiscreteJoint::new(1, 1, vec![vec![1.0]], vec![0.9]).is_err());
        assert!(DiscreteJoint::new(1, 1, vec![vec![1.0], vec![1.0, 2.0]], vec![0.5, 0.5]).is_err());
        assert!(DiscreteJoint::new(2, 1, vec![vec![1.0]], vec![0.5]).is_err());
    }

    #[test]
    fn full_verification_passes_on_a_small_budget() {
        let report = run_verification(50, 123).unwrap();
        assert!(report.pass, "{:?}", report);
        assert!(report.cor1_max_residual_sym < 1e-12);
        assert!(report.thm1_max_residual < 1e-10);
        assert!(report.prop1_gap < 1e-3);
    }
}
