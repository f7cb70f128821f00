//! Monte Carlo distortion measurements and identity checks.
//!
//! Every randomized task draws from a stream keyed by `(seed, label,
//! indices)`, so reports are reproducible regardless of thread count.
//!
//! QRIP residuals are measured against the linear distance of the same pair,
//! `lin = (μ^p / m) ‖Φ(x − x')‖_p^p`. The multiplicative part of the
//! distortion (`lin` versus `‖x − x'‖_q^p`) is summarized separately by
//! `eps_l_hat`, so `rho` isolates what quantization adds on top of the
//! linear embedding.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::embeddings::{estimate_distance, CodeBlock, DistanceMode, Layout};
use crate::error::{Error, Result};
use crate::linops::{BuildOptions, Family, LinOp, RipProfile};
use crate::modelsets::{lq_norm, ModelSet};
use crate::quantizer::{sample_dither, soft_distance, soft_distance_strict, QuantConfig, SoftParam};
use crate::rng::stream;

/// Trials per parallel chunk in scalar Monte Carlo loops.
const CHUNK: u64 = 1 << 16;

/// Exponent `p_E` of the distance a mode estimates.
pub fn mode_power(mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::L1 => 1.0,
        DistanceMode::L2sq | DistanceMode::Circ => 2.0,
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn power_mean(y: &[f64], p: f64) -> f64 {
    let sum: f64 = if p == 1.0 {
        y.iter().map(|v| v.abs()).sum()
    } else if p == 2.0 {
        y.iter().map(|v| v * v).sum()
    } else {
        y.iter().map(|v| v.abs().powf(p)).sum()
    };
    sum / y.len() as f64
}

/// Outcome of a Monte Carlo mean check.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanReport {
    pub trials: u64,
    pub mean: f64,
    pub target: f64,
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `E_ξ d⁰(a + ξ, a' + ξ) = |a − a'|`, checked to `4 (δ/2) / √trials`.
pub fn check_dither_identity(a: f64, a_prime: f64, cfg: &QuantConfig, trials: u64, seed: u64) -> Result<MeanReport> {
    if trials < 10_000 {
        return Err(Error::param("trials", format!("need at least 10^4, got {trials}")));
    }
    let sum = scalar_mc(trials, seed, "dither-identity", |xi| {
        soft_distance(a + xi, a_prime + xi, SoftParam::ZERO, cfg)
    }, cfg)?;
    let mean = sum / trials as f64;
    let target = (a - a_prime).abs();
    let tolerance = 4.0 * (cfg.delta() / 2.0) / (trials as f64).sqrt();
    let deviation = (mean - target).abs();
    Ok(MeanReport { trials, mean, target, deviation, tolerance, pass: deviation <= tolerance })
}

/// `E_ξ (d⁰(a + ξ, a' + ξ))² = δ |a − a'|` for `|a − a'| < δ`, checked to 1%
/// relative.
pub fn check_small_gap_identity(a: f64, a_prime: f64, cfg: &QuantConfig, trials: u64, seed: u64) -> Result<MeanReport> {
    let gap = (a - a_prime).abs();
    if !(gap > 0.0 && gap < cfg.delta()) {
        return Err(Error::param("a, a'", format!("need 0 < |a - a'| < δ, got {gap}")));
    }
    if trials < 10_000 {
        return Err(Error::param("trials", format!("need at least 10^4, got {trials}")));
    }
    let sum = scalar_mc(trials, seed, "small-gap", |xi| {
        soft_distance(a + xi, a_prime + xi, SoftParam::ZERO, cfg).map(|d| d * d)
    }, cfg)?;
    let mean = sum / trials as f64;
    let target = cfg.delta() * gap;
    let deviation = (mean - target).abs();
    let tolerance = 0.01 * target;
    Ok(MeanReport { trials, mean, target, deviation, tolerance, pass: deviation <= tolerance })
}

fn scalar_mc(
    trials: u64,
    seed: u64,
    label: &str,
    f: impl Fn(f64) -> Result<f64> + Sync,
    cfg: &QuantConfig,
) -> Result<f64> {
    let chunks = trials.div_ceil(CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, label, &[c]);
            let count = CHUNK.min(trials - c * CHUNK);
            let mut acc = 0.0;
            for _ in 0..count {
                acc += f(rng.random_range(0.0..cfg.delta()))?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    Ok(partial.iter().sum())
}

/// Violation counts of the deterministic soft-distance inequalities.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SoftSuiteReport {
    pub tuples: u64,
    /// `|d^t − d^s| ≤ 4(δ + |t − s|)`
    pub shift: u64,
    /// `|d^t − |a − a'|| ≤ 4(δ + |t|)`
    pub distance: u64,
    /// `d^{t+ε}(a, a') ≤ d^t(a + r, a' + r') ≤ d^{t−ε}(a, a')` for `|r|, |r'| ≤ ε`
    pub sandwich: u64,
    /// `t ≤ t'` implies `d^{t'} ≤ d^t`
    pub monotone: u64,
}

impl SoftSuiteReport {
    pub fn violations(&self) -> u64 {
        self.shift + self.distance + self.sandwich + self.monotone
    }

    fn merge(mut self, other: &SoftSuiteReport) -> Self {
        self.tuples += other.tuples;
        self.shift += other.shift;
        self.distance += other.distance;
        self.sandwich += other.sandwich;
        self.monotone += other.monotone;
        self
    }
}

fn soft_tuple<R: Rng + ?Sized>(a: f64, a_prime: f64, cfg: &QuantConfig, rng: &mut R) -> Result<SoftSuiteReport> {
    let delta = cfg.delta();
    let draw_t = |rng: &mut R| {
        // mix of exact zero and values on both sides of it
        if rng.random_bool(0.1) {
            0.0
        } else {
            rng.random_range(-1.5 * delta..1.5 * delta)
        }
    };
    let t = draw_t(rng);
    let s = draw_t(rng);
    let eps = rng.random_range(0.0..delta);
    let r = rng.random_range(-eps..=eps);
    let r_prime = rng.random_range(-eps..=eps);
    let d = |x: f64, y: f64, t: f64| soft_distance(x, y, SoftParam::new(t)?, cfg);
    let ds = |x: f64, y: f64, t: f64| soft_distance_strict(x, y, SoftParam::new(t)?, cfg);

    let dt = d(a, a_prime, t)?;
    let dsv = d(a, a_prime, s)?;
    let mut rep = SoftSuiteReport { tuples: 1, ..Default::default() };
    let slack = 1e-12 * delta;
    if (dt - dsv).abs() > 4.0 * (delta + (t - s).abs()) + slack {
        rep.shift += 1;
    }
    if (dt - (a - a_prime).abs()).abs() > 4.0 * (delta + t.abs()) + slack {
        rep.distance += 1;
    }
    let lower = ds(a, a_prime, t + eps)?;
    let middle = ds(a + r, a_prime + r_prime, t)?;
    let upper = ds(a, a_prime, t - eps)?;
    if !(lower <= middle && middle <= upper) {
        rep.sandwich += 1;
    }
    let (lo, hi) = if t <= s { (t, s) } else { (s, t) };
    if d(a, a_prime, hi)? > d(a, a_prime, lo)? {
        rep.monotone += 1;
    }
    Ok(rep)
}

/// Randomized scalar tuples `(a, a', t, s, ε, r, r', δ)` checked against the
/// deterministic soft-distance inequalities.
pub fn check_soft_distance_suite(tuples: u64, seed: u64) -> Result<SoftSuiteReport> {
    let chunks = tuples.div_ceil(CHUNK);
    let reports: Vec<SoftSuiteReport> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, "soft-suite", &[c]);
            let mut rep = SoftSuiteReport::default();
            for _ in 0..CHUNK.min(tuples - c * CHUNK) {
                let cfg = QuantConfig::new(10f64.powf(rng.random_range(-2.0..1.0)))?;
                let scale = 10.0 * cfg.delta();
                let a = rng.random_range(-scale..scale);
                // a quarter of the tuples sit exactly on the lattice
                let a = if rng.random_bool(0.25) { (a / cfg.delta()).round() * cfg.delta() } else { a };
                let a_prime = if rng.random_bool(0.1) { a } else { rng.random_range(-scale..scale) };
                rep = rep.merge(&soft_tuple(a, a_prime, &cfg, &mut rng)?);
            }
            Ok(rep)
        })
        .collect::<Result<_>>()?;
    Ok(reports.iter().fold(SoftSuiteReport::default(), |acc, r| acc.merge(r)))
}

/// The soft-distance inequalities on dithered measurements `Φx + ξ`,
/// `Φx' + ξ` of pairs drawn from `set`, one random tuple per coordinate.
pub fn check_soft_lemmas_embedded(
    op: &LinOp,
    set: &ModelSet,
    cfg: &QuantConfig,
    pairs: u64,
    seed: u64,
) -> Result<SoftSuiteReport> {
    let reports: Vec<SoftSuiteReport> = (0..pairs)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream(seed, "soft-embedded", &[j]);
            let dist = rng.random_range(0.0..=2.0 * set.radius());
            let (x, x_prime) = set.sample_pair(dist, &mut rng)?;
            let xi = sample_dither(op.m(), cfg, &mut rng)?;
            let y = op.matvec(&x)?;
            let y_prime = op.matvec(&x_prime)?;
            let mut rep = SoftSuiteReport::default();
            for i in 0..op.m() {
                rep = rep.merge(&soft_tuple(y[i] + xi[i], y_prime[i] + xi[i], cfg, &mut rng)?);
            }
            Ok(rep)
        })
        .collect::<Result<_>>()?;
    Ok(reports.iter().fold(SoftSuiteReport::default(), |acc, r| acc.merge(r)))
}

/// Empirical RIP constant over sampled difference vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RipEstimate {
    /// `max |(μ^p/m)‖Φu‖_p^p − 1|` over unit `u = (x − x')/‖x − x'‖_q`.
    pub eps_hat: f64,
    pub values: Vec<f64>,
}

/// Statistical lower bound on the `(ℓp, ℓq)`-RIP constant of `op` over `set − set`.
pub fn estimate_rip(op: &LinOp, set: &ModelSet, p: f64, q: f64, pairs: usize, seed: u64) -> Result<RipEstimate> {
    if pairs < 50 {
        return Err(Error::param("pairs", format!("need at least 50, got {pairs}")));
    }
    check_profile(op, RipProfile { p, q })?;
    Error::check_len("operator columns", set.dim(), op.n())?;
    let set = set.clone().with_q(q)?;
    let mu_p = op.mu().powf(p);
    let values: Vec<f64> = (0..pairs as u64)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream(seed, "rip", &[j]);
            let (x, x_prime) = set.sample_pair(set.radius(), &mut rng)?;
            let mut u = sub(&x, &x_prime);
            let norm = lq_norm(&u, q);
            u.iter_mut().for_each(|v| *v /= norm);
            Ok(mu_p * power_mean(&op.matvec(&u)?, p))
        })
        .collect::<Result<_>>()?;
    let eps_hat = values.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    Ok(RipEstimate { eps_hat, values })
}

fn check_profile(op: &LinOp, want: RipProfile) -> Result<()> {
    if op.profile() != want {
        return Err(Error::Incompatible(format!(
            "operator is normalized for {}, requested {want}",
            op.profile()
        )));
    }
    Ok(())
}

/// Number of random `x` violating `(1/d)‖Ax‖₁ ≤ ‖x‖₁` for an expander `A`.
pub fn check_expander_upper_bound(op: &LinOp, samples: u64, seed: u64) -> Result<u64> {
    let d = op
        .degree()
        .ok_or_else(|| Error::Unsupported(format!("{} is not an expander", op.family())))? as f64;
    let n = op.n();
    let violations: Vec<u64> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, "expander-bound", &[k]);
            // random sparsity level, heavy-tailed magnitudes
            let density = rng.random_range(0.0..1.0f64).max(1.0 / n as f64);
            let x: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.random_bool(density) {
                        let g: f64 = rng.sample(StandardNormal);
                        g * g.exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let lhs = op.matvec(&x)?.iter().map(|v| v.abs()).sum::<f64>() / d;
            let rhs = lq_norm(&x, 1.0);
            Ok(u64::from(lhs > rhs * (1.0 + 1e-12)))
        })
        .collect::<Result<_>>()?;
    Ok(violations.iter().sum())
}

/// Largest number of distinct indices any code coordinate takes over
/// `samples` points of `set` embedded with one fixed dither.
pub fn check_one_bit(op: &LinOp, set: &ModelSet, cfg: &QuantConfig, samples: usize, seed: u64) -> Result<usize> {
    let xi = sample_dither(op.m(), cfg, &mut stream(seed, "one-bit-dither", &[]))?;
    let codes: Vec<CodeBlock> = (0..samples as u64)
        .into_par_iter()
        .map(|k| {
            let x = set.sample_point(&mut stream(seed, "one-bit-point", &[k]));
            crate::embeddings::embed(op, &x, &xi, cfg)
        })
        .collect::<Result<_>>()?;
    let mut worst = 0;
    for i in 0..op.m() {
        let mut seen: Vec<i64> = codes.iter().map(|c| c.index(i, 0)).collect();
        seen.sort_unstable();
        seen.dedup();
        worst = worst.max(seen.len());
    }
    Ok(worst)
}

/// Pre-quantization values and `κ` for an operator; rank-one projections
/// are rescaled by their `κ` before quantization.
fn measure(op: &LinOp, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let kappa = op.as_rop().map_or(1.0, |r| r.kappa());
    let mut y = op.matvec(x)?;
    if kappa != 1.0 {
        y.iter_mut().for_each(|v| *v *= kappa);
    }
    Ok((y, kappa))
}

fn codes_from(y: &[f64], dither: &[f64], layout: Layout, cfg: &QuantConfig) -> Result<CodeBlock> {
    let codes = match layout {
        Layout::Single => y.iter().zip(dither).map(|(a, b)| cfg.index(a + b)).collect::<Result<Vec<_>>>()?,
        Layout::Bidither => y
            .iter()
            .zip(dither.chunks_exact(2))
            .flat_map(|(a, xi)| [cfg.index(a + xi[0]), cfg.index(a + xi[1])])
            .collect::<Result<Vec<_>>>()?,
    };
    CodeBlock::new(layout, cfg.delta(), codes, 0, 0)
}

/// Raw estimate between two measurement vectors under one dither draw.
fn estimate_once(
    y: &[f64],
    y_prime: &[f64],
    dither: &[f64],
    mode: DistanceMode,
    cfg: &QuantConfig,
) -> Result<f64> {
    let layout = mode.layout();
    estimate_distance(&codes_from(y, dither, layout, cfg)?, &codes_from(y_prime, dither, layout, cfg)?, mode)
}

fn draw_dither(m: usize, mode: DistanceMode, cfg: &QuantConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
    sample_dither(m * mode.layout().cols(), cfg, rng)
}

/// Monte Carlo mean of the raw code-domain estimate for a fixed pair over
/// fresh dithers, against its closed-form expectation:
///
/// * `l1`: `(1/m) ‖Φ(x − x')‖₁`
/// * `l2sq`: `(δ/m) ‖Φ(x − x')‖₁`, valid when `max_i |Φ(x − x')_i| < δ`
/// * `circ`: `(1/m) ‖Φ(x − x')‖₂²`
///
/// Passes when the deviation is within four standard errors.
pub fn check_estimator_mean(
    op: &LinOp,
    x: &[f64],
    x_prime: &[f64],
    mode: DistanceMode,
    cfg: &QuantConfig,
    trials: u64,
    seed: u64,
) -> Result<MeanReport> {
    if trials < 2 {
        return Err(Error::param("trials", "need at least 2"));
    }
    let (y, _) = measure(op, x)?;
    let (y_prime, _) = measure(op, x_prime)?;
    let diff = sub(&y, &y_prime);
    let target = match mode {
        DistanceMode::L1 => power_mean(&diff, 1.0),
        DistanceMode::Circ => power_mean(&diff, 2.0),
        DistanceMode::L2sq => {
            let peak = diff.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if peak >= cfg.delta() {
                return Err(Error::Unsupported(format!(
                    "l2sq mean has a closed form only when max |Φ(x - x')| < δ, got {peak}"
                )));
            }
            cfg.delta() * power_mean(&diff, 1.0)
        }
    };
    let values: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, "estimator-mean", &[k]);
            let dither = draw_dither(op.m(), mode, cfg, &mut rng)?;
            estimate_once(&y, &y_prime, &dither, mode, cfg)
        })
        .collect::<Result<_>>()?;
    let (mean, stderr) = mean_and_stderr(&values);
    let deviation = (mean - target).abs();
    let tolerance = 4.0 * stderr;
    let pass = if stderr == 0.0 { deviation <= 1e-12 * target.abs().max(1e-300) } else { deviation <= tolerance };
    Ok(MeanReport { trials, mean, target, deviation, tolerance, pass })
}

/// One embedded pair under one dither draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionRecord {
    pub m: usize,
    pub delta: f64,
    pub mode: DistanceMode,
    /// `‖x − x'‖_q`.
    pub true_dist: f64,
    /// Code-domain estimate in units of `‖x − x'‖_q^{p_E}`.
    pub est_dist: f64,
    /// `(μ^p/m) ‖Φ(x − x')‖_p^p`, the unquantized counterpart of `est_dist`.
    pub lin_dist: f64,
    /// `(est − true^{p_E}) / true^{p_E}`; `NaN` when `true_dist = 0`.
    pub rel_err: f64,
    pub pair_id: u64,
    pub trial_id: u64,
    pub seed: u64,
}

/// Residual summary at one grid distance.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoEntry {
    pub dist: f64,
    /// `max |est − lin|` over all pairs and dithers.
    pub rho_max: f64,
    pub rho_median: f64,
    /// `max (|est − s^{p_E}| − ε̂_L s^{p_E})₊`, residual against the nominal distance.
    pub rho_nominal_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QripFit {
    pub m: usize,
    pub mode: DistanceMode,
    /// Median `|rel_err|` at the largest grid distance.
    pub eps_l_hat: f64,
    pub rho: Vec<RhoEntry>,
    /// Median `|est − lin|` over every record.
    pub rho_pooled_median: f64,
    pub decay_slope: Option<f64>,
}

impl QripFit {
    /// `max_s ρ̂(s) / min_s ρ̂(s)` over the grid.
    pub fn rho_ratio(&self) -> f64 {
        let max = self.rho.iter().map(|r| r.rho_max).fold(f64::NEG_INFINITY, f64::max);
        let min = self.rho.iter().map(|r| r.rho_max).fold(f64::INFINITY, f64::min);
        max / min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QripConfig {
    pub mode: DistanceMode,
    pub grid: Vec<f64>,
    pub pairs_per_distance: usize,
    pub dithers_per_pair: usize,
    pub seed: u64,
}

/// Sweeps `‖x − x'‖_q` over the grid, embedding each pair under fresh dithers.
/// Records are ordered by `(pair_id, trial_id)`.
pub fn measure_qrip(op: &LinOp, set: &ModelSet, cfg: &QuantConfig, qc: &QripConfig) -> Result<(Vec<DistortionRecord>, QripFit)> {
    let p_e = mode_power(qc.mode);
    if op.profile().p != p_e {
        return Err(Error::Incompatible(format!(
            "mode {} estimates an l{p_e} quantity; operator is normalized for {}",
            qc.mode,
            op.profile()
        )));
    }
    if op.profile().q != set.q() {
        return Err(Error::Incompatible(format!(
            "operator is normalized for {}, model distances use l{}",
            op.profile(),
            set.q()
        )));
    }
    Error::check_len("operator columns", set.dim(), op.n())?;
    if qc.grid.is_empty() || qc.grid.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::param("grid", "distances must be finite and > 0"));
    }
    if qc.pairs_per_distance == 0 || qc.dithers_per_pair == 0 {
        return Err(Error::param("pairs/dithers", "must be >= 1"));
    }
    if let Some(&s) = qc.grid.iter().find(|&&s| s > 2.0 * set.radius()) {
        return Err(Error::param(
            "grid",
            format!("distance {s} exceeds the model diameter {}", 2.0 * set.radius()),
        ));
    }
    let mu_p = op.mu().powf(p_e);
    let (m, pairs, dithers) = (op.m(), qc.pairs_per_distance as u64, qc.dithers_per_pair as u64);
    let tasks: Vec<(usize, u64)> = (0..qc.grid.len()).flat_map(|g| (0..pairs).map(move |j| (g, j))).collect();
    let per_pair: Vec<Vec<DistortionRecord>> = tasks
        .par_iter()
        .map(|&(g, j)| {
            let mut rng = stream(qc.seed, "pair", &[g as u64, j]);
            let (x, x_prime) = set.sample_pair(qc.grid[g], &mut rng)?;
            let true_dist = lq_norm(&sub(&x, &x_prime), set.q());
            let (y, kappa) = measure(op, &x)?;
            let (y_prime, _) = measure(op, &x_prime)?;
            let lin = mu_p * power_mean(&op.matvec(&sub(&x, &x_prime))?, p_e);
            let unit = mu_p / kappa.powf(p_e);
            let nominal = true_dist.powf(p_e);
            (0..dithers)
                .map(|k| {
                    let mut drng = stream(qc.seed, "dither", &[g as u64, j, k]);
                    let dither = draw_dither(m, qc.mode, cfg, &mut drng)?;
                    let est = unit * estimate_once(&y, &y_prime, &dither, qc.mode, cfg)?;
                    Ok(DistortionRecord {
                        m,
                        delta: cfg.delta(),
                        mode: qc.mode,
                        true_dist,
                        est_dist: est,
                        lin_dist: lin,
                        rel_err: if nominal > 0.0 { (est - nominal) / nominal } else { f64::NAN },
                        pair_id: g as u64 * pairs + j,
                        trial_id: k,
                        seed: qc.seed,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let records: Vec<DistortionRecord> = per_pair.into_iter().flatten().collect();
    let fit = fit_qrip(&records, qc, m);
    Ok((records, fit))
}

fn fit_qrip(records: &[DistortionRecord], qc: &QripConfig, m: usize) -> QripFit {
    let per_grid = (qc.pairs_per_distance * qc.dithers_per_pair).max(1);
    let groups: Vec<&[DistortionRecord]> = records.chunks(per_grid).collect();
    let p_e = mode_power(qc.mode);
    let last = qc
        .grid
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    let mut rel: Vec<f64> = groups[last].iter().map(|r| r.rel_err.abs()).collect();
    let eps_l_hat = median(&mut rel);
    let rho = groups
        .iter()
        .zip(&qc.grid)
        .map(|(recs, &dist)| {
            let mut res: Vec<f64> = recs.iter().map(|r| (r.est_dist - r.lin_dist).abs()).collect();
            let rho_max = res.iter().copied().fold(0.0, f64::max);
            let rho_median = median(&mut res);
            let rho_nominal_max = recs
                .iter()
                .map(|r| {
                    let nominal = r.true_dist.powf(p_e);
                    ((r.est_dist - nominal).abs() - eps_l_hat * nominal).max(0.0)
                })
                .fold(0.0, f64::max);
            RhoEntry { dist, rho_max, rho_median, rho_nominal_max }
        })
        .collect();
    let mut all: Vec<f64> = records.iter().map(|r| (r.est_dist - r.lin_dist).abs()).collect();
    QripFit {
        m,
        mode: qc.mode,
        eps_l_hat,
        rho,
        rho_pooled_median: median(&mut all),
        decay_slope: None,
    }
}

/// Least-squares slope of `ln ρ` against `ln m`.
pub fn fit_decay(points: &[(f64, f64)]) -> Result<f64> {
    let mut ms: Vec<f64> = points.iter().map(|p| p.0).collect();
    ms.sort_by(f64::total_cmp);
    ms.dedup();
    if ms.len() < 4 {
        return Err(Error::param("points", format!("need at least 4 distinct m, got {}", ms.len())));
    }
    if points.iter().any(|&(m, r)| !(m > 0.0 && r > 0.0 && r.is_finite())) {
        return Err(Error::Domain("decay fit needs positive m and residuals".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    Ok(ls_slope(&xs, &ys))
}

fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Decay slope across `measure_qrip` runs at different `m`, from each run's
/// pooled median residual. Sets `decay_slope` on every fit.
pub fn fit_decay_runs(fits: &mut [QripFit]) -> Result<f64> {
    let points: Vec<(f64, f64)> = fits.iter().map(|f| (f.m as f64, f.rho_pooled_median)).collect();
    let slope = fit_decay(&points)?;
    for f in fits.iter_mut() {
        f.decay_slope = Some(slope);
    }
    Ok(slope)
}

/// How operators are rebuilt at each `m` in a sweep.
#[derive(Debug, Clone)]
pub struct OpSpec {
    pub family: Family,
    pub n: usize,
    pub seed: u64,
    pub options: BuildOptions,
}

impl OpSpec {
    pub fn build(&self, m: usize) -> Result<LinOp> {
        LinOp::build(self.family, m, self.n, self.seed, &self.options)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationReport {
    /// `(m, mean, standard deviation)` of the circ estimate over fresh dithers.
    pub per_m: Vec<(usize, f64, f64)>,
    /// Standard deviation ratio between consecutive entries.
    pub ratios: Vec<f64>,
    pub slope: f64,
    pub pass: bool,
}

/// Spread of the bi-dithered estimate for one fixed pair as `m` grows.
/// Passes when the log-log slope of the standard deviation lies in
/// `[−0.75, −0.25]`.
#[allow(clippy::too_many_arguments)]
pub fn check_product_concentration(
    spec: &OpSpec,
    set: &ModelSet,
    distance: f64,
    cfg: &QuantConfig,
    m_list: &[usize],
    trials: u64,
    seed: u64,
) -> Result<ConcentrationReport> {
    if m_list.len() < 2 {
        return Err(Error::param("m_list", "need at least two values of m"));
    }
    if trials < 2 {
        return Err(Error::param("trials", "need at least 2"));
    }
    let (x, x_prime) = set.sample_pair(distance, &mut stream(seed, "concentration-pair", &[]))?;
    let mut per_m = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let op = spec.build(m)?;
        let (y, _) = measure(&op, &x)?;
        let (y_prime, _) = measure(&op, &x_prime)?;
        let values: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|k| {
                let mut rng = stream(seed, "concentration", &[m as u64, k]);
                let dither = draw_dither(m, DistanceMode::Circ, cfg, &mut rng)?;
                estimate_once(&y, &y_prime, &dither, DistanceMode::Circ, cfg)
            })
            .collect::<Result<_>>()?;
        let (mean, stderr) = mean_and_stderr(&values);
        per_m.push((m, mean, stderr * (trials as f64).sqrt()));
    }
    let ratios = per_m.windows(2).map(|w| w[1].2 / w[0].2).collect();
    let slope = if per_m.iter().all(|e| e.2 > 0.0) {
        let xs: Vec<f64> = per_m.iter().map(|e| (e.0 as f64).ln()).collect();
        let ys: Vec<f64> = per_m.iter().map(|e| e.2.ln()).collect();
        ls_slope(&xs, &ys)
    } else {
        f64::NAN
    };
    let pass = (-0.75..=-0.25).contains(&slope);
    Ok(ConcentrationReport { per_m, ratios, slope, pass })
}

/// Codes are unchanged when `x`, the dither and `δ` are all scaled by 2, so
/// every estimate scales by exactly `2^{p_E}`.
pub fn check_homogeneity(
    op: &LinOp,
    x: &[f64],
    x_prime: &[f64],
    mode: DistanceMode,
    cfg: &QuantConfig,
    seed: u64,
) -> Result<bool> {
    let dither = draw_dither(op.m(), mode, cfg, &mut stream(seed, "homogeneity", &[]))?;
    let est = |scale: f64| -> Result<f64> {
        let c = QuantConfig::new(cfg.delta() * scale)?;
        let xs: Vec<f64> = x.iter().map(|v| v * scale).collect();
        let xps: Vec<f64> = x_prime.iter().map(|v| v * scale).collect();
        let d: Vec<f64> = dither.iter().map(|v| v * scale).collect();
        estimate_once(&op.matvec(&xs)?, &op.matvec(&xps)?, &d, mode, &c)
    };
    let base = est(1.0)?;
    let doubled = est(2.0)?;
    Ok(doubled == base * 2f64.powf(mode_power(mode)))
}

/// One line of a self-test report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// Small, fast battery of every identity check. Deterministic given `seed`.
pub fn selftest(seed: u64) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    let mut push = |name: &'static str, pass: bool, detail: String| lines.push(CheckLine { name, pass, detail });
    let cfg = QuantConfig::new(1.0)?;

    let r = check_dither_identity(0.0, 0.37, &cfg, 100_000, seed)?;
    push("dither_identity", r.pass, format!("mean={:.6} target={:.6} tol={:.6}", r.mean, r.target, r.tolerance));

    let r = check_small_gap_identity(0.1, 0.6, &cfg, 200_000, seed)?;
    push("small_gap_identity", r.pass, format!("mean={:.6} target={:.6} tol={:.6}", r.mean, r.target, r.tolerance));

    let r = check_soft_distance_suite(20_000, seed)?;
    push("soft_distance_suite", r.violations() == 0, format!("tuples={} violations={}", r.tuples, r.violations()));

    let set = ModelSet::sparse(4, 64)?.with_radius(5.0)?;
    let op = LinOp::build(Family::Gaussian, 256, 64, seed, &BuildOptions::default())?;
    let r = check_soft_lemmas_embedded(&op, &set, &cfg, 20, seed)?;
    push("soft_lemmas_embedded", r.violations() == 0, format!("tuples={} violations={}", r.tuples, r.violations()));

    let (x, x_prime) = set.sample_pair(0.5, &mut stream(seed, "selftest-pair", &[]))?;
    for mode in [DistanceMode::L1, DistanceMode::Circ] {
        let r = check_estimator_mean(&op, &x, &x_prime, mode, &cfg, 2_000, seed)?;
        push(
            if mode == DistanceMode::L1 { "l1_unbiased" } else { "circ_unbiased" },
            r.pass,
            format!("mean={:.6} target={:.6} tol={:.6}", r.mean, r.target, r.tolerance),
        );
    }
    let (xs, xps) = set.sample_pair(0.05, &mut stream(seed, "selftest-small-pair", &[]))?;
    let r = check_estimator_mean(&op, &xs, &xps, DistanceMode::L2sq, &cfg, 2_000, seed)?;
    push("l2sq_small_gap_mean", r.pass, format!("mean={:.6} target={:.6} tol={:.6}", r.mean, r.target, r.tolerance));

    let all_modes = [DistanceMode::L1, DistanceMode::L2sq, DistanceMode::Circ];
    let homogeneous = all_modes
        .iter()
        .map(|&mode| check_homogeneity(&op, &x, &x_prime, mode, &cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    push("homogeneity", homogeneous.iter().all(|&h| h), format!("modes={}", homogeneous.len()));

    let l2 = LinOp::build(Family::Gaussian, 256, 64, seed, &BuildOptions::default())?;
    let r = estimate_rip(&l2, &set, 2.0, 2.0, 50, seed)?;
    push("rip_l2_l2", r.eps_hat <= 0.5, format!("eps_hat={:.6}", r.eps_hat));

    let exp = LinOp::build(Family::Expander, 64, 64, seed, &BuildOptions::default().with_degree(4))?;
    let v = check_expander_upper_bound(&exp, 1_000, seed)?;
    push("expander_upper_bound", v == 0, format!("violations={v}"));

    let l1set = ModelSet::sparse(4, 64)?.with_q(1.0)?;
    let wide = QuantConfig::new(2.0 * l1set.radius())?;
    let distinct = check_one_bit(&exp, &l1set, &wide, 200, seed)?;
    push("one_bit_regime", distinct <= 2, format!("max_distinct={distinct}"));

    let tiny = QuantConfig::new(1e-9)?;
    let l1op = LinOp::build(Family::Gaussian, 256, 64, seed, &BuildOptions::default().with_profile(RipProfile::L1_L2))?;
    let qc = QripConfig { mode: DistanceMode::L1, grid: vec![0.05, 1.0, 10.0], pairs_per_distance: 5, dithers_per_pair: 2, seed };
    let (_, fit) = measure_qrip(&l1op, &set, &tiny, &qc)?;
    let worst = fit.rho.iter().map(|r| r.rho_max / r.dist).fold(0.0, f64::max);
    push("vanishing_quantizer", worst <= 1e-6, format!("max_rho_over_s={worst:.3e}"));

    Ok(lines)
}
