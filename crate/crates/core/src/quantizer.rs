//! Uniform mid-rise scalar quantization, dithers, soft distances and pre-metrics.
//!
//! The quantizer maps `λ` to the cell center `δ (floor(λ/δ) + 1/2)`, so its
//! outputs live on the shifted lattice `δ(Z + 1/2)` and zero is a decision
//! threshold. Codes are carried around as the integer index `floor(λ/δ)`.
//!
//! The soft distance `d^t(a, a')` counts, in units of `δ`, the thresholds
//! `kδ` that separate `a` and `a'` while keeping both points at least `t`
//! away from the threshold (`t > 0`), or allowing them to overshoot it by up
//! to `|t|` (`t < 0`). At `t = 0` it is the quantized distance
//! `|Q(a) - Q(a')|`.

use rand::Rng;

use crate::error::{Error, Result};

/// Largest `|λ/δ|` for which the cell index is exactly representable.
const MAX_CELL: f64 = 4_503_599_627_370_496.0; // 2^52

/// Quantization resolution `δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    delta: f64,
}

impl QuantConfig {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::param("delta", format!("must be finite and > 0, got {delta}")));
        }
        Ok(Self { delta })
    }

    #[inline]
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Cell index `floor(λ/δ)`.
    #[inline]
    pub fn index(&self, lambda: f64) -> Result<i64> {
        let r = lambda / self.delta;
        if !r.is_finite() || r.abs() >= MAX_CELL {
            return Err(Error::Domain(format!(
                "cannot quantize {lambda} at resolution {}",
                self.delta
            )));
        }
        Ok(r.floor() as i64)
    }

    /// Reconstruction value `δ (k + 1/2)` of cell `k`.
    #[inline]
    pub fn value(&self, index: i64) -> f64 {
        self.delta * (index as f64 + 0.5)
    }
}

/// Soft-distance parameter `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftParam {
    t: f64,
}

impl SoftParam {
    pub const ZERO: SoftParam = SoftParam { t: 0.0 };

    pub fn new(t: f64) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::param("t", format!("must be finite, got {t}")));
        }
        Ok(Self { t })
    }

    #[inline]
    pub fn t(&self) -> f64 {
        self.t
    }
}

/// Quantizes `λ`, returning the cell index and the reconstruction value.
pub fn quantize(lambda: f64, cfg: &QuantConfig) -> Result<(i64, f64)> {
    if !lambda.is_finite() {
        return Err(Error::Domain(format!("non-finite input {lambda}")));
    }
    let k = cfg.index(lambda)?;
    Ok((k, cfg.value(k)))
}

/// Draws `m` i.i.d. dither values uniform on `[0, δ)`.
pub fn sample_dither<R: Rng + ?Sized>(m: usize, cfg: &QuantConfig, rng: &mut R) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::Domain("dither length must be at least 1".into()));
    }
    let delta = cfg.delta();
    Ok((0..m).map(|_| rng.random_range(0.0..delta)).collect())
}

fn check_finite(a: f64, a_prime: f64) -> Result<()> {
    if a.is_finite() && a_prime.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite input ({a}, {a_prime})")))
    }
}

fn guess(x: f64) -> i64 {
    x.floor().clamp(-MAX_CELL, MAX_CELL) as i64
}

/// Smallest `k` with `pred(k)`, for `pred` false below and true above some point.
fn first_true(pred: impl Fn(i64) -> bool, mut k: i64) -> i64 {
    while pred(k - 1) {
        k -= 1;
    }
    while !pred(k) {
        k += 1;
    }
    k
}

/// Largest `k` with `pred(k)`, for `pred` true below and false above some point.
fn last_true(pred: impl Fn(i64) -> bool, mut k: i64) -> i64 {
    while pred(k + 1) {
        k += 1;
    }
    while !pred(k) {
        k -= 1;
    }
    k
}

/// Number of `k` with `(a - kδ, a' - kδ) ∈ S^t`, using the strict inequalities
/// of `S^t = {u < -t, v > t} ∪ {u > t, v < -t}` for every `t`.
fn strict_count(a: f64, a_prime: f64, t: f64, delta: f64) -> i64 {
    let kd = |k: i64| k as f64 * delta;
    // {a - kδ < -t, a' - kδ > t}
    let a_lo = first_true(|k| a - kd(k) < -t, guess((a + t) / delta));
    let a_hi = last_true(|k| a_prime - kd(k) > t, guess((a_prime - t) / delta));
    // {a - kδ > t, a' - kδ < -t}
    let b_lo = first_true(|k| a_prime - kd(k) < -t, guess((a_prime + t) / delta));
    let b_hi = last_true(|k| a - kd(k) > t, guess((a - t) / delta));

    let span = |lo: i64, hi: i64| (hi - lo + 1).max(0);
    // both branches can hold for the same k when t < 0
    span(a_lo, a_hi) + span(b_lo, b_hi) - span(a_lo.max(b_lo), a_hi.min(b_hi))
}

/// Soft distance `d^t(a, a')`.
///
/// For `t = 0` the thresholds are counted half-open (`min < kδ ≤ max`), which
/// makes `d^0(a, a') = |Q(a) - Q(a')|` exactly, lattice points included. Any
/// other `t` uses the strict set `S^t`; see [`soft_distance_strict`].
pub fn soft_distance(a: f64, a_prime: f64, soft: SoftParam, cfg: &QuantConfig) -> Result<f64> {
    check_finite(a, a_prime)?;
    if soft.t == 0.0 {
        let k = cfg.index(a)?;
        let k_prime = cfg.index(a_prime)?;
        return Ok(cfg.delta() * (k - k_prime).abs() as f64);
    }
    Ok(cfg.delta() * strict_count(a, a_prime, soft.t, cfg.delta()) as f64)
}

/// Soft distance with the strict `S^t` count for every `t`, including `t = 0`.
///
/// Differs from [`soft_distance`] only when `t = 0` and one argument sits
/// exactly on a threshold.
pub fn soft_distance_strict(a: f64, a_prime: f64, soft: SoftParam, cfg: &QuantConfig) -> Result<f64> {
    check_finite(a, a_prime)?;
    Ok(cfg.delta() * strict_count(a, a_prime, soft.t, cfg.delta()) as f64)
}

/// Averaged `p`-th power of the ℓp distance, `(1/m) Σ |a_i - a'_i|^p`.
pub fn premetric(a: &[f64], a_prime: &[f64], p: f64) -> Result<f64> {
    Error::check_len("premetric operand", a.len(), a_prime.len())?;
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::param("p", format!("must be >= 1, got {p}")));
    }
    if a.is_empty() {
        return Err(Error::Domain("empty vectors".into()));
    }
    let sum: f64 = if p == 1.0 {
        a.iter().zip(a_prime).map(|(x, y)| (x - y).abs()).sum()
    } else if p == 2.0 {
        a.iter().zip(a_prime).map(|(x, y)| (x - y) * (x - y)).sum()
    } else {
        a.iter().zip(a_prime).map(|(x, y)| (x - y).abs().powf(p)).sum()
    };
    Ok(sum / a.len() as f64)
}

fn soft_sum(
    a: &[f64],
    a_prime: &[f64],
    soft: SoftParam,
    cfg: &QuantConfig,
    power: i32,
) -> Result<f64> {
    Error::check_len("soft pre-metric operand", a.len(), a_prime.len())?;
    if a.is_empty() {
        return Err(Error::Domain("empty vectors".into()));
    }
    let mut sum = 0.0;
    for (&x, &y) in a.iter().zip(a_prime) {
        sum += soft_distance(x, y, soft, cfg)?.powi(power);
    }
    Ok(sum / a.len() as f64)
}

/// `D^t(a, a') = (1/m) Σ d^t(a_i, a'_i)`.
pub fn soft_premetric_l1(a: &[f64], a_prime: &[f64], soft: SoftParam, cfg: &QuantConfig) -> Result<f64> {
    soft_sum(a, a_prime, soft, cfg, 1)
}

/// `D₂^t(a, a') = (1/m) Σ d^t(a_i, a'_i)²`.
pub fn soft_premetric_l2(a: &[f64], a_prime: &[f64], soft: SoftParam, cfg: &QuantConfig) -> Result<f64> {
    soft_sum(a, a_prime, soft, cfg, 2)
}

/// Row-wise product pre-metric on `m × 2` inputs:
/// `(1/m) Σ_i d^t(a_{i1}, a'_{i1}) · d^t(a_{i2}, a'_{i2})`.
pub fn premetric_circ(
    a: &[[f64; 2]],
    a_prime: &[[f64; 2]],
    soft: SoftParam,
    cfg: &QuantConfig,
) -> Result<f64> {
    Error::check_len("circ pre-metric rows", a.len(), a_prime.len())?;
    if a.is_empty() {
        return Err(Error::Domain("empty matrices".into()));
    }
    let mut sum = 0.0;
    for (r, r_prime) in a.iter().zip(a_prime) {
        sum += soft_distance(r[0], r_prime[0], soft, cfg)? * soft_distance(r[1], r_prime[1], soft, cfg)?;
    }
    Ok(sum / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(delta: f64) -> QuantConfig {
        QuantConfig::new(delta).unwrap()
    }

    fn soft(t: f64) -> SoftParam {
        SoftParam::new(t).unwrap()
    }

    /// Literal threshold enumeration over a padded window.
    fn brute_soft(a: f64, b: f64, t: f64, delta: f64) -> f64 {
        let pad = (t.abs() / delta).ceil() as i64 + 1;
        let lo = (a.min(b) / delta).floor() as i64 - pad;
        let hi = (a.max(b) / delta).ceil() as i64 + pad;
        let mut count = 0;
        for k in lo..=hi {
            let u = a - k as f64 * delta;
            let v = b - k as f64 * delta;
            if (u < -t && v > t) || (u > t && v < -t) {
                count += 1;
            }
        }
        delta * count as f64
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.3, &cfg(1.0)).unwrap(), (0, 0.5));
        assert_eq!(quantize(-0.2, &cfg(1.0)).unwrap(), (-1, -0.5));
        assert_eq!(quantize(2.0, &cfg(0.5)).unwrap(), (4, 2.25));
    }

    #[test]
    fn quantize_rejects_non_finite() {
        assert!(quantize(f64::NAN, &cfg(1.0)).is_err());
        assert!(quantize(f64::INFINITY, &cfg(1.0)).is_err());
        assert!(quantize(1e300, &cfg(1e-300)).is_err());
        assert!(QuantConfig::new(0.0).is_err());
        assert!(QuantConfig::new(-1.0).is_err());
        assert!(QuantConfig::new(f64::NAN).is_err());
        assert!(SoftParam::new(f64::INFINITY).is_err());
    }

    #[test]
    fn dither_is_deterministic_and_in_range() {
        let c = cfg(1.0);
        let a = sample_dither(3, &c, &mut stream(11, "dither", &[])).unwrap();
        let b = sample_dither(3, &c, &mut stream(11, "dither", &[])).unwrap();
        assert_eq!(a, b);
        let big = sample_dither(1_000_000, &c, &mut stream(1, "dither", &[])).unwrap();
        assert!(big.iter().all(|&v| (0.0..1.0).contains(&v)));
        assert!(sample_dither(0, &c, &mut stream(1, "dither", &[])).is_err());
    }

    #[test]
    fn dither_mean() {
        let n = 1_000_000;
        let d = sample_dither(n, &cfg(2.0), &mut stream(5, "dither", &[])).unwrap();
        let mean = d.iter().sum::<f64>() / n as f64;
        // σ = 2/√12, tolerance 4σ/√N
        let tol = 4.0 * (2.0 / 12f64.sqrt()) / (n as f64).sqrt();
        assert!((mean - 1.0).abs() <= tol.max(0.01), "mean {mean}");
    }

    #[test]
    fn soft_distance_examples() {
        let c = cfg(1.0);
        assert_eq!(soft_distance(0.2, 0.8, SoftParam::ZERO, &c).unwrap(), 0.0);
        assert_eq!(soft_distance(0.8, 1.2, soft(0.3), &c).unwrap(), 0.0);
        assert_eq!(soft_distance(0.8, 1.2, soft(-0.0), &c).unwrap(), 1.0);
        assert_eq!(soft_distance(0.7, 0.9, soft(-0.3), &c).unwrap(), 1.0);
        for (a, b, t) in [(0.8, 1.2, 0.3), (0.8, 1.2, -0.0), (0.7, 0.9, -0.3)] {
            assert_eq!(soft_distance(a, b, soft(t), &c).unwrap(), brute_soft(a, b, t, 1.0));
        }
    }

    #[test]
    fn zero_t_matches_quantizer_on_lattice() {
        let c = cfg(0.5);
        for (a, b) in [(1.0, 2.0), (-1.0, 0.0), (0.0, 0.0), (0.5, -0.5), (1.0, 1.2)] {
            let (_, qa) = quantize(a, &c).unwrap();
            let (_, qb) = quantize(b, &c).unwrap();
            assert_eq!(soft_distance(a, b, SoftParam::ZERO, &c).unwrap(), (qa - qb).abs());
        }
        // a = 1.0 is a threshold: the strict count drops it
        assert_eq!(soft_distance_strict(1.0, 1.2, SoftParam::ZERO, &cfg(1.0)).unwrap(), 0.0);
        assert_eq!(soft_distance(1.0, 1.2, SoftParam::ZERO, &cfg(1.0)).unwrap(), 0.0);
        assert_eq!(soft_distance(0.9, 1.0, SoftParam::ZERO, &cfg(1.0)).unwrap(), 1.0);
        assert_eq!(soft_distance_strict(0.9, 1.0, SoftParam::ZERO, &cfg(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn premetric_examples() {
        assert_eq!(premetric(&[0.0, 1.0], &[1.0, 3.0], 1.0).unwrap(), 1.5);
        assert_eq!(premetric(&[0.0, 1.0], &[1.0, 3.0], 2.0).unwrap(), 2.5);
        assert_eq!(premetric(&[0.3, -2.0], &[0.3, -2.0], 3.5).unwrap(), 0.0);
        assert!(premetric(&[0.0], &[0.0, 1.0], 1.0).is_err());
        assert!(premetric(&[0.0], &[1.0], 0.5).is_err());
    }

    #[test]
    fn soft_premetric_examples() {
        let c = cfg(1.0);
        let a = [0.2, 0.8];
        let b = [0.8, 1.2];
        assert_eq!(soft_premetric_l1(&a, &b, SoftParam::ZERO, &c).unwrap(), 0.5);
        assert_eq!(soft_premetric_l2(&a, &b, SoftParam::ZERO, &c).unwrap(), 0.5);
        assert_eq!(soft_premetric_l1(&a, &a, soft(0.4), &c).unwrap(), 0.0);
        assert_eq!(soft_premetric_l2(&a, &a, SoftParam::ZERO, &c).unwrap(), 0.0);
        assert_eq!(soft_premetric_l2(&[1.9], &[2.1], SoftParam::ZERO, &cfg(2.0)).unwrap(), 4.0);
        assert!(soft_premetric_l1(&a, &b[..1], SoftParam::ZERO, &c).is_err());
    }

    #[test]
    fn soft_premetric_at_zero_is_quantized_premetric() {
        let c = cfg(0.7);
        let mut rng = stream(3, "test", &[]);
        let a: Vec<f64> = (0..50).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..50).map(|_| rng.random_range(-5.0..5.0)).collect();
        let qa: Vec<f64> = a.iter().map(|&x| quantize(x, &c).unwrap().1).collect();
        let qb: Vec<f64> = b.iter().map(|&x| quantize(x, &c).unwrap().1).collect();
        let l1 = soft_premetric_l1(&a, &b, SoftParam::ZERO, &c).unwrap();
        let l2 = soft_premetric_l2(&a, &b, SoftParam::ZERO, &c).unwrap();
        assert!((l1 - premetric(&qa, &qb, 1.0).unwrap()).abs() < 1e-12);
        assert!((l2 - premetric(&qa, &qb, 2.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn circ_examples() {
        let c = cfg(1.0);
        // rows quantizing to (0.5, 1.5) vs (1.5, 1.5)
        assert_eq!(premetric_circ(&[[0.2, 1.3]], &[[1.4, 1.6]], SoftParam::ZERO, &c).unwrap(), 0.0);
        // (0.5, 0.5) vs (1.5, 1.5)
        assert_eq!(premetric_circ(&[[0.2, 0.3]], &[[1.4, 1.6]], SoftParam::ZERO, &c).unwrap(), 1.0);
        let a = [[0.1, -3.0], [2.2, 7.1]];
        assert_eq!(premetric_circ(&a, &a, SoftParam::ZERO, &c).unwrap(), 0.0);
        assert!(premetric_circ(&a, &a[..1], SoftParam::ZERO, &c).is_err());
    }

    #[test]
    fn quantizer_is_odd_off_lattice() {
        let c = cfg(0.3);
        let mut rng = stream(9, "odd", &[]);
        for _ in 0..10_000 {
            let a: f64 = rng.random_range(-50.0..50.0);
            if (a / c.delta()).fract() == 0.0 {
                continue;
            }
            let (_, q) = quantize(a, &c).unwrap();
            let (_, q_neg) = quantize(-a, &c).unwrap();
            assert_eq!(q_neg, -q);
        }
    }

    proptest! {
        #[test]
        fn closed_form_matches_enumeration(
            a in -20.0f64..20.0,
            b in -20.0f64..20.0,
            t in -3.0f64..3.0,
            delta in 0.05f64..4.0,
        ) {
            let c = cfg(delta);
            prop_assert_eq!(
                soft_distance_strict(a, b, soft(t), &c).unwrap(),
                brute_soft(a, b, t, delta)
            );
        }

        #[test]
        fn soft_distance_symmetric(a in -20.0f64..20.0, b in -20.0f64..20.0, t in -3.0f64..3.0) {
            let c = cfg(0.9);
            prop_assert_eq!(
                soft_distance(a, b, soft(t), &c).unwrap(),
                soft_distance(b, a, soft(t), &c).unwrap()
            );
        }

        #[test]
        fn soft_premetrics_permutation_invariant(
            pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20),
            t in -1.0f64..1.0,
        ) {
            let c = cfg(0.6);
            let s = soft(t);
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let ra: Vec<f64> = a.iter().rev().copied().collect();
            let rb: Vec<f64> = b.iter().rev().copied().collect();
            let l1 = soft_premetric_l1(&a, &b, s, &c).unwrap();
            prop_assert!((l1 - soft_premetric_l1(&ra, &rb, s, &c).unwrap()).abs() < 1e-12);
            prop_assert!((l1 - soft_premetric_l1(&b, &a, s, &c).unwrap()).abs() < 1e-12);
            let l2 = soft_premetric_l2(&a, &b, s, &c).unwrap();
            prop_assert!((l2 - soft_premetric_l2(&rb, &ra, s, &c).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn t_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, t in 0.0f64..2.0) {
            let c = cfg(1.0);
            let hi = soft_distance(a, b, soft(t), &c).unwrap();
            let mid = soft_distance(a, b, SoftParam::ZERO, &c).unwrap();
            let lo = soft_distance(a, b, soft(-t), &c).unwrap();
            prop_assert!(hi <= mid && mid <= lo);
        }
    }
}
