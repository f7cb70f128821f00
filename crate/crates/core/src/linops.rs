//! Random measurement operators.
//!
//! Every family is built from `(family, m, n, seed, options)` and exposes the
//! same surface: [`LinOp::matvec`], dense materialization for testing, the
//! scaling `μ` and the `(p, q)` profile the operator is normalized for, i.e.
//! `(μ^p / m) ‖Φx‖_p^p ≈ ‖x‖_q^p`.
//!
//! | family                | entries / structure                              | profile  | μ            |
//! |-----------------------|--------------------------------------------------|----------|--------------|
//! | `gaussian`            | i.i.d. N(0, 1)                                   | (2,2)    | 1            |
//! | `gaussian` (ℓ1)       | i.i.d. N(0, 1)                                   | (1,2)    | √(π/2)       |
//! | `bernoulli`           | i.i.d. ±1                                        | (2,2)    | 1            |
//! | `subsampled_hadamard` | √n · rows of orthonormal Hadamard · random signs | (2,2)    | 1            |
//! | `random_convolution`  | circulant N(0, 1) generator, subsampled outputs  | (2,2)    | 1            |
//! | `expander`            | 0/1 adjacency, left-d-regular                    | (1,1)    | m / d        |
//! | `rop`                 | rows `vec(a_i b_iᵀ)`, Gaussian probes            | (1,2)    | π / 2        |

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{counter_normal, counter_sign, derive_key, stream};

/// Dense Gaussian/Bernoulli operators are cached when `m·n` is at most this.
const DENSE_CACHE_LIMIT: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Gaussian,
    Bernoulli,
    SubsampledHadamard,
    RandomConvolution,
    Expander,
    Rop,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Gaussian,
        Family::Bernoulli,
        Family::SubsampledHadamard,
        Family::RandomConvolution,
        Family::Expander,
        Family::Rop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Bernoulli => "bernoulli",
            Family::SubsampledHadamard => "subsampled_hadamard",
            Family::RandomConvolution => "random_convolution",
            Family::Expander => "expander",
            Family::Rop => "rop",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gaussian" => Ok(Family::Gaussian),
            "bernoulli" => Ok(Family::Bernoulli),
            "subsampled_hadamard" | "hadamard" => Ok(Family::SubsampledHadamard),
            "random_convolution" | "convolution" => Ok(Family::RandomConvolution),
            "expander" => Ok(Family::Expander),
            "rop" => Ok(Family::Rop),
            other => Err(Error::param("family", format!("unknown family `{other}`"))),
        }
    }
}

/// The `(p, q)` pair of an `(ℓp, ℓq)` restricted isometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RipProfile {
    pub p: f64,
    pub q: f64,
}

impl RipProfile {
    pub const L2_L2: RipProfile = RipProfile { p: 2.0, q: 2.0 };
    pub const L1_L2: RipProfile = RipProfile { p: 1.0, q: 2.0 };
    pub const L1_L1: RipProfile = RipProfile { p: 1.0, q: 1.0 };
}

impl fmt::Display for RipProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(l{}, l{})", self.p, self.q)
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Left degree of expander graphs.
    pub degree: usize,
    /// Requested profile; `None` picks the family default.
    pub profile: Option<RipProfile>,
    /// `(n1, n2)` for rank-one projections; `None` means a square `√n × √n`.
    pub rop_shape: Option<(usize, usize)>,
    /// Rescaling applied before quantizing rank-one projections.
    pub kappa: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            degree: 8,
            profile: None,
            rop_shape: None,
            kappa: 1.0,
        }
    }
}

impl BuildOptions {
    pub fn with_profile(mut self, profile: RipProfile) -> Self {
        self.profile = Some(profile);
        self
    }

    pub fn with_degree(mut self, degree: usize) -> Self {
        self.degree = degree;
        self
    }
}

/// Rank-one projections `U ↦ (a_iᵀ U b_i)_i` of `n1 × n2` matrices.
#[derive(Debug, Clone)]
pub struct RopOp {
    m: usize,
    n1: usize,
    n2: usize,
    /// `m × n1`, row-major.
    a: Vec<f64>,
    /// `m × n2`, row-major.
    b: Vec<f64>,
    kappa: f64,
}

impl RopOp {
    pub fn new(m: usize, n1: usize, n2: usize, seed: u64, kappa: f64) -> Result<Self> {
        if m == 0 || n1 == 0 || n2 == 0 {
            return Err(Error::param("m/n1/n2", "dimensions must be >= 1"));
        }
        let mut rng = stream(seed, "rop", &[]);
        let a = (0..m * n1).map(|_| rng.sample(StandardNormal)).collect();
        let b = (0..m * n2).map(|_| rng.sample(StandardNormal)).collect();
        Self::from_parts(m, n1, n2, a, b, kappa)
    }

    /// Builds from explicit probes (`a` is `m × n1`, `b` is `m × n2`, row-major).
    pub fn from_parts(m: usize, n1: usize, n2: usize, a: Vec<f64>, b: Vec<f64>, kappa: f64) -> Result<Self> {
        Error::check_len("rop left probes", m * n1, a.len())?;
        Error::check_len("rop right probes", m * n2, b.len())?;
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::param("kappa", format!("must be finite and > 0, got {kappa}")));
        }
        Ok(Self { m, n1, n2, a, b, kappa })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n1, self.n2)
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn left_probe(&self, i: usize) -> &[f64] {
        &self.a[i * self.n1..(i + 1) * self.n1]
    }

    pub fn right_probe(&self, i: usize) -> &[f64] {
        &self.b[i * self.n2..(i + 1) * self.n2]
    }

    /// `(a_iᵀ U b_i)_i`.
    pub fn apply(&self, u: &DMatrix<f64>) -> Result<Vec<f64>> {
        if u.shape() != (self.n1, self.n2) {
            return Err(Error::Incompatible(format!(
                "rop expects a {}x{} matrix, got {}x{}",
                self.n1,
                self.n2,
                u.nrows(),
                u.ncols()
            )));
        }
        let mut flat = Vec::with_capacity(self.n1 * self.n2);
        for r in 0..self.n1 {
            for c in 0..self.n2 {
                flat.push(u[(r, c)]);
            }
        }
        Ok(self.apply_flat(&flat))
    }

    /// Same as [`RopOp::apply`] on a row-major vectorization.
    fn apply_flat(&self, u: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|i| {
                let a = self.left_probe(i);
                let b = self.right_probe(i);
                a.iter()
                    .enumerate()
                    .map(|(r, &ar)| {
                        let row = &u[r * self.n2..(r + 1) * self.n2];
                        ar * row.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
                    })
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Dense {
        key: u64,
        signs_only: bool,
        cache: Option<Vec<f64>>,
    },
    Hadamard {
        rows: Vec<usize>,
        signs: Vec<f64>,
    },
    Convolution {
        generator: Vec<f64>,
        /// FFT of the generator when `n` is a power of two.
        spectrum: Option<Vec<Complex64>>,
        rows: Vec<usize>,
    },
    Expander {
        degree: usize,
        /// `n × degree` neighbor lists.
        neighbors: Vec<usize>,
    },
    Rop(RopOp),
}

/// A random linear measurement operator `Φ ∈ R^{m×n}`.
#[derive(Debug, Clone)]
pub struct LinOp {
    family: Family,
    m: usize,
    n: usize,
    mu: f64,
    profile: RipProfile,
    seed: u64,
    kind: Kind,
}

fn default_profile(family: Family) -> RipProfile {
    match family {
        Family::Gaussian | Family::Bernoulli | Family::SubsampledHadamard | Family::RandomConvolution => {
            RipProfile::L2_L2
        }
        Family::Expander => RipProfile::L1_L1,
        Family::Rop => RipProfile::L1_L2,
    }
}

fn scaling(family: Family, profile: RipProfile, m: usize, degree: usize) -> Result<f64> {
    let mu = match (family, profile.p, profile.q) {
        (Family::Gaussian, p, q) if p == 2.0 && q == 2.0 => 1.0,
        (Family::Gaussian, p, q) if p == 1.0 && q == 2.0 => (PI / 2.0).sqrt(),
        (Family::Bernoulli | Family::SubsampledHadamard | Family::RandomConvolution, p, q) if p == 2.0 && q == 2.0 => {
            1.0
        }
        (Family::Expander, p, q) if p == 1.0 && q == 1.0 => m as f64 / degree as f64,
        // E|aᵀ U b| = 2/π for rank-one unit-Frobenius U with Gaussian probes
        (Family::Rop, p, q) if p == 1.0 && q == 2.0 => PI / 2.0,
        _ => {
            return Err(Error::Unsupported(format!(
                "profile {profile} is not available for the {family} family"
            )))
        }
    };
    Ok(mu)
}

impl LinOp {
    pub fn build(family: Family, m: usize, n: usize, seed: u64, options: &BuildOptions) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::param("m/n", format!("dimensions must be >= 1, got m={m}, n={n}")));
        }
        let profile = options.profile.unwrap_or_else(|| default_profile(family));
        let mu = scaling(family, profile, m, options.degree.max(1))?;
        let kind = match family {
            Family::Gaussian | Family::Bernoulli => {
                let signs_only = family == Family::Bernoulli;
                let key = derive_key(seed, family.name(), &[]);
                let cache = (m.saturating_mul(n) <= DENSE_CACHE_LIMIT).then(|| {
                    let mut entries = Vec::with_capacity(m * n);
                    for r in 0..m as u64 {
                        for c in 0..n as u64 {
                            entries.push(dense_entry(key, signs_only, r, c));
                        }
                    }
                    entries
                });
                Kind::Dense { key, signs_only, cache }
            }
            Family::SubsampledHadamard => {
                if !n.is_power_of_two() {
                    return Err(Error::param("n", format!("subsampled_hadamard needs a power of two, got {n}")));
                }
                if m > n {
                    return Err(Error::param("m", format!("cannot select {m} distinct rows out of {n}")));
                }
                let mut rng = stream(seed, "hadamard", &[]);
                let mut rows = sample(&mut rng, n, m).into_vec();
                rows.sort_unstable();
                let signs = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
                Kind::Hadamard { rows, signs }
            }
            Family::RandomConvolution => {
                if m > n {
                    return Err(Error::param("m", format!("cannot select {m} distinct outputs out of {n}")));
                }
                let mut rng = stream(seed, "convolution", &[]);
                let generator: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let mut rows = sample(&mut rng, n, m).into_vec();
                rows.sort_unstable();
                let spectrum = n.is_power_of_two().then(|| {
                    let mut buf: Vec<Complex64> = generator.iter().map(|&g| Complex64::new(g, 0.0)).collect();
                    Fft::new(n).forward(&mut buf);
                    buf
                });
                Kind::Convolution { generator, spectrum, rows }
            }
            Family::Expander => {
                let d = options.degree;
                if d == 0 || d > m {
                    return Err(Error::param("degree", format!("must satisfy 1 <= d <= m={m}, got {d}")));
                }
                let mut rng = stream(seed, "expander", &[]);
                let mut neighbors = Vec::with_capacity(n * d);
                for _ in 0..n {
                    neighbors.extend(sample(&mut rng, m, d));
                }
                Kind::Expander { degree: d, neighbors }
            }
            Family::Rop => {
                let (n1, n2) = match options.rop_shape {
                    Some(shape) => shape,
                    None => {
                        let side = (n as f64).sqrt().round() as usize;
                        (side, side)
                    }
                };
                if n1 * n2 != n {
                    return Err(Error::param("rop_shape", format!("{n1}x{n2} does not vectorize to n={n}")));
                }
                Kind::Rop(RopOp::new(m, n1, n2, seed, options.kappa)?)
            }
        };
        Ok(Self { family, m, n, mu, profile, seed, kind })
    }

    /// Subsampled Hadamard operator with explicit row selection and signs.
    pub fn hadamard_from_parts(n: usize, rows: Vec<usize>, signs: Vec<f64>) -> Result<Self> {
        if !n.is_power_of_two() {
            return Err(Error::param("n", format!("subsampled_hadamard needs a power of two, got {n}")));
        }
        Error::check_len("hadamard signs", n, signs.len())?;
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::param("rows", "row indices must be non-empty and < n"));
        }
        Ok(Self {
            family: Family::SubsampledHadamard,
            m: rows.len(),
            n,
            mu: 1.0,
            profile: RipProfile::L2_L2,
            seed: 0,
            kind: Kind::Hadamard { rows, signs },
        })
    }

    /// Expander operator from explicit neighbor lists (`neighbors[j]` holds the
    /// `degree` distinct rows adjacent to column `j`).
    pub fn expander_from_neighbors(m: usize, neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        let degree = neighbors.first().map_or(0, Vec::len);
        if n == 0 || degree == 0 || degree > m {
            return Err(Error::param("neighbors", "need n >= 1 columns with 1 <= d <= m neighbors"));
        }
        let mut flat = Vec::with_capacity(n * degree);
        for list in &neighbors {
            Error::check_len("expander neighbor list", degree, list.len())?;
            let mut sorted = list.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != degree || sorted.iter().any(|&r| r >= m) {
                return Err(Error::param("neighbors", "neighbors must be distinct and < m"));
            }
            flat.extend_from_slice(list);
        }
        Ok(Self {
            family: Family::Expander,
            m,
            n,
            mu: m as f64 / degree as f64,
            profile: RipProfile::L1_L1,
            seed: 0,
            kind: Kind::Expander { degree, neighbors: flat },
        })
    }

    /// Wraps rank-one projections as an operator on row-major vectorized matrices.
    pub fn from_rop(rop: RopOp) -> Self {
        let (n1, n2) = rop.shape();
        Self {
            family: Family::Rop,
            m: rop.m(),
            n: n1 * n2,
            mu: PI / 2.0,
            profile: RipProfile::L1_L2,
            seed: 0,
            kind: Kind::Rop(rop),
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn profile(&self) -> RipProfile {
        self.profile
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Expander left degree, if this is an expander.
    pub fn degree(&self) -> Option<usize> {
        match &self.kind {
            Kind::Expander { degree, .. } => Some(*degree),
            _ => None,
        }
    }

    pub fn as_rop(&self) -> Option<&RopOp> {
        match &self.kind {
            Kind::Rop(r) => Some(r),
            _ => None,
        }
    }

    /// `Φx`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.matvec_counted(x).map(|(y, _)| y)
    }

    /// `Φx` together with the number of scalar multiply-adds spent in the
    /// fast transforms (Hadamard and power-of-two convolution only; zero for
    /// the other families).
    pub fn matvec_counted(&self, x: &[f64]) -> Result<(Vec<f64>, u64)> {
        Error::check_len("matvec input", self.n, x.len())?;
        let (m, n) = (self.m, self.n);
        let out = match &self.kind {
            Kind::Dense { key, signs_only, cache } => {
                let y = match cache {
                    Some(entries) => entries
                        .chunks_exact(n)
                        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                        .collect(),
                    None => (0..m as u64)
                        .map(|r| {
                            x.iter()
                                .enumerate()
                                .map(|(c, &v)| dense_entry(*key, *signs_only, r, c as u64) * v)
                                .sum()
                        })
                        .collect(),
                };
                (y, 0)
            }
            Kind::Hadamard { rows, signs } => {
                let mut buf: Vec<f64> = x.iter().zip(signs).map(|(a, s)| a * s).collect();
                let ops = n as u64 + fwht(&mut buf);
                (rows.iter().map(|&r| buf[r]).collect(), ops)
            }
            Kind::Convolution { generator, spectrum, rows } => match spectrum {
                Some(g_hat) => {
                    let fft = Fft::new(n);
                    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                    let mut ops = fft.forward(&mut buf);
                    for (b, g) in buf.iter_mut().zip(g_hat) {
                        *b *= g;
                    }
                    ops += n as u64;
                    ops += fft.inverse(&mut buf);
                    (rows.iter().map(|&r| buf[r].re).collect(), ops)
                }
                None => {
                    let y = rows
                        .iter()
                        .map(|&r| (0..n).map(|j| generator[(r + n - j) % n] * x[j]).sum())
                        .collect();
                    (y, 0)
                }
            },
            Kind::Expander { degree, neighbors } => {
                let mut y = vec![0.0; m];
                for (j, &v) in x.iter().enumerate() {
                    for &r in &neighbors[j * degree..(j + 1) * degree] {
                        y[r] += v;
                    }
                }
                (y, 0)
            }
            Kind::Rop(rop) => (rop.apply_flat(x), 0),
        };
        Ok(out)
    }

    /// Dense `m × n` materialization. Intended for testing on small `n`.
    pub fn dense(&self) -> DMatrix<f64> {
        let (m, n) = (self.m, self.n);
        match &self.kind {
            Kind::Dense { key, signs_only, cache } => match cache {
                Some(entries) => DMatrix::from_row_slice(m, n, entries),
                None => DMatrix::from_fn(m, n, |r, c| dense_entry(*key, *signs_only, r as u64, c as u64)),
            },
            Kind::Hadamard { rows, signs } => DMatrix::from_fn(m, n, |r, c| {
                let h = if (rows[r] & c).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                h * signs[c]
            }),
            Kind::Convolution { generator, rows, .. } => {
                DMatrix::from_fn(m, n, |r, c| generator[(rows[r] + n - c) % n])
            }
            Kind::Expander { degree, neighbors } => {
                let mut d = DMatrix::zeros(m, n);
                for c in 0..n {
                    for &r in &neighbors[c * degree..(c + 1) * degree] {
                        d[(r, c)] = 1.0;
                    }
                }
                d
            }
            Kind::Rop(rop) => {
                let n2 = rop.shape().1;
                DMatrix::from_fn(m, n, |i, c| rop.left_probe(i)[c / n2] * rop.right_probe(i)[c % n2])
            }
        }
    }
}

#[inline]
fn dense_entry(key: u64, signs_only: bool, r: u64, c: u64) -> f64 {
    if signs_only {
        counter_sign(key, r, c)
    } else {
        counter_normal(key, r, c)
    }
}

/// In-place unnormalized Walsh-Hadamard transform in natural (Sylvester)
/// order. Returns the number of additions/subtractions performed.
pub fn fwht(buf: &mut [f64]) -> u64 {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let mut ops = 0u64;
    let mut h = 1;
    while h < n {
        for block in buf.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        ops += n as u64;
        h *= 2;
    }
    ops
}

/// Iterative radix-2 complex FFT with exact twiddles.
struct Fft {
    n: usize,
    twiddles: Vec<Complex64>,
}

impl Fft {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Self { n, twiddles }
    }

    /// Forward transform; returns the number of complex multiply-adds
    /// (two per butterfly).
    fn forward(&self, buf: &mut [Complex64]) -> u64 {
        let n = self.n;
        if n <= 1 {
            return 0;
        }
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut ops = 0u64;
        let mut len = 2;
        while len <= n {
            let stride = n / len;
            for block in buf.chunks_exact_mut(len) {
                let (lo, hi) = block.split_at_mut(len / 2);
                for (k, (a, b)) in lo.iter_mut().zip(hi.iter_mut()).enumerate() {
                    let t = self.twiddles[k * stride] * *b;
                    let u = *a;
                    *a = u + t;
                    *b = u - t;
                }
            }
            ops += n as u64;
            len *= 2;
        }
        ops
    }

    fn inverse(&self, buf: &mut [Complex64]) -> u64 {
        for v in buf.iter_mut() {
            *v = v.conj();
        }
        let ops = self.forward(buf);
        let scale = 1.0 / self.n as f64;
        for v in buf.iter_mut() {
            *v = v.conj() * scale;
        }
        ops
    }
}
