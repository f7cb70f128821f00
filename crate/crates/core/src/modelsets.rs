//! Low-complexity signal sets: samplers, fixed-distance pairs, support
//! functions, Gaussian mean width and Kolmogorov entropy calculators.
//!
//! Matrix-valued models (`low_rank`, `low_rank_joint_sparse`) work on the
//! row-major vectorization of `n1 × n2` matrices. Every structured set is a
//! union of linear pieces; a pair at a given distance is drawn inside a single
//! piece so that `x − x'` stays in the set's difference structure.
//!
//! Entropy bounds use natural logarithms and constant one:
//!
//! | kind                    | `H_q(K, η)`                                      | q     |
//! |-------------------------|--------------------------------------------------|-------|
//! | `sparse(s, n)`          | `s ln(e n/s) ln(1 + 2r/η)`                       | any   |
//! | `group_sparse(s, l, n)` | `s (l + ln(e n/s)) ln(1 + 2r/η)`                 | any   |
//! | `dict_sparse(D, s)`     | `s ln(e d/s) ln(1 + 2r/η)`                       | any   |
//! | `subspace_union`        | `(k_max + ln T) ln(1 + 2r/η)`                    | any   |
//! | `low_rank(r, n1, n2)`   | `r (n1 + n2) ln(1 + r/η)`                        | 2     |
//! | `low_rank_joint_sparse` | `(r (s + n2) + s ln(e n1/s)) ln(1 + r/η)`        | 2     |
//! | `ball(n)`               | `n ln(1 + 2r/η)`                                 | any   |
//! | `finite_cloud`          | `ln T`                                           | any   |

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quantizer::QuantConfig;
use crate::rng::stream;

/// Largest number of supports enumerated by combinatorial support functions.
const ENUMERATION_CAP: u64 = 200_000;

/// Singular values below this count as zero in rank checks.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Sparse { s: usize, n: usize },
    /// `n` contiguous groups of size `l`, at most `s` active.
    GroupSparse { s: usize, l: usize, n: usize },
    LowRank { r: usize, n1: usize, n2: usize },
    /// Rank at most `r` with at most `s` non-zero rows.
    LowRankJointSparse { r: usize, s: usize, n1: usize, n2: usize },
    /// Orthonormalized bases, one `n × k_i` matrix per subspace.
    SubspaceUnion { bases: Vec<DMatrix<f64>> },
    Ball { n: usize },
    FiniteCloud { points: Vec<Vec<f64>> },
    /// `x = D z` with `z` `s`-sparse; `D` is `n × d`.
    DictSparse { dict: DMatrix<f64>, s: usize },
}

/// Which quantized-embedding guarantee a measurement count is sized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proposition {
    /// `ℓ1` estimator over `(ℓ1, ℓq)`-RIP, `η = δε²`.
    P1,
    /// Squared `ℓ2` estimator, `η = δε^{3/2}`.
    P2,
    /// Bi-dithered estimator, `η = δε²`.
    P3,
}

impl FromStr for Proposition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(Proposition::P1),
            "p2" => Ok(Proposition::P2),
            "p3" => Ok(Proposition::P3),
            other => Err(Error::param("prop", format!("expected p1, p2 or p3, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    kind: ModelKind,
    radius: f64,
    q: f64,
}

/// One linear piece of a union-of-subspaces model.
enum Piece {
    Coords(Vec<usize>),
    /// Orthonormal columns.
    Basis(DMatrix<f64>),
}

impl Piece {
    fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Piece::Coords(idx) => {
                let mut x = vec![0.0; n];
                for &i in idx {
                    x[i] = rng.sample(StandardNormal);
                }
                x
            }
            Piece::Basis(b) => {
                let w: Vec<f64> = (0..b.ncols()).map(|_| rng.sample(StandardNormal)).collect();
                (0..n)
                    .map(|i| (0..b.ncols()).map(|j| b[(i, j)] * w[j]).sum())
                    .collect()
            }
        }
    }
}

pub fn lq_norm(x: &[f64], q: f64) -> f64 {
    if q == 2.0 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    } else if q == 1.0 {
        x.iter().map(|v| v.abs()).sum()
    } else if q.is_infinite() {
        x.iter().fold(0.0, |a, v| a.max(v.abs()))
    } else {
        x.iter().map(|v| v.abs().powf(q)).sum::<f64>().powf(1.0 / q)
    }
}

fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().qr().q()
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn singular_values(x: &[f64], n1: usize, n2: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(n1, n2, x);
    let mut sv: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

fn top_norm(mut values: Vec<f64>, k: usize) -> f64 {
    values.sort_by(|a, b| b.total_cmp(a));
    values.iter().take(k).map(|v| v * v).sum::<f64>().sqrt()
}

fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k as u128 {
        acc = acc * (n as u128 - i) / (i + 1);
        if acc > u128::from(u64::MAX) {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Calls `f` on every `k`-subset of `0..n` in lexicographic order.
fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn projection_norm(basis: &DMatrix<f64>, g: &[f64]) -> f64 {
    (0..basis.ncols())
        .map(|j| (0..basis.nrows()).map(|i| basis[(i, j)] * g[i]).sum::<f64>().powi(2))
        .sum::<f64>()
        .sqrt()
}

fn residual_norm(basis: &DMatrix<f64>, x: &[f64]) -> f64 {
    let coef: Vec<f64> = (0..basis.ncols())
        .map(|j| (0..basis.nrows()).map(|i| basis[(i, j)] * x[i]).sum())
        .collect();
    (0..basis.nrows())
        .map(|i| {
            let p: f64 = (0..basis.ncols()).map(|j| basis[(i, j)] * coef[j]).sum();
            (x[i] - p).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

fn columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

fn check(cond: bool, name: &'static str, reason: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::param(name, reason))
    }
}

impl ModelSet {
    fn from_kind(kind: ModelKind) -> Self {
        Self { kind, radius: 1.0, q: 2.0 }
    }

    pub fn sparse(s: usize, n: usize) -> Result<Self> {
        check(s >= 1 && s <= n, "s", format!("need 1 <= s <= n, got s={s}, n={n}"))?;
        Ok(Self::from_kind(ModelKind::Sparse { s, n }))
    }

    pub fn group_sparse(s: usize, l: usize, n: usize) -> Result<Self> {
        check(l >= 1, "l", "group size must be >= 1")?;
        check(s >= 1 && s <= n, "s", format!("need 1 <= s <= n groups, got s={s}, n={n}"))?;
        Ok(Self::from_kind(ModelKind::GroupSparse { s, l, n }))
    }

    pub fn low_rank(r: usize, n1: usize, n2: usize) -> Result<Self> {
        check(r >= 1 && r <= n1.min(n2), "r", format!("need 1 <= r <= min(n1, n2), got r={r}"))?;
        Ok(Self::from_kind(ModelKind::LowRank { r, n1, n2 }))
    }

    pub fn low_rank_joint_sparse(r: usize, s: usize, n1: usize, n2: usize) -> Result<Self> {
        check(s >= 1 && s <= n1, "s", format!("need 1 <= s <= n1, got s={s}"))?;
        check(r >= 1 && r <= s.min(n2), "r", format!("need 1 <= r <= min(s, n2), got r={r}"))?;
        Ok(Self::from_kind(ModelKind::LowRankJointSparse { r, s, n1, n2 }))
    }

    /// Union of the column spans of `bases` (each is orthonormalized).
    pub fn subspace_union(bases: Vec<DMatrix<f64>>) -> Result<Self> {
        check(!bases.is_empty(), "bases", "need at least one subspace")?;
        let n = bases[0].nrows();
        check(
            bases.iter().all(|b| b.nrows() == n && b.ncols() >= 1 && b.ncols() <= n),
            "bases",
            "bases must share the ambient dimension and have 1..=n columns",
        )?;
        let bases = bases.iter().map(orthonormalize).collect();
        Ok(Self::from_kind(ModelKind::SubspaceUnion { bases }))
    }

    pub fn ball(n: usize) -> Result<Self> {
        check(n >= 1, "n", "dimension must be >= 1")?;
        Ok(Self::from_kind(ModelKind::Ball { n }))
    }

    /// Finite point set; `radius` is set to the largest point norm.
    pub fn finite_cloud(points: Vec<Vec<f64>>) -> Result<Self> {
        check(!points.is_empty(), "points", "need at least one point")?;
        let n = points[0].len();
        check(
            n >= 1 && points.iter().all(|p| p.len() == n && p.iter().all(|v| v.is_finite())),
            "points",
            "points must be finite and share one dimension",
        )?;
        let radius = points.iter().map(|p| lq_norm(p, 2.0)).fold(0.0, f64::max);
        let mut set = Self::from_kind(ModelKind::FiniteCloud { points });
        set.radius = if radius > 0.0 { radius } else { 1.0 };
        Ok(set)
    }

    pub fn dict_sparse(dict: DMatrix<f64>, s: usize) -> Result<Self> {
        check(dict.nrows() >= 1, "dict", "dictionary must have rows")?;
        check(s >= 1 && s <= dict.ncols(), "s", format!("need 1 <= s <= d, got s={s}, d={}", dict.ncols()))?;
        Ok(Self::from_kind(ModelKind::DictSparse { dict, s }))
    }

    pub fn with_radius(mut self, radius: f64) -> Result<Self> {
        check(radius.is_finite() && radius > 0.0, "radius", format!("must be finite and > 0, got {radius}"))?;
        self.radius = radius;
        Ok(self)
    }

    /// Norm in which the radius and pair distances are measured.
    pub fn with_q(mut self, q: f64) -> Result<Self> {
        check(q >= 1.0, "q", format!("must be >= 1, got {q}"))?;
        self.q = q;
        Ok(self)
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ModelKind::Sparse { .. } => "sparse",
            ModelKind::GroupSparse { .. } => "group_sparse",
            ModelKind::LowRank { .. } => "low_rank",
            ModelKind::LowRankJointSparse { .. } => "low_rank_joint_sparse",
            ModelKind::SubspaceUnion { .. } => "subspace_union",
            ModelKind::Ball { .. } => "ball",
            ModelKind::FiniteCloud { .. } => "finite_cloud",
            ModelKind::DictSparse { .. } => "dict_sparse",
        }
    }

    /// Ambient dimension.
    pub fn dim(&self) -> usize {
        match &self.kind {
            ModelKind::Sparse { n, .. } | ModelKind::Ball { n } => *n,
            ModelKind::GroupSparse { l, n, .. } => l * n,
            ModelKind::LowRank { n1, n2, .. } | ModelKind::LowRankJointSparse { n1, n2, .. } => n1 * n2,
            ModelKind::SubspaceUnion { bases } => bases[0].nrows(),
            ModelKind::FiniteCloud { points } => points[0].len(),
            ModelKind::DictSparse { dict, .. } => dict.nrows(),
        }
    }

    /// `(n1, n2)` for matrix-valued models.
    pub fn matrix_shape(&self) -> Option<(usize, usize)> {
        match self.kind {
            ModelKind::LowRank { n1, n2, .. } | ModelKind::LowRankJointSparse { n1, n2, .. } => Some((n1, n2)),
            _ => None,
        }
    }

    fn random_piece<R: Rng + ?Sized>(&self, rng: &mut R) -> Piece {
        match &self.kind {
            ModelKind::Sparse { s, n } => {
                let mut idx = sample(rng, *n, *s).into_vec();
                idx.sort_unstable();
                Piece::Coords(idx)
            }
            ModelKind::GroupSparse { s, l, n } => {
                let mut groups = sample(rng, *n, *s).into_vec();
                groups.sort_unstable();
                Piece::Coords(groups.iter().flat_map(|g| g * l..(g + 1) * l).collect())
            }
            ModelKind::Ball { n } => Piece::Coords((0..*n).collect()),
            ModelKind::LowRank { r, n1, n2 } => {
                let left = orthonormalize(&gaussian_matrix(*n1, *r, rng));
                let right = orthonormalize(&gaussian_matrix(*n2, *r, rng));
                Piece::Basis(kron_basis(&left, &right))
            }
            ModelKind::LowRankJointSparse { r, s, n1, n2 } => {
                let rows = sample(rng, *n1, *s).into_vec();
                let g = orthonormalize(&gaussian_matrix(*s, *r, rng));
                let mut left = DMatrix::zeros(*n1, *r);
                for (k, &row) in rows.iter().enumerate() {
                    for j in 0..*r {
                        left[(row, j)] = g[(k, j)];
                    }
                }
                let right = orthonormalize(&gaussian_matrix(*n2, *r, rng));
                Piece::Basis(kron_basis(&left, &right))
            }
            ModelKind::SubspaceUnion { bases } => Piece::Basis(bases[rng.random_range(0..bases.len())].clone()),
            ModelKind::DictSparse { dict, s } => {
                let atoms = sample(rng, dict.ncols(), *s).into_vec();
                Piece::Basis(orthonormalize(&columns(dict, &atoms)))
            }
            ModelKind::FiniteCloud { .. } => unreachable!("finite clouds have no linear pieces"),
        }
    }

    fn scaled_draw<R: Rng + ?Sized>(&self, piece: &Piece, norm: f64, rng: &mut R) -> Vec<f64> {
        let n = self.dim();
        loop {
            let mut x = piece.draw(n, rng);
            let cur = lq_norm(&x, self.q);
            if cur > 0.0 {
                let f = norm / cur;
                x.iter_mut().for_each(|v| *v *= f);
                return x;
            }
        }
    }

    /// A random element of the set. Structured samples have `‖x‖_q = radius`;
    /// ball samples lie inside the ball.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.kind {
            ModelKind::FiniteCloud { points } => points[rng.random_range(0..points.len())].clone(),
            ModelKind::Ball { n } => {
                let piece = self.random_piece(rng);
                let scale = self.radius * rng.random::<f64>().powf(1.0 / *n as f64);
                self.scaled_draw(&piece, scale, rng)
            }
            _ => {
                let piece = self.random_piece(rng);
                self.scaled_draw(&piece, self.radius, rng)
            }
        }
    }

    /// Two elements with `‖x − x'‖_q = distance`, drawn from one linear piece.
    pub fn sample_pair<R: Rng + ?Sized>(&self, distance: f64, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
        if !(distance.is_finite() && distance >= 0.0) {
            return Err(Error::param("distance", format!("must be finite and >= 0, got {distance}")));
        }
        if distance > 2.0 * self.radius {
            return Err(Error::param(
                "distance",
                format!("{distance} exceeds the diameter {}", 2.0 * self.radius),
            ));
        }
        if let ModelKind::FiniteCloud { points } = &self.kind {
            if distance != 0.0 {
                return Err(Error::Unsupported("finite clouds only provide pairs at distance 0".into()));
            }
            let x = points[rng.random_range(0..points.len())].clone();
            return Ok((x.clone(), x));
        }
        let piece = self.random_piece(rng);
        let half = distance / 2.0;
        let u = self.scaled_draw(&piece, 1.0, rng);
        let center_norm = rng.random::<f64>() * (self.radius - half);
        let v = self.scaled_draw(&piece, center_norm, rng);
        let x = v.iter().zip(&u).map(|(a, b)| a + half * b).collect();
        let x_prime = v.iter().zip(&u).map(|(a, b)| a - half * b).collect();
        Ok((x, x_prime))
    }

    /// Membership test with relative tolerance `tol` on norms and residuals.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        if x.len() != self.dim() || x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        let norm = lq_norm(x, self.q);
        if norm > self.radius * (1.0 + tol) {
            return false;
        }
        let scale = lq_norm(x, 2.0).max(f64::MIN_POSITIVE);
        match &self.kind {
            ModelKind::Sparse { s, .. } => x.iter().filter(|&&v| v != 0.0).count() <= *s,
            ModelKind::GroupSparse { s, l, .. } => {
                x.chunks_exact(*l).filter(|g| g.iter().any(|&v| v != 0.0)).count() <= *s
            }
            ModelKind::Ball { .. } => true,
            ModelKind::LowRank { r, n1, n2 } => {
                singular_values(x, *n1, *n2).iter().filter(|&&v| v > RANK_TOL * scale.max(1.0)).count() <= *r
            }
            ModelKind::LowRankJointSparse { r, s, n1, n2 } => {
                let rows = x.chunks_exact(*n2).filter(|row| row.iter().any(|&v| v != 0.0)).count();
                rows <= *s
                    && singular_values(x, *n1, *n2)
                        .iter()
                        .filter(|&&v| v > RANK_TOL * scale.max(1.0))
                        .count()
                        <= *r
            }
            ModelKind::SubspaceUnion { bases } => bases.iter().any(|b| residual_norm(b, x) <= tol * scale),
            ModelKind::DictSparse { dict, s } => {
                if binomial(dict.ncols(), *s) > ENUMERATION_CAP {
                    return false;
                }
                let mut found = false;
                for_each_subset(dict.ncols(), *s, |atoms| {
                    if !found {
                        found = residual_norm(&orthonormalize(&columns(dict, atoms)), x) <= tol * scale;
                    }
                });
                found
            }
            ModelKind::FiniteCloud { points } => points
                .iter()
                .any(|p| p.iter().zip(x).all(|(a, b)| (a - b).abs() <= tol * scale.max(1.0))),
        }
    }

    /// `sup |⟨g, u⟩|` over the set intersected with the unit `ℓ2` ball
    /// (ball: over the ball of the set's radius; finite cloud: over its points).
    pub fn support_function(&self, g: &[f64]) -> Result<f64> {
        Error::check_len("support function input", self.dim(), g.len())?;
        let value = match &self.kind {
            ModelKind::Sparse { s, .. } => top_norm(g.iter().map(|v| v.abs()).collect(), *s),
            ModelKind::GroupSparse { s, l, .. } => {
                let energies: Vec<f64> = g.chunks_exact(*l).map(|c| lq_norm(c, 2.0)).collect();
                top_norm(energies, *s)
            }
            ModelKind::LowRank { r, n1, n2 } => top_norm(singular_values(g, *n1, *n2), *r),
            ModelKind::Ball { .. } => lq_norm(g, 2.0) * self.radius,
            ModelKind::SubspaceUnion { bases } => bases.iter().map(|b| projection_norm(b, g)).fold(0.0, f64::max),
            ModelKind::FiniteCloud { points } => points
                .iter()
                .map(|p| p.iter().zip(g).map(|(a, b)| a * b).sum::<f64>().abs())
                .fold(0.0, f64::max),
            ModelKind::DictSparse { dict, s } => {
                self.check_enumerable(dict.ncols(), *s)?;
                let mut best = 0.0f64;
                for_each_subset(dict.ncols(), *s, |atoms| {
                    best = best.max(projection_norm(&orthonormalize(&columns(dict, atoms)), g));
                });
                best
            }
            ModelKind::LowRankJointSparse { r, s, n1, n2 } => {
                self.check_enumerable(*n1, *s)?;
                let mut best = 0.0f64;
                for_each_subset(*n1, *s, |rows| {
                    let sub: Vec<f64> = rows.iter().flat_map(|&i| g[i * n2..(i + 1) * n2].iter().copied()).collect();
                    best = best.max(top_norm(singular_values(&sub, *s, *n2), *r));
                });
                best
            }
        };
        Ok(value)
    }

    fn check_enumerable(&self, n: usize, k: usize) -> Result<()> {
        if binomial(n, k) > ENUMERATION_CAP {
            return Err(Error::Unsupported(format!(
                "{} support function needs {n} choose {k} enumerations (cap {ENUMERATION_CAP})",
                self.name()
            )));
        }
        Ok(())
    }

    /// Monte Carlo Gaussian mean width: `(mean, standard error)` of the
    /// support function over `trials` standard normal vectors.
    pub fn mean_width_mc(&self, trials: usize, seed: u64) -> Result<(f64, f64)> {
        if trials < 100 {
            return Err(Error::param("trials", format!("need at least 100, got {trials}")));
        }
        let n = self.dim();
        let values: Vec<f64> = (0..trials as u64)
            .into_par_iter()
            .map(|t| {
                let mut rng = stream(seed, "width", &[t]);
                let g: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                self.support_function(&g)
            })
            .collect::<Result<_>>()?;
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
        Ok((mean, (var / k).sqrt()))
    }

    /// Upper bound on the `ℓq` Kolmogorov entropy `H_q(K, η)`.
    pub fn entropy_bound(&self, eta: f64, q: f64) -> Result<f64> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::param("eta", format!("must be finite and > 0, got {eta}")));
        }
        if q.is_nan() || q < 1.0 {
            return Err(Error::param("q", format!("must be >= 1, got {q}")));
        }
        let r = self.radius;
        let log_cover = (1.0 + 2.0 * r / eta).ln();
        let stirling = |n: usize, s: usize| s as f64 * (std::f64::consts::E * n as f64 / s as f64).ln();
        let need_l2 = |name: &str| -> Result<()> {
            if q == 2.0 {
                Ok(())
            } else {
                Err(Error::Unsupported(format!("{name} entropy bound is only available for q = 2, got q = {q}")))
            }
        };
        let h = match &self.kind {
            ModelKind::Sparse { s, n } => stirling(*n, *s) * log_cover,
            ModelKind::GroupSparse { s, l, n } => (*s * *l) as f64 * log_cover + stirling(*n, *s) * log_cover,
            ModelKind::DictSparse { dict, s } => stirling(dict.ncols(), *s) * log_cover,
            ModelKind::SubspaceUnion { bases } => {
                let k = bases.iter().map(|b| b.ncols()).max().unwrap_or(0) as f64;
                (k + (bases.len() as f64).ln()) * log_cover
            }
            ModelKind::Ball { n } => *n as f64 * log_cover,
            ModelKind::FiniteCloud { points } => (points.len() as f64).ln(),
            ModelKind::LowRank { r: rank, n1, n2 } => {
                need_l2("low_rank")?;
                (rank * (n1 + n2)) as f64 * (1.0 + r / eta).ln()
            }
            ModelKind::LowRankJointSparse { r: rank, s, n1, n2 } => {
                need_l2("low_rank_joint_sparse")?;
                ((rank * (s + n2)) as f64 + stirling(*n1, *s)) * (1.0 + r / eta).ln()
            }
        };
        Ok(h)
    }

    /// Measurement count `ceil(C ε⁻² H_q(K, η))` for the given guarantee.
    pub fn required_m(&self, prop: Proposition, epsilon: f64, cfg: &QuantConfig, c: f64, q: f64) -> Result<u64> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::param("epsilon", format!("must lie in (0, 1), got {epsilon}")));
        }
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::param("C", format!("must be finite and > 0, got {c}")));
        }
        let eta = match prop {
            Proposition::P1 | Proposition::P3 => cfg.delta() * epsilon * epsilon,
            Proposition::P2 => cfg.delta() * epsilon.powf(1.5),
        };
        if prop != Proposition::P1 && q != 2.0 {
            return Err(Error::Unsupported(format!("{prop:?} is stated for q = 2, got q = {q}")));
        }
        let h = self.entropy_bound(eta, q)?;
        let m = (c * h / (epsilon * epsilon)).ceil();
        if !(m.is_finite() && m < u64::MAX as f64) {
            return Err(Error::Domain(format!("measurement count {m} is not representable")));
        }
        Ok((m as u64).max(1))
    }
}

/// `vec(L_i R_jᵀ)` for all column pairs, row-major vectorization.
fn kron_basis(left: &DMatrix<f64>, right: &DMatrix<f64>) -> DMatrix<f64> {
    let (n1, n2, r) = (left.nrows(), right.nrows(), left.ncols());
    DMatrix::from_fn(n1 * n2, r * r, |idx, col| {
        let (a, b) = (idx / n2, idx % n2);
        let (i, j) = (col / r, col % r);
        left[(a, i)] * right[(b, j)]
    })
}

/// Sudakov bound `w² / η²` on the `ℓ2` entropy from a mean width `w`.
pub fn sudakov_bound(width: f64, eta: f64) -> Result<f64> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::param("eta", format!("must be finite and > 0, got {eta}")));
    }
    if !(width.is_finite() && width >= 0.0) {
        return Err(Error::param("width", format!("must be finite and >= 0, got {width}")));
    }
    Ok((width / eta).powi(2))
}

/// Entropy of a union of pieces: `max_i H_i + ln T`.
pub fn union_bound(pieces: &[f64]) -> Result<f64> {
    if pieces.is_empty() {
        return Err(Error::param("pieces", "need at least one piece"));
    }
    Ok(pieces.iter().copied().fold(f64::NEG_INFINITY, f64::max) + (pieces.len() as f64).ln())
}

impl fmt::Display for ModelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ModelKind::Sparse { s, n } => write!(f, "sparse:{s}:{n}"),
            ModelKind::GroupSparse { s, l, n } => write!(f, "group_sparse:{s}:{l}:{n}"),
            ModelKind::LowRank { r, n1, n2 } => write!(f, "low_rank:{r}:{n1}:{n2}"),
            ModelKind::LowRankJointSparse { r, s, n1, n2 } => write!(f, "low_rank_joint_sparse:{r}:{s}:{n1}:{n2}"),
            ModelKind::Ball { n } => write!(f, "ball:{n}"),
            ModelKind::SubspaceUnion { bases } => write!(f, "subspace_union[{}]", bases.len()),
            ModelKind::FiniteCloud { points } => write!(f, "finite_cloud[{}]", points.len()),
            ModelKind::DictSparse { dict, s } => write!(f, "dict_sparse[{}x{}]:{s}", dict.nrows(), dict.ncols()),
        }
    }
}

/// Parses `kind:params` for the parametric kinds, e.g. `sparse:4:1024`,
/// `group_sparse:2:4:16`, `low_rank:2:8:8`, `low_rank_joint_sparse:1:3:8:8`,
/// `ball:16`. Radius 1, `q = 2`.
impl FromStr for ModelSet {
    type Err = Error;

    fn from_str(spec: &str) -> Result<Self> {
        let mut parts = spec.split(':');
        let kind = parts.next().unwrap_or_default().to_ascii_lowercase();
        let args: Vec<usize> = parts
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::param("model", format!("`{p}` is not a non-negative integer in `{spec}`")))
            })
            .collect::<Result<_>>()?;
        let arity = |k: usize| -> Result<()> {
            check(args.len() == k, "model", format!("`{kind}` takes {k} integer parameters, got `{spec}`"))
        };
        match kind.as_str() {
            "sparse" => arity(2).and_then(|_| ModelSet::sparse(args[0], args[1])),
            "group" | "group_sparse" => arity(3).and_then(|_| ModelSet::group_sparse(args[0], args[1], args[2])),
            "low_rank" | "lowrank" => arity(3).and_then(|_| ModelSet::low_rank(args[0], args[1], args[2])),
            "lrjs" | "low_rank_joint_sparse" => {
                arity(4).and_then(|_| ModelSet::low_rank_joint_sparse(args[0], args[1], args[2], args[3]))
            }
            "ball" => arity(1).and_then(|_| ModelSet::ball(args[0])),
            other => Err(Error::param(
                "model",
                format!("unknown or non-parametric model kind `{other}`"),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        stream(seed, "modelsets-test", &[])
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    fn all_kinds() -> Vec<ModelSet> {
        let mut r = rng(0);
        vec![
            ModelSet::sparse(2, 5).unwrap(),
            ModelSet::group_sparse(2, 3, 4).unwrap(),
            ModelSet::low_rank(1, 4, 4).unwrap(),
            ModelSet::low_rank_joint_sparse(1, 2, 4, 3).unwrap(),
            ModelSet::subspace_union(vec![gaussian_matrix(6, 2, &mut r), gaussian_matrix(6, 3, &mut r)]).unwrap(),
            ModelSet::ball(3).unwrap().with_radius(2.0).unwrap(),
            ModelSet::finite_cloud(vec![vec![1.0, 0.0], vec![0.5, -0.5]]).unwrap(),
            ModelSet::dict_sparse(gaussian_matrix(4, 6, &mut r), 2).unwrap(),
        ]
    }

    #[test]
    fn sparse_sample() {
        let set = ModelSet::sparse(2, 5).unwrap();
        let mut r = rng(1);
        for _ in 0..100 {
            let x = set.sample_point(&mut r);
            assert!(x.iter().filter(|&&v| v != 0.0).count() <= 2);
            assert!((lq_norm(&x, 2.0) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn low_rank_sample() {
        let set = ModelSet::low_rank(1, 4, 4).unwrap();
        let x = set.sample_point(&mut rng(2));
        let sv = singular_values(&x, 4, 4);
        assert!(close(sv[0], lq_norm(&x, 2.0), 1e-12));
        assert!(sv[1] <= 1e-9);
    }

    #[test]
    fn membership_of_samples() {
        let mut r = rng(3);
        for set in all_kinds() {
            for _ in 0..10_000 {
                let x = set.sample_point(&mut r);
                assert!(set.contains(&x, 1e-9), "{set}: {x:?}");
            }
        }
    }

    #[test]
    fn pairs_at_distance() {
        let mut r = rng(4);
        for set in all_kinds() {
            if matches!(set.kind(), ModelKind::FiniteCloud { .. }) {
                let (x, y) = set.sample_pair(0.0, &mut r).unwrap();
                assert_eq!(x, y);
                assert!(set.sample_pair(0.1, &mut r).is_err());
                continue;
            }
            for d in [0.0, 0.3, 1.2, 2.0 * set.radius()] {
                let (x, y) = set.sample_pair(d, &mut r).unwrap();
                let diff: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
                assert!((lq_norm(&diff, set.q()) - d).abs() <= 1e-10 * d.max(1e-300), "{set} d={d}");
                assert!(set.contains(&x, 1e-9) && set.contains(&y, 1e-9), "{set} d={d}");
                if d == 0.0 {
                    assert_eq!(x, y);
                }
            }
            assert!(set.sample_pair(2.0 * set.radius() + 1e-6, &mut r).is_err());
            assert!(set.sample_pair(-1.0, &mut r).is_err());
        }
    }

    #[test]
    fn sparse_pair_shares_support() {
        let set = ModelSet::sparse(2, 10).unwrap();
        let (x, y) = set.sample_pair(0.3, &mut rng(5)).unwrap();
        let supp = |v: &[f64]| v.iter().map(|&a| a != 0.0).collect::<Vec<_>>();
        assert_eq!(supp(&x), supp(&y));
        let diff: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        assert!((lq_norm(&diff, 2.0) - 0.3).abs() <= 1e-10 * 0.3);
    }

    #[test]
    fn low_rank_pair() {
        let set = ModelSet::low_rank(1, 8, 8).unwrap();
        let (x, y) = set.sample_pair(1.2, &mut rng(6)).unwrap();
        assert!(singular_values(&x, 8, 8)[1] <= 1e-9);
        assert!(singular_values(&y, 8, 8)[1] <= 1e-9);
        let diff: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        assert!(singular_values(&diff, 8, 8)[1] <= 1e-9);
        assert!((lq_norm(&diff, 2.0) - 1.2).abs() <= 1.2e-10);
    }

    #[test]
    fn l1_pairs() {
        let set = ModelSet::sparse(3, 20).unwrap().with_radius(0.5).unwrap().with_q(1.0).unwrap();
        let mut r = rng(7);
        for _ in 0..50 {
            let (x, y) = set.sample_pair(0.4, &mut r).unwrap();
            let diff: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            assert!((lq_norm(&diff, 1.0) - 0.4).abs() <= 4e-11);
            assert!(lq_norm(&x, 1.0) <= 0.5 + 1e-12 && lq_norm(&y, 1.0) <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn support_function_examples() {
        let s = ModelSet::sparse(2, 3).unwrap();
        assert!(close(s.support_function(&[3.0, -1.0, 2.0]).unwrap(), 13f64.sqrt(), 1e-15));
        let lr = ModelSet::low_rank(1, 2, 2).unwrap();
        assert!(close(lr.support_function(&[3.0, 0.0, 0.0, 1.0]).unwrap(), 3.0, 1e-12));
        let b = ModelSet::ball(2).unwrap();
        assert_eq!(b.support_function(&[3.0, 4.0]).unwrap(), 5.0);
        assert!(b.support_function(&[3.0]).is_err());
    }

    #[test]
    fn sparse_support_matches_enumeration() {
        let mut r = rng(8);
        for n in [3usize, 7, 12] {
            for s in 1..=3 {
                let set = ModelSet::sparse(s, n).unwrap();
                for _ in 0..20 {
                    let g: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
                    let mut best = 0.0f64;
                    for_each_subset(n, s, |idx| {
                        best = best.max(idx.iter().map(|&i| g[i] * g[i]).sum::<f64>().sqrt());
                    });
                    assert!((set.support_function(&g).unwrap() - best).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn low_rank_support_dominates_random_rank_one() {
        let (n1, n2) = (3, 4);
        let set = ModelSet::low_rank(1, n1, n2).unwrap();
        let mut r = rng(9);
        let g: Vec<f64> = (0..n1 * n2).map(|_| r.sample(StandardNormal)).collect();
        let exact = set.support_function(&g).unwrap();
        let mut best = 0.0f64;
        for _ in 0..100_000 {
            let u: Vec<f64> = (0..n1).map(|_| r.sample(StandardNormal)).collect();
            let v: Vec<f64> = (0..n2).map(|_| r.sample(StandardNormal)).collect();
            let (nu, nv) = (lq_norm(&u, 2.0), lq_norm(&v, 2.0));
            let ip: f64 = (0..n1 * n2).map(|k| g[k] * u[k / n2] * v[k % n2]).sum();
            best = best.max((ip / (nu * nv)).abs());
        }
        assert!(best <= exact * (1.0 + 1e-12));
        assert!(best >= 0.98 * exact, "{best} vs {exact}");
    }

    #[test]
    fn structured_support_functions() {
        let mut r = rng(10);
        let g: Vec<f64> = (0..12).map(|_| r.sample(StandardNormal)).collect();
        // group sparsity with unit groups is plain sparsity
        let gs = ModelSet::group_sparse(2, 1, 12).unwrap();
        let sp = ModelSet::sparse(2, 12).unwrap();
        assert!((gs.support_function(&g).unwrap() - sp.support_function(&g).unwrap()).abs() <= 1e-12);
        // identity dictionary is plain sparsity
        let ds = ModelSet::dict_sparse(DMatrix::identity(12, 12), 2).unwrap();
        assert!((ds.support_function(&g).unwrap() - sp.support_function(&g).unwrap()).abs() <= 1e-12);
        // coordinate subspaces
        let e = |cols: &[usize]| DMatrix::from_fn(12, cols.len(), |i, j| if i == cols[j] { 1.0 } else { 0.0 });
        let su = ModelSet::subspace_union(vec![e(&[0, 1]), e(&[5])]).unwrap();
        let expect = (g[0] * g[0] + g[1] * g[1]).sqrt().max(g[5].abs());
        assert!((su.support_function(&g).unwrap() - expect).abs() <= 1e-12);
        // full joint sparsity reduces to low rank
        let lrjs = ModelSet::low_rank_joint_sparse(1, 3, 3, 4).unwrap();
        let lr = ModelSet::low_rank(1, 3, 4).unwrap();
        assert!((lrjs.support_function(&g).unwrap() - lr.support_function(&g).unwrap()).abs() <= 1e-9);
        let fc = ModelSet::finite_cloud(vec![vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        assert_eq!(fc.support_function(&[0.5, 2.0]).unwrap(), 2.0);
    }

    #[test]
    fn enumeration_cap() {
        let ds = ModelSet::dict_sparse(DMatrix::identity(64, 64), 8).unwrap();
        assert!(matches!(ds.support_function(&[0.0; 64]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn mean_width_of_segment() {
        let (w, se) = ModelSet::ball(1).unwrap().mean_width_mc(100_000, 1).unwrap();
        assert!((w - (2.0 / std::f64::consts::PI).sqrt()).abs() <= 3.0 * se);
        let (w, se) = ModelSet::finite_cloud(vec![vec![1.0, 0.0, 0.0]]).unwrap().mean_width_mc(20_000, 2).unwrap();
        assert!((w - (2.0 / std::f64::consts::PI).sqrt()).abs() <= 3.0 * se);
        assert!(ModelSet::ball(1).unwrap().mean_width_mc(99, 1).is_err());
    }

    #[test]
    fn mean_width_is_seeded() {
        let set = ModelSet::sparse(3, 40).unwrap();
        assert_eq!(set.mean_width_mc(500, 9).unwrap(), set.mean_width_mc(500, 9).unwrap());
    }

    #[test]
    fn entropy_examples() {
        let set = ModelSet::sparse(4, 1024).unwrap();
        let h = set.entropy_bound(0.01, 2.0).unwrap();
        let oracle = 4.0 * (std::f64::consts::E * 256.0).ln() * 201f64.ln();
        assert!((h - oracle).abs() <= 1e-9);
        assert!((h - 138.8).abs() < 0.1);

        let coarse = set.entropy_bound(2.0, 2.0).unwrap();
        assert!(coarse <= 4.0 * (std::f64::consts::E * 256.0).ln() * 2f64.ln() + 1e-12);

        let lr = ModelSet::low_rank(2, 8, 8).unwrap();
        assert!(lr.entropy_bound(0.1, 2.0).is_ok());
        assert!(lr.entropy_bound(0.1, 1.0).is_err());
        assert!(set.entropy_bound(0.0, 2.0).is_err());

        let pieces = vec![h; 10];
        assert!((union_bound(&pieces).unwrap() - (h + 10f64.ln())).abs() <= 1e-12);

        assert_eq!(sudakov_bound(3.0, 0.5).unwrap(), 36.0);
    }

    #[test]
    fn required_m_examples() {
        let set = ModelSet::sparse(4, 1024).unwrap();
        let cfg = QuantConfig::new(1.0).unwrap();
        let h = 4.0 * (std::f64::consts::E * 256.0).ln() * 201f64.ln();
        let m = set.required_m(Proposition::P1, 0.1, &cfg, 1.0, 2.0).unwrap();
        assert_eq!(m, (100.0 * h).ceil() as u64);
        assert_eq!(m, 13885);
        let m2 = set.required_m(Proposition::P2, 0.3, &cfg, 1.0, 2.0).unwrap();
        let m3 = set.required_m(Proposition::P3, 0.3, &cfg, 1.0, 2.0).unwrap();
        assert!(m2 <= m3);
        assert!(set.required_m(Proposition::P2, 0.3, &cfg, 1.0, 1.0).is_err());
        assert!(set.required_m(Proposition::P1, 1.0, &cfg, 1.0, 2.0).is_err());
        assert!(set.required_m(Proposition::P1, 0.1, &cfg, 0.0, 2.0).is_err());
    }

    #[test]
    fn parse_models() {
        assert_eq!("sparse:4:1024".parse::<ModelSet>().unwrap(), ModelSet::sparse(4, 1024).unwrap());
        assert_eq!("lrjs:1:2:4:3".parse::<ModelSet>().unwrap().dim(), 12);
        assert_eq!("ball:7".parse::<ModelSet>().unwrap().to_string(), "ball:7");
        assert!("sparse:4".parse::<ModelSet>().is_err());
        assert!("sparse:9:4".parse::<ModelSet>().is_err());
        assert!("blob:1".parse::<ModelSet>().is_err());
    }

    proptest! {
        #[test]
        fn entropy_monotone_in_eta(s in 1usize..8, extra in 0usize..200, e1 in 1e-4f64..10.0, e2 in 1e-4f64..10.0) {
            let set = ModelSet::sparse(s, s + extra).unwrap();
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            prop_assert!(set.entropy_bound(lo, 2.0).unwrap() >= set.entropy_bound(hi, 2.0).unwrap());
        }

        #[test]
        fn required_m_monotone_in_epsilon(a in 0.01f64..0.99, b in 0.01f64..0.99, delta in 0.01f64..10.0) {
            let set = ModelSet::low_rank(2, 6, 5).unwrap();
            let cfg = QuantConfig::new(delta).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for prop in [Proposition::P1, Proposition::P2, Proposition::P3] {
                prop_assert!(set.required_m(prop, lo, &cfg, 1.0, 2.0).unwrap() >= set.required_m(prop, hi, &cfg, 1.0, 2.0).unwrap());
            }
        }
    }
}
