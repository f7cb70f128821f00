//! Dithered quantized maps, distance estimation over codes and the binary
//! code format.
//!
//! A [`CodeBlock`] stores cell indices `k`; the quantized value of a cell is
//! `δ(k + 1/2)`. All estimators accumulate index differences exactly in
//! integers and apply the `δ` scaling once.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linops::{LinOp, RopOp};
use crate::quantizer::QuantConfig;

pub const MAGIC: &[u8; 4] = b"QEMB";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Single,
    Bidither,
}

impl Layout {
    pub fn cols(self) -> usize {
        match self {
            Layout::Single => 1,
            Layout::Bidither => 2,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Layout::Single => 1,
            Layout::Bidither => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMode {
    L1,
    L2sq,
    Circ,
}

impl DistanceMode {
    pub fn name(self) -> &'static str {
        match self {
            DistanceMode::L1 => "l1",
            DistanceMode::L2sq => "l2sq",
            DistanceMode::Circ => "circ",
        }
    }

    /// Layout a block must have to be compared in this mode.
    pub fn layout(self) -> Layout {
        match self {
            DistanceMode::Circ => Layout::Bidither,
            _ => Layout::Single,
        }
    }
}

impl fmt::Display for DistanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(DistanceMode::L1),
            "l2sq" => Ok(DistanceMode::L2sq),
            "circ" => Ok(DistanceMode::Circ),
            other => Err(Error::param("mode", format!("unknown distance mode `{other}`"))),
        }
    }
}

/// Quantized codes of one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeBlock {
    layout: Layout,
    m: usize,
    delta: f64,
    /// `m × cols`, row-major.
    codes: Vec<i64>,
    op_seed: u64,
    dither_seed: u64,
}

impl CodeBlock {
    pub fn new(layout: Layout, delta: f64, codes: Vec<i64>, op_seed: u64, dither_seed: u64) -> Result<Self> {
        QuantConfig::new(delta)?;
        let cols = layout.cols();
        if !codes.len().is_multiple_of(cols) {
            return Err(Error::param("codes", format!("length {} is not a multiple of {cols}", codes.len())));
        }
        Ok(Self {
            layout,
            m: codes.len() / cols,
            delta,
            codes,
            op_seed,
            dither_seed,
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.layout.cols()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn codes(&self) -> &[i64] {
        &self.codes
    }

    pub fn op_seed(&self) -> u64 {
        self.op_seed
    }

    pub fn dither_seed(&self) -> u64 {
        self.dither_seed
    }

    pub fn with_seeds(mut self, op_seed: u64, dither_seed: u64) -> Self {
        self.op_seed = op_seed;
        self.dither_seed = dither_seed;
        self
    }

    /// Index at row `i`, column `j`.
    pub fn index(&self, i: usize, j: usize) -> i64 {
        self.codes[i * self.cols() + j]
    }

    /// Quantized values `δ(k + 1/2)`, row-major.
    pub fn values(&self) -> Vec<f64> {
        self.codes.iter().map(|&k| self.delta * (k as f64 + 0.5)).collect()
    }

    pub fn comparable(&self, other: &CodeBlock) -> bool {
        self.layout == other.layout && self.m == other.m && self.delta.to_bits() == other.delta.to_bits()
    }
}

fn check_dither(values: &[f64], cfg: &QuantConfig) -> Result<()> {
    let delta = cfg.delta();
    match values.iter().position(|&v| !(v >= 0.0 && v < delta)) {
        Some(i) => Err(Error::Domain(format!(
            "dither entry {i} = {} outside [0, {delta})",
            values[i]
        ))),
        None => Ok(()),
    }
}

fn quantize_all(pre: impl Iterator<Item = f64>, cfg: &QuantConfig) -> Result<Vec<i64>> {
    pre.map(|v| cfg.index(v)).collect()
}

/// `A(x) = Q(Φx + ξ)`.
pub fn embed(op: &LinOp, x: &[f64], dither: &[f64], cfg: &QuantConfig) -> Result<CodeBlock> {
    Error::check_len("dither", op.m(), dither.len())?;
    check_dither(dither, cfg)?;
    let y = op.matvec(x)?;
    let codes = quantize_all(y.iter().zip(dither).map(|(a, b)| a + b), cfg)?;
    CodeBlock::new(Layout::Single, cfg.delta(), codes, op.seed(), 0)
}

/// `Ā(x) = Q(Φx 1ᵀ + Ξ)` with `Ξ` given as `m` rows of two dithers.
pub fn embed_bidither(op: &LinOp, x: &[f64], xi: &[[f64; 2]], cfg: &QuantConfig) -> Result<CodeBlock> {
    Error::check_len("bi-dither rows", op.m(), xi.len())?;
    check_dither(xi.as_flattened(), cfg)?;
    let y = op.matvec(x)?;
    let codes = quantize_all(
        y.iter().zip(xi).flat_map(|(a, row)| [a + row[0], a + row[1]]),
        cfg,
    )?;
    CodeBlock::new(Layout::Bidither, cfg.delta(), codes, op.seed(), 0)
}

/// `Q(κ·(a_iᵀ U b_i) + ξ_i)`.
pub fn embed_rop(op: &RopOp, u: &DMatrix<f64>, dither: &[f64], cfg: &QuantConfig) -> Result<CodeBlock> {
    Error::check_len("dither", op.m(), dither.len())?;
    check_dither(dither, cfg)?;
    let y = op.apply(u)?;
    let kappa = op.kappa();
    let codes = quantize_all(y.iter().zip(dither).map(|(a, b)| kappa * a + b), cfg)?;
    CodeBlock::new(Layout::Single, cfg.delta(), codes, 0, 0)
}

/// Embeds many vectors with one shared dither, in parallel.
pub fn embed_many(op: &LinOp, xs: &[Vec<f64>], dither: &[f64], cfg: &QuantConfig) -> Result<Vec<CodeBlock>> {
    xs.par_iter().map(|x| embed(op, x, dither, cfg)).collect()
}

/// Distance estimate between two comparable blocks.
///
/// * `l1`: `(δ/m) Σ |k_i − k'_i|`
/// * `l2sq`: `(δ²/m) Σ (k_i − k'_i)²`
/// * `circ`: `(δ²/m) Σ |k_i1 − k'_i1| · |k_i2 − k'_i2|`
pub fn estimate_distance(c: &CodeBlock, c_prime: &CodeBlock, mode: DistanceMode) -> Result<f64> {
    if !c.comparable(c_prime) {
        return Err(Error::Incompatible(format!(
            "(layout, m, delta) = ({:?}, {}, {}) vs ({:?}, {}, {})",
            c.layout, c.m, c.delta, c_prime.layout, c_prime.m, c_prime.delta
        )));
    }
    if c.layout != mode.layout() {
        return Err(Error::Incompatible(format!(
            "mode {mode} needs {:?} layout, blocks are {:?}",
            mode.layout(),
            c.layout
        )));
    }
    if c.m == 0 {
        return Ok(0.0);
    }
    let diff = |a: i64, b: i64| (i128::from(a) - i128::from(b)).unsigned_abs();
    let (sum, scale): (u128, f64) = match mode {
        DistanceMode::L1 => (
            c.codes.iter().zip(&c_prime.codes).map(|(&a, &b)| diff(a, b)).sum(),
            c.delta,
        ),
        DistanceMode::L2sq => (
            c.codes
                .iter()
                .zip(&c_prime.codes)
                .map(|(&a, &b)| diff(a, b).pow(2))
                .sum(),
            c.delta * c.delta,
        ),
        DistanceMode::Circ => (
            c.codes
                .chunks_exact(2)
                .zip(c_prime.codes.chunks_exact(2))
                .map(|(r, s)| diff(r[0], s[0]) * diff(r[1], s[1]))
                .sum(),
            c.delta * c.delta,
        ),
    };
    Ok(scale * sum as f64 / c.m as f64)
}

/// `l1` estimate for rank-one projection codes built with scaling `κ`.
pub fn estimate_distance_rop(c: &CodeBlock, c_prime: &CodeBlock, kappa: f64) -> Result<f64> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::param("kappa", format!("must be finite and > 0, got {kappa}")));
    }
    Ok(estimate_distance(c, c_prime, DistanceMode::L1)? / kappa)
}

fn width_for(codes: &[i64]) -> Result<u8> {
    let (lo, hi) = codes
        .iter()
        .fold((0i64, 0i64), |(lo, hi), &k| (lo.min(k), hi.max(k)));
    if lo >= i64::from(i8::MIN) && hi <= i64::from(i8::MAX) {
        Ok(0)
    } else if lo >= i64::from(i16::MIN) && hi <= i64::from(i16::MAX) {
        Ok(1)
    } else if lo >= i64::from(i32::MIN) && hi <= i64::from(i32::MAX) {
        Ok(2)
    } else {
        Err(Error::Format(format!("indices in [{lo}, {hi}] overflow 32-bit storage")))
    }
}

pub fn serialize(c: &CodeBlock) -> Result<Vec<u8>> {
    let width = width_for(&c.codes)?;
    let bytes_per = 1usize << width;
    let mut out = Vec::with_capacity(HEADER_LEN + c.codes.len() * bytes_per);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[FORMAT_VERSION, c.layout.tag(), width, 0]);
    out.extend_from_slice(&(c.m as u64).to_le_bytes());
    out.extend_from_slice(&c.delta.to_le_bytes());
    out.extend_from_slice(&c.op_seed.to_le_bytes());
    out.extend_from_slice(&c.dither_seed.to_le_bytes());
    for &k in &c.codes {
        // width_for guarantees the narrowing casts are lossless
        match width {
            0 => out.extend_from_slice(&(k as i8).to_le_bytes()),
            1 => out.extend_from_slice(&(k as i16).to_le_bytes()),
            _ => out.extend_from_slice(&(k as i32).to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn deserialize(bytes: &[u8]) -> Result<CodeBlock> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let layout = match bytes[5] {
        1 => Layout::Single,
        2 => Layout::Bidither,
        other => return Err(Error::Format(format!("unknown layout tag {other}"))),
    };
    let width = bytes[6];
    if width > 2 {
        return Err(Error::Format(format!("unknown width tag {width}")));
    }
    let word = |at: usize| -> [u8; 8] { bytes[at..at + 8].try_into().expect("8-byte slice") };
    let m = u64::from_le_bytes(word(8));
    let delta = f64::from_le_bytes(word(16));
    let op_seed = u64::from_le_bytes(word(24));
    let dither_seed = u64::from_le_bytes(word(32));

    let bytes_per = 1usize << width;
    let count = usize::try_from(m)
        .ok()
        .and_then(|m| m.checked_mul(layout.cols()))
        .ok_or_else(|| Error::Format(format!("m = {m} is too large")))?;
    let payload = &bytes[HEADER_LEN..];
    let expected = count
        .checked_mul(bytes_per)
        .ok_or_else(|| Error::Format(format!("m = {m} is too large")))?;
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: {} of {expected} bytes",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!("{} trailing bytes", payload.len() - expected)));
    }
    let codes = payload
        .chunks_exact(bytes_per)
        .map(|b| match width {
            0 => i64::from(i8::from_le_bytes([b[0]])),
            1 => i64::from(i16::from_le_bytes([b[0], b[1]])),
            _ => i64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        })
        .collect();
    CodeBlock::new(layout, delta, codes, op_seed, dither_seed).map_err(|e| Error::Format(e.to_string()))
}
