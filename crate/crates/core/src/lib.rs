//! Quantized random embeddings.
//!
//! A vector `x` is mapped to integer cell indices `floor((Φx + ξ) / δ)` where
//! `Φ` is a random linear operator with a restricted isometry property and `ξ`
//! is a uniform dither on `[0, δ)`. Distances between the resulting codes
//! estimate the distances between the original vectors with a multiplicative
//! and an additive distortion; the additive part shrinks as the number of
//! measurements grows.
//!
//! Modules:
//!
//! - [`quantizer`]: the mid-rise quantizer, dither sampling, soft distances and
//!   pre-metrics.
//! - [`linops`]: measurement operator families.
//! - [`embeddings`]: single and bi-dithered maps, rank-one projections,
//!   distance estimators and the `QEMB` code file format.
//! - [`modelsets`]: low-complexity signal sets, mean width and entropy
//!   calculators.
//! - [`verify`]: Monte Carlo distortion measurements and identity checks.
//! - [`rng`]: keyed deterministic random streams.

pub mod embeddings;
pub mod error;
pub mod linops;
pub mod modelsets;
pub mod quantizer;
pub mod rng;
pub mod verify;

pub use embeddings::{CodeBlock, DistanceMode, Layout};
pub use error::{Error, Result};
pub use linops::{BuildOptions, Family, LinOp, RipProfile, RopOp};
pub use modelsets::{ModelKind, ModelSet};
pub use quantizer::{QuantConfig, SoftParam};
