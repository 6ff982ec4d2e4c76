//! Misra-Gries heavy-hitter sketches with differentially private release.
//!
//! - [`mg`]: the zero-retaining sketch (plus the standard variant).
//! - [`release`]: (ε, δ)-DP release with shared noise and a threshold.
//! - [`pure`]: ε-DP release of the offset-corrected sketch.
//! - [`merge`]: mergeable-summary combination and release of merged sketches.
//! - [`oracle`]: brute-force oracles, exhaustive checkers and a statistical
//!   DP auditor.
//! - [`io`]: file formats and the command implementations behind the CLI.

pub mod error;
pub mod io;
pub mod merge;
pub mod mg;
pub mod noise;
pub mod oracle;
pub mod pure;
pub mod release;
pub mod summary;

pub use error::{Error, Result};
pub use merge::{merge, MergedSketch};
pub use mg::{Branch, Sketch, StandardSketch};
pub use noise::{NoiseBackend, NoiseSampler, NoiseSource, Scale, ZeroNoise};
pub use pure::{postprocess, privatize_pure, OffsetSketch};
pub use release::{
    error_bound, privatize_mg, privatize_standard_mg, threshold_pmg, threshold_standard,
    PrivacyParams,
};
pub use summary::{ErrorBound, Mechanism, PrivateSummary};
