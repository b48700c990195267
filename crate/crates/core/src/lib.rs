//! Firm-level economic complexity indicators from firm–product export data,
//! and the cross-sectional growth and profitability regressions built on them.
//!
//! The stages, in pipeline order:
//!
//! - [`ingest`]: typed, validated input tables.
//! - [`matrix`]: year-averaged export matrices, RCA and the binary matrix.
//! - [`prody`]: product logPRODY scores and firm EXPY.
//! - [`blocks`]: bipartite modularity, BRIM block detection and in/out-block
//!   diversification.
//! - [`relatedness`]: Sapling similarity and firm coherence.
//! - [`fitness`]: Fitness–Complexity and basket average complexity.
//! - [`econometrics`]: variable construction and OLS with HC1 errors.
//! - [`indicators`]: product tables from world trade and yearly firm
//!   indicators.
//! - [`figures`]: binned heatmaps and kernel regression curves.
//! - [`synth`]: synthetic economies with planted structure.
//! - [`pipeline`]: config-driven orchestration of all of the above.

pub mod error;
pub mod ingest;
pub mod matrix;
pub mod prody;
pub mod blocks;
pub mod relatedness;
pub mod fitness;
pub mod econometrics;
pub mod indicators;
pub mod figures;
pub mod synth;
pub mod pipeline;

pub use error::{Error, Result};
