//! Patient-specific energy landscapes over multiparametric MRI sequence
//! vectors.
//!
//! Each voxel is a point `u ∈ ℝ^d` (T1, T1c, T2, FLAIR, ADC). A compact
//! Fourier-feature/sine network `E(u)` is fitted to one baseline scan by
//! denoising score matching; its minima, barriers and curvature describe
//! tissue regimes, and later scans are measured against the frozen baseline
//! landscape (energy shift and drift along the healthy–tumour axis).

pub mod checkpoint;
pub mod dsm;
pub mod error;
pub mod geometry;
pub mod io;
pub mod longitudinal;
pub mod model;
pub mod norm;
pub mod phantom;
pub mod stats;
pub mod table;
pub mod train;

pub use error::{Error, Result};
pub use model::{Architecture, EnergyEvaluation, EnergyModel, Want};
pub use norm::{NormMethod, NormStats};
pub use table::VoxelTable;
pub use train::{train, TrainConfig, TrainTrace};
