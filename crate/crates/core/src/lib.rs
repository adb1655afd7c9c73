//! Multi-modality image fusion with semantic channel pruning, geometric
//! affine modulation and text-guided channel perturbation, built on a small
//! reverse-mode autodiff engine.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod gam;
pub mod gradsuite;
pub mod io;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod params;
pub mod providers;
pub mod scpm;
pub mod selection;
pub mod synthetic;
pub mod tcpm;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use config::{Ablation, FusionConfig, RunConfig};
pub use error::{Error, Result};
pub use network::{FuseContext, FusionModel};
pub use params::{ParamId, ParamStore};
pub use providers::Providers;
pub use tensor::{Real, Shape, Tensor};
