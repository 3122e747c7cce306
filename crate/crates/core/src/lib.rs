//! Behavior recognition from short clips with channel-wise motion
//! enhancement (CMEM) and cascaded long-range motion integration (CLIM).

pub mod ablation;
pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod clim;
pub mod cmem;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod shift;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use clim::Clim;
pub use cmem::{AttentionForm, Cmem, CmemConfig};
pub use config::RunConfig;
pub use data::{Dataset, DatasetSpec, Split, Task};
pub use error::{Error, Result};
pub use network::{Consensus, ImgBlock, Network, NetworkConfig};
pub use nn::{Forward, Mode, ParamKind, ParamStore};
pub use shift::ShiftMode;
pub use tensor::{Element, Tensor};
pub use train::{EpochMetrics, SgdConfig, Trainer};
