pub mod autograd;
pub mod bench;
pub mod config;
pub mod embedding;
pub mod error;
pub mod flops;
pub mod heads;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod signal;
pub mod synth;
pub mod temporal;
pub mod tensor;
pub mod train;
pub mod unifier;

pub use autograd::{Graph, Var};
pub use config::{LossConfig, ModelConfig, ModelSize, TrainSchedule};
pub use error::{LunaError, Result};
pub use flops::FlopLedger;
pub use model::Luna;
pub use params::{ParamId, ParamStore};
pub use synth::Dataset;
pub use tensor::{Precision, Tensor};
