//! Task streams and the end-to-end training strategies.

mod config;
mod run;
mod stream;

pub use config::{
    setting_name, Budget, ClipGeometry, DataConfig, Epochs, OptimizerConfig, PretrainEpochs, RunConfig, StrategyKind,
};
pub use run::{run, run_iid, run_incremental, run_pretraining, run_rgb_buffer};
pub use stream::{Task, TaskStream};
