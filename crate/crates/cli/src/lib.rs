//! Command implementations behind the `distgate` binary.

pub mod commands;
pub mod config;
pub mod train;

pub use commands::{cmd_edt, cmd_end_to_end, cmd_eval, cmd_gate, cmd_infer, cmd_phantom_gen, cmd_train, Comparison};
pub use config::RunConfig;
pub use train::{GatingConfig, Mode, TrainConfig};
