//! Library surface of the pipeline CLI, exposed so integration and
//! acceptance tests can drive the commands in-process.

pub mod commands;
pub mod config;
pub mod paths;

pub use commands::{cmd_adapt, cmd_eval, cmd_fit_oracle, cmd_gen_data, cmd_pretrain, cmd_ablate};
pub use commands::{exit_code, AblateWhich, Ctx};
pub use config::{resolve_workdir, RunConfig};
