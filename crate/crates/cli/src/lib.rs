//! Configuration, orchestration and file output for the `mfg` binary.

pub mod bundle;
pub mod config;
pub mod emit;
pub mod plot;
pub mod run;
pub mod verify;

pub use bundle::{Assertion, ResultBundle, Status};
pub use config::{parse_config, to_toml, Command, ConfigError, RunConfig};
pub use emit::emit;
pub use run::run;

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_VAR: &str = "MFG_OUT_DIR";

/// `--out`, then the environment variable, then the configuration, then `./out`.
pub fn output_dir(flag: Option<&std::path::Path>, env: Option<std::ffi::OsString>, config: &RunConfig) -> std::path::PathBuf {
    flag.map(|p| p.to_path_buf()).or(env.filter(|s| !s.is_empty()).map(Into::into)).or_else(|| config.output_dir.clone()).unwrap_or_else(|| "out".into())
}
