//! Command-line driver: run configuration and subcommand dispatch.

pub mod config;
pub mod run;

pub use config::{MethodName, RunConfig};
pub use run::{dispatch, Command, Layout, ReconstructArgs};

/// Environment variable capping the number of compute threads.
pub const THREADS_ENV: &str = "PWD_LACT_THREADS";

/// Applies the thread cap from [`THREADS_ENV`], if set.
pub fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        if n == 0 {
            anyhow::bail!("{THREADS_ENV} must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}
