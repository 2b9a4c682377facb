//! Shared fixtures for the benchmarks.

use fmvp_core::config::RunConfig;

/// The toy benchmark configuration at a given width.
pub fn toy_config(d_v: usize) -> RunConfig {
    let text = format!(
        "[encoder]\nd_v = {d_v}\nd_t = 32\npatch_grid = 2\n[optim]\nbatch_size = 32\n[data]\nnum_classes = 16\n"
    );
    RunConfig::parse(&text).expect("valid benchmark config")
}
