//! Library backing the `cassforge` binary: pool loading, dataset handling,
//! the training loop, and the four pipeline commands. Kept as a library so
//! integration tests drive the same code paths as the CLI.

pub mod dataset;
pub mod eval;
pub mod pools;
pub mod separate;
pub mod synth;
pub mod trainer;

use cassforge_core::error::Result;

/// Worker-count cap from the `CASSFORGE_THREADS` environment variable.
pub fn thread_cap() -> Option<usize> {
    std::env::var("CASSFORGE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Run `f` inside a rayon pool sized by `CASSFORGE_THREADS` (or rayon's
/// default when unset).
pub fn with_thread_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

/// Serialize a command's configuration next to its outputs so every run
/// directory is self-describing.
pub fn write_run_config<T: serde::Serialize>(
    out_dir: &std::path::Path,
    config: &T,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| cassforge_core::Error::io(out_dir, e))?;
    let path = out_dir.join("run_config.json");
    let text = serde_json::to_string_pretty(config)?;
    std::fs::write(&path, text).map_err(|e| cassforge_core::Error::io(path, e))
}
