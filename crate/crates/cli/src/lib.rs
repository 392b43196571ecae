//! Pipeline stages, run manifests and the serving loop behind the
//! `storyrank` command.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod serve;

pub use config::PipelineConfig;
pub use manifest::RunManifest;
pub use pipeline::{LoadedModel, RunDir};
pub use serve::{LatencyHistogram, ServeConfig, ServeStats};

/// Machine-readable class of an error chain: the core error code when one is
/// present, else `io` or `error`.
pub fn error_code(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<storyrank::Error>() {
            return core.code();
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "json";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

/// The error chain joined on one line.
pub fn one_line(e: &anyhow::Error) -> String {
    let msg = e.chain().map(ToString::to_string).collect::<Vec<_>>().join(": ");
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}
