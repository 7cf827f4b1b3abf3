//! Command-line front end for phonebench experiments.

pub mod commands;
pub mod config;

pub use commands::{cmd_bench, cmd_eval, cmd_fbank, cmd_params, cmd_rf, cmd_synth, cmd_train, cmd_transfer};
pub use config::{BenchConfig, CorpusConfig, ExperimentConfig, Profile, Sweep, SweepPoint};

// Graphs allocate and drop large activation buffers per forward; keeping freed
// pages around avoids page-fault costs that grow with sequence length.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Machine-readable error payload: the library error tag when one is in the
/// chain, otherwise `cli`.
pub fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<phonebench::Error>())
        .map_or("cli", |e| e.kind());
    let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    serde_json::json!({
        "error": kind,
        "message": chain.join(": "),
    })
}
