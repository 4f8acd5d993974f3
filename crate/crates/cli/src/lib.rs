//! Command-line harness for the super-resolution toolkit: dataset
//! generation, ingestion, splitting, training, evaluation and plotting.
//!
//! Every command writes its outputs atomically, embeds the producing
//! configuration, seed and dataset digest in each artifact, and treats the
//! input dataset as read-only.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod model;
pub mod plot;

pub use commands::{
    cmd_downstream, cmd_evaluate, cmd_hist, cmd_ingest, cmd_plots, cmd_spectrum, cmd_split,
    cmd_synth, cmd_train, Artifact, DownstreamArgs, EvalArgs, IngestArgs, PlotsArgs, SplitArgs,
    SynthArgs,
};
pub use config::ExperimentConfig;
