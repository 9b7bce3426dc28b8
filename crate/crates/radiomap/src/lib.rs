//! Reconstruction of received-signal-strength maps from sparse GPS-tagged
//! measurements.
//!
//! The crate covers the full pipeline: measurement ingestion and gridding,
//! side-information channels, path-loss fitting, classical interpolation
//! baselines (RBF, kNN, TV inpainting), a semi-supervised tile corpus,
//! evolutionary architecture search over a small encoder-decoder network,
//! training and full-map inference, the evaluation protocol, and a synthetic
//! city generator so everything runs without field data. The `rmap` binary
//! wires the stages into reproducible experiments.

pub mod cli;
pub mod config;
pub mod evalreport;
pub mod grid;
pub mod ingest;
pub mod nas;
pub mod nn;
pub mod pathloss;
pub mod plot;
pub mod interp;
pub mod sidechannels;
pub mod synthcity;
pub mod tiles;
pub mod trainer;
