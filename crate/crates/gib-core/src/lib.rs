//! Task-oriented transmission of graph data.
//!
//! A transmitter learns to extract a task-relevant subgraph representation
//! from an input graph, sends it through a simulated channel (Gaussian for
//! the analog path, a symmetric discrete channel over codebook indices for
//! the digital path), and a receiver infers the graph label from whatever
//! arrives. Training trades task accuracy against how much of the original
//! graph leaks into the transmitted representation, with an auxiliary
//! connectivity penalty that keeps node assignments aligned with topology.
//!
//! Modules:
//! - [`autodiff`]: tape-based reverse-mode differentiation over f64 matrices
//! - [`gradcheck`]: finite-difference verification helpers
//! - [`dataset`]: corpus ingestion, synthetic generator, stratified folds
//! - [`backbone`]: GCN/GIN layers, MLPs, the inference head, initialization
//! - [`extractor`]: node assignment, subgraph aggregation, connectivity loss
//! - [`mine`]: neural mutual-information estimation (Donsker–Varadhan bound)
//! - [`channel`]: power normalization, AWGN, symmetric discrete channel
//! - [`quantizer`]: codebook, straight-through, EMA updates, 8-bit baseline
//! - [`optim`]: Adam
//! - [`trainer`]: loss composition, epoch loop, k-fold cross-validation
//! - [`report`]: metrics rows and run manifests

pub mod autodiff;
pub mod backbone;
pub mod channel;
pub mod dataset;
pub mod extractor;
pub mod gradcheck;
pub mod mine;
pub mod optim;
pub mod quantizer;
pub mod report;
pub mod seeds;
pub mod trainer;
