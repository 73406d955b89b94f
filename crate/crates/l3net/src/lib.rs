//! Graph convolutions with learnable low-rank local filters.
//!
//! The crate bundles:
//! - graph construction with d-order neighborhoods, normalized adjacencies,
//!   and per-patch Dirichlet Laplacians (`graph`);
//! - a small reverse-mode gradient tape over dense tensors (`tensor`, `tape`);
//! - the layer zoo: low-rank local-filter convolution plus reference
//!   Chebyshev, GCN, attention, and edge-varying layers (`layers`);
//! - the local-graph-Laplacian penalty and its closed-form strong-limit
//!   verifier (`reg`);
//! - constructive layer reductions, a spectral-expressiveness oracle,
//!   equivariance checks, and stability-bound verification (`analysis`);
//! - dataset generators and loaders (`data`);
//! - declarative architectures, optimizers, and the training harness
//!   (`model`, `optim`, `train`, `config`).

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod reg;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;
