//! Optimal-transport graph dictionary learning with amortized plan prediction.
//!
//! Pipeline: a synthetic corpus of native-geometry graphs ([`synth`]), exact
//! FGW solvers used as oracles ([`exact_ot`]), FGW/FUGW loss kernels
//! ([`loss`]), a small reverse-mode autodiff engine ([`autodiff`]), the
//! α,ρ-conditioned plan predictor ([`predictor`]), α-conditioned dictionaries
//! ([`dictionary`]) and their training loops ([`agdl`]), and the embedding
//! analyses ([`eval`]).

pub mod agdl;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dictionary;
pub mod error;
pub mod eval;
pub mod exact_ot;
pub mod graph;
pub mod io;
pub mod loss;
pub mod optim;
pub mod predictor;
pub mod synth;

pub use error::{Error, Result};
pub use graph::Graph;
