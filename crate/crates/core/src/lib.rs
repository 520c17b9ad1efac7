//! Common Factorised Space Model (CFSM) for disjoint-label-space transfer
//! learning: joint source/target training with a low-entropy factorisation
//! loss on a shared sigmoid layer and a top-down graph-Laplacian loss on the
//! extracted features. Supports UDA, semi-supervised DLSTL and unsupervised
//! DLSTL retrieval, with the ablation variants used to probe each piece.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod runner;
pub mod scenario;
pub mod training;

pub use error::{Error, Result};
