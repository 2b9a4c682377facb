//! Federated multimodal visual prompt tuning at desk scale.
//!
//! A small trainable cross-attention prompt generator ([`promptformer`]) feeds
//! visual prompts into a frozen vision transformer ([`encoders`]). Clients
//! holding disjoint class sets train it locally and a server averages their
//! updates ([`fed`]), switching to low-rank adapters once a client's loss is
//! already low. [`data`] builds synthetic non-IID benchmarks and [`eval`]
//! scores base/new-class and cross-domain generalization.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fed;
pub mod model;
pub mod nn;
pub mod objective;
pub mod promptformer;
pub mod rng;

pub use autodiff::{Scalar, SgdMomentum, Tape, Tensor, Var};
pub use error::{Error, Result};
