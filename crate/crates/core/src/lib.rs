//! Learning personalized-PageRank propagation matrices for semi-supervised
//! node classification.
//!
//! The pipeline is split into two independent levels:
//!
//! 1. **Lower level** – starting from the PPR matrix `Q = (I - (1-α)Ã)^{-1}`,
//!    learn `Q_s` so that, for labeled anchors, same-class proximities exceed
//!    cross-class ones. [`dense`] descends on the full matrix; [`lowrank`]
//!    restricts `Q_s = Q + p qᵀ` and runs in time linear in the node count.
//! 2. **Upper level** – train a two-layer predictor `f_θ` with `Q_s` frozen,
//!    predicting `softmax(α Q_s f_θ(X))` ([`classifier`]).
//!
//! [`pipeline`] wires both levels together; [`gradcheck`] and [`bench`] back
//! the CLI's verification and timing commands.

pub mod bench;
pub mod classifier;
pub mod config;
pub mod data;
pub mod dense;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod history;
pub mod linalg;
pub mod lowrank;
pub mod objective;
pub mod pipeline;

pub use classifier::{ClassifierParams, Mlp, Prediction};
pub use data::{DatasetBundle, SbmConfig, Splits, StoredMatrix};
pub use error::{Error, Result};
pub use graph::{Graph, NormalizedAdjacency, PropagationMatrix, PropagationView};
pub use history::LowerHistory;
pub use lowrank::RankOnePerturbation;
pub use objective::{LowerParams, TripleBatch};
