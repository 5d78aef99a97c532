//! Adversarial training for graph neural networks under structure
//! perturbations.
//!
//! The crate is organised along the pipeline it implements:
//!
//! * [`graph`]: sparse undirected graphs, normalized propagation operators and
//!   relaxed edge-flip perturbations.
//! * [`data`]: contextual stochastic block models, Karate Club and the
//!   transductive / inductive split protocol.
//! * [`model`]: a small reverse-mode tape and the MLP / GCN / APPNP / GPRGNN /
//!   ChebNetII predictors with gradients w.r.t. parameters and edge flips.
//! * [`attack`]: budgets, the global and locally constrained projections, and
//!   the PGD, PR-BCD, LR-BCD, FGSM and DICE attacks.
//! * [`train`]: standard, self- and adversarial training plus the
//!   memorization wrapper.
//! * [`analysis`]: coefficient normalization, total diffusion matrices,
//!   spectral filters and robustness evaluation.
//! * [`experiment`]: config-driven end-to-end runs and aggregation.

pub mod analysis;
pub mod attack;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use graph::{EdgeFlips, Graph, NormalizedOperator, OperatorKind, RelaxedPerturbation};
pub use linalg::Matrix;
