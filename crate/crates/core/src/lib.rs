//! Feature selection for CTR models via learnable polarizing gates.
//!
//! The toolkit trains smoothed-l0 gates at the input of a DLRM-lite network
//! with a proximal optimizer, so that training ends with some gates at exact
//! zero and the rest well away from it. Zero-gate features are removed
//! without a pruning threshold, and surviving gates are absorbed into the
//! model losslessly for hot-start training. Group-LASSO and permutation
//! importance baselines ship alongside.
//!
//! Module map:
//! - [`gates`] — the gate families, their derivatives, and the epsilon
//!   schedule.
//! - [`optim`] — proximal SGD with momentum for gates, Adagrad for the model.
//! - [`model`] — the CTR network with explicit reverse-mode gradients.
//! - [`metrics`] — AUC / logloss / accuracy.
//! - [`data`] — synthetic ground-truth generator, Criteo TSV ingestion, day
//!   splits, negative down-sampling.
//! - [`selection`] — the pipelines: pretrain, gate selection, mask
//!   extraction, absorption, baselines, resurrection probe.
//! - [`checkpoint`] — atomic JSON checkpoints with exact float round-trips.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gates;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod selection;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use gates::{gate_grad, gate_value, EpsilonSchedule, GateKind, GateState};
pub use metrics::Metrics;
pub use model::{CategoricalField, CtrModel, FeatureSchema, Minibatch, ModelConfig};
pub use optim::{AdagradConfig, ProxConfig};
pub use selection::{FeatureMask, SelectionOpts, SelectionOutcome, SelectionReport};
