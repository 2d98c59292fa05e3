//! Joint learning of model weights and quantization centers, centrally and
//! across simulated federated clients with personalized precision.

pub mod codebook;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federated;
pub mod losses;
pub mod proxops;
pub mod quantizer;
pub mod rng;
pub mod schedule;
pub mod centralized;
pub mod diagnostics;

pub use codebook::Codebook;
pub use data::{Dataset, Partition};
pub use error::{QupelError, Result};
pub use losses::{LossModel, ObjectiveEval, ParamLayout};
pub use proxops::{CenterPull, ProxParams};
pub use quantizer::{CenterVector, QuantConfig};
pub use rng::Rng;
pub use centralized::{RunOptions, TrainResult, TrainState};
pub use diagnostics::RoundMetrics;
pub use federated::{Client, ClientState, ServerState};
pub use schedule::{HyperParams, LambdaSchedule};
