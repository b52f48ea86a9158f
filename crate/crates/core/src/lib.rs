pub mod augment;
pub mod error;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod optimize;
pub mod oracle;
pub mod propagate;
pub mod timing;

pub use augment::{AugmentedState, LindbladGenerator, MultiIndexSet};
pub use error::{Error, Result};
pub use linalg::{CMatrix, C64};
pub use model::{ControlGrid, NoiseDistribution, OpenSystemModel};
pub use propagate::{Backend, PropagationConfig, Propagator, StepCache, TrotterPlan};
pub use objective::{GateObjective, RobustStateObjective};
pub use optimize::{OptimizationReport, OptimizerConfig, StopReason, Task};
