//! Multi-head architecture: specification, construction, forward/backward and
//! cost accounting.

pub mod cost;
pub mod layers;
pub mod network;
pub mod spec;

pub use cost::CostReport;
pub use layers::{Mode, Param};
pub use network::{argmax, ensemble_logits, ForwardCache, HeadLogits, InputNorm, MultiHeadNetwork};
pub use spec::{ArchitectureSpec, InputShape, LayerSpec};
