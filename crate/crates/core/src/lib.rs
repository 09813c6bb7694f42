pub mod data;
pub mod detection;
pub mod error;
pub mod inference;
pub mod model;
pub mod report;
pub mod run;
pub mod taxonomy;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use inference::{InferenceMode, MismatchReport, Prediction};
pub use model::{SgnetConfig, SgnetModel};
pub use taxonomy::Taxonomy;
pub use tensor::{Graph, NodeId, Tensor};
