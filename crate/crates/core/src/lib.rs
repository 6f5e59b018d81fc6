// Negated float comparisons below deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod error;
pub mod hv_codec;
pub mod importance;
pub mod jscc_codec;
pub mod metrics;
pub mod numkit;
pub mod pipeline;
pub mod scene;

pub use channel::Snr;
pub use error::{Error, Result};
pub use hv_codec::{HvConfig, HvModel, LatentState};
pub use importance::{ObjectImportance, PatchImportance};
pub use jscc_codec::{JsccConfig, JsccModel, SymbolStream};
pub use metrics::RunReport;
pub use pipeline::{ExperimentConfig, Method, Sample, Split, TrainedSystem};
pub use scene::{Image, PatchGrid, SceneObject};
