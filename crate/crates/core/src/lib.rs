//! Flow-based feature synthesis for outlier-aware classification.

// `!(x > 0.0)` is deliberate: it rejects NaN too. Index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

mod binio;
pub mod datakit;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod flow;
pub mod heads;
pub mod numerics;
pub mod synthesis;
pub mod trainer;

pub use error::{FfsError, Result};
pub use datakit::{Dataset, DatasetSpec, FeatureRecord, Generator};
pub use evalkit::{Metrics, Threshold};
pub use flow::{FlowArch, FlowModel, FlowVariant};
pub use heads::{HeadBundle, LossWeights, RegVariant};
pub use numerics::SeededRng;
pub use synthesis::{OutlierBatch, Provenance, SynthesisConfig, SynthesisMode};
pub use trainer::{TrainConfig, TrainState, Trainer};
