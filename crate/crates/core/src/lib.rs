//! Invariance measurement and correlation studies over softmax prediction dumps.
//!
//! The crate is organised bottom-up:
//!
//! - [`predstore`]: the `EIPRED1` dump format, validation and pairing of
//!   original/transformed predictions.
//! - [`imgxform`]: exact, interpolation-free image transforms (quarter-turn
//!   rotations and BT.601 grayscale) for producing transformed test sets.
//! - [`metrics`]: Effective Invariance (EI) and the baseline measures.
//! - [`stats`]: Pearson/Spearman, logit scaling, Huber IRLS fit, bootstrap bands.
//! - [`analysis`]: model-centric and dataset-centric studies, ranking and
//!   label-free accuracy prediction.
//! - [`synth`]: synthetic model populations with planted accuracy/invariance
//!   structure.
//!
//! Data-parallel sections go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.
//! Reductions are always performed in a fixed pairwise order so results do not
//! depend on the number of threads.

pub mod analysis;
pub mod imgxform;
pub mod metrics;
pub mod par;
pub mod predstore;
pub mod stats;
pub mod synth;

pub use analysis::{AccuracyPrediction, ModelRecord, StudyAxis, StudyReport};
pub use metrics::{InvarianceRecord, MeasureKind, TopPrediction};
pub use predstore::{PairedPredictions, PredictionHeader, PredictionSet, TransformTag};
pub use stats::{BootstrapBand, CorrelationStats, LinearFit, SampleXY};
