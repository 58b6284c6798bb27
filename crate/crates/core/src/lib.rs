//! Pooled time series (PoT) video similarity.
//!
//! A video is reduced to two per-frame histogram series (optical flow and
//! temporal-difference gradients), each pooled over a temporal pyramid with
//! sum, gradient and max operators. Pairs of videos are compared slot by slot
//! with the chi-square distance, normalized by the corpus mean distance of
//! each slot, and mapped to a score in `(0, 1]`.
//!
//! The [`engine`] module runs the whole computation as three checkpointed,
//! parallel stages (`extract`, `mean`, `similarity`) whose outputs are
//! byte-identical for any worker count.
//!
//! Module map:
//!
//! * [`frame`]: PGM/PPM decoding, grayscale conversion, bilinear resizing,
//!   frame-sequence loading and the corpus manifest.
//! * [`flow`]: Farneback polynomial expansion and pyramidal dense flow.
//! * [`descriptors`]: HoF and HoG 5x5x8 histograms and their time series.
//! * [`pooling`]: temporal pyramid and the three pooling operators.
//! * [`similarity`]: chi-square distance, corpus means, kernel distance, score.
//! * [`archive`]: the `POTF` binary feature archive and cartesian shard pairs.
//! * [`engine`]: stage planning, parallel execution, checkpoints and reduction.
//! * [`heatmap`]: similarity matrix rendering as a PGM image.
//! * [`synth`]: deterministic synthetic videos for tests and benchmarks.

pub mod archive;
pub mod descriptors;
pub mod engine;
mod error;
pub mod flow;
pub mod frame;
pub mod heatmap;
pub mod pooling;
pub mod similarity;
pub mod synth;

pub use archive::{ArchiveRecord, ArchiveShard};
pub use descriptors::{FrameHistogram, HistogramSeries, SeriesKind};
pub use engine::{Pipeline, PipelineConfig};
pub use error::{Error, Result};
pub use flow::{FarnebackParams, FlowField, PolyExpansion};
pub use frame::{Frame, FrameSequence, Manifest, ManifestEntry};
pub use pooling::{PoTFeature, Pooling, Series, Slot, TemporalInterval};
pub use similarity::{CsdSixtuple, MeanCsd, SimilarityRecord};
