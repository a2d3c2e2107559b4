//! Ensemble access and analysis: members x time steps x fields, field
//! similarity embeddings and parallel-coordinates data.

pub mod aggregate;
pub mod cache;
pub mod dataset;
pub mod distance;
pub mod error;
pub mod features;
pub mod mds;
pub mod parcoords;
pub mod sampling;

pub use aggregate::{aggregate, aggregate_volumes, Statistic};
pub use cache::VolumeCache;
pub use dataset::{scan_ensemble, CachePolicy, EnsembleDataset, Filter, Member, RecordId, ScanReport, TimeStep, VolumeRef};
pub use distance::{distance_matrix, field_distance, DistanceMatrix, FieldMetric, MeanAbsolute};
pub use error::{Error, Result};
pub use features::{extract_features, ExtractRun, FeatureHeader, FeatureMatrix, FieldKind};
pub use mds::{embedding_curves, mds_embed, reembed_selection, Curve, CurvePoint, Embedding};
pub use parcoords::{
    apply_brush, extract_parcoords, intersection_mask, tf_clamp, time_histogram_axes, Axis, AxisSource, BrushResult,
    BrushSelection, ParCoordsData, ParCoordsHeader,
};
pub use sampling::Sampling;
