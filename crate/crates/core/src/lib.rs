//! Object-centric 3D scene-graph mapping.
//!
//! Posed RGB-D frames with per-detection masks and embeddings are fused into a map of
//! objects, linked into a spatial tree with language captions and relations, and queried
//! by embedding or language-model planner. A particle filter localizes against the map
//! and keeps it current as objects move.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` rejects NaN too

pub mod association;
pub mod clients;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod ingest;
pub mod localization;
pub mod mapfile;
pub mod model;
pub mod pipeline;
pub mod scenegraph;
pub mod spatial;
pub mod synthetic;

pub use association::{AssociationConfig, MapState};
pub use config::{ClientSpec, Mode, RunConfig};
pub use error::{Error, ErrorKind, Result};
pub use geometry::{Aabb, CameraIntrinsics, FeatureVector, FrameId, ObjectId, PointCloud, Pose};
pub use model::{Detection, ObjectNode, SceneEdge, SceneGraph};
pub use pipeline::{build_from_manifest, BuildReport, MapBuilder};
