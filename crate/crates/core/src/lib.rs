//! Core library for 3D bounding-box proposal denoising around monocular
//! detector outputs.
//!
//! The pipeline: bottom-up anchor boxes are expanded into a local grid of
//! top-down proposals in the bird's-eye-view plane ([`sampler`]), encoded
//! with geometric and appearance features ([`featurize`]), scored and
//! refined by an attention-based verification network ([`net`]), and
//! evaluated with the KITTI 40-point AP protocol ([`eval`]). [`analysis`]
//! provides the empirical upper-bound search over the proposal grid, and
//! [`synth`] generates deterministic synthetic scenes that stand in for a
//! real image backbone.

pub mod analysis;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod geom;
pub mod kitti;
pub mod matching;
pub mod net;
pub mod sampler;
pub mod synth;
pub mod tnsr;

pub use error::{Error, Result};
pub use eval::{ApResult, Detection, EvalConfig, GroundTruthBox, Metric, PRCurve};
pub use featurize::{FeatureMap, ProposalFeatures};
pub use geom::{Box2D, Box3D, CameraModel, ConvexPolygon2D, Vec3};
pub use kitti::{Difficulty, LabelRecord};
pub use matching::{Assignment, MatchConfig};
pub use net::model::{ModelConfig, ModelParams};
pub use sampler::{GridSpec, NormConstants};
pub use synth::SceneConfig;
