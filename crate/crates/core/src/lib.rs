//! Head-pose and facial-feature tracking engine.
//!
//! The head tracker combines a pyramidal optical-flow pre-estimation stage
//! with a normalized-template refinement stage over a deformable wireframe
//! face model; mouth and eyebrow movements are tracked inside fixed-size
//! frontal-view rectified patches and written back as animation-unit
//! parameters. A synthetic renderer and an experiment runner provide
//! ground-truth evaluation without external datasets.

pub mod geom;
pub mod imgcore;
pub mod lmsolve;
pub mod klt;
pub mod preest;
pub mod tmpltrack;
pub mod rectify;
pub mod mouth;
pub mod brow;
pub mod controller;
pub mod facemodel;

pub use facemodel::{FaceModel, ModelState, PoseParams, SurfaceAnchor};
pub use geom::{Vec2, Vec3};
pub use imgcore::{GrayImage, Pyramid};
