//! The parameterized deformable wireframe head model: shape/animation
//! deformation, rigid pose warp, orthographic projection, ray-mesh
//! intersection and surface anchoring.
//!
//! Conventions: model x right, y down, z toward the camera (the camera looks
//! down -z, so "camera-nearest" means maximal z). The pose warp applies the
//! rotation product Rx * Ry * Rz to scaled points and then adds the 2D
//! translation; projection drops z.

mod io;

pub use io::{load_model, parse_model, save_model, write_model};

use crate::geom::{Mat3, Vec2, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("model validation failed: {0}")]
    Validation(String),
    #[error("missing required landmark '{0}'")]
    MissingLandmark(String),
    #[error("unknown landmark '{0}'")]
    UnknownLandmark(String),
    #[error("unknown animation unit '{0}'")]
    UnknownAu(String),
    #[error("parameter vector length {got}, model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// The 6-vector of rotations, uniform scale and 2D translation driving every
/// warp.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoseParams {
    pub phi_x: f64,
    pub phi_y: f64,
    pub phi_z: f64,
    pub s: f64,
    pub t_x: f64,
    pub t_y: f64,
}

impl PoseParams {
    pub fn identity() -> Self {
        PoseParams { phi_x: 0.0, phi_y: 0.0, phi_z: 0.0, s: 1.0, t_x: 0.0, t_y: 0.0 }
    }

    /// Rx * Ry * Rz, applied left-to-right as written.
    pub fn rotation(&self) -> Mat3 {
        Mat3::rot_x(self.phi_x).mul_mat(&Mat3::rot_y(self.phi_y)).mul_mat(&Mat3::rot_z(self.phi_z))
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.phi_x, self.phi_y, self.phi_z, self.s, self.t_x, self.t_y]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        PoseParams { phi_x: a[0], phi_y: a[1], phi_z: a[2], s: a[3], t_x: a[4], t_y: a[5] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Rotate (Rx Ry Rz), scale, then translate by (t_x, t_y, 0).
pub fn warp_point(p: Vec3, a: &PoseParams) -> Vec3 {
    let r = a.rotation().mul_vec(p * a.s);
    Vec3::new(r.x + a.t_x, r.y + a.t_y, r.z)
}

pub fn warp_points(ps: &[Vec3], a: &PoseParams) -> Vec<Vec3> {
    let rot = a.rotation();
    ps.iter()
        .map(|p| {
            let r = rot.mul_vec(*p * a.s);
            Vec3::new(r.x + a.t_x, r.y + a.t_y, r.z)
        })
        .collect()
}

/// Orthographic projection: drop the z coordinate.
#[inline]
pub fn project(p: Vec3) -> Vec2 {
    p.xy()
}

/// A sparse per-vertex displacement field with parameter limits.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformUnit {
    pub name: String,
    pub displacements: Vec<(usize, Vec3)>,
    pub limits: (f64, f64),
}

impl DeformUnit {
    /// Displacement this unit applies to `vertex` at parameter value 1.
    pub fn displacement_at(&self, vertex: usize) -> Vec3 {
        self.displacements
            .iter()
            .find(|(v, _)| *v == vertex)
            .map(|(_, d)| *d)
            .unwrap_or(Vec3::ZERO)
    }
}

/// Well-known landmark names required by the trackers.
pub mod landmark_names {
    pub const LEFT_EYE: &str = "left_eye";
    pub const RIGHT_EYE: &str = "right_eye";
    pub const MOUTH_CENTER: &str = "mouth_center";
    pub const MOUTH_CORNER_LEFT: &str = "mouth_corner_left";
    pub const MOUTH_CORNER_RIGHT: &str = "mouth_corner_right";
    pub const UPPER_LIP: &str = "upper_lip";
    pub const LOWER_LIP: &str = "lower_lip";
    pub const LEFT_BROW_OUTER: &str = "left_brow_outer";
    pub const LEFT_BROW_MIDDLE: &str = "left_brow_middle";
    pub const LEFT_BROW_INNER: &str = "left_brow_inner";
    pub const RIGHT_BROW_INNER: &str = "right_brow_inner";
    pub const RIGHT_BROW_MIDDLE: &str = "right_brow_middle";
    pub const RIGHT_BROW_OUTER: &str = "right_brow_outer";
    /// Optional; defaults to the vertex with the largest z.
    pub const NOSE_TIP: &str = "nose_tip";

    pub const REQUIRED: [&str; 13] = [
        LEFT_EYE,
        RIGHT_EYE,
        MOUTH_CENTER,
        MOUTH_CORNER_LEFT,
        MOUTH_CORNER_RIGHT,
        UPPER_LIP,
        LOWER_LIP,
        LEFT_BROW_OUTER,
        LEFT_BROW_MIDDLE,
        LEFT_BROW_INNER,
        RIGHT_BROW_INNER,
        RIGHT_BROW_MIDDLE,
        RIGHT_BROW_OUTER,
    ];
}

/// Base shape, triangle list, shape/animation displacement units and named
/// landmarks. Immutable after construction and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceModel {
    base_shape: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    shape_units: Vec<DeformUnit>,
    animation_units: Vec<DeformUnit>,
    landmarks: Vec<(String, usize)>,
}

impl FaceModel {
    pub fn new(
        base_shape: Vec<Vec3>,
        triangles: Vec<[usize; 3]>,
        shape_units: Vec<DeformUnit>,
        animation_units: Vec<DeformUnit>,
        landmarks: Vec<(String, usize)>,
    ) -> Result<Self, ModelError> {
        let model = FaceModel { base_shape, triangles, shape_units, animation_units, landmarks };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ModelError> {
        let n = self.base_shape.len();
        if n == 0 {
            return Err(ModelError::Validation("model has no vertices".into()));
        }
        if !self.base_shape.iter().all(|v| v.is_finite()) {
            return Err(ModelError::Validation("non-finite vertex coordinates".into()));
        }
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= n) {
                return Err(ModelError::Validation(format!(
                    "triangle {i} references vertex >= {n}"
                )));
            }
        }
        for unit in self.shape_units.iter().chain(&self.animation_units) {
            if unit.displacements.iter().any(|(v, _)| *v >= n) {
                return Err(ModelError::Validation(format!(
                    "unit '{}' references vertex >= {n}",
                    unit.name
                )));
            }
            let (lo, hi) = unit.limits;
            if !(lo <= 0.0 && 0.0 <= hi) {
                return Err(ModelError::Validation(format!(
                    "unit '{}' limits [{lo}, {hi}] must bracket 0",
                    unit.name
                )));
            }
        }
        for (name, v) in &self.landmarks {
            if *v >= n {
                return Err(ModelError::Validation(format!(
                    "landmark '{name}' references vertex >= {n}"
                )));
            }
        }
        for required in landmark_names::REQUIRED {
            if !self.landmarks.iter().any(|(name, _)| name == required) {
                return Err(ModelError::MissingLandmark(required.into()));
            }
        }
        Ok(())
    }

    /// The bundled default model (113 vertices, 1 SU, 10 AUs).
    pub fn bundled() -> FaceModel {
        static CACHE: std::sync::OnceLock<FaceModel> = std::sync::OnceLock::new();
        CACHE
            .get_or_init(|| {
                parse_model(include_str!("../../assets/default_face.fm"))
                    .expect("bundled model parses")
            })
            .clone()
    }

    pub fn vertex_count(&self) -> usize {
        self.base_shape.len()
    }

    pub fn base_shape(&self) -> &[Vec3] {
        &self.base_shape
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn shape_units(&self) -> &[DeformUnit] {
        &self.shape_units
    }

    pub fn animation_units(&self) -> &[DeformUnit] {
        &self.animation_units
    }

    pub fn landmarks(&self) -> &[(String, usize)] {
        &self.landmarks
    }

    pub fn landmark(&self, name: &str) -> Result<usize, ModelError> {
        if name == landmark_names::NOSE_TIP {
            if let Some((_, v)) = self.landmarks.iter().find(|(n, _)| n == name) {
                return Ok(*v);
            }
            // fall back to the camera-nearest base vertex
            return Ok(self
                .base_shape
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.z.total_cmp(&b.z))
                .map(|(i, _)| i)
                .unwrap());
        }
        self.landmarks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| ModelError::UnknownLandmark(name.into()))
    }

    pub fn au_index(&self, name: &str) -> Result<usize, ModelError> {
        self.animation_units
            .iter()
            .position(|u| u.name == name)
            .ok_or_else(|| ModelError::UnknownAu(name.into()))
    }

    /// Distance between the base-shape eye-center landmarks, in model units.
    pub fn eye_distance(&self) -> f64 {
        let l = self.base_shape[self.landmark(landmark_names::LEFT_EYE).unwrap()];
        let r = self.base_shape[self.landmark(landmark_names::RIGHT_EYE).unwrap()];
        (r - l).norm()
    }

    /// g = base + S sigma + A alpha.
    pub fn deform(&self, sigma: &[f64], alpha: &[f64]) -> Result<Vec<Vec3>, ModelError> {
        if sigma.len() != self.shape_units.len() {
            return Err(ModelError::DimMismatch { expected: self.shape_units.len(), got: sigma.len() });
        }
        if alpha.len() != self.animation_units.len() {
            return Err(ModelError::DimMismatch {
                expected: self.animation_units.len(),
                got: alpha.len(),
            });
        }
        let mut g = self.base_shape.clone();
        for (unit, &p) in self.shape_units.iter().zip(sigma) {
            for (v, d) in &unit.displacements {
                g[*v] += *d * p;
            }
        }
        for (unit, &p) in self.animation_units.iter().zip(alpha) {
            for (v, d) in &unit.displacements {
                g[*v] += *d * p;
            }
        }
        Ok(g)
    }

    /// Clamp each animation parameter to its unit's limits.
    pub fn clamp_alpha(&self, alpha: &mut [f64]) {
        for (unit, a) in self.animation_units.iter().zip(alpha.iter_mut()) {
            *a = a.clamp(unit.limits.0, unit.limits.1);
        }
    }

    pub fn neutral_state(&self) -> ModelState {
        ModelState {
            sigma: vec![0.0; self.shape_units.len()],
            alpha: vec![0.0; self.animation_units.len()],
            pose: PoseParams::identity(),
        }
    }

    /// Deform by the state's parameters and warp by its pose.
    pub fn posed(&self, state: &ModelState) -> Result<PosedMesh<'_>, ModelError> {
        let deformed = self.deform(&state.sigma, &state.alpha)?;
        let vertices = warp_points(&deformed, &state.pose);
        Ok(PosedMesh { model: self, vertices })
    }
}

/// Shape, animation and pose parameters owned by one tracker instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub sigma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub pose: PoseParams,
}

impl ModelState {
    pub fn with_pose(&self, pose: PoseParams) -> ModelState {
        ModelState { sigma: self.sigma.clone(), alpha: self.alpha.clone(), pose }
    }
}

/// A point pinned to the mesh surface by triangle id and barycentric
/// weights; follows both deformation and pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceAnchor {
    pub triangle: usize,
    pub bary: [f64; 3],
}

/// The model geometry at a state: deformed, warped vertices.
#[derive(Debug, Clone)]
pub struct PosedMesh<'a> {
    model: &'a FaceModel,
    vertices: Vec<Vec3>,
}

impl PosedMesh<'_> {
    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> Vec3 {
        self.vertices[i]
    }

    pub fn projected(&self) -> Vec<Vec2> {
        self.vertices.iter().map(|v| v.xy()).collect()
    }

    /// Screen-space bounding box of all projected vertices.
    pub fn bbox(&self) -> (Vec2, Vec2) {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            lo.x = lo.x.min(v.x);
            lo.y = lo.y.min(v.y);
            hi.x = hi.x.max(v.x);
            hi.y = hi.y.max(v.y);
        }
        (lo, hi)
    }

    /// Cast the orthographic ray through `screen` along z. Among triangles
    /// whose projection contains the point, returns the anchor on the
    /// camera-nearest one; a miss is a value, not an error.
    pub fn intersect(&self, screen: Vec2) -> Option<SurfaceAnchor> {
        let mut best: Option<(f64, SurfaceAnchor)> = None;
        for (ti, tri) in self.model.triangles.iter().enumerate() {
            let a = self.vertices[tri[0]].xy();
            let b = self.vertices[tri[1]].xy();
            let c = self.vertices[tri[2]].xy();
            let denom = (b - a).cross(c - a);
            if denom.abs() < 1e-12 {
                continue;
            }
            let w1 = (screen - a).cross(c - a) / denom;
            let w2 = (b - a).cross(screen - a) / denom;
            let w0 = 1.0 - w1 - w2;
            let eps = -1e-9;
            if w0 < eps || w1 < eps || w2 < eps {
                continue;
            }
            let mut bary = [w0.max(0.0), w1.max(0.0), w2.max(0.0)];
            let sum: f64 = bary.iter().sum();
            for w in &mut bary {
                *w /= sum;
            }
            let z = bary[0] * self.vertices[tri[0]].z
                + bary[1] * self.vertices[tri[1]].z
                + bary[2] * self.vertices[tri[2]].z;
            if best.map_or(true, |(bz, _)| z > bz) {
                best = Some((z, SurfaceAnchor { triangle: ti, bary }));
            }
        }
        best.map(|(_, anchor)| anchor)
    }

    /// Barycentric combination of the anchor's three deformed, warped
    /// triangle vertices.
    pub fn anchor_position(&self, anchor: &SurfaceAnchor) -> Vec3 {
        let tri = self.model.triangles[anchor.triangle];
        self.vertices[tri[0]] * anchor.bary[0]
            + self.vertices[tri[1]] * anchor.bary[1]
            + self.vertices[tri[2]] * anchor.bary[2]
    }
}
