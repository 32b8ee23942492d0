//! Frontal-view rectified image patches of model regions for the mouth and
//! eyebrow trackers, including the pixel-to-model coordinate ratio.
//!
//! The anchor grid is built once at initialization against the frontal
//! neutral deformation; anchors follow later animation-unit deformation and
//! pose through `anchor_position`, which keeps patch extraction at a constant
//! per-frame cost regardless of the input resolution.

use crate::facemodel::{landmark_names, FaceModel, ModelError, ModelState, SurfaceAnchor};
use crate::geom::Vec2;
use crate::imgcore::GrayImage;

#[derive(Debug, thiserror::Error)]
pub enum RectifyError {
    #[error("rect spec must be at least 2x2 with positive extents")]
    BadSpec,
    #[error("region mostly off the mesh: {hits} of {cells} grid cells hit")]
    RegionOffMesh { hits: usize, cells: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Region origin and extent in frontal-view model-screen units, plus the
/// output pixel size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectSpec {
    pub t_x: f64,
    pub t_y: f64,
    pub a_w: f64,
    pub a_h: f64,
    pub width: usize,
    pub height: usize,
}

impl RectSpec {
    fn validate(&self) -> Result<(), RectifyError> {
        if self.width < 2 || self.height < 2 || self.a_w <= 0.0 || self.a_h <= 0.0 {
            return Err(RectifyError::BadSpec);
        }
        Ok(())
    }

    /// Model units per rectified-image pixel, per axis.
    pub fn ratio(&self) -> Vec2 {
        Vec2::new(self.a_w / self.width as f64, self.a_h / self.height as f64)
    }

    /// Frontal-view position of grid cell (x, y).
    pub fn grid_point(&self, x: usize, y: usize) -> Vec2 {
        let r = self.ratio();
        Vec2::new(r.x * x as f64 + self.t_x, r.y * y as f64 + self.t_y)
    }

    /// Inverse of [`grid_point`]: frontal model-screen position to RI pixels.
    pub fn to_patch(&self, p: Vec2) -> Vec2 {
        let r = self.ratio();
        Vec2::new((p.x - self.t_x) / r.x, (p.y - self.t_y) / r.y)
    }
}

/// Mouth region derived from the model landmarks: corners padded by 25% of
/// the mouth width, lips by 40% of the lip span.
pub fn mouth_spec(
    model: &FaceModel,
    state: &ModelState,
    width: usize,
    height: usize,
) -> Result<RectSpec, RectifyError> {
    let frontal = state.with_pose(crate::facemodel::PoseParams::identity());
    let g = model.deform(&frontal.sigma, &frontal.alpha)?;
    let left = g[model.landmark(landmark_names::MOUTH_CORNER_LEFT)?];
    let right = g[model.landmark(landmark_names::MOUTH_CORNER_RIGHT)?];
    let upper = g[model.landmark(landmark_names::UPPER_LIP)?];
    let lower = g[model.landmark(landmark_names::LOWER_LIP)?];
    let w = (right.x - left.x).abs();
    let h = (lower.y - upper.y).abs();
    Ok(RectSpec {
        t_x: left.x.min(right.x) - 0.25 * w,
        t_y: upper.y.min(lower.y) - 0.4 * h,
        a_w: 1.5 * w,
        a_h: 1.8 * h,
        width,
        height,
    })
}

/// Which eyebrow a spec or tracker instance refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrowSide {
    Left,
    Right,
}

impl BrowSide {
    pub fn landmark_names(&self) -> [&'static str; 3] {
        match self {
            BrowSide::Left => [
                landmark_names::LEFT_BROW_OUTER,
                landmark_names::LEFT_BROW_MIDDLE,
                landmark_names::LEFT_BROW_INNER,
            ],
            BrowSide::Right => [
                landmark_names::RIGHT_BROW_INNER,
                landmark_names::RIGHT_BROW_MIDDLE,
                landmark_names::RIGHT_BROW_OUTER,
            ],
        }
    }
}

/// Square eyebrow region centered on the brow line, padded by 50% of the
/// part span on each side.
pub fn brow_spec(
    model: &FaceModel,
    state: &ModelState,
    side: BrowSide,
    size: usize,
) -> Result<RectSpec, RectifyError> {
    let frontal = state.with_pose(crate::facemodel::PoseParams::identity());
    let g = model.deform(&frontal.sigma, &frontal.alpha)?;
    let names = side.landmark_names();
    let a = g[model.landmark(names[0])?];
    let c = g[model.landmark(names[2])?];
    let span = (c.x - a.x).abs();
    let cx = 0.5 * (a.x + c.x);
    let cy = 0.5 * (a.y + c.y);
    Ok(RectSpec {
        t_x: cx - span,
        t_y: cy - span,
        a_w: 2.0 * span,
        a_h: 2.0 * span,
        width: size,
        height: size,
    })
}

/// The per-cell surface anchors of a rectified region, built once.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    spec: RectSpec,
    anchors: Vec<Option<SurfaceAnchor>>,
}

impl AnchorGrid {
    pub fn spec(&self) -> &RectSpec {
        &self.spec
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn ratio(&self) -> Vec2 {
        self.spec.ratio()
    }

    pub fn anchor(&self, x: usize, y: usize) -> Option<&SurfaceAnchor> {
        self.anchors[y * self.spec.width + x].as_ref()
    }
}

/// Project the spec's grid onto the frontally posed mesh. Errs when more
/// than half the cells miss the mesh.
pub fn build_anchor_grid(
    model: &FaceModel,
    neutral_state: &ModelState,
    spec: RectSpec,
) -> Result<AnchorGrid, RectifyError> {
    spec.validate()?;
    let frontal = neutral_state.with_pose(crate::facemodel::PoseParams::identity());
    let mesh = model.posed(&frontal)?;
    let mut anchors = Vec::with_capacity(spec.width * spec.height);
    let mut hits = 0;
    for y in 0..spec.height {
        for x in 0..spec.width {
            let a = mesh.intersect(spec.grid_point(x, y));
            hits += a.is_some() as usize;
            anchors.push(a);
        }
    }
    let cells = spec.width * spec.height;
    if hits * 2 < cells {
        return Err(RectifyError::RegionOffMesh { hits, cells });
    }
    Ok(AnchorGrid { spec, anchors })
}

/// Fixed-size frontal-view intensity grid with a per-cell validity mask.
/// Invalid cells carry intensity 0 and are excluded from every similarity
/// sum downstream.
#[derive(Debug, Clone)]
pub struct RectifiedPatch {
    width: usize,
    height: usize,
    intensities: Vec<f64>,
    valid: Vec<bool>,
    ratio: Vec2,
}

impl RectifiedPatch {
    /// Build a fully valid patch from a fill function; used by feature
    /// trackers' tests and by synthetic fixtures.
    pub fn from_fn(
        width: usize,
        height: usize,
        ratio: Vec2,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let mut intensities = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                intensities.push(f(x, y));
            }
        }
        RectifiedPatch { width, height, intensities, valid: vec![true; width * height], ratio }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ratio(&self) -> Vec2 {
        self.ratio
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.intensities[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Bilinear sample over valid cells only; None when any of the four
    /// supporting cells is invalid or the point leaves the patch.
    pub fn sample_valid(&self, p: Vec2) -> Option<f64> {
        if !(p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width - 1) as f64
            && p.y <= (self.height - 1) as f64)
        {
            return None;
        }
        let x0 = p.x.floor() as usize;
        let y0 = p.y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        if !(self.is_valid(x0, y0) && self.is_valid(x1, y0) && self.is_valid(x0, y1) && self.is_valid(x1, y1)) {
            return None;
        }
        let fx = p.x - x0 as f64;
        let fy = p.y - y0 as f64;
        let top = self.get(x0, y0) + fx * (self.get(x1, y0) - self.get(x0, y0));
        let bot = self.get(x0, y1) + fx * (self.get(x1, y1) - self.get(x0, y1));
        Some(top + fy * (bot - top))
    }

    /// View as a plain image (invalid cells read 0), for corner detection.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| self.get(x, y))
    }
}

/// Sample the frame at each anchor's projected position under `state`.
/// Cells whose sample falls outside the frame become invalid for this patch.
pub fn extract(
    grid: &AnchorGrid,
    frame: &GrayImage,
    model: &FaceModel,
    state: &ModelState,
) -> Result<RectifiedPatch, RectifyError> {
    let (patch, _) = extract_counted(grid, frame, model, state)?;
    Ok(patch)
}

/// [`extract`] plus the number of frame samples attempted; the count depends
/// only on the grid size, never on the frame resolution.
pub fn extract_counted(
    grid: &AnchorGrid,
    frame: &GrayImage,
    model: &FaceModel,
    state: &ModelState,
) -> Result<(RectifiedPatch, u64), RectifyError> {
    let mesh = model.posed(state)?;
    let n = grid.spec.width * grid.spec.height;
    let mut intensities = vec![0.0; n];
    let mut valid = vec![false; n];
    let mut samples = 0u64;
    for (i, slot) in grid.anchors.iter().enumerate() {
        let Some(anchor) = slot else { continue };
        samples += 1;
        if let Some(v) = frame.sample_bilinear(mesh.anchor_position(anchor).xy()) {
            intensities[i] = v;
            valid[i] = true;
        }
    }
    Ok((
        RectifiedPatch {
            width: grid.spec.width,
            height: grid.spec.height,
            intensities,
            valid,
            ratio: grid.ratio(),
        },
        samples,
    ))
}
