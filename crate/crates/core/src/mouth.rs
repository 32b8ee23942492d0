//! Mouth tracker: reconstructs the initial closed mouth by locating four part
//! templates (corners, upper and lower lip) in the rectified mouth patch via
//! ZSSD-N similarity maps and converting the found displacements into
//! animation-unit updates.

use crate::facemodel::{landmark_names, FaceModel, ModelError, ModelState};
use crate::geom::Vec2;
use crate::imgcore::{harris_strongest, ImageError};
use crate::rectify::{AnchorGrid, RectifiedPatch};

#[derive(Debug, thiserror::Error)]
pub enum MouthError {
    #[error("part template for {part} leaves the patch at origin ({x:.1}, {y:.1})")]
    PartOutOfPatch { part: &'static str, x: f64, y: f64 },
    #[error("search region for {part} has no valid cells")]
    EmptySearchRegion { part: &'static str },
    #[error("animation unit '{name}' does not displace landmark '{landmark}'")]
    ZeroRate { name: String, landmark: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("corner refinement failed: {0}")]
    Corner(#[from] ImageError),
}

/// Animation units the mouth tracker drives, looked up by name in the model.
pub const AU_JAW_DROP: &str = "jaw_drop";
pub const AU_UPPER_LIP_RAISE: &str = "upper_lip_raise";
pub const AU_CORNER_STRETCH: &str = "mouth_corner_stretch";
pub const AU_CORNER_RAISE: &str = "mouth_corner_raise";

#[derive(Debug, Clone)]
pub struct MouthConfig {
    /// Corner template size (square side), in RI pixels.
    pub corner_template: usize,
    /// Lip template size (width, height).
    pub lip_template: (usize, usize),
    /// Corner search half-extent, both axes.
    pub corner_search: usize,
    /// Lip search half-extent, vertical only.
    pub lip_search: usize,
    /// Harris refinement window half-width around each corner landmark.
    pub harris_radius: usize,
    /// Beyond this head yaw the occluded corner copies the visible one.
    pub phi_y_limit: f64,
}

impl Default for MouthConfig {
    fn default() -> Self {
        MouthConfig {
            corner_template: 15,
            lip_template: (21, 9),
            corner_search: 8,
            lip_search: 10,
            harris_radius: 3,
            phi_y_limit: 20.0_f64.to_radians(),
        }
    }
}

/// An intensity block cut from the initial rectified patch, centered on its
/// origin.
#[derive(Debug, Clone)]
pub struct PartTemplate {
    pub origin: Vec2,
    width: usize,
    height: usize,
    intensities: Vec<f64>,
    valid: Vec<bool>,
    mean: f64,
    sq_sum: f64,
    valid_count: usize,
}

impl PartTemplate {
    /// Cut a (w, h) block centered at integer `origin` from the patch.
    pub fn cut(
        patch: &RectifiedPatch,
        origin: Vec2,
        size: (usize, usize),
        part: &'static str,
    ) -> Result<Self, MouthError> {
        let (w, h) = size;
        let (hx, hy) = ((w / 2) as i64, (h / 2) as i64);
        let (ox, oy) = (origin.x.round() as i64, origin.y.round() as i64);
        if ox - hx < 0
            || oy - hy < 0
            || ox + hx >= patch.width() as i64
            || oy + hy >= patch.height() as i64
        {
            return Err(MouthError::PartOutOfPatch { part, x: origin.x, y: origin.y });
        }
        let mut intensities = Vec::with_capacity(w * h);
        let mut valid = Vec::with_capacity(w * h);
        for dy in -hy..=hy {
            for dx in -hx..=hx {
                let (x, y) = ((ox + dx) as usize, (oy + dy) as usize);
                intensities.push(patch.get(x, y));
                valid.push(patch.is_valid(x, y));
            }
        }
        let valid_count = valid.iter().filter(|v| **v).count();
        let mean = if valid_count > 0 {
            intensities.iter().zip(&valid).filter(|(_, v)| **v).map(|(i, _)| i).sum::<f64>()
                / valid_count as f64
        } else {
            0.0
        };
        let sq_sum = intensities
            .iter()
            .zip(&valid)
            .filter(|(_, v)| **v)
            .map(|(i, _)| (i - mean) * (i - mean))
            .sum();
        Ok(PartTemplate {
            origin: Vec2::new(ox as f64, oy as f64),
            width: w,
            height: h,
            intensities,
            valid,
            mean,
            sq_sum,
            valid_count,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn valid_count(&self) -> usize {
        self.valid_count
    }

    pub fn intensity_at(&self, k: usize) -> f64 {
        self.intensities[k]
    }

    pub fn valid_at(&self, k: usize) -> bool {
        self.valid[k]
    }
}

/// The four mouth part templates at their initial locations.
#[derive(Debug, Clone)]
pub struct MouthParts {
    pub left_corner: PartTemplate,
    pub right_corner: PartTemplate,
    pub upper_lip: PartTemplate,
    pub lower_lip: PartTemplate,
}

/// One tracked animation unit: its slot in the model's alpha vector, the
/// conversion rate from model-unit part displacement to parameter units, and
/// its clamping limits.
#[derive(Debug, Clone, Copy)]
pub struct AuBinding {
    pub index: usize,
    /// alpha per model unit of displacement at the left/right (or only)
    /// landmark.
    pub rate_left: f64,
    pub rate_right: f64,
    pub limits: (f64, f64),
}

fn binding_for(
    model: &FaceModel,
    au_name: &str,
    landmarks: &[&str],
    component: fn(crate::geom::Vec3) -> f64,
) -> Result<AuBinding, MouthError> {
    let index = model.au_index(au_name)?;
    let unit = &model.animation_units()[index];
    let mut rates = Vec::new();
    for lm in landmarks {
        let v = model.landmark(lm)?;
        let d = component(unit.displacement_at(v));
        if d == 0.0 {
            return Err(MouthError::ZeroRate { name: au_name.into(), landmark: lm.to_string() });
        }
        rates.push(1.0 / d);
    }
    Ok(AuBinding {
        index,
        rate_left: rates[0],
        rate_right: *rates.last().unwrap(),
        limits: unit.limits,
    })
}

/// The four mouth animation parameters with their deformation rates and
/// limits; values are clamped after every update.
#[derive(Debug, Clone)]
pub struct MouthAuState {
    pub jaw: AuBinding,
    pub upper_lip: AuBinding,
    pub corner_h: AuBinding,
    pub corner_v: AuBinding,
    pub values: [f64; 4],
}

impl MouthAuState {
    pub fn from_model(model: &FaceModel) -> Result<Self, MouthError> {
        Ok(MouthAuState {
            jaw: binding_for(model, AU_JAW_DROP, &[landmark_names::LOWER_LIP], |d| d.y)?,
            upper_lip: binding_for(model, AU_UPPER_LIP_RAISE, &[landmark_names::UPPER_LIP], |d| {
                d.y
            })?,
            corner_h: binding_for(
                model,
                AU_CORNER_STRETCH,
                &[landmark_names::MOUTH_CORNER_LEFT, landmark_names::MOUTH_CORNER_RIGHT],
                |d| d.x,
            )?,
            corner_v: binding_for(
                model,
                AU_CORNER_RAISE,
                &[landmark_names::MOUTH_CORNER_LEFT, landmark_names::MOUTH_CORNER_RIGHT],
                |d| d.y,
            )?,
            values: [0.0; 4],
        })
    }

    /// Write the tracked values into a full alpha vector.
    pub fn apply_to(&self, alpha: &mut [f64]) {
        alpha[self.jaw.index] = self.values[0];
        alpha[self.upper_lip.index] = self.values[1];
        alpha[self.corner_h.index] = self.values[2];
        alpha[self.corner_v.index] = self.values[3];
    }

    pub fn load_from(&mut self, alpha: &[f64]) {
        self.values = [
            alpha[self.jaw.index],
            alpha[self.upper_lip.index],
            alpha[self.corner_h.index],
            alpha[self.corner_v.index],
        ];
    }
}

/// Project the mouth landmarks into the patch, refine the corner origins
/// with the Harris detector, and cut the four templates.
pub fn extract_parts(
    patch: &RectifiedPatch,
    model: &FaceModel,
    state: &ModelState,
    grid: &AnchorGrid,
    config: &MouthConfig,
) -> Result<MouthParts, MouthError> {
    let g = model.deform(&state.sigma, &state.alpha)?;
    let origin_of = |name: &str| -> Result<Vec2, MouthError> {
        let v = g[model.landmark(name)?].xy();
        let p = grid.spec().to_patch(v);
        Ok(Vec2::new(p.x.round(), p.y.round()))
    };

    let gray = patch.to_gray();
    let mut left = origin_of(landmark_names::MOUTH_CORNER_LEFT)?;
    let mut right = origin_of(landmark_names::MOUTH_CORNER_RIGHT)?;
    left = harris_strongest(&gray, left, config.harris_radius)?;
    right = harris_strongest(&gray, right, config.harris_radius)?;

    let corner = (config.corner_template, config.corner_template);
    Ok(MouthParts {
        left_corner: PartTemplate::cut(patch, left, corner, "left corner")?,
        right_corner: PartTemplate::cut(patch, right, corner, "right corner")?,
        upper_lip: PartTemplate::cut(
            patch,
            origin_of(landmark_names::UPPER_LIP)?,
            config.lip_template,
            "upper lip",
        )?,
        lower_lip: PartTemplate::cut(
            patch,
            origin_of(landmark_names::LOWER_LIP)?,
            config.lip_template,
            "lower lip",
        )?,
    })
}

/// ZSSD-N scores over all placements of a part template within its search
/// region; normalization statistics come from the whole region.
#[derive(Debug, Clone)]
pub struct SimilarityMap {
    pub ex: i64,
    pub ey: i64,
    scores: Vec<f64>,
}

impl SimilarityMap {
    fn width(&self) -> i64 {
        2 * self.ex + 1
    }

    pub fn score_at(&self, di: i64, dj: i64) -> f64 {
        let ix = (dj + self.ey) * self.width() + (di + self.ex);
        self.scores[ix as usize]
    }

    /// Placement minimizing the score; exact ties keep the smaller
    /// displacement so a perfectly reconstructed part reports zero motion.
    pub fn best(&self) -> (Vec2, f64) {
        let mut best_d = Vec2::ZERO;
        let mut best_s = self.score_at(0, 0);
        for dj in -self.ey..=self.ey {
            for di in -self.ex..=self.ex {
                let s = self.score_at(di, dj);
                let d = Vec2::new(di as f64, dj as f64);
                if s < best_s || (s == best_s && d.norm_sq() < best_d.norm_sq()) {
                    best_s = s;
                    best_d = d;
                }
            }
        }
        (best_d, best_s)
    }
}

/// Score every placement of `part` within `origin +- (ex, ey)` against the
/// patch. Invalid patch cells are excluded from the sums with counts
/// rescaled proportionally.
pub fn similarity_map(
    patch: &RectifiedPatch,
    part: &PartTemplate,
    ex: usize,
    ey: usize,
    name: &'static str,
) -> Result<SimilarityMap, MouthError> {
    let (ex, ey) = (ex as i64, ey as i64);
    let (hx, hy) = ((part.width / 2) as i64, (part.height / 2) as i64);
    let (ox, oy) = (part.origin.x as i64, part.origin.y as i64);

    // whole-region statistics
    let (rx0, rx1) = (ox - hx - ex, ox + hx + ex);
    let (ry0, ry1) = (oy - hy - ey, oy + hy + ey);
    let mut region = Vec::new();
    for y in ry0..=ry1 {
        for x in rx0..=rx1 {
            if x >= 0 && y >= 0 && (x as usize) < patch.width() && (y as usize) < patch.height() {
                let (x, y) = (x as usize, y as usize);
                if patch.is_valid(x, y) {
                    region.push(patch.get(x, y));
                }
            }
        }
    }
    if region.is_empty() || part.valid_count == 0 {
        return Err(MouthError::EmptySearchRegion { part: name });
    }
    let n_a = region.len() as f64;
    let region_mean = region.iter().sum::<f64>() / n_a;
    let region_sq: f64 = region.iter().map(|v| (v - region_mean) * (v - region_mean)).sum();

    let n_t = part.valid_count as f64;
    let c = (n_t * n_t) / (n_a * n_a);
    let denom = (c * part.sq_sum * region_sq).sqrt();

    let mut scores = Vec::with_capacity(((2 * ex + 1) * (2 * ey + 1)) as usize);
    let mut window = Vec::with_capacity(part.valid_count);
    for dj in -ey..=ey {
        for di in -ex..=ex {
            // collect the valid template/patch pairs at this placement; the
            // image side is zero-meaned by its own window so a perfect
            // reconstruction scores exactly zero
            window.clear();
            let mut k = 0usize;
            for ty in -hy..=hy {
                for tx in -hx..=hx {
                    let t_ok = part.valid[k];
                    let t_val = part.intensities[k];
                    k += 1;
                    if !t_ok {
                        continue;
                    }
                    let (px, py) = (ox + di + tx, oy + dj + ty);
                    if px < 0
                        || py < 0
                        || px as usize >= patch.width()
                        || py as usize >= patch.height()
                        || !patch.is_valid(px as usize, py as usize)
                    {
                        continue;
                    }
                    window.push((t_val, patch.get(px as usize, py as usize)));
                }
            }
            let pairs = window.len();
            let score = if pairs * 2 < part.valid_count || denom <= 0.0 {
                f64::INFINITY
            } else {
                let w_mean = window.iter().map(|(_, i)| i).sum::<f64>() / pairs as f64;
                let acc: f64 = window
                    .iter()
                    .map(|(t, i)| {
                        let d = (t - part.mean) - (i - w_mean);
                        d * d
                    })
                    .sum();
                acc * (n_t / pairs as f64) / denom
            };
            scores.push(score);
        }
    }
    // a region with no scoreable placement cannot produce a match
    if scores.iter().all(|s| !s.is_finite()) && part.sq_sum > 0.0 && region_sq > 0.0 {
        return Err(MouthError::EmptySearchRegion { part: name });
    }
    // degenerate flat region: every placement ties, best() keeps zero motion
    if denom <= 0.0 {
        scores.iter_mut().for_each(|s| *s = 0.0);
    }
    Ok(SimilarityMap { ex, ey, scores })
}

/// Part displacements found this frame, in RI pixels, plus the updated
/// animation parameters.
#[derive(Debug, Clone)]
pub struct MouthUpdate {
    pub au: MouthAuState,
    /// Order: left corner, right corner, upper lip, lower lip.
    pub displacements: [Vec2; 4],
}

/// One tracking step: locate each part's best match around its initial
/// location, apply the corner-occlusion rule for large head yaw, convert the
/// displacements into parameter increments and clamp.
pub fn track_mouth(
    patch: &RectifiedPatch,
    parts: &MouthParts,
    au: &MouthAuState,
    head_phi_y: f64,
    config: &MouthConfig,
) -> Result<MouthUpdate, MouthError> {
    let (cs, ls) = (config.corner_search, config.lip_search);
    let (mut d_left, _) = similarity_map(patch, &parts.left_corner, cs, cs, "left corner")?.best();
    let (mut d_right, _) =
        similarity_map(patch, &parts.right_corner, cs, cs, "right corner")?.best();
    let (d_up, _) = similarity_map(patch, &parts.upper_lip, 0, ls, "upper lip")?.best();
    let (d_low, _) = similarity_map(patch, &parts.lower_lip, 0, ls, "lower lip")?.best();

    // the corner turned away from the camera mirrors the visible one
    if head_phi_y > config.phi_y_limit {
        d_right = d_left;
    } else if head_phi_y < -config.phi_y_limit {
        d_left = d_right;
    }

    let r = patch.ratio();
    let mut au = au.clone();
    au.values[0] += d_low.y * r.y * au.jaw.rate_left;
    au.values[1] += d_up.y * r.y * au.upper_lip.rate_left;
    au.values[2] +=
        0.5 * (d_left.x * r.x * au.corner_h.rate_left + d_right.x * r.x * au.corner_h.rate_right);
    au.values[3] +=
        0.5 * (d_left.y * r.y * au.corner_v.rate_left + d_right.y * r.y * au.corner_v.rate_right);
    for (k, binding) in
        [au.jaw, au.upper_lip, au.corner_h, au.corner_v].iter().enumerate()
    {
        au.values[k] = au.values[k].clamp(binding.limits.0, binding.limits.1);
    }

    Ok(MouthUpdate { au, displacements: [d_left, d_right, d_up, d_low] })
}
