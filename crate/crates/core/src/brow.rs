//! Eyebrow tracker: Levenberg-Marquardt minimization of a template-similarity
//! error weighted by an angle-based internal shape energy over three vertical
//! part displacements.
//!
//! The eyebrow model is straight: the optimal angles between neighboring
//! parts are all 180 degrees, and corner parts use a mirrored neighbor, which
//! pins their own energy at zero and concentrates the shape constraint on the
//! middle part.

use crate::facemodel::{FaceModel, ModelError, ModelState};
use crate::geom::Vec2;
use crate::lmsolve::{self, LmConfig, LmError};
use crate::mouth::{MouthError, PartTemplate};
use crate::rectify::{AnchorGrid, BrowSide, RectifiedPatch};

#[derive(Debug, thiserror::Error)]
pub enum BrowError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("part extraction failed: {0}")]
    Part(#[from] MouthError),
    #[error("displacement solve failed: {0}")]
    Solver(#[from] LmError),
    #[error("animation unit '{name}' does not displace its brow landmark")]
    ZeroRate { name: String },
}

/// Vertical RI-pixel displacements of the three eyebrow parts, ordered
/// left to right in patch coordinates.
pub type BrowDisplacements = [f64; 3];

/// The three part templates with their initial locations and the optimal
/// inter-part angles (all straight).
#[derive(Debug, Clone)]
pub struct BrowParts {
    pub parts: [PartTemplate; 3],
    pub origins: [Vec2; 3],
    pub u: [f64; 3],
}

/// Cut the three part templates at the projected brow landmarks.
pub fn extract_brow_parts(
    patch: &RectifiedPatch,
    model: &FaceModel,
    state: &ModelState,
    grid: &AnchorGrid,
    side: BrowSide,
    template: (usize, usize),
) -> Result<BrowParts, BrowError> {
    let g = model.deform(&state.sigma, &state.alpha)?;
    let mut named: Vec<(Vec2, &'static str)> = Vec::new();
    for name in side.landmark_names() {
        let p = grid.spec().to_patch(g[model.landmark(name)?].xy());
        named.push((Vec2::new(p.x.round(), p.y.round()), name));
    }
    // geometric left-to-right order inside the patch
    named.sort_by(|a, b| a.0.x.total_cmp(&b.0.x));
    let origins = [named[0].0, named[1].0, named[2].0];
    let parts = [
        PartTemplate::cut(patch, origins[0], template, named[0].1)?,
        PartTemplate::cut(patch, origins[1], template, named[1].1)?,
        PartTemplate::cut(patch, origins[2], template, named[2].1)?,
    ];
    Ok(BrowParts { parts, origins, u: [std::f64::consts::PI; 3] })
}

/// Angle at `center` between the directions toward `prev` and `next`,
/// in [0, pi]. Exactly pi for anti-parallel directions.
fn angle_at(center: Vec2, prev: Vec2, next: Vec2) -> Option<f64> {
    let a = prev - center;
    let b = next - center;
    if (a.x == 0.0 && a.y == 0.0) || (b.x == 0.0 && b.y == 0.0) {
        return None;
    }
    Some(a.cross(b).abs().atan2(a.dot(b)))
}

/// Per-part internal shape energy ((u_i - angle_i) / 2)^2 at the displaced
/// part positions. Corner parts use the point reflection of their single
/// neighbor through themselves, so their energy is identically zero; the
/// middle part's energy vanishes exactly when the three points are collinear.
pub fn internal_energy(
    a: &BrowDisplacements,
    origins: &[Vec2; 3],
    u: &[f64; 3],
) -> [f64; 3] {
    let p: Vec<Vec2> = origins
        .iter()
        .zip(a)
        .map(|(o, d)| Vec2::new(o.x, o.y + d))
        .collect();
    let mut out = [0.0; 3];
    for i in 0..3 {
        let (prev, next) = match i {
            0 => (p[0] + (p[0] - p[1]), p[1]),
            1 => (p[0], p[2]),
            _ => (p[1], p[2] + (p[2] - p[1])),
        };
        match angle_at(p[i], prev, next) {
            Some(theta) => {
                let dev = (u[i] - theta) / 2.0;
                out[i] = dev * dev;
            }
            None => {
                log::warn!("coincident eyebrow neighbor points at part {i}; energy set to 0");
                out[i] = 0.0;
            }
        }
    }
    out
}

const OUT_OF_PATCH_PENALTY: f64 = 1e3;

/// Mean absolute intensity difference between a part template and the patch
/// at `origin + (0, dy)`, sampled bilinearly over valid cells. Placements
/// that mostly leave the patch earn a large finite penalty that grows with
/// the overflow, keeping the solver in-domain.
fn part_similarity(patch: &RectifiedPatch, part: &PartTemplate, dy: f64) -> f64 {
    let (w, h) = part.size();
    let (hx, hy) = ((w / 2) as f64, (h / 2) as f64);
    let center = Vec2::new(part.origin.x, part.origin.y + dy);
    let overflow = (center.y + hy - (patch.height() - 1) as f64)
        .max(-(center.y - hy))
        .max(0.0);
    if overflow > 0.0 {
        return OUT_OF_PATCH_PENALTY + 50.0 * overflow;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut k = 0usize;
    for ty in 0..h {
        for tx in 0..w {
            let t_ok = part.valid_at(k);
            let t_val = part.intensity_at(k);
            k += 1;
            if !t_ok {
                continue;
            }
            let q = Vec2::new(center.x + tx as f64 - hx, center.y + ty as f64 - hy);
            if let Some(i) = patch.sample_valid(q) {
                sum += (t_val - i).abs();
                n += 1;
            }
        }
    }
    if n * 2 < part.valid_count() {
        return OUT_OF_PATCH_PENALTY;
    }
    sum / n as f64
}

/// The three residuals e_i = sqrt(1 + c Int_i) * |I(a_i) - I_i|.
pub fn brow_residual(
    patch: &RectifiedPatch,
    parts: &BrowParts,
    a: &BrowDisplacements,
    shape_c: f64,
) -> [f64; 3] {
    let energies = internal_energy(a, &parts.origins, &parts.u);
    let mut out = [0.0; 3];
    for i in 0..3 {
        let w = 1.0 + shape_c * energies[i];
        out[i] = w.sqrt() * part_similarity(patch, &parts.parts[i], a[i]);
    }
    out
}

/// Minimize the weighted similarity error over the three displacements.
pub fn track_brow(
    patch: &RectifiedPatch,
    parts: &BrowParts,
    initial: &BrowDisplacements,
    shape_c: f64,
    config: &LmConfig,
) -> Result<BrowDisplacements, BrowError> {
    let res = lmsolve::minimize(
        |a| brow_residual(patch, parts, &[a[0], a[1], a[2]], shape_c).to_vec(),
        initial,
        config,
    )?;
    let bound = (patch.height() - 1) as f64;
    Ok([
        res.params[0].clamp(-bound, bound),
        res.params[1].clamp(-bound, bound),
        res.params[2].clamp(-bound, bound),
    ])
}

/// Brow displacement solves default to quarter-pixel steps.
pub fn brow_lm_config() -> LmConfig {
    LmConfig::new(vec![0.25; 3])
}

/// Mapping from one brow part's displacement to its animation parameter.
#[derive(Debug, Clone, Copy)]
pub struct BrowAu {
    pub index: usize,
    /// alpha per model unit of vertical displacement.
    pub rate: f64,
    pub limits: (f64, f64),
}

/// The per-side bindings, ordered like the parts (left to right in the
/// patch).
#[derive(Debug, Clone)]
pub struct BrowAuState {
    pub bindings: [BrowAu; 3],
}

impl BrowAuState {
    pub fn from_model(model: &FaceModel, side: BrowSide) -> Result<Self, BrowError> {
        let g = model.base_shape();
        let mut named: Vec<(f64, &'static str)> = Vec::new();
        for name in side.landmark_names() {
            named.push((g[model.landmark(name)?].x, name));
        }
        named.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut bindings = Vec::new();
        for (_, landmark) in &named {
            let au_name = format!("{landmark}_raise");
            let index = model.au_index(&au_name)?;
            let unit = &model.animation_units()[index];
            let d = unit.displacement_at(model.landmark(landmark)?).y;
            if d == 0.0 {
                return Err(BrowError::ZeroRate { name: au_name });
            }
            bindings.push(BrowAu { index, rate: 1.0 / d, limits: unit.limits });
        }
        Ok(BrowAuState { bindings: [bindings[0], bindings[1], bindings[2]] })
    }

    /// Convert displacements (RI pixels) to clamped parameter values and
    /// write them into the alpha vector.
    pub fn apply_to(&self, a: &BrowDisplacements, ratio_y: f64, alpha: &mut [f64]) {
        for (b, d) in self.bindings.iter().zip(a) {
            alpha[b.index] = (d * ratio_y * b.rate).clamp(b.limits.0, b.limits.1);
        }
    }
}
