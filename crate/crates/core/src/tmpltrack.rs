//! Template-based pose refinement: grid-selected surface template, zero-mean
//! residuals normalized by previous-frame statistics, and per-pixel occlusion
//! outlier removal.
//!
//! The template is captured once at initialization and never updated;
//! illumination changes are absorbed by the normalization statistics, which
//! are refreshed from each successfully fitted frame.

use crate::facemodel::{FaceModel, ModelState, PoseParams, SurfaceAnchor};
use crate::geom::Vec2;
use crate::imgcore::GrayImage;
use crate::lmsolve::{self, LmConfig, LmError};

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template too sparse: {count} anchors, at least {min} required")]
    TooSparse { count: usize, min: usize },
    #[error("model error: {0}")]
    Model(#[from] crate::facemodel::ModelError),
    #[error("corrupt normalization stats (v = {v})")]
    CorruptStats { v: f64 },
    #[error("refine failed: {sampled} of {total} anchors sampleable")]
    MajorityOutOfFrame { sampled: usize, total: usize },
    #[error("refine failed: {0}")]
    Solver(#[from] LmError),
    #[error("mask length {got} does not match anchor count {expected}")]
    MaskMismatch { got: usize, expected: usize },
}

pub const MIN_TEMPLATE_ANCHORS: usize = 50;

/// Surface-anchored template: per-anchor capture intensities plus the fixed
/// normalization constants derived from them.
#[derive(Debug, Clone)]
pub struct FaceTemplate {
    anchors: Vec<SurfaceAnchor>,
    intensities: Vec<f64>,
    template_mean: f64,
    template_sq_sum: f64,
}

impl FaceTemplate {
    pub fn from_parts(anchors: Vec<SurfaceAnchor>, intensities: Vec<f64>) -> Self {
        assert_eq!(anchors.len(), intensities.len());
        let n = intensities.len().max(1) as f64;
        let template_mean = intensities.iter().sum::<f64>() / n;
        let template_sq_sum =
            intensities.iter().map(|v| (v - template_mean) * (v - template_mean)).sum();
        FaceTemplate { anchors, intensities, template_mean, template_sq_sum }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[SurfaceAnchor] {
        &self.anchors
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn mean(&self) -> f64 {
        self.template_mean
    }

    pub fn sq_sum(&self) -> f64 {
        self.template_sq_sum
    }

    /// First-frame statistics: the template stands in for the previously
    /// fitted image.
    pub fn bootstrap_stats(&self) -> NormStats {
        NormStats {
            prev_mean: self.template_mean,
            prev_sq_sum: self.template_sq_sum,
            prev_count: self.len(),
        }
    }
}

/// Normalization statistics of the previously fitted image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub prev_mean: f64,
    pub prev_sq_sum: f64,
    pub prev_count: usize,
}

/// Per-anchor exclusion flags; a flagged anchor sits out the next refine.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelOutlierMask {
    flags: Vec<bool>,
}

impl PixelOutlierMask {
    pub fn none(len: usize) -> Self {
        PixelOutlierMask { flags: vec![false; len] }
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        PixelOutlierMask { flags }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn excluded_count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    pub fn or_with(&mut self, other: &[bool]) {
        for (f, o) in self.flags.iter_mut().zip(other) {
            *f |= *o;
        }
    }
}

/// Intersect a regular screen-space grid with the posed mesh and sample the
/// frame at the hits. Misses and unsampleable points are discarded.
pub fn select_grid_template(
    model: &FaceModel,
    state: &ModelState,
    frame: &GrayImage,
    spacing: f64,
) -> Result<FaceTemplate, TemplateError> {
    let mesh = model.posed(state)?;
    let (lo, hi) = mesh.bbox();
    let mut anchors = Vec::new();
    let mut intensities = Vec::new();
    let mut y = lo.y;
    while y <= hi.y {
        let mut x = lo.x;
        while x <= hi.x {
            let p = Vec2::new(x, y);
            if let Some(anchor) = mesh.intersect(p) {
                if let Some(i) = frame.sample_bilinear(p) {
                    anchors.push(anchor);
                    intensities.push(i);
                }
            }
            x += spacing;
        }
        y += spacing;
    }
    if anchors.len() < MIN_TEMPLATE_ANCHORS {
        return Err(TemplateError::TooSparse { count: anchors.len(), min: MIN_TEMPLATE_ANCHORS });
    }
    Ok(FaceTemplate::from_parts(anchors, intensities))
}

/// Pick a grid spacing that lands near `target` anchors, keeping per-frame
/// cost independent of the input resolution.
pub fn select_template_auto(
    model: &FaceModel,
    state: &ModelState,
    frame: &GrayImage,
    target: usize,
) -> Result<(FaceTemplate, f64), TemplateError> {
    let mesh = model.posed(state)?;
    let (lo, hi) = mesh.bbox();
    let area = ((hi.x - lo.x) * (hi.y - lo.y)).max(1.0);
    // silhouette fills roughly two thirds of the bounding box
    let mut spacing = (area * 0.65 / target.max(1) as f64).sqrt().max(1.0);
    let first = select_grid_template(model, state, frame, spacing)?;
    let ratio = (first.len() as f64 / target as f64).sqrt();
    if (0.9..=1.1).contains(&ratio) {
        return Ok((first, spacing));
    }
    spacing = (spacing * ratio).max(1.0);
    let second = select_grid_template(model, state, frame, spacing)?;
    Ok((second, spacing))
}

/// Residual evaluation: per-anchor normalized errors plus the bookkeeping the
/// controller needs (which anchors fell outside the frame, how many entered
/// the sums).
#[derive(Debug, Clone)]
pub struct ResidualEval {
    pub residuals: Vec<f64>,
    pub out_of_frame: Vec<bool>,
    pub used: usize,
    pub v: f64,
}

fn normalization(
    template: &FaceTemplate,
    stats: &NormStats,
    unmasked: usize,
) -> Result<f64, TemplateError> {
    let n_p = unmasked.max(1) as f64;
    let c = (stats.prev_count as f64 * template.len() as f64) / (n_p * n_p);
    let v = (c * template.template_sq_sum * stats.prev_sq_sum).sqrt();
    if !(v > 0.0) || !v.is_finite() {
        return Err(TemplateError::CorruptStats { v });
    }
    Ok(v)
}

/// Normalized residual vector at the state's pose. Masked anchors contribute
/// exactly zero; anchors projecting outside the frame contribute zero and are
/// flagged for masking next frame.
pub fn residual_norm(
    template: &FaceTemplate,
    frame: &GrayImage,
    model: &FaceModel,
    state: &ModelState,
    stats: &NormStats,
    mask: &PixelOutlierMask,
) -> Result<ResidualEval, TemplateError> {
    if mask.len() != template.len() {
        return Err(TemplateError::MaskMismatch { got: mask.len(), expected: template.len() });
    }
    let unmasked = template.len() - mask.excluded_count();
    let v = normalization(template, stats, unmasked)?;
    let inv_sqrt_v = 1.0 / v.sqrt();
    let mesh = model.posed(state)?;

    let mut residuals = vec![0.0; template.len()];
    let mut out_of_frame = vec![false; template.len()];
    let mut used = 0;
    for (i, anchor) in template.anchors.iter().enumerate() {
        if mask.flags[i] {
            continue;
        }
        let pos = mesh.anchor_position(anchor).xy();
        match frame.sample_bilinear(pos) {
            Some(intensity) => {
                residuals[i] = ((template.intensities[i] - template.template_mean)
                    - (intensity - stats.prev_mean))
                    * inv_sqrt_v;
                used += 1;
            }
            None => {
                out_of_frame[i] = true;
            }
        }
    }
    Ok(ResidualEval { residuals, out_of_frame, used, v })
}

/// Successful refinement: the fitted pose, its error, refreshed statistics
/// for the next frame and the final residuals for outlier detection.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub pose: PoseParams,
    /// Sum of squared normalized residuals at the fitted pose.
    pub final_error: f64,
    /// Anchors that entered the final sums.
    pub used_count: usize,
    pub stats: NormStats,
    pub residuals: Vec<f64>,
    pub out_of_frame: Vec<bool>,
    pub iterations: usize,
}

impl RefineOutcome {
    /// Error normalized per participating anchor; the controller compares
    /// this against its acceptability threshold.
    pub fn error_per_point(&self) -> f64 {
        self.final_error / self.used_count.max(1) as f64
    }
}

/// Levenberg-Marquardt refinement of the six pose parameters on the
/// normalized residuals. On success the statistics are recomputed from the
/// fitted frame; on failure they are left for the caller to keep.
pub fn refine(
    template: &FaceTemplate,
    frame: &GrayImage,
    model: &FaceModel,
    initial: &ModelState,
    stats: &NormStats,
    mask: &PixelOutlierMask,
    config: &LmConfig,
) -> Result<RefineOutcome, TemplateError> {
    let check_coverage = |eval: &ResidualEval| -> Result<(), TemplateError> {
        let total = template.len();
        if eval.used * 2 < total {
            return Err(TemplateError::MajorityOutOfFrame { sampled: eval.used, total });
        }
        Ok(())
    };
    check_coverage(&residual_norm(template, frame, model, initial, stats, mask)?)?;

    let result = lmsolve::minimize(
        |a| {
            let state = initial.with_pose(PoseParams::from_array(a.try_into().unwrap()));
            residual_norm(template, frame, model, &state, stats, mask)
                .map(|e| e.residuals)
                .unwrap_or_else(|_| vec![f64::NAN])
        },
        &initial.pose.to_array(),
        config,
    )?;

    let pose = PoseParams::from_array(result.params.clone().try_into().unwrap());
    let fitted = initial.with_pose(pose);
    let eval = residual_norm(template, frame, model, &fitted, stats, mask)?;
    check_coverage(&eval)?;

    // refresh normalization statistics from the fitted frame
    let mesh = model.posed(&fitted)?;
    let mut samples = Vec::with_capacity(eval.used);
    for (i, anchor) in template.anchors.iter().enumerate() {
        if mask.flags[i] || eval.out_of_frame[i] {
            continue;
        }
        if let Some(intensity) = frame.sample_bilinear(mesh.anchor_position(anchor).xy()) {
            samples.push(intensity);
        }
    }
    let count = samples.len();
    let mean = samples.iter().sum::<f64>() / count.max(1) as f64;
    let sq_sum = samples.iter().map(|s| (s - mean) * (s - mean)).sum();

    Ok(RefineOutcome {
        pose,
        final_error: result.final_error,
        used_count: eval.used,
        stats: NormStats { prev_mean: mean, prev_sq_sum: sq_sum, prev_count: count },
        residuals: eval.residuals,
        out_of_frame: eval.out_of_frame,
        iterations: result.iterations,
    })
}

/// Occlusion detection on the squared normalized residuals: an anchor whose
/// x_i = e_i^2 exceeds sigma_x = sqrt(sum((x_i - median_x)^2) / N_x) sits out
/// the next frame. Only anchors that participated in the fit are judged;
/// excluded ones return next frame unless re-flagged.
pub fn detect_pixel_outliers(residuals: &[f64], participated: &[bool]) -> PixelOutlierMask {
    let xs: Vec<f64> = residuals
        .iter()
        .zip(participated)
        .filter(|(_, p)| **p)
        .map(|(e, _)| e * e)
        .collect();
    if xs.is_empty() {
        return PixelOutlierMask::none(residuals.len());
    }
    let mut sorted = xs.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let sigma_x =
        (xs.iter().map(|x| (x - median) * (x - median)).sum::<f64>() / xs.len() as f64).sqrt();
    let flags = residuals
        .iter()
        .zip(participated)
        .map(|(e, p)| *p && e * e > sigma_x)
        .collect();
    PixelOutlierMask::from_flags(flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facemodel::FaceModel;
    use crate::preest::pose_fd_steps;

    fn test_state(s: f64, tx: f64, ty: f64) -> ModelState {
        let model = FaceModel::bundled();
        let mut st = model.neutral_state();
        st.pose.s = s;
        st.pose.t_x = tx;
        st.pose.t_y = ty;
        st
    }

    fn noise_frame(w: usize, h: usize) -> GrayImage {
        let lattice = |ix: i64, iy: i64, salt: i64| -> f64 {
            let mut v =
                (ix.wrapping_mul(73_856_093) ^ iy.wrapping_mul(19_349_663) ^ salt) as u64;
            v = v.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((v >> 33) % 256) as f64 / 255.0 - 0.5
        };
        let octave = |x: f64, y: f64, cell: f64, salt: i64| -> f64 {
            let (fx, fy) = (x / cell, y / cell);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (tx, ty) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let top = lattice(x0, y0, salt) * (1.0 - tx) + lattice(x0 + 1, y0, salt) * tx;
            let bot =
                lattice(x0, y0 + 1, salt) * (1.0 - tx) + lattice(x0 + 1, y0 + 1, salt) * tx;
            top * (1.0 - ty) + bot * ty
        };
        GrayImage::from_fn(w, h, |x, y| {
            let (fx, fy) = (x as f64, y as f64);
            let v = 90.0 * octave(fx, fy, 24.0, 3)
                + 60.0 * octave(fx, fy, 12.0, 7)
                + 40.0 * octave(fx, fy, 6.0, 13);
            (128.0 + v).clamp(0.0, 255.0)
        })
    }

    fn shift_frame(src: &GrayImage, dx: i64, dy: i64) -> GrayImage {
        GrayImage::from_fn(src.width(), src.height(), |x, y| {
            let sx = (x as i64 - dx).clamp(0, src.width() as i64 - 1) as usize;
            let sy = (y as i64 - dy).clamp(0, src.height() as i64 - 1) as usize;
            src.get(sx, sy)
        })
    }

    #[test]
    fn auto_template_lands_near_target() {
        let model = FaceModel::bundled();
        let state = test_state(45.0, 160.0, 120.0);
        let frame = noise_frame(320, 240);
        let (tpl, spacing) = select_template_auto(&model, &state, &frame, 400).unwrap();
        assert!((300..=500).contains(&tpl.len()), "got {} anchors", tpl.len());
        assert!(spacing > 1.0);
    }

    #[test]
    fn halved_spacing_quadruples_anchor_count() {
        let model = FaceModel::bundled();
        let state = test_state(45.0, 160.0, 120.0);
        let frame = noise_frame(320, 240);
        let coarse = select_grid_template(&model, &state, &frame, 6.0).unwrap();
        let fine = select_grid_template(&model, &state, &frame, 3.0).unwrap();
        let ratio = fine.len() as f64 / coarse.len() as f64;
        assert!((3.2..=4.8).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn template_too_sparse_errors() {
        let model = FaceModel::bundled();
        let state = test_state(45.0, 160.0, 120.0);
        let frame = noise_frame(320, 240);
        assert!(matches!(
            select_grid_template(&model, &state, &frame, 40.0),
            Err(TemplateError::TooSparse { .. })
        ));
    }

    #[test]
    fn capture_frame_residuals_are_zero() {
        let model = FaceModel::bundled();
        let state = test_state(45.0, 160.0, 120.0);
        let frame = noise_frame(320, 240);
        let tpl = select_grid_template(&model, &state, &frame, 4.0).unwrap();
        let stats = tpl.bootstrap_stats();
        let mask = PixelOutlierMask::none(tpl.len());
        let eval = residual_norm(&tpl, &frame, &model, &state, &stats, &mask).unwrap();
        assert_eq!(eval.used, tpl.len());
        for r in &eval.residuals {
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn constant_bias_cancels() {
        let model = FaceModel::bundled();
        let state = test_state(45.0, 160.0, 120.0);
        let frame = noise_frame(320, 240);
        let tpl = select_grid_template(&model, &state, &frame, 4.0).unwrap();
        let biased = GrayImage::from_fn(320, 240, |x, y| frame.get(x, y) + 50.0);
        // stats refreshed on the biased frame
        let stats = NormStats {
            prev_mean: tpl.mean() + 50.0,
            prev_sq_sum: tpl.sq_sum(),
            prev_count: tpl.len(),
        };
        let mask = PixelOutlierMask::none(tpl.len());
        let eval = residual_norm(&tpl, &biased, &model, &state, &stats, &mask).unwrap();
        for r in &eval.residuals {
            assert!(r.abs() < 1e-9);
        }
    }

    #[test]
    fn toy_template_matches_direct_formula() {
        let model = FaceModel::bundled();
        let state = test_state(40.0, 80.0, 60.0);
        let frame = noise_frame(160, 120);
        let full = select_grid_template(&model, &state, &frame, 8.0).unwrap();
        let anchors = full.anchors()[..3].to_vec();
        let tpl = FaceTemplate::from_parts(anchors.clone(), vec![10.0, 20.0, 40.0]);
        let stats = NormStats { prev_mean: 30.0, prev_sq_sum: 700.0, prev_count: 4 };
        let mut mask = PixelOutlierMask::none(3);
        mask.or_with(&[false, true, false]);
        let eval = residual_norm(&tpl, &frame, &model, &state, &stats, &mask).unwrap();

        // direct evaluation of the formulas with hand arithmetic
        let t_mean = (10.0 + 20.0 + 40.0) / 3.0;
        let t_sq: f64 = [10.0, 20.0, 40.0].iter().map(|t| (t - t_mean) * (t - t_mean)).sum();
        let n_p = 2.0; // one anchor masked
        let c = (stats.prev_count as f64 * 3.0) / (n_p * n_p);
        let v = (c * t_sq * stats.prev_sq_sum).sqrt();
        assert!((eval.v - v).abs() < 1e-12);
        let mesh = model.posed(&state).unwrap();
        for (i, t) in [(0usize, 10.0), (2usize, 40.0)] {
            let pos = mesh.anchor_position(&anchors[i]).xy();
            let intensity = frame.sample_bilinear(pos).unwrap();
            let expect = ((t - t_mean) - (intensity - stats.prev_mean)) / v.sqrt();
            assert!((eval.residuals[i] - expect).abs() < 1e-12, "anchor {i}");
        }
        assert_eq!(eval.residuals[1], 0.0);
    }

    #[test]
    fn count_correction_is_one_without_outliers() {
        let model = FaceModel::bundled();
        let state = test_state(45.0, 160.0, 120.0);
        let frame = noise_frame(320, 240);
        let tpl = select_grid_template(&model, &state, &frame, 5.0).unwrap();
        let stats = tpl.bootstrap_stats();
        let mask = PixelOutlierMask::none(tpl.len());
        let eval = residual_norm(&tpl, &frame, &model, &state, &stats, &mask).unwrap();
        let plain_v = (tpl.sq_sum() * stats.prev_sq_sum).sqrt();
        assert_eq!(eval.v, plain_v);
    }

    #[test]
    fn corrupt_stats_error() {
        let model = FaceModel::bundled();
        let state = test_state(45.0, 160.0, 120.0);
        let frame = noise_frame(320, 240);
        let tpl = select_grid_template(&model, &state, &frame, 5.0).unwrap();
        let stats = NormStats { prev_mean: 0.0, prev_sq_sum: 0.0, prev_count: tpl.len() };
        let mask = PixelOutlierMask::none(tpl.len());
        assert!(matches!(
            residual_norm(&tpl, &frame, &model, &state, &stats, &mask),
            Err(TemplateError::CorruptStats { .. })
        ));
    }

    fn refine_cfg() -> LmConfig {
        let mut cfg = LmConfig::new(pose_fd_steps(&PoseParams::identity()));
        cfg.fd_steps = pose_fd_steps(&PoseParams {
            phi_x: 0.0,
            phi_y: 0.0,
            phi_z: 0.0,
            s: 45.0,
            t_x: 0.0,
            t_y: 0.0,
        });
        cfg.max_iterations = 30;
        cfg.eps2 = 1e-12;
        cfg
    }

    #[test]
    fn refine_recovers_integer_shift() {
        let model = FaceModel::bundled();
        let state = test_state(45.0, 160.0, 120.0);
        let frame0 = noise_frame(320, 240);
        let tpl = select_grid_template(&model, &state, &frame0, 4.0).unwrap();
        let stats = tpl.bootstrap_stats();
        let mask = PixelOutlierMask::none(tpl.len());

        let frame1 = shift_frame(&frame0, 3, -2);
        let mut truth = state.pose;
        truth.t_x += 3.0;
        truth.t_y -= 2.0;
        // start from the un-shifted pose, 3.6 px off
        let out =
            refine(&tpl, &frame1, &model, &state, &stats, &mask, &refine_cfg()).unwrap();
        assert!((out.pose.t_x - truth.t_x).abs() < 0.2, "t_x {}", out.pose.t_x);
        assert!((out.pose.t_y - truth.t_y).abs() < 0.2, "t_y {}", out.pose.t_y);
        assert!(out.pose.phi_z.abs() < 0.01);
        assert!(out.error_per_point() < 1e-3);
        // stats refreshed from the fitted frame
        assert_eq!(out.stats.prev_count, out.used_count);
    }

    #[test]
    fn refine_at_truth_returns_immediately() {
        let model = FaceModel::bundled();
        let state = test_state(45.0, 160.0, 120.0);
        let frame = noise_frame(320, 240);
        let tpl = select_grid_template(&model, &state, &frame, 4.0).unwrap();
        let stats = tpl.bootstrap_stats();
        let mask = PixelOutlierMask::none(tpl.len());
        let out = refine(&tpl, &frame, &model, &state, &stats, &mask, &refine_cfg()).unwrap();
        assert!(out.final_error < 1e-12);
        for (a, b) in out.pose.to_array().iter().zip(state.pose.to_array()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn refine_far_off_fails_or_reports_large_error() {
        let model = FaceModel::bundled();
        let state = test_state(45.0, 160.0, 120.0);
        let frame0 = noise_frame(320, 240);
        let tpl = select_grid_template(&model, &state, &frame0, 4.0).unwrap();
        let stats = tpl.bootstrap_stats();
        let mask = PixelOutlierMask::none(tpl.len());

        // well-initialized reference error on the identity frame
        let good = refine(&tpl, &frame0, &model, &state, &stats, &mask, &refine_cfg()).unwrap();

        let mut far = state.clone();
        far.pose.t_x += 40.0;
        match refine(&tpl, &frame0, &model, &far, &stats, &mask, &refine_cfg()) {
            Err(_) => {}
            Ok(out) => {
                let recovered = (out.pose.t_x - state.pose.t_x).abs() < 5.0
                    && out.error_per_point() < 100.0 * good.error_per_point().max(1e-9);
                assert!(!recovered, "40 px basin should not recover cleanly");
            }
        }
    }

    #[test]
    fn masked_refine_equals_reduced_anchor_set() {
        let model = FaceModel::bundled();
        let state = test_state(45.0, 160.0, 120.0);
        let frame0 = noise_frame(320, 240);
        let full = select_grid_template(&model, &state, &frame0, 4.0).unwrap();

        // mask every seventh anchor / physically drop the same anchors
        let drop: Vec<bool> = (0..full.len()).map(|i| i % 7 == 0).collect();
        let mut mask = PixelOutlierMask::none(full.len());
        mask.or_with(&drop);
        let reduced_anchors: Vec<_> = full
            .anchors()
            .iter()
            .zip(&drop)
            .filter(|(_, d)| !**d)
            .map(|(a, _)| *a)
            .collect();
        let reduced_intens: Vec<_> = full
            .intensities()
            .iter()
            .zip(&drop)
            .filter(|(_, d)| !**d)
            .map(|(v, _)| *v)
            .collect();
        let reduced = FaceTemplate::from_parts(reduced_anchors, reduced_intens);

        let frame1 = shift_frame(&frame0, 2, 1);
        let out_masked = refine(
            &full,
            &frame1,
            &model,
            &state,
            &full.bootstrap_stats(),
            &mask,
            &refine_cfg(),
        )
        .unwrap();
        // the masked run bootstraps from the full template; for the reduced
        // run the bootstrap must describe the reduced anchor set instead
        let out_reduced = refine(
            &reduced,
            &frame1,
            &model,
            &state,
            &reduced.bootstrap_stats(),
            &PixelOutlierMask::none(reduced.len()),
            &refine_cfg(),
        )
        .unwrap();
        for (a, b) in out_masked.pose.to_array().iter().zip(out_reduced.pose.to_array()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn pixel_outliers_direct_case() {
        let mut residuals = vec![0.1; 9];
        residuals.push(3.0);
        let participated = vec![true; 10];
        let mask = detect_pixel_outliers(&residuals, &participated);
        // x = e^2 -> [0.01 x9, 9.0]; median 0.01; sigma_x = sqrt(80.8202/10)
        let sigma_x = (80.820_199_999_999_99_f64 / 10.0).sqrt();
        assert!(9.0 > sigma_x && 0.01 < sigma_x);
        for i in 0..9 {
            assert!(!mask.flags()[i]);
        }
        assert!(mask.flags()[9]);
    }

    #[test]
    fn pixel_outliers_degenerate_cases() {
        // all equal nonzero residuals: sigma_x = 0, x > 0 flags everything
        let mask = detect_pixel_outliers(&[0.5; 6], &[true; 6]);
        assert_eq!(mask.excluded_count(), 6);
        // all zero residuals flag nothing
        let mask = detect_pixel_outliers(&[0.0; 6], &[true; 6]);
        assert_eq!(mask.excluded_count(), 0);
        // non-participants are never flagged
        let mask = detect_pixel_outliers(&[0.0, 9.0, 0.1], &[true, false, true]);
        assert!(!mask.flags()[1]);
        assert_eq!(mask.len(), 3);
    }

    #[test]
    fn occluded_anchors_flagged_far_more_often() {
        let model = FaceModel::bundled();
        let state = test_state(45.0, 160.0, 120.0);
        let frame0 = noise_frame(320, 240);
        let tpl = select_grid_template(&model, &state, &frame0, 4.0).unwrap();
        let stats = tpl.bootstrap_stats();
        let mask = PixelOutlierMask::none(tpl.len());

        // opaque square over part of the face (about 20% of its area)
        let occluded_rect = (140.0, 100.0, 190.0, 150.0);
        let frame1 = GrayImage::from_fn(320, 240, |x, y| {
            let inside = (x as f64) >= occluded_rect.0
                && (x as f64) < occluded_rect.2
                && (y as f64) >= occluded_rect.1
                && (y as f64) < occluded_rect.3;
            if inside {
                240.0
            } else {
                frame0.get(x, y)
            }
        });
        let eval = residual_norm(&tpl, &frame1, &model, &state, &stats, &mask).unwrap();
        let out_mask = detect_pixel_outliers(&eval.residuals, &vec![true; tpl.len()]);

        let mesh = model.posed(&state).unwrap();
        let (mut occ_n, mut occ_f, mut clean_n, mut clean_f) = (0.0, 0.0, 0.0, 0.0);
        for (i, anchor) in tpl.anchors().iter().enumerate() {
            let p = mesh.anchor_position(anchor).xy();
            let inside = p.x >= occluded_rect.0
                && p.x < occluded_rect.2
                && p.y >= occluded_rect.1
                && p.y < occluded_rect.3;
            if inside {
                occ_n += 1.0;
                occ_f += out_mask.flags()[i] as u8 as f64;
            } else {
                clean_n += 1.0;
                clean_f += out_mask.flags()[i] as u8 as f64;
            }
        }
        let occ_rate = occ_f / occ_n;
        let clean_rate = (clean_f / clean_n).max(1e-6);
        assert!(
            occ_rate >= 5.0 * clean_rate,
            "occluded {occ_rate:.3} vs clean {clean_rate:.3}"
        );
    }
}
