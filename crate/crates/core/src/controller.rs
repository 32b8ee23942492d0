//! Orchestrates the head tracker: initialization from detections, the
//! per-frame pre-estimation / refinement pipeline, flow-point re-projection
//! policy, head-lost detection and re-initialization.

use std::collections::BTreeMap;
use std::path::Path;

use crate::facemodel::{
    landmark_names, project, warp_point, FaceModel, ModelError, ModelState, PoseParams,
};
use crate::geom::{Vec2, Vec3};
use crate::imgcore::{build_pyramid, GrayImage, ImageError, Pyramid};
use crate::klt::{self, FlowStatus, KltConfig, KltError};
use crate::lmsolve::LmConfig;
use crate::preest::{
    self, Correspondences, OutlierRule, PreestError, ResidualMode, MIN_ACTIVE_PAIRS,
};
use crate::tmpltrack::{
    self, FaceTemplate, NormStats, PixelOutlierMask, TemplateError,
};

#[derive(Debug, thiserror::Error)]
pub enum TrackError {
    #[error("tracker is lost; reinitialize before stepping")]
    Lost,
    #[error("detected eye centers coincide")]
    CoincidentEyes,
    #[error("invalid detections: {0}")]
    BadDetections(String),
    #[error("no detections entry for frame {0}")]
    MissingFrame(usize),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Klt(#[from] KltError),
    #[error(transparent)]
    Preest(#[from] PreestError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Face, eye and mouth detections for one frame, supplied externally.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Detections {
    pub frame: usize,
    /// x, y, width, height.
    pub face: [f64; 4],
    pub left_eye: [f64; 2],
    pub right_eye: [f64; 2],
    pub mouth: [f64; 2],
}

impl Detections {
    pub fn face_center(&self) -> Vec2 {
        Vec2::new(self.face[0] + 0.5 * self.face[2], self.face[1] + 0.5 * self.face[3])
    }

    pub fn validate(&self, frame_w: usize, frame_h: usize) -> Result<(), TrackError> {
        let inside = |p: &[f64; 2]| {
            p[0] >= 0.0 && p[1] >= 0.0 && p[0] < frame_w as f64 && p[1] < frame_h as f64
        };
        if !inside(&self.left_eye) || !inside(&self.right_eye) || !inside(&self.mouth) {
            return Err(TrackError::BadDetections("landmark outside the frame".into()));
        }
        if self.left_eye == self.right_eye {
            return Err(TrackError::CoincidentEyes);
        }
        Ok(())
    }
}

/// Per-frame detections file: a JSON array of entries; frame 0 is mandatory
/// for initialization.
#[derive(Debug, Clone, Default)]
pub struct DetectionsFile {
    entries: BTreeMap<usize, Detections>,
}

impl DetectionsFile {
    pub fn new(entries: Vec<Detections>) -> Self {
        DetectionsFile { entries: entries.into_iter().map(|d| (d.frame, d)).collect() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrackError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| TrackError::Io { path: path.display().to_string(), source })?;
        let entries: Vec<Detections> = serde_json::from_str(&text)
            .map_err(|source| TrackError::Json { path: path.display().to_string(), source })?;
        Ok(Self::new(entries))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrackError> {
        let path = path.as_ref();
        let list: Vec<&Detections> = self.entries.values().collect();
        let text = serde_json::to_string_pretty(&list)
            .map_err(|source| TrackError::Json { path: path.display().to_string(), source })?;
        std::fs::write(path, text)
            .map_err(|source| TrackError::Io { path: path.display().to_string(), source })
    }

    pub fn get(&self, frame: usize) -> Option<&Detections> {
        self.entries.get(&frame)
    }

    pub fn require(&self, frame: usize) -> Result<&Detections, TrackError> {
        self.get(frame).ok_or(TrackError::MissingFrame(frame))
    }
}

/// Name of the shape unit that places the mouth vertically.
pub const SU_MOUTH_VERTICAL: &str = "mouth_vertical";

/// Mouth shape-unit move factor.
const MOUTH_SU_FACTOR: f64 = 10.0;

/// Initialization math: z-rotation from the eye axis, scale from the eye
/// distance, center correction from the average eye offset, and the mouth
/// shape-unit parameter from the detected mouth height.
pub fn initialize(detections: &Detections, model: &FaceModel) -> Result<ModelState, TrackError> {
    let left = Vec2::new(detections.left_eye[0], detections.left_eye[1]);
    let right = Vec2::new(detections.right_eye[0], detections.right_eye[1]);
    let diff = right - left;
    let eye_dist = diff.norm();
    if eye_dist < 1e-9 {
        return Err(TrackError::CoincidentEyes);
    }
    let e_hat_y = (diff.y / eye_dist).clamp(-1.0, 1.0);
    let r_z = e_hat_y.acos() - std::f64::consts::FRAC_PI_2;
    let s = eye_dist / model.eye_distance();

    let t = detections.face_center();
    let mut pose = PoseParams { phi_x: 0.0, phi_y: 0.0, phi_z: r_z, s, t_x: t.x, t_y: t.y };

    // average model-to-detected eye offset corrects the rect center
    let eye_l = model.base_shape()[model.landmark(landmark_names::LEFT_EYE)?];
    let eye_r = model.base_shape()[model.landmark(landmark_names::RIGHT_EYE)?];
    let pred_l = project(warp_point(eye_l, &pose));
    let pred_r = project(warp_point(eye_r, &pose));
    let correction = ((pred_l - left) + (pred_r - right)) * 0.5;
    pose.t_x -= correction.x;
    pose.t_y -= correction.y;

    let mut state = ModelState {
        sigma: vec![0.0; model.shape_units().len()],
        alpha: vec![0.0; model.animation_units().len()],
        pose,
    };

    // vertical mouth placement via the dedicated shape unit
    let mouth_v = model.base_shape()[model.landmark(landmark_names::MOUTH_CENTER)?];
    let pred_mouth_y = project(warp_point(mouth_v, &pose)).y;
    let p_mouth = MOUTH_SU_FACTOR * (detections.mouth[1] - pred_mouth_y) / s;
    match model.shape_units().iter().position(|u| u.name == SU_MOUTH_VERTICAL) {
        Some(i) => {
            let (lo, hi) = model.shape_units()[i].limits;
            let clamped = p_mouth.clamp(lo, hi);
            if clamped != p_mouth {
                log::warn!("mouth shape parameter {p_mouth:.3} clamped to [{lo}, {hi}]");
            }
            state.sigma[i] = clamped;
        }
        None => log::warn!("model has no '{SU_MOUTH_VERTICAL}' shape unit; mouth not adjusted"),
    }
    Ok(state)
}

/// Screen distance the reference point moves between two poses.
pub fn displacement(a_optflow: &PoseParams, a_prev: &PoseParams, reference: Vec3) -> f64 {
    (project(warp_point(reference, a_optflow)) - project(warp_point(reference, a_prev))).norm()
}

/// Flow re-projection and head-lost thresholds.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SwitchConfig {
    /// Maximum trusted per-frame displacement, pixels.
    pub d: f64,
    /// Flow-scatter threshold above which points are re-projected anyway.
    pub c_sigma: f64,
    /// Template error per point above which the fit is unacceptable.
    pub template_error_threshold: f64,
}

impl Default for SwitchConfig {
    fn default() -> Self {
        SwitchConfig { d: 10.0, c_sigma: 100.0, template_error_threshold: 0.8 }
    }
}

#[derive(Debug, Clone)]
pub struct TrackerConfig {
    pub klt: KltConfig,
    pub preest_iterations: usize,
    pub template_iterations: usize,
    pub switch: SwitchConfig,
    pub outlier_c: f64,
    pub outlier_rule: OutlierRule,
    pub residual_mode: ResidualMode,
    pub enable_preest: bool,
    pub enable_preest_outliers: bool,
    pub enable_pixel_outliers: bool,
    /// Grid-template anchor count target; `grid_spacing` overrides it.
    pub template_target_points: usize,
    pub grid_spacing: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            klt: KltConfig::default(),
            preest_iterations: 10,
            template_iterations: 10,
            switch: SwitchConfig::default(),
            outlier_c: 2.0,
            outlier_rule: OutlierRule::AsPrinted,
            residual_mode: ResidualMode::SummedAbsolute,
            enable_preest: true,
            enable_preest_outliers: true,
            enable_pixel_outliers: true,
            template_target_points: 400,
            grid_spacing: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LostCause {
    RefineFailed(String),
    ErrorUnacceptable,
    StageError(String),
}

/// Everything one step decided, for logging and assertions.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub pose: PoseParams,
    pub lost: bool,
    pub lost_cause: Option<LostCause>,
    pub d_optflow: f64,
    pub sigma_optflow: f64,
    pub template_error: f64,
    pub template_error_per_point: f64,
    pub error_acceptable: bool,
    pub reprojected: bool,
    pub preest_skipped: bool,
    pub refine_failed: bool,
    pub klt_lost: usize,
    pub preest_outliers: usize,
    pub pixel_outliers: usize,
    pub refine_iterations: usize,
}

/// Per-stream tracker memory.
#[derive(Debug, Clone)]
struct TrackState {
    model_state: ModelState,
    prev_pyramid: Pyramid,
    flow_positions: Vec<Vec2>,
    flow_tracked: Vec<bool>,
    preest_outlier_flags: Vec<bool>,
    template: FaceTemplate,
    stats: NormStats,
    pixel_mask: PixelOutlierMask,
    lost: bool,
    frames_since_reproject: usize,
}

/// The combined head tracker: optical-flow pre-estimation seeding normalized
/// template refinement, with drift-preventing re-projection.
pub struct HeadTracker {
    model: FaceModel,
    config: TrackerConfig,
    reference_point: Vec3,
    state: TrackState,
}

impl HeadTracker {
    pub fn new(
        model: FaceModel,
        frame: &GrayImage,
        detections: &Detections,
        config: TrackerConfig,
    ) -> Result<Self, TrackError> {
        detections.validate(frame.width(), frame.height())?;
        let model_state = initialize(detections, &model)?;
        let reference_point =
            model.base_shape()[model.landmark(landmark_names::NOSE_TIP)?];
        let state = Self::build_state(&model, &config, frame, model_state)?;
        Ok(HeadTracker { model, config, reference_point, state })
    }

    fn build_state(
        model: &FaceModel,
        config: &TrackerConfig,
        frame: &GrayImage,
        model_state: ModelState,
    ) -> Result<TrackState, TrackError> {
        let template = match config.grid_spacing {
            Some(spacing) => tmpltrack::select_grid_template(model, &model_state, frame, spacing)?,
            None => {
                tmpltrack::select_template_auto(
                    model,
                    &model_state,
                    frame,
                    config.template_target_points,
                )?
                .0
            }
        };
        let stats = template.bootstrap_stats();
        let pixel_mask = PixelOutlierMask::none(template.len());
        let mesh = model.posed(&model_state)?;
        let flow_positions = mesh.projected();
        let n = flow_positions.len();
        Ok(TrackState {
            model_state,
            prev_pyramid: build_pyramid(frame, config.klt.pyramid_levels)?,
            flow_positions,
            flow_tracked: vec![true; n],
            preest_outlier_flags: vec![false; n],
            template,
            stats,
            pixel_mask,
            lost: false,
            frames_since_reproject: 0,
        })
    }

    pub fn pose(&self) -> PoseParams {
        self.state.model_state.pose
    }

    pub fn model(&self) -> &FaceModel {
        &self.model
    }

    pub fn model_state(&self) -> &ModelState {
        &self.state.model_state
    }

    pub fn is_lost(&self) -> bool {
        self.state.lost
    }

    pub fn template(&self) -> &FaceTemplate {
        &self.state.template
    }

    pub fn pixel_mask(&self) -> &PixelOutlierMask {
        &self.state.pixel_mask
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Write externally tracked animation parameters (mouth, brows) back
    /// into the tracker's model state.
    pub fn set_alpha(&mut self, alpha: &[f64]) {
        self.state.model_state.alpha.copy_from_slice(alpha);
        self.model.clamp_alpha(&mut self.state.model_state.alpha);
    }

    /// Re-seed the flow points from the current pose and deformation.
    pub fn reproject_flow_points(&mut self) -> Result<(), TrackError> {
        let mesh = self.model.posed(&self.state.model_state)?;
        self.state.flow_positions = mesh.projected();
        self.state.flow_tracked = vec![true; self.state.flow_positions.len()];
        self.state.preest_outlier_flags = vec![false; self.state.flow_positions.len()];
        self.state.frames_since_reproject = 0;
        Ok(())
    }

    fn preest_config(&self, initial: &PoseParams) -> LmConfig {
        LmConfig::new(preest::pose_fd_steps(initial))
            .with_max_iterations(self.config.preest_iterations)
    }

    fn template_config(&self, initial: &PoseParams) -> LmConfig {
        LmConfig::new(preest::pose_fd_steps(initial))
            .with_max_iterations(self.config.template_iterations)
    }

    /// Advance one frame: track flow points, pre-estimate, refine, update
    /// the outlier bookkeeping and apply the re-projection and lost rules.
    pub fn step(&mut self, frame: &GrayImage) -> Result<StepReport, TrackError> {
        if self.state.lost {
            return Err(TrackError::Lost);
        }
        let curr_pyramid = build_pyramid(frame, self.config.klt.pyramid_levels)?;
        let a_prev = self.state.model_state.pose;
        let deformed_points =
            self.model.deform(&self.state.model_state.sigma, &self.state.model_state.alpha)?;

        // (1) optical flow + (2) pre-estimation
        let mut a_optflow = a_prev;
        let mut preest_skipped = true;
        let mut klt_lost = 0;
        let mut corr: Option<Correspondences> = None;
        if self.config.enable_preest {
            let flows = klt::track_points(
                &self.state.prev_pyramid,
                &curr_pyramid,
                &self.state.flow_positions,
                &self.config.klt,
            )?;
            for (i, f) in flows.iter().enumerate() {
                if f.status == FlowStatus::Tracked && self.state.flow_tracked[i] {
                    self.state.flow_positions[i] = f.position;
                } else {
                    self.state.flow_tracked[i] = false;
                }
            }
            klt_lost = self.state.flow_tracked.iter().filter(|t| !**t).count();

            let mut c = Correspondences::new(
                deformed_points.clone(),
                self.state.flow_positions.clone(),
            )?;
            for i in 0..c.len() {
                let outlier =
                    self.config.enable_preest_outliers && self.state.preest_outlier_flags[i];
                c.set_active(i, self.state.flow_tracked[i] && !outlier);
            }
            if c.active_count() >= MIN_ACTIVE_PAIRS {
                match preest::estimate_with_mode(
                    &c,
                    &a_prev,
                    &self.preest_config(&a_prev),
                    self.config.residual_mode,
                ) {
                    Ok(pose) => {
                        a_optflow = pose;
                        preest_skipped = false;
                    }
                    Err(err) => {
                        self.state.lost = true;
                        self.state.prev_pyramid = curr_pyramid;
                        return Ok(self.lost_report(
                            a_prev,
                            LostCause::StageError(err.to_string()),
                        ));
                    }
                }
            }
            corr = Some(c);
        }

        // (4) per-frame displacement of the reference point
        let d_optflow = displacement(&a_optflow, &a_prev, self.reference_point);

        // (3) template refinement from the pre-estimate
        let mask = if self.config.enable_pixel_outliers {
            self.state.pixel_mask.clone()
        } else {
            PixelOutlierMask::none(self.state.template.len())
        };
        let refine_result = tmpltrack::refine(
            &self.state.template,
            frame,
            &self.model,
            &self.state.model_state.with_pose(a_optflow),
            &self.state.stats,
            &mask,
            &self.template_config(&a_optflow),
        );

        let mut report = match refine_result {
            Ok(out) => {
                let epp = out.error_per_point();
                let acceptable = epp <= self.config.switch.template_error_threshold;
                self.state.model_state.pose = out.pose;
                self.state.stats = out.stats;

                // (6) refresh the pixel outlier report
                let mut next_mask = if self.config.enable_pixel_outliers {
                    let participated: Vec<bool> = (0..self.state.template.len())
                        .map(|i| !mask.flags()[i] && !out.out_of_frame[i])
                        .collect();
                    tmpltrack::detect_pixel_outliers(&out.residuals, &participated)
                } else {
                    PixelOutlierMask::none(self.state.template.len())
                };
                next_mask.or_with(&out.out_of_frame);
                self.state.pixel_mask = next_mask;

                let lost = !acceptable && d_optflow < self.config.switch.d;
                StepReport {
                    pose: out.pose,
                    lost,
                    lost_cause: lost.then_some(LostCause::ErrorUnacceptable),
                    d_optflow,
                    sigma_optflow: 0.0,
                    template_error: out.final_error,
                    template_error_per_point: epp,
                    error_acceptable: acceptable,
                    reprojected: false,
                    preest_skipped,
                    refine_failed: false,
                    klt_lost,
                    preest_outliers: 0,
                    pixel_outliers: self.state.pixel_mask.excluded_count(),
                    refine_iterations: out.iterations,
                }
            }
            Err(err) => {
                let mut rep =
                    self.lost_report(a_prev, LostCause::RefineFailed(err.to_string()));
                rep.d_optflow = d_optflow;
                rep.preest_skipped = preest_skipped;
                rep.klt_lost = klt_lost;
                rep.refine_failed = true;
                rep
            }
        };

        // (6) refresh the flow outlier report against the refined pose
        if let Some(c) = &corr {
            let dists = c.pair_distances(&report.pose);
            let values: Vec<f64> = dists.iter().map(|(_, d)| *d).collect();
            if values.len() >= 2 {
                if let Ok(rep) =
                    preest::detect_outliers(&values, self.config.outlier_c, self.config.outlier_rule)
                {
                    report.sigma_optflow = rep.stddev;
                    let mut flags = vec![false; self.state.flow_positions.len()];
                    for ((idx, _), flag) in dists.iter().zip(&rep.flags) {
                        flags[*idx] = *flag;
                    }
                    report.preest_outliers = rep.outlier_count();
                    self.state.preest_outlier_flags = flags;
                }
            }
        }

        self.state.lost = report.lost;

        // (5) re-project flow points only when the update conditions hold
        let update_ok = (report.d_optflow <= self.config.switch.d
            || report.sigma_optflow > self.config.switch.c_sigma)
            && report.error_acceptable
            && !report.lost;
        if update_ok && self.config.enable_preest {
            self.reproject_flow_points()?;
            report.reprojected = true;
            report.preest_outliers = 0;
        } else {
            self.state.frames_since_reproject += 1;
        }

        self.state.prev_pyramid = curr_pyramid;
        Ok(report)
    }

    fn lost_report(&mut self, pose: PoseParams, cause: LostCause) -> StepReport {
        self.state.lost = true;
        StepReport {
            pose,
            lost: true,
            lost_cause: Some(cause),
            d_optflow: 0.0,
            sigma_optflow: 0.0,
            template_error: f64::INFINITY,
            template_error_per_point: f64::INFINITY,
            error_acceptable: false,
            reprojected: false,
            preest_skipped: false,
            refine_failed: false,
            klt_lost: 0,
            preest_outliers: 0,
            pixel_outliers: 0,
            refine_iterations: 0,
        }
    }

    /// Reset both trackers from fresh detections: template re-extracted,
    /// flow points re-projected, statistics re-bootstrapped.
    pub fn reinitialize(
        &mut self,
        frame: &GrayImage,
        detections: &Detections,
    ) -> Result<(), TrackError> {
        detections.validate(frame.width(), frame.height())?;
        let model_state = initialize(detections, &self.model)?;
        self.state = Self::build_state(&self.model, &self.config, frame, model_state)?;
        Ok(())
    }
}
