//! Optical-flow pose pre-estimation: registers tracked 2D points to
//! projected model points by minimizing the squared sum of absolute
//! distances, with median-based outlier exclusion.

use crate::facemodel::{project, warp_point, PoseParams};
use crate::geom::{Vec2, Vec3};
use crate::lmsolve::{self, LmConfig, LmError};

#[derive(Debug, thiserror::Error)]
pub enum PreestError {
    #[error("model and flow point counts differ: {model} vs {flow}")]
    LengthMismatch { model: usize, flow: usize },
    #[error("no active point pairs")]
    NoActivePairs,
    #[error("{active} active pairs, at least {required} required")]
    TooFewPairs { active: usize, required: usize },
    #[error("pose solve over {pairs} pairs failed: {source}")]
    Solver { pairs: usize, source: LmError },
    #[error("at least 2 distances required for outlier detection")]
    TooFewDistances,
}

/// How the registration residual is presented to the solver. The default
/// follows the summed-absolute-distance form; the per-pair variant is kept
/// for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    #[default]
    SummedAbsolute,
    PerPair,
}

/// Outlier criterion variant: the printed rule compares squared distances
/// against the median of unsquared ones; the consistent variant compares
/// like with like.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierRule {
    #[default]
    AsPrinted,
    Consistent,
}

/// Model vertices paired with their optical-flow tracked screen positions.
/// `model_points` are the deformed, un-posed vertices; a candidate pose warps
/// and projects them onto the flow points.
#[derive(Debug, Clone)]
pub struct Correspondences {
    model_points: Vec<Vec3>,
    flow_points: Vec<Vec2>,
    active: Vec<bool>,
}

/// Pose solves need at least as many pairs as pose parameters.
pub const MIN_ACTIVE_PAIRS: usize = 6;

impl Correspondences {
    pub fn new(model_points: Vec<Vec3>, flow_points: Vec<Vec2>) -> Result<Self, PreestError> {
        if model_points.len() != flow_points.len() {
            return Err(PreestError::LengthMismatch {
                model: model_points.len(),
                flow: flow_points.len(),
            });
        }
        let active = vec![true; model_points.len()];
        Ok(Correspondences { model_points, flow_points, active })
    }

    pub fn len(&self) -> usize {
        self.model_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model_points.is_empty()
    }

    pub fn set_active(&mut self, i: usize, on: bool) {
        self.active[i] = on;
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    /// Euclidean distance of each active pair under pose `a`, with indices.
    pub fn pair_distances(&self, a: &PoseParams) -> Vec<(usize, f64)> {
        self.model_points
            .iter()
            .zip(&self.flow_points)
            .enumerate()
            .filter(|(i, _)| self.active[*i])
            .map(|(i, (m, f))| (i, (*f - project(warp_point(*m, a))).norm()))
            .collect()
    }
}

/// Registration residual under pose `a`. In the default mode this is the
/// single-element sum of absolute pair distances; the solver minimizes its
/// square.
pub fn residual(corr: &Correspondences, a: &PoseParams) -> Result<Vec<f64>, PreestError> {
    residual_with_mode(corr, a, ResidualMode::SummedAbsolute)
}

pub fn residual_with_mode(
    corr: &Correspondences,
    a: &PoseParams,
    mode: ResidualMode,
) -> Result<Vec<f64>, PreestError> {
    if corr.active_count() == 0 {
        return Err(PreestError::NoActivePairs);
    }
    let dists = corr.pair_distances(a);
    Ok(match mode {
        ResidualMode::SummedAbsolute => vec![dists.iter().map(|(_, d)| d).sum()],
        ResidualMode::PerPair => dists.into_iter().map(|(_, d)| d).collect(),
    })
}

/// Finite-difference steps for a pose solve: 1e-3 rad for angles, 1e-3
/// relative for scale, 0.1 px for translations. Sized to stay above
/// interpolation noise when the residual samples an image.
pub fn pose_fd_steps(initial: &PoseParams) -> Vec<f64> {
    vec![1e-3, 1e-3, 1e-3, (1e-3 * initial.s.abs()).max(1e-6), 0.1, 0.1]
}

/// Steps two orders finer than [`pose_fd_steps`], for registration residuals
/// that are pure geometry; the accuracy floor of the summed-absolute-distance
/// solve sits near the step size.
pub fn pose_fd_steps_fine(initial: &PoseParams) -> Vec<f64> {
    pose_fd_steps(initial).into_iter().map(|h| h * 0.01).collect()
}

/// Estimate the pose registering active flow points to the model points.
pub fn estimate(
    corr: &Correspondences,
    initial: &PoseParams,
    config: &LmConfig,
) -> Result<PoseParams, PreestError> {
    estimate_with_mode(corr, initial, config, ResidualMode::SummedAbsolute)
}

pub fn estimate_with_mode(
    corr: &Correspondences,
    initial: &PoseParams,
    config: &LmConfig,
    mode: ResidualMode,
) -> Result<PoseParams, PreestError> {
    let active = corr.active_count();
    if active < MIN_ACTIVE_PAIRS {
        return Err(PreestError::TooFewPairs { active, required: MIN_ACTIVE_PAIRS });
    }

    // Solve in a whitened parameter space where a unit step in any parameter
    // moves a model point by roughly one pixel; the summed-distance residual
    // otherwise leaves the solver with a badly scaled rank-one J^T J.
    let rms_radius = {
        let sum: f64 = corr
            .model_points
            .iter()
            .zip(&corr.active)
            .filter(|(_, a)| **a)
            .map(|(p, _)| p.dot(*p))
            .sum();
        (sum / active as f64).sqrt().max(1e-6)
    };
    let r_pix = (initial.s.abs() * rms_radius).max(1.0);
    let unit: [f64; 6] = [1.0 / r_pix, 1.0 / r_pix, 1.0 / r_pix, 1.0 / rms_radius, 1.0, 1.0];
    let a0 = initial.to_array();
    let pose_at = |u: &[f64]| {
        let mut a = a0;
        for j in 0..6 {
            a[j] += unit[j] * u[j];
        }
        PoseParams::from_array(a)
    };

    let mut scaled = config.clone();
    scaled.fd_steps = config.fd_steps.iter().zip(unit).map(|(h, d)| h / d).collect();

    let res = lmsolve::minimize(
        |u| residual_with_mode(corr, &pose_at(u), mode).expect("active pairs checked above"),
        &[0.0; 6],
        &scaled,
    )
    .map_err(|source| PreestError::Solver { pairs: active, source })?;
    Ok(pose_at(&res.params))
}

/// Per-pair outlier decision with the statistics that produced it.
#[derive(Debug, Clone)]
pub struct OutlierReport {
    pub distances: Vec<f64>,
    pub median: f64,
    pub stddev: f64,
    pub flags: Vec<bool>,
}

impl OutlierReport {
    pub fn outlier_count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }
}

fn median_of(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Flag pair i when |(x_i^2 - M) / sigma| > c, with M the median of the
/// distances and sigma their (population) standard deviation; sigma = 0
/// flags nothing. The `Consistent` rule uses x_i instead of x_i^2.
pub fn detect_outliers(
    distances: &[f64],
    c: f64,
    rule: OutlierRule,
) -> Result<OutlierReport, PreestError> {
    if distances.len() < 2 {
        return Err(PreestError::TooFewDistances);
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = median_of(&sorted);
    let mean = distances.iter().sum::<f64>() / distances.len() as f64;
    let var = distances.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
        / distances.len() as f64;
    let stddev = var.sqrt();
    let flags = if stddev == 0.0 {
        vec![false; distances.len()]
    } else {
        distances
            .iter()
            .map(|x| {
                let stat = match rule {
                    OutlierRule::AsPrinted => (x * x - median) / stddev,
                    OutlierRule::Consistent => (x - median) / stddev,
                };
                stat.abs() > c
            })
            .collect()
    };
    Ok(OutlierReport { distances: distances.to_vec(), median, stddev, flags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facemodel::FaceModel;

    fn base_pose() -> PoseParams {
        PoseParams { phi_x: 0.0, phi_y: 0.0, phi_z: 0.0, s: 40.0, t_x: 160.0, t_y: 120.0 }
    }

    fn model_correspondences(true_pose: &PoseParams) -> Correspondences {
        let model = FaceModel::bundled();
        let pts = model.base_shape().to_vec();
        let flow = pts.iter().map(|p| project(warp_point(*p, true_pose))).collect();
        Correspondences::new(pts, flow).unwrap()
    }

    /// Closed-form 2D similarity fit (complex-number least squares).
    fn procrustes(src: &[Vec2], dst: &[Vec2]) -> (f64, f64, Vec2) {
        let n = src.len() as f64;
        let mx = src.iter().fold(Vec2::ZERO, |a, p| a + *p) * (1.0 / n);
        let my = dst.iter().fold(Vec2::ZERO, |a, p| a + *p) * (1.0 / n);
        let (mut num_re, mut num_im, mut den) = (0.0, 0.0, 0.0);
        for (s, d) in src.iter().zip(dst) {
            let xs = *s - mx;
            let yd = *d - my;
            num_re += yd.x * xs.x + yd.y * xs.y;
            num_im += yd.y * xs.x - yd.x * xs.y;
            den += xs.norm_sq();
        }
        let (ar, ai) = (num_re / den, num_im / den);
        let scale = ar.hypot(ai);
        let theta = ai.atan2(ar);
        let rot = |p: Vec2| Vec2::new(ar * p.x - ai * p.y, ai * p.x + ar * p.y);
        let t = my - rot(mx);
        (scale, theta, t)
    }

    fn solve_cfg() -> LmConfig {
        LmConfig::new(pose_fd_steps_fine(&base_pose())).with_max_iterations(120)
    }

    #[test]
    fn residual_zero_at_true_pose() {
        let pose = base_pose();
        let corr = model_correspondences(&pose);
        let r = residual(&corr, &pose).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].abs() < 1e-9);
    }

    #[test]
    fn residual_single_offset_pair_is_norm() {
        let corr = Correspondences::new(
            vec![Vec3::new(1.0, 2.0, 0.5)],
            vec![Vec2::new(1.0 + 3.0, 2.0 + 4.0)],
        )
        .unwrap();
        let r = residual(&corr, &PoseParams::identity()).unwrap();
        assert!((r[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn residual_matches_summation_oracle_and_pair_order() {
        let pose = base_pose();
        let model = FaceModel::bundled();
        let pts: Vec<Vec3> = model.base_shape()[..20].to_vec();
        let flow: Vec<Vec2> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| project(warp_point(*p, &pose)) + Vec2::new(i as f64 * 0.3, -1.0))
            .collect();
        let corr = Correspondences::new(pts.clone(), flow.clone()).unwrap();
        let r = residual(&corr, &pose).unwrap()[0];
        let oracle: f64 = pts
            .iter()
            .zip(&flow)
            .map(|(m, f)| (*f - project(warp_point(*m, &pose))).norm())
            .sum();
        assert!((r - oracle).abs() < 1e-9);

        // permutation invariance
        let mut rev_pts = pts;
        let mut rev_flow = flow;
        rev_pts.reverse();
        rev_flow.reverse();
        let rev = Correspondences::new(rev_pts, rev_flow).unwrap();
        assert!((residual(&rev, &pose).unwrap()[0] - r).abs() < 1e-9);
    }

    #[test]
    fn estimate_recovers_translation() {
        let mut truth = base_pose();
        truth.t_x += 10.0;
        truth.t_y -= 5.0;
        let corr = model_correspondences(&truth);
        let est = estimate(&corr, &base_pose(), &solve_cfg()).unwrap();
        assert!((est.t_x - truth.t_x).abs() < 0.05);
        assert!((est.t_y - truth.t_y).abs() < 0.05);
        assert!(est.phi_x.abs() < 0.01 && est.phi_y.abs() < 0.01 && est.phi_z.abs() < 0.01);
    }

    #[test]
    fn estimate_no_motion_returns_initial() {
        let pose = base_pose();
        let corr = model_correspondences(&pose);
        let est = estimate(&corr, &pose, &solve_cfg()).unwrap();
        for (a, b) in est.to_array().iter().zip(pose.to_array()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn estimate_matches_procrustes_oracle_in_plane() {
        let mut truth = base_pose();
        truth.phi_z = 0.2;
        truth.s *= 1.1;
        truth.t_x += 6.0;
        let corr = model_correspondences(&truth);
        let est = estimate(&corr, &base_pose(), &solve_cfg()).unwrap();

        let model = FaceModel::bundled();
        let src: Vec<Vec2> = model.base_shape().iter().map(|p| p.xy()).collect();
        let dst: Vec<Vec2> =
            model.base_shape().iter().map(|p| project(warp_point(*p, &truth))).collect();
        let (scale, theta, t) = procrustes(&src, &dst);

        assert!((est.phi_z - theta).abs() < 1e-3, "phi_z {} vs {}", est.phi_z, theta);
        assert!(((est.s - scale) / scale).abs() < 1e-3, "s {} vs {}", est.s, scale);
        assert!((est.t_x - t.x).abs() < 0.05 && (est.t_y - t.y).abs() < 0.05);
    }

    #[test]
    fn too_few_active_pairs_is_error() {
        let mut corr = model_correspondences(&base_pose());
        for i in 5..corr.len() {
            corr.set_active(i, false);
        }
        assert!(matches!(
            estimate(&corr, &base_pose(), &solve_cfg()),
            Err(PreestError::TooFewPairs { active: 5, .. })
        ));
    }

    #[test]
    fn outliers_all_equal_distances_flags_none() {
        let report = detect_outliers(&[1.0; 8], 2.0, OutlierRule::AsPrinted).unwrap();
        assert_eq!(report.stddev, 0.0);
        assert_eq!(report.outlier_count(), 0);
    }

    #[test]
    fn outliers_single_large_distance_flagged() {
        let mut d = vec![1.0; 9];
        d.push(50.0);
        let report = detect_outliers(&d, 2.0, OutlierRule::AsPrinted).unwrap();
        // direct evaluation: M = 1, sigma = population stddev, |(x^2 - M)/sigma|
        let mean: f64 = (9.0 + 50.0) / 10.0;
        let sigma =
            ((9.0 * (1.0 - mean) * (1.0 - mean) + (50.0 - mean) * (50.0 - mean)) / 10.0_f64).sqrt();
        for (i, x) in d.iter().enumerate() {
            let expect = ((x * x - 1.0) / sigma).abs() > 2.0;
            assert_eq!(report.flags[i], expect, "pair {i}");
        }
        assert_eq!(report.outlier_count(), 1);
        assert!(report.flags[9]);
    }

    #[test]
    fn outliers_breakdown_at_half_contamination() {
        // 5 of 9 corrupted: the median comes from the corrupted side; the
        // oracle documents the behavior rather than claiming correctness
        let d = [1.0, 1.0, 1.0, 1.0, 30.0, 31.0, 32.0, 33.0, 34.0];
        let report = detect_outliers(&d, 2.0, OutlierRule::AsPrinted).unwrap();
        assert_eq!(report.median, 30.0);
        let mean = d.iter().sum::<f64>() / 9.0;
        let sigma = (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 9.0).sqrt();
        for (i, x) in d.iter().enumerate() {
            assert_eq!(report.flags[i], ((x * x - 30.0) / sigma).abs() > 2.0, "pair {i}");
        }
    }

    #[test]
    fn outlier_flags_permutation_and_median_append_invariance() {
        let d = [0.5, 1.0, 1.5, 2.0, 9.0];
        let base = detect_outliers(&d, 2.0, OutlierRule::AsPrinted).unwrap();
        let mut rev = d;
        rev.reverse();
        let from_rev = detect_outliers(&rev, 2.0, OutlierRule::AsPrinted).unwrap();
        for i in 0..d.len() {
            assert_eq!(base.flags[i], from_rev.flags[d.len() - 1 - i]);
        }

        // appending a pair at the median cannot change the median
        let mut appended = d.to_vec();
        appended.push(base.median);
        let with_median = detect_outliers(&appended, 2.0, OutlierRule::AsPrinted).unwrap();
        assert_eq!(with_median.median, base.median);
    }

    #[test]
    fn consistent_rule_flags_on_unsquared_distances() {
        let mut d = vec![1.0; 9];
        d.push(50.0);
        let report = detect_outliers(&d, 2.0, OutlierRule::Consistent).unwrap();
        assert!(report.flags[9]);
        assert_eq!(report.outlier_count(), 1);
    }

    #[test]
    fn deactivating_outlier_does_not_worsen_fit() {
        // noiseless inliers plus one corrupted pair
        let truth = base_pose();
        let model = FaceModel::bundled();
        let pts: Vec<Vec3> = model.base_shape().to_vec();
        let mut flow: Vec<Vec2> =
            pts.iter().map(|p| project(warp_point(*p, &truth))).collect();
        flow[40] += Vec2::new(35.0, -20.0);
        let mut init = truth;
        init.t_x += 3.0;

        let corr_all = Correspondences::new(pts.clone(), flow.clone()).unwrap();
        let est_all = estimate(&corr_all, &init, &solve_cfg()).unwrap();
        let mut corr_cut = Correspondences::new(pts, flow).unwrap();
        corr_cut.set_active(40, false);
        let est_cut = estimate(&corr_cut, &init, &solve_cfg()).unwrap();

        // compare on the inlier set only
        let inlier_err = |a: &PoseParams, corr: &Correspondences| -> f64 {
            corr.pair_distances(a).iter().filter(|(i, _)| *i != 40).map(|(_, d)| d).sum()
        };
        assert!(inlier_err(&est_cut, &corr_cut) <= inlier_err(&est_all, &corr_cut) + 1e-9);
    }
}
