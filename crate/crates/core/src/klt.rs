//! Pyramidal Lucas-Kanade sparse point tracker supplying the tracked points
//! for the pose pre-estimation stage.

use crate::geom::Vec2;
use crate::imgcore::{gradients, GrayImage, Pyramid};

#[derive(Debug, thiserror::Error)]
pub enum KltError {
    #[error("pyramid shapes differ at level {level}: {prev_w}x{prev_h} vs {next_w}x{next_h}")]
    PyramidMismatch { level: usize, prev_w: usize, prev_h: usize, next_w: usize, next_h: usize },
    #[error("pyramid level counts differ: {prev} vs {next}")]
    LevelMismatch { prev: usize, next: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowStatus {
    Tracked,
    /// The window left the image, the structure tensor was degenerate, or the
    /// per-level iteration diverged. Lost points carry no position guarantee.
    Lost,
}

#[derive(Debug, Clone, Copy)]
pub struct FlowPoint {
    pub position: Vec2,
    pub status: FlowStatus,
}

impl FlowPoint {
    pub fn is_tracked(&self) -> bool {
        self.status == FlowStatus::Tracked
    }
}

/// Tracker settings; the defaults suit 640x480 video.
#[derive(Debug, Clone)]
pub struct KltConfig {
    /// Window half-width in pixels; the integration window is (2w+1)^2.
    pub window: usize,
    pub pyramid_levels: usize,
    /// Iteration cap per pyramid level.
    pub max_iters: usize,
    /// Minimum per-pixel structure-tensor eigenvalue for trackability.
    pub min_eigen: f64,
    /// Stop iterating once the update drops below this many pixels.
    pub convergence: f64,
}

impl Default for KltConfig {
    fn default() -> Self {
        KltConfig { window: 7, pyramid_levels: 3, max_iters: 20, min_eigen: 1.0, convergence: 0.01 }
    }
}

struct LevelGrads {
    ix: GrayImage,
    iy: GrayImage,
}

/// Track `points` from the previous frame to the next, coarse to fine.
/// The result order matches the input order; untrackable points are flagged
/// rather than dropped so outlier bookkeeping stays index-aligned.
pub fn track_points(
    prev: &Pyramid,
    next: &Pyramid,
    points: &[Vec2],
    config: &KltConfig,
) -> Result<Vec<FlowPoint>, KltError> {
    if prev.levels() != next.levels() {
        return Err(KltError::LevelMismatch { prev: prev.levels(), next: next.levels() });
    }
    for k in 0..prev.levels() {
        let (p, n) = (prev.level(k), next.level(k));
        if p.width() != n.width() || p.height() != n.height() {
            return Err(KltError::PyramidMismatch {
                level: k,
                prev_w: p.width(),
                prev_h: p.height(),
                next_w: n.width(),
                next_h: n.height(),
            });
        }
    }
    let levels = config.pyramid_levels.min(prev.levels());
    let grads: Vec<LevelGrads> = (0..levels)
        .map(|k| {
            let (ix, iy) = gradients(prev.level(k)).expect("pyramid levels are at least 3x3");
            LevelGrads { ix, iy }
        })
        .collect();

    Ok(points.iter().map(|p| track_single(prev, next, &grads, *p, levels, config)).collect())
}

fn track_single(
    prev: &Pyramid,
    next: &Pyramid,
    grads: &[LevelGrads],
    point: Vec2,
    levels: usize,
    config: &KltConfig,
) -> FlowPoint {
    let w = config.window as i64;
    let n_pixels = ((2 * w + 1) * (2 * w + 1)) as f64;
    let lost = FlowPoint { position: point, status: FlowStatus::Lost };
    let diverge_limit = 3.0 * (config.window as f64 + 1.0);

    let mut flow = Vec2::ZERO; // displacement guess, in current-level pixels
    for level in (0..levels).rev() {
        let scale = (1 << level) as f64;
        let p = point * (1.0 / scale);
        let prev_img = prev.level(level);
        let next_img = next.level(level);
        let lg = &grads[level];

        // template intensities and gradients from the previous frame
        let mut tmpl = Vec::with_capacity(n_pixels as usize);
        let (mut gxx, mut gxy, mut gyy) = (0.0, 0.0, 0.0);
        for dy in -w..=w {
            for dx in -w..=w {
                let q = Vec2::new(p.x + dx as f64, p.y + dy as f64);
                let (Some(i), Some(gx), Some(gy)) =
                    (prev_img.sample_bilinear(q), lg.ix.sample_bilinear(q), lg.iy.sample_bilinear(q))
                else {
                    return lost;
                };
                tmpl.push((i, gx, gy));
                gxx += gx * gx;
                gxy += gx * gy;
                gyy += gy * gy;
            }
        }

        let trace = gxx + gyy;
        let det = gxx * gyy - gxy * gxy;
        let min_eigen = 0.5 * (trace - (trace * trace - 4.0 * det).max(0.0).sqrt());
        if min_eigen / n_pixels < config.min_eigen {
            return lost;
        }

        let mut nu = Vec2::ZERO;
        for _ in 0..config.max_iters {
            let (mut bx, mut by) = (0.0, 0.0);
            let mut k = 0;
            for dy in -w..=w {
                for dx in -w..=w {
                    let q = Vec2::new(
                        p.x + flow.x + nu.x + dx as f64,
                        p.y + flow.y + nu.y + dy as f64,
                    );
                    let Some(i) = next_img.sample_bilinear(q) else {
                        return lost;
                    };
                    let (t, gx, gy) = tmpl[k];
                    let di = t - i;
                    bx += di * gx;
                    by += di * gy;
                    k += 1;
                }
            }
            // solve the 2x2 normal equations
            if det.abs() < 1e-12 {
                return lost;
            }
            let ux = (gyy * bx - gxy * by) / det;
            let uy = (gxx * by - gxy * bx) / det;
            nu.x += ux;
            nu.y += uy;
            if nu.norm() > diverge_limit {
                return lost;
            }
            if ux.hypot(uy) < config.convergence {
                break;
            }
        }
        flow = (flow + nu) * if level > 0 { 2.0 } else { 1.0 };
    }

    let position = point + flow;
    if next.base().contains(position) {
        FlowPoint { position, status: FlowStatus::Tracked }
    } else {
        lost
    }
}
