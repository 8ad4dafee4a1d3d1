//! Fast evaluation renderer for huge point counts and deep zooms.
//!
//! Unlike the differentiable Gaussian splatter, this path streams the
//! chaos game in batches, keeps only points falling inside the requested
//! view window, and marks 1-supersampled-pixel box footprints in a hit
//! bitmap — the behavior of a plain hardware point renderer. The bitmap
//! is average-downsampled to the target resolution, so pixel intensity is
//! the fraction of its subpixels hit.
//!
//! Generation stops when `point_budget` in-view points have accumulated
//! or the wall-clock time cap expires, whichever comes first; the result
//! carries an `under_budget` flag for the latter case. Map selection uses
//! determinant-proportional probabilities so area-dominant maps receive
//! proportionally many points.

use std::time::Instant;

use crate::canvas::{Canvas, ViewWindow};
use crate::chaos::{normalization_for, run_chaos_game, ChaosParams, NormalizationTransform};
use crate::error::{Error, Result};
use crate::ifs::{materialize, sampling_probabilities, FractalCode, ProbabilityMode};
use crate::rng::{self, Domain};

/// Chaos-game batch shape used by the streaming renderer. One batch
/// yields `2000 × (250 − 10)` = 480k candidate points.
pub const EVAL_BATCH_TRAJECTORIES: usize = 2000;
pub const EVAL_BATCH_LEN: usize = 250;
pub const EVAL_BATCH_WARMUP: usize = 10;

/// Budget and quality knobs for [`render_eval`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRenderSettings {
    /// Output canvas side in target pixels.
    pub side: usize,
    /// Supersampling factor for the hit bitmap.
    pub supersample: usize,
    /// In-view points to accumulate before stopping.
    pub point_budget: usize,
    /// Wall-clock cap; expiring before the budget sets `under_budget`.
    pub time_cap_seconds: f64,
    pub seed: u64,
}

impl Default for EvalRenderSettings {
    /// Desk-scale defaults: 5M points, 8× supersampling, 60 s cap.
    fn default() -> Self {
        EvalRenderSettings {
            side: 1024,
            supersample: 8,
            point_budget: 5_000_000,
            time_cap_seconds: 60.0,
            seed: 0,
        }
    }
}

/// A finished evaluation render plus its accounting.
#[derive(Clone, Debug)]
pub struct EvalRender {
    pub canvas: Canvas,
    /// Points that landed inside the view (capped at the budget).
    pub in_view_points: usize,
    /// Total points generated across all batches.
    pub generated_points: usize,
    /// True when the time cap expired before the budget was met.
    pub under_budget: bool,
    pub elapsed_seconds: f64,
}

/// Marks box footprints for every in-view point until the budget fills.
/// Returns true when the budget was reached inside this batch.
fn bin_points(
    points: &[crate::ifs::Vec2],
    transform: &NormalizationTransform,
    view: &ViewWindow,
    ss_side: usize,
    budget: usize,
    hits: &mut [bool],
    in_view: &mut usize,
) -> bool {
    for &p in points {
        if *in_view >= budget {
            return true;
        }
        let q = transform.apply(p);
        let px = view.world_to_pixel(q, ss_side);
        if px[0] >= 0.0 && px[1] >= 0.0 {
            let (x, y) = (px[0] as usize, px[1] as usize);
            if x < ss_side && y < ss_side {
                hits[y * ss_side + x] = true;
                *in_view += 1;
            }
        }
    }
    *in_view >= budget
}

/// Renders a fractal code into an arbitrary view window with the
/// non-differentiable fast path.
///
/// The normalization frame is pinned by the first batch, so the same code
/// produces the same framing regardless of budget; later batches stream
/// with fresh per-batch seeds and reuse that frame.
pub fn render_eval(
    code: &FractalCode,
    view: &ViewWindow,
    settings: &EvalRenderSettings,
) -> Result<EvalRender> {
    if settings.side == 0 || settings.supersample == 0 {
        return Err(Error::InvalidArgument(format!(
            "evaluation render needs positive side and supersample, got side {} supersample {}",
            settings.side, settings.supersample
        )));
    }
    if !(settings.time_cap_seconds >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid time cap {}",
            settings.time_cap_seconds
        )));
    }
    let maps = materialize(code)?;
    let probs = sampling_probabilities(&maps, ProbabilityMode::DeterminantProportional);
    let start = Instant::now();

    let ss = settings.supersample;
    let ss_side = settings.side * ss;
    let mut hits = vec![false; ss_side * ss_side];
    let mut in_view = 0usize;
    let mut generated = 0usize;
    let mut transform: Option<NormalizationTransform> = None;

    let mut batch_index = 0u64;
    while in_view < settings.point_budget {
        let params = ChaosParams {
            trajectories: EVAL_BATCH_TRAJECTORIES,
            trajectory_len: EVAL_BATCH_LEN,
            warmup: EVAL_BATCH_WARMUP,
            seed: rng::derive_seed(settings.seed, Domain::TrajectoryStart, batch_index),
        };
        let tape = run_chaos_game(&maps, &probs, params)?;
        let emitted = tape.emitted_positions();
        let frame = *transform.get_or_insert_with(|| normalization_for(&emitted));
        generated += emitted.len();
        let filled = bin_points(
            &emitted,
            &frame,
            view,
            ss_side,
            settings.point_budget,
            &mut hits,
            &mut in_view,
        );
        batch_index += 1;
        if filled || start.elapsed().as_secs_f64() >= settings.time_cap_seconds {
            break;
        }
    }

    let mut supersampled = Canvas::zeros(ss_side, ss_side, 1);
    for (dst, &hit) in supersampled.pixels.iter_mut().zip(&hits) {
        *dst = if hit { 1.0 } else { 0.0 };
    }
    let canvas = if ss > 1 {
        supersampled.downsample(ss)?
    } else {
        supersampled
    };
    Ok(EvalRender {
        canvas,
        in_view_points: in_view,
        generated_points: generated,
        under_budget: in_view < settings.point_budget,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}
