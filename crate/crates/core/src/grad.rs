//! Reverse-mode gradients: from the image loss back through splatting,
//! normalization, the chaos-game recursion, and the SVD/sigmoid/tanh
//! parameterization to the raw parameter vector; plus a finite-difference
//! oracle and the full forward+backward pipeline evaluation.
//!
//! The trajectory recursion `x_{k+1} = M_{π_k} x_k + b_{π_k}` is
//! differentiated with an explicit adjoint sweep per trajectory: the
//! adjoint satisfies `a_k = M_{π_k}ᵀ a_{k+1} + ∂L/∂x_k`, and step k adds
//! `a_{k+1}·x_kᵀ` to that step's map gradient. Warm-up steps are real
//! applications of the parameters, so their contributions are kept by
//! default (`x_0` alone is a constant); truncating at the warm-up boundary
//! is available as a flag for ablations.
//!
//! The canvas-normalization transform and the post-step orthonormal
//! projection are treated as constants: neither is differentiated. The
//! finite-difference oracle therefore pins both the RNG streams and the
//! normalization transform, so it differentiates exactly the function the
//! analytic path claims to differentiate.

use rayon::prelude::*;

use crate::canvas::{Canvas, ViewWindow};
use crate::chaos::{self, ChaosParams, NormalizationTransform, TrajectoryTape};
use crate::error::{Error, Result};
use crate::ifs::{
    materialize, sampling_probabilities, sigmoid, FractalCode, Mat2, MaterializedMap,
    ProbabilityMode, Vec2,
};
use crate::loss::{total_loss, LossBreakdown, LossWeights, PerceptualLoss};
use crate::splat::{splat_backward, splat_to_target, SplatConfig};

/// Accumulated loss gradient for one map, in materialized quantities:
/// the linear part `M`, the offset `b`, and a direct singular-value path
/// (used by the regularizer, which sees σ without going through `M`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapGradient {
    pub d_linear: Mat2,
    pub d_offset: [f64; 2],
    pub d_sigma: [f64; 2],
}

impl MapGradient {
    pub const ZERO: MapGradient = MapGradient {
        d_linear: Mat2([0.0; 4]),
        d_offset: [0.0; 2],
        d_sigma: [0.0; 2],
    };
}

/// Reverse sweep over every trajectory in the tape.
///
/// `d_emitted` holds ∂L/∂(raw position) for exactly the emitted points, in
/// the tape's emitted order. With `truncate_warmup` the sweep stops at the
/// warm-up boundary: steps that produce warm-up points contribute nothing.
pub fn backprop_trajectories(
    tape: &TrajectoryTape,
    maps: &[MaterializedMap],
    d_emitted: &[Vec2],
    truncate_warmup: bool,
) -> Result<Vec<MapGradient>> {
    let p = tape.params;
    let len = p.trajectory_len;
    if d_emitted.len() != tape.emitted_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} upstream gradients for {} emitted points",
            d_emitted.len(),
            tape.emitted_count()
        )));
    }
    let emitted_per = len - p.warmup;

    // Per-trajectory partial gradients, merged sequentially afterwards so
    // the result is bit-identical for any thread count.
    let mut partials = vec![MapGradient::ZERO; p.trajectories * maps.len()];
    let verdicts: Vec<Result<()>> = partials
        .par_chunks_mut(maps.len())
        .enumerate()
        .map(|(t, local)| {
            let points = &tape.points[t * len..(t + 1) * len];
            let choices = &tape.indices[t * (len - 1)..(t + 1) * (len - 1)];
            let upstream = &d_emitted[t * emitted_per..(t + 1) * emitted_per];
            // Replay guard: the tape must have been generated by `maps`.
            for k in 0..len - 1 {
                let j = choices[k] as usize;
                if j >= maps.len()
                    || chaos::clamp_position(maps[j].apply(points[k])) != points[k + 1]
                {
                    return Err(Error::InvalidArgument(format!(
                        "tape does not replay with these maps (trajectory {t}, step {k})"
                    )));
                }
            }
            let mut adjoint = if len - 1 >= p.warmup {
                upstream[len - 1 - p.warmup]
            } else {
                [0.0, 0.0]
            };
            for k in (0..len - 1).rev() {
                let j = choices[k] as usize;
                let x = points[k];
                // A saturated coordinate (position clamp) has zero
                // derivative with respect to everything upstream.
                for c in 0..2 {
                    if points[k + 1][c].abs() >= chaos::POSITION_CLAMP {
                        adjoint[c] = 0.0;
                    }
                }
                let g = &mut local[j];
                g.d_linear.0[0] += adjoint[0] * x[0];
                g.d_linear.0[1] += adjoint[0] * x[1];
                g.d_linear.0[2] += adjoint[1] * x[0];
                g.d_linear.0[3] += adjoint[1] * x[1];
                g.d_offset[0] += adjoint[0];
                g.d_offset[1] += adjoint[1];
                if truncate_warmup && k < p.warmup {
                    break; // x_k is a warm-up point: stop the flow here
                }
                let m = &maps[j].linear.0;
                adjoint = [
                    m[0] * adjoint[0] + m[2] * adjoint[1],
                    m[1] * adjoint[0] + m[3] * adjoint[1],
                ];
                if k >= p.warmup {
                    adjoint[0] += upstream[k - p.warmup][0];
                    adjoint[1] += upstream[k - p.warmup][1];
                }
            }
            Ok(())
        })
        .collect();
    for v in verdicts {
        v?;
    }

    let mut grads = vec![MapGradient::ZERO; maps.len()];
    for local in partials.chunks(maps.len()) {
        for (g, l) in grads.iter_mut().zip(local) {
            for i in 0..4 {
                g.d_linear.0[i] += l.d_linear.0[i];
            }
            g.d_offset[0] += l.d_offset[0];
            g.d_offset[1] += l.d_offset[1];
        }
    }
    Ok(grads)
}

/// Chains materialized-space gradients through `M = U·diag(σ)·Vᵀ`,
/// `σ = sigmoid(s_raw)`, and `b = tanh(b_raw)` into the raw parameter
/// layout. The orthonormal projection is applied after optimizer steps and
/// is not part of this chain.
pub fn backprop_parameterization(
    map_grads: &[MapGradient],
    code: &FractalCode,
) -> Result<Vec<f64>> {
    if map_grads.len() != code.map_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} map gradients for a {}-map code",
            map_grads.len(),
            code.map_count()
        )));
    }
    let mut theta = Vec::with_capacity(code.param_count());
    for (g, raw) in map_grads.iter().zip(&code.maps) {
        let u = Mat2(raw.u_raw);
        let v = Mat2(raw.v_raw);
        let s = [sigmoid(raw.s_raw[0]), sigmoid(raw.s_raw[1])];
        let dm = &g.d_linear;
        // ∂L/∂U = dM·V·diag(σ): scale the product's columns by σ.
        let mv = dm.mul(&v);
        theta.extend_from_slice(&[
            mv.0[0] * s[0],
            mv.0[1] * s[1],
            mv.0[2] * s[0],
            mv.0[3] * s[1],
        ]);
        // ∂L/∂V = dMᵀ·U·diag(σ).
        let mtu = dm.transposed().mul(&u);
        theta.extend_from_slice(&[
            mtu.0[0] * s[0],
            mtu.0[1] * s[1],
            mtu.0[2] * s[0],
            mtu.0[3] * s[1],
        ]);
        // ∂L/∂σ_a = (Uᵀ·dM·V)_aa plus any direct path, then the sigmoid
        // factor σ(1−σ).
        let utmv = u.transposed().mul(dm).mul(&v);
        let dsig = [utmv.0[0] + g.d_sigma[0], utmv.0[3] + g.d_sigma[1]];
        theta.push(dsig[0] * s[0] * (1.0 - s[0]));
        theta.push(dsig[1] * s[1] * (1.0 - s[1]));
        // tanh factor 1 − b².
        let b = [raw.b_raw[0].tanh(), raw.b_raw[1].tanh()];
        theta.push(g.d_offset[0] * (1.0 - b[0] * b[0]));
        theta.push(g.d_offset[1] * (1.0 - b[1] * b[1]));
    }
    Ok(theta)
}

/// Central finite differences `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h` per
/// coordinate. `loss_fn` must be deterministic (pin its seeds).
pub fn finite_difference_gradient(
    theta: &[f64],
    loss_fn: &mut dyn FnMut(&[f64]) -> f64,
    step: f64,
) -> Vec<f64> {
    let mut work = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        work[i] = theta[i] + step;
        let up = loss_fn(&work);
        work[i] = theta[i] - step;
        let down = loss_fn(&work);
        work[i] = theta[i];
        grad.push((up - down) / (2.0 * step));
    }
    grad
}

/// Everything one objective evaluation needs to know about how to render
/// and compare.
pub struct EvalSettings<'a> {
    pub chaos: ChaosParams,
    pub splat: SplatConfig,
    pub target_side: usize,
    pub supersample: usize,
    pub weights: LossWeights,
    /// Drop parameter contributions from warm-up steps (ablation).
    pub truncate_warmup: bool,
    /// Reuse a fixed normalization transform instead of refitting the
    /// bounding box (used by the finite-difference oracle, which must
    /// differentiate the transform-held-constant function).
    pub freeze_transform: Option<NormalizationTransform>,
    pub plugin: Option<&'a dyn PerceptualLoss>,
}

/// Result of one full forward+backward pipeline pass.
pub struct PipelineEval {
    pub breakdown: LossBreakdown,
    /// ∂total/∂θ in the raw parameter layout.
    pub gradient: Vec<f64>,
    /// Rendered canvas at target resolution.
    pub render: Canvas,
    pub transform: NormalizationTransform,
}

struct ForwardPass {
    maps: Vec<MaterializedMap>,
    tape: TrajectoryTape,
    positions: Vec<Vec2>,
    transform: NormalizationTransform,
    render: Canvas,
    supersampled: Canvas,
}

fn forward_pass(code: &FractalCode, settings: &EvalSettings) -> Result<ForwardPass> {
    let maps = materialize(code)?;
    let probs = sampling_probabilities(&maps, ProbabilityMode::Uniform);
    let tape = chaos::run_chaos_game(&maps, &probs, settings.chaos)?;
    let raw = tape.emitted_positions();
    let transform = settings
        .freeze_transform
        .unwrap_or_else(|| chaos::normalization_for(&raw));
    let positions: Vec<Vec2> = raw.iter().map(|&p| transform.apply(p)).collect();
    let (render, supersampled) = splat_to_target(
        &positions,
        &settings.splat,
        settings.target_side,
        settings.supersample,
        &ViewWindow::FULL,
    );
    Ok(ForwardPass {
        maps,
        tape,
        positions,
        transform,
        render,
        supersampled,
    })
}

/// Forward-only objective value (used by the finite-difference oracle and
/// the annealing energy path).
pub fn evaluate_pipeline_value(
    code: &FractalCode,
    target: &Canvas,
    settings: &EvalSettings,
) -> Result<f64> {
    let fwd = forward_pass(code, settings)?;
    let out = total_loss(&fwd.render, target, &fwd.maps, &settings.weights, settings.plugin)?;
    Ok(out.breakdown.total)
}

/// One full objective evaluation: chaos game → normalize → splat →
/// loss → reverse sweep back to θ.
pub fn evaluate_pipeline(
    code: &FractalCode,
    target: &Canvas,
    settings: &EvalSettings,
) -> Result<PipelineEval> {
    let fwd = forward_pass(code, settings)?;
    let out = total_loss(&fwd.render, target, &fwd.maps, &settings.weights, settings.plugin)?;

    let grad_canvas = Canvas::from_pixels(settings.target_side, settings.target_side, out.d_render.clone())?;
    let d_positions = splat_backward(
        &fwd.positions,
        &settings.splat,
        &ViewWindow::FULL,
        &fwd.supersampled,
        &grad_canvas,
    )?;
    // Chain through the (constant) normalization: raw = (pos − t)/s, so
    // ∂L/∂raw = s·∂L/∂pos.
    let scale = fwd.transform.scale;
    let d_raw: Vec<Vec2> = d_positions
        .iter()
        .map(|g| [g[0] * scale, g[1] * scale])
        .collect();
    let mut map_grads =
        backprop_trajectories(&fwd.tape, &fwd.maps, &d_raw, settings.truncate_warmup)?;
    for (mg, reg) in map_grads.iter_mut().zip(&out.d_maps) {
        mg.d_sigma[0] += reg.d_sigma[0];
        mg.d_sigma[1] += reg.d_sigma[1];
        mg.d_offset[0] += reg.d_offset[0];
        mg.d_offset[1] += reg.d_offset[1];
    }
    let gradient = backprop_parameterization(&map_grads, code)?;
    Ok(PipelineEval {
        breakdown: out.breakdown,
        gradient,
        render: fwd.render,
        transform: fwd.transform,
    })
}
