//! The hybrid optimization loop: Adam gradient descent interleaved with
//! simulated-annealing phases under a linearly decaying temperature.
//!
//! Every iteration draws a fresh trajectory batch (seeded from the run
//! seed and the iteration index), renders it, evaluates the objective,
//! and takes one Adam step, after which each map's U/V frame is projected
//! back to orthonormal. Every `gd_block` iterations inside the first
//! `hybrid_fraction` of the run, a simulated-annealing phase perturbs the
//! raw parameters, keeps or rejects candidates by a Metropolis-style rule
//! on the plain image MSE, and the Adam moments are reset.
//!
//! Ablation switches cover the study variants: pure gradient descent,
//! annealing only (full-loss energy), noisy gradients, the unconstrained
//! 6-scalars-per-map parameterization, and a moment-matching objective.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::canvas::{Canvas, ViewWindow};
use crate::chaos::{normalization_for, run_chaos_game_with, ChaosParams, NormalizationTransform};
use crate::error::{Error, Result};
use crate::grad::{backprop_parameterization, backprop_trajectories, MapGradient};
use crate::ifs::{
    init_params, inverse_sigmoid, materialize, project_orthonormal_robust,
    sampling_probabilities, svd2x2, FractalCode, Mat2, MaterializedMap, ProbabilityMode,
    RawAffineParams,
};
use crate::loss::{
    mse, moment_loss, regularizer, total_loss, LossBreakdown, LossWeights, PerceptualLoss,
    RegularizerGradient,
};
use crate::rng::{self, Domain};
use crate::splat::{splat_backward, splat_to_target, SplatConfig};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;

/// Metropolis exponent scale: acceptance p = exp(−10·ΔE/T).
const SA_ENERGY_SCALE: f64 = 10.0;

/// Everything that shapes one inversion run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub total_iters: usize,
    /// Gradient-descent iterations between annealing phases.
    pub gd_block: usize,
    /// Candidates evaluated per annealing phase.
    pub sa_candidates: usize,
    /// Candidate perturbation standard deviation per unit temperature.
    pub sa_sigma_scale: f64,
    pub lr: f64,
    /// Fraction of the run during which annealing phases fire.
    pub hybrid_fraction: f64,
    /// Chaos-game batch: trajectories × steps, with leading warm-up.
    pub trajectories: usize,
    pub trajectory_len: usize,
    pub warmup: usize,
    /// Working canvas side (target resolution).
    pub canvas_side: usize,
    pub supersample: usize,
    /// Number of affine maps when no initial code is supplied.
    pub map_count: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            total_iters: 15_000,
            gd_block: 250,
            sa_candidates: 10,
            sa_sigma_scale: 0.2,
            lr: 1e-2,
            hybrid_fraction: 0.5,
            trajectories: 2000,
            trajectory_len: 250,
            warmup: 10,
            canvas_side: 1024,
            supersample: 5,
            map_count: 5,
            seed: 0,
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        let positive = self.total_iters >= 1
            && self.gd_block >= 1
            && self.sa_candidates >= 1
            && self.trajectories >= 1
            && self.canvas_side >= 1
            && self.supersample >= 1
            && self.map_count >= 1;
        if !positive
            || !(self.lr > 0.0 && self.lr.is_finite())
            || !(self.sa_sigma_scale > 0.0 && self.sa_sigma_scale.is_finite())
            || !(0.0..=1.0).contains(&self.hybrid_fraction)
            || self.warmup >= self.trajectory_len
        {
            return Err(Error::InvalidArgument(format!(
                "invalid run configuration: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Which scalar objective drives the optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Weighted multi-scale MSE + D-SSIM + perceptual slot + regularizer.
    Standard,
    /// Squared distance of normalized image moments up to `order`, plus
    /// the weighted regularizer (a classical-baseline ablation).
    Moments { order: usize },
}

/// Study-variant switches. Defaults reproduce the main method.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ablations {
    /// Skip every annealing phase (pure gradient descent).
    pub no_sa: bool,
    /// Annealing only: no gradient steps; phase energy is the full
    /// objective instead of plain MSE.
    pub sa_only: bool,
    /// Standard deviation of zero-mean Gaussian noise added to each
    /// gradient coordinate (0 disables).
    pub gradient_noise: f64,
    /// Optimize raw 2×2 matrix entries and offsets directly (6 scalars
    /// per map, no activations, no frame projection); the regularizer
    /// weight is raised ×100 to compensate for the missing constraints.
    pub naive_params: bool,
    /// Drop parameter gradients from warm-up trajectory steps.
    pub truncate_warmup: bool,
    pub objective: Objective,
}

impl Default for Ablations {
    fn default() -> Self {
        Ablations {
            no_sa: false,
            sa_only: false,
            gradient_noise: 0.0,
            naive_params: false,
            truncate_warmup: false,
            objective: Objective::Standard,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    GradientDescent,
    Annealing,
}

/// Adam accumulator state plus the loop's schedule position.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    /// Adam step counter for bias correction; resets with the moments.
    pub step: usize,
    pub iteration: usize,
    pub temperature: f64,
    pub phase: Phase,
}

impl OptimizerState {
    pub fn new(param_count: usize) -> OptimizerState {
        OptimizerState {
            m1: vec![0.0; param_count],
            m2: vec![0.0; param_count],
            step: 0,
            iteration: 0,
            temperature: 1.0,
            phase: Phase::GradientDescent,
        }
    }

    /// Clears the moment estimates (done after every annealing phase).
    pub fn reset_moments(&mut self) {
        self.m1.iter_mut().for_each(|x| *x = 0.0);
        self.m2.iter_mut().for_each(|x| *x = 0.0);
        self.step = 0;
    }
}

/// Linear temperature decay over the whole run: `max(0, 1 − i/total)`.
pub fn temperature(iteration: usize, total_iters: usize) -> f64 {
    (1.0 - iteration as f64 / total_iters as f64).max(0.0)
}

/// One Adam update (β1 = 0.9, β2 = 0.999, ε = 1e-8, bias-corrected).
/// Returns the new parameter vector; the caller re-projects U/V frames.
pub fn adam_step(
    state: &mut OptimizerState,
    theta: &[f64],
    grad: &[f64],
    lr: f64,
) -> Result<Vec<f64>> {
    if theta.len() != grad.len() || theta.len() != state.m1.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam buffers disagree: θ {}, grad {}, moments {}",
            theta.len(),
            grad.len(),
            state.m1.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite gradient at coordinate {i}"
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        state.m1[i] = ADAM_BETA1 * state.m1[i] + (1.0 - ADAM_BETA1) * grad[i];
        state.m2[i] = ADAM_BETA2 * state.m2[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = state.m1[i] / bias1;
        let v_hat = state.m2[i] / bias2;
        out.push(theta[i] - lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON));
    }
    Ok(out)
}

/// The Metropolis-style acceptance rule in isolation: given the energy
/// increase, the temperature, and a uniform draw, returns (accepted, p).
/// Improvements always pass; at zero temperature nothing else does.
pub fn sa_accept(delta_e: f64, temp: f64, unit_draw: f64) -> (bool, f64) {
    if delta_e < 0.0 {
        return (true, 1.0);
    }
    if temp <= 0.0 {
        return (false, 0.0);
    }
    let p = (-SA_ENERGY_SCALE * delta_e / temp).exp().min(1.0);
    (unit_draw < p, p)
}

/// Log record of one annealing candidate, sufficient to audit every
/// acceptance decision.
#[derive(Clone, Copy, Debug)]
pub struct SaCandidate {
    pub energy: f64,
    /// Candidate beat the current energy outright.
    pub improved: bool,
    /// Acceptance probability applied (1 for improvements).
    pub p: f64,
    /// The uniform draw compared against `p`, when one was needed.
    pub draw: Option<f64>,
    pub accepted: bool,
}

/// Result of one annealing phase.
#[derive(Clone, Debug)]
pub struct SaPhaseOutcome {
    pub theta: Vec<f64>,
    pub energy: f64,
    pub accepted: usize,
    pub candidates: Vec<SaCandidate>,
}

/// One simulated-annealing phase: `candidates` sequential proposals
/// `θ + N(0, (T·sigma_scale)²)`, each constrained by `project` and scored
/// by `energy_fn`, accepted by [`sa_accept`].
pub fn sa_phase(
    theta: &[f64],
    temp: f64,
    energy_fn: &mut dyn FnMut(&[f64]) -> Result<f64>,
    candidates: usize,
    sigma_scale: f64,
    seed: u64,
    project: &mut dyn FnMut(&mut [f64]) -> Result<()>,
) -> Result<SaPhaseOutcome> {
    let mut rng = rng::sequential_rng(seed, Domain::Annealing, 0);
    let noise = Normal::new(0.0, temp.max(0.0) * sigma_scale)
        .map_err(|e| Error::InvalidArgument(format!("bad annealing spread: {e}")))?;
    let mut current = theta.to_vec();
    let mut current_energy = energy_fn(&current)?;
    let mut records = Vec::with_capacity(candidates);
    let mut accepted_count = 0;
    for _ in 0..candidates {
        let mut candidate: Vec<f64> =
            current.iter().map(|&x| x + noise.sample(&mut rng)).collect();
        project(&mut candidate)?;
        let energy = energy_fn(&candidate)?;
        let delta = energy - current_energy;
        let improved = delta < 0.0;
        let (accepted, p, draw) = if improved {
            (true, 1.0, None)
        } else if temp <= 0.0 {
            (false, 0.0, None)
        } else {
            let u: f64 = rng.gen();
            let (acc, p) = sa_accept(delta, temp, u);
            (acc, p, Some(u))
        };
        if accepted {
            current = candidate;
            current_energy = energy;
            accepted_count += 1;
        }
        records.push(SaCandidate {
            energy,
            improved,
            p,
            draw,
            accepted,
        });
    }
    Ok(SaPhaseOutcome {
        theta: current,
        energy: current_energy,
        accepted: accepted_count,
        candidates: records,
    })
}

/// Iterations (1-based completion counts) after which an annealing phase
/// fires: multiples of `gd_block` inside the hybrid window.
pub fn sa_schedule(cfg: &RunConfig) -> Vec<usize> {
    let hybrid_end = (cfg.total_iters as f64 * cfg.hybrid_fraction).round() as usize;
    (1..=cfg.total_iters)
        .filter(|done| done % cfg.gd_block == 0 && *done <= hybrid_end)
        .collect()
}

/// Per-iteration log line.
#[derive(Clone, Copy, Debug)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub breakdown: LossBreakdown,
    pub temperature: f64,
    /// Number of accepted annealing candidates, when a phase ran after
    /// this iteration.
    pub sa_accepts: Option<usize>,
}

/// Renders the history as CSV (stable column order, header included).
pub fn history_to_csv(history: &[HistoryEntry]) -> String {
    let mut out =
        String::from("iteration,total,mse_ms,dssim,reg,perceptual,temperature,sa_accepts\n");
    for h in history {
        let sa = h
            .sa_accepts
            .map(|n| n.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            h.iteration,
            h.breakdown.total,
            h.breakdown.mse_ms,
            h.breakdown.dssim,
            h.breakdown.reg,
            h.breakdown.perceptual,
            h.temperature,
            sa
        ));
    }
    out
}

/// Outcome of a full inversion run: the last iterate, the best-loss
/// iterate seen anywhere in the run, and the iteration log.
#[derive(Clone, Debug)]
pub struct InversionResult {
    pub final_code: FractalCode,
    pub final_loss: f64,
    pub best_code: FractalCode,
    pub best_loss: f64,
    pub history: Vec<HistoryEntry>,
    /// Batches whose emitted cloud collapsed to a point (normalization
    /// fell back to pure centering).
    pub degenerate_batches: usize,
}

/// Unconstrained per-map parameters for the naive-parameterization
/// ablation: `[m00, m01, m10, m11, b0, b1]`, no activations.
#[derive(Clone, Debug, PartialEq)]
pub struct NaiveCode {
    pub maps: Vec<[f64; 6]>,
}

impl NaiveCode {
    pub fn from_materialized(maps: &[MaterializedMap]) -> NaiveCode {
        NaiveCode {
            maps: maps
                .iter()
                .map(|m| {
                    let l = m.linear.0;
                    [l[0], l[1], l[2], l[3], m.offset[0], m.offset[1]]
                })
                .collect(),
        }
    }

    pub fn to_theta(&self) -> Vec<f64> {
        self.maps.iter().flatten().copied().collect()
    }

    pub fn from_theta(theta: &[f64]) -> Result<NaiveCode> {
        if theta.is_empty() || theta.len() % 6 != 0 {
            return Err(Error::InvalidArgument(format!(
                "naive parameter vector length {} is not a positive multiple of 6",
                theta.len()
            )));
        }
        Ok(NaiveCode {
            maps: theta
                .chunks_exact(6)
                .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
                .collect(),
        })
    }

    /// Materializes with true singular values read off each matrix.
    pub fn materialized(&self) -> Result<Vec<MaterializedMap>> {
        self.maps
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if e.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "naive map {i} has non-finite entries"
                    )));
                }
                let linear = Mat2([e[0], e[1], e[2], e[3]]);
                let (_, s, _) = svd2x2(&linear);
                Ok(MaterializedMap {
                    linear,
                    offset: [e[4], e[5]],
                    sigma1: s[0],
                    sigma2: s[1],
                })
            })
            .collect()
    }

    /// Converts into the constrained representation (for export): factors
    /// each matrix by SVD and encodes σ and b through the activation
    /// inverses, clamping values that left the representable open
    /// intervals.
    pub fn export(&self) -> Result<FractalCode> {
        let maps = self
            .maps
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if e.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "naive map {i} has non-finite entries"
                    )));
                }
                let (u, s, v) = svd2x2(&Mat2([e[0], e[1], e[2], e[3]]));
                let clamp_sigma = |x: f64| x.clamp(1e-6, 1.0 - 1e-6);
                let clamp_offset = |x: f64| x.clamp(-(1.0 - 1e-12), 1.0 - 1e-12);
                Ok(RawAffineParams {
                    u_raw: u.0,
                    v_raw: v.0,
                    s_raw: [
                        inverse_sigmoid(clamp_sigma(s[0])),
                        inverse_sigmoid(clamp_sigma(s[1])),
                    ],
                    b_raw: [clamp_offset(e[4]).atanh(), clamp_offset(e[5]).atanh()],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FractalCode { maps })
    }
}

/// Chains materialized-space gradients into the naive layout: matrix
/// entries take `∂L/∂M` plus the singular-value path `Σ_k ∂L/∂σ_k·u_k v_kᵀ`;
/// offsets pass through unchanged.
fn naive_parameter_gradient(map_grads: &[MapGradient], code: &NaiveCode) -> Result<Vec<f64>> {
    if map_grads.len() != code.maps.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} map gradients for a {}-map naive code",
            map_grads.len(),
            code.maps.len()
        )));
    }
    let mut theta = Vec::with_capacity(code.maps.len() * 6);
    for (g, e) in map_grads.iter().zip(&code.maps) {
        let (u, _, v) = svd2x2(&Mat2([e[0], e[1], e[2], e[3]]));
        let mut d = g.d_linear.0;
        for (k, dsig) in g.d_sigma.iter().enumerate() {
            // ∂σ_k/∂M_ij = U_ik · V_jk.
            d[0] += dsig * u.0[k] * v.0[k];
            d[1] += dsig * u.0[k] * v.0[2 + k];
            d[2] += dsig * u.0[2 + k] * v.0[k];
            d[3] += dsig * u.0[2 + k] * v.0[2 + k];
        }
        theta.extend_from_slice(&d);
        theta.push(g.d_offset[0]);
        theta.push(g.d_offset[1]);
    }
    Ok(theta)
}

/// The optimizer's live parameter vector, in either representation.
#[derive(Clone, Debug)]
enum ParamVector {
    Constrained(FractalCode),
    Unconstrained(NaiveCode),
}

impl ParamVector {
    fn theta(&self) -> Vec<f64> {
        match self {
            ParamVector::Constrained(c) => c.to_theta(),
            ParamVector::Unconstrained(n) => n.to_theta(),
        }
    }

    fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        match self {
            ParamVector::Constrained(c) => *c = FractalCode::from_theta(theta)?,
            ParamVector::Unconstrained(n) => *n = NaiveCode::from_theta(theta)?,
        }
        Ok(())
    }

    fn is_naive(&self) -> bool {
        matches!(self, ParamVector::Unconstrained(_))
    }

    fn materialized(&self) -> Result<Vec<MaterializedMap>> {
        match self {
            ParamVector::Constrained(c) => materialize(c),
            ParamVector::Unconstrained(n) => n.materialized(),
        }
    }

    /// Re-orthonormalizes U/V frames (no-op for the naive representation).
    fn project(&mut self) -> Result<()> {
        if let ParamVector::Constrained(code) = self {
            project_code(code)?;
        }
        Ok(())
    }

    fn export(&self) -> Result<FractalCode> {
        match self {
            ParamVector::Constrained(c) => Ok(c.clone()),
            ParamVector::Unconstrained(n) => n.export(),
        }
    }
}

/// Projects every map's U and V entries back to orthonormal (the
/// post-step constraint of the factored parameterization).
pub fn project_code(code: &mut FractalCode) -> Result<()> {
    for raw in &mut code.maps {
        raw.u_raw = project_orthonormal_robust(&Mat2(raw.u_raw))?.0;
        raw.v_raw = project_orthonormal_robust(&Mat2(raw.v_raw))?.0;
    }
    Ok(())
}

struct StepEval {
    breakdown: LossBreakdown,
    gradient: Option<Vec<f64>>,
    degenerate: bool,
}

/// One objective evaluation (forward, optionally backward) for either
/// parameter representation and either objective.
#[allow(clippy::too_many_arguments)]
fn evaluate_step(
    params: &ParamVector,
    target: &Canvas,
    cfg: &RunConfig,
    weights: &LossWeights,
    ablations: &Ablations,
    plugin: Option<&dyn PerceptualLoss>,
    chaos_seed: u64,
    freeze: Option<NormalizationTransform>,
    want_gradient: bool,
) -> Result<StepEval> {
    let maps = params.materialized()?;
    let probs = sampling_probabilities(&maps, ProbabilityMode::Uniform);
    let chaos_params = ChaosParams {
        trajectories: cfg.trajectories,
        trajectory_len: cfg.trajectory_len,
        warmup: cfg.warmup,
        seed: chaos_seed,
    };
    let tape = run_chaos_game_with(&maps, &probs, chaos_params, params.is_naive())?;
    let raw = tape.emitted_positions();
    let transform = freeze.unwrap_or_else(|| normalization_for(&raw));
    let positions: Vec<[f64; 2]> = raw.iter().map(|&p| transform.apply(p)).collect();
    let side = target.width();
    let (render, supersampled) = splat_to_target(
        &positions,
        &SplatConfig::default(),
        side,
        cfg.supersample,
        &ViewWindow::FULL,
    );

    let (breakdown, d_render, d_maps) = match ablations.objective {
        Objective::Standard => {
            let out = total_loss(&render, target, &maps, weights, plugin)?;
            (out.breakdown, out.d_render, out.d_maps)
        }
        Objective::Moments { order } => {
            let (value, d_render) = moment_loss(&render, target, order)?;
            let (reg, reg_grads) = regularizer(&maps, weights.cond);
            let breakdown = LossBreakdown {
                total: value + weights.reg * reg,
                mse_ms: value, // the moment distance rides in this slot
                dssim: 0.0,
                perceptual: 0.0,
                reg,
            };
            let d_maps = reg_grads
                .iter()
                .map(|g| RegularizerGradient {
                    d_sigma: [weights.reg * g.d_sigma[0], weights.reg * g.d_sigma[1]],
                    d_offset: [weights.reg * g.d_offset[0], weights.reg * g.d_offset[1]],
                })
                .collect();
            (breakdown, d_render, d_maps)
        }
    };

    if !want_gradient {
        return Ok(StepEval {
            breakdown,
            gradient: None,
            degenerate: transform.degenerate,
        });
    }

    let grad_canvas = Canvas::from_pixels(side, side, d_render)?;
    let d_positions = splat_backward(
        &positions,
        &SplatConfig::default(),
        &ViewWindow::FULL,
        &supersampled,
        &grad_canvas,
    )?;
    let scale = transform.scale;
    let d_raw: Vec<[f64; 2]> = d_positions
        .iter()
        .map(|g| [g[0] * scale, g[1] * scale])
        .collect();
    let mut map_grads =
        backprop_trajectories(&tape, &maps, &d_raw, ablations.truncate_warmup)?;
    for (mg, reg) in map_grads.iter_mut().zip(&d_maps) {
        mg.d_sigma[0] += reg.d_sigma[0];
        mg.d_sigma[1] += reg.d_sigma[1];
        mg.d_offset[0] += reg.d_offset[0];
        mg.d_offset[1] += reg.d_offset[1];
    }
    let gradient = match params {
        ParamVector::Constrained(code) => backprop_parameterization(&map_grads, code)?,
        ParamVector::Unconstrained(code) => naive_parameter_gradient(&map_grads, code)?,
    };
    Ok(StepEval {
        breakdown,
        gradient: Some(gradient),
        degenerate: transform.degenerate,
    })
}

/// Plain single-scale MSE of a fresh pinned-seed render (the default
/// annealing energy).
fn render_mse(
    params: &ParamVector,
    target: &Canvas,
    cfg: &RunConfig,
    chaos_seed: u64,
) -> Result<f64> {
    let maps = params.materialized()?;
    let probs = sampling_probabilities(&maps, ProbabilityMode::Uniform);
    let chaos_params = ChaosParams {
        trajectories: cfg.trajectories,
        trajectory_len: cfg.trajectory_len,
        warmup: cfg.warmup,
        seed: chaos_seed,
    };
    let tape = run_chaos_game_with(&maps, &probs, chaos_params, params.is_naive())?;
    let raw = tape.emitted_positions();
    let transform = normalization_for(&raw);
    let positions: Vec<[f64; 2]> = raw.iter().map(|&p| transform.apply(p)).collect();
    let (render, _) = splat_to_target(
        &positions,
        &SplatConfig::default(),
        target.width(),
        cfg.supersample,
        &ViewWindow::FULL,
    );
    mse(&render, target)
}

fn validate_target(target: &Canvas) -> Result<()> {
    let side = target.width();
    if target.height() != side || !side.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "inversion target must be a square power-of-two canvas, got {}×{}",
            target.width(),
            target.height()
        )));
    }
    if target.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument(
            "inversion target intensities must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

fn diverged(iteration: usize, seed: u64, theta: &[f64], what: &str) -> Error {
    Error::Diverged {
        iteration,
        message: format!("{what}; seed {seed}; parameters {theta:?}"),
    }
}

/// Runs the full hybrid inversion loop on a target image.
///
/// Returns both the final iterate and the best-loss iterate: an annealing
/// phase can legitimately end on an uphill acceptance, so the best answer
/// is tracked explicitly.
pub fn run_inversion(
    target: &Canvas,
    cfg: &RunConfig,
    weights: &LossWeights,
    ablations: &Ablations,
    plugin: Option<&dyn PerceptualLoss>,
    init_code: Option<FractalCode>,
) -> Result<InversionResult> {
    cfg.validate()?;
    validate_target(target)?;
    let mut weights = *weights;
    if ablations.naive_params {
        weights.reg *= 100.0; // the unconstrained matrices need the leash
    }

    let mut params = {
        let seed_code = match init_code {
            Some(c) => {
                if c.map_count() == 0 {
                    return Err(Error::InvalidArgument("initial code has no maps".into()));
                }
                c
            }
            None => init_params(cfg.map_count, cfg.seed),
        };
        if ablations.naive_params {
            ParamVector::Unconstrained(NaiveCode::from_materialized(&materialize(&seed_code)?))
        } else {
            let mut code = seed_code;
            project_code(&mut code)?;
            ParamVector::Constrained(code)
        }
    };

    if ablations.sa_only {
        return run_sa_only(target, cfg, &weights, ablations, plugin, params);
    }

    let schedule = sa_schedule(cfg);
    let hybrid_active = !ablations.no_sa && cfg.hybrid_fraction > 0.0;
    let mut state = OptimizerState::new(params.theta().len());
    let mut history = Vec::with_capacity(cfg.total_iters);
    let mut degenerate_batches = 0usize;
    let mut best_theta = params.theta();
    let mut best_loss = f64::INFINITY;
    let mut final_loss = f64::NAN;

    for iteration in 0..cfg.total_iters {
        state.iteration = iteration;
        state.temperature = temperature(iteration, cfg.total_iters);
        state.phase = Phase::GradientDescent;

        let chaos_seed = rng::derive_seed(cfg.seed, Domain::TrajectoryStart, iteration as u64);
        let eval = evaluate_step(
            &params, target, cfg, &weights, ablations, plugin, chaos_seed, None, true,
        )?;
        if !eval.breakdown.total.is_finite() {
            return Err(diverged(
                iteration,
                cfg.seed,
                &params.theta(),
                &format!("non-finite loss {}", eval.breakdown.total),
            ));
        }
        if eval.degenerate {
            degenerate_batches += 1;
        }
        if eval.breakdown.total < best_loss {
            best_loss = eval.breakdown.total;
            best_theta = params.theta();
        }
        final_loss = eval.breakdown.total;

        let mut gradient = eval.gradient.expect("gradient requested");
        if ablations.gradient_noise > 0.0 {
            // Separate stream from the phase seeds: annealing phases use
            // small indices, noise uses the upper half-range.
            let mut noise_rng = rng::sequential_rng(
                cfg.seed,
                Domain::Annealing,
                (1u64 << 32) + iteration as u64,
            );
            let noise = Normal::new(0.0, ablations.gradient_noise)
                .map_err(|e| Error::InvalidArgument(format!("bad gradient noise: {e}")))?;
            for g in &mut gradient {
                *g += noise.sample(&mut noise_rng);
            }
        }

        let theta = params.theta();
        let stepped = adam_step(&mut state, &theta, &gradient, cfg.lr)?;
        params.set_theta(&stepped)?;
        params.project()?;

        let done = iteration + 1;
        let mut sa_accepts = None;
        if hybrid_active && done % cfg.gd_block == 0 && schedule.binary_search(&done).is_ok() {
            state.phase = Phase::Annealing;
            let phase_index = (done / cfg.gd_block) as u64;
            let phase_temp = temperature(done, cfg.total_iters);
            let noise_seed = rng::derive_seed(cfg.seed, Domain::Annealing, 2 * phase_index);
            let energy_seed =
                rng::derive_seed(cfg.seed, Domain::Annealing, 2 * phase_index + 1);
            let naive = params.is_naive();
            let mut energy_fn = |theta: &[f64]| -> Result<f64> {
                let candidate = if naive {
                    ParamVector::Unconstrained(NaiveCode::from_theta(theta)?)
                } else {
                    ParamVector::Constrained(FractalCode::from_theta(theta)?)
                };
                render_mse(&candidate, target, cfg, energy_seed)
            };
            let mut project = |theta: &mut [f64]| -> Result<()> {
                if naive {
                    return Ok(());
                }
                let mut code = FractalCode::from_theta(theta)?;
                project_code(&mut code)?;
                theta.copy_from_slice(&code.to_theta());
                Ok(())
            };
            let outcome = sa_phase(
                &params.theta(),
                phase_temp,
                &mut energy_fn,
                cfg.sa_candidates,
                cfg.sa_sigma_scale,
                noise_seed,
                &mut project,
            )?;
            params.set_theta(&outcome.theta)?;
            sa_accepts = Some(outcome.accepted);
            state.reset_moments();
        }

        history.push(HistoryEntry {
            iteration,
            breakdown: eval.breakdown,
            temperature: state.temperature,
            sa_accepts,
        });
    }

    let final_code = params.export()?;
    let mut best_params = params.clone();
    best_params.set_theta(&best_theta)?;
    let best_code = best_params.export()?;
    Ok(InversionResult {
        final_code,
        final_loss,
        best_code,
        best_loss,
        history,
        degenerate_batches,
    })
}

/// Annealing-only ablation: back-to-back phases, each candidate counted
/// against the iteration budget, energy = the full objective.
fn run_sa_only(
    target: &Canvas,
    cfg: &RunConfig,
    weights: &LossWeights,
    ablations: &Ablations,
    plugin: Option<&dyn PerceptualLoss>,
    mut params: ParamVector,
) -> Result<InversionResult> {
    let phases = cfg.total_iters.div_ceil(cfg.sa_candidates).max(1);
    let mut history = Vec::with_capacity(phases);
    let mut degenerate_batches = 0usize;
    let mut best_theta = params.theta();
    let mut best_loss = f64::INFINITY;
    let mut final_loss = f64::NAN;
    let naive = params.is_naive();

    for phase_index in 0..phases {
        let iteration = phase_index * cfg.sa_candidates;
        let temp = temperature(iteration, cfg.total_iters);
        let energy_seed = rng::derive_seed(cfg.seed, Domain::Annealing, 2 * phase_index as u64 + 1);
        let noise_seed = rng::derive_seed(cfg.seed, Domain::Annealing, 2 * phase_index as u64);

        let mut energy_fn = |theta: &[f64]| -> Result<f64> {
            let candidate = if naive {
                ParamVector::Unconstrained(NaiveCode::from_theta(theta)?)
            } else {
                ParamVector::Constrained(FractalCode::from_theta(theta)?)
            };
            let eval = evaluate_step(
                &candidate,
                target,
                cfg,
                weights,
                ablations,
                plugin,
                energy_seed,
                None,
                false,
            )?;
            Ok(eval.breakdown.total)
        };
        let mut project = |theta: &mut [f64]| -> Result<()> {
            if naive {
                return Ok(());
            }
            let mut code = FractalCode::from_theta(theta)?;
            project_code(&mut code)?;
            theta.copy_from_slice(&code.to_theta());
            Ok(())
        };
        let outcome = sa_phase(
            &params.theta(),
            temp,
            &mut energy_fn,
            cfg.sa_candidates,
            cfg.sa_sigma_scale,
            noise_seed,
            &mut project,
        )?;
        params.set_theta(&outcome.theta)?;

        // Log the full breakdown of the phase's outgoing state.
        let eval = evaluate_step(
            &params, target, cfg, weights, ablations, plugin, energy_seed, None, false,
        )?;
        if !eval.breakdown.total.is_finite() {
            return Err(diverged(
                iteration,
                cfg.seed,
                &params.theta(),
                &format!("non-finite loss {}", eval.breakdown.total),
            ));
        }
        if eval.degenerate {
            degenerate_batches += 1;
        }
        if eval.breakdown.total < best_loss {
            best_loss = eval.breakdown.total;
            best_theta = params.theta();
        }
        final_loss = eval.breakdown.total;
        history.push(HistoryEntry {
            iteration,
            breakdown: eval.breakdown,
            temperature: temp,
            sa_accepts: Some(outcome.accepted),
        });
    }

    let final_code = params.export()?;
    let mut best_params = params.clone();
    best_params.set_theta(&best_theta)?;
    let best_code = best_params.export()?;
    Ok(InversionResult {
        final_code,
        final_loss,
        best_code,
        best_loss,
        history,
        degenerate_batches,
    })
}
