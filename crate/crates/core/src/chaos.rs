//! Parallel chaos-game trajectory generation.
//!
//! The chaos game iterates `x_{k+1} = f_{π_k}(x_k)` from a random start,
//! with map indices `π_k` drawn from the code's sampling probabilities.
//! A batch of trajectories runs in parallel; the first `warmup` points of
//! each trajectory have not yet converged onto the attractor and are kept
//! in the tape (gradients flow through them) but not emitted for rendering.
//!
//! Randomness comes from counter-based streams keyed by (seed, trajectory,
//! step), so the tape is bit-identical for any thread count. The emitted
//! cloud is normalized into canvas coordinates — bounding box centered at
//! (0.5, 0.5), larger side spanning 0.5 — which realizes the 25%-padding
//! framing convention. The normalization transform is a per-batch constant:
//! gradients do not flow through it.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ifs::{MaterializedMap, Vec2};
use crate::rng::{self, Domain};

/// Batch-shape parameters for one generation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChaosParams {
    /// Number of parallel trajectories in the batch.
    pub trajectories: usize,
    /// Points per trajectory, including warm-up.
    pub trajectory_len: usize,
    /// Leading points per trajectory excluded from emission.
    pub warmup: usize,
    pub seed: u64,
}

/// Full record of a chaos-game batch: every position and every map choice,
/// sufficient to replay the run exactly and to backpropagate through it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTape {
    pub params: ChaosParams,
    /// All positions, trajectory-major: `points[t·L + k]` is x_k of
    /// trajectory t.
    pub points: Vec<Vec2>,
    /// Map index applied at each step: `indices[t·(L−1) + k]` produced
    /// `points[t·L + k + 1]`. One fewer entry than points per trajectory.
    pub indices: Vec<u8>,
}

impl TrajectoryTape {
    #[inline]
    pub fn point(&self, trajectory: usize, step: usize) -> Vec2 {
        self.points[trajectory * self.params.trajectory_len + step]
    }

    /// Index of the map that advanced `step` → `step + 1`.
    #[inline]
    pub fn map_choice(&self, trajectory: usize, step: usize) -> usize {
        self.indices[trajectory * (self.params.trajectory_len - 1) + step] as usize
    }

    /// Points flagged for rendering: the last `L − warmup` per trajectory.
    pub fn emitted_count(&self) -> usize {
        self.params.trajectories * (self.params.trajectory_len - self.params.warmup)
    }

    /// Collects emitted positions, trajectory-major.
    pub fn emitted_positions(&self) -> Vec<Vec2> {
        let len = self.params.trajectory_len;
        let warmup = self.params.warmup;
        let mut out = Vec::with_capacity(self.emitted_count());
        for t in 0..self.params.trajectories {
            out.extend_from_slice(&self.points[t * len + warmup..(t + 1) * len]);
        }
        out
    }
}

/// Uniform scale + offset mapping raw attractor space into canvas space:
/// `x ↦ scale·x + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationTransform {
    pub scale: f64,
    pub offset: Vec2,
    /// Set when the cloud was a single point and only centering applied.
    pub degenerate: bool,
}

impl NormalizationTransform {
    #[inline]
    pub fn apply(&self, p: Vec2) -> Vec2 {
        [
            self.scale * p[0] + self.offset[0],
            self.scale * p[1] + self.offset[1],
        ]
    }
}

/// Emitted points in canvas coordinates plus their provenance.
#[derive(Clone, Debug)]
pub struct PointSet {
    /// Normalized positions, trajectory-major like
    /// [`TrajectoryTape::emitted_positions`].
    pub positions: Vec<Vec2>,
    pub transform: NormalizationTransform,
    /// Emitted points per trajectory (`L − warmup`).
    pub per_trajectory: usize,
}

impl PointSet {
    /// Maps a flat position index back to its tape row and step.
    #[inline]
    pub fn provenance(&self, flat: usize) -> (usize, usize) {
        (
            flat / self.per_trajectory,
            flat % self.per_trajectory, // offset past the warm-up boundary
        )
    }
}

/// Draws a categorical index from cumulative probabilities.
#[inline]
fn pick_map(probs: &[f64], unit: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if unit < acc {
            return i;
        }
    }
    probs.len() - 1 // numerical slack: Σp may round below 1
}

/// Positions are clamped to this magnitude after every step. Contractive
/// maps never reach it (their attractors fit inside ‖x‖ ≤ √2/(1−σ_max));
/// it only matters for the unconstrained-parameterization ablation, where
/// transiently expansive maps would otherwise overflow to infinity.
pub const POSITION_CLAMP: f64 = 1e9;

/// The saturation applied after each map application (see
/// [`POSITION_CLAMP`]). Exposed so the gradient engine can replay steps
/// bit-exactly.
#[inline]
pub fn clamp_position(p: Vec2) -> Vec2 {
    [
        p[0].clamp(-POSITION_CLAMP, POSITION_CLAMP),
        p[1].clamp(-POSITION_CLAMP, POSITION_CLAMP),
    ]
}

/// Runs the chaos game: `trajectories` independent runs of length
/// `trajectory_len` from uniform starts in [−1,1]².
///
/// Deterministic in `params.seed` for any thread count; parallel across
/// trajectories.
pub fn run_chaos_game(
    maps: &[MaterializedMap],
    probs: &[f64],
    params: ChaosParams,
) -> Result<TrajectoryTape> {
    run_chaos_game_with(maps, probs, params, false)
}

/// [`run_chaos_game`] with an escape hatch for the unconstrained-matrix
/// ablation: `allow_expansive` skips the contractivity check (positions
/// are still clamped, so the tape stays finite).
pub fn run_chaos_game_with(
    maps: &[MaterializedMap],
    probs: &[f64],
    params: ChaosParams,
    allow_expansive: bool,
) -> Result<TrajectoryTape> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("chaos game needs at least one map".into()));
    }
    if maps.len() > u8::MAX as usize + 1 {
        return Err(Error::InvalidArgument(format!(
            "map count {} exceeds the tape's index range",
            maps.len()
        )));
    }
    if probs.len() != maps.len() {
        return Err(Error::InvalidArgument(format!(
            "{} probabilities for {} maps",
            probs.len(),
            maps.len()
        )));
    }
    if params.trajectories == 0 || params.warmup >= params.trajectory_len {
        return Err(Error::InvalidArgument(format!(
            "bad batch shape: {} trajectories, length {}, warmup {}",
            params.trajectories, params.trajectory_len, params.warmup
        )));
    }
    for (i, m) in maps.iter().enumerate() {
        if !m.linear.is_finite() || !m.offset[0].is_finite() || !m.offset[1].is_finite() {
            return Err(Error::InvalidArgument(format!(
                "map {i} has non-finite entries"
            )));
        }
        if !allow_expansive && !(m.sigma1 < 1.0 && m.sigma2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "map {i} is not contractive (σ = {}, {})",
                m.sigma1, m.sigma2
            )));
        }
    }

    let len = params.trajectory_len;
    let steps = len - 1;
    let seed = params.seed;
    let mut points = vec![[0.0f64; 2]; params.trajectories * len];
    let mut indices = vec![0u8; params.trajectories * steps];

    points
        .par_chunks_mut(len)
        .zip(indices.par_chunks_mut(steps))
        .enumerate()
        .for_each(|(t, (traj_points, traj_indices))| {
            let t64 = t as u64;
            let mut x = [
                rng::draw_range(seed, Domain::TrajectoryStart, t64, 0, -1.0, 1.0),
                rng::draw_range(seed, Domain::TrajectoryStart, t64, 1, -1.0, 1.0),
            ];
            traj_points[0] = x;
            for k in 0..steps {
                let u = rng::draw_unit(seed, Domain::MapChoice, t64, k as u64);
                let choice = pick_map(probs, u);
                x = clamp_position(maps[choice].apply(x));
                traj_indices[k] = choice as u8;
                traj_points[k + 1] = x;
            }
        });

    Ok(TrajectoryTape {
        params,
        points,
        indices,
    })
}

/// Computes the canvas-normalization transform for a point cloud: bounding
/// box centered at (0.5, 0.5), larger side scaled to 0.5.
pub fn normalization_for(points: &[Vec2]) -> NormalizationTransform {
    assert!(!points.is_empty(), "cannot normalize an empty cloud");
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let side = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if !(side > 1e-12) || !side.is_finite() {
        return NormalizationTransform {
            scale: 1.0,
            offset: [0.5 - center[0], 0.5 - center[1]],
            degenerate: true,
        };
    }
    let scale = 0.5 / side;
    NormalizationTransform {
        scale,
        offset: [0.5 - scale * center[0], 0.5 - scale * center[1]],
        degenerate: false,
    }
}

/// Normalizes a tape's emitted points into canvas coordinates.
pub fn emit_point_set(tape: &TrajectoryTape) -> PointSet {
    let raw = tape.emitted_positions();
    let transform = normalization_for(&raw);
    let positions = raw.iter().map(|&p| transform.apply(p)).collect();
    PointSet {
        positions,
        transform,
        per_trajectory: tape.params.trajectory_len - tape.params.warmup,
    }
}

/// Writes the binary point-dump format: u64 little-endian count, then
/// count (x, y) pairs as little-endian f32.
pub fn write_point_dump(path: impl AsRef<Path>, points: &[Vec2]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&(points.len() as u64).to_le_bytes())?;
    for p in points {
        file.write_all(&(p[0] as f32).to_le_bytes())?;
        file.write_all(&(p[1] as f32).to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Parses point-dump bytes. Rejects truncated payloads and counts that
/// disagree with the payload size.
pub fn parse_point_dump(bytes: &[u8]) -> Result<Vec<Vec2>> {
    if bytes.len() < 8 {
        return Err(Error::PointDump(format!(
            "header needs 8 bytes, got {}",
            bytes.len()
        )));
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().expect("sliced to 8"));
    let count: usize = count
        .try_into()
        .map_err(|_| Error::PointDump(format!("count {count} exceeds address space")))?;
    let payload = &bytes[8..];
    let expected = count
        .checked_mul(8)
        .ok_or_else(|| Error::PointDump(format!("count {count} overflows payload size")))?;
    if payload.len() != expected {
        return Err(Error::PointDump(format!(
            "count {count} implies {expected} payload bytes, got {}",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes(c[..4].try_into().expect("4 bytes")) as f64,
                f32::from_le_bytes(c[4..].try_into().expect("4 bytes")) as f64,
            ]
        })
        .collect())
}

/// Reads a point-dump file written by [`write_point_dump`].
pub fn read_point_dump(path: impl AsRef<Path>) -> Result<Vec<Vec2>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_point_dump(&bytes)
}
