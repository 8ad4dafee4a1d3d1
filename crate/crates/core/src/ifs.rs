//! Fractal codes and their contractive parameterization.
//!
//! A fractal code is a set of affine maps `f_i(x) = M_i x + b_i`. Each
//! linear part is stored in factored form `M = U · diag(σ) · Vᵀ` where the
//! singular values pass through a sigmoid — so σ ∈ (0,1) and every map is
//! contractive by construction, for any raw parameter values. Offsets pass
//! through tanh, pinning them to [−1,1]². The raw `U`/`V` entries drift off
//! the orthonormal manifold during optimization and are pulled back with
//! Gram-Schmidt after every step ([`project_orthonormal`]).
//!
//! Parameter layout: 12 raw scalars per map, flattened per map as
//! `u_raw[4], v_raw[4], s_raw[2], b_raw[2]` (matrices row-major).

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// A 2D point or offset.
pub type Vec2 = [f64; 2];

/// Row-major 2×2 matrix `[m00 m01; m10 m11]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat2(pub [f64; 4]);

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2([1.0, 0.0, 0.0, 1.0]);

    pub fn from_cols(c0: Vec2, c1: Vec2) -> Mat2 {
        Mat2([c0[0], c1[0], c0[1], c1[1]])
    }

    pub fn col(&self, i: usize) -> Vec2 {
        [self.0[i], self.0[2 + i]]
    }

    pub fn mul_vec(&self, v: Vec2) -> Vec2 {
        [
            self.0[0] * v[0] + self.0[1] * v[1],
            self.0[2] * v[0] + self.0[3] * v[1],
        ]
    }

    pub fn mul(&self, rhs: &Mat2) -> Mat2 {
        let a = &self.0;
        let b = &rhs.0;
        Mat2([
            a[0] * b[0] + a[1] * b[2],
            a[0] * b[1] + a[1] * b[3],
            a[2] * b[0] + a[3] * b[2],
            a[2] * b[1] + a[3] * b[3],
        ])
    }

    pub fn transposed(&self) -> Mat2 {
        Mat2([self.0[0], self.0[2], self.0[1], self.0[3]])
    }

    pub fn det(&self) -> f64 {
        self.0[0] * self.0[3] - self.0[1] * self.0[2]
    }

    /// Rotation by `angle` radians (counter-clockwise).
    pub fn rotation(angle: f64) -> Mat2 {
        let (s, c) = angle.sin_cos();
        Mat2([c, -s, s, c])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on (0, 1); used when encoding target singular
/// values back into raw parameters.
pub fn inverse_sigmoid(y: f64) -> f64 {
    assert!(y > 0.0 && y < 1.0, "inverse sigmoid domain is (0, 1)");
    (y / (1.0 - y)).ln()
}

/// Raw (pre-activation) parameters of one affine map: 12 scalars.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawAffineParams {
    /// Entries of the pre-projection U factor, row-major.
    pub u_raw: [f64; 4],
    /// Entries of the pre-projection V factor, row-major.
    pub v_raw: [f64; 4],
    /// Pre-sigmoid singular-value logits.
    pub s_raw: [f64; 2],
    /// Pre-tanh offset logits.
    pub b_raw: [f64; 2],
}

impl RawAffineParams {
    pub fn is_finite(&self) -> bool {
        self.u_raw.iter().all(|x| x.is_finite())
            && self.v_raw.iter().all(|x| x.is_finite())
            && self.s_raw.iter().all(|x| x.is_finite())
            && self.b_raw.iter().all(|x| x.is_finite())
    }
}

/// A full fractal code: the raw parameters of every map.
#[derive(Clone, Debug, PartialEq)]
pub struct FractalCode {
    pub maps: Vec<RawAffineParams>,
}

/// Number of raw scalars per map (4 + 4 + 2 + 2).
pub const PARAMS_PER_MAP: usize = 12;

impl FractalCode {
    pub fn map_count(&self) -> usize {
        self.maps.len()
    }

    pub fn param_count(&self) -> usize {
        self.maps.len() * PARAMS_PER_MAP
    }

    /// Flattens to a parameter vector, per map: u_raw, v_raw, s_raw, b_raw.
    pub fn to_theta(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.param_count());
        for m in &self.maps {
            theta.extend_from_slice(&m.u_raw);
            theta.extend_from_slice(&m.v_raw);
            theta.extend_from_slice(&m.s_raw);
            theta.extend_from_slice(&m.b_raw);
        }
        theta
    }

    /// Inverse of [`to_theta`]; `theta.len()` must be a positive multiple
    /// of 12.
    ///
    /// [`to_theta`]: FractalCode::to_theta
    pub fn from_theta(theta: &[f64]) -> Result<FractalCode> {
        if theta.is_empty() || theta.len() % PARAMS_PER_MAP != 0 {
            return Err(Error::InvalidArgument(format!(
                "parameter vector length {} is not a positive multiple of {PARAMS_PER_MAP}",
                theta.len()
            )));
        }
        let maps = theta
            .chunks_exact(PARAMS_PER_MAP)
            .map(|c| RawAffineParams {
                u_raw: [c[0], c[1], c[2], c[3]],
                v_raw: [c[4], c[5], c[6], c[7]],
                s_raw: [c[8], c[9]],
                b_raw: [c[10], c[11]],
            })
            .collect();
        Ok(FractalCode { maps })
    }

    pub fn is_finite(&self) -> bool {
        self.maps.iter().all(|m| m.is_finite())
    }
}

/// One affine map with activations applied, ready to iterate.
#[derive(Clone, Copy, Debug)]
pub struct MaterializedMap {
    /// Linear part `M = U · diag(σ1, σ2) · Vᵀ`.
    pub linear: Mat2,
    /// Offset, each component in [−1, 1].
    pub offset: Vec2,
    /// Singular values of `linear`, each in (0, 1).
    pub sigma1: f64,
    pub sigma2: f64,
}

impl MaterializedMap {
    /// Applies the map: `x ↦ M x + b`.
    #[inline]
    pub fn apply(&self, x: Vec2) -> Vec2 {
        let y = self.linear.mul_vec(x);
        [y[0] + self.offset[0], y[1] + self.offset[1]]
    }
}

/// How chaos-game steps pick which map to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbabilityMode {
    /// Every map equally likely (used while optimizing).
    Uniform,
    /// Probability proportional to |det M| + ε (used for final renders,
    /// where it distributes points evenly over the attractor's measure).
    DeterminantProportional,
}

/// Additive smoothing for determinant-proportional probabilities; keeps
/// near-singular maps reachable.
pub const DETERMINANT_PROB_EPSILON: f64 = 1e-4;

/// Turns raw parameters into concrete affine maps.
///
/// Uses the stored `U`/`V` entries as-is — callers are responsible for
/// keeping them orthonormal via [`project_orthonormal`].
pub fn materialize(code: &FractalCode) -> Result<Vec<MaterializedMap>> {
    code.maps
        .iter()
        .enumerate()
        .map(|(i, raw)| {
            if !raw.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "map {i} has non-finite raw parameters"
                )));
            }
            let u = Mat2(raw.u_raw);
            let v = Mat2(raw.v_raw);
            let sigma1 = sigmoid(raw.s_raw[0]);
            let sigma2 = sigmoid(raw.s_raw[1]);
            // U · diag(σ) · Vᵀ, with the diagonal folded into Vᵀ's rows.
            let vt = v.transposed();
            let svt = Mat2([
                sigma1 * vt.0[0],
                sigma1 * vt.0[1],
                sigma2 * vt.0[2],
                sigma2 * vt.0[3],
            ]);
            Ok(MaterializedMap {
                linear: u.mul(&svt),
                offset: [raw.b_raw[0].tanh(), raw.b_raw[1].tanh()],
                sigma1,
                sigma2,
            })
        })
        .collect()
}

/// Nearest-orthonormal projection by column-wise Gram-Schmidt; the first
/// column keeps its direction.
pub fn project_orthonormal(raw: &Mat2) -> Result<Mat2> {
    const DEGENERATE: f64 = 1e-12;
    let c0 = raw.col(0);
    let n0 = (c0[0] * c0[0] + c0[1] * c0[1]).sqrt();
    if !n0.is_finite() || n0 < DEGENERATE {
        return Err(Error::InvalidArgument(
            "cannot orthonormalize: first column is (near) zero".into(),
        ));
    }
    let e0 = [c0[0] / n0, c0[1] / n0];
    let c1 = raw.col(1);
    let proj = c1[0] * e0[0] + c1[1] * e0[1];
    let r1 = [c1[0] - proj * e0[0], c1[1] - proj * e0[1]];
    let n1 = (r1[0] * r1[0] + r1[1] * r1[1]).sqrt();
    if !n1.is_finite() || n1 < DEGENERATE {
        return Err(Error::InvalidArgument(
            "cannot orthonormalize: columns are (near) parallel".into(),
        ));
    }
    Ok(Mat2::from_cols(e0, [r1[0] / n1, r1[1] / n1]))
}

/// [`project_orthonormal`] with the documented degenerate-input recovery:
/// nudge the entries with deterministic noise of magnitude 1e-6 and retry
/// once before giving up.
pub fn project_orthonormal_robust(raw: &Mat2) -> Result<Mat2> {
    match project_orthonormal(raw) {
        Ok(q) => Ok(q),
        Err(_) => {
            let mut nudged = *raw;
            // Noise derived from the entry bits keeps the recovery
            // reproducible without threading a seed through every caller.
            let key = raw
                .0
                .iter()
                .fold(0u64, |h, x| rng::mix64(h ^ x.to_bits()));
            for (i, e) in nudged.0.iter_mut().enumerate() {
                if !e.is_finite() {
                    return Err(Error::InvalidArgument(
                        "cannot orthonormalize: non-finite entries".into(),
                    ));
                }
                let u = (rng::mix64(key.wrapping_add(i as u64)) >> 11) as f64
                    / (1u64 << 53) as f64;
                *e += (2.0 * u - 1.0) * 1e-6;
            }
            project_orthonormal(&nudged)
        }
    }
}

/// Per-map selection probabilities for the chaos game.
pub fn sampling_probabilities(maps: &[MaterializedMap], mode: ProbabilityMode) -> Vec<f64> {
    assert!(!maps.is_empty(), "probability vector needs at least one map");
    match mode {
        ProbabilityMode::Uniform => vec![1.0 / maps.len() as f64; maps.len()],
        ProbabilityMode::DeterminantProportional => {
            let weights: Vec<f64> = maps
                .iter()
                .map(|m| m.linear.det().abs() + DETERMINANT_PROB_EPSILON)
                .collect();
            let total: f64 = weights.iter().sum();
            weights.into_iter().map(|w| w / total).collect()
        }
    }
}

/// Uniform random initialization: every raw scalar i.i.d. from [−1, 1],
/// then U/V projected to orthonormal. Deterministic in `seed`.
pub fn init_params(m: usize, seed: u64) -> FractalCode {
    assert!(m >= 1, "a fractal code needs at least one map");
    let maps = (0..m)
        .map(|map_idx| {
            let draw =
                |k: u64| rng::draw_range(seed, Domain::ParamInit, map_idx as u64, k, -1.0, 1.0);
            let u_raw = Mat2([draw(0), draw(1), draw(2), draw(3)]);
            let v_raw = Mat2([draw(4), draw(5), draw(6), draw(7)]);
            RawAffineParams {
                // Uniform 2×2 draws are degenerate with probability zero;
                // the robust projection covers the float-underflow corner.
                u_raw: project_orthonormal_robust(&u_raw)
                    .expect("random init matrix was degenerate twice")
                    .0,
                v_raw: project_orthonormal_robust(&v_raw)
                    .expect("random init matrix was degenerate twice")
                    .0,
                s_raw: [draw(8), draw(9)],
                b_raw: [draw(10), draw(11)],
            }
        })
        .collect();
    FractalCode { maps }
}

/// Full 2×2 singular value decomposition: returns `(U, [σ1, σ2], V)` with
/// `M = U · diag(σ) · Vᵀ`, σ1 ≥ σ2 ≥ 0, and U, V orthogonal.
///
/// Used where σ must be read off an unconstrained matrix (the direct-matrix
/// parameterization ablation); the factored representation never needs it.
pub fn svd2x2(m: &Mat2) -> (Mat2, [f64; 2], Mat2) {
    // Rotate M into a symmetric matrix: R(φ)ᵀ·M is symmetric for
    // φ = atan2(m10 − m01, m00 + m11).
    let [a, b, c, d] = m.0;
    let phi = (c - b).atan2(a + d);
    let r = Mat2::rotation(phi);
    let sym = r.transposed().mul(m);
    // Eigendecompose the symmetric part: sym = Q · diag(λ) · Qᵀ with the
    // algebraically larger eigenvalue first.
    let (s00, s01, s11) = (sym.0[0], 0.5 * (sym.0[1] + sym.0[2]), sym.0[3]);
    let mean = 0.5 * (s00 + s11);
    let radius = ((0.5 * (s00 - s11)).powi(2) + s01 * s01).sqrt();
    let psi = 0.5 * (2.0 * s01).atan2(s00 - s11);
    let q = Mat2::rotation(psi);
    let mut u = r.mul(&q);
    let mut v = q;
    let mut sigma = [mean + radius, mean - radius];
    // Fold eigenvalue signs into U's columns.
    for k in 0..2 {
        if sigma[k] < 0.0 {
            sigma[k] = -sigma[k];
            u.0[k] = -u.0[k];
            u.0[2 + k] = -u.0[2 + k];
        }
    }
    // Sort σ descending, permuting the matched columns of U and V together.
    if sigma[0] < sigma[1] {
        sigma.swap(0, 1);
        u = Mat2::from_cols(u.col(1), u.col(0));
        v = Mat2::from_cols(v.col(1), v.col(0));
    }
    (u, sigma, v)
}
