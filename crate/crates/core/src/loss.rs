//! Image-space objective: multi-scale MSE, D-SSIM, parameter regularizer,
//! and a pluggable perceptual slot, each with hand-derived gradients.
//!
//! All image terms operate on canvases in [0, 1] intensity and return both
//! the scalar value and `∂term/∂render` as a flat pixel buffer. The
//! regularizer acts on materialized map parameters (singular values and
//! offsets) and returns gradients with respect to those quantities; the
//! gradient engine chains them through the activations.
//!
//! SSIM windows are Gaussian (11×11, σ = 1.5) with border renormalization:
//! near edges the window weights are rescaled to sum to one over the
//! in-bounds taps, which keeps the constant-image closed form exact
//! everywhere instead of shading borders toward zero.

use crate::canvas::Canvas;
use crate::error::{Error, Result};
use crate::ifs::MaterializedMap;

/// Relative weights of the objective terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Multi-scale MSE weight.
    pub mse: f64,
    /// D-SSIM weight.
    pub ssim: f64,
    /// Perceptual-plugin weight (term is 0 when no plugin is registered).
    pub lpips: f64,
    /// Regularizer weight.
    pub reg: f64,
    /// Weight of the condition-number term *inside* the regularizer.
    pub cond: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mse: 10.0,
            ssim: 1.0,
            lpips: 2.0,
            reg: 1e-2,
            cond: 10.0,
        }
    }
}

/// Scalar values of each objective term plus their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse_ms: f64,
    pub dssim: f64,
    pub perceptual: f64,
    pub reg: f64,
}

/// Gradient of the regularizer for one map, with respect to its
/// materialized singular values and offset.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegularizerGradient {
    pub d_sigma: [f64; 2],
    pub d_offset: [f64; 2],
}

/// Optional perceptual term. Implementations return the scalar value and
/// `∂value/∂render` (flat, render-sized); errors are surfaced as
/// [`Error::PerceptualPlugin`].
pub trait PerceptualLoss {
    fn evaluate(
        &self,
        render: &Canvas,
        target: &Canvas,
    ) -> std::result::Result<(f64, Vec<f64>), String>;
}

/// Everything the optimizer needs from one objective evaluation.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    /// ∂total/∂render pixel (weighted sum of the image-term gradients).
    pub d_render: Vec<f64>,
    /// ∂total/∂(σ, b) per map — the regularizer path, already scaled by
    /// its weight. The σ and b here are the *materialized* values; the
    /// gradient engine applies the sigmoid/tanh factors.
    pub d_maps: Vec<RegularizerGradient>,
}

fn require_same_shape(r: &Canvas, i: &Canvas) -> Result<()> {
    if r.width() != i.width() || r.height() != i.height() {
        return Err(Error::ShapeMismatch(format!(
            "render is {}×{}, target is {}×{}",
            r.width(),
            r.height(),
            i.width(),
            i.height()
        )));
    }
    Ok(())
}

/// Plain single-scale mean-squared error (no gradient; this is the
/// annealing energy).
pub fn mse(r: &Canvas, i: &Canvas) -> Result<f64> {
    require_same_shape(r, i)?;
    let n = r.pixels.len() as f64;
    Ok(r.pixels
        .iter()
        .zip(&i.pixels)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Builds the average-pool pyramid: level 0 is the input, each level halves
/// the side, down to 1×1.
pub fn build_pyramid(img: &Canvas) -> Result<Vec<Canvas>> {
    let side = img.width();
    if img.height() != side || !side.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "pyramid needs a square power-of-two canvas, got {}×{}",
            img.width(),
            img.height()
        )));
    }
    let mut levels = vec![img.clone()];
    while levels.last().expect("non-empty").width() > 1 {
        levels.push(levels.last().expect("non-empty").downsample(2)?);
    }
    Ok(levels)
}

/// Sum over pyramid levels of the per-level pixel-mean squared error.
/// Returns the scalar and its gradient with respect to the level-0 render.
pub fn multiscale_mse(r: &Canvas, i: &Canvas) -> Result<(f64, Vec<f64>)> {
    require_same_shape(r, i)?;
    let pr = build_pyramid(r)?;
    let pi = build_pyramid(i)?;
    let mut total = 0.0;
    let mut diffs: Vec<Vec<f64>> = Vec::with_capacity(pr.len());
    for (lr, li) in pr.iter().zip(&pi) {
        let diff: Vec<f64> = lr
            .pixels
            .iter()
            .zip(&li.pixels)
            .map(|(a, b)| a - b)
            .collect();
        total += diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        diffs.push(diff);
    }
    // Coarse-to-fine adjoint: the 2×2 average pool spreads each parent's
    // gradient equally (×1/4) over its children, then the level's own
    // residual term joins.
    let mut grad = vec![0.0f64; 1];
    for (level, diff) in diffs.iter().enumerate().rev() {
        let side = pr[level].width();
        if grad.len() != side * side {
            let half = side / 2;
            let mut up = vec![0.0f64; side * side];
            for y in 0..side {
                let row = &grad[(y / 2) * half..];
                for (x, u) in up[y * side..(y + 1) * side].iter_mut().enumerate() {
                    *u = row[x / 2] * 0.25;
                }
            }
            grad = up;
        }
        let scale = 2.0 / diff.len() as f64;
        for (g, d) in grad.iter_mut().zip(diff) {
            *g += scale * d;
        }
    }
    Ok((total, grad))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (idx, tap) in k.iter_mut().enumerate() {
        let d = idx as f64 - mid;
        *tap = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *tap;
    }
    for tap in &mut k {
        *tap /= sum;
    }
    k
}

/// Separable zero-padded correlation with the SSIM window (no border
/// renormalization — callers divide by the blurred all-ones field).
fn blur_plain(src: &[f64], width: usize, height: usize) -> Vec<f64> {
    let k = ssim_kernel();
    let half = SSIM_WINDOW / 2;
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for (x, out) in tmp[y * width..(y + 1) * width].iter_mut().enumerate() {
            let mut acc = 0.0;
            let lo = x.saturating_sub(half);
            let hi = (x + half).min(width - 1);
            for t in lo..=hi {
                acc += row[t] * k[t + half - x];
            }
            *out = acc;
        }
    }
    let mut dst = vec![0.0f64; src.len()];
    for y in 0..height {
        let lo = y.saturating_sub(half);
        let hi = (y + half).min(height - 1);
        for x in 0..width {
            let mut acc = 0.0;
            for t in lo..=hi {
                acc += tmp[t * width + x] * k[t + half - y];
            }
            dst[y * width + x] = acc;
        }
    }
    dst
}

/// Structural dissimilarity `(1 − SSIM)/2` with gradient with respect to
/// the render. SSIM uses Gaussian windows with border renormalization and
/// the standard stabilizers on a dynamic range of 1.
pub fn dssim(r: &Canvas, i: &Canvas) -> Result<(f64, Vec<f64>)> {
    require_same_shape(r, i)?;
    let (w, h) = (r.width(), r.height());
    let n = w * h;
    let x = &r.pixels;
    let y = &i.pixels;

    let z = blur_plain(&vec![1.0; n], w, h);
    let norm = |f: Vec<f64>| -> Vec<f64> { f.iter().zip(&z).map(|(v, z)| v / z).collect() };
    let mu_x = norm(blur_plain(x, w, h));
    let mu_y = norm(blur_plain(y, w, h));
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a * b).collect();
    let e_xx = norm(blur_plain(&xx, w, h));
    let e_yy = norm(blur_plain(&yy, w, h));
    let e_xy = norm(blur_plain(&xy, w, h));

    let mut ssim_sum = 0.0;
    // Per-window partials: alpha = ∂S/∂μx, beta = ∂S/∂var_x,
    // gamma = ∂S/∂cov_xy (holding the other stats fixed).
    let mut alpha = vec![0.0f64; n];
    let mut beta = vec![0.0f64; n];
    let mut gamma = vec![0.0f64; n];
    for p in 0..n {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let var_x = e_xx[p] - mx * mx;
        let var_y = e_yy[p] - my * my;
        let cov = e_xy[p] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let b1 = mx * mx + my * my + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b2 = var_x + var_y + SSIM_C2;
        ssim_sum += (a1 * a2) / (b1 * b2);
        alpha[p] = 2.0 * a2 * (my * b1 - mx * a1) / (b1 * b1 * b2);
        beta[p] = -a1 * a2 / (b1 * b2 * b2);
        gamma[p] = 2.0 * a1 / (b1 * b2);
    }
    let value = (1.0 - ssim_sum / n as f64) / 2.0;

    // The adjoint of a renormalized blur is a plain blur of field/Z. A
    // pixel q feeds window p through μx (weight w), var_x (2w(x_q − μx)),
    // and cov (w(y_q − μy)); collecting terms gives three blurs.
    let field0: Vec<f64> = (0..n)
        .map(|p| (alpha[p] - 2.0 * beta[p] * mu_x[p] - gamma[p] * mu_y[p]) / z[p])
        .collect();
    let beta_z: Vec<f64> = (0..n).map(|p| beta[p] / z[p]).collect();
    let gamma_z: Vec<f64> = (0..n).map(|p| gamma[p] / z[p]).collect();
    let t0 = blur_plain(&field0, w, h);
    let t1 = blur_plain(&beta_z, w, h);
    let t2 = blur_plain(&gamma_z, w, h);
    let scale = -0.5 / n as f64; // d/dS of (1 − mean S)/2
    let grad: Vec<f64> = (0..n)
        .map(|q| scale * (t0[q] + 2.0 * x[q] * t1[q] + y[q] * t2[q]))
        .collect();
    Ok((value, grad))
}

/// Parameter regularizer: squared singular values, squared offset norm,
/// and a condition-number surrogate `((σ_hi+1)/(σ_lo+1) − 1)²` per map,
/// with the singular values sorted descending before the ratio.
pub fn regularizer(
    maps: &[MaterializedMap],
    cond_weight: f64,
) -> (f64, Vec<RegularizerGradient>) {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(maps.len());
    for m in maps {
        let s = [m.sigma1, m.sigma2];
        let b = m.offset;
        total += s[0] * s[0] + s[1] * s[1] + b[0] * b[0] + b[1] * b[1];
        let mut g = RegularizerGradient {
            d_sigma: [2.0 * s[0], 2.0 * s[1]],
            d_offset: [2.0 * b[0], 2.0 * b[1]],
        };
        let (hi, lo) = if s[0] >= s[1] { (0, 1) } else { (1, 0) };
        let ratio = (s[hi] + 1.0) / (s[lo] + 1.0);
        total += cond_weight * (ratio - 1.0) * (ratio - 1.0);
        let dr = 2.0 * cond_weight * (ratio - 1.0);
        g.d_sigma[hi] += dr / (s[lo] + 1.0);
        g.d_sigma[lo] -= dr * (s[hi] + 1.0) / ((s[lo] + 1.0) * (s[lo] + 1.0));
        grads.push(g);
    }
    (total, grads)
}

/// Combines all terms with their weights. Returns the breakdown, the
/// gradient with respect to the render, and the regularizer gradients
/// with respect to each map's (σ, b).
pub fn total_loss(
    render: &Canvas,
    target: &Canvas,
    maps: &[MaterializedMap],
    weights: &LossWeights,
    plugin: Option<&dyn PerceptualLoss>,
) -> Result<LossOutput> {
    require_same_shape(render, target)?;
    let (mse_ms, g_mse) = multiscale_mse(render, target)?;
    let (dssim_v, g_dssim) = dssim(render, target)?;
    let (reg, reg_grads) = regularizer(maps, weights.cond);
    let (perceptual, g_perc) = match plugin {
        Some(p) => {
            let (v, g) = p
                .evaluate(render, target)
                .map_err(Error::PerceptualPlugin)?;
            if g.len() != render.pixels.len() {
                return Err(Error::PerceptualPlugin(format!(
                    "gradient has {} entries for a {}-pixel render",
                    g.len(),
                    render.pixels.len()
                )));
            }
            (v, Some(g))
        }
        None => (0.0, None),
    };

    let total = weights.mse * mse_ms
        + weights.ssim * dssim_v
        + weights.lpips * perceptual
        + weights.reg * reg;
    let mut d_render: Vec<f64> = g_mse
        .iter()
        .zip(&g_dssim)
        .map(|(a, b)| weights.mse * a + weights.ssim * b)
        .collect();
    if let Some(g) = g_perc {
        for (d, p) in d_render.iter_mut().zip(&g) {
            *d += weights.lpips * p;
        }
    }
    let d_maps = reg_grads
        .iter()
        .map(|g| RegularizerGradient {
            d_sigma: [weights.reg * g.d_sigma[0], weights.reg * g.d_sigma[1]],
            d_offset: [weights.reg * g.d_offset[0], weights.reg * g.d_offset[1]],
        })
        .collect();
    Ok(LossOutput {
        breakdown: LossBreakdown {
            total,
            mse_ms,
            dssim: dssim_v,
            perceptual,
            reg,
        },
        d_render,
        d_maps,
    })
}

/// Sum of squared differences of mass-normalized raw image moments
/// `m_pq` for `p + q ≤ order`, with pixel centers mapped to the unit
/// square (image coordinates, y down) and intensity as mass.
/// Returns the scalar and its gradient with respect to the first canvas.
pub fn moment_loss(r: &Canvas, i: &Canvas, order: usize) -> Result<(f64, Vec<f64>)> {
    require_same_shape(r, i)?;
    let moments = |c: &Canvas| -> Result<(Vec<f64>, f64)> {
        let mass: f64 = c.pixels.iter().sum();
        if mass <= 0.0 {
            return Err(Error::InvalidArgument(
                "moment loss needs positive total intensity (zero mass image)".into(),
            ));
        }
        let mut m = Vec::new();
        for p in 0..=order {
            for q in 0..=(order - p) {
                let mut acc = 0.0;
                for row in 0..c.height() {
                    let yc = (row as f64 + 0.5) / c.height() as f64;
                    let yq = yc.powi(q as i32);
                    for col in 0..c.width() {
                        let xc = (col as f64 + 0.5) / c.width() as f64;
                        acc += c.pixels[row * c.width() + col] * xc.powi(p as i32) * yq;
                    }
                }
                m.push(acc / mass);
            }
        }
        Ok((m, mass))
    };
    let (mr, mass_r) = moments(r)?;
    let (mi, _) = moments(i)?;
    let value: f64 = mr.iter().zip(&mi).map(|(a, b)| (a - b) * (a - b)).sum();
    // ∂m̂_pq/∂R_k = (x^p y^q − m̂_pq)/mass.
    let mut grad = vec![0.0f64; r.pixels.len()];
    let mut term = 0usize;
    for p in 0..=order {
        for q in 0..=(order - p) {
            let coeff = 2.0 * (mr[term] - mi[term]) / mass_r;
            for row in 0..r.height() {
                let yc = (row as f64 + 0.5) / r.height() as f64;
                let yq = yc.powi(q as i32);
                for col in 0..r.width() {
                    let xc = (col as f64 + 0.5) / r.width() as f64;
                    grad[row * r.width() + col] +=
                        coeff * (xc.powi(p as i32) * yq - mr[term]);
                }
            }
            term += 1;
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ifs::Mat2;
    use crate::rng::{self, Domain};
    use approx::assert_abs_diff_eq;

    fn random_canvas(side: usize, seed: u64) -> Canvas {
        let pixels = (0..side * side)
            .map(|i| rng::draw_unit(seed, Domain::SuiteCode, 0, i as u64))
            .collect();
        Canvas::from_pixels(side, side, pixels).unwrap()
    }

    fn check_fd(
        value_and_grad: impl Fn(&Canvas) -> (f64, Vec<f64>),
        base: &Canvas,
        h: f64,
        rel_tol: f64,
    ) {
        let (_, grad) = value_and_grad(base);
        for idx in 0..base.pixels.len() {
            let mut plus = base.clone();
            plus.pixels[idx] += h;
            let mut minus = base.clone();
            minus.pixels[idx] -= h;
            let fd = (value_and_grad(&plus).0 - value_and_grad(&minus).0) / (2.0 * h);
            let err = (grad[idx] - fd).abs();
            assert!(
                err <= 1e-6 + rel_tol * fd.abs(),
                "pixel {idx}: analytic {} vs fd {fd}",
                grad[idx]
            );
        }
    }

    #[test]
    fn pyramid_depth_and_constants() {
        let img = Canvas::from_pixels(1024, 1024, vec![0.37; 1024 * 1024]).unwrap();
        let levels = build_pyramid(&img).unwrap();
        assert_eq!(levels.len(), 11);
        for level in &levels {
            for &p in &level.pixels {
                assert_abs_diff_eq!(p, 0.37, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pyramid_preserves_means() {
        let img = random_canvas(32, 7);
        let mean0 = img.mean();
        for level in build_pyramid(&img).unwrap() {
            assert_abs_diff_eq!(level.mean(), mean0, epsilon = 1e-9);
        }
    }

    #[test]
    fn pyramid_rejects_bad_geometry() {
        let rect = Canvas::zeros(8, 4, 1);
        assert!(build_pyramid(&rect).is_err());
        let odd = Canvas::zeros(12, 12, 1);
        assert!(build_pyramid(&odd).is_err());
    }

    #[test]
    fn multiscale_mse_of_identical_images_is_zero() {
        let img = random_canvas(16, 3);
        let (v, g) = multiscale_mse(&img, &img).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn multiscale_mse_counts_one_per_level() {
        let ones = Canvas::from_pixels(1024, 1024, vec![1.0; 1024 * 1024]).unwrap();
        let zeros = Canvas::zeros(1024, 1024, 1);
        let (v, _) = multiscale_mse(&ones, &zeros).unwrap();
        assert_abs_diff_eq!(v, 11.0, epsilon = 1e-9);
    }

    #[test]
    fn multiscale_mse_gradient_matches_finite_differences() {
        let r = random_canvas(16, 11);
        let i = random_canvas(16, 12);
        check_fd(
            |c| multiscale_mse(c, &i).unwrap(),
            &r,
            1e-4,
            1e-3,
        );
    }

    #[test]
    fn dssim_of_identical_images_is_zero_with_zero_gradient() {
        let img = random_canvas(16, 5);
        let (v, g) = dssim(&img, &img).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        for x in g {
            assert!(x.abs() < 1e-12);
        }
    }

    #[test]
    fn dssim_matches_constant_image_closed_form() {
        let a = 0.3;
        let b = 0.7;
        let r = Canvas::from_pixels(32, 32, vec![a; 1024]).unwrap();
        let i = Canvas::from_pixels(32, 32, vec![b; 1024]).unwrap();
        let ssim = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        let (v, _) = dssim(&r, &i).unwrap();
        assert_abs_diff_eq!(v, (1.0 - ssim) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn dssim_of_inverted_checkerboard_is_large() {
        let side = 32;
        let pixels: Vec<f64> = (0..side * side)
            .map(|i| ((i / side + i % side) % 2) as f64)
            .collect();
        let i = Canvas::from_pixels(side, side, pixels.clone()).unwrap();
        let r = Canvas::from_pixels(side, side, pixels.iter().map(|p| 1.0 - p).collect())
            .unwrap();
        let (v, _) = dssim(&r, &i).unwrap();
        assert!(v > 0.4, "inverted checkerboard dssim = {v}");
    }

    #[test]
    fn dssim_gradient_matches_finite_differences() {
        let r = random_canvas(16, 21);
        let i = random_canvas(16, 22);
        check_fd(|c| dssim(c, &i).unwrap(), &r, 1e-4, 1e-3);
    }

    fn map_with(sigma: [f64; 2], offset: [f64; 2]) -> MaterializedMap {
        MaterializedMap {
            linear: Mat2([sigma[0], 0.0, 0.0, sigma[1]]),
            offset,
            sigma1: sigma[0],
            sigma2: sigma[1],
        }
    }

    #[test]
    fn regularizer_matches_hand_computed_values() {
        let (v, _) = regularizer(&[map_with([0.5, 0.5], [0.0, 0.0])], 10.0);
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
        let (v, _) = regularizer(&[map_with([0.9, 0.1], [0.0, 0.0])], 10.0);
        assert_abs_diff_eq!(v, 6.109256198347107, epsilon = 1e-9);
        let (v, _) = regularizer(&[map_with([0.0, 0.0], [0.0, 0.0])], 10.0);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn regularizer_condition_term_is_order_invariant_and_zero_iff_equal() {
        let (a, _) = regularizer(&[map_with([0.9, 0.1], [0.2, -0.3])], 10.0);
        let (b, _) = regularizer(&[map_with([0.1, 0.9], [0.2, -0.3])], 10.0);
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        let (eq, _) = regularizer(&[map_with([0.4, 0.4], [0.0, 0.0])], 10.0);
        assert_abs_diff_eq!(eq, 0.32, epsilon = 1e-12); // norms only, no ratio term
        let (ne, _) = regularizer(&[map_with([0.5, 0.4], [0.0, 0.0])], 10.0);
        assert!(ne > 0.25 + 0.16 + 1e-4);
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        let h = 1e-6;
        let base = map_with([0.7, 0.2], [0.3, -0.6]);
        let (_, grads) = regularizer(&[base], 10.0);
        let g = grads[0];
        let eval = |s: [f64; 2], b: [f64; 2]| regularizer(&[map_with(s, b)], 10.0).0;
        for axis in 0..2 {
            let mut sp = [base.sigma1, base.sigma2];
            let mut sm = sp;
            sp[axis] += h;
            sm[axis] -= h;
            let fd = (eval(sp, base.offset) - eval(sm, base.offset)) / (2.0 * h);
            assert_abs_diff_eq!(g.d_sigma[axis], fd, epsilon = 1e-6);
            let mut bp = base.offset;
            let mut bm = base.offset;
            bp[axis] += h;
            bm[axis] -= h;
            let fd = (eval([base.sigma1, base.sigma2], bp)
                - eval([base.sigma1, base.sigma2], bm))
                / (2.0 * h);
            assert_abs_diff_eq!(g.d_offset[axis], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn total_loss_is_zero_for_perfect_render_and_zero_maps() {
        let img = random_canvas(16, 9);
        let maps = [map_with([0.0, 0.0], [0.0, 0.0])];
        let out = total_loss(&img, &img, &maps, &LossWeights::default(), None).unwrap();
        assert_abs_diff_eq!(out.breakdown.total, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_respects_weights() {
        let r = random_canvas(16, 31);
        let i = random_canvas(16, 32);
        let maps = [map_with([0.6, 0.3], [0.1, 0.2])];
        let zero = LossWeights {
            mse: 0.0,
            ssim: 0.0,
            lpips: 0.0,
            reg: 0.0,
            cond: 0.0,
        };
        let out = total_loss(&r, &i, &maps, &zero, None).unwrap();
        assert_eq!(out.breakdown.total, 0.0);
        assert!(out.d_render.iter().all(|&g| g == 0.0));

        let w = LossWeights::default();
        let out = total_loss(&r, &i, &maps, &w, None).unwrap();
        let b = out.breakdown;
        let recombined =
            w.mse * b.mse_ms + w.ssim * b.dssim + w.lpips * b.perceptual + w.reg * b.reg;
        assert_abs_diff_eq!(b.total, recombined, epsilon = 1e-9);
        assert!(b.mse_ms >= 0.0 && b.dssim >= 0.0 && b.reg >= 0.0);
    }

    struct FixedPlugin {
        value: f64,
        fail: bool,
    }

    impl PerceptualLoss for FixedPlugin {
        fn evaluate(
            &self,
            render: &Canvas,
            _target: &Canvas,
        ) -> std::result::Result<(f64, Vec<f64>), String> {
            if self.fail {
                return Err("backend unavailable".into());
            }
            Ok((self.value, vec![0.1; render.pixels.len()]))
        }
    }

    #[test]
    fn perceptual_plugin_feeds_the_weighted_sum() {
        let img = random_canvas(8, 41);
        let maps: [MaterializedMap; 0] = [];
        let plugin = FixedPlugin {
            value: 0.5,
            fail: false,
        };
        let w = LossWeights::default();
        let out = total_loss(&img, &img, &maps, &w, Some(&plugin)).unwrap();
        assert_abs_diff_eq!(out.breakdown.perceptual, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.breakdown.total, 2.0 * 0.5, epsilon = 1e-12);
        for g in &out.d_render {
            assert_abs_diff_eq!(*g, 2.0 * 0.1, epsilon = 1e-12);
        }

        let failing = FixedPlugin {
            value: 0.0,
            fail: true,
        };
        assert!(matches!(
            total_loss(&img, &img, &maps, &w, Some(&failing)),
            Err(Error::PerceptualPlugin(_))
        ));
    }

    #[test]
    fn moment_loss_basics() {
        let img = random_canvas(8, 51);
        let (v, g) = moment_loss(&img, &img, 4).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));

        // Unit masses at opposite corners of a 2×2 canvas; moments are
        // powers of the pixel centers (0.25, 0.25) and (0.75, 0.75).
        let r = Canvas::from_pixels(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let i = Canvas::from_pixels(2, 2, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let (v, _) = moment_loss(&r, &i, 2).unwrap();
        assert_abs_diff_eq!(v, 1.25, epsilon = 1e-12);
    }

    #[test]
    fn moment_loss_sees_translation_in_first_order() {
        let side = 16;
        let mut a = Canvas::zeros(side, side, 1);
        let mut b = Canvas::zeros(side, side, 1);
        // Same 2×2 blob, offset by (4, 2) pixels.
        for (dy, dx) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
            a.set(3 + dx, 5 + dy, 1.0);
            b.set(7 + dx, 7 + dy, 1.0);
        }
        let (v, _) = moment_loss(&a, &b, 1).unwrap();
        let dx = 4.0 / side as f64;
        let dy = 2.0 / side as f64;
        assert_abs_diff_eq!(v, dx * dx + dy * dy, epsilon = 1e-12);
    }

    #[test]
    fn moment_loss_rejects_zero_mass() {
        let z = Canvas::zeros(4, 4, 1);
        let img = random_canvas(4, 61);
        assert!(moment_loss(&z, &img, 2).is_err());
        assert!(moment_loss(&img, &z, 2).is_err());
    }

    #[test]
    fn moment_loss_gradient_matches_finite_differences() {
        let mut r = random_canvas(8, 71);
        for p in &mut r.pixels {
            *p += 0.05; // keep the mass comfortably positive under FD nudges
        }
        let i = random_canvas(8, 72);
        check_fd(|c| moment_loss(c, &i, 3).unwrap(), &r, 1e-5, 1e-3);
    }
}
