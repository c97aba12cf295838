//! Symmetric weight quantizers and step-size selection.
//!
//! A `b`-bit symmetric quantizer maps a weight to the level set
//! `{-(M-1)/2 .. 0 .. (M-1)/2} * delta` where `M = 2^b - 1`, so the set is
//! symmetric about zero and contains zero for every `b > 1`. The 1-bit case
//! keeps only `{-delta, +delta}`. `sign(0)` is fixed to `+1` so outputs are
//! deterministic.
//!
//! The step size `delta` is chosen per weight tensor, either scaled from the
//! standard deviation or by minimizing the L2 reconstruction error.
//! Retraining keeps a full-precision shadow copy of each weight: forward and
//! backward run on the quantized image, and the raw gradient (straight
//! through, no gating) is applied to the shadow copy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Step-size selection policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaPolicy {
    /// `delta = c_b * stddev(w)` with a per-bit coefficient table.
    #[serde(rename = "stddev")]
    StdDev,
    /// `delta = argmin ||w - Q(w)||^2`, golden-section refined.
    #[serde(rename = "l2")]
    L2Optimal,
}

/// Per-layer quantizer configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSpec {
    pub bits: u32,
    pub delta_policy: DeltaPolicy,
    /// Compute `delta` per layer (the only supported granularity; kept in
    /// the config so run files state it explicitly).
    #[serde(default = "default_true")]
    pub per_layer: bool,
    /// Skip quantization of the first and last weight tensors.
    #[serde(default)]
    pub exempt_first_last: bool,
}

fn default_true() -> bool {
    true
}

impl QuantizerSpec {
    pub fn new(bits: u32, delta_policy: DeltaPolicy) -> Self {
        QuantizerSpec { bits, delta_policy, per_layer: true, exempt_first_last: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits < 1 {
            return Err(Error::domain("quantizer bits must be >= 1".to_string()));
        }
        if self.bits > 24 {
            return Err(Error::domain(format!(
                "quantizer bits = {} exceeds the supported range (<= 24)",
                self.bits
            )));
        }
        Ok(())
    }

    /// Number of levels `M = 2^b - 1` (odd for every `b > 1`).
    pub fn levels(&self) -> u64 {
        (1u64 << self.bits) - 1
    }

    /// Levels per side, `(M - 1) / 2`.
    pub fn half_levels(&self) -> u64 {
        (self.levels() - 1) / 2
    }
}

#[inline]
fn sign_pos<E: Float>(v: E) -> E {
    if v < E::ZERO {
        -E::ONE
    } else {
        E::ONE
    }
}

/// 1-bit quantizer: `delta * sign(w)` with `sign(0) = +1`.
pub fn binarize<E: Float>(w: &Tensor<E>, delta: E) -> Result<Tensor<E>> {
    if !(delta > E::ZERO) {
        return Err(Error::domain(format!("binarize: delta must be > 0, got {delta}")));
    }
    Ok(w.map(|v| sign_pos(v) * delta))
}

/// `b`-bit symmetric quantizer: round-half-up magnitude quantization clamped
/// to `(M-1)/2` levels per side, sign restored. `bits == 1` routes to
/// [`binarize`].
pub fn quantize_b<E: Float>(w: &Tensor<E>, bits: u32, delta: E) -> Result<Tensor<E>> {
    if bits < 1 {
        return Err(Error::domain(format!("quantize_b: bits must be >= 1, got {bits}")));
    }
    if bits == 1 {
        return binarize(w, delta);
    }
    if !(delta > E::ZERO) {
        return Err(Error::domain(format!("quantize_b: delta must be > 0, got {delta}")));
    }
    let half = E::from_f64((((1u64 << bits) - 2) / 2) as f64);
    let half_point = E::from_f64(0.5);
    Ok(w.map(|v| {
        let k = (v.abs() / delta + half_point).floor().minv(half);
        if k == E::ZERO {
            // The zero level carries no sign.
            E::ZERO
        } else {
            sign_pos(v) * (delta * k)
        }
    }))
}

/// Quantize with the spec's bit width.
pub fn quantize<E: Float>(w: &Tensor<E>, spec: &QuantizerSpec, delta: E) -> Result<Tensor<E>> {
    quantize_b(w, spec.bits, delta)
}

/// `delta = c_b * stddev(w)` with `c_1 = 1.0`, `c_2 = 0.7`, `c_3 = 0.4`, and
/// `c_b = 6 / (M - 1)` for `b >= 4` (spreads +/-3 sigma across the levels).
pub fn compute_delta_stddev<E: Float>(w: &Tensor<E>, bits: u32) -> Result<E> {
    if bits < 1 {
        return Err(Error::domain(format!("compute_delta_stddev: bits must be >= 1, got {bits}")));
    }
    let sd = w.stddev();
    if sd == 0.0 {
        return Err(Error::degenerate(
            "compute_delta_stddev: weight vector has zero variance".to_string(),
        ));
    }
    let coeff = match bits {
        1 => 1.0,
        2 => 0.7,
        3 => 0.4,
        b => {
            let m = ((1u64 << b) - 1) as f64;
            6.0 / (m - 1.0)
        }
    };
    Ok(E::from_f64(coeff * sd))
}

/// Search bracket for the L2-optimal step size: `[max|w| / (10 * s), 2 max|w|]`
/// where `s` is the per-side level count (1 for `b = 1`).
pub fn l2_search_bracket<E: Float>(w: &Tensor<E>, bits: u32) -> Result<(f64, f64)> {
    let amax = w.max_abs();
    if amax == 0.0 {
        return Err(Error::degenerate(
            "compute_delta_l2: weight vector is identically zero".to_string(),
        ));
    }
    let side = if bits == 1 { 1.0 } else { (((1u64 << bits) - 2) / 2) as f64 };
    Ok((amax / (10.0 * side), 2.0 * amax))
}

/// Sum of squared reconstruction errors for a candidate step size.
pub fn l2_residual<E: Float>(w: &Tensor<E>, bits: u32, delta: f64) -> f64 {
    let side = if bits == 1 { 0.0 } else { (((1u64 << bits) - 2) / 2) as f64 };
    let mut acc = 0.0;
    for &v in w.data() {
        let v = v.to_f64();
        let q = if bits == 1 {
            if v < 0.0 {
                -delta
            } else {
                delta
            }
        } else {
            let k = ((v.abs() / delta + 0.5).floor()).min(side);
            if v < 0.0 {
                -(delta * k)
            } else {
                delta * k
            }
        };
        let d = v - q;
        acc += d * d;
    }
    acc
}

/// L2-optimal step size.
///
/// Two candidate sources, best residual wins:
/// - a 100-point scan of the bracket with golden-section refinement (to a
///   relative tolerance of 1e-4) of every local basin, each snapped onto
///   its exact optimum by a fixed-assignment least-squares polish
///   (`delta = sum(k*w) / sum(k^2)`);
/// - an exact sweep over the assignment breakpoints `|w| / (k - 0.5)`:
///   between breakpoints the level assignment is constant and the residual
///   is quadratic in `delta`, so the interval minimizer is closed-form and
///   the sweep covers every basin in the bracket.
pub fn compute_delta_l2<E: Float>(w: &Tensor<E>, bits: u32) -> Result<E> {
    if bits < 1 {
        return Err(Error::domain(format!("compute_delta_l2: bits must be >= 1, got {bits}")));
    }
    if w.stddev() == 0.0 {
        return Err(Error::degenerate(
            "compute_delta_l2: weight vector has zero variance".to_string(),
        ));
    }
    let (lo, hi) = l2_search_bracket(w, bits)?;
    const GRID: usize = 100;
    let xs: Vec<f64> =
        (0..GRID).map(|i| lo + (hi - lo) * i as f64 / (GRID - 1) as f64).collect();
    let rs: Vec<f64> = xs.iter().map(|&d| l2_residual(w, bits, d)).collect();

    let mut best_delta = xs[0];
    let mut best_res = rs[0];
    let consider = |delta: f64, res: f64, best_delta: &mut f64, best_res: &mut f64| {
        if res < *best_res {
            *best_res = res;
            *best_delta = delta;
        }
    };
    for i in 0..GRID {
        consider(xs[i], rs[i], &mut best_delta, &mut best_res);
    }
    // Refine every interior local minimum plus both endpoints.
    for i in 0..GRID {
        let is_local_min = (i == 0 || rs[i] <= rs[i - 1]) && (i == GRID - 1 || rs[i] <= rs[i + 1]);
        if !is_local_min {
            continue;
        }
        let a = if i == 0 { xs[0] } else { xs[i - 1] };
        let b = if i == GRID - 1 { xs[GRID - 1] } else { xs[i + 1] };
        let refined = golden_section(|d| l2_residual(w, bits, d), a, b, 1e-4);
        let polished = polish_fixed_assignment(w, bits, refined).clamp(lo, hi);
        for cand in [refined, polished] {
            consider(cand, l2_residual(w, bits, cand), &mut best_delta, &mut best_res);
        }
    }
    for cand in exact_breakpoint_candidates(w, bits, lo, hi) {
        consider(cand, l2_residual(w, bits, cand), &mut best_delta, &mut best_res);
    }
    Ok(E::from_f64(best_delta))
}

/// Interval minimizers of the piecewise-quadratic residual, swept from the
/// top of the bracket downward. Each breakpoint moves one weight's level
/// index up by one; within an interval the optimum is
/// `sum(k |w|) / sum(k^2)` clamped to the interval.
fn exact_breakpoint_candidates<E: Float>(
    w: &Tensor<E>,
    bits: u32,
    lo: f64,
    hi: f64,
) -> Vec<f64> {
    let side = if bits == 1 { 1u64 } else { ((1u64 << bits) - 2) / 2 };
    let mags: Vec<f64> =
        w.data().iter().map(|v| v.to_f64().abs()).filter(|&a| a > 0.0).collect();
    // (breakpoint delta, magnitude, new level index k)
    let mut events: Vec<(f64, f64, u64)> = Vec::new();
    let mut s1 = 0.0; // sum k |w|
    let mut s2 = 0.0; // sum k^2
    for &a in &mags {
        let k_init = ((a / hi + 0.5).floor() as u64).min(side);
        s1 += k_init as f64 * a;
        s2 += (k_init * k_init) as f64;
        for k in (k_init + 1)..=side {
            let delta = a / (k as f64 - 0.5);
            if delta < lo {
                break; // further breakpoints are even smaller
            }
            if delta < hi {
                events.push((delta, a, k));
            }
        }
    }
    events.sort_by(|x, y| y.0.partial_cmp(&x.0).expect("finite breakpoints"));
    let mut candidates = Vec::with_capacity(events.len() + 1);
    let mut upper = hi;
    let mut emit = |s1: f64, s2: f64, lower: f64, upper: f64| {
        if s2 > 0.0 {
            candidates.push((s1 / s2).clamp(lower, upper));
        }
    };
    for (delta, a, k) in events {
        emit(s1, s2, delta.max(lo), upper);
        s1 += a;
        s2 += (2 * k - 1) as f64;
        upper = delta;
        if upper <= lo {
            break;
        }
    }
    emit(s1, s2, lo, upper.max(lo));
    candidates
}

/// Pick `delta` for one weight tensor according to the configured policy.
pub fn compute_delta<E: Float>(w: &Tensor<E>, spec: &QuantizerSpec) -> Result<E> {
    match spec.delta_policy {
        DeltaPolicy::StdDev => compute_delta_stddev(w, spec.bits),
        DeltaPolicy::L2Optimal => compute_delta_l2(w, spec.bits),
    }
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, rel_tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - (b - a) * INV_PHI;
    let mut d = a + (b - a) * INV_PHI;
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a) > rel_tol * 0.5 * (a + b).abs() {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * INV_PHI;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * INV_PHI;
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Holding the level assignment fixed, the residual is quadratic in `delta`
/// with closed-form minimizer `sum(k_i w_i) / sum(k_i^2)` (signed levels).
/// Iterating assignment/minimizer converges in a few rounds.
fn polish_fixed_assignment<E: Float>(w: &Tensor<E>, bits: u32, mut delta: f64) -> f64 {
    let side = if bits == 1 { 0.0 } else { (((1u64 << bits) - 2) / 2) as f64 };
    for _ in 0..16 {
        let mut num = 0.0;
        let mut den = 0.0;
        for &v in w.data() {
            let v = v.to_f64();
            let k = if bits == 1 {
                if v < 0.0 {
                    -1.0
                } else {
                    1.0
                }
            } else {
                let mag = ((v.abs() / delta + 0.5).floor()).min(side);
                if v < 0.0 {
                    -mag
                } else {
                    mag
                }
            };
            num += k * v;
            den += k * k;
        }
        if den == 0.0 || num <= 0.0 {
            break;
        }
        let next = num / den;
        if (next - delta).abs() <= 1e-15 * delta.abs() {
            delta = next;
            break;
        }
        delta = next;
    }
    delta
}

/// Straight-through estimator: the gradient computed at the quantized
/// weights passes through unchanged to the shadow weights.
pub fn ste_backward<E: Float>(grad_wq: &Tensor<E>, shadow_shape: &[usize]) -> Result<Tensor<E>> {
    if grad_wq.shape() != shadow_shape {
        return Err(Error::dim(format!(
            "ste_backward: gradient shape {:?} does not match shadow shape {:?}",
            grad_wq.shape(),
            shadow_shape
        )));
    }
    Ok(grad_wq.clone())
}

/// Full-precision master weights plus their quantized image. The image is
/// regenerated from the master copy at the start of every forward pass.
#[derive(Clone, Debug)]
pub struct ShadowPair<E> {
    pub full: Tensor<E>,
    pub quantized: Tensor<E>,
}

impl<E: Float> ShadowPair<E> {
    pub fn new(full: Tensor<E>, spec: &QuantizerSpec, delta: E) -> Result<Self> {
        let quantized = quantize(&full, spec, delta)?;
        Ok(ShadowPair { full, quantized })
    }

    /// Regenerate the quantized image from the current shadow weights.
    pub fn requantize(&mut self, spec: &QuantizerSpec, delta: E) -> Result<()> {
        self.quantized = quantize(&self.full, spec, delta)?;
        Ok(())
    }

    /// Apply a gradient w.r.t. the quantized image to the shadow weights
    /// (straight through), as a plain SGD step without momentum.
    pub fn apply_grad(&mut self, grad_wq: &Tensor<E>, lr: E) -> Result<()> {
        let g = ste_backward(grad_wq, self.full.shape())?;
        for (p, &gv) in self.full.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * gv;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn binarize_sign_convention() {
        let w = Tensor::from_vec(vec![0.3f64, -0.2, 0.0]);
        let q = binarize(&w, 0.25).unwrap();
        assert_eq!(q.data(), &[0.25, -0.25, 0.25]);
        let w2 = Tensor::from_vec(vec![-5.0f64, 5.0]);
        let q2 = binarize(&w2, 1.0).unwrap();
        assert_eq!(q2.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn binarize_magnitude_is_always_delta() {
        let mut rng = Rng::new(17);
        for _ in 0..200 {
            let w = Tensor::<f64>::rand_normal(&[37], &mut rng);
            let delta: f64 = rng.uniform(0.01, 3.0);
            let q = binarize(&w, delta).unwrap();
            assert!(q.data().iter().all(|&v| (v.abs() - delta).abs() == 0.0));
        }
    }

    #[test]
    fn binarize_rejects_nonpositive_delta() {
        let w = Tensor::from_vec(vec![1.0f64]);
        assert!(matches!(binarize(&w, 0.0), Err(Error::Domain(_))));
        assert!(matches!(binarize(&w, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn quantize_b2_hand_cases() {
        // b=2: M=3, one level per side, delta=0.5.
        let w = Tensor::from_vec(vec![0.7f64, 1.8, 0.2, 0.0]);
        let q = quantize_b(&w, 2, 0.5).unwrap();
        assert_eq!(q.data(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn quantize_routes_one_bit_to_binarize() {
        let w = Tensor::from_vec(vec![0.0f64, -0.1]);
        let q = quantize_b(&w, 1, 0.5).unwrap();
        assert_eq!(q.data(), &[0.5, -0.5]);
        assert!(matches!(quantize_b(&w, 0, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn levels_are_symmetric_and_include_zero() {
        for bits in [2u32, 3, 4, 8] {
            let spec = QuantizerSpec::new(bits, DeltaPolicy::StdDev);
            assert_eq!(spec.levels() % 2, 1);
            assert_eq!(spec.half_levels() * 2 + 1, spec.levels());
        }
    }

    #[test]
    fn stddev_delta_alternating_unit_vector() {
        let w = Tensor::from_vec(vec![1.0f64, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let d: f64 = compute_delta_stddev(&w, 1).unwrap();
        assert_eq!(d, 1.0);
    }

    #[test]
    fn stddev_delta_is_homogeneous() {
        let mut rng = Rng::new(3);
        let w = Tensor::<f64>::rand_normal(&[256], &mut rng);
        let scaled = w.map(|v| v * 3.5);
        for bits in [1u32, 2, 3, 4, 8] {
            let d1: f64 = compute_delta_stddev(&w, bits).unwrap();
            let d2: f64 = compute_delta_stddev(&scaled, bits).unwrap();
            assert!((d2 / d1 - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_variance_weights_are_degenerate() {
        let w = Tensor::full(&[16], 0.25f64);
        assert!(matches!(compute_delta_stddev(&w, 2), Err(Error::Degenerate(_))));
        assert!(matches!(compute_delta_l2(&w, 2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn stddev_delta_lands_inside_l2_bracket_on_gaussians() {
        let mut rng = Rng::new(9);
        for bits in [1u32, 2, 3, 4] {
            for _ in 0..20 {
                let w = Tensor::<f64>::rand_normal(&[512], &mut rng);
                let d: f64 = compute_delta_stddev(&w, bits).unwrap();
                let (lo, hi) = l2_search_bracket(&w, bits).unwrap();
                assert!(d >= lo && d <= hi, "bits={bits} delta={d} bracket=({lo},{hi})");
            }
        }
    }

    #[test]
    fn l2_delta_exact_for_representable_weights() {
        // Weights sitting exactly on the level grid of delta0 = 0.3, b = 3.
        let delta0 = 0.3f64;
        let mut data = Vec::new();
        for k in -3i32..=3 {
            for _ in 0..8 {
                data.push(delta0 * f64::from(k));
            }
        }
        let w = Tensor::from_vec(data);
        let d: f64 = compute_delta_l2(&w, 3).unwrap();
        assert!((d - delta0).abs() < 1e-9, "delta {d}");
        assert!(l2_residual(&w, 3, d) < 1e-18);
    }

    #[test]
    fn l2_delta_one_bit_matches_mean_abs() {
        let mut rng = Rng::new(21);
        for _ in 0..20 {
            let w = Tensor::<f64>::rand_normal(&[400], &mut rng);
            let d: f64 = compute_delta_l2(&w, 1).unwrap();
            let mean_abs = w.data().iter().map(|v| v.abs()).sum::<f64>() / w.numel() as f64;
            assert!((d - mean_abs).abs() / mean_abs < 1e-3, "d={d} mean|w|={mean_abs}");
        }
    }

    #[test]
    fn ste_backward_is_identity_with_shape_check() {
        let g = Tensor::from_vec(vec![1.0f64, -2.0]);
        let out = ste_backward(&g, &[2]).unwrap();
        assert_eq!(out.data(), g.data());
        assert!(matches!(ste_backward(&g, &[3]), Err(Error::Dim(_))));
    }

    #[test]
    fn shadow_level_flip_hand_trace() {
        // One step with lr=0.1 on shadow 0.26 under b=2, delta=0.5, grad=+1:
        // the quantized image crosses from 0.5 down to 0.0.
        let spec = QuantizerSpec::new(2, DeltaPolicy::StdDev);
        let mut pair = ShadowPair::new(Tensor::scalar(0.26f64), &spec, 0.5).unwrap();
        assert_eq!(pair.quantized.item(), 0.5);
        pair.apply_grad(&Tensor::scalar(1.0), 0.1).unwrap();
        assert!((pair.full.item() - 0.16).abs() < 1e-12);
        pair.requantize(&spec, 0.5).unwrap();
        assert_eq!(pair.quantized.item(), 0.0);
    }

    #[test]
    fn shadow_loop_concentrates_on_nearest_representable_optimum() {
        // Minimize (wq - target)^2 by STE updates. For targets between two
        // levels the shadow weight hovers at the cell boundary and wq
        // dithers, spending time on each side in inverse proportion to the
        // gradient magnitude, so the level closest to the target must
        // dominate the late iterates.
        let spec = QuantizerSpec::new(2, DeltaPolicy::StdDev);
        let delta = 0.5f64;
        for target in [0.87f64, -0.6, 0.1, -0.04, 1.9] {
            let mut pair = ShadowPair::new(Tensor::scalar(0.0f64), &spec, delta).unwrap();
            let mut late: Vec<f64> = Vec::new();
            for step in 0..100 {
                pair.requantize(&spec, delta).unwrap();
                if step >= 50 {
                    late.push(pair.quantized.item());
                }
                let grad = 2.0 * (pair.quantized.item() - target);
                pair.apply_grad(&Tensor::scalar(grad), 0.05).unwrap();
            }
            // Exhaustive enumeration of the level set.
            let mut best = f64::INFINITY;
            let mut best_level = 0.0;
            for k in [-1.0f64, 0.0, 1.0] {
                let level = k * delta;
                let loss = (level - target) * (level - target);
                if loss < best - 1e-12 || (loss < best + 1e-12 && level.abs() > best_level.abs())
                {
                    best = loss;
                    best_level = level;
                }
            }
            let hits = late.iter().filter(|&&v| v == best_level).count();
            assert!(
                hits * 2 > late.len(),
                "target {target}: level {best_level} seen {hits}/{} late steps",
                late.len()
            );
        }
    }
}
