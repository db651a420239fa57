//! Measurement instruments: statistics spread across channels, gradient
//! reduction terms and their exactness residuals, Hessian structure probes,
//! channel-statistics propagation, and underrepresented-channel rates.
//!
//! Everything here is a pure reader. Diagnostics take snapshots (tensors,
//! gradients, running statistics) and return numbers; they never touch
//! tapes, parameters, or RNG streams, so enabling them cannot change a
//! training trajectory.

use crate::error::{Error, Result};
use crate::reparam::{row_view, StandardizedWeight};
use crate::tensor::{conv2d_reference, finite_diff_hessian, Tensor};

/// Per-layer, per-step diagnostics row as exported to the metrics sink.
/// Fields that were not sampled at this step stay `None`/empty.
#[derive(Clone, Debug, serde::Serialize)]
pub struct DiagnosticsRecord {
    pub layer: usize,
    pub step: usize,
    /// (1/I)⟨ŵ_c, ∇_ŵ⟩² averaged over rows c.
    pub term_ws: f64,
    /// (1/I)⟨1, ∇_ŵ⟩² averaged over rows c.
    pub term_mean: f64,
    /// σ_c²‖∇_w‖² averaged over rows c.
    pub term_total: f64,
    /// Residual of the divide-stage norm identity (absolute, averaged).
    pub r1: f64,
    /// Residual of the center-stage norm identity (absolute, averaged).
    pub r2: f64,
    /// Residuals relative to the mean squared upstream gradient.
    pub r1_rel: f64,
    pub r2_rel: f64,
    /// StatDiff per channel group (empty when not sampled this step).
    pub statdiff: Vec<f64>,
    pub underrep_rate: Option<f64>,
}

// ---------------------------------------------------------------------------
// StatDiff

/// Per-group statistical difference: population std of the channel means
/// divided by the mean of the channel stds, for each group of channels.
///
/// Zero when every channel in the group shares the same mean; grows as the
/// channels drift apart. Scale-invariant: scaling all means and stds in a
/// group by k > 0 leaves it unchanged.
pub fn statdiff(channel_means: &[f64], channel_stds: &[f64], groups: usize) -> Result<Vec<f64>> {
    let c = channel_means.len();
    if channel_stds.len() != c {
        return Err(Error::ShapeMismatch {
            context: "statdiff",
            expected: format!("{c} stds"),
            got: format!("{}", channel_stds.len()),
        });
    }
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "statdiff: {groups} groups do not divide {c} channels"
        )));
    }
    let per = c / groups;
    let mut out = Vec::with_capacity(groups);
    for g in 0..groups {
        let means = &channel_means[g * per..(g + 1) * per];
        let stds = &channel_stds[g * per..(g + 1) * per];
        let denom = stds.iter().sum::<f64>() / per as f64;
        if denom == 0.0 {
            return Err(Error::ConstraintViolated(format!(
                "statdiff: group {g} has zero mean of stds"
            )));
        }
        let mu = means.iter().sum::<f64>() / per as f64;
        let var = means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / per as f64;
        out.push(var.sqrt() / denom);
    }
    Ok(out)
}

/// Running per-channel mean/std tracker feeding [`statdiff`]. Updated with
/// an EMA over batches; the first update copies the batch statistics so the
/// arbitrary (0, 1) prior never enters the ratio.
#[derive(Clone, Debug)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub momentum: f64,
    seen: bool,
}

impl ChannelStats {
    pub fn new(channels: usize, momentum: f64) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![0.0; channels],
            momentum,
            seen: false,
        }
    }

    pub fn initialized(&self) -> bool {
        self.seen
    }

    /// Folds one batch `[b, c, h, w]` of activations into the running
    /// statistics.
    pub fn update(&mut self, x: &Tensor) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.mean.len() {
            return Err(Error::ShapeMismatch {
                context: "channel stats update",
                expected: format!("[b, {}, h, w]", self.mean.len()),
                got: format!("{shape:?}"),
            });
        }
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let n = (b * hw) as f64;
        let data = x.data();
        for ch in 0..c {
            let mut sum = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                for i in 0..hw {
                    sum += data[base + i];
                }
            }
            let mu = sum / n;
            let mut var = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                for i in 0..hw {
                    let d = data[base + i] - mu;
                    var += d * d;
                }
            }
            let sd = (var / n).sqrt();
            if self.seen {
                let m = self.momentum;
                self.mean[ch] += m * (mu - self.mean[ch]);
                self.std[ch] += m * (sd - self.std[ch]);
            } else {
                self.mean[ch] = mu;
                self.std[ch] = sd;
            }
        }
        self.seen = true;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gradient reduction terms

/// The three components the squared upstream gradient splits into under
/// weight standardization, plus the residuals of the two identities that
/// guarantee the split is exact.
///
/// Per row c with I columns, ŵ the standardized row, g = ∇_ŵ, σ the row
/// std, ∇_ẇ the gradient after the divide stage and ∇_w after centering:
///
/// ```text
/// ‖g‖² = σ²‖∇_w‖² + (1/I)⟨1, g⟩² + (1/I)⟨ŵ, g⟩²
///        (term_total)  (term_mean)    (term_ws)
/// ```
///
/// `r1` checks the divide stage: σ²‖∇_ẇ‖² + (1/I)⟨ŵ, g⟩² − ‖g‖².
/// `r2` checks centering: ‖∇_w‖² − ‖∇_ẇ‖² + (1/(Iσ²))⟨1, g⟩².
/// Both are algebraic identities, so the residuals sit at rounding noise;
/// a denominator padding ε contributes a bias of order ε/σ², negligible at
/// the 64-bit default.
#[derive(Clone, Copy, Debug)]
pub struct GradReductionTerms {
    pub term_ws: f64,
    pub term_mean: f64,
    pub term_total: f64,
    /// Mean over rows of ‖∇_ŵ‖², denominator for the relative residuals.
    pub grad_w_hat_sq: f64,
    pub r1: f64,
    pub r2: f64,
}

impl GradReductionTerms {
    pub fn r1_rel(&self) -> f64 {
        self.r1 / self.grad_w_hat_sq.max(f64::MIN_POSITIVE)
    }

    pub fn r2_rel(&self) -> f64 {
        self.r2 / self.grad_w_hat_sq.max(f64::MIN_POSITIVE)
    }

    /// Share of the squared gradient removed by the divide stage.
    pub fn fraction_ws(&self) -> f64 {
        let total = self.term_ws + self.term_mean + self.term_total;
        if total == 0.0 {
            0.0
        } else {
            self.term_ws / total
        }
    }
}

/// Computes [`GradReductionTerms`] from a standardized weight snapshot
/// (values and per-row stds) and the gradient that arrived at it.
pub fn grad_reduction_terms(
    w_hat: &Tensor,
    row_std: &[f64],
    grad_w_hat: &Tensor,
) -> Result<GradReductionTerms> {
    if grad_w_hat.shape() != w_hat.shape() {
        return Err(Error::ShapeMismatch {
            context: "grad_reduction_terms",
            expected: format!("{:?}", w_hat.shape()),
            got: format!("{:?}", grad_w_hat.shape()),
        });
    }
    let (rows, cols) = row_view(w_hat.shape())?;
    if row_std.len() != rows {
        return Err(Error::ShapeMismatch {
            context: "grad_reduction_terms",
            expected: format!("{rows} row stds"),
            got: format!("{}", row_std.len()),
        });
    }
    let i_f = cols as f64;
    let mut acc = GradReductionTerms {
        term_ws: 0.0,
        term_mean: 0.0,
        term_total: 0.0,
        grad_w_hat_sq: 0.0,
        r1: 0.0,
        r2: 0.0,
    };
    for r in 0..rows {
        let wh = &w_hat.data()[r * cols..(r + 1) * cols];
        let g = &grad_w_hat.data()[r * cols..(r + 1) * cols];
        let sigma = row_std[r];
        let dot_w: f64 = wh.iter().zip(g).map(|(a, b)| a * b).sum();
        let dot_one: f64 = g.iter().sum();
        let g_sq: f64 = g.iter().map(|v| v * v).sum();

        // Divide stage: ∇_ẇ = (g − (dot_w/I) ŵ) / σ.
        let g_dot: Vec<f64> = wh
            .iter()
            .zip(g)
            .map(|(w, gv)| (gv - dot_w / i_f * w) / sigma)
            .collect();
        let g_dot_sq: f64 = g_dot.iter().map(|v| v * v).sum();
        // Center stage: ∇_w = ∇_ẇ − mean(∇_ẇ).
        let g_dot_mean = g_dot.iter().sum::<f64>() / i_f;
        let g_w_sq: f64 = g_dot.iter().map(|v| (v - g_dot_mean) * (v - g_dot_mean)).sum();

        acc.term_ws += dot_w * dot_w / i_f;
        acc.term_mean += dot_one * dot_one / i_f;
        acc.term_total += sigma * sigma * g_w_sq;
        acc.grad_w_hat_sq += g_sq;
        acc.r1 += (sigma * sigma * g_dot_sq + dot_w * dot_w / i_f - g_sq).abs();
        acc.r2 += (g_w_sq - g_dot_sq + dot_one * dot_one / (i_f * sigma * sigma)).abs();
    }
    let n = rows as f64;
    acc.term_ws /= n;
    acc.term_mean /= n;
    acc.term_total /= n;
    acc.grad_w_hat_sq /= n;
    acc.r1 /= n;
    acc.r2 /= n;
    Ok(acc)
}

/// Convenience wrapper over a value-level standardized layer.
pub fn grad_reduction_for_layer(
    layer: &StandardizedWeight,
    grad_w_hat: &Tensor,
) -> Result<GradReductionTerms> {
    grad_reduction_terms(&layer.standardized, &layer.row_std, grad_w_hat)
}

// ---------------------------------------------------------------------------
// Hessian structure

/// Outcome of one Hessian probe; `h_dot` is the Hessian of the loss in the
/// centered weight, `h` the Hessian pulled back through centering.
#[derive(Clone, Copy, Debug)]
pub struct HessianReport {
    pub len: usize,
    /// ΣΣ H — must be 0: centering projects out the all-ones direction.
    pub sum_h: f64,
    /// Worst |Σ_j H[i][j]| over rows i; zero for the same reason.
    pub max_row_sum: f64,
    /// Worst |Σ_i H[i][j]| over columns j.
    pub max_col_sum: f64,
    pub sum_h_dot: f64,
    pub frob_h_sq: f64,
    pub frob_h_dot_sq: f64,
    /// Right side of the Frobenius bound: ‖Ḣ‖²_F − (ΣΣḢ)²/I².
    pub bound: f64,
    /// Worst |H[i][j] − H[j][i]|, a finite-difference quality gauge.
    pub max_asymmetry: f64,
}

impl HessianReport {
    pub fn zero_sum_ok(&self, tol: f64) -> bool {
        self.sum_h.abs() <= tol && self.max_row_sum <= tol && self.max_col_sum <= tol
    }

    pub fn inequality_ok(&self, tol: f64) -> bool {
        self.frob_h_sq <= self.bound + tol
    }
}

fn matrix_stats(m: &[Vec<f64>]) -> (f64, f64, f64) {
    let mut sum = 0.0;
    let mut frob = 0.0;
    let mut asym = 0.0f64;
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            sum += v;
            frob += v * v;
            asym = asym.max((v - m[j][i]).abs());
        }
    }
    (sum, frob, asym)
}

/// Probes the Hessian structure induced by weight centering.
///
/// `grad` must return the gradient of a scalar loss with respect to its
/// direct input vector. The probe evaluates two Hessians by central
/// differences of that gradient: Ḣ of the loss at the centered point, and
/// H of the composed map w ↦ loss(w − mean(w)) at `w0`. Centering is a
/// projection P = I − (1/I)11ᵀ, so H = P Ḣ P; every row and column of H is
/// orthogonal to the ones vector (ΣΣH = 0) and the Frobenius norm can only
/// shrink: ‖H‖²_F ≤ ‖Ḣ‖²_F − (ΣΣḢ)²/I².
pub fn hessian_checks(
    grad: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    w0: &[f64],
    step: f64,
) -> Result<HessianReport> {
    let n = w0.len();
    if n == 0 {
        return Err(Error::InvalidArgument("hessian probe on empty vector".into()));
    }
    let mean = w0.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = w0.iter().map(|v| v - mean).collect();

    let h_dot = finite_diff_hessian(grad, &centered, step)?;

    // Gradient of w ↦ loss(center(w)) is the centered gradient of the loss
    // at center(w).
    let mut composed = |w: &[f64]| -> Result<Vec<f64>> {
        let m = w.iter().sum::<f64>() / w.len() as f64;
        let c: Vec<f64> = w.iter().map(|v| v - m).collect();
        let g = grad(&c)?;
        let gm = g.iter().sum::<f64>() / g.len() as f64;
        Ok(g.iter().map(|v| v - gm).collect())
    };
    let h = finite_diff_hessian(&mut composed, w0, step)?;

    let (sum_h, frob_h_sq, asym_h) = matrix_stats(&h);
    let (sum_h_dot, frob_h_dot_sq, asym_hd) = matrix_stats(&h_dot);
    let mut max_row_sum = 0.0f64;
    let mut max_col_sum = 0.0f64;
    for i in 0..n {
        max_row_sum = max_row_sum.max(h[i].iter().sum::<f64>().abs());
        max_col_sum = max_col_sum.max((0..n).map(|r| h[r][i]).sum::<f64>().abs());
    }
    Ok(HessianReport {
        len: n,
        sum_h,
        max_row_sum,
        max_col_sum,
        sum_h_dot,
        frob_h_sq,
        frob_h_dot_sq,
        bound: frob_h_dot_sq - sum_h_dot * sum_h_dot / (n * n) as f64,
        max_asymmetry: asym_h.max(asym_hd),
    })
}

// ---------------------------------------------------------------------------
// Channel statistics propagation

/// Spread of output-channel statistics after one convolution.
#[derive(Clone, Copy, Debug)]
pub struct StatPropagation {
    /// Population std of the per-channel output means.
    pub mean_spread: f64,
    /// Population std of the per-channel output stds.
    pub std_spread: f64,
    /// Single-group StatDiff of the outputs.
    pub statdiff: f64,
}

/// Convolves `input` with `weight` (optionally standardized first) and
/// measures how far apart the output channels' statistics land. With
/// standardized rows every row sums to zero, so equal input-channel means
/// cancel and the output means cluster near zero.
pub fn channel_stat_propagation(
    weight: &Tensor,
    input: &Tensor,
    stride: usize,
    pad: usize,
    ws_eps: Option<f64>,
) -> Result<StatPropagation> {
    let w = match ws_eps {
        Some(eps) => crate::reparam::ws_forward(weight, eps)?.standardized,
        None => weight.clone(),
    };
    let out = conv2d_reference(input, &w, stride, pad)?;
    let shape = out.shape();
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let n = (b * hw) as f64;
    let mut means = vec![0.0; c];
    let mut stds = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for i in 0..hw {
                sum += out.data()[base + i];
            }
        }
        let mu = sum / n;
        let mut var = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for i in 0..hw {
                let d = out.data()[base + i] - mu;
                var += d * d;
            }
        }
        means[ch] = mu;
        stds[ch] = (var / n).sqrt();
    }
    let spread = |v: &[f64]| {
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let sd = statdiff(&means, &stds, 1).map(|v| v[0]).unwrap_or(0.0);
    Ok(StatPropagation {
        mean_spread: spread(&means),
        std_spread: spread(&stds),
        statdiff: sd,
    })
}

// ---------------------------------------------------------------------------
// Underrepresented channels

/// Nearest-rank percentile (p in [0, 100]) of a sample.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Fraction of channels whose `pct`-th percentile pre-ReLU activation is
/// ≤ 0 — channels that the following ReLU silences almost everywhere. The
/// percentile stands in for the maximum, which is noise-dominated.
pub fn underrep_rate(pre_relu: &Tensor, pct: f64) -> Result<f64> {
    let shape = pre_relu.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            context: "underrep_rate",
            expected: "[b, c, h, w]".into(),
            got: format!("{shape:?}"),
        });
    }
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if b * hw == 0 || c == 0 {
        return Err(Error::InvalidArgument("underrep_rate on empty sample".into()));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::InvalidArgument(format!(
            "percentile must be in [0, 100], got {pct}"
        )));
    }
    let mut silenced = 0usize;
    let mut buf = Vec::with_capacity(b * hw);
    for ch in 0..c {
        buf.clear();
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            buf.extend_from_slice(&pre_relu.data()[base..base + hw]);
        }
        buf.sort_by(|a, b| a.total_cmp(b));
        if percentile(&buf, pct) <= 0.0 {
            silenced += 1;
        }
    }
    Ok(silenced as f64 / c as f64)
}

// ---------------------------------------------------------------------------
// Weight singularity ratio (descriptive report, no acceptance target)

/// Mean over layers of (min row L1 norm) / (average row L1 norm). Near 1
/// when rows carry similar mass, near 0 when some output channels have
/// collapsed toward the zero row.
pub fn weight_singularity_ratio(weights: &[&Tensor]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("no layers given".into()));
    }
    let mut total = 0.0;
    for w in weights {
        let (rows, cols) = row_view(w.shape())?;
        let mut min = f64::INFINITY;
        let mut avg = 0.0;
        for r in 0..rows {
            let l1: f64 = w.data()[r * cols..(r + 1) * cols]
                .iter()
                .map(|v| v.abs())
                .sum();
            min = min.min(l1);
            avg += l1;
        }
        avg /= rows as f64;
        if avg == 0.0 {
            return Err(Error::ConstraintViolated(
                "weight_singularity_ratio: all rows zero".into(),
            ));
        }
        total += min / avg;
    }
    Ok(total / weights.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reparam::ws_forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn statdiff_identical_channels_is_zero() {
        let sd = statdiff(&[0.7; 8], &[1.3; 8], 4).unwrap();
        assert_eq!(sd, vec![0.0; 4]);
    }

    #[test]
    fn statdiff_known_answer() {
        // means {1, -1}: population std 1; stds {1, 1}: mean 1 -> 1.0
        let sd = statdiff(&[1.0, -1.0], &[1.0, 1.0], 1).unwrap();
        assert!((sd[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn statdiff_nonnegative_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let means: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let stds: Vec<f64> = (0..8).map(|_| rng.gen_range(0.1..3.0)).collect();
            let sd = statdiff(&means, &stds, 2).unwrap();
            assert!(sd.iter().all(|v| *v >= 0.0));
            let k = rng.gen_range(0.5..4.0);
            let means_k: Vec<f64> = means.iter().map(|v| v * k).collect();
            let stds_k: Vec<f64> = stds.iter().map(|v| v * k).collect();
            let sd_k = statdiff(&means_k, &stds_k, 2).unwrap();
            for (a, b) in sd.iter().zip(&sd_k) {
                assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn statdiff_zero_stds_error() {
        assert!(matches!(
            statdiff(&[1.0, 2.0], &[0.0, 0.0], 1),
            Err(Error::ConstraintViolated(_))
        ));
    }

    #[test]
    fn channel_stats_first_update_copies_then_ema() {
        let mut cs = ChannelStats::new(1, 0.1);
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        cs.update(&x).unwrap();
        assert!((cs.mean[0] - 2.0).abs() < 1e-15);
        assert!((cs.std[0] - 1.0).abs() < 1e-15);
        let y = Tensor::new(vec![2, 1, 1, 1], vec![4.0, 4.0]).unwrap();
        cs.update(&y).unwrap();
        // mean: 2 + 0.1 (4 - 2) = 2.2; std: 1 + 0.1 (0 - 1) = 0.9
        assert!((cs.mean[0] - 2.2).abs() < 1e-12);
        assert!((cs.std[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn reduction_terms_zero_gradient() {
        let w = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 0.0]).unwrap();
        let layer = ws_forward(&w, 1e-10).unwrap();
        let g = Tensor::zeros(&[2, 4]);
        let t = grad_reduction_for_layer(&layer, &g).unwrap();
        assert_eq!(t.term_ws, 0.0);
        assert_eq!(t.term_mean, 0.0);
        assert_eq!(t.term_total, 0.0);
        assert_eq!(t.r1, 0.0);
        assert_eq!(t.r2, 0.0);
        assert_eq!(t.r1_rel(), 0.0);
    }

    #[test]
    fn reduction_identities_hold_on_random_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let w = Tensor::randn(&[6, 27], &mut rng);
            let g = Tensor::randn(&[6, 27], &mut rng);
            let layer = ws_forward(&w, 1e-10).unwrap();
            let t = grad_reduction_for_layer(&layer, &g).unwrap();
            assert!(t.r1_rel() < 1e-8, "r1 rel {}", t.r1_rel());
            assert!(t.r2_rel() < 1e-8, "r2 rel {}", t.r2_rel());
            // The three terms tile the squared upstream gradient.
            let total = t.term_ws + t.term_mean + t.term_total;
            assert!((total - t.grad_w_hat_sq).abs() < 1e-8 * t.grad_w_hat_sq);
            assert!(t.fraction_ws() >= 0.0 && t.fraction_ws() <= 1.0);
        }
    }

    #[test]
    fn hessian_toy_quadratic_is_exact_projection() {
        // L(v) = ||v||²/2 has gradient v, so H_dot = identity and the
        // centered Hessian is P = I - (1/I)11ᵀ: zero sum, Frobenius I - 1,
        // and the bound holds with equality.
        let n = 6;
        let w0: Vec<f64> = (0..n).map(|i| i as f64 * 0.3 - 0.7).collect();
        let mut grad = |v: &[f64]| -> Result<Vec<f64>> { Ok(v.to_vec()) };
        let rep = hessian_checks(&mut grad, &w0, 1e-4).unwrap();
        assert!(rep.zero_sum_ok(1e-9), "sum {}", rep.sum_h);
        assert!((rep.frob_h_sq - (n as f64 - 1.0)).abs() < 1e-8);
        assert!((rep.bound - (n as f64 - 1.0)).abs() < 1e-8);
        assert!(rep.inequality_ok(1e-8));
        assert!(rep.max_asymmetry < 1e-9);
    }

    #[test]
    fn hessian_inequality_on_random_smooth_net() {
        // Tiny conv net with a square activation: w (len 8) enters as a
        // [1,2,2,2] kernel, the conv output is squared and summed. Smooth
        // in w, so the finite-difference Hessians are trustworthy.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let x = Tensor::randn(&[1, 2, 3, 3], &mut rng);
            let w0 = Tensor::randn(&[8], &mut rng);
            let mut grad = |w: &[f64]| -> Result<Vec<f64>> {
                let mut tape = crate::tensor::Tape::new();
                let xid = tape.constant(x.clone());
                let wid = tape.leaf(Tensor::new(vec![1, 2, 2, 2], w.to_vec())?);
                let y = tape.conv2d(xid, wid, 1, 0)?;
                let sq = tape.mul(y, y)?;
                let loss = tape.sum_all(sq)?;
                tape.backward(loss)?;
                Ok(tape.grad(wid).unwrap().data().to_vec())
            };
            let rep = hessian_checks(&mut grad, w0.data(), 1e-4).unwrap();
            assert!(rep.zero_sum_ok(1e-4), "sum {}", rep.sum_h);
            assert!(rep.inequality_ok(1e-4), "{} > {}", rep.frob_h_sq, rep.bound);
            assert!(rep.max_asymmetry < 1e-4);
        }
    }

    #[test]
    fn propagation_constant_input_with_ws_kills_means() {
        // All input channels equal the same constant; standardized rows
        // sum to zero, so (with no padding) every output is exactly zero.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = Tensor::randn(&[4, 3, 3, 3], &mut rng);
        let input = Tensor::full(&[2, 3, 6, 6], 0.73);
        let p = channel_stat_propagation(&w, &input, 1, 0, Some(1e-10)).unwrap();
        assert!(p.mean_spread < 1e-12, "mean spread {}", p.mean_spread);
    }

    #[test]
    fn propagation_ws_tightens_output_stats() {
        // Over 20 seeds, iid input channels: standardized weights give a
        // smaller output StatDiff than raw weights with a mean offset.
        let mut better = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut w = Tensor::randn(&[8, 4, 3, 3], &mut rng);
            // Give rows distinct mean offsets so the raw conv smears
            // channel means apart.
            {
                let data = w.data_mut();
                for r in 0..8 {
                    let off = (r as f64 - 3.5) * 0.2;
                    for v in &mut data[r * 36..(r + 1) * 36] {
                        *v += off;
                    }
                }
            }
            let input_raw: Vec<f64> = {
                let mut v = Tensor::randn(&[4, 4, 8, 8], &mut rng).into_data();
                for x in &mut v {
                    *x += 1.0; // nonzero common input mean
                }
                v
            };
            let input = Tensor::new(vec![4, 4, 8, 8], input_raw).unwrap();
            let with = channel_stat_propagation(&w, &input, 1, 1, Some(1e-10)).unwrap();
            let without = channel_stat_propagation(&w, &input, 1, 1, None).unwrap();
            if with.statdiff < without.statdiff {
                better += 1;
            }
        }
        assert!(better >= 16, "ws better in only {better}/20 seeds");
    }

    #[test]
    fn underrep_counts_buried_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // Channel 0: standard normal (alive); channel 1: mean -10, std 0.1.
        let mut x = Tensor::randn(&[4, 2, 4, 4], &mut rng);
        {
            let d = x.data_mut();
            let hw = 16;
            for bi in 0..4 {
                let base = (bi * 2 + 1) * hw;
                for i in 0..hw {
                    d[base + i] = d[base + i] * 0.1 - 10.0;
                }
            }
        }
        let rate = underrep_rate(&x, 95.0).unwrap();
        assert!((rate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn underrep_zero_for_standardized_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = Tensor::randn(&[8, 4, 8, 8], &mut rng);
        assert_eq!(underrep_rate(&x, 95.0).unwrap(), 0.0);
    }

    #[test]
    fn underrep_rejects_empty() {
        let x = Tensor::zeros(&[0, 3, 2, 2]);
        assert!(underrep_rate(&x, 95.0).is_err());
    }

    #[test]
    fn singularity_ratio_bounds() {
        let even = Tensor::new(vec![2, 2], vec![1.0, -1.0, 2.0, 0.0]).unwrap();
        let r = weight_singularity_ratio(&[&even]).unwrap();
        assert!((r - 1.0).abs() < 1e-15); // both rows have L1 = 2

        let skew = Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 1.0]).unwrap();
        let r = weight_singularity_ratio(&[&skew]).unwrap();
        assert!((r - 0.0).abs() < 1e-15);
    }
}
