//! Weight reparameterizations: weight standardization and its competitors.
//!
//! A convolution weight `[o, i, kh, kw]` is treated as `o` rows of length
//! `i * kh * kw`. Weight standardization (WS) maps each row `W` to
//! `(W - mean(W)) / sqrt(mean((W - mean(W))^2) + eps)`, so every row of the
//! effective weight has zero mean and (up to `eps`) unit second moment. The
//! same row view serves weight normalization (WN, `g * W / |W|`), centered
//! weight normalization (CWN, `g * (W - mean) / |W - mean|`), and the
//! projected-gradient steps that treat the zero-mean/fixed-norm constraint
//! set directly.
//!
//! Two independent gradient paths exist for WS on purpose:
//! * the tape composite built by [`ws_standardize`], differentiated by the
//!   generic reverse sweep, used by models;
//! * [`ws_backward_analytic`], the closed-form two-stage chain rule, used
//!   only as a cross-check against the tape.

use crate::error::{Error, Result};
use crate::tensor::{Grouping, Precision, Tape, Tensor, TensorId};

/// Default standardization eps at 32-bit training precision.
pub const WS_EPS_F32: f64 = 1e-5;
/// Default at 64-bit: small enough that the gradient identities hold to
/// 1e-8 relative, large enough to keep degenerate rows finite.
pub const WS_EPS_F64: f64 = 1e-10;

pub fn default_ws_eps(p: Precision) -> f64 {
    match p {
        Precision::F32 => WS_EPS_F32,
        Precision::F64 => WS_EPS_F64,
    }
}

/// Which reparameterization a layer applies to its raw weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReparamKind {
    /// Raw weights used as stored.
    None,
    /// Row centering only (the first WS stage).
    MeanOnly,
    /// Full weight standardization.
    Ws,
    /// Weight normalization with per-row gain.
    Wn,
    /// Centered weight normalization with per-row gain.
    Cwn,
}

impl ReparamKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ReparamKind::None),
            "mean-only" => Ok(ReparamKind::MeanOnly),
            "ws" => Ok(ReparamKind::Ws),
            "wn" => Ok(ReparamKind::Wn),
            "cwn" => Ok(ReparamKind::Cwn),
            other => Err(Error::Parse(format!("unknown reparam kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReparamKind::None => "none",
            ReparamKind::MeanOnly => "mean-only",
            ReparamKind::Ws => "ws",
            ReparamKind::Wn => "wn",
            ReparamKind::Cwn => "cwn",
        }
    }

    /// Whether this kind carries a trainable per-row gain.
    pub fn has_gain(&self) -> bool {
        matches!(self, ReparamKind::Wn | ReparamKind::Cwn)
    }
}

/// Row view of a weight tensor: first dim is the row (output channel), the
/// rest flatten into columns. Standardization needs at least two columns.
pub fn row_view(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch {
            context: "row_view",
            expected: "rank >= 2 weight".into(),
            got: format!("{shape:?}"),
        });
    }
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    if cols < 2 {
        return Err(Error::InvalidArgument(format!(
            "weight rows need at least 2 elements, got {cols}"
        )));
    }
    Ok((rows, cols))
}

/// A reparameterized weight with the per-row normalization that produced it:
/// `standardized[r] = gain_scale * (raw[r] - row_mean[r]) / row_std[r]`,
/// where for WS `row_std` is the eps-padded root second moment, and for
/// WN/CWN it is the (centered) row norm divided by the gain.
#[derive(Clone, Debug)]
pub struct StandardizedWeight {
    pub raw: Tensor,
    pub standardized: Tensor,
    pub row_mean: Vec<f64>,
    pub row_std: Vec<f64>,
    pub eps: f64,
    pub kind: ReparamKind,
    pub gain: Option<Vec<f64>>,
}

/// Weight standardization forward (value level).
///
/// Arithmetic mirrors the tape composite exactly (same accumulation order,
/// same multiply-by-reciprocal mean), so the two agree bit for bit.
pub fn ws_forward(raw: &Tensor, eps: f64) -> Result<StandardizedWeight> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("ws eps must be > 0, got {eps}")));
    }
    let (rows, cols) = row_view(raw.shape())?;
    let inv = 1.0 / cols as f64;
    let mut out = vec![0.0; raw.numel()];
    let mut row_mean = vec![0.0; rows];
    let mut row_std = vec![0.0; rows];
    for r in 0..rows {
        let src = &raw.data()[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for v in src {
            acc += v;
        }
        let mu = acc * inv;
        let mut sq = 0.0;
        for v in src {
            let c = v - mu;
            sq += c * c;
        }
        let sigma = (sq * inv + eps).sqrt();
        let dst = &mut out[r * cols..(r + 1) * cols];
        for (d, v) in dst.iter_mut().zip(src) {
            *d = (v - mu) / sigma;
        }
        row_mean[r] = mu;
        row_std[r] = sigma;
    }
    Ok(StandardizedWeight {
        raw: raw.clone(),
        standardized: Tensor::new(raw.shape().to_vec(), out)?,
        row_mean,
        row_std,
        eps,
        kind: ReparamKind::Ws,
        gain: None,
    })
}

/// Closed-form gradient of WS: pulls a gradient w.r.t. the standardized
/// weight back to the raw weight through both stages (divide-by-std, then
/// subtract-mean).
///
/// Per row, with `s` the forward row std and `g` the incoming gradient:
/// the divide stage gives `g_dot = (g - <w_hat, g> w_hat / I) / s`, and the
/// centering stage subtracts the mean of `g_dot` from each element.
pub fn ws_backward_analytic(layer: &StandardizedWeight, grad_w_hat: &Tensor) -> Result<Tensor> {
    if layer.kind != ReparamKind::Ws {
        return Err(Error::InvalidArgument(format!(
            "analytic WS gradient needs kind ws, got {}",
            layer.kind.name()
        )));
    }
    if grad_w_hat.shape() != layer.standardized.shape() {
        return Err(Error::ShapeMismatch {
            context: "ws_backward_analytic",
            expected: format!("{:?}", layer.standardized.shape()),
            got: format!("{:?}", grad_w_hat.shape()),
        });
    }
    let (rows, cols) = row_view(layer.standardized.shape())?;
    let inv = 1.0 / cols as f64;
    let mut out = vec![0.0; grad_w_hat.numel()];
    for r in 0..rows {
        let wh = &layer.standardized.data()[r * cols..(r + 1) * cols];
        let g = &grad_w_hat.data()[r * cols..(r + 1) * cols];
        let s = layer.row_std[r];
        let mut dot = 0.0;
        for (w, gv) in wh.iter().zip(g) {
            dot += w * gv;
        }
        let coef = dot * inv;
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut mean_gdot = 0.0;
        for ((d, gv), w) in dst.iter_mut().zip(g).zip(wh) {
            *d = (gv - coef * w) / s;
            mean_gdot += *d;
        }
        mean_gdot *= inv;
        for d in dst.iter_mut() {
            *d -= mean_gdot;
        }
    }
    Tensor::new(grad_w_hat.shape().to_vec(), out)
}

/// Weight normalization forward: `g_r * W_r / |W_r|` per row.
pub fn wn_forward(raw: &Tensor, gain: &[f64]) -> Result<StandardizedWeight> {
    let (rows, cols) = row_view(raw.shape())?;
    check_gain_len(gain, rows)?;
    let mut out = vec![0.0; raw.numel()];
    let mut row_std = vec![0.0; rows];
    for r in 0..rows {
        let src = &raw.data()[r * cols..(r + 1) * cols];
        let mut sq = 0.0;
        for v in src {
            sq += v * v;
        }
        let norm = sq.sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateRow {
                context: "wn_forward",
                row: r,
            });
        }
        let scale = gain[r] / norm;
        for (d, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(src) {
            *d = v * scale;
        }
        row_std[r] = norm / gain[r];
    }
    Ok(StandardizedWeight {
        raw: raw.clone(),
        standardized: Tensor::new(raw.shape().to_vec(), out)?,
        row_mean: vec![0.0; rows],
        row_std,
        eps: 0.0,
        kind: ReparamKind::Wn,
        gain: Some(gain.to_vec()),
    })
}

/// Centered weight normalization: `g_r * (W_r - mean) / |W_r - mean|`.
pub fn cwn_forward(raw: &Tensor, gain: &[f64]) -> Result<StandardizedWeight> {
    let (rows, cols) = row_view(raw.shape())?;
    check_gain_len(gain, rows)?;
    let inv = 1.0 / cols as f64;
    let mut out = vec![0.0; raw.numel()];
    let mut row_mean = vec![0.0; rows];
    let mut row_std = vec![0.0; rows];
    for r in 0..rows {
        let src = &raw.data()[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for v in src {
            acc += v;
        }
        let mu = acc * inv;
        let mut sq = 0.0;
        for v in src {
            let c = v - mu;
            sq += c * c;
        }
        let norm = sq.sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateRow {
                context: "cwn_forward",
                row: r,
            });
        }
        let scale = gain[r] / norm;
        for (d, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(src) {
            *d = (v - mu) * scale;
        }
        row_mean[r] = mu;
        row_std[r] = norm / gain[r];
    }
    Ok(StandardizedWeight {
        raw: raw.clone(),
        standardized: Tensor::new(raw.shape().to_vec(), out)?,
        row_mean,
        row_std,
        eps: 0.0,
        kind: ReparamKind::Cwn,
        gain: Some(gain.to_vec()),
    })
}

/// Gains that leave the initial effective weight unchanged when switching a
/// layer to WN (row norms) or CWN (centered row norms).
pub fn initial_gains(raw: &Tensor, kind: ReparamKind) -> Result<Vec<f64>> {
    let (rows, cols) = row_view(raw.shape())?;
    let inv = 1.0 / cols as f64;
    let mut gains = vec![0.0; rows];
    for r in 0..rows {
        let src = &raw.data()[r * cols..(r + 1) * cols];
        let mu = match kind {
            ReparamKind::Cwn => {
                let mut acc = 0.0;
                for v in src {
                    acc += v;
                }
                acc * inv
            }
            ReparamKind::Wn => 0.0,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "gains only exist for wn/cwn, got {}",
                    other.name()
                )))
            }
        };
        let mut sq = 0.0;
        for v in src {
            let c = v - mu;
            sq += c * c;
        }
        gains[r] = sq.sqrt();
    }
    Ok(gains)
}

fn check_gain_len(gain: &[f64], rows: usize) -> Result<()> {
    if gain.len() != rows {
        return Err(Error::ShapeMismatch {
            context: "reparam gain",
            expected: format!("{rows} gains"),
            got: format!("{}", gain.len()),
        });
    }
    Ok(())
}

// ── Projected gradient descent on the standardized manifold ────────────

/// How a projected-gradient step returns to the constraint set
/// (zero row mean, row sum of squares equal to the column count).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgdVariant {
    /// Take the raw step, then re-standardize each row exactly.
    ExactProject,
    /// First-order (Lagrangian) update that stays on the constraint set to
    /// O(lr^2): subtract the gradient components along the two constraint
    /// normals (the all-ones direction and the row itself).
    Lagrangian,
}

/// How far a row may drift from the constraint set before `pgd_step`
/// rejects it.
const PGD_CONSTRAINT_TOL: f64 = 1e-8;

/// One projected-gradient step on an already-standardized weight.
pub fn pgd_step(
    w_hat: &Tensor,
    grad_w_hat: &Tensor,
    lr: f64,
    variant: PgdVariant,
) -> Result<Tensor> {
    if grad_w_hat.shape() != w_hat.shape() {
        return Err(Error::ShapeMismatch {
            context: "pgd_step",
            expected: format!("{:?}", w_hat.shape()),
            got: format!("{:?}", grad_w_hat.shape()),
        });
    }
    let (rows, cols) = row_view(w_hat.shape())?;
    let inv = 1.0 / cols as f64;
    // Pre: rows sit on the constraint set.
    for r in 0..rows {
        let row = &w_hat.data()[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        let mut sq = 0.0;
        for v in row {
            sum += v;
            sq += v * v;
        }
        if (sum * inv).abs() > PGD_CONSTRAINT_TOL || (sq * inv - 1.0).abs() > PGD_CONSTRAINT_TOL {
            return Err(Error::ConstraintViolated(format!(
                "row {r}: mean {:.3e}, mean square {:.6}",
                sum * inv,
                sq * inv
            )));
        }
    }

    let mut out = vec![0.0; w_hat.numel()];
    for r in 0..rows {
        let w = &w_hat.data()[r * cols..(r + 1) * cols];
        let g = &grad_w_hat.data()[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        match variant {
            PgdVariant::ExactProject => {
                // y = w - lr g, then standardize y exactly (no eps).
                let mut mu = 0.0;
                for (wv, gv) in w.iter().zip(g) {
                    mu += wv - lr * gv;
                }
                mu *= inv;
                let mut sq = 0.0;
                for (wv, gv) in w.iter().zip(g) {
                    let c = wv - lr * gv - mu;
                    sq += c * c;
                }
                let sigma = (sq * inv).sqrt();
                if sigma == 0.0 {
                    return Err(Error::DegenerateRow {
                        context: "pgd_step exact projection",
                        row: r,
                    });
                }
                for ((d, wv), gv) in dst.iter_mut().zip(w).zip(g) {
                    *d = (wv - lr * gv - mu) / sigma;
                }
            }
            PgdVariant::Lagrangian => {
                // Remove the components of g along the constraint normals
                // (1 and w), then step. |w|^2 = cols on the set, hence the
                // 1/cols factor on both terms.
                let mut dot_wg = 0.0;
                let mut sum_g = 0.0;
                for (wv, gv) in w.iter().zip(g) {
                    dot_wg += wv * gv;
                    sum_g += gv;
                }
                let cw = dot_wg * inv;
                let c1 = sum_g * inv;
                for ((d, wv), gv) in dst.iter_mut().zip(w).zip(g) {
                    *d = wv - lr * (gv - cw * wv - c1);
                }
            }
        }
    }
    Tensor::new(w_hat.shape().to_vec(), out)
}

// ── Tape composites ─────────────────────────────────────────────────────

/// Tape node handles for a weight-standardized layer; diagnostics read
/// values and gradients at all three stages.
#[derive(Clone, Copy, Debug)]
pub struct WsNodes {
    /// Raw weight leaf.
    pub raw: TensorId,
    /// Row-centered weight (first stage).
    pub centered: TensorId,
    /// Fully standardized weight (second stage).
    pub standardized: TensorId,
    /// Per-row eps-padded std, shape `[rows]`.
    pub sigma: TensorId,
    pub grouping: Grouping,
}

/// Builds the WS composite on the tape; the reverse sweep then
/// differentiates through both the mean and the std.
pub fn ws_standardize(tape: &mut Tape, w: TensorId, eps: f64) -> Result<WsNodes> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("ws eps must be > 0, got {eps}")));
    }
    let shape = tape.value(w).shape().to_vec();
    let (rows, cols) = row_view(&shape)?;
    let grouping = Grouping::Rows { rows, cols };
    let mu = tape.group_mean(w, grouping)?;
    let mu_b = tape.group_broadcast(mu, grouping, &shape)?;
    let centered = tape.sub(w, mu_b)?;
    let sq = tape.mul(centered, centered)?;
    let msq = tape.group_mean(sq, grouping)?;
    let veps = tape.add_scalar(msq, eps)?;
    let sigma = tape.sqrt(veps)?;
    let sigma_b = tape.group_broadcast(sigma, grouping, &shape)?;
    let standardized = tape.div(centered, sigma_b)?;
    Ok(WsNodes {
        raw: w,
        centered,
        standardized,
        sigma,
        grouping,
    })
}

/// Row centering only (the first WS stage) on the tape.
pub fn center_rows(tape: &mut Tape, w: TensorId) -> Result<TensorId> {
    let shape = tape.value(w).shape().to_vec();
    let (rows, cols) = row_view(&shape)?;
    let grouping = Grouping::Rows { rows, cols };
    let mu = tape.group_mean(w, grouping)?;
    let mu_b = tape.group_broadcast(mu, grouping, &shape)?;
    tape.sub(w, mu_b)
}

/// WN on the tape: `gain * w / |w|` per row; `gain` is a `[rows]` leaf.
pub fn wn_standardize(tape: &mut Tape, w: TensorId, gain: TensorId) -> Result<TensorId> {
    let shape = tape.value(w).shape().to_vec();
    let (rows, cols) = row_view(&shape)?;
    let grouping = Grouping::Rows { rows, cols };
    let sq = tape.mul(w, w)?;
    let msq = tape.group_mean(sq, grouping)?;
    let ssq = tape.mul_scalar(msq, cols as f64)?;
    let norm = tape.sqrt(ssq)?;
    reject_zero_rows(tape, norm, "wn_standardize")?;
    let norm_b = tape.group_broadcast(norm, grouping, &shape)?;
    let unit = tape.div(w, norm_b)?;
    let gain_b = tape.group_broadcast(gain, grouping, &shape)?;
    tape.mul(unit, gain_b)
}

/// CWN on the tape: center each row, then normalize and scale by the gain.
pub fn cwn_standardize(tape: &mut Tape, w: TensorId, gain: TensorId) -> Result<TensorId> {
    let shape = tape.value(w).shape().to_vec();
    let (rows, cols) = row_view(&shape)?;
    let grouping = Grouping::Rows { rows, cols };
    let centered = center_rows(tape, w)?;
    let sq = tape.mul(centered, centered)?;
    let msq = tape.group_mean(sq, grouping)?;
    let ssq = tape.mul_scalar(msq, cols as f64)?;
    let norm = tape.sqrt(ssq)?;
    reject_zero_rows(tape, norm, "cwn_standardize")?;
    let norm_b = tape.group_broadcast(norm, grouping, &shape)?;
    let unit = tape.div(centered, norm_b)?;
    let gain_b = tape.group_broadcast(gain, grouping, &shape)?;
    tape.mul(unit, gain_b)
}

fn reject_zero_rows(tape: &Tape, norms: TensorId, context: &'static str) -> Result<()> {
    for (r, &n) in tape.value(norms).data().iter().enumerate() {
        if n == 0.0 {
            return Err(Error::DegenerateRow { context, row: r });
        }
    }
    Ok(())
}
