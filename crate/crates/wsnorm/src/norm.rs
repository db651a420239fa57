//! Activation normalization layers.
//!
//! All layers share one skeleton: standardize over a partition of the
//! input, then apply a trainable per-channel affine. They differ in the
//! partition and in where the statistics come from:
//!
//! * batch norm (BN): per channel across the batch, batch statistics in
//!   train mode, running statistics in eval mode;
//! * channel norm (CN): per channel-group within each sample; layer norm is
//!   CN with one group, instance norm is CN with one channel per group;
//! * fixed-stats: normalize like BN, then rescale each channel to a frozen
//!   target mean/std (used to probe how far BN's guarantees can be bent
//!   before training collapses);
//! * batch-channel (BCN), large-batch form: BN followed by CN, each with
//!   its own affine;
//! * batch-channel, micro-batch form: normalize by running estimates that
//!   are updated from each incoming batch but kept off the gradient tape,
//!   then CN. Works at batch size 1, where BN's batch statistics are
//!   undefined.
//!
//! Statistics buffers (running means/vars, estimates) are plain state on
//! [`NormState`]; only the normalization arithmetic goes on the tape.

use crate::error::{Error, Result};
use crate::tensor::{Grouping, Tape, Tensor, TensorId};

/// Default denominator padding for activation norms.
pub const NORM_EPS: f64 = 1e-5;
/// Default EMA momentum for BN running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward mode: train uses (and updates) batch-derived statistics, eval
/// freezes them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which normalization a layer applies. Group counts stay symbolic until
/// the channel count is known.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    None,
    Bn,
    /// Channel norm over `groups`; `None` means the default policy
    /// `min(32, channels / 4)`, clamped to at least 1.
    Cn { groups: Option<usize> },
    FixedStats,
    BcnLarge { groups: Option<usize> },
    BcnMicro { groups: Option<usize> },
}

impl NormKind {
    /// Layer norm: one group spanning all channels.
    pub fn ln() -> Self {
        NormKind::Cn { groups: Some(1) }
    }

    /// Group norm under the default group policy.
    pub fn gn() -> Self {
        NormKind::Cn { groups: None }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => NormKind::None,
            "bn" => NormKind::Bn,
            "gn" => NormKind::gn(),
            "ln" => NormKind::ln(),
            "in" => NormKind::Cn { groups: Some(usize::MAX) },
            "fixed-stats" => NormKind::FixedStats,
            "bcn" => NormKind::BcnLarge { groups: None },
            "bcn-micro" => NormKind::BcnMicro { groups: None },
            other => return Err(Error::Parse(format!("unknown norm kind {other:?}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::Bn => "bn",
            NormKind::Cn { .. } => "cn",
            NormKind::FixedStats => "fixed-stats",
            NormKind::BcnLarge { .. } => "bcn",
            NormKind::BcnMicro { .. } => "bcn-micro",
        }
    }
}

/// Default group-count policy: `min(32, channels / 4)`, at least 1.
pub fn auto_groups(channels: usize) -> usize {
    (channels / 4).clamp(1, 32)
}

/// Kinds whose train mode depends on cross-sample batch statistics; these
/// refuse micro-batches of one sample at the training-loop level.
pub fn needs_batch_stats(kind: NormKind) -> bool {
    matches!(
        kind,
        NormKind::Bn | NormKind::FixedStats | NormKind::BcnLarge { .. }
    )
}

fn resolve_groups(spec: Option<usize>, channels: usize) -> Result<usize> {
    let g = match spec {
        None => auto_groups(channels),
        // usize::MAX is the instance-norm marker: one channel per group.
        Some(usize::MAX) => channels,
        Some(g) => g,
    };
    if g == 0 || channels % g != 0 {
        return Err(Error::InvalidArgument(format!(
            "{g} groups do not divide {channels} channels"
        )));
    }
    Ok(g)
}

/// Trainable parameter slots a norm layer can own.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormParam {
    Gamma,
    Beta,
    /// Channel-part affine scale of a BCN layer.
    GammaC,
    /// Channel-part affine shift of a BCN layer.
    BetaC,
}

/// Tape handles produced by one norm forward.
pub struct NormForward {
    pub out: TensorId,
    /// Standardized activations before the (final) affine; what the
    /// mean-0/var-1 guarantees are about.
    pub pre_affine: Option<TensorId>,
    /// For BCN kinds: output of the batch stage (after its affine), before
    /// the channel stage.
    pub stage_one: Option<TensorId>,
    /// Trainable parameters registered on the tape for this forward.
    pub params: Vec<(NormParam, TensorId)>,
}

/// One normalization layer: kind, resolved groups, affine parameters, and
/// statistics buffers.
#[derive(Clone, Debug)]
pub struct NormState {
    pub kind: NormKind,
    pub channels: usize,
    /// Resolved group count for the channel part (1 for kinds without one).
    pub groups: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    /// Channel-part affine for BCN kinds.
    pub gamma_c: Option<Tensor>,
    pub beta_c: Option<Tensor>,
    /// BN running statistics, or the micro-batch estimates (μ̂, σ̂²).
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// Fixed-stats targets: per-channel mean and std.
    pub fixed_mean: Option<Tensor>,
    pub fixed_scale: Option<Tensor>,
    pub eps: f64,
    pub momentum: f64,
    /// Micro-batch estimate update rate; the trainer keeps it equal to the
    /// current learning rate.
    pub update_rate: f64,
    /// Where the micro-batch second moment centers: the running mean (as
    /// the estimator is specified) or the batch mean (conventional
    /// variance, kept for comparison).
    pub center_on_running_mean: bool,
}

impl NormState {
    pub fn new(kind: NormKind, channels: usize) -> Result<Self> {
        let groups = match kind {
            NormKind::Cn { groups }
            | NormKind::BcnLarge { groups }
            | NormKind::BcnMicro { groups } => resolve_groups(groups, channels)?,
            _ => 1,
        };
        let has_two_affines = matches!(kind, NormKind::BcnLarge { .. } | NormKind::BcnMicro { .. });
        Ok(NormState {
            kind,
            channels,
            groups,
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            gamma_c: has_two_affines.then(|| Tensor::full(&[channels], 1.0)),
            beta_c: has_two_affines.then(|| Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            fixed_mean: None,
            fixed_scale: None,
            eps: NORM_EPS,
            momentum: BN_MOMENTUM,
            update_rate: 0.01,
            center_on_running_mean: true,
        })
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    /// Installs the frozen per-channel targets for a fixed-stats layer.
    pub fn set_fixed_stats(&mut self, mean: Tensor, scale: Tensor) -> Result<()> {
        if mean.numel() != self.channels || scale.numel() != self.channels {
            return Err(Error::ShapeMismatch {
                context: "set_fixed_stats",
                expected: format!("[{}] mean and scale", self.channels),
                got: format!("{:?} and {:?}", mean.shape(), scale.shape()),
            });
        }
        self.fixed_mean = Some(mean);
        self.fixed_scale = Some(scale);
        Ok(())
    }

    pub fn param(&self, which: NormParam) -> Option<&Tensor> {
        match which {
            NormParam::Gamma => Some(&self.gamma),
            NormParam::Beta => Some(&self.beta),
            NormParam::GammaC => self.gamma_c.as_ref(),
            NormParam::BetaC => self.beta_c.as_ref(),
        }
    }

    pub fn param_mut(&mut self, which: NormParam) -> Option<&mut Tensor> {
        match which {
            NormParam::Gamma => Some(&mut self.gamma),
            NormParam::Beta => Some(&mut self.beta),
            NormParam::GammaC => self.gamma_c.as_mut(),
            NormParam::BetaC => self.beta_c.as_mut(),
        }
    }

    /// Runs the layer on `x` (`[b, c, h, w]`). Train mode may update the
    /// statistics buffers; gradients never flow into them.
    pub fn forward(&mut self, tape: &mut Tape, x: TensorId, mode: Mode) -> Result<NormForward> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::ShapeMismatch {
                context: "norm forward",
                expected: format!("[b, {}, h, w] input", self.channels),
                got: format!("{shape:?}"),
            });
        }
        match self.kind {
            NormKind::None => Ok(NormForward {
                out: x,
                pre_affine: None,
                stage_one: None,
                params: Vec::new(),
            }),
            NormKind::Bn => self.bn_forward(tape, x, mode, NormParam::Gamma, NormParam::Beta),
            NormKind::Cn { .. } => self.cn_forward(tape, x, NormParam::Gamma, NormParam::Beta),
            NormKind::FixedStats => self.fixed_stats_forward(tape, x, mode),
            NormKind::BcnLarge { .. } => {
                let bn = self.bn_forward(tape, x, mode, NormParam::Gamma, NormParam::Beta)?;
                let cn = self.cn_forward(tape, bn.out, NormParam::GammaC, NormParam::BetaC)?;
                Ok(NormForward {
                    out: cn.out,
                    pre_affine: cn.pre_affine,
                    stage_one: Some(bn.out),
                    params: bn.params.into_iter().chain(cn.params).collect(),
                })
            }
            NormKind::BcnMicro { .. } => self.bcn_micro_forward(tape, x, mode),
        }
    }

    fn channel_grouping(&self, shape: &[usize]) -> Grouping {
        Grouping::Channels {
            batch: shape[0],
            channels: shape[1],
            spatial: shape[2] * shape[3],
        }
    }

    fn group_grouping(&self, shape: &[usize]) -> Grouping {
        Grouping::ChannelGroups {
            batch: shape[0],
            groups: self.groups,
            channels_per_group: shape[1] / self.groups,
            spatial: shape[2] * shape[3],
        }
    }

    /// Registers an affine pair on the tape and applies it per channel.
    fn affine(
        &self,
        tape: &mut Tape,
        x: TensorId,
        scale_slot: NormParam,
        shift_slot: NormParam,
    ) -> Result<(TensorId, Vec<(NormParam, TensorId)>)> {
        let shape = tape.value(x).shape().to_vec();
        let grouping = self.channel_grouping(&shape);
        let gamma = tape.leaf(self.param(scale_slot).unwrap().clone());
        let beta = tape.leaf(self.param(shift_slot).unwrap().clone());
        let gamma_b = tape.group_broadcast(gamma, grouping, &shape)?;
        let scaled = tape.mul(x, gamma_b)?;
        let beta_b = tape.group_broadcast(beta, grouping, &shape)?;
        let out = tape.add(scaled, beta_b)?;
        Ok((out, vec![(scale_slot, gamma), (shift_slot, beta)]))
    }

    /// Standardizes `x` over `grouping` with batch statistics on the tape;
    /// returns the normalized node plus the statistics values for buffer
    /// updates.
    fn standardize(
        &self,
        tape: &mut Tape,
        x: TensorId,
        grouping: Grouping,
    ) -> Result<(TensorId, Vec<f64>, Vec<f64>)> {
        let shape = tape.value(x).shape().to_vec();
        let m = tape.group_mean(x, grouping)?;
        let m_b = tape.group_broadcast(m, grouping, &shape)?;
        let xc = tape.sub(x, m_b)?;
        let sq = tape.mul(xc, xc)?;
        let v = tape.group_mean(sq, grouping)?;
        let veps = tape.add_scalar(v, self.eps)?;
        let s = tape.sqrt(veps)?;
        let s_b = tape.group_broadcast(s, grouping, &shape)?;
        let y = tape.div(xc, s_b)?;
        let means = tape.value(m).data().to_vec();
        let vars = tape.value(v).data().to_vec();
        Ok((y, means, vars))
    }

    /// Normalizes `x` by frozen per-channel statistics (off the tape):
    /// `(x - mean) / sqrt(var + eps)`.
    fn normalize_by_constants(
        &self,
        tape: &mut Tape,
        x: TensorId,
        mean: &[f64],
        var: &[f64],
    ) -> Result<TensorId> {
        let shape = tape.value(x).shape().to_vec();
        let grouping = self.channel_grouping(&shape);
        let mu = tape.constant(Tensor::new(vec![self.channels], mean.to_vec())?);
        let sd: Vec<f64> = var.iter().map(|v| (v + self.eps).sqrt()).collect();
        let sd = tape.constant(Tensor::new(vec![self.channels], sd)?);
        let mu_b = tape.group_broadcast(mu, grouping, &shape)?;
        let xc = tape.sub(x, mu_b)?;
        let sd_b = tape.group_broadcast(sd, grouping, &shape)?;
        tape.div(xc, sd_b)
    }

    fn require_multi_element(&self, shape: &[usize]) -> Result<()> {
        let (batch, spatial) = (shape[0], shape[2] * shape[3]);
        if batch * spatial == 1 {
            return Err(Error::SingleElementStats { batch, spatial });
        }
        Ok(())
    }

    fn bn_forward(
        &mut self,
        tape: &mut Tape,
        x: TensorId,
        mode: Mode,
        scale_slot: NormParam,
        shift_slot: NormParam,
    ) -> Result<NormForward> {
        let shape = tape.value(x).shape().to_vec();
        let y = match mode {
            Mode::Train => {
                self.require_multi_element(&shape)?;
                let grouping = self.channel_grouping(&shape);
                let (y, means, vars) = self.standardize(tape, x, grouping)?;
                let m = self.momentum;
                for (r, b) in self.running_mean.data_mut().iter_mut().zip(&means) {
                    *r += m * (b - *r);
                }
                for (r, b) in self.running_var.data_mut().iter_mut().zip(&vars) {
                    *r += m * (b - *r);
                }
                y
            }
            Mode::Eval => {
                let mean = self.running_mean.data().to_vec();
                let var = self.running_var.data().to_vec();
                self.normalize_by_constants(tape, x, &mean, &var)?
            }
        };
        let (out, params) = self.affine(tape, y, scale_slot, shift_slot)?;
        Ok(NormForward {
            out,
            pre_affine: Some(y),
            stage_one: None,
            params,
        })
    }

    fn cn_forward(
        &mut self,
        tape: &mut Tape,
        x: TensorId,
        scale_slot: NormParam,
        shift_slot: NormParam,
    ) -> Result<NormForward> {
        let shape = tape.value(x).shape().to_vec();
        let grouping = self.group_grouping(&shape);
        let (y, _, _) = self.standardize(tape, x, grouping)?;
        let (out, params) = self.affine(tape, y, scale_slot, shift_slot)?;
        Ok(NormForward {
            out,
            pre_affine: Some(y),
            stage_one: None,
            params,
        })
    }

    fn fixed_stats_forward(&mut self, tape: &mut Tape, x: TensorId, mode: Mode) -> Result<NormForward> {
        let (fixed_mean, fixed_scale) = match (&self.fixed_mean, &self.fixed_scale) {
            (Some(m), Some(s)) => (m.clone(), s.clone()),
            _ => {
                return Err(Error::InvalidArgument(
                    "fixed-stats layer used before set_fixed_stats".into(),
                ))
            }
        };
        let shape = tape.value(x).shape().to_vec();
        let y = match mode {
            Mode::Train => {
                self.require_multi_element(&shape)?;
                let grouping = self.channel_grouping(&shape);
                let (y, means, vars) = self.standardize(tape, x, grouping)?;
                let m = self.momentum;
                for (r, b) in self.running_mean.data_mut().iter_mut().zip(&means) {
                    *r += m * (b - *r);
                }
                for (r, b) in self.running_var.data_mut().iter_mut().zip(&vars) {
                    *r += m * (b - *r);
                }
                y
            }
            Mode::Eval => {
                let mean = self.running_mean.data().to_vec();
                let var = self.running_var.data().to_vec();
                self.normalize_by_constants(tape, x, &mean, &var)?
            }
        };
        // Rescale each channel to the frozen targets. When every target is
        // exactly (0, 1) this stage emits nothing, so the layer builds the
        // same tape BN would: the zero-perturbation cell of a stats sweep
        // is BN by construction.
        let identity = fixed_mean.data().iter().all(|&v| v == 0.0)
            && fixed_scale.data().iter().all(|&v| v == 1.0);
        let rescaled = if identity {
            y
        } else {
            let grouping = self.channel_grouping(&shape);
            let s = tape.constant(fixed_scale);
            let s_b = tape.group_broadcast(s, grouping, &shape)?;
            let scaled = tape.mul(y, s_b)?;
            let mu = tape.constant(fixed_mean);
            let mu_b = tape.group_broadcast(mu, grouping, &shape)?;
            tape.add(scaled, mu_b)?
        };
        let (out, params) = self.affine(tape, rescaled, NormParam::Gamma, NormParam::Beta)?;
        Ok(NormForward {
            out,
            pre_affine: Some(y),
            stage_one: None,
            params,
        })
    }

    /// Micro-batch batch-channel forward. In train mode the per-channel
    /// estimates absorb the incoming batch statistics at `update_rate`, and
    /// the input is normalized by the updated estimates as constants; the
    /// estimates live outside the tape, so no gradient reaches them. The
    /// channel stage is a plain CN.
    fn bcn_micro_forward(&mut self, tape: &mut Tape, x: TensorId, mode: Mode) -> Result<NormForward> {
        let shape = tape.value(x).shape().to_vec();
        if mode == Mode::Train {
            let grouping = self.channel_grouping(&shape);
            let count = grouping.group_size() as f64;
            let xv = tape.value(x).data();
            // Batch mean per channel.
            let mut batch_mean = vec![0.0; self.channels];
            grouping.sum_into(xv, &mut batch_mean);
            for v in &mut batch_mean {
                *v /= count;
            }
            // Second moment, centered on the pre-update running mean (the
            // estimator's own definition) or on the batch mean.
            let mut centers = vec![0.0; self.channels];
            if self.center_on_running_mean {
                centers.copy_from_slice(self.running_mean.data());
            } else {
                centers.copy_from_slice(&batch_mean);
            }
            let mut batch_var = vec![0.0; self.channels];
            {
                let mut spread = vec![0.0; xv.len()];
                grouping.broadcast_into(&centers, &mut spread);
                let diff_sq: Vec<f64> = xv
                    .iter()
                    .zip(&spread)
                    .map(|(v, c)| (v - c) * (v - c))
                    .collect();
                grouping.sum_into(&diff_sq, &mut batch_var);
                for v in &mut batch_var {
                    *v /= count;
                }
            }
            let r = self.update_rate;
            for (est, b) in self.running_mean.data_mut().iter_mut().zip(&batch_mean) {
                *est += r * (b - *est);
            }
            for (est, b) in self.running_var.data_mut().iter_mut().zip(&batch_var) {
                *est += r * (b - *est);
            }
        }
        let mean = self.running_mean.data().to_vec();
        let var = self.running_var.data().to_vec();
        let y = self.normalize_by_constants(tape, x, &mean, &var)?;
        let (stage_one, mut params) = self.affine(tape, y, NormParam::Gamma, NormParam::Beta)?;
        let cn = self.cn_forward(tape, stage_one, NormParam::GammaC, NormParam::BetaC)?;
        params.extend(cn.params);
        Ok(NormForward {
            out: cn.out,
            pre_affine: cn.pre_affine,
            stage_one: Some(stage_one),
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn forward_values(state: &mut NormState, x: &Tensor, mode: Mode) -> (Vec<f64>, NormState) {
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let f = state.forward(&mut tape, xid, mode).unwrap();
        (tape.value(f.out).data().to_vec(), state.clone())
    }

    #[test]
    fn bn_standardizes_channel_one_three() {
        // Channel values {1, 3}: mean 2, population std 1 -> {-1, 1}.
        let mut st = NormState::new(NormKind::Bn, 1).unwrap().with_eps(1e-14);
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (y, _) = forward_values(&mut st, &x, Mode::Train);
        assert!((y[0] + 1.0).abs() < 1e-7);
        assert!((y[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn bn_running_stats_ema_update() {
        let mut st = NormState::new(NormKind::Bn, 1).unwrap();
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        forward_values(&mut st, &x, Mode::Train);
        // mean: 0 + 0.1 (2 - 0) = 0.2; var: 1 + 0.1 (1 - 1) = 1
        assert!((st.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((st.running_var.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bn_train_rejects_single_element_stats() {
        let mut st = NormState::new(NormKind::Bn, 2).unwrap();
        let x = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        assert!(matches!(
            st.forward(&mut tape, xid, Mode::Train),
            Err(Error::SingleElementStats { .. })
        ));
    }

    #[test]
    fn bn_eval_is_channelwise_affine_cn_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 4, 5, 5], &mut rng);
        let (a, b) = (1.7, -0.4);
        let ax_b = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| a * v + b).collect(),
        )
        .unwrap();

        // Give BN nontrivial running stats first.
        let mut bn = NormState::new(NormKind::Bn, 4).unwrap();
        forward_values(&mut bn, &x, Mode::Train);
        let (f_x, _) = forward_values(&mut bn, &x, Mode::Eval);
        let (f_axb, _) = forward_values(&mut bn, &ax_b, Mode::Eval);
        // f(a x + b) - a f(x) must be constant per channel.
        let spread = per_channel_spread(&f_axb, &f_x, a, &[3, 4, 5, 5]);
        assert!(spread < 1e-12, "bn eval deviates from affine by {spread}");

        let mut cn = NormState::new(NormKind::Cn { groups: Some(2) }, 4).unwrap();
        let (g_x, _) = forward_values(&mut cn, &x, Mode::Train);
        let (g_axb, _) = forward_values(&mut cn, &ax_b, Mode::Train);
        let spread = per_channel_spread(&g_axb, &g_x, a, &[3, 4, 5, 5]);
        assert!(spread > 1e-4, "cn unexpectedly affine (spread {spread})");
    }

    /// Max over channels of the spread of `f(ax+b) - a f(x)` within the
    /// channel; zero iff that difference is a per-channel constant.
    fn per_channel_spread(f_axb: &[f64], f_x: &[f64], a: f64, shape: &[usize]) -> f64 {
        let (bsz, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let mut worst = 0.0f64;
        for ch in 0..c {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for bi in 0..bsz {
                let base = (bi * c + ch) * hw;
                for i in 0..hw {
                    let d = f_axb[base + i] - a * f_x[base + i];
                    lo = lo.min(d);
                    hi = hi.max(d);
                }
            }
            worst = worst.max(hi - lo);
        }
        worst
    }

    #[test]
    fn ln_and_in_are_cn_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 6, 3, 3], &mut rng);

        // Layer norm reference: standardize each sample over all elements.
        let mut ln = NormState::new(NormKind::ln(), 6).unwrap();
        let (y, _) = forward_values(&mut ln, &x, Mode::Train);
        let (b, chw) = (2, 6 * 9);
        for bi in 0..b {
            let src = &x.data()[bi * chw..(bi + 1) * chw];
            let mu: f64 = src.iter().sum::<f64>() / chw as f64;
            let var: f64 = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / chw as f64;
            let sd = (var + NORM_EPS).sqrt();
            for (i, v) in src.iter().enumerate() {
                let want = (v - mu) / sd;
                let got = y[bi * chw + i];
                assert!((want - got).abs() < 1e-12);
            }
        }

        // Instance norm reference: standardize each (sample, channel) plane.
        let mut inn = NormState::new(NormKind::Cn { groups: Some(usize::MAX) }, 6).unwrap();
        let (y, _) = forward_values(&mut inn, &x, Mode::Train);
        for bc in 0..b * 6 {
            let src = &x.data()[bc * 9..(bc + 1) * 9];
            let mu: f64 = src.iter().sum::<f64>() / 9.0;
            let var: f64 = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 9.0;
            let sd = (var + NORM_EPS).sqrt();
            for (i, v) in src.iter().enumerate() {
                let want = (v - mu) / sd;
                assert!((want - y[bc * 9 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn groups_must_divide_channels() {
        assert!(NormState::new(NormKind::Cn { groups: Some(5) }, 12).is_err());
        assert!(NormState::new(NormKind::Cn { groups: Some(4) }, 12).is_ok());
    }

    #[test]
    fn auto_group_policy() {
        assert_eq!(auto_groups(32), 8);
        assert_eq!(auto_groups(256), 32);
        assert_eq!(auto_groups(2), 1);
    }

    #[test]
    fn fixed_stats_identity_emits_same_tape_as_bn() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 3, 4, 4], &mut rng);

        let mut bn = NormState::new(NormKind::Bn, 3).unwrap();
        let mut fx = NormState::new(NormKind::FixedStats, 3).unwrap();
        fx.set_fixed_stats(Tensor::zeros(&[3]), Tensor::full(&[3], 1.0))
            .unwrap();

        let (yb, _) = forward_values(&mut bn, &x, Mode::Train);
        let (yf, _) = forward_values(&mut fx, &x, Mode::Train);
        assert_eq!(yb, yf, "identity fixed-stats must equal bn bitwise");
        assert_eq!(bn.running_mean.data(), fx.running_mean.data());
    }

    #[test]
    fn fixed_stats_rescales_to_targets() {
        let mut fx = NormState::new(NormKind::FixedStats, 1).unwrap().with_eps(1e-14);
        fx.set_fixed_stats(
            Tensor::new(vec![1], vec![5.0]).unwrap(),
            Tensor::new(vec![1], vec![2.0]).unwrap(),
        )
        .unwrap();
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        // standardized {-1, 1}, rescaled to 5 ± 2
        let (y, _) = forward_values(&mut fx, &x, Mode::Train);
        assert!((y[0] - 3.0).abs() < 1e-6);
        assert!((y[1] - 7.0).abs() < 1e-6);
    }

    #[test]
    fn bcn_micro_estimator_update_pinned() {
        // x = {2, 4}: batch mean 3; second moment about the old estimate 0
        // is (4 + 16)/2 = 10; with r = 0.5 the estimates move to 1.5, 5.5.
        let mut st = NormState::new(NormKind::BcnMicro { groups: Some(1) }, 1).unwrap();
        st.update_rate = 0.5;
        let x = Tensor::new(vec![1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        forward_values(&mut st, &x, Mode::Train);
        assert!((st.running_mean.data()[0] - 1.5).abs() < 1e-12);
        assert!((st.running_var.data()[0] - 5.5).abs() < 1e-12);
    }

    #[test]
    fn bcn_micro_conventional_variance_variant() {
        // Centering on the batch mean instead: var of {2,4} is 1, so the
        // variance estimate stays at 1.
        let mut st = NormState::new(NormKind::BcnMicro { groups: Some(1) }, 1).unwrap();
        st.update_rate = 0.5;
        st.center_on_running_mean = false;
        let x = Tensor::new(vec![1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        forward_values(&mut st, &x, Mode::Train);
        assert!((st.running_mean.data()[0] - 1.5).abs() < 1e-12);
        assert!((st.running_var.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bcn_micro_zero_rate_reduces_to_scaled_cn() {
        // r = 0 freezes the unit estimates, so stage one is
        // gamma * x / sqrt(1 + eps) + beta and the output is CN of that.
        let mut st = NormState::new(NormKind::BcnMicro { groups: Some(2) }, 4).unwrap();
        st.update_rate = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 4, 3, 3], &mut rng);

        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let f = st.forward(&mut tape, xid, Mode::Train).unwrap();
        assert_eq!(st.running_mean.data(), &[0.0; 4]);
        assert_eq!(st.running_var.data(), &[1.0; 4]);

        let scale = 1.0 / (1.0 + st.eps).sqrt();
        let stage_one = tape.value(f.stage_one.unwrap());
        for (s, v) in stage_one.data().iter().zip(x.data()) {
            assert!((s - v * scale).abs() < 1e-15);
        }

        let mut cn = NormState::new(NormKind::Cn { groups: Some(2) }, 4).unwrap();
        let scaled = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| v * scale).collect(),
        )
        .unwrap();
        let (want, _) = forward_values(&mut cn, &scaled, Mode::Train);
        for (a, b) in tape.value(f.out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bcn_micro_estimates_are_off_the_tape() {
        // Gradients w.r.t. x in train mode must equal those of an eval
        // forward whose estimates are pre-set to the post-update values:
        // the update itself contributes nothing to the gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[1, 2, 2, 2], &mut rng);

        let mut train_state = NormState::new(NormKind::BcnMicro { groups: Some(1) }, 2).unwrap();
        train_state.update_rate = 0.3;
        let mut tape_a = Tape::new();
        let xa = tape_a.leaf(x.clone());
        let fa = train_state.forward(&mut tape_a, xa, Mode::Train).unwrap();
        let sa = tape_a.sum_all(fa.out).unwrap();
        let la = tape_a.mul(sa, sa).unwrap();
        tape_a.backward(la).unwrap();

        // train_state now holds the post-update estimates.
        let mut eval_state = train_state.clone();
        let mut tape_b = Tape::new();
        let xb = tape_b.leaf(x);
        let fb = eval_state.forward(&mut tape_b, xb, Mode::Eval).unwrap();
        let sb = tape_b.sum_all(fb.out).unwrap();
        let lb = tape_b.mul(sb, sb).unwrap();
        tape_b.backward(lb).unwrap();

        assert_eq!(
            tape_a.grad(xa).unwrap().data(),
            tape_b.grad(xb).unwrap().data()
        );
    }

    #[test]
    fn bcn_micro_works_at_batch_one_where_bn_errors() {
        let x = Tensor::new(vec![1, 2, 1, 1], vec![0.3, -0.9]).unwrap();
        let mut bn = NormState::new(NormKind::Bn, 2).unwrap();
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        assert!(bn.forward(&mut tape, xid, Mode::Train).is_err());

        let mut micro = NormState::new(NormKind::BcnMicro { groups: Some(1) }, 2).unwrap();
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        assert!(micro.forward(&mut tape, xid, Mode::Train).is_ok());
    }

    #[test]
    fn bcn_micro_eval_freezes_estimates() {
        let mut st = NormState::new(NormKind::BcnMicro { groups: Some(1) }, 1).unwrap();
        st.update_rate = 0.5;
        let x = Tensor::new(vec![1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        forward_values(&mut st, &x, Mode::Eval);
        assert_eq!(st.running_mean.data(), &[0.0]);
        assert_eq!(st.running_var.data(), &[1.0]);
    }

    #[test]
    fn bcn_large_is_bn_then_cn() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[2, 4, 3, 3], &mut rng);
        let mut bcn = NormState::new(NormKind::BcnLarge { groups: Some(2) }, 4).unwrap();
        let (y, _) = forward_values(&mut bcn, &x, Mode::Train);

        let mut bn = NormState::new(NormKind::Bn, 4).unwrap();
        let (mid, _) = forward_values(&mut bn, &x, Mode::Train);
        let mut cn = NormState::new(NormKind::Cn { groups: Some(2) }, 4).unwrap();
        let (want, _) = forward_values(&mut cn, &Tensor::new(x.shape().to_vec(), mid).unwrap(), Mode::Train);
        assert_eq!(y, want);
    }
}
