//! Reference architectures: a 4-layer conv net and a small basic-block
//! residual net, both 32×32 inputs, with the norm kind and weight
//! reparameterization chosen per model.
//!
//! Construction draws parameters from a single seeded stream in a fixed
//! order that does not depend on the norm or reparam kind: affine scales
//! and shifts are constants (1, 0) and WN/CWN gains are computed from the
//! raw weights, so two models built from the same seed share their raw
//! conv weights no matter how those weights are later used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::norm::{Mode, NormKind, NormParam, NormState};
use crate::reparam::{self, ReparamKind, WsNodes, WS_EPS_F64};
use crate::seeds;
use crate::tensor::{Grouping, Tape, Tensor, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// 4 × (3×3 conv → norm → ReLU → 2× average pool), then global average
    /// pool and a fully-connected head. All convs have 32 output channels.
    ConvNet4,
    /// Basic-block residual net of depth 6n+2 ∈ {8, 14, 20}: a stem conv,
    /// three stages of n blocks at 16/32/64 channels (stride 2 between
    /// stages, 1×1 conv projections on the shortcuts that change shape),
    /// global average pool, fully-connected head.
    MiniResNet(usize),
}

impl Arch {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "convnet4" => Arch::ConvNet4,
            "resnet8" => Arch::MiniResNet(8),
            "resnet14" => Arch::MiniResNet(14),
            "resnet20" => Arch::MiniResNet(20),
            other => return Err(Error::Parse(format!("unknown architecture {other:?}"))),
        })
    }

    pub fn name(&self) -> String {
        match self {
            Arch::ConvNet4 => "convnet4".into(),
            Arch::MiniResNet(d) => format!("resnet{d}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub arch: Arch,
    pub norm: NormKind,
    pub reparam: ReparamKind,
    pub classes: usize,
    pub in_channels: usize,
    /// Standardization eps for WS convs.
    pub ws_eps: f64,
}

impl ModelSpec {
    pub fn new(arch: Arch, norm: NormKind, reparam: ReparamKind) -> Self {
        ModelSpec {
            arch,
            norm,
            reparam,
            classes: 10,
            in_channels: 3,
            ws_eps: WS_EPS_F64,
        }
    }
}

/// Geometry of one convolution site.
#[derive(Clone, Copy, Debug)]
struct ConvDef {
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

/// One residual block's indices into the conv/norm tables.
#[derive(Clone, Copy, Debug)]
struct BlockDef {
    conv_a: usize,
    conv_b: usize,
    /// Projection conv on the shortcut, present when shape changes.
    proj: Option<usize>,
}

#[derive(Clone, Debug)]
enum Wiring {
    ConvNet4,
    ResNet { blocks: Vec<BlockDef> },
}

/// Identifies one trainable tensor of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRef {
    Conv(usize),
    Gain(usize),
    Norm(usize, NormParam),
    FcWeight,
    FcBias,
}

impl ParamRef {
    /// Weight decay applies to conv and FC weights only; scales, shifts,
    /// gains, and biases are excluded.
    pub fn decays(&self) -> bool {
        matches!(self, ParamRef::Conv(_) | ParamRef::FcWeight)
    }
}

/// Tape handles from one model forward.
pub struct ModelForward {
    pub logits: TensorId,
    /// Every trainable parameter registered on this tape.
    pub binds: Vec<(ParamRef, TensorId)>,
    /// Raw conv outputs (pre-norm), indexed like `Model::convs`.
    pub conv_outs: Vec<TensorId>,
    /// Inputs of each ReLU (post-norm; for residual blocks, post-sum).
    pub pre_relu: Vec<TensorId>,
    /// Standardization nodes per conv when the model uses WS.
    pub ws: Vec<Option<WsNodes>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub convs: Vec<Tensor>,
    pub gains: Vec<Option<Tensor>>,
    pub norms: Vec<NormState>,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    conv_defs: Vec<ConvDef>,
    wiring: Wiring,
}

const CONVNET4_CHANNELS: usize = 32;
const RESNET_STAGES: [usize; 3] = [16, 32, 64];

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let mut conv_defs = Vec::new();
    let wiring = match spec.arch {
        Arch::ConvNet4 => {
            let mut in_c = spec.in_channels;
            for _ in 0..4 {
                conv_defs.push(ConvDef {
                    in_c,
                    out_c: CONVNET4_CHANNELS,
                    k: 3,
                    stride: 1,
                    pad: 1,
                });
                in_c = CONVNET4_CHANNELS;
            }
            Wiring::ConvNet4
        }
        Arch::MiniResNet(depth) => {
            if depth < 8 || (depth - 2) % 6 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "residual depth must be 6n+2 with n >= 1, got {depth}"
                )));
            }
            let n = (depth - 2) / 6;
            conv_defs.push(ConvDef {
                in_c: spec.in_channels,
                out_c: RESNET_STAGES[0],
                k: 3,
                stride: 1,
                pad: 1,
            });
            let mut blocks = Vec::new();
            let mut in_c = RESNET_STAGES[0];
            for (s, &ch) in RESNET_STAGES.iter().enumerate() {
                for b in 0..n {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    let conv_a = conv_defs.len();
                    conv_defs.push(ConvDef {
                        in_c,
                        out_c: ch,
                        k: 3,
                        stride,
                        pad: 1,
                    });
                    let conv_b = conv_defs.len();
                    conv_defs.push(ConvDef {
                        in_c: ch,
                        out_c: ch,
                        k: 3,
                        stride: 1,
                        pad: 1,
                    });
                    let proj = if in_c != ch || stride != 1 {
                        let idx = conv_defs.len();
                        conv_defs.push(ConvDef {
                            in_c,
                            out_c: ch,
                            k: 1,
                            stride,
                            pad: 0,
                        });
                        Some(idx)
                    } else {
                        None
                    };
                    blocks.push(BlockDef {
                        conv_a,
                        conv_b,
                        proj,
                    });
                    in_c = ch;
                }
            }
            Wiring::ResNet { blocks }
        }
    };

    // One init stream; draw order is the conv table then the FC head.
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, seeds::stream::INIT));
    let mut convs = Vec::with_capacity(conv_defs.len());
    for def in &conv_defs {
        let fan_in = def.in_c * def.k * def.k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let shape = [def.out_c, def.in_c, def.k, def.k];
        convs.push(Tensor::rand_uniform(&shape, -bound, bound, &mut rng));
    }
    let feat = conv_defs.last().unwrap().out_c;
    let fc_bound = (6.0 / (feat + spec.classes) as f64).sqrt();
    let fc_w = Tensor::rand_uniform(&[feat, spec.classes], -fc_bound, fc_bound, &mut rng);
    let fc_b = Tensor::zeros(&[spec.classes]);

    let gains = convs
        .iter()
        .map(|w| -> Result<Option<Tensor>> {
            if spec.reparam.has_gain() {
                let g = reparam::initial_gains(w, spec.reparam)?;
                Ok(Some(Tensor::new(vec![g.len()], g)?))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let norms = conv_defs
        .iter()
        .map(|def| NormState::new(spec.norm, def.out_c))
        .collect::<Result<Vec<_>>>()?;

    Ok(Model {
        spec: spec.clone(),
        convs,
        gains,
        norms,
        fc_w,
        fc_b,
        conv_defs,
        wiring,
    })
}

impl Model {
    pub fn conv_count(&self) -> usize {
        self.convs.len()
    }

    /// Canonical parameter order; optimizer state is indexed by position in
    /// this list.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut refs = Vec::new();
        for i in 0..self.convs.len() {
            refs.push(ParamRef::Conv(i));
            if self.gains[i].is_some() {
                refs.push(ParamRef::Gain(i));
            }
        }
        for (i, n) in self.norms.iter().enumerate() {
            if matches!(n.kind, NormKind::None) {
                continue;
            }
            refs.push(ParamRef::Norm(i, NormParam::Gamma));
            refs.push(ParamRef::Norm(i, NormParam::Beta));
            if n.gamma_c.is_some() {
                refs.push(ParamRef::Norm(i, NormParam::GammaC));
                refs.push(ParamRef::Norm(i, NormParam::BetaC));
            }
        }
        refs.push(ParamRef::FcWeight);
        refs.push(ParamRef::FcBias);
        refs
    }

    pub fn param(&self, r: ParamRef) -> Option<&Tensor> {
        match r {
            ParamRef::Conv(i) => self.convs.get(i),
            ParamRef::Gain(i) => self.gains.get(i).and_then(|g| g.as_ref()),
            ParamRef::Norm(i, p) => self.norms.get(i).and_then(|n| n.param(p)),
            ParamRef::FcWeight => Some(&self.fc_w),
            ParamRef::FcBias => Some(&self.fc_b),
        }
    }

    pub fn param_mut(&mut self, r: ParamRef) -> Option<&mut Tensor> {
        match r {
            ParamRef::Conv(i) => self.convs.get_mut(i),
            ParamRef::Gain(i) => self.gains.get_mut(i).and_then(|g| g.as_mut()),
            ParamRef::Norm(i, p) => self.norms.get_mut(i).and_then(|n| n.param_mut(p)),
            ParamRef::FcWeight => Some(&mut self.fc_w),
            ParamRef::FcBias => Some(&mut self.fc_b),
        }
    }

    /// Names of every tensor that belongs in a checkpoint (parameters and
    /// statistics buffers), in a stable order.
    pub fn state_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("conv{i}.w"));
            if self.gains[i].is_some() {
                names.push(format!("conv{i}.gain"));
            }
        }
        for (i, n) in self.norms.iter().enumerate() {
            names.push(format!("norm{i}.gamma"));
            names.push(format!("norm{i}.beta"));
            if n.gamma_c.is_some() {
                names.push(format!("norm{i}.gamma_c"));
                names.push(format!("norm{i}.beta_c"));
            }
            names.push(format!("norm{i}.running_mean"));
            names.push(format!("norm{i}.running_var"));
            if n.fixed_mean.is_some() {
                names.push(format!("norm{i}.fixed_mean"));
                names.push(format!("norm{i}.fixed_scale"));
            }
        }
        names.push("fc.w".into());
        names.push("fc.b".into());
        names
    }

    pub fn state_get(&self, name: &str) -> Option<&Tensor> {
        let (head, field) = name.split_once('.')?;
        if let Some(i) = head.strip_prefix("conv") {
            let i: usize = i.parse().ok()?;
            return match field {
                "w" => self.convs.get(i),
                "gain" => self.gains.get(i)?.as_ref(),
                _ => None,
            };
        }
        if let Some(i) = head.strip_prefix("norm") {
            let i: usize = i.parse().ok()?;
            let n = self.norms.get(i)?;
            return match field {
                "gamma" => Some(&n.gamma),
                "beta" => Some(&n.beta),
                "gamma_c" => n.gamma_c.as_ref(),
                "beta_c" => n.beta_c.as_ref(),
                "running_mean" => Some(&n.running_mean),
                "running_var" => Some(&n.running_var),
                "fixed_mean" => n.fixed_mean.as_ref(),
                "fixed_scale" => n.fixed_scale.as_ref(),
                _ => None,
            };
        }
        match name {
            "fc.w" => Some(&self.fc_w),
            "fc.b" => Some(&self.fc_b),
            _ => None,
        }
    }

    fn state_slot_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (head, field) = name.split_once('.')?;
        if let Some(i) = head.strip_prefix("conv") {
            let i: usize = i.parse().ok()?;
            return match field {
                "w" => self.convs.get_mut(i),
                "gain" => self.gains.get_mut(i)?.as_mut(),
                _ => None,
            };
        }
        if let Some(i) = head.strip_prefix("norm") {
            let i: usize = i.parse().ok()?;
            let n = self.norms.get_mut(i)?;
            return match field {
                "gamma" => Some(&mut n.gamma),
                "beta" => Some(&mut n.beta),
                "gamma_c" => n.gamma_c.as_mut(),
                "beta_c" => n.beta_c.as_mut(),
                "running_mean" => Some(&mut n.running_mean),
                "running_var" => Some(&mut n.running_var),
                "fixed_mean" => n.fixed_mean.as_mut(),
                "fixed_scale" => n.fixed_scale.as_mut(),
                _ => None,
            };
        }
        match name {
            "fc.w" => Some(&mut self.fc_w),
            "fc.b" => Some(&mut self.fc_b),
            _ => None,
        }
    }

    /// Replaces a named tensor, shape-checked; the checkpoint loader calls
    /// this for every stored entry.
    pub fn state_set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.state_slot_mut(name) {
            None => Err(Error::Checkpoint(format!("no tensor named {name:?}"))),
            Some(t) if t.shape() != value.shape() => Err(Error::Checkpoint(format!(
                "tensor {name:?}: stored shape {:?}, model expects {:?}",
                value.shape(),
                t.shape()
            ))),
            Some(t) => {
                *t = value;
                Ok(())
            }
        }
    }

    /// Puts conv `i`'s effective weight on the tape: the raw leaf plus any
    /// reparameterization composite.
    fn conv_weight(
        &self,
        tape: &mut Tape,
        i: usize,
        binds: &mut Vec<(ParamRef, TensorId)>,
        ws: &mut Vec<Option<WsNodes>>,
    ) -> Result<TensorId> {
        let raw = tape.leaf(self.convs[i].clone());
        binds.push((ParamRef::Conv(i), raw));
        let eff = match self.spec.reparam {
            ReparamKind::None => {
                ws.push(None);
                raw
            }
            ReparamKind::MeanOnly => {
                ws.push(None);
                reparam::center_rows(tape, raw)?
            }
            ReparamKind::Ws => {
                let nodes = reparam::ws_standardize(tape, raw, self.spec.ws_eps)?;
                let out = nodes.standardized;
                ws.push(Some(nodes));
                out
            }
            ReparamKind::Wn | ReparamKind::Cwn => {
                let gain = tape.leaf(self.gains[i].as_ref().unwrap().clone());
                binds.push((ParamRef::Gain(i), gain));
                ws.push(None);
                if self.spec.reparam == ReparamKind::Wn {
                    reparam::wn_standardize(tape, raw, gain)?
                } else {
                    reparam::cwn_standardize(tape, raw, gain)?
                }
            }
        };
        Ok(eff)
    }

    fn norm_site(
        &mut self,
        tape: &mut Tape,
        i: usize,
        x: TensorId,
        mode: Mode,
        binds: &mut Vec<(ParamRef, TensorId)>,
    ) -> Result<TensorId> {
        let nf = self.norms[i].forward(tape, x, mode)?;
        for (p, id) in nf.params {
            binds.push((ParamRef::Norm(i, p), id));
        }
        Ok(nf.out)
    }

    /// Runs the model on `x` (`[b, in_channels, 32, 32]`). Train mode lets
    /// norm layers update their statistics buffers.
    pub fn forward(&mut self, tape: &mut Tape, x: TensorId, mode: Mode) -> Result<ModelForward> {
        let mut binds = Vec::new();
        let mut conv_outs = Vec::new();
        let mut pre_relu = Vec::new();
        let mut ws = Vec::new();

        let features = match &self.wiring {
            Wiring::ConvNet4 => {
                let mut cur = x;
                for l in 0..4 {
                    let w = self.conv_weight(tape, l, &mut binds, &mut ws)?;
                    let def = self.conv_defs[l];
                    let y = tape.conv2d(cur, w, def.stride, def.pad)?;
                    conv_outs.push(y);
                    let n = self.norm_site(tape, l, y, mode, &mut binds)?;
                    pre_relu.push(n);
                    let a = tape.relu(n)?;
                    cur = tape.avg_pool2(a)?;
                }
                cur
            }
            Wiring::ResNet { blocks } => {
                let blocks = blocks.clone();
                let w = self.conv_weight(tape, 0, &mut binds, &mut ws)?;
                let def = self.conv_defs[0];
                let y = tape.conv2d(x, w, def.stride, def.pad)?;
                conv_outs.push(y);
                let n = self.norm_site(tape, 0, y, mode, &mut binds)?;
                pre_relu.push(n);
                let mut cur = tape.relu(n)?;
                for blk in &blocks {
                    let wa = self.conv_weight(tape, blk.conv_a, &mut binds, &mut ws)?;
                    let da = self.conv_defs[blk.conv_a];
                    let a = tape.conv2d(cur, wa, da.stride, da.pad)?;
                    conv_outs.push(a);
                    let na = self.norm_site(tape, blk.conv_a, a, mode, &mut binds)?;
                    pre_relu.push(na);
                    let h = tape.relu(na)?;

                    let wb = self.conv_weight(tape, blk.conv_b, &mut binds, &mut ws)?;
                    let db = self.conv_defs[blk.conv_b];
                    let b = tape.conv2d(h, wb, db.stride, db.pad)?;
                    conv_outs.push(b);
                    let nb = self.norm_site(tape, blk.conv_b, b, mode, &mut binds)?;

                    let skip = match blk.proj {
                        None => cur,
                        Some(pi) => {
                            let wp = self.conv_weight(tape, pi, &mut binds, &mut ws)?;
                            let dp = self.conv_defs[pi];
                            let p = tape.conv2d(cur, wp, dp.stride, dp.pad)?;
                            conv_outs.push(p);
                            self.norm_site(tape, pi, p, mode, &mut binds)?
                        }
                    };
                    let sum = tape.add(nb, skip)?;
                    pre_relu.push(sum);
                    cur = tape.relu(sum)?;
                }
                cur
            }
        };

        let gap = tape.global_avg_pool(features)?;
        let fc_w = tape.leaf(self.fc_w.clone());
        binds.push((ParamRef::FcWeight, fc_w));
        let xw = tape.linear(gap, fc_w)?;
        let fc_b = tape.leaf(self.fc_b.clone());
        binds.push((ParamRef::FcBias, fc_b));
        let b = tape.value(xw).shape()[0];
        let grouping = Grouping::Channels {
            batch: b,
            channels: self.spec.classes,
            spatial: 1,
        };
        let bias = tape.group_broadcast(fc_b, grouping, &[b, self.spec.classes])?;
        let logits = tape.add(xw, bias)?;

        Ok(ModelForward {
            logits,
            binds,
            conv_outs,
            pre_relu,
            ws,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reparam::ws_forward;

    fn spec(arch: Arch, norm: NormKind, rep: ReparamKind) -> ModelSpec {
        ModelSpec::new(arch, norm, rep)
    }

    #[test]
    fn convnet4_logit_shape() {
        let mut m = build_model(&spec(Arch::ConvNet4, NormKind::gn(), ReparamKind::Ws), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 3, 32, 32]));
        let f = m.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.value(f.logits).shape(), &[3, 10]);
        assert_eq!(f.conv_outs.len(), 4);
        assert_eq!(f.pre_relu.len(), 4);
        assert!(f.ws.iter().all(|w| w.is_some()));
    }

    #[test]
    fn resnet_depths_and_logits() {
        for (depth, expect_convs) in [(8, 9), (14, 15), (20, 21)] {
            let m = build_model(
                &spec(Arch::MiniResNet(depth), NormKind::gn(), ReparamKind::None),
                1,
            )
            .unwrap();
            assert_eq!(m.conv_count(), expect_convs, "depth {depth}");
        }
        let mut m =
            build_model(&spec(Arch::MiniResNet(8), NormKind::ln(), ReparamKind::Ws), 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 32, 32]));
        let f = m.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.value(f.logits).shape(), &[2, 10]);
        // stem + 3 blocks × (a, b) + 2 projections
        assert_eq!(f.conv_outs.len(), 9);
        // stem + per block: post-a and post-sum
        assert_eq!(f.pre_relu.len(), 7);
    }

    #[test]
    fn bad_resnet_depth_rejected() {
        assert!(build_model(
            &spec(Arch::MiniResNet(9), NormKind::gn(), ReparamKind::None),
            1
        )
        .is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&spec(Arch::ConvNet4, NormKind::Bn, ReparamKind::None), 7).unwrap();
        let b = build_model(&spec(Arch::ConvNet4, NormKind::Bn, ReparamKind::None), 7).unwrap();
        for (x, y) in a.convs.iter().zip(&b.convs) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(a.fc_w.data(), b.fc_w.data());
        let c = build_model(&spec(Arch::ConvNet4, NormKind::Bn, ReparamKind::None), 8).unwrap();
        assert_ne!(a.convs[0].data(), c.convs[0].data());
    }

    #[test]
    fn reparam_kind_does_not_change_raw_init() {
        // Same seed, None vs WS: identical raw weights; the effective
        // weights differ exactly by per-row standardization.
        let plain = build_model(&spec(Arch::ConvNet4, NormKind::gn(), ReparamKind::None), 3).unwrap();
        let mut wsm = build_model(&spec(Arch::ConvNet4, NormKind::gn(), ReparamKind::Ws), 3).unwrap();
        for (x, y) in plain.convs.iter().zip(&wsm.convs) {
            assert_eq!(x.data(), y.data());
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let f = wsm.forward(&mut tape, x, Mode::Eval).unwrap();
        let nodes = f.ws[0].as_ref().unwrap();
        let expect = ws_forward(&plain.convs[0], wsm.spec.ws_eps).unwrap();
        assert_eq!(tape.value(nodes.standardized).data(), expect.standardized.data());
    }

    #[test]
    fn param_refs_cover_state_names() {
        let m = build_model(
            &spec(Arch::MiniResNet(8), NormKind::BcnMicro { groups: None }, ReparamKind::Cwn),
            5,
        )
        .unwrap();
        for r in m.param_refs() {
            assert!(m.param(r).is_some(), "missing {r:?}");
        }
        for name in m.state_names() {
            assert!(m.state_get(&name).is_some(), "missing {name}");
        }
    }

    #[test]
    fn state_set_checks_names_and_shapes() {
        let mut m = build_model(&spec(Arch::ConvNet4, NormKind::Bn, ReparamKind::None), 1).unwrap();
        assert!(matches!(
            m.state_set("conv9.w", Tensor::zeros(&[1])),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            m.state_set("conv0.w", Tensor::zeros(&[1, 2, 3])),
            Err(Error::Checkpoint(_))
        ));
        let shape = m.convs[0].shape().to_vec();
        m.state_set("conv0.w", Tensor::zeros(&shape)).unwrap();
        assert!(m.convs[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gains_present_only_for_gain_kinds() {
        let wn = build_model(&spec(Arch::ConvNet4, NormKind::gn(), ReparamKind::Wn), 1).unwrap();
        assert!(wn.gains.iter().all(|g| g.is_some()));
        let plain = build_model(&spec(Arch::ConvNet4, NormKind::gn(), ReparamKind::None), 1).unwrap();
        assert!(plain.gains.iter().all(|g| g.is_none()));
    }
}
