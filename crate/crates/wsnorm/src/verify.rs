//! Shared verification suites: finite-difference gradient checks over every
//! differentiable op, the per-step gradient-identity run, and the Hessian
//! spot checks. The CLI subcommands and the acceptance tests both call into
//! these so there is exactly one implementation of each oracle.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data;
use crate::diagnostics::{hessian_checks, HessianReport};
use crate::error::{Error, Result};
use crate::model::{build_model, Arch, Model, ModelSpec};
use crate::norm::{Mode, NormKind, NormState};
use crate::reparam::{
    center_rows, cwn_standardize, wn_standardize, ws_standardize, ReparamKind, WS_EPS_F64,
};
use crate::seeds::{self, stream};
use crate::tensor::{finite_diff_grad, max_rel_err, Grouping, Tape, Tensor, TensorId};
use crate::train::{DiagCollector, TrainConfig, Trainer};

/// Default finite-difference step for 64-bit checks.
pub const FD_STEP: f64 = 1e-5;
/// Gradient-check pass threshold (max relative error, 64-bit).
pub const GRADCHECK_TOL: f64 = 1e-5;
/// Step for whole-model parameter checks. Smaller than [`FD_STEP`] so the
/// kink margin can stay tight: a model has tens of thousands of pre-ReLU
/// values and the probability that a random batch keeps all of them clear
/// of the kink shrinks with the margin.
const MODEL_FD_STEP: f64 = 1e-6;
/// Pre-ReLU values closer to the kink than this get the batch resampled;
/// a ±`MODEL_FD_STEP` parameter perturbation moves any activation by far
/// less, so no ReLU flips during the differencing.
const KINK_MARGIN: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub op: String,
    pub max_rel_err: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> Option<&GradcheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Builds a tape computing a scalar loss from the checked input value and
/// returns `(loss, checked_leaf)`. Called repeatedly with perturbed inputs,
/// so it must be a pure function of its `Tensor` argument.
type CaseBuilder<'a> = dyn FnMut(&mut Tape, &Tensor) -> Result<(TensorId, TensorId)> + 'a;

/// Max relative error between tape gradient and central differences for one
/// case instance.
fn grad_err(build: &mut CaseBuilder, x0: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, xid) = build(&mut tape, x0)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xid)
        .ok_or_else(|| Error::InvalidArgument("checked input has no gradient".into()))?
        .clone();
    let numeric = finite_diff_grad(
        &mut |x: &Tensor| {
            let mut t = Tape::new();
            let (l, _) = build(&mut t, x)?;
            Ok(t.value(l).data()[0])
        },
        x0,
        FD_STEP,
    )?;
    Ok(max_rel_err(&analytic, &numeric))
}

/// Σy²: couples every output element into the scalar loss so any misplaced
/// or missing Jacobian entry shows up against finite differences.
fn sq_sum(tape: &mut Tape, y: TensorId) -> Result<TensorId> {
    let p = tape.mul(y, y)?;
    tape.sum_all(p)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, rng)
}

/// Strictly positive values, bounded away from zero (for sqrt/div cases).
fn rand_pos(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| 0.5 + rng.gen::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero on both sides (for the ReLU kink).
fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen::<f64>() - 0.5;
            v + v.signum() * 10.0 * KINK_MARGIN
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

struct Suite {
    base_seed: u64,
    seeds_per_op: usize,
    entries: Vec<GradcheckEntry>,
    case_index: u64,
    /// Only run ops whose name contains this; indices still advance for
    /// skipped cases so each op sees the same seeds either way.
    filter: Option<String>,
}

impl Suite {
    fn rng(&self, seed_i: usize) -> ChaCha8Rng {
        let s = seeds::derive2(
            self.base_seed,
            stream::VERIFY,
            self.case_index * 1000 + seed_i as u64,
        );
        ChaCha8Rng::seed_from_u64(s)
    }

    /// Runs one named case across all seeds. `make` draws the instance from
    /// the seed rng and returns the checked input plus the tape builder.
    fn case<F>(&mut self, name: &str, mut make: F) -> Result<()>
    where
        F: FnMut(&mut ChaCha8Rng) -> Result<(Tensor, Box<CaseBuilder<'static>>)>,
    {
        self.raw_case(name, |rng| {
            let (x0, mut build) = make(rng)?;
            grad_err(&mut *build, &x0)
        })
    }

    /// Like [`Suite::case`] but the closure measures its own max relative
    /// error (used by the whole-model checks, which sample coordinates).
    fn raw_case<F>(&mut self, name: &str, mut run: F) -> Result<()>
    where
        F: FnMut(&mut ChaCha8Rng) -> Result<f64>,
    {
        if self
            .filter
            .as_deref()
            .is_some_and(|f| !name.contains(f))
        {
            self.case_index += 1;
            return Ok(());
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.seeds_per_op {
            let mut rng = self.rng(i);
            worst = worst.max(run(&mut rng)?);
        }
        self.entries.push(GradcheckEntry {
            op: name.to_string(),
            max_rel_err: worst,
            seeds: self.seeds_per_op,
        });
        self.case_index += 1;
        Ok(())
    }
}

/// The full gradient-oracle suite: elementwise ops, reductions, structured
/// ops, weight reparameterizations, every normalizer, and whole models.
pub fn run_gradcheck(base_seed: u64, seeds_per_op: usize) -> Result<GradcheckReport> {
    run_gradcheck_filtered(base_seed, seeds_per_op, None)
}

/// [`run_gradcheck`] restricted to ops whose name contains `filter`.
pub fn run_gradcheck_filtered(
    base_seed: u64,
    seeds_per_op: usize,
    filter: Option<&str>,
) -> Result<GradcheckReport> {
    let mut s = Suite {
        base_seed,
        seeds_per_op,
        entries: Vec::new(),
        case_index: 0,
        filter: filter.map(str::to_string),
    };

    elementwise_cases(&mut s)?;
    reduction_cases(&mut s)?;
    structured_cases(&mut s)?;
    reparam_cases(&mut s)?;
    norm_cases(&mut s)?;
    model_cases(&mut s)?;

    Ok(GradcheckReport {
        entries: s.entries,
        tolerance: GRADCHECK_TOL,
    })
}

fn elementwise_cases(s: &mut Suite) -> Result<()> {
    s.case("add.lhs", |rng| {
        let x = randn(rng, &[3, 4]);
        let other = randn(rng, &[3, 4]);
        Ok((
            x,
            Box::new(move |tape, x| {
                let a = tape.leaf(x.clone());
                let b = tape.constant(other.clone());
                let y = tape.add(a, b)?;
                Ok((sq_sum(tape, y)?, a))
            }),
        ))
    })?;
    s.case("sub.rhs", |rng| {
        let x = randn(rng, &[2, 5]);
        let other = randn(rng, &[2, 5]);
        Ok((
            x,
            Box::new(move |tape, x| {
                let a = tape.constant(other.clone());
                let b = tape.leaf(x.clone());
                let y = tape.sub(a, b)?;
                Ok((sq_sum(tape, y)?, b))
            }),
        ))
    })?;
    s.case("mul.lhs", |rng| {
        let x = randn(rng, &[4, 3]);
        let other = randn(rng, &[4, 3]);
        Ok((
            x,
            Box::new(move |tape, x| {
                let a = tape.leaf(x.clone());
                let b = tape.constant(other.clone());
                let y = tape.mul(a, b)?;
                Ok((sq_sum(tape, y)?, a))
            }),
        ))
    })?;
    s.case("div.lhs", |rng| {
        let x = randn(rng, &[6]);
        let den = rand_pos(rng, &[6]);
        Ok((
            x,
            Box::new(move |tape, x| {
                let a = tape.leaf(x.clone());
                let b = tape.constant(den.clone());
                let y = tape.div(a, b)?;
                Ok((sq_sum(tape, y)?, a))
            }),
        ))
    })?;
    s.case("div.rhs", |rng| {
        let x = rand_pos(rng, &[6]);
        let num = randn(rng, &[6]);
        Ok((
            x,
            Box::new(move |tape, x| {
                let a = tape.constant(num.clone());
                let b = tape.leaf(x.clone());
                let y = tape.div(a, b)?;
                Ok((sq_sum(tape, y)?, b))
            }),
        ))
    })?;
    s.case("add_scalar", |rng| {
        let x = randn(rng, &[2, 3]);
        let c: f64 = rng.gen::<f64>() - 0.5;
        Ok((
            x,
            Box::new(move |tape, x| {
                let a = tape.leaf(x.clone());
                let y = tape.add_scalar(a, c)?;
                Ok((sq_sum(tape, y)?, a))
            }),
        ))
    })?;
    s.case("mul_scalar", |rng| {
        let x = randn(rng, &[7]);
        let c: f64 = rng.gen::<f64>() + 0.5;
        Ok((
            x,
            Box::new(move |tape, x| {
                let a = tape.leaf(x.clone());
                let y = tape.mul_scalar(a, c)?;
                Ok((sq_sum(tape, y)?, a))
            }),
        ))
    })?;
    s.case("sqrt", |rng| {
        let x = rand_pos(rng, &[3, 3]);
        Ok((
            x,
            Box::new(|tape, x| {
                let a = tape.leaf(x.clone());
                let y = tape.sqrt(a)?;
                Ok((sq_sum(tape, y)?, a))
            }),
        ))
    })?;
    s.case("relu", |rng| {
        let x = rand_off_zero(rng, &[4, 4]);
        Ok((
            x,
            Box::new(|tape, x| {
                let a = tape.leaf(x.clone());
                let y = tape.relu(a)?;
                Ok((sq_sum(tape, y)?, a))
            }),
        ))
    })?;
    Ok(())
}

fn reduction_cases(s: &mut Suite) -> Result<()> {
    s.case("sum_all", |rng| {
        let x = randn(rng, &[3, 5]);
        Ok((
            x,
            Box::new(|tape, x| {
                let a = tape.leaf(x.clone());
                // Compose with a square so the loss is not linear in x.
                let y = tape.mul(a, a)?;
                Ok((tape.sum_all(y)?, a))
            }),
        ))
    })?;

    let groupings: [(&str, Grouping, Vec<usize>); 3] = [
        (
            "rows",
            Grouping::Rows { rows: 3, cols: 8 },
            vec![3, 2, 2, 2],
        ),
        (
            "channels",
            Grouping::Channels {
                batch: 2,
                channels: 3,
                spatial: 4,
            },
            vec![2, 3, 2, 2],
        ),
        (
            "channel_groups",
            Grouping::ChannelGroups {
                batch: 2,
                groups: 2,
                channels_per_group: 2,
                spatial: 4,
            },
            vec![2, 4, 2, 2],
        ),
    ];
    for (tag, grouping, shape) in groupings {
        s.case(&format!("group_mean.{tag}"), |rng| {
            let x = randn(rng, &shape);
            let g = grouping;
            Ok((
                x,
                Box::new(move |tape, x| {
                    let a = tape.leaf(x.clone());
                    let m = tape.group_mean(a, g)?;
                    Ok((sq_sum(tape, m)?, a))
                }),
            ))
        })?;
        s.case(&format!("group_broadcast.{tag}"), |rng| {
            let x = randn(rng, &shape);
            let g = grouping;
            let shape = shape.clone();
            Ok((
                x,
                Box::new(move |tape, x| {
                    // x − broadcast(mean(x)): broadcast feeds a non-trivial
                    // downstream so its backward (group summation) is load-bearing.
                    let a = tape.leaf(x.clone());
                    let m = tape.group_mean(a, g)?;
                    let mb = tape.group_broadcast(m, g, &shape)?;
                    let y = tape.sub(a, mb)?;
                    Ok((sq_sum(tape, y)?, a))
                }),
            ))
        })?;
    }
    Ok(())
}

fn structured_cases(s: &mut Suite) -> Result<()> {
    s.case("avg_pool2", |rng| {
        let x = randn(rng, &[2, 3, 4, 6]);
        Ok((
            x,
            Box::new(|tape, x| {
                let a = tape.leaf(x.clone());
                let y = tape.avg_pool2(a)?;
                Ok((sq_sum(tape, y)?, a))
            }),
        ))
    })?;
    s.case("global_avg_pool", |rng| {
        let x = randn(rng, &[2, 4, 3, 5]);
        Ok((
            x,
            Box::new(|tape, x| {
                let a = tape.leaf(x.clone());
                let y = tape.global_avg_pool(a)?;
                Ok((sq_sum(tape, y)?, a))
            }),
        ))
    })?;
    s.case("linear.input", |rng| {
        let x = randn(rng, &[3, 5]);
        let w = randn(rng, &[5, 4]);
        Ok((
            x,
            Box::new(move |tape, x| {
                let a = tape.leaf(x.clone());
                let wid = tape.constant(w.clone());
                let y = tape.linear(a, wid)?;
                Ok((sq_sum(tape, y)?, a))
            }),
        ))
    })?;
    s.case("linear.weight", |rng| {
        let w = randn(rng, &[5, 4]);
        let x = randn(rng, &[3, 5]);
        Ok((
            w,
            Box::new(move |tape, w| {
                let xid = tape.constant(x.clone());
                let wid = tape.leaf(w.clone());
                let y = tape.linear(xid, wid)?;
                Ok((sq_sum(tape, y)?, wid))
            }),
        ))
    })?;

    let conv_shapes: [(&str, Vec<usize>, Vec<usize>, usize, usize); 3] = [
        ("s1p1", vec![2, 3, 5, 5], vec![4, 3, 3, 3], 1, 1),
        ("s2p0", vec![1, 2, 6, 8], vec![3, 2, 2, 2], 2, 0),
        ("s2p1", vec![2, 4, 5, 7], vec![2, 4, 3, 3], 2, 1),
    ];
    for (tag, xs, ws, stride, pad) in conv_shapes {
        s.case(&format!("conv2d.input.{tag}"), |rng| {
            let x = randn(rng, &xs);
            let w = randn(rng, &ws);
            Ok((
                x,
                Box::new(move |tape, x| {
                    let a = tape.leaf(x.clone());
                    let wid = tape.constant(w.clone());
                    let y = tape.conv2d(a, wid, stride, pad)?;
                    Ok((sq_sum(tape, y)?, a))
                }),
            ))
        })?;
        s.case(&format!("conv2d.weight.{tag}"), |rng| {
            let w = randn(rng, &ws);
            let x = randn(rng, &xs);
            Ok((
                w,
                Box::new(move |tape, w| {
                    let xid = tape.constant(x.clone());
                    let wid = tape.leaf(w.clone());
                    let y = tape.conv2d(xid, wid, stride, pad)?;
                    Ok((sq_sum(tape, y)?, wid))
                }),
            ))
        })?;
    }

    s.case("softmax_cross_entropy", |rng| {
        let x = randn(rng, &[4, 5]);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        Ok((
            x,
            Box::new(move |tape, x| {
                let a = tape.leaf(x.clone());
                let loss = tape.softmax_cross_entropy(a, &labels)?;
                Ok((loss, a))
            }),
        ))
    })?;
    Ok(())
}

fn reparam_cases(s: &mut Suite) -> Result<()> {
    s.case("ws_standardize", |rng| {
        let w = randn(rng, &[4, 3, 3, 3]);
        Ok((
            w,
            Box::new(|tape, w| {
                let wid = tape.leaf(w.clone());
                let nodes = ws_standardize(tape, wid, WS_EPS_F64)?;
                Ok((sq_sum(tape, nodes.standardized)?, wid))
            }),
        ))
    })?;
    s.case("center_rows", |rng| {
        let w = randn(rng, &[5, 7]);
        Ok((
            w,
            Box::new(|tape, w| {
                let wid = tape.leaf(w.clone());
                let y = center_rows(tape, wid)?;
                Ok((sq_sum(tape, y)?, wid))
            }),
        ))
    })?;
    s.case("wn_standardize.weight", |rng| {
        let w = randn(rng, &[3, 2, 3, 3]);
        let g = rand_pos(rng, &[3]);
        Ok((
            w,
            Box::new(move |tape, w| {
                let wid = tape.leaf(w.clone());
                let gid = tape.constant(g.clone());
                let y = wn_standardize(tape, wid, gid)?;
                Ok((sq_sum(tape, y)?, wid))
            }),
        ))
    })?;
    s.case("wn_standardize.gain", |rng| {
        let g = rand_pos(rng, &[3]);
        let w = randn(rng, &[3, 2, 3, 3]);
        Ok((
            g,
            Box::new(move |tape, g| {
                let wid = tape.constant(w.clone());
                let gid = tape.leaf(g.clone());
                let y = wn_standardize(tape, wid, gid)?;
                Ok((sq_sum(tape, y)?, gid))
            }),
        ))
    })?;
    s.case("cwn_standardize.weight", |rng| {
        let w = randn(rng, &[4, 2, 2, 2]);
        let g = rand_pos(rng, &[4]);
        Ok((
            w,
            Box::new(move |tape, w| {
                let wid = tape.leaf(w.clone());
                let gid = tape.constant(g.clone());
                let y = cwn_standardize(tape, wid, gid)?;
                Ok((sq_sum(tape, y)?, wid))
            }),
        ))
    })?;
    s.case("cwn_standardize.gain", |rng| {
        let g = rand_pos(rng, &[4]);
        let w = randn(rng, &[4, 2, 2, 2]);
        Ok((
            g,
            Box::new(move |tape, g| {
                let wid = tape.constant(w.clone());
                let gid = tape.leaf(g.clone());
                let y = cwn_standardize(tape, wid, gid)?;
                Ok((sq_sum(tape, y)?, gid))
            }),
        ))
    })?;
    Ok(())
}

fn norm_cases(s: &mut Suite) -> Result<()> {
    // Input gradient through each normalizer's training forward. Parameter
    // (γ/β) gradients are covered by the full-model cases below, which
    // finite-difference every parameter tensor.
    let kinds: Vec<(&str, NormKind)> = vec![
        ("bn", NormKind::Bn),
        ("ln", NormKind::ln()),
        ("gn", NormKind::Cn { groups: Some(2) }),
        ("in", NormKind::Cn { groups: Some(8) }),
        ("bcn_large", NormKind::BcnLarge { groups: Some(2) }),
        ("bcn_micro", NormKind::BcnMicro { groups: Some(2) }),
    ];
    for (tag, kind) in kinds {
        s.case(&format!("norm.{tag}.input"), move |rng| {
            let x = randn(rng, &[3, 8, 4, 4]);
            let proto = NormState::new(kind, 8)?;
            Ok((
                x,
                Box::new(move |tape, x| {
                    // Fresh state per call: training forwards update running
                    // statistics and the builder must stay pure.
                    let mut st = proto.clone();
                    let xid = tape.leaf(x.clone());
                    let f = st.forward(tape, xid, Mode::Train)?;
                    Ok((sq_sum(tape, f.out)?, xid))
                }),
            ))
        })?;
    }

    s.case("norm.fixed_stats.input", |rng| {
        let x = randn(rng, &[3, 6, 4, 4]);
        let mean = randn(rng, &[6]);
        let scale = rand_pos(rng, &[6]);
        let mut proto = NormState::new(NormKind::FixedStats, 6)?;
        proto.set_fixed_stats(mean, scale)?;
        Ok((
            x,
            Box::new(move |tape, x| {
                let mut st = proto.clone();
                let xid = tape.leaf(x.clone());
                let f = st.forward(tape, xid, Mode::Train)?;
                Ok((sq_sum(tape, f.out)?, xid))
            }),
        ))
    })?;

    s.case("norm.bn.eval.input", |rng| {
        let x = randn(rng, &[2, 5, 3, 3]);
        let warm = randn(rng, &[4, 5, 3, 3]);
        let mut proto = NormState::new(NormKind::Bn, 5)?;
        // Warm the running statistics so eval normalizes by something
        // non-trivial.
        let mut tape = Tape::new();
        let wid = tape.constant(warm);
        proto.forward(&mut tape, wid, Mode::Train)?;
        Ok((
            x,
            Box::new(move |tape, x| {
                let mut st = proto.clone();
                let xid = tape.leaf(x.clone());
                let f = st.forward(tape, xid, Mode::Eval)?;
                Ok((sq_sum(tape, f.out)?, xid))
            }),
        ))
    })?;
    Ok(())
}

/// Model configurations exercised end-to-end: plain conv stack, each
/// normalizer family, WS in the loop, and the residual wiring.
fn model_specs() -> Vec<(&'static str, ModelSpec)> {
    vec![
        (
            "convnet4.plain",
            ModelSpec::new(Arch::ConvNet4, NormKind::None, ReparamKind::None),
        ),
        (
            "convnet4.bn",
            ModelSpec::new(Arch::ConvNet4, NormKind::Bn, ReparamKind::None),
        ),
        (
            "convnet4.gn_ws",
            ModelSpec::new(Arch::ConvNet4, NormKind::gn(), ReparamKind::Ws),
        ),
        (
            "convnet4.bcn_ws",
            ModelSpec::new(
                Arch::ConvNet4,
                NormKind::BcnMicro { groups: None },
                ReparamKind::Ws,
            ),
        ),
        (
            "convnet4.wn",
            ModelSpec::new(Arch::ConvNet4, NormKind::gn(), ReparamKind::Wn),
        ),
        (
            "convnet4.cwn",
            ModelSpec::new(Arch::ConvNet4, NormKind::gn(), ReparamKind::Cwn),
        ),
        (
            "resnet8.gn_ws",
            ModelSpec::new(Arch::MiniResNet(8), NormKind::gn(), ReparamKind::Ws),
        ),
    ]
}

fn model_cases(s: &mut Suite) -> Result<()> {
    // Batch and spatial size kept small: the oracle is exact coordinate
    // finite differences, applied to a random sample of coordinates in
    // every parameter tensor (all tensors covered each seed).
    const COORDS_PER_PARAM: usize = 3;
    for (name, spec) in model_specs() {
        s.raw_case(&format!("model.{name}"), move |rng| {
            let seed: u64 = rng.gen();
            let model = build_model(&spec, seed)?;
            let (x, labels) = kink_free_batch(&model, rng)?;
            let coord_seed: u64 = rng.gen();
            model_grad_err(&model, &x, &labels, coord_seed, COORDS_PER_PARAM)
        })?;
    }
    Ok(())
}

/// Draws an input batch whose pre-ReLU activations stay clear of the kink,
/// retrying with fresh draws; finite differences are invalid near zero.
fn kink_free_batch(model: &Model, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>)> {
    let classes = model.spec.classes;
    for _ in 0..64 {
        let x = Tensor::randn(&[2, model.spec.in_channels, 16, 16], rng);
        let mut m = model.clone();
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let fwd = m.forward(&mut tape, xid, Mode::Train)?;
        let min_gap = fwd
            .pre_relu
            .iter()
            .flat_map(|&id| tape.value(id).data().iter())
            .fold(f64::INFINITY, |acc, &v| acc.min(v.abs()));
        if min_gap > KINK_MARGIN {
            let labels: Vec<usize> = (0..x.shape()[0]).map(|_| rng.gen_range(0..classes)).collect();
            return Ok((x, labels));
        }
    }
    Err(Error::ConstraintViolated(
        "no kink-free batch found in 64 draws".into(),
    ))
}

/// Worst relative error between tape gradients and sampled coordinate
/// finite differences over every parameter tensor of the model.
fn model_grad_err(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    coord_seed: u64,
    coords_per_param: usize,
) -> Result<f64> {
    // Forward+backward once on a clone for the analytic gradients.
    let mut m = model.clone();
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let fwd = m.forward(&mut tape, xid, Mode::Train)?;
    let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
    tape.backward(loss)?;

    // Micro-batch BCN updates its running estimates off the tape and then
    // normalizes by them as constants — a stop-gradient by design. Finite
    // differences must differentiate the same function the tape does, so
    // perturbed evaluations freeze the estimates at their post-update
    // values: that is exactly the eval-mode forward of the model that just
    // ran (`m`). Every other layer kind puts its batch statistics on the
    // tape, so the train-mode forward is the right FD target there.
    let detached_stats = matches!(model.spec.norm, NormKind::BcnMicro { .. });
    let (fd_model, fd_mode) = if detached_stats {
        (&m, Mode::Eval)
    } else {
        (model, Mode::Train)
    };

    let mut coord_rng = ChaCha8Rng::seed_from_u64(coord_seed);
    let mut worst: f64 = 0.0;
    for (r, id) in &fwd.binds {
        let analytic = tape
            .grad(*id)
            .ok_or_else(|| Error::InvalidArgument("parameter grad missing".into()))?
            .clone();
        let n = analytic.numel();
        for _ in 0..coords_per_param.min(n) {
            let k = coord_rng.gen_range(0..n);
            let eval = |delta: f64| -> Result<f64> {
                let mut mm = fd_model.clone();
                mm.param_mut(*r)
                    .ok_or_else(|| Error::InvalidArgument("param ref invalid".into()))?
                    .data_mut()[k] += delta;
                let mut t = Tape::new();
                let xi = t.constant(x.clone());
                let f = mm.forward(&mut t, xi, fd_mode)?;
                let l = t.softmax_cross_entropy(f.logits, labels)?;
                Ok(t.value(l).data()[0])
            };
            let fd = (eval(MODEL_FD_STEP)? - eval(-MODEL_FD_STEP)?) / (2.0 * MODEL_FD_STEP);
            let a = analytic.data()[k];
            let denom = fd.abs().max(1.0);
            worst = worst.max((a - fd).abs() / denom);
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Per-step gradient-identity run

#[derive(Clone, Debug)]
pub struct LipschitzReport {
    /// Number of (layer, step) rows checked.
    pub rows: usize,
    pub steps: usize,
    pub max_r1_rel: f64,
    pub max_r2_rel: f64,
    /// Mean over rows of term_ws / (term_ws + term_mean + term_total).
    pub mean_fraction_ws: f64,
    pub records: Vec<crate::diagnostics::DiagnosticsRecord>,
}

/// Trains ConvNet4+GN+WS on synthetic blobs and checks the two gradient
/// identities on every step of every epoch, recording the size of the
/// ⟨Ŵ,∇⟩ component relative to the whole decomposition.
pub fn run_lipschitz(
    seed: u64,
    epochs: usize,
    n_train: usize,
    batch_size: usize,
) -> Result<LipschitzReport> {
    let mut ds = data::synth_blobs(seed, n_train, 10)?;
    let moments = ds.channel_moments()?;
    ds.standardize(&moments);

    let spec = ModelSpec::new(Arch::ConvNet4, NormKind::gn(), ReparamKind::Ws);
    let cfg = TrainConfig {
        epochs,
        batch_size,
        seed,
        ..TrainConfig::default()
    };
    let model = build_model(&spec, seed)?;
    let mut trainer = Trainer::new(model, cfg)?;
    let mut collector = DiagCollector::new();
    for _ in 0..epochs {
        trainer.run_epoch(&ds, Some(&mut collector))?;
    }

    let records = collector.records;
    if records.is_empty() {
        return Err(Error::ConstraintViolated(
            "identity run recorded no diagnostics rows".into(),
        ));
    }
    let mut max_r1 = 0.0f64;
    let mut max_r2 = 0.0f64;
    let mut frac_sum = 0.0f64;
    for r in &records {
        max_r1 = max_r1.max(r.r1_rel);
        max_r2 = max_r2.max(r.r2_rel);
        let total = r.term_ws + r.term_mean + r.term_total;
        if total > 0.0 {
            frac_sum += r.term_ws / total;
        }
    }
    let steps = records.iter().map(|r| r.step).max().unwrap_or(0) + 1;
    Ok(LipschitzReport {
        rows: records.len(),
        steps,
        max_r1_rel: max_r1,
        max_r2_rel: max_r2,
        mean_fraction_ws: frac_sum / records.len() as f64,
        records,
    })
}

// ---------------------------------------------------------------------------
// Hessian suite

#[derive(Clone, Debug)]
pub struct HessianCase {
    pub name: String,
    pub report: HessianReport,
    /// For the analytic toy case, the exact Frobenius norm² the projected
    /// Hessian must hit (I − 1); None for the sampled networks.
    pub exact_frob: Option<f64>,
}

/// The analytic toy case plus finite-difference checks on random small conv
/// networks with smooth heads.
pub fn run_hessian_suite(base_seed: u64, n_random: usize) -> Result<Vec<HessianCase>> {
    let mut out = Vec::new();

    // Toy quadratic: loss = ‖ẇ‖²/2 has Hessian exactly the centering
    // projector after the pullback, with ‖H‖²_F = I − 1.
    let i = 6;
    let w0: Vec<f64> = (0..i).map(|k| 0.3 * k as f64 - 0.7).collect();
    let report = hessian_checks(&mut |w: &[f64]| Ok(w.to_vec()), &w0, 1e-4)?;
    out.push(HessianCase {
        name: "toy_quadratic".into(),
        report,
        exact_frob: Some((i - 1) as f64),
    });

    for case in 0..n_random {
        let seed = seeds::derive2(base_seed, stream::VERIFY, 5000 + case as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_c = rng.gen_range(1..=2);
        let out_c = rng.gen_range(1..=2);
        let side = rng.gen_range(3..=4);
        let k = 2;
        let x = Tensor::randn(&[1, in_c, side, side], &mut rng);
        let w_shape = vec![out_c, in_c, k, k];
        let w_len: usize = w_shape.iter().product();
        let w0: Vec<f64> = Tensor::randn(&[w_len], &mut rng).data().to_vec();
        let y_shape = [1, out_c, side - k + 1, side - k + 1];
        let c2 = rand_pos(&mut rng, &y_shape);
        let c1 = Tensor::randn(&y_shape, &mut rng);

        // Smooth head: L(ẇ) = Σ c2·y² + Σ c1·y over y = conv(x, ẇ).
        // ReLU would break the C² requirement of finite-difference Hessians.
        let w_shape2 = w_shape.clone();
        let mut grad_fn = move |w: &[f64]| -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let wid = tape.leaf(Tensor::new(w_shape2.clone(), w.to_vec())?);
            let xid = tape.constant(x.clone());
            let y = tape.conv2d(xid, wid, 1, 0)?;
            let c2id = tape.constant(c2.clone());
            let c1id = tape.constant(c1.clone());
            let sq = tape.mul(y, y)?;
            let wsq = tape.mul(sq, c2id)?;
            let lin = tape.mul(y, c1id)?;
            let total = tape.add(wsq, lin)?;
            let loss = tape.sum_all(total)?;
            tape.backward(loss)?;
            Ok(tape
                .grad(wid)
                .expect("leaf gradient")
                .data()
                .to_vec())
        };
        let report = hessian_checks(&mut grad_fn, &w0, 1e-4)?;
        out.push(HessianCase {
            name: format!("conv_net.{case}"),
            report,
            exact_frob: None,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
