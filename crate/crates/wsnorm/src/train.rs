//! Seeded training: SGD with momentum and weight decay, a step-decay
//! learning-rate schedule, gradient accumulation for micro-batch training,
//! and the two experiment runners built on top (fixed-statistics
//! perturbation grid, channel-statistics tracking).
//!
//! Determinism contract: a run is a pure function of (model spec, config,
//! seed, dataset). Each epoch's shuffle/augmentation stream is derived
//! from (seed, epoch), so resuming from a checkpoint at epoch k replays
//! exactly the trajectory of an uninterrupted run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{self, Augment, Dataset};
use crate::diagnostics::{self, ChannelStats, DiagnosticsRecord};
use crate::error::{Error, Result};
use crate::model::{build_model, Arch, Model, ModelSpec, ParamRef};
use crate::norm::{needs_batch_stats, Mode, NormKind};
use crate::reparam::ReparamKind;
use crate::seeds;
use crate::tensor::{Precision, Tape, Tensor, TensorId};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Initial learning rate; decays by `decay_factor` at each epoch in
    /// `decay_epochs`.
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Samples per micro-batch (per forward/backward).
    pub batch_size: usize,
    /// Micro-batches averaged into one optimizer step.
    pub iteration_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub augment: bool,
    /// Keep γ/β (and BCN's channel affine) at their init values.
    pub freeze_norm_affine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            iteration_size: 1,
            epochs: 10,
            seed: 0,
            precision: Precision::F64,
            augment: false,
            freeze_norm_affine: false,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.decay_factor.powi(drops as i32)
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub val_err: Option<f64>,
}

/// Per-epoch channel-statistics sample.
#[derive(Clone, Debug, serde::Serialize)]
pub struct StatDiffEpoch {
    pub epoch: usize,
    /// Mean over layers of the per-layer (group-averaged) StatDiff.
    pub mean: f64,
    /// Std over layers.
    pub std: f64,
    pub per_layer: Vec<f64>,
}

/// Collects diagnostics during training. Strictly read-only with respect
/// to the training state: it owns its EMA trackers and record buffers and
/// touches nothing else, so enabling it cannot move a single bit of the
/// trajectory.
pub struct DiagCollector {
    /// Running stats of each pre-ReLU (post-norm) activation tap.
    stats: Vec<ChannelStats>,
    /// Channel group count per tap, for statdiff.
    groups: Vec<usize>,
    pub records: Vec<DiagnosticsRecord>,
    pub statdiff_series: Vec<StatDiffEpoch>,
    pub underrep_percentile: f64,
}

impl DiagCollector {
    pub fn new() -> Self {
        DiagCollector {
            stats: Vec::new(),
            groups: Vec::new(),
            records: Vec::new(),
            statdiff_series: Vec::new(),
            underrep_percentile: 95.0,
        }
    }

    fn ensure_trackers(&mut self, model: &Model, channel_counts: &[usize]) {
        if self.stats.len() == channel_counts.len() {
            return;
        }
        self.stats = channel_counts
            .iter()
            .map(|&c| ChannelStats::new(c, 0.1))
            .collect();
        // Taps are pre-ReLU activations; group them like the norm layer
        // that produced them where the counts line up, else one group.
        self.groups = channel_counts
            .iter()
            .map(|&c| {
                model
                    .norms
                    .iter()
                    .find(|n| n.channels == c)
                    .map(|n| n.groups)
                    .unwrap_or(1)
            })
            .collect();
    }

    fn update_from_taps(&mut self, tape: &Tape, taps: &[TensorId], model: &Model) -> Result<()> {
        let counts: Vec<usize> = taps
            .iter()
            .map(|&t| tape.value(t).shape()[1])
            .collect();
        self.ensure_trackers(model, &counts);
        for (tracker, &tap) in self.stats.iter_mut().zip(taps) {
            tracker.update(tape.value(tap))?;
        }
        Ok(())
    }

    fn record_reduction_terms(
        &mut self,
        tape: &Tape,
        fwd: &crate::model::ModelForward,
        step: usize,
    ) -> Result<()> {
        for (layer, nodes) in fwd.ws.iter().enumerate() {
            let Some(nodes) = nodes else { continue };
            let grad = match tape.grad(nodes.standardized) {
                Some(g) => g,
                None => continue,
            };
            let w_hat = tape.value(nodes.standardized);
            let sigma = tape.value(nodes.sigma).data();
            let t = diagnostics::grad_reduction_terms(w_hat, sigma, grad)?;
            self.records.push(DiagnosticsRecord {
                layer,
                step,
                term_ws: t.term_ws,
                term_mean: t.term_mean,
                term_total: t.term_total,
                r1: t.r1,
                r2: t.r2,
                r1_rel: t.r1_rel(),
                r2_rel: t.r2_rel(),
                statdiff: Vec::new(),
                underrep_rate: None,
            });
        }
        Ok(())
    }

    /// Samples per-layer StatDiff from the running trackers; call once per
    /// epoch.
    pub fn sample_statdiff(&mut self, epoch: usize) -> Result<()> {
        let mut per_layer = Vec::with_capacity(self.stats.len());
        for (tracker, &groups) in self.stats.iter().zip(&self.groups) {
            let per_group = diagnostics::statdiff(&tracker.mean, &tracker.std, groups)?;
            per_layer.push(per_group.iter().sum::<f64>() / per_group.len() as f64);
        }
        let n = per_layer.len() as f64;
        let mean = per_layer.iter().sum::<f64>() / n;
        let var = per_layer.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        self.statdiff_series.push(StatDiffEpoch {
            epoch,
            mean,
            std: var.sqrt(),
            per_layer,
        });
        Ok(())
    }
}

impl Default for DiagCollector {
    fn default() -> Self {
        Self::new()
    }
}

/// A model plus its optimizer state and position in the schedule.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    /// Momentum buffers aligned with `model.param_refs()`.
    pub velocity: Vec<Tensor>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        if cfg.batch_size == 0 || cfg.iteration_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size and iteration size must be >= 1".into(),
            ));
        }
        if cfg.batch_size == 1 && needs_batch_stats(model.spec.norm) {
            return Err(Error::SingleElementStats {
                batch: 1,
                spatial: data::SIDE * data::SIDE,
            });
        }
        let velocity = model
            .param_refs()
            .iter()
            .map(|&r| Tensor::zeros(model.param(r).unwrap().shape()))
            .collect();
        Ok(Trainer {
            model,
            cfg,
            velocity,
            epoch: 0,
            step: 0,
        })
    }

    fn new_tape(&self) -> Tape {
        Tape::with_precision(self.cfg.precision)
    }

    /// Runs one epoch; returns its stats. The caller owns the loop so it
    /// can checkpoint, evaluate, or collect diagnostics between epochs.
    pub fn run_epoch(
        &mut self,
        train: &Dataset,
        collector: Option<&mut DiagCollector>,
    ) -> Result<EpochStats> {
        let epoch = self.epoch;
        let cfg = self.cfg.clone();
        let lr = cfg.lr_at(epoch);
        let micro = cfg.batch_size;
        let per_step = micro * cfg.iteration_size;
        let steps = train.len() / per_step;
        if steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "dataset of {} samples yields zero steps at batch {} × iteration {}",
                train.len(),
                micro,
                cfg.iteration_size
            )));
        }
        // The micro-batch estimator's update rate follows the lr schedule.
        for n in &mut self.model.norms {
            n.update_rate = lr;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive2(
            cfg.seed,
            seeds::stream::EPOCH,
            epoch as u64,
        ));
        let order = data::shuffled_indices(train.len(), &mut rng);
        let aug = cfg.augment.then(Augment::default);

        let refs = self.model.param_refs();
        let mut collector = collector;
        let mut loss_sum = 0.0;
        let mut err_count = 0usize;
        let mut seen = 0usize;

        for s in 0..steps {
            let mut grad_acc: Vec<Tensor> = refs
                .iter()
                .map(|&r| Tensor::zeros(self.model.param(r).unwrap().shape()))
                .collect();
            for j in 0..cfg.iteration_size {
                let lo = s * per_step + j * micro;
                let idx = &order[lo..lo + micro];
                let (images, labels) = data::make_batch(train, idx, aug.as_ref(), &mut rng)?;
                let mut tape = self.new_tape();
                let x = tape.constant(images);
                let result = (|| -> Result<(Tape, crate::model::ModelForward, f64, usize)> {
                    let fwd = self.model.forward(&mut tape, x, Mode::Train)?;
                    let loss = tape.softmax_cross_entropy(fwd.logits, &labels)?;
                    let loss_val = tape.value(loss).item();
                    let errs = count_errors(tape.value(fwd.logits), &labels);
                    tape.backward(loss)?;
                    Ok((tape, fwd, loss_val, errs))
                })();
                let (tape, fwd, loss_val, errs) = match result {
                    Ok(v) => v,
                    // A numerical abort is a divergence at this step.
                    Err(Error::NonFinite { .. }) => {
                        return Err(Error::Diverged { step: self.step })
                    }
                    Err(e) => return Err(e),
                };
                if !loss_val.is_finite() {
                    return Err(Error::Diverged { step: self.step });
                }
                loss_sum += loss_val;
                err_count += errs;
                seen += micro;

                for (r, id) in &fwd.binds {
                    if let Some(g) = tape.grad(*id) {
                        let k = refs.iter().position(|x| x == r).unwrap();
                        for (a, b) in grad_acc[k].data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                }
                if let Some(c) = collector.as_deref_mut() {
                    c.update_from_taps(&tape, &fwd.pre_relu, &self.model)?;
                    c.record_reduction_terms(&tape, &fwd, self.step)?;
                }
            }
            let inv = 1.0 / cfg.iteration_size as f64;
            for (k, &r) in refs.iter().enumerate() {
                if cfg.freeze_norm_affine && matches!(r, ParamRef::Norm(..)) {
                    continue;
                }
                let decay = if r.decays() { cfg.weight_decay } else { 0.0 };
                let v = self.velocity[k].data_mut();
                let w = self.model.param_mut(r).unwrap().data_mut();
                let g = grad_acc[k].data();
                for i in 0..w.len() {
                    let grad = g[i] * inv + decay * w[i];
                    v[i] = cfg.momentum * v[i] + grad;
                    w[i] -= lr * v[i];
                }
            }
            self.step += 1;
        }
        self.epoch += 1;

        Ok(EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / (steps * cfg.iteration_size) as f64,
            train_err: err_count as f64 / seen as f64,
            val_err: None,
        })
    }

    /// Error rate on a dataset in eval mode (no augmentation, no state
    /// updates, no RNG).
    pub fn evaluate(&mut self, ds: &Dataset) -> Result<f64> {
        evaluate_model(&mut self.model, ds, self.cfg.precision)
    }
}

pub fn evaluate_model(model: &mut Model, ds: &Dataset, precision: Precision) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("evaluate on empty dataset".into()));
    }
    let mut errs = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut throwaway = ChaCha8Rng::seed_from_u64(0);
    for chunk in indices.chunks(64) {
        let (images, labels) = data::make_batch(ds, chunk, None, &mut throwaway)?;
        let mut tape = Tape::with_precision(precision);
        let x = tape.constant(images);
        let fwd = model.forward(&mut tape, x, Mode::Eval)?;
        errs += count_errors(tape.value(fwd.logits), &labels);
    }
    Ok(errs as f64 / ds.len() as f64)
}

fn count_errors(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    let mut errs = 0;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * k..(b + 1) * k];
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best != label {
            errs += 1;
        }
    }
    errs
}

/// Convenience: fresh model, full schedule, per-epoch evaluation.
pub fn train(
    spec: &ModelSpec,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    cfg: &TrainConfig,
    mut collector: Option<&mut DiagCollector>,
) -> Result<(Model, Vec<EpochStats>)> {
    let model = build_model(spec, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut history = Vec::with_capacity(cfg.epochs);

    // Epoch-0 baseline sample for the statistics tracker.
    if let Some(c) = collector.as_deref_mut() {
        sample_epoch_statdiff(c, &mut trainer.model, train_ds, cfg.precision, 0)?;
    }
    for _ in 0..cfg.epochs {
        let mut stats = trainer.run_epoch(train_ds, collector.as_deref_mut())?;
        if let Some(val) = val_ds {
            stats.val_err = Some(trainer.evaluate(val)?);
        }
        if let Some(c) = collector.as_deref_mut() {
            c.sample_statdiff(trainer.epoch)?;
        }
        history.push(stats);
    }
    Ok((trainer.model, history))
}

/// Seeds the collector's trackers from a probe batch in eval mode, then
/// samples StatDiff; used for the untrained baseline.
pub fn sample_epoch_statdiff(
    c: &mut DiagCollector,
    model: &mut Model,
    ds: &Dataset,
    precision: Precision,
    epoch: usize,
) -> Result<()> {
    let probe: Vec<usize> = (0..ds.len().min(64)).collect();
    let mut throwaway = ChaCha8Rng::seed_from_u64(0);
    let (images, _) = data::make_batch(ds, &probe, None, &mut throwaway)?;
    let mut tape = Tape::with_precision(precision);
    let x = tape.constant(images);
    let fwd = model.forward(&mut tape, x, Mode::Eval)?;
    c.update_from_taps(&tape, &fwd.pre_relu, model)?;
    c.sample_statdiff(epoch)
}

/// Underrepresentation probe: fraction of silenced channels per pre-ReLU
/// tap on a held-out batch, eval mode.
pub fn probe_underrep(
    model: &mut Model,
    ds: &Dataset,
    precision: Precision,
    percentile: f64,
) -> Result<Vec<f64>> {
    let probe: Vec<usize> = (0..ds.len().min(128)).collect();
    let mut throwaway = ChaCha8Rng::seed_from_u64(0);
    let (images, _) = data::make_batch(ds, &probe, None, &mut throwaway)?;
    let mut tape = Tape::with_precision(precision);
    let x = tape.constant(images);
    let fwd = model.forward(&mut tape, x, Mode::Eval)?;
    fwd.pre_relu
        .iter()
        .map(|&t| diagnostics::underrep_rate(tape.value(t), percentile))
        .collect()
}

// ---------------------------------------------------------------------------
// Fixed-statistics perturbation grid

#[derive(Clone, Debug, serde::Serialize)]
pub struct GridCell {
    pub sigma_mu: f64,
    pub sigma_sigma: f64,
    /// Final validation accuracy; `None` when training aborted.
    pub accuracy: Option<f64>,
    pub failed: bool,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct SingularityGrid {
    pub sigma_mu: Vec<f64>,
    pub sigma_sigma: Vec<f64>,
    /// Row-major over (sigma_mu, sigma_sigma).
    pub cells: Vec<GridCell>,
    /// Failure threshold on accuracy (1.5 × chance).
    pub threshold: f64,
}

impl SingularityGrid {
    pub fn cell(&self, i_mu: usize, i_sigma: usize) -> &GridCell {
        &self.cells[i_mu * self.sigma_sigma.len() + i_sigma]
    }
}

/// Trains one fixed-statistics ConvNet4 per grid cell. Cell (0, 0) draws
/// targets that collapse to exactly (0, 1), making that cell plain BN by
/// construction. Perturbation draws come from a dedicated stream per cell,
/// so they cannot shift init or data order.
pub fn run_singularity_grid(
    train_ds: &Dataset,
    val_ds: &Dataset,
    sigma_mu: &[f64],
    sigma_sigma: &[f64],
    cfg: &TrainConfig,
) -> Result<SingularityGrid> {
    if !sigma_mu.contains(&0.0) || !sigma_sigma.contains(&0.0) {
        return Err(Error::InvalidArgument(
            "perturbation grid must include the (0, 0) cell".into(),
        ));
    }
    if sigma_mu.iter().chain(sigma_sigma).any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(
            "perturbation scales must be non-negative".into(),
        ));
    }
    let threshold = 1.5 / train_ds.classes() as f64;
    let mut cells = Vec::with_capacity(sigma_mu.len() * sigma_sigma.len());
    for (i, &sm) in sigma_mu.iter().enumerate() {
        for (j, &ss) in sigma_sigma.iter().enumerate() {
            let cell_tag = (i * sigma_sigma.len() + j) as u64;
            let acc = run_grid_cell(train_ds, val_ds, sm, ss, cell_tag, cfg);
            let cell = match acc {
                Ok(a) => GridCell {
                    sigma_mu: sm,
                    sigma_sigma: ss,
                    accuracy: Some(a),
                    failed: a < threshold,
                },
                Err(Error::Diverged { .. }) | Err(Error::NonFinite { .. }) => GridCell {
                    sigma_mu: sm,
                    sigma_sigma: ss,
                    accuracy: None,
                    failed: true,
                },
                Err(e) => return Err(e),
            };
            cells.push(cell);
        }
    }
    Ok(SingularityGrid {
        sigma_mu: sigma_mu.to_vec(),
        sigma_sigma: sigma_sigma.to_vec(),
        cells,
        threshold,
    })
}

fn run_grid_cell(
    train_ds: &Dataset,
    val_ds: &Dataset,
    sigma_mu: f64,
    sigma_sigma: f64,
    cell_tag: u64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let spec = ModelSpec::new(Arch::ConvNet4, NormKind::FixedStats, ReparamKind::None);
    let mut model = build_model(&spec, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive2(
        cfg.seed,
        seeds::stream::GRID,
        cell_tag,
    ));
    for n in &mut model.norms {
        let c = n.channels;
        let mean: Vec<f64> = (0..c)
            .map(|_| sigma_mu * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let scale: Vec<f64> = (0..c)
            .map(|_| (sigma_sigma * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        n.set_fixed_stats(Tensor::new(vec![c], mean)?, Tensor::new(vec![c], scale)?)?;
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch(train_ds, None)?;
    }
    let err = trainer.evaluate(val_ds)?;
    Ok(1.0 - err)
}

// ---------------------------------------------------------------------------
// Channel-statistics tracking experiment

#[derive(Clone, Debug, serde::Serialize)]
pub struct StatDiffRun {
    pub norm: String,
    pub ws: bool,
    pub seed: u64,
    pub series: Vec<StatDiffEpoch>,
    pub final_val_err: Option<f64>,
}

/// Trains one model per (norm ∈ {gn, ln}) × (ws on/off) combination and
/// returns the per-epoch StatDiff series for each.
pub fn run_statdiff_experiment(
    arch: Arch,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<StatDiffRun>> {
    let mut runs = Vec::new();
    for (name, norm) in [("gn", NormKind::gn()), ("ln", NormKind::ln())] {
        for ws in [false, true] {
            let reparam = if ws { ReparamKind::Ws } else { ReparamKind::None };
            let spec = ModelSpec::new(arch, norm, reparam);
            let mut collector = DiagCollector::new();
            let (mut model, history) =
                train(&spec, train_ds, val_ds, cfg, Some(&mut collector))?;
            let _ = &mut model;
            runs.push(StatDiffRun {
                norm: name.into(),
                ws,
                seed: cfg.seed,
                series: collector.statdiff_series,
                final_val_err: history.last().and_then(|h| h.val_err),
            });
        }
    }
    Ok(runs)
}
