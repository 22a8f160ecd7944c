//! Two-phase training.
//!
//! Phase I fits each stream's predictor on full evidence. Phase II freezes
//! the predictors and fits the selectors through straight-through top-k
//! masking. Both phases use class-balanced BCE and plain minibatch SGD, and
//! keep the epoch with the best validation AUROC.

use rayon::prelude::*;

use crate::datamodel::{Cohort, Instance, Split};
use crate::error::{Result, ToeError};
use crate::metrics::auroc;
use crate::numerics::{MlpGrads, SeededRng};
use serde::Serialize;

use crate::streams::{ste_topk, top_k_indices, ModelBundle, ModelShape, Part, PredictorGrads, StreamKind, StreamModel};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    /// Predictor learning rate (Phase I).
    pub lr: f64,
    /// Selector learning rate (Phase II). Selector gradients pass through a
    /// softmax over all units of a stream and are correspondingly small.
    pub lr_phase2: f64,
    pub batch_size: usize,
    pub k_train: usize,
    pub ste_temperature: f64,
    pub shape: ModelShape,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_phase1: 30,
            epochs_phase2: 15,
            lr: 0.05,
            lr_phase2: 0.1,
            batch_size: 32,
            k_train: 5,
            ste_temperature: 1.0,
            shape: ModelShape::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, t: usize) -> Result<()> {
        let fail = |m: &str| Err(ToeError::InvalidConfig(m.to_string()));
        if self.k_train == 0 || self.k_train > t {
            return fail("k_train must lie in [1, T]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.lr_phase2 > 0.0 && self.lr_phase2.is_finite()) {
            return fail("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if !(self.ste_temperature > 0.0) {
            return fail("ste_temperature must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

/// One line of the training log. Epoch 0 is the state before training.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub phase: Phase,
    pub stream: StreamKind,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn losses(&self, phase: Phase, stream: StreamKind, split: Split) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.phase == phase && r.stream == stream && r.split == split)
            .map(|r| r.loss)
            .collect()
    }

    /// CSV body with header `phase,stream,epoch,split,loss,auroc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,stream,epoch,split,loss,auroc\n");
        for r in &self.rows {
            let phase = match r.phase {
                Phase::One => 1,
                Phase::Two => 2,
            };
            let stream = match r.stream {
                StreamKind::TimeSeries => "ts",
                StreamKind::Notes => "note",
            };
            out.push_str(&format!(
                "{phase},{stream},{},{},{},{}\n",
                r.epoch,
                r.split,
                r.loss,
                r.auroc
            ));
        }
        out
    }
}

/// Class-balanced BCE from a logit: `(loss, dloss/dlogit)` with weight
/// `pos_weight` on positives and 1 on negatives.
pub fn class_balanced_bce(logit: f64, y: bool, pos_weight: f64) -> (f64, f64) {
    let p = crate::numerics::sigmoid(logit);
    // -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z).
    let softplus = |z: f64| if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    if y {
        (pos_weight * softplus(-logit), pos_weight * (p - 1.0))
    } else {
        (softplus(logit), p)
    }
}

/// `n_neg / n_pos` on the train split.
pub fn pos_weight(cohort: &Cohort) -> Result<f64> {
    let train = cohort.split(Split::Train);
    let n_pos = train.iter().filter(|i| i.label).count();
    let n_neg = train.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ToeError::DegenerateCohort(format!(
            "train split has {n_pos} positives and {n_neg} negatives"
        )));
    }
    Ok(n_neg as f64 / n_pos as f64)
}

fn check_val(cohort: &Cohort) -> Result<()> {
    let val = cohort.split(Split::Val);
    let n_pos = val.iter().filter(|i| i.label).count();
    if n_pos == 0 || n_pos == val.len() {
        return Err(ToeError::DegenerateCohort("validation split needs both classes".into()));
    }
    Ok(())
}

/// Mask a stream sees during Phase I: every hour, every present chunk.
fn full_mask(stream: &StreamModel, inst: &Instance) -> Vec<f64> {
    stream.presence(inst).iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
}

/// Hard top-k mask a stream sees during Phase II and at evaluation of the
/// selector alone.
fn selector_mask(stream: &StreamModel, inst: &Instance, k: usize, tau: f64) -> Result<Vec<f64>> {
    let scores = stream.score_units(stream.units(inst), &stream.presence(inst))?;
    Ok(ste_topk(&scores, k, tau)?.hard)
}

/// Mean loss and AUROC of one stream's logit over `instances`.
fn evaluate_stream(
    stream: &StreamModel,
    instances: &[&Instance],
    pos_weight: f64,
    eps: f64,
    masking: Option<(usize, f64)>,
) -> Result<(f64, f64)> {
    let logits: Vec<f64> = instances
        .par_iter()
        .map(|inst| {
            let mask = match masking {
                None => full_mask(stream, inst),
                Some((k, tau)) => selector_mask(stream, inst, k, tau)?,
            };
            stream.logit(inst, &mask, eps)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = instances.iter().map(|i| i.label).collect();
    let loss = logits
        .iter()
        .zip(&labels)
        .map(|(&z, &y)| class_balanced_bce(z, y, pos_weight).0)
        .sum::<f64>()
        / logits.len() as f64;
    Ok((loss, auroc(&labels, &logits)?))
}

fn log_epoch(
    log: &mut TrainingLog,
    phase: Phase,
    stream: &StreamModel,
    epoch: usize,
    train: &[&Instance],
    val: &[&Instance],
    pos_weight: f64,
    eps: f64,
    masking: Option<(usize, f64)>,
) -> Result<f64> {
    let mut val_auroc = 0.0;
    for (split, set) in [(Split::Train, train), (Split::Val, val)] {
        let (loss, a) = evaluate_stream(stream, set, pos_weight, eps, masking)?;
        log.rows.push(LogRow {
            phase,
            stream: stream.kind,
            epoch,
            split,
            loss,
            auroc: a,
        });
        val_auroc = a;
    }
    Ok(val_auroc)
}

fn batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Class-balanced loss of one instance on full evidence and its gradient
/// with respect to the stream's predictor parts.
pub fn predictor_gradient(stream: &StreamModel, inst: &Instance, pos_weight: f64, eps: f64) -> Result<(f64, PredictorGrads)> {
    let pass = stream.forward_pass(inst, &full_mask(stream, inst), eps)?;
    let (loss, dlogit) = class_balanced_bce(pass.logit, inst.label, pos_weight);
    let (g, _) = stream.backward(&pass, dlogit)?;
    Ok((loss, g))
}

/// Class-balanced loss of one instance under the hard top-`k` mask, and
/// its straight-through gradient with respect to the selector.
pub fn selector_gradient(
    stream: &StreamModel,
    inst: &Instance,
    k: usize,
    tau: f64,
    pos_weight: f64,
    eps: f64,
) -> Result<(f64, MlpGrads)> {
    let mut grads = MlpGrads::zeros_like(&stream.selector);
    let loss = selector_gradient_into(stream, inst, k, tau, pos_weight, eps, &mut grads)?;
    Ok((loss, grads))
}

fn selector_gradient_into(
    stream: &StreamModel,
    inst: &Instance,
    k: usize,
    tau: f64,
    pos_weight: f64,
    eps: f64,
    grads: &mut MlpGrads,
) -> Result<f64> {
    let units = stream.units(inst);
    let presence = stream.presence(inst);
    let scores = stream.score_units(units, &presence)?;
    let ste = ste_topk(&scores, k, tau)?;
    let pass = stream.forward_pass(inst, ste.composite(), eps)?;
    let (loss, dlogit) = class_balanced_bce(pass.logit, inst.label, pos_weight);
    let (_, dmask) = stream.backward(&pass, dlogit)?;
    let dscores = ste.backward(&dmask);
    for (u, &ds) in dscores.iter().enumerate() {
        if presence[u] && ds != 0.0 {
            let (_, cache) = stream.selector.forward(units.row(u))?;
            stream.selector.backward_into(&cache, &[ds], grads)?;
        }
    }
    Ok(loss)
}

fn phase1_stream(
    stream: &mut StreamModel,
    train: &[&Instance],
    val: &[&Instance],
    cfg: &TrainConfig,
    pos_weight: f64,
    eps: f64,
    log: &mut TrainingLog,
) -> Result<()> {
    let tag = match stream.kind {
        StreamKind::TimeSeries => "phase1:ts",
        StreamKind::Notes => "phase1:note",
    };
    let mut rng = SeededRng::derived(cfg.seed, tag);
    let mut best = (log_epoch(log, Phase::One, stream, 0, train, val, pos_weight, eps, None)?, stream.clone());
    for epoch in 1..=cfg.epochs_phase1 {
        for batch in batches(train.len(), cfg.batch_size, &mut rng) {
            let mut grads = PredictorGrads::zeros_like(stream);
            for &i in &batch {
                let (_, g) = predictor_gradient(stream, train[i], pos_weight, eps)?;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            for part in Part::PREDICTOR {
                stream.apply_update(part, grads.get(part).expect("predictor part"), cfg.lr)?;
            }
        }
        let val_auroc = log_epoch(log, Phase::One, stream, epoch, train, val, pos_weight, eps, None)?;
        if val_auroc > best.0 {
            best = (val_auroc, stream.clone());
        }
    }
    *stream = best.1;
    Ok(())
}

/// Fits both predictors on full evidence. Selectors keep their
/// initialization.
pub fn train_phase1(cohort: &Cohort, cfg: &TrainConfig) -> Result<(ModelBundle, TrainingLog)> {
    cfg.validate(cohort.dims.t)?;
    let pw = pos_weight(cohort)?;
    check_val(cohort)?;
    let train = cohort.split(Split::Train);
    let val = cohort.split(Split::Val);
    let mut bundle = ModelBundle::init(cohort.dims, cfg.shape, cfg.seed);
    bundle.ste_temperature = cfg.ste_temperature;
    let eps = bundle.epsilon;
    let mut log = TrainingLog::default();
    for kind in [StreamKind::TimeSeries, StreamKind::Notes] {
        phase1_stream(bundle.stream_mut(kind), &train, &val, cfg, pw, eps, &mut log)?;
    }
    Ok((bundle, log))
}

fn phase2_stream(
    stream: &mut StreamModel,
    train: &[&Instance],
    val: &[&Instance],
    cfg: &TrainConfig,
    pos_weight: f64,
    eps: f64,
    log: &mut TrainingLog,
) -> Result<()> {
    for part in Part::PREDICTOR {
        stream.frozen.set(part, true);
    }
    stream.frozen.set(Part::Selector, false);
    let tag = match stream.kind {
        StreamKind::TimeSeries => "phase2:ts",
        StreamKind::Notes => "phase2:note",
    };
    let mut rng = SeededRng::derived(cfg.seed, tag);
    let masking = Some((cfg.k_train, cfg.ste_temperature));
    let mut best = (
        log_epoch(log, Phase::Two, stream, 0, train, val, pos_weight, eps, masking)?,
        stream.selector.clone(),
    );
    for epoch in 1..=cfg.epochs_phase2 {
        for batch in batches(train.len(), cfg.batch_size, &mut rng) {
            let mut grads = MlpGrads::zeros_like(&stream.selector);
            for &i in &batch {
                selector_gradient_into(stream, train[i], cfg.k_train, cfg.ste_temperature, pos_weight, eps, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            stream.apply_update(Part::Selector, &grads, cfg.lr_phase2)?;
        }
        let val_auroc = log_epoch(log, Phase::Two, stream, epoch, train, val, pos_weight, eps, masking)?;
        if val_auroc > best.0 {
            best = (val_auroc, stream.selector.clone());
        }
    }
    stream.selector = best.1;
    Ok(())
}

/// Fits both selectors with the predictors frozen. Predictor parameters
/// come back bit-identical.
pub fn train_phase2(cohort: &Cohort, bundle: &ModelBundle, cfg: &TrainConfig) -> Result<(ModelBundle, TrainingLog)> {
    cfg.validate(cohort.dims.t)?;
    let pw = pos_weight(cohort)?;
    check_val(cohort)?;
    if bundle.dims != cohort.dims {
        return Err(ToeError::dim("model and cohort dimensions differ"));
    }
    let train = cohort.split(Split::Train);
    let val = cohort.split(Split::Val);
    let mut out = bundle.clone();
    out.ste_temperature = cfg.ste_temperature;
    let eps = out.epsilon;
    let mut log = TrainingLog::default();
    for kind in [StreamKind::TimeSeries, StreamKind::Notes] {
        phase2_stream(out.stream_mut(kind), &train, &val, cfg, pw, eps, &mut log)?;
    }
    for kind in [StreamKind::TimeSeries, StreamKind::Notes] {
        for part in Part::PREDICTOR {
            if out.stream(kind).part(part) != bundle.stream(kind).part(part) {
                return Err(ToeError::FrozenPart(format!("{kind:?}.{part:?} changed during selector training")));
            }
        }
    }
    Ok((out, log))
}

/// Phase I followed by Phase II.
pub fn train(cohort: &Cohort, cfg: &TrainConfig) -> Result<(ModelBundle, TrainingLog)> {
    let (p1, mut log) = train_phase1(cohort, cfg)?;
    let (p2, log2) = train_phase2(cohort, &p1, cfg)?;
    log.rows.extend(log2.rows);
    Ok((p2, log))
}

/// Overlap between selector picks and planted evidence on positive
/// instances of one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Recovery {
    pub ts_precision: f64,
    pub note_precision: f64,
    pub precision: f64,
    pub n_instances: usize,
}

/// For every positive instance in `split` with planted evidence, each
/// stream's selector picks its top min(k, planted units in that stream)
/// units; precision is hits over picks, pooled across instances.
pub fn planted_recovery(bundle: &ModelBundle, cohort: &Cohort, split: Split, k: usize) -> Result<Recovery> {
    let (mut hits, mut picks) = ([0usize; 2], [0usize; 2]);
    let mut n = 0;
    for i in cohort.indices(split) {
        let inst = &cohort.instances[i];
        let Some(gt) = cohort.ground_truth[i].as_ref().filter(|_| inst.label) else {
            continue;
        };
        n += 1;
        for (s, kind) in [StreamKind::TimeSeries, StreamKind::Notes].into_iter().enumerate() {
            let truth = match kind {
                StreamKind::TimeSeries => &gt.ts,
                StreamKind::Notes => &gt.note,
            };
            let n_true = truth.iter().filter(|&&b| b).count();
            let top = top_k_indices(&bundle.score_units(kind, inst)?, k.min(n_true));
            hits[s] += top.iter().filter(|&&j| truth[j]).count();
            picks[s] += top.len();
        }
    }
    if n == 0 {
        return Err(ToeError::InvalidInput(format!("no positive {split} instances with planted evidence")));
    }
    let ratio = |h: usize, p: usize| if p == 0 { 0.0 } else { h as f64 / p as f64 };
    Ok(Recovery {
        ts_precision: ratio(hits[0], picks[0]),
        note_precision: ratio(hits[1], picks[1]),
        precision: ratio(hits[0] + hits[1], picks[0] + picks[1]),
        n_instances: n,
    })
}
