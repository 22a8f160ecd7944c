//! Beam search over evidence masks.
//!
//! A state is a pair of binary masks. Each step adds one unused candidate
//! unit to every beam state, scores the expansions with
//! `score = C + lambda * S - mu * K`, and keeps the best `B`. The search
//! stops as soon as the best state has `C >= tau_conf` and `S >= tau_suff`.

use std::cmp::Ordering;
use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Instance, MaskPair, Termination, Trace, TraceStep, Unit};
use crate::error::{Result, ToeError};
use crate::metrics::{auprc, auroc, class_confidence, comprehensiveness_from_probs, ece, fidelity_mae, MetricsReport};
use crate::numerics::sigmoid;
use crate::streams::{decide, top_k_indices, EvalCache, ModelBundle, StreamKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StabilitySpace {
    Probability,
    Logit,
}

impl std::str::FromStr for StabilitySpace {
    type Err = ToeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probability" => Ok(StabilitySpace::Probability),
            "logit" => Ok(StabilitySpace::Logit),
            _ => Err(ToeError::InvalidConfig(format!("unknown stability space {s:?}"))),
        }
    }
}

impl std::fmt::Display for StabilitySpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StabilitySpace::Probability => "probability",
            StabilitySpace::Logit => "logit",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub beam_width: usize,
    pub max_steps: usize,
    pub n_ts_candidates: usize,
    pub n_note_candidates: usize,
    pub lambda: f64,
    pub mu: f64,
    pub tau_conf: f64,
    pub tau_suff: f64,
    pub stability_space: StabilitySpace,
    /// Fixed evidence budget; replaces `max_steps` when set.
    pub budget: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam_width: 8,
            max_steps: 10,
            n_ts_candidates: 24,
            n_note_candidates: 20,
            lambda: 1.0,
            mu: 0.05,
            tau_conf: 0.9,
            tau_suff: 0.9,
            stability_space: StabilitySpace::Probability,
            budget: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ToeError::InvalidConfig(m.to_string()));
        if self.beam_width == 0 {
            return fail("beam_width must be >= 1");
        }
        if self.steps() == 0 {
            return fail("max_steps (or budget) must be >= 1");
        }
        if !(self.lambda >= 0.0) || !(self.mu >= 0.0) {
            return fail("lambda and mu must be >= 0");
        }
        Ok(())
    }

    /// Depth limit actually used.
    pub fn steps(&self) -> usize {
        self.budget.unwrap_or(self.max_steps)
    }

    pub fn with_budget(&self, k: usize) -> Self {
        SearchConfig {
            budget: Some(k),
            ..self.clone()
        }
    }
}

/// The full-input decision a search tries to preserve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub p_full: f64,
    pub logit_full: f64,
    pub y_hat_full: bool,
}

impl Reference {
    pub fn from_cache(bundle: &ModelBundle, cache: &EvalCache, inst: &Instance) -> Result<Self> {
        let (a, b) = cache.logits(bundle, &MaskPair::full_for(inst))?;
        let p_full = sigmoid(a + b);
        Ok(Reference {
            p_full,
            logit_full: a + b,
            y_hat_full: decide(p_full),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub mask: MaskPair,
    pub c: f64,
    pub s: f64,
    pub k: usize,
    pub score: f64,
    pub p: f64,
    /// Fused logit of the masked prediction.
    pub logit: f64,
}

/// Stability from a probability pair or a logit pair.
pub fn stability(space: StabilitySpace, p_full: f64, p: f64, logit_full: f64, logit: f64) -> f64 {
    match space {
        StabilitySpace::Probability => 1.0 - (p_full - p).abs(),
        StabilitySpace::Logit => {
            let d = (logit_full - logit).abs();
            1.0 - d / (1.0 + d)
        }
    }
}

/// `C + lambda * S - mu * K`.
pub fn objective(c: f64, s: f64, k: usize, lambda: f64, mu: f64) -> f64 {
    c + lambda * s - mu * k as f64
}

pub fn score_state(
    bundle: &ModelBundle,
    cache: &EvalCache,
    reference: &Reference,
    mask: &MaskPair,
    cfg: &SearchConfig,
) -> Result<SearchState> {
    let (a, b) = cache.logits(bundle, mask)?;
    let logit = a + b;
    let p = sigmoid(logit);
    let c = class_confidence(p, reference.y_hat_full);
    let s = stability(cfg.stability_space, reference.p_full, p, reference.logit_full, logit);
    let k = mask.size();
    Ok(SearchState {
        mask: mask.clone(),
        c,
        s,
        k,
        score: objective(c, s, k, cfg.lambda, cfg.mu),
        p,
        logit,
    })
}

/// Scores are compared on a 1e-10 grid. Mathematically tied states (in
/// probability space every state past `p_full` has the same C + S) then
/// fall through to the deterministic tie-breaks instead of rounding noise.
fn score_key(score: f64) -> f64 {
    (score * 1e10).round()
}

/// Best first: higher score, then fewer units, then the smaller sorted
/// unit list.
pub fn rank_states(a: &SearchState, b: &SearchState) -> Ordering {
    score_key(b.score)
        .total_cmp(&score_key(a.score))
        .then(a.k.cmp(&b.k))
        .then_with(|| a.mask.units().cmp(&b.mask.units()))
}

/// Top hours by time-series selector score, then top present chunks by
/// note selector score; each list by descending score, ties by index.
pub fn candidate_units(bundle: &ModelBundle, inst: &Instance, cfg: &SearchConfig) -> Result<Vec<Unit>> {
    let ts_scores = bundle.score_units(StreamKind::TimeSeries, inst)?;
    let note_scores = bundle.score_units(StreamKind::Notes, inst)?;
    let mut out: Vec<Unit> = top_k_indices(&ts_scores, cfg.n_ts_candidates)
        .into_iter()
        .map(Unit::Ts)
        .collect();
    out.extend(
        top_k_indices(&note_scores, cfg.n_note_candidates)
            .into_iter()
            .map(Unit::Note),
    );
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub cache_builds: usize,
    pub states_scored: usize,
}

/// Everything a search produced, beyond the trace.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub trace: Trace,
    pub best: SearchState,
    /// Best state of the beam after each completed step.
    pub depth_best: Vec<SearchState>,
    pub stats: SearchStats,
}

struct Node {
    state: SearchState,
    parent: Option<usize>,
    unit: Option<Unit>,
}

fn lineage(nodes: &[Node], mut idx: usize) -> Vec<TraceStep> {
    let mut steps = Vec::new();
    while let Some(unit) = nodes[idx].unit {
        let s = &nodes[idx].state;
        steps.push(TraceStep {
            unit,
            c: s.c,
            s: s.s,
            k: s.k,
            score: s.score,
            p: s.p,
        });
        idx = nodes[idx].parent.expect("non-root node has a parent");
    }
    steps.reverse();
    steps
}

pub fn beam_search(bundle: &ModelBundle, inst: &Instance, cfg: &SearchConfig) -> Result<Trace> {
    Ok(beam_search_detailed(bundle, inst, cfg)?.trace)
}

pub fn beam_search_detailed(bundle: &ModelBundle, inst: &Instance, cfg: &SearchConfig) -> Result<SearchOutcome> {
    cfg.validate()?;
    let cache = EvalCache::build(bundle, inst)?;
    let mut stats = SearchStats {
        cache_builds: 1,
        states_scored: 0,
    };
    let reference = Reference::from_cache(bundle, &cache, inst)?;
    let candidates = candidate_units(bundle, inst, cfg)?;

    let root = score_state(bundle, &cache, &reference, &MaskPair::empty_for(inst), cfg)?;
    let mut nodes = vec![Node {
        state: root,
        parent: None,
        unit: None,
    }];
    let mut beam = vec![0usize];
    let mut depth_best = Vec::new();
    let mut termination = Termination::BudgetExhausted;

    for _ in 0..cfg.steps() {
        let mut seen = HashSet::new();
        let mut expansions = Vec::new();
        for &b in &beam {
            for &u in &candidates {
                if nodes[b].state.mask.contains(u) {
                    continue;
                }
                let mask = nodes[b].state.mask.with_unit(u);
                if seen.insert(mask.clone()) {
                    expansions.push((b, u, mask));
                }
            }
        }
        if expansions.is_empty() {
            break;
        }
        let scored: Vec<SearchState> = expansions
            .par_iter()
            .map(|(_, _, m)| score_state(bundle, &cache, &reference, m, cfg))
            .collect::<Result<_>>()?;
        stats.states_scored += scored.len();
        let mut order: Vec<usize> = (0..scored.len()).collect();
        order.sort_by(|&x, &y| rank_states(&scored[x], &scored[y]));
        order.truncate(cfg.beam_width);

        let mut scored: Vec<Option<SearchState>> = scored.into_iter().map(Some).collect();
        beam = order
            .into_iter()
            .map(|i| {
                let (parent, unit, _) = &expansions[i];
                nodes.push(Node {
                    state: scored[i].take().expect("each expansion kept once"),
                    parent: Some(*parent),
                    unit: Some(*unit),
                });
                nodes.len() - 1
            })
            .collect();
        let top = &nodes[beam[0]].state;
        depth_best.push(top.clone());
        if top.c >= cfg.tau_conf && top.s >= cfg.tau_suff {
            termination = Termination::ThresholdsMet;
            break;
        }
    }

    let best_idx = beam[0];
    let best = nodes[best_idx].state.clone();
    let trace = Trace {
        instance_id: inst.id.clone(),
        p_full: reference.p_full,
        y_hat_full: reference.y_hat_full,
        steps: lineage(&nodes, best_idx),
        final_mask: best.mask.clone(),
        termination,
    };
    Ok(SearchOutcome {
        trace,
        best,
        depth_best,
        stats,
    })
}

/// Traces and masked probabilities for one budget.
#[derive(Debug, Clone)]
pub struct BudgetRun {
    pub k: usize,
    pub traces: Vec<Trace>,
    pub report: MetricsReport,
}

/// Summary metrics for masks chosen by any method. `remainder_probs` are
/// the predictions with the selected units removed.
pub fn summarize(
    method: &str,
    k: usize,
    seed: u64,
    labels: &[bool],
    p_full: &[f64],
    p_masked: &[f64],
    remainder_probs: &[f64],
    evidence_sizes: &[usize],
    exhaustion_rate: Option<f64>,
) -> Result<MetricsReport> {
    if labels.is_empty() {
        return Err(ToeError::invalid("no instances to summarize"));
    }
    Ok(MetricsReport {
        method: method.to_string(),
        k,
        auroc: auroc(labels, p_masked)?,
        auprc: auprc(labels, p_masked)?,
        fidelity_mae: fidelity_mae(p_full, p_masked)?,
        ece: ece(labels, p_masked, 10)?,
        comprehensiveness: comprehensiveness_from_probs(p_full, remainder_probs),
        mean_evidence: evidence_sizes.iter().sum::<usize>() as f64 / evidence_sizes.len() as f64,
        exhaustion_rate,
        n: labels.len(),
        seed,
    })
}

/// Per-instance probabilities for a chosen mask: `(p_full, p_masked,
/// p_remainder)`.
pub fn mask_probabilities(bundle: &ModelBundle, inst: &Instance, mask: &MaskPair) -> Result<(f64, f64, f64)> {
    let cache = EvalCache::build(bundle, inst)?;
    Ok((
        cache.evaluate(bundle, &MaskPair::full_for(inst))?,
        cache.evaluate(bundle, mask)?,
        cache.evaluate(bundle, &mask.complement(&inst.presence))?,
    ))
}

/// Report for arbitrary per-instance masks.
pub fn evaluate_masks(
    bundle: &ModelBundle,
    instances: &[&Instance],
    masks: &[MaskPair],
    method: &str,
    k: usize,
    seed: u64,
    exhaustion_rate: Option<f64>,
) -> Result<MetricsReport> {
    if instances.len() != masks.len() {
        return Err(ToeError::dim("one mask per instance required"));
    }
    let probs: Vec<(f64, f64, f64)> = instances
        .par_iter()
        .zip(masks.par_iter())
        .map(|(inst, m)| mask_probabilities(bundle, inst, m))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = instances.iter().map(|i| i.label).collect();
    let p_full: Vec<f64> = probs.iter().map(|p| p.0).collect();
    let p_masked: Vec<f64> = probs.iter().map(|p| p.1).collect();
    let p_rem: Vec<f64> = probs.iter().map(|p| p.2).collect();
    let sizes: Vec<usize> = masks.iter().map(|m| m.size()).collect();
    summarize(method, k, seed, &labels, &p_full, &p_masked, &p_rem, &sizes, exhaustion_rate)
}

/// Runs budgeted search on every instance for each budget.
pub fn run_search_suite(
    bundle: &ModelBundle,
    instances: &[&Instance],
    cfg: &SearchConfig,
    budgets: &[usize],
    method: &str,
    seed: u64,
) -> Result<Vec<BudgetRun>> {
    budgets
        .iter()
        .map(|&k| {
            let bcfg = cfg.with_budget(k);
            let traces: Vec<Trace> = instances
                .par_iter()
                .map(|inst| beam_search(bundle, inst, &bcfg))
                .collect::<Result<_>>()?;
            let masks: Vec<MaskPair> = traces.iter().map(|t| t.final_mask.clone()).collect();
            let exhausted = traces.iter().filter(|t| t.exhausted()).count() as f64 / traces.len().max(1) as f64;
            let report = evaluate_masks(bundle, instances, &masks, method, k, seed, Some(exhausted))?;
            Ok(BudgetRun { k, traces, report })
        })
        .collect()
}

/// A rate ratio that may be infinite or undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratio {
    Finite(f64),
    Infinite,
    Undefined,
}

impl Ratio {
    pub fn of(num: f64, den: f64) -> Self {
        if den > 0.0 {
            Ratio::Finite(num / den)
        } else if num > 0.0 {
            Ratio::Infinite
        } else {
            Ratio::Undefined
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Ratio::Finite(v) => Some(*v),
            Ratio::Infinite => Some(f64::INFINITY),
            Ratio::Undefined => None,
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Ratio::Finite(v) => s.serialize_f64(*v),
            Ratio::Infinite => s.serialize_str("inf"),
            Ratio::Undefined => s.serialize_str("undefined"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExhaustionStats {
    pub tp_rate: f64,
    pub fp_rate: f64,
    pub ratio: Ratio,
    pub n_tp: usize,
    pub n_fp: usize,
}

/// Exhaustion rates among true- and false-positive decisions.
pub fn exhaustion_stats(traces: &[Trace], labels: &[bool]) -> Result<ExhaustionStats> {
    if traces.len() != labels.len() {
        return Err(ToeError::dim("one label per trace required"));
    }
    let (mut n_tp, mut x_tp, mut n_fp, mut x_fp) = (0usize, 0usize, 0usize, 0usize);
    for (t, &y) in traces.iter().zip(labels) {
        if !t.y_hat_full {
            continue;
        }
        let x = usize::from(t.exhausted());
        if y {
            n_tp += 1;
            x_tp += x;
        } else {
            n_fp += 1;
            x_fp += x;
        }
    }
    if n_tp + n_fp == 0 {
        return Err(ToeError::invalid("no positive predictions"));
    }
    let rate = |x: usize, n: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
    let tp_rate = rate(x_tp, n_tp);
    let fp_rate = rate(x_fp, n_fp);
    Ok(ExhaustionStats {
        tp_rate,
        fp_rate,
        ratio: Ratio::of(fp_rate, tp_rate),
        n_tp,
        n_fp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Abstention {
    /// Per trace: positive decision whose search exhausted its budget.
    pub abstain: Vec<bool>,
    /// Fraction of false positives flagged.
    pub fp_caught: f64,
    /// Fraction of true positives flagged.
    pub tp_lost: f64,
}

pub fn selective_abstention(traces: &[Trace], labels: &[bool]) -> Result<Abstention> {
    if traces.len() != labels.len() {
        return Err(ToeError::dim("one label per trace required"));
    }
    let abstain: Vec<bool> = traces.iter().map(|t| t.y_hat_full && t.exhausted()).collect();
    let (mut n_tp, mut c_tp, mut n_fp, mut c_fp) = (0usize, 0usize, 0usize, 0usize);
    for ((t, &y), &a) in traces.iter().zip(labels).zip(&abstain) {
        if !t.y_hat_full {
            continue;
        }
        if y {
            n_tp += 1;
            c_tp += usize::from(a);
        } else {
            n_fp += 1;
            c_fp += usize::from(a);
        }
    }
    let rate = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(Abstention {
        abstain,
        fp_caught: rate(c_fp, n_fp),
        tp_lost: rate(c_tp, n_tp),
    })
}

/// Steps until the thresholds were met; exhausted searches count as the
/// full depth limit.
pub fn evidence_to_converge(trace: &Trace, cfg: &SearchConfig) -> usize {
    match trace.termination {
        Termination::ThresholdsMet => trace.steps.len(),
        Termination::BudgetExhausted => cfg.steps(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Convergence {
    pub n: usize,
    pub mean_evidence: f64,
    pub convergence_rate: f64,
}

impl Convergence {
    pub fn of<'a>(traces: impl IntoIterator<Item = &'a Trace>, cfg: &SearchConfig) -> Self {
        let (mut n, mut ev, mut met) = (0usize, 0usize, 0usize);
        for t in traces {
            n += 1;
            ev += evidence_to_converge(t, cfg);
            met += usize::from(!t.exhausted());
        }
        let d = n.max(1) as f64;
        Convergence {
            n,
            mean_evidence: ev as f64 / d,
            convergence_rate: met as f64 / d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpuriousReport {
    pub clean: Convergence,
    pub spurious: Convergence,
    /// Spurious over clean mean evidence-to-converge.
    pub evidence_ratio: Ratio,
    /// Spurious over clean convergence rate.
    pub convergence_ratio: Ratio,
    /// Spurious model, instances whose flag agrees with their label.
    pub flag_consistent: Convergence,
    /// Spurious model, instances whose flag disagrees with their label.
    pub flag_inconsistent: Convergence,
    pub flag_on: Convergence,
    pub flag_off: Convergence,
}

/// Compares convergence of searches on a clean model and on a model
/// trained with a spurious feature. `flags` holds the spurious feature of
/// each spurious instance.
pub fn spurious_experiment(
    clean_bundle: &ModelBundle,
    clean: &[&Instance],
    spurious_bundle: &ModelBundle,
    spurious: &[&Instance],
    flags: &[bool],
    cfg: &SearchConfig,
) -> Result<SpuriousReport> {
    if spurious.len() != flags.len() {
        return Err(ToeError::dim("one flag per spurious instance required"));
    }
    let run = |b: &ModelBundle, xs: &[&Instance]| -> Result<Vec<Trace>> {
        xs.par_iter().map(|i| beam_search(b, i, cfg)).collect()
    };
    let clean_traces = run(clean_bundle, clean)?;
    let sp_traces = run(spurious_bundle, spurious)?;
    let c = Convergence::of(&clean_traces, cfg);
    let s = Convergence::of(&sp_traces, cfg);
    let pick = |pred: &dyn Fn(usize) -> bool| {
        Convergence::of(sp_traces.iter().enumerate().filter(|(i, _)| pred(*i)).map(|(_, t)| t), cfg)
    };
    Ok(SpuriousReport {
        evidence_ratio: Ratio::of(s.mean_evidence, c.mean_evidence),
        convergence_ratio: Ratio::of(s.convergence_rate, c.convergence_rate),
        flag_consistent: pick(&|i| flags[i] == spurious[i].label),
        flag_inconsistent: pick(&|i| flags[i] != spurious[i].label),
        flag_on: pick(&|i| flags[i]),
        flag_off: pick(&|i| !flags[i]),
        clean: c,
        spurious: s,
    })
}
