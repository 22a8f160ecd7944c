//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Failing criteria are
//! reported but do not fail the run unless `TOE_ACCEPTANCE_STRICT=1`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use toe_core::baselines::{exhaustive_best, selector_mask, topk_ranking_mask, RankingPool};
use toe_core::datamodel::{save_cohort, write_traces, Cohort, Instance, MaskPair, Split};
use toe_core::metrics::{auprc, auroc, ece, fidelity_mae, MetricsReport};
use toe_core::numerics::{softmax_temp, Activation, MlpParams, SeededRng};
use toe_core::report::suite_csv;
use toe_core::search::{
    beam_search, beam_search_detailed, evaluate_masks, exhaustion_stats, rank_states, run_search_suite,
    selective_abstention, spurious_experiment, Ratio, SearchConfig, StabilitySpace,
};
use toe_core::streams::{ste_topk, ModelBundle, ModelShape, StreamKind, StreamModel};
use toe_core::synth::{generate_cohort, inject_label_noise, inject_spurious, SpuriousConfig, SynthConfig};
use toe_core::training::{
    class_balanced_bce, planted_recovery, predictor_gradient, selector_gradient, train, train_phase1,
    train_phase2, TrainConfig,
};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome, String> {
    Ok(Outcome { pass, detail })
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

struct Trained {
    seed: u64,
    cohort: Cohort,
    bundle: ModelBundle,
}

impl Trained {
    fn test(&self) -> Vec<&Instance> {
        self.cohort.split(Split::Test)
    }
}

struct Ctx {
    runs: Vec<Trained>,
    phase1_seed0: ModelBundle,
    training_secs: f64,
}

fn build_context() -> Result<Ctx, String> {
    let start = Instant::now();
    let mut runs = Vec::new();
    let mut phase1_seed0 = None;
    for seed in SEEDS {
        let cohort = generate_cohort(&SynthConfig { seed, ..Default::default() }).map_err(e)?;
        let cfg = TrainConfig { seed, ..Default::default() };
        let (p1, _) = train_phase1(&cohort, &cfg).map_err(e)?;
        let (bundle, _) = train_phase2(&cohort, &p1, &cfg).map_err(e)?;
        if seed == 0 {
            phase1_seed0 = Some(p1);
        }
        runs.push(Trained { seed, cohort, bundle });
    }
    Ok(Ctx {
        runs,
        phase1_seed0: phase1_seed0.expect("seed 0 trained"),
        training_secs: start.elapsed().as_secs_f64(),
    })
}

// ---------- 1: gradients ----------

/// Relative error with a 1e-5 floor on the denominator, so gradients that
/// are zero up to rounding compare on absolute error.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

const H: f64 = 1e-5;

fn central(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

/// Pointers to every parameter of an MLP, in a fixed order.
fn param_count(net: &MlpParams) -> usize {
    net.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
}

fn param_mut(net: &mut MlpParams, mut idx: usize) -> &mut f64 {
    for l in &mut net.layers {
        let nw = l.weight.data().len();
        if idx < nw {
            return &mut l.weight.data_mut()[idx];
        }
        idx -= nw;
        if idx < l.bias.len() {
            return &mut l.bias[idx];
        }
        idx -= l.bias.len();
    }
    panic!("parameter index out of range")
}

fn grad_at(g: &toe_core::numerics::MlpGrads, mut idx: usize) -> f64 {
    for l in &g.layers {
        let nw = l.weight.data().len();
        if idx < nw {
            return l.weight.data()[idx];
        }
        idx -= nw;
        if idx < l.bias.len() {
            return l.bias[idx];
        }
        idx -= l.bias.len();
    }
    panic!("gradient index out of range")
}

fn random_mlp(rng: &mut SeededRng) -> MlpParams {
    let depth = below(rng, 1, 4);
    let mut dims = vec![below(rng, 1, 7)];
    let mut acts = Vec::new();
    for l in 0..depth {
        dims.push(below(rng, 1, 7));
        acts.push(if l + 1 == depth || rng.bernoulli(0.3) {
            Activation::Identity
        } else {
            Activation::Relu
        });
    }
    MlpParams::init(&dims, &acts, rng)
}

/// Uniform integer in `lo..hi`.
fn below(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    rng.int_inclusive(lo, hi - 1)
}

fn random_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn check_mlp(rng: &mut SeededRng) -> f64 {
    let mut net = random_mlp(rng);
    let x = random_vec(rng, net.input_dim());
    let up = random_vec(rng, net.output_dim());
    let f = |net: &MlpParams, x: &[f64]| -> f64 {
        net.predict(x).unwrap().iter().zip(&up).map(|(o, u)| o * u).sum()
    };
    let (_, cache) = net.forward(&x).unwrap();
    let (g, dx) = net.backward(&cache, &up).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..param_count(&net) {
        let orig = *param_mut(&mut net, i);
        let n = central(
            |v| {
                *param_mut(&mut net, i) = v;
                f(&net, &x)
            },
            orig,
        );
        *param_mut(&mut net, i) = orig;
        worst = worst.max(rel_err(grad_at(&g, i), n));
    }
    for i in 0..x.len() {
        let mut xx = x.clone();
        let n = central(
            |v| {
                xx[i] = v;
                f(&net, &xx)
            },
            x[i],
        );
        worst = worst.max(rel_err(dx[i], n));
    }
    worst
}

fn check_bce(rng: &mut SeededRng) -> f64 {
    let z = rng.uniform_range(-8.0, 8.0);
    let y = rng.bernoulli(0.5);
    let w = rng.uniform_range(0.2, 10.0);
    let (_, g) = class_balanced_bce(z, y, w);
    rel_err(g, central(|v| class_balanced_bce(v, y, w).0, z))
}

fn check_ste(rng: &mut SeededRng) -> f64 {
    let n = below(rng, 2, 12);
    let tau = [0.1, 0.5, 1.0, 2.0, 5.0][below(rng, 0, 5)];
    let scores = random_vec(rng, n);
    let up = random_vec(rng, n);
    let k = below(rng, 1, n + 1);
    let analytic = ste_topk(&scores, k, tau).unwrap().backward(&up);
    let surrogate = |s: &[f64]| -> f64 { softmax_temp(s, tau).unwrap().iter().zip(&up).map(|(p, g)| p * g).sum() };
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut s = scores.clone();
        let num = central(
            |v| {
                s[i] = v;
                surrogate(&s)
            },
            scores[i],
        );
        worst = worst.max(rel_err(analytic[i], num));
    }
    worst
}

fn random_instance(rng: &mut SeededRng, dims: &toe_core::datamodel::Dims) -> Instance {
    use toe_core::datamodel::ContextBlock;
    use toe_core::numerics::DenseMatrix;
    let mut ts = DenseMatrix::zeros(dims.t, dims.d);
    ts.data_mut().iter_mut().for_each(|v| *v = rng.normal());
    let n_notes = below(rng, 1, dims.m_max + 1);
    let mut note_emb = DenseMatrix::zeros(dims.m_max, dims.e_dim);
    for j in 0..n_notes {
        note_emb.row_mut(j).iter_mut().for_each(|v| *v = rng.normal());
    }
    let has_cxr = rng.bernoulli(0.7);
    let has_ecg = rng.bernoulli(0.7);
    Instance {
        id: "g".into(),
        ts,
        note_emb,
        presence: (0..dims.m_max).map(|j| j < n_notes).collect(),
        context: ContextBlock {
            cxr: if has_cxr { random_vec(rng, dims.d_cxr) } else { vec![0.0; dims.d_cxr] },
            has_cxr,
            ecg: if has_ecg { random_vec(rng, dims.d_ecg) } else { vec![0.0; dims.d_ecg] },
            has_ecg,
        },
        label: rng.bernoulli(0.5),
    }
}

/// Predictor gradients of the class-balanced loss, and the selector's
/// straight-through gradient, against finite differences. The selector
/// oracle differentiates `sum_i g_i softmax(s / tau)_i`, where `g` is the
/// loss derivative with respect to each mask entry at the hard mask,
/// itself obtained by finite differences.
fn check_stream(rng: &mut SeededRng) -> f64 {
    let dims = toe_core::datamodel::Dims {
        t: below(rng, 2, 7),
        d: below(rng, 1, 4),
        m_max: below(rng, 2, 6),
        e_dim: below(rng, 1, 4),
        d_cxr: below(rng, 1, 3),
        d_ecg: below(rng, 1, 3),
    };
    let shape = ModelShape {
        selector_hidden: below(rng, 2, 6),
        unit_hidden: below(rng, 2, 6),
        ctx_hidden: below(rng, 1, 4),
        classifier_hidden: below(rng, 2, 6),
    };
    let bundle = ModelBundle::init(dims, shape, rng.next_u64());
    let inst = random_instance(rng, &dims);
    let kind = if rng.bernoulli(0.5) { StreamKind::TimeSeries } else { StreamKind::Notes };
    let mut stream: StreamModel = bundle.stream(kind).clone();
    let eps = bundle.epsilon;
    let pw = rng.uniform_range(0.5, 8.0);
    let full: Vec<f64> = stream.presence(&inst).iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
    let loss_at = |s: &StreamModel, mask: &[f64]| class_balanced_bce(s.logit(&inst, mask, eps).unwrap(), inst.label, pw).0;

    let mut worst: f64 = 0.0;
    let (_, g) = predictor_gradient(&stream, &inst, pw, eps).unwrap();
    use toe_core::streams::Part;
    for part in Part::PREDICTOR {
        let analytic = g.get(part).unwrap().clone();
        let n = param_count(stream.part(part));
        for i in 0..n {
            let orig = *param_mut(part_mut(&mut stream, part), i);
            let num = central(
                |v| {
                    *param_mut(part_mut(&mut stream, part), i) = v;
                    loss_at(&stream, &full)
                },
                orig,
            );
            *param_mut(part_mut(&mut stream, part), i) = orig;
            worst = worst.max(rel_err(grad_at(&analytic, i), num));
        }
    }

    let n_valid = full.iter().filter(|&&m| m > 0.0).count();
    let k = below(rng, 1, n_valid + 1);
    let tau = [0.1, 1.0, 5.0][below(rng, 0, 3)];
    let (_, sel_grad) = selector_gradient(&stream, &inst, k, tau, pw, eps).unwrap();
    let scores = stream.score_units(stream.units(&inst), &stream.presence(&inst)).unwrap();
    let hard = ste_topk(&scores, k, tau).unwrap().hard;
    let gmask: Vec<f64> = (0..hard.len())
        .map(|u| {
            if full[u] == 0.0 {
                return 0.0;
            }
            let mut m = hard.clone();
            central(
                |v| {
                    m[u] = v;
                    loss_at(&stream, &m)
                },
                hard[u],
            )
        })
        .collect();
    let surrogate = |s: &StreamModel| -> f64 {
        let sc = s.score_units(s.units(&inst), &s.presence(&inst)).unwrap();
        softmax_temp(&sc, tau).unwrap().iter().zip(&gmask).map(|(p, g)| p * g).sum()
    };
    for i in 0..param_count(&stream.selector) {
        let orig = *param_mut(&mut stream.selector, i);
        let num = central(
            |v| {
                *param_mut(&mut stream.selector, i) = v;
                surrogate(&stream)
            },
            orig,
        );
        *param_mut(&mut stream.selector, i) = orig;
        worst = worst.max(rel_err(grad_at(&sel_grad, i), num));
    }
    worst
}

fn part_mut(s: &mut StreamModel, part: toe_core::streams::Part) -> &mut MlpParams {
    use toe_core::streams::Part;
    match part {
        Part::Selector => &mut s.selector,
        Part::UnitProj => &mut s.unit_proj,
        Part::CtxProjCxr => &mut s.ctx_proj_cxr,
        Part::CtxProjEcg => &mut s.ctx_proj_ecg,
        Part::Classifier => &mut s.classifier,
    }
}

fn crit_gradients(_: &Ctx) -> Result<Outcome, String> {
    let start = Instant::now();
    let n_configs = 60;
    let mut worst = [0.0f64; 4];
    for c in 0..n_configs {
        let mut rng = SeededRng::derived(c, "gradient-check");
        worst[0] = worst[0].max(check_mlp(&mut rng));
        worst[1] = worst[1].max(check_bce(&mut rng));
        worst[2] = worst[2].max(check_ste(&mut rng));
        worst[3] = worst[3].max(check_stream(&mut rng));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    outcome(
        max < 1e-4 && secs < 10.0,
        format!(
            "{n_configs} configs; max rel err mlp {:.1e}, bce {:.1e}, ste {:.1e}, stream+selector {:.1e} (< 1e-4); {secs:.2}s (< 10s)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------- 2: metric oracles ----------

fn brute_auroc(y: &[bool], s: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..y.len() {
        for j in 0..y.len() {
            if y[i] && !y[j] {
                den += 1.0;
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn brute_ap(y: &[bool], s: &[f64]) -> f64 {
    let n_pos = y.iter().filter(|&&b| b).count() as f64;
    let mut total = 0.0;
    for i in 0..y.len() {
        if !y[i] {
            continue;
        }
        let above: Vec<usize> = (0..y.len()).filter(|&j| s[j] >= s[i]).collect();
        let tp = above.iter().filter(|&&j| y[j]).count() as f64;
        total += tp / above.len() as f64;
    }
    total / n_pos
}

fn brute_ece(y: &[bool], p: &[f64], bins: usize) -> f64 {
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..p.len())
            .filter(|&i| p[i] >= lo && (p[i] < hi || (b + 1 == bins && p[i] <= 1.0)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| y[i]).count() as f64 / m;
        let conf = members.iter().map(|&i| p[i]).sum::<f64>() / m;
        total += m / p.len() as f64 * (acc - conf).abs();
    }
    total
}

fn crit_metrics(_: &Ctx) -> Result<Outcome, String> {
    let hand = [
        (
            "auroc",
            auroc(&[true, false, true, false], &[0.9, 0.8, 0.4, 0.1]).map_err(e)?,
            0.75,
        ),
        ("ap", auprc(&[true, false], &[0.1, 0.9]).map_err(e)?, 0.5),
        (
            "ece",
            ece(&[false, false, true, true], &[0.2, 0.2, 0.9, 0.9], 10).map_err(e)?,
            0.15,
        ),
    ];
    let hand_ok = hand.iter().all(|(_, got, want)| (got - want).abs() < 1e-12);
    let mut worst: f64 = 0.0;
    for trial in 0..5u64 {
        let mut rng = SeededRng::derived(trial, "metric-oracle");
        let n = 1000;
        let y: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.3)).collect();
        // Rounded scores so tie handling is exercised.
        let s: Vec<f64> = (0..n)
            .map(|_| {
                let v = rng.uniform_range(0.0, 1.0);
                if trial % 2 == 0 {
                    (v * 50.0).round() / 50.0
                } else {
                    v
                }
            })
            .collect();
        let q: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 1.0)).collect();
        worst = worst.max((auroc(&y, &s).map_err(e)? - brute_auroc(&y, &s)).abs());
        worst = worst.max((auprc(&y, &s).map_err(e)? - brute_ap(&y, &s)).abs());
        worst = worst.max((ece(&y, &s, 10).map_err(e)? - brute_ece(&y, &s, 10)).abs());
        let mae = s.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
        worst = worst.max((fidelity_mae(&s, &q).map_err(e)? - mae).abs());
    }
    outcome(
        hand_ok && worst <= 1e-12,
        format!(
            "hand cases {} (auroc {}, ap {}, ece {}); max brute-force gap {worst:.1e} over 5x1000 points (<= 1e-12)",
            if hand_ok { "exact" } else { "MISMATCH" },
            hand[0].1,
            hand[1].1,
            hand[2].1
        ),
    )
}

// ---------- 3, 6, 7: sufficiency and fidelity ----------

fn full_report(r: &Trained) -> Result<MetricsReport, String> {
    let test = r.test();
    let masks: Vec<MaskPair> = test.iter().map(|i| MaskPair::full_for(i)).collect();
    evaluate_masks(&r.bundle, &test, &masks, "full", 0, r.seed, None).map_err(e)
}

fn toe_report(r: &Trained, cfg: &SearchConfig, k: usize) -> Result<MetricsReport, String> {
    let mut runs = run_search_suite(&r.bundle, &r.test(), cfg, &[k], "toe", r.seed).map_err(e)?;
    Ok(runs.remove(0).report)
}

fn topk_report(r: &Trained, k: usize) -> Result<MetricsReport, String> {
    let test = r.test();
    let masks: Vec<MaskPair> = test
        .iter()
        .map(|i| topk_ranking_mask(&r.bundle, i, k, RankingPool::Global))
        .collect::<toe_core::Result<_>>()
        .map_err(e)?;
    evaluate_masks(&r.bundle, &test, &masks, "topk", k, r.seed, None).map_err(e)
}

fn crit_sufficiency(ctx: &Ctx) -> Result<Outcome, String> {
    let start = Instant::now();
    let cfg = SearchConfig::default();
    let (mut full, mut toe) = (Vec::new(), Vec::new());
    for r in &ctx.runs {
        full.push(full_report(r)?.auroc);
        toe.push(toe_report(r, &cfg, 5)?.auroc);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mf, mt) = (mean(&full), mean(&toe));
    let secs = ctx.training_secs + start.elapsed().as_secs_f64();
    outcome(
        mt >= 0.98 * mf && secs < 300.0,
        format!(
            "toe@5 auroc {:.4} vs full {:.4} (ratio {:.4}, need >= 0.98); per seed {:?} / {:?}; {secs:.0}s incl. training (< 300s)",
            mt,
            mf,
            mt / mf,
            toe.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            full.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn crit_search_vs_ranking(ctx: &Ctx) -> Result<Outcome, String> {
    let cfg = SearchConfig::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for r in &ctx.runs {
        for k in [1, 5] {
            let t = toe_report(r, &cfg, k)?.fidelity_mae;
            let p = topk_report(r, k)?.fidelity_mae;
            pass &= t < p;
            parts.push(format!("s{} k{k}: {t:.4}<{p:.4}", r.seed));
        }
    }
    outcome(pass, format!("search vs top-k fidelity MAE: {}", parts.join(", ")))
}

fn crit_stability_space(ctx: &Ctx) -> Result<Outcome, String> {
    let prob = SearchConfig::default();
    let logit = SearchConfig {
        stability_space: StabilitySpace::Logit,
        ..SearchConfig::default()
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for r in &ctx.runs {
        let p = toe_report(r, &prob, 5)?.fidelity_mae;
        let l = toe_report(r, &logit, 5)?.fidelity_mae;
        pass &= p <= l;
        parts.push(format!("s{}: prob {p:.4} vs logit {l:.4}", r.seed));
    }
    outcome(pass, format!("k=5 fidelity MAE, need prob <= logit on every seed: {}", parts.join(", ")))
}

// ---------- 4: optimality gap ----------

fn crit_optimality(_: &Ctx) -> Result<Outcome, String> {
    let synth = SynthConfig { seed: 0, ..SynthConfig::toy() };
    let cohort = generate_cohort(&synth).map_err(e)?;
    let tcfg = TrainConfig {
        epochs_phase1: 10,
        epochs_phase2: 5,
        ..TrainConfig::default()
    };
    let (bundle, _) = train(&cohort, &tcfg).map_err(e)?;
    let test = cohort.split(Split::Test);
    let (mut equal, mut total, mut exceed) = (0usize, 0usize, 0usize);
    let mut gap_sum = 0.0;
    let mut max_units = 0;
    for inst in test.iter().take(200) {
        max_units = max_units.max(inst.n_units());
        for k_max in 1..=3 {
            // Thresholds off so the beam reaches every depth up to k_max.
            let cfg = SearchConfig {
                tau_conf: f64::INFINITY,
                tau_suff: f64::INFINITY,
                ..SearchConfig::default()
            }
            .with_budget(k_max);
            let out = beam_search_detailed(&bundle, inst, &cfg).map_err(e)?;
            let beam_best = out
                .depth_best
                .iter()
                .min_by(|a, b| rank_states(a, b))
                .ok_or("beam produced no states")?;
            let oracle = exhaustive_best(&bundle, inst, k_max, &cfg).map_err(e)?.best;
            let gap = oracle.score - beam_best.score;
            total += 1;
            if gap.abs() <= 1e-9 {
                equal += 1;
            }
            if gap < -1e-9 {
                exceed += 1;
            }
            gap_sum += gap.max(0.0);
        }
    }
    let rate = equal as f64 / total as f64;
    let mean_gap = gap_sum / total as f64;
    outcome(
        rate >= 0.99 && exceed == 0 && mean_gap <= 1e-3,
        format!(
            "{} instances (<= {max_units} units) x k_max 1..3: equal {rate:.4} (>= 0.99), exceeding {exceed}, mean gap {mean_gap:.1e} (<= 1e-3)",
            total / 3
        ),
    )
}

// ---------- 5: stability ablation ----------

fn crit_ablation(ctx: &Ctx) -> Result<Outcome, String> {
    let base = SearchConfig::default();
    let no_stab = SearchConfig { lambda: 0.0, ..base.clone() };
    let mut ratios = Vec::new();
    for r in &ctx.runs {
        let full = toe_report(r, &base, 5)?.fidelity_mae;
        let l0 = toe_report(r, &no_stab, 5)?.fidelity_mae;
        ratios.push(l0 / full);
    }
    // Sparsity invariance: thresholds off, fixed budgets, mu in {0, 0.05}.
    let r0 = &ctx.runs[0];
    let off = SearchConfig {
        tau_conf: f64::INFINITY,
        tau_suff: f64::INFINITY,
        ..base.clone()
    };
    let mut identical = true;
    for k in [1, 5] {
        for inst in r0.test() {
            let a = beam_search(&r0.bundle, inst, &off.with_budget(k)).map_err(e)?;
            let b = beam_search(&r0.bundle, inst, &SearchConfig { mu: 0.0, ..off.clone() }.with_budget(k)).map_err(e)?;
            identical &= a.final_mask == b.final_mask && a.steps.iter().map(|s| s.unit).eq(b.steps.iter().map(|s| s.unit));
        }
    }
    outcome(
        ratios[0] >= 1.5 && identical,
        format!(
            "default seed: lambda=0 MAE / full MAE = {:.3} (>= 1.5); seeds 1, 2 for reference: {:.3}, {:.3}; mu in {{0, 0.05}} identical traces: {identical}",
            ratios[0], ratios[1], ratios[2]
        ),
    )
}

// ---------- 8: STE temperature ----------

fn crit_temperature(ctx: &Ctx) -> Result<Outcome, String> {
    let r0 = &ctx.runs[0];
    let test = r0.test();
    let mut aurocs = Vec::new();
    for tau in [0.1, 1.0, 5.0] {
        let cfg = TrainConfig {
            ste_temperature: tau,
            ..TrainConfig::default()
        };
        let (b, _) = train_phase2(&r0.cohort, &ctx.phase1_seed0, &cfg).map_err(e)?;
        let masks: Vec<MaskPair> = test
            .iter()
            .map(|i| selector_mask(&b, i, cfg.k_train))
            .collect::<toe_core::Result<_>>()
            .map_err(e)?;
        aurocs.push(evaluate_masks(&b, &test, &masks, "selector", cfg.k_train, 0, None).map_err(e)?.auroc);
    }
    let spread = aurocs.iter().cloned().fold(f64::MIN, f64::max) - aurocs.iter().cloned().fold(f64::MAX, f64::min);
    outcome(
        spread < 0.02,
        format!(
            "selector top-k_train sufficiency auroc at tau 0.1/1/5: {:.4}/{:.4}/{:.4}; spread {spread:.4} (< 0.02)",
            aurocs[0], aurocs[1], aurocs[2]
        ),
    )
}

// ---------- 9: exhaustion asymmetry ----------

fn crit_exhaustion(ctx: &Ctx) -> Result<Outcome, String> {
    let clean = &ctx.runs[0].cohort;
    let noisy = inject_label_noise(clean, 0.1, 0, &[Split::Train, Split::Val, Split::Test]).map_err(e)?;
    let (bundle, _) = train(&noisy, &TrainConfig::default()).map_err(e)?;
    let test = noisy.split(Split::Test);
    let cfg = SearchConfig::default();
    let traces: Vec<_> = test
        .iter()
        .map(|i| beam_search(&bundle, i, &cfg))
        .collect::<toe_core::Result<_>>()
        .map_err(e)?;
    let labels: Vec<bool> = test.iter().map(|i| i.label).collect();
    let ex = exhaustion_stats(&traces, &labels).map_err(e)?;
    let ab = selective_abstention(&traces, &labels).map_err(e)?;
    outcome(
        ex.fp_rate >= 2.0 * ex.tp_rate && ab.fp_caught > ab.tp_lost,
        format!(
            "10% label noise: exhaustion fp {:.3} vs tp {:.3} (ratio {}, need >= 2; {} FP, {} TP); abstention fp_caught {:.3} > tp_lost {:.3}",
            ex.fp_rate,
            ex.tp_rate,
            ratio_str(ex.ratio),
            ex.n_fp,
            ex.n_tp,
            ab.fp_caught,
            ab.tp_lost
        ),
    )
}

fn ratio_str(r: Ratio) -> String {
    match r {
        Ratio::Finite(v) => format!("{v:.2}"),
        Ratio::Infinite => "inf".into(),
        Ratio::Undefined => "undefined".into(),
    }
}

// ---------- 10: spurious feature ----------

fn crit_spurious(ctx: &Ctx) -> Result<Outcome, String> {
    let r0 = &ctx.runs[0];
    let sp = inject_spurious(&r0.cohort, &SpuriousConfig::default(), 0).map_err(e)?;
    let (sp_bundle, _) = train(&sp, &TrainConfig::default()).map_err(e)?;
    let flags: Vec<bool> = sp
        .indices(Split::Test)
        .iter()
        .map(|&i| sp.spurious_flag(i).expect("flag injected"))
        .collect();
    let rep = spurious_experiment(
        &r0.bundle,
        &r0.test(),
        &sp_bundle,
        &sp.split(Split::Test),
        &flags,
        &SearchConfig::default(),
    )
    .map_err(e)?;
    let ev = rep.evidence_ratio.value().unwrap_or(f64::NAN);
    let pass = ev >= 1.5
        && rep.spurious.convergence_rate < rep.clean.convergence_rate
        && rep.flag_consistent.convergence_rate > rep.flag_inconsistent.convergence_rate;
    outcome(
        pass,
        format!(
            "evidence ratio {ev:.3} (>= 1.5); convergence spurious {:.3} vs clean {:.3} (need lower); flag-consistent {:.3} vs inconsistent {:.3} (need higher)",
            rep.spurious.convergence_rate,
            rep.clean.convergence_rate,
            rep.flag_consistent.convergence_rate,
            rep.flag_inconsistent.convergence_rate
        ),
    )
}

// ---------- 11: planted evidence ----------

fn crit_recovery(ctx: &Ctx) -> Result<Outcome, String> {
    let k = TrainConfig::default().k_train;
    let rec: Vec<_> = ctx
        .runs
        .iter()
        .map(|r| planted_recovery(&r.bundle, &r.cohort, Split::Test, k))
        .collect::<toe_core::Result<_>>()
        .map_err(e)?;
    let r = &rec[0];
    outcome(
        r.precision >= 0.8,
        format!(
            "default seed: precision {:.3} (>= 0.8; ts {:.3}, notes {:.3}, {} positives); seeds 1, 2 for reference: {:.3}, {:.3}",
            r.precision, r.ts_precision, r.note_precision, r.n_instances, rec[1].precision, rec[2].precision
        ),
    )
}

// ---------- 12: determinism and efficiency ----------

fn crit_determinism(ctx: &Ctx) -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(e)?;
    let synth = SynthConfig { seed: 5, ..SynthConfig::toy() };
    let tcfg = TrainConfig {
        seed: 5,
        epochs_phase1: 5,
        epochs_phase2: 3,
        ..TrainConfig::default()
    };
    let cfg = SearchConfig::default();
    let mut files = Vec::new();
    for run in 0..2 {
        let cohort = generate_cohort(&synth).map_err(e)?;
        let (bundle, log) = train(&cohort, &tcfg).map_err(e)?;
        let test = cohort.split(Split::Test);
        let runs = run_search_suite(&bundle, &test, &cfg, &[1, 5], "toe", 5).map_err(e)?;
        let p = |name: &str| dir.path().join(format!("{name}{run}"));
        save_cohort(&cohort, &p("cohort")).map_err(e)?;
        bundle.save(&p("model")).map_err(e)?;
        write_traces(&p("traces"), &runs[1].traces, None).map_err(e)?;
        let rows: Vec<MetricsReport> = runs.iter().map(|r| r.report.clone()).collect();
        std::fs::write(p("suite"), suite_csv(&rows, None)).map_err(e)?;
        std::fs::write(p("log"), log.to_csv()).map_err(e)?;
        files.push(["cohort", "model", "traces", "suite", "log"].map(|n| std::fs::read(p(n)).unwrap()));
    }
    let identical = files[0] == files[1];

    let r0 = &ctx.runs[0];
    let test = r0.test();
    let start = Instant::now();
    let mut builds_ok = true;
    for inst in &test {
        let out = beam_search_detailed(&r0.bundle, inst, &cfg).map_err(e)?;
        builds_ok &= out.stats.cache_builds == 1;
    }
    let per_ms = start.elapsed().as_secs_f64() * 1e3 / test.len() as f64;
    outcome(
        identical && builds_ok && per_ms < 50.0,
        format!(
            "byte-identical cohort/model/traces/suite/log across reruns: {identical}; search {per_ms:.3} ms/instance serial (< 50); one cache build per instance: {builds_ok}"
        ),
    )
}

type Criterion = fn(&Ctx) -> Result<Outcome, String>;

fn main() {
    let strict = std::env::var("TOE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let start = Instant::now();
    let ctx = match build_context() {
        Ok(c) => c,
        Err(err) => {
            println!("acceptance: could not train default models: {err}");
            std::process::exit(1);
        }
    };
    let criteria: [(&str, Criterion); 12] = [
        ("gradient correctness", crit_gradients),
        ("metric oracles", crit_metrics),
        ("sufficiency retention", crit_sufficiency),
        ("optimality gap", crit_optimality),
        ("stability ablation", crit_ablation),
        ("search vs ranking", crit_search_vs_ranking),
        ("stability space", crit_stability_space),
        ("ste temperature", crit_temperature),
        ("exhaustion asymmetry", crit_exhaustion),
        ("spurious injection", crit_spurious),
        ("planted evidence recovery", crit_recovery),
        ("determinism and efficiency", crit_determinism),
    ];
    let mut passed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(|| f(&ctx)));
        let (ok, detail) = match res {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(err)) => (false, format!("error: {err}")),
            Err(_) => (false, "panicked".into()),
        };
        passed += usize::from(ok);
        println!(
            "[{}] {:>2} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s",
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if strict && passed < criteria.len() {
        std::process::exit(1);
    }
}
