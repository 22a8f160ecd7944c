//! One function per subcommand. Each takes the merged configuration and
//! writes its outputs atomically, refusing to overwrite without `force`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::Serialize;

use toe_core::baselines::{random_mask, saliency_mask, selector_mask, topk_ranking_mask};
use toe_core::datamodel::{load_cohort, read_traces, save_cohort, write_atomic, write_traces, Cohort, Instance, MaskPair, Split, Trace};
use toe_core::report::{
    ablation_csv, aggregate, aggregate_csv, evidence_histograms, frontier_csv, parse_suite_csv, suite_csv, AblationRow,
    AuditReport,
};
use toe_core::search::{
    beam_search, evaluate_masks, exhaustion_stats, run_search_suite, selective_abstention, spurious_experiment,
    SearchConfig, StabilitySpace,
};
use toe_core::metrics::MetricsReport;
use toe_core::streams::ModelBundle;
use toe_core::synth::{generate_cohort, inject_label_noise, inject_spurious};
use toe_core::training::{planted_recovery, train, train_phase2, TrainConfig};

use crate::config::RunConfig;
use crate::error::CliError;

pub struct Output {
    pub force: bool,
}

impl Output {
    fn check(&self, path: &Path) -> Result<(), CliError> {
        if path.exists() && !self.force {
            return Err(CliError::Data(format!("{} exists; pass --force to overwrite", path.display())));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        Ok(())
    }

    fn write(&self, path: &Path, text: &str) -> Result<(), CliError> {
        self.check(path)?;
        write_atomic(path, text.as_bytes())?;
        info!("wrote {}", path.display());
        Ok(())
    }
}

/// `out` if set, otherwise `fallback`.
fn target(cfg: &RunConfig, fallback: &str) -> PathBuf {
    let out = cfg.get("out");
    PathBuf::from(if out.is_empty() { fallback } else { out })
}

/// With several seeds, every per-seed path must contain `{seed}`.
fn require_template(cfg: &RunConfig, paths: &[&str]) -> Result<Vec<u64>, CliError> {
    let seeds = cfg.seeds()?;
    if seeds.len() > 1 {
        for p in paths {
            if !p.contains("{seed}") {
                return Err(CliError::Usage(format!(
                    "path {p:?} is shared by {} seeds; add {{seed}} to it",
                    seeds.len()
                )));
            }
        }
    }
    Ok(seeds)
}

fn load_inputs(cfg: &RunConfig) -> Result<(Cohort, ModelBundle), CliError> {
    let cohort = load_cohort(Path::new(cfg.get("cohort")))
        .map_err(|e| CliError::Data(format!("cohort {}: {e}", cfg.get("cohort"))))?;
    let bundle = ModelBundle::load(Path::new(cfg.get("model")))
        .map_err(|e| CliError::Data(format!("model {}: {e}", cfg.get("model"))))?;
    if bundle.dims != cohort.dims {
        return Err(CliError::Data("model and cohort dimensions differ".into()));
    }
    Ok((cohort, bundle))
}

#[derive(Serialize)]
struct SplitSummary {
    split: String,
    n: usize,
    positives: usize,
    with_planted_ts: usize,
    with_planted_notes: usize,
}

#[derive(Serialize)]
struct GroundTruthSummary {
    config: String,
    spurious_feature: Option<usize>,
    splits: Vec<SplitSummary>,
}

fn ground_truth_summary(cohort: &Cohort, config: &str) -> GroundTruthSummary {
    let splits = [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .map(|s| {
            let idx = cohort.indices(s);
            let gts: Vec<&MaskPair> = idx.iter().filter_map(|&i| cohort.ground_truth[i].as_ref()).collect();
            SplitSummary {
                split: s.to_string(),
                n: idx.len(),
                positives: idx.iter().filter(|&&i| cohort.instances[i].label).count(),
                with_planted_ts: gts.iter().filter(|g| g.ts.contains(&true)).count(),
                with_planted_notes: gts.iter().filter(|g| g.note.contains(&true)).count(),
            }
        })
        .collect();
    GroundTruthSummary {
        config: config.to_string(),
        spurious_feature: cohort.meta.spurious_feature,
        splits,
    }
}

pub fn generate(cfg: &RunConfig, out: &Output) -> Result<(), CliError> {
    let path_template = target(cfg, cfg.get("cohort")).to_string_lossy().into_owned();
    for seed in require_template(cfg, &[&path_template])? {
        let sc = cfg.for_seed(seed);
        let path = target(&sc, sc.get("cohort"));
        let sidecar = PathBuf::from(format!("{}.gt.json", path.display()));
        out.check(&path)?;
        out.check(&sidecar)?;
        let mut cohort = generate_cohort(&sc.synth()?)?;
        let noise: f64 = sc.parse("label_noise")?;
        if noise > 0.0 {
            cohort = inject_label_noise(&cohort, noise, seed, &[Split::Train, Split::Val, Split::Test])?;
        }
        if sc.parse::<bool>("spurious")? {
            cohort = inject_spurious(&cohort, &sc.spurious()?, seed)?;
        }
        let resolved = sc.resolved();
        info!("seed {seed}: resolved config\n{resolved}");
        cohort.meta.config = Some(resolved.clone());
        save_cohort(&cohort, &path)?;
        info!("wrote {} ({} instances)", path.display(), cohort.len());
        let summary = serde_json::to_string_pretty(&ground_truth_summary(&cohort, &resolved))?;
        out.write(&sidecar, &(summary + "\n"))?;
    }
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, phase2_only: bool, out: &Output) -> Result<(), CliError> {
    let model_template = target(cfg, cfg.get("model")).to_string_lossy().into_owned();
    for seed in require_template(cfg, &[cfg.get("cohort"), &model_template])? {
        let sc = cfg.for_seed(seed);
        let path = target(&sc, sc.get("model"));
        let log_path = PathBuf::from(format!("{}.log.csv", path.display()));
        out.check(&path)?;
        out.check(&log_path)?;
        let cohort = load_cohort(Path::new(sc.get("cohort")))?;
        let tc = sc.train()?;
        let resolved = sc.resolved();
        info!("seed {seed}: resolved config\n{resolved}");
        let (mut bundle, log) = if phase2_only {
            let base = ModelBundle::load(Path::new(sc.get("model")))?;
            train_phase2(&cohort, &base, &tc)?
        } else {
            train(&cohort, &tc)?
        };
        bundle.config = Some(resolved.clone());
        bundle.save(&path)?;
        info!("wrote {}", path.display());
        if let Ok(r) = planted_recovery(&bundle, &cohort, Split::Test, tc.k_train) {
            info!(
                "selector precision on planted test evidence: ts {:.3}, notes {:.3}",
                r.ts_precision, r.note_precision
            );
        }
        let text = toe_core::report::comment_block(&resolved) + &log.to_csv();
        out.write(&log_path, &text)?;
    }
    Ok(())
}

fn masks_for(
    instances: &[&Instance],
    f: impl Fn(&Instance) -> toe_core::Result<MaskPair> + Sync,
) -> Result<Vec<MaskPair>, CliError> {
    Ok(instances.par_iter().map(|i| f(i)).collect::<toe_core::Result<Vec<_>>>()?)
}

/// Suite rows for one method over the budgets, plus ToE traces per budget.
fn method_rows(
    method: &str,
    bundle: &ModelBundle,
    instances: &[&Instance],
    search: &SearchConfig,
    budgets: &[usize],
    cfg: &RunConfig,
    seed: u64,
) -> Result<(Vec<MetricsReport>, Vec<(usize, Vec<Trace>)>), CliError> {
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    if method == "toe" {
        for run in run_search_suite(bundle, instances, search, budgets, "toe", seed)? {
            rows.push(run.report);
            traces.push((run.k, run.traces));
        }
        return Ok((rows, traces));
    }
    let pool = cfg.ranking_pool()?;
    for &k in budgets {
        let masks = match method {
            "topk" => masks_for(instances, |i| topk_ranking_mask(bundle, i, k, pool))?,
            "random" => masks_for(instances, |i| Ok(random_mask(i, k, seed)))?,
            "saliency" => masks_for(instances, |i| saliency_mask(bundle, i, k))?,
            "selector" => masks_for(instances, |i| selector_mask(bundle, i, k))?,
            other => return Err(CliError::Usage(format!("unknown method {other:?}"))),
        };
        rows.push(evaluate_masks(bundle, instances, &masks, method, k, seed, None)?);
    }
    Ok((rows, traces))
}

pub fn evaluate(cfg: &RunConfig, traces_dir: Option<&str>, frontier: Option<&str>, out: &Output) -> Result<(), CliError> {
    let path = target(cfg, "suite.csv");
    out.check(&path)?;
    let methods: Vec<String> = cfg.list("methods")?;
    let budgets = cfg.budgets()?;
    let search = cfg.search()?;
    let split = cfg.split()?;
    info!("resolved config\n{}", cfg.resolved());
    let mut rows = Vec::new();
    for seed in require_template(cfg, &[cfg.get("cohort"), cfg.get("model")])? {
        let sc = cfg.for_seed(seed);
        let (cohort, bundle) = load_inputs(&sc)?;
        let instances = cohort.split(split);
        for method in &methods {
            let (r, traces) = method_rows(method, &bundle, &instances, &search, &budgets, &sc, seed)?;
            for row in &r {
                info!(
                    "seed {seed} {} k={}: auroc {:.4}, fidelity mae {:.4}",
                    row.method, row.k, row.auroc, row.fidelity_mae
                );
            }
            rows.extend(r);
            if let Some(dir) = traces_dir {
                for (k, t) in traces {
                    let p = Path::new(dir).join(format!("{method}_k{k}_seed{seed}.jsonl"));
                    out.check(&p)?;
                    write_traces(&p, &t, Some(&sc.resolved()))?;
                }
            }
        }
    }
    let resolved = cfg.resolved();
    out.write(&path, &suite_csv(&rows, Some(&resolved)))?;
    if let Some(f) = frontier {
        out.write(Path::new(f), &frontier_csv(&rows, Some(&resolved)))?;
    }
    Ok(())
}

fn search_masks(bundle: &ModelBundle, instances: &[&Instance], cfg: &SearchConfig) -> Result<Vec<MaskPair>, CliError> {
    Ok(instances
        .par_iter()
        .map(|i| beam_search(bundle, i, cfg).map(|t| t.final_mask))
        .collect::<toe_core::Result<Vec<_>>>()?)
}

pub fn ablate(cfg: &RunConfig, out: &Output) -> Result<(), CliError> {
    let path = target(cfg, "ablation.csv");
    out.check(&path)?;
    let k: usize = cfg.parse("ablate_k")?;
    let base = cfg.search()?.with_budget(k);
    let split = cfg.split()?;
    let temps: Vec<f64> = cfg.list("ste_temperatures")?;
    info!("resolved config\n{}", cfg.resolved());
    let mut rows = Vec::new();
    for seed in require_template(cfg, &[cfg.get("cohort"), cfg.get("model")])? {
        let sc = cfg.for_seed(seed);
        let (cohort, bundle) = load_inputs(&sc)?;
        let instances = cohort.split(split);
        let full = search_masks(&bundle, &instances, &base)?;
        let variants = [
            ("full", base.clone()),
            ("lambda0", SearchConfig { lambda: 0.0, ..base.clone() }),
            ("mu0", SearchConfig { mu: 0.0, ..base.clone() }),
            (
                "logit_stability",
                SearchConfig {
                    stability_space: StabilitySpace::Logit,
                    ..base.clone()
                },
            ),
        ];
        for (name, scfg) in variants {
            let run = run_search_suite(&bundle, &instances, &scfg, &[k], name, seed)?.remove(0);
            let masks: Vec<&MaskPair> = run.traces.iter().map(|t| &t.final_mask).collect();
            let same = masks.iter().zip(&full).all(|(a, b)| *a == b);
            rows.push(AblationRow::from_report(name, &run.report, Some(same)));
        }
        let pool = sc.ranking_pool()?;
        let topk = masks_for(&instances, |i| topk_ranking_mask(&bundle, i, k, pool))?;
        let r = evaluate_masks(&bundle, &instances, &topk, "topk", k, seed, None)?;
        rows.push(AblationRow::from_report("topk", &r, Some(topk == full)));

        let tc = sc.train()?;
        for &tau in &temps {
            let tcfg = TrainConfig {
                ste_temperature: tau,
                ..tc.clone()
            };
            let (b, _) = train_phase2(&cohort, &bundle, &tcfg)?;
            let masks = masks_for(&instances, |i| selector_mask(&b, i, tcfg.k_train))?;
            let name = format!("ste_tau={tau}");
            let r = evaluate_masks(&b, &instances, &masks, &name, tcfg.k_train, seed, None)?;
            rows.push(AblationRow::from_report(&name, &r, None));
        }
    }
    for r in &rows {
        info!("seed {} {}: fidelity mae {:.4}, auroc {:.4}", r.seed, r.config, r.fidelity_mae, r.auroc);
    }
    out.write(&path, &ablation_csv(&rows, Some(&cfg.resolved())))
}

pub fn audit(
    cfg: &RunConfig,
    traces_path: Option<&str>,
    spurious: Option<(&str, &str)>,
    out: &Output,
) -> Result<(), CliError> {
    let path = target(cfg, "audit.json");
    out.check(&path)?;
    let seed = cfg.seed()?;
    let sc = cfg.for_seed(seed);
    let (cohort, bundle) = load_inputs(&sc)?;
    let search = sc.search()?;
    let split = sc.split()?;
    let labels_by_id: HashMap<&str, bool> = cohort.instances.iter().map(|i| (i.id.as_str(), i.label)).collect();
    let traces = match traces_path {
        Some(p) => read_traces(Path::new(p))?,
        None => {
            let instances = cohort.split(split);
            instances
                .par_iter()
                .map(|i| beam_search(&bundle, i, &search))
                .collect::<toe_core::Result<Vec<_>>>()?
        }
    };
    let labels: Vec<bool> = traces
        .iter()
        .map(|t| {
            labels_by_id
                .get(t.instance_id.as_str())
                .copied()
                .ok_or_else(|| CliError::Data(format!("trace for unknown instance {}", t.instance_id)))
        })
        .collect::<Result<_, _>>()?;
    let cap = traces
        .iter()
        .map(|t| t.evidence_size())
        .max()
        .unwrap_or(0)
        .max(search.steps());
    let spurious_report = match spurious {
        Some((model_path, cohort_path)) => {
            let sp_bundle = ModelBundle::load(Path::new(model_path))?;
            let sp_cohort = load_cohort(Path::new(cohort_path))?;
            let idx = sp_cohort.indices(split);
            let flags: Vec<bool> = idx
                .iter()
                .map(|&i| {
                    sp_cohort
                        .spurious_flag(i)
                        .ok_or_else(|| CliError::Data(format!("{cohort_path} has no injected spurious feature")))
                })
                .collect::<Result<_, _>>()?;
            Some(spurious_experiment(
                &bundle,
                &cohort.split(split),
                &sp_bundle,
                &sp_cohort.split(split),
                &flags,
                &search,
            )?)
        }
        None => None,
    };
    let exhaustion = exhaustion_stats(&traces, &labels).ok();
    let report = AuditReport {
        config: Some(sc.resolved()),
        n: traces.len(),
        exhaustion,
        abstention: selective_abstention(&traces, &labels)?,
        histograms: evidence_histograms(&traces, &labels, cap)?,
        spurious: spurious_report,
    };
    if let Some(e) = &report.exhaustion {
        info!(
            "exhaustion among positive decisions: true positives {:.3}, false positives {:.3}",
            e.tp_rate, e.fp_rate
        );
    }
    out.write(&path, &(serde_json::to_string_pretty(&report)? + "\n"))
}

pub fn report(cfg: &RunConfig, inputs: &[PathBuf], out: &Output) -> Result<(), CliError> {
    if inputs.is_empty() {
        return Err(CliError::Usage("report needs at least one suite CSV".into()));
    }
    let path = target(cfg, "report.csv");
    out.check(&path)?;
    let mut rows = Vec::new();
    for p in inputs {
        let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        rows.extend(parse_suite_csv(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?);
    }
    let aggs = aggregate(&rows);
    for a in &aggs {
        println!("{:<10} k={:<3} {:<18} {:.4} ± {:.4} (n={})", a.method, a.k, a.metric, a.mean, a.std, a.n_seeds);
    }
    out.write(&path, &aggregate_csv(&aggs, Some(&cfg.resolved())))
}
