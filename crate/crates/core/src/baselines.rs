//! Comparison mask producers and the exhaustive oracle.

use serde::{Deserialize, Serialize};

use crate::datamodel::{Instance, MaskPair, Unit};
use crate::error::{Result, ToeError};
use crate::numerics::SeededRng;
use crate::search::{candidate_units, rank_states, score_state, Reference, SearchConfig, SearchState};
use crate::streams::{top_k_indices, EvalCache, ModelBundle, StreamKind};

/// How selector scores from the two streams are combined for top-k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingPool {
    /// One list of raw scores.
    #[default]
    Global,
    /// One list after z-normalizing each stream's scores.
    GlobalZNorm,
    /// Alternate between the streams' own rankings, time series first.
    PerModality,
}

impl std::str::FromStr for RankingPool {
    type Err = ToeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(RankingPool::Global),
            "global_znorm" => Ok(RankingPool::GlobalZNorm),
            "per_modality" => Ok(RankingPool::PerModality),
            _ => Err(ToeError::InvalidConfig(format!("unknown ranking pool {s:?}"))),
        }
    }
}

fn znorm(scores: &[f64]) -> Vec<f64> {
    let finite: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
    if finite.is_empty() {
        return scores.to_vec();
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let sd = (finite.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    scores.iter().map(|s| if s.is_finite() { (s - mean) / sd } else { *s }).collect()
}

/// Units ranked by selector score, best first, under `pool`.
pub fn selector_ranking(bundle: &ModelBundle, inst: &Instance, pool: RankingPool) -> Result<Vec<Unit>> {
    let mut ts = bundle.score_units(StreamKind::TimeSeries, inst)?;
    let mut note = bundle.score_units(StreamKind::Notes, inst)?;
    if pool == RankingPool::PerModality {
        let ts_order = crate::streams::top_k_indices(&ts, ts.len());
        let note_order = crate::streams::top_k_indices(&note, note.len());
        let mut out = Vec::with_capacity(ts_order.len() + note_order.len());
        let (mut a, mut b) = (ts_order.into_iter(), note_order.into_iter());
        loop {
            let x = a.next().map(Unit::Ts);
            let y = b.next().map(Unit::Note);
            if x.is_none() && y.is_none() {
                break;
            }
            out.extend(x);
            out.extend(y);
        }
        return Ok(out);
    }
    if pool == RankingPool::GlobalZNorm {
        ts = znorm(&ts);
        note = znorm(&note);
    }
    let mut scored: Vec<(f64, Unit)> = note
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_finite())
        .map(|(j, &s)| (s, Unit::Note(j)))
        .chain(ts.iter().enumerate().map(|(t, &s)| (s, Unit::Ts(t))))
        .collect();
    // Ties: modality tag (note before ts), then index.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, u)| u).collect())
}

fn mask_from_prefix(inst: &Instance, ranking: &[Unit], k: usize) -> MaskPair {
    MaskPair::from_units(inst.ts.rows(), inst.presence.len(), &ranking[..k.min(ranking.len())])
}

/// The `k` units with the highest selector scores.
pub fn topk_ranking_mask(bundle: &ModelBundle, inst: &Instance, k: usize, pool: RankingPool) -> Result<MaskPair> {
    if k == 0 {
        return Err(ToeError::invalid("top-k needs k >= 1"));
    }
    Ok(mask_from_prefix(inst, &selector_ranking(bundle, inst, pool)?, k))
}

/// Each stream's own top-`k` units, the hard mask the selectors were
/// trained to produce.
pub fn selector_mask(bundle: &ModelBundle, inst: &Instance, k: usize) -> Result<MaskPair> {
    let mut mask = MaskPair::empty_for(inst);
    for t in top_k_indices(&bundle.score_units(StreamKind::TimeSeries, inst)?, k) {
        mask.ts[t] = true;
    }
    for j in top_k_indices(&bundle.score_units(StreamKind::Notes, inst)?, k) {
        mask.note[j] = true;
    }
    Ok(mask)
}

/// Uniform `k`-subset of the instance's valid units (all of them when
/// fewer than `k` exist).
pub fn random_mask(inst: &Instance, k: usize, seed: u64) -> MaskPair {
    let units = inst.units();
    let mut rng = SeededRng::derived(seed, &format!("random-mask:{}", inst.id));
    let picked: Vec<Unit> = rng.sample_indices(units.len(), k).into_iter().map(|i| units[i]).collect();
    MaskPair::from_units(inst.ts.rows(), inst.presence.len(), &picked)
}

/// Valid units ordered by input-times-gradient magnitude, largest first;
/// ties by unit order. The relaxed mask scales a unit's features, so the
/// score of unit `i` is `|d(l_ts + l_note) / d m_i|` at `m = 1`.
pub fn saliency_rank(bundle: &ModelBundle, inst: &Instance) -> Result<Vec<Unit>> {
    let scored = saliency_scores(bundle, inst)?;
    let mut scored: Vec<(f64, Unit)> = scored.into_iter().map(|(u, s)| (s, u)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, u)| u).collect())
}

/// Saliency of every valid unit, in unit order.
pub fn saliency_scores(bundle: &ModelBundle, inst: &Instance) -> Result<Vec<(Unit, f64)>> {
    let (g_ts, g_note) = bundle.input_gradient_at_full(inst)?;
    Ok(inst
        .units()
        .into_iter()
        .map(|u| {
            let g = match u {
                Unit::Ts(t) => g_ts[t],
                Unit::Note(j) => g_note[j],
            };
            (u, g.abs())
        })
        .collect())
}

pub fn saliency_mask(bundle: &ModelBundle, inst: &Instance, k: usize) -> Result<MaskPair> {
    Ok(mask_from_prefix(inst, &saliency_rank(bundle, inst)?, k))
}

/// Largest candidate count the oracle will enumerate.
pub const ORACLE_MAX_UNITS: usize = 14;

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub best: SearchState,
    pub enumerated: usize,
}

/// Scores every mask with 1 to `k_max` candidate units and returns the
/// best under the search ordering.
pub fn exhaustive_best(bundle: &ModelBundle, inst: &Instance, k_max: usize, cfg: &SearchConfig) -> Result<OracleResult> {
    let cands = candidate_units(bundle, inst, cfg)?;
    if cands.len() > ORACLE_MAX_UNITS {
        return Err(ToeError::OracleTooLarge(cands.len()));
    }
    let cache = EvalCache::build(bundle, inst)?;
    let reference = Reference::from_cache(bundle, &cache, inst)?;
    let n = cands.len();
    let mut best: Option<SearchState> = None;
    let mut enumerated = 0;
    for bits in 1u32..(1u32 << n) {
        let k = bits.count_ones() as usize;
        if k > k_max {
            continue;
        }
        let units: Vec<Unit> = (0..n).filter(|i| bits & (1 << i) != 0).map(|i| cands[i]).collect();
        let mask = MaskPair::from_units(inst.ts.rows(), inst.presence.len(), &units);
        let st = score_state(bundle, &cache, &reference, &mask, cfg)?;
        enumerated += 1;
        if best.as_ref().map_or(true, |b| rank_states(&st, b).is_lt()) {
            best = Some(st);
        }
    }
    let best = best.ok_or_else(|| ToeError::invalid("no candidate units to enumerate"))?;
    Ok(OracleResult { best, enumerated })
}
