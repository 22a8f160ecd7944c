//! Synthetic cohorts with planted evidence.
//!
//! Positives receive `signal_strength` on the signal channels of
//! `planted_ts` random hours and `planted_note` chunks drawn around a fixed
//! label direction in embedding space. A fraction of positives carry signal
//! in notes only. Every cell that is not planted is Gaussian noise.

use crate::datamodel::{Cohort, ContextBlock, Dims, Instance, MaskPair, Split};
use crate::error::{Result, ToeError};
use crate::numerics::{derive_seed, DenseMatrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub t: usize,
    pub d: usize,
    pub m_max: usize,
    pub e_dim: usize,
    pub d_cxr: usize,
    pub d_ecg: usize,
    pub prevalence: f64,
    pub planted_ts: usize,
    pub planted_note: usize,
    /// Shift added to signal channels of planted hours. Note chunks and
    /// context scale with it too, so 0 yields a signal-free cohort.
    pub signal_strength: f64,
    /// Planted chunk offset along the label direction, as a multiple of
    /// `signal_strength`.
    pub note_signal_scale: f64,
    pub noise_sd: f64,
    /// Leading features that carry the planted time-series signal.
    pub signal_channels: usize,
    /// Fraction of positives whose signal lives only in notes.
    pub notes_only_fraction: f64,
    /// Label-correlated context shift, as a multiple of `signal_strength`.
    pub context_coef: f64,
    pub context_presence: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 2000,
            n_val: 400,
            n_test: 400,
            t: 24,
            d: 8,
            m_max: 20,
            e_dim: 16,
            d_cxr: 4,
            d_ecg: 4,
            prevalence: 0.12,
            planted_ts: 3,
            planted_note: 2,
            signal_strength: 4.0,
            note_signal_scale: 1.5,
            noise_sd: 1.0,
            signal_channels: 3,
            notes_only_fraction: 0.3,
            context_coef: 0.2,
            context_presence: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Small cohort with at most 12 searchable units per instance.
    pub fn toy() -> Self {
        SynthConfig {
            n_train: 400,
            n_val: 100,
            n_test: 200,
            t: 6,
            m_max: 6,
            planted_ts: 2,
            planted_note: 1,
            ..Self::default()
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            t: self.t,
            d: self.d,
            m_max: self.m_max,
            e_dim: self.e_dim,
            d_cxr: self.d_cxr,
            d_ecg: self.d_ecg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ToeError::InvalidConfig(m.to_string()));
        if self.t == 0 || self.d == 0 || self.e_dim == 0 {
            return fail("T, D and E_dim must be positive");
        }
        if self.planted_ts > self.t {
            return fail("planted_ts must be <= T");
        }
        if self.planted_note > self.m_max {
            return fail("planted_note must be <= M_max");
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return fail("prevalence must lie in (0, 1)");
        }
        if self.signal_channels > self.d {
            return fail("signal_channels must be <= D");
        }
        if !(0.0..=1.0).contains(&self.notes_only_fraction) || !(0.0..=1.0).contains(&self.context_presence) {
            return fail("fractions must lie in [0, 1]");
        }
        if !(self.noise_sd >= 0.0) || !self.signal_strength.is_finite() {
            return fail("noise_sd must be >= 0 and signal_strength finite");
        }
        Ok(())
    }
}

/// Unit vector in embedding space along which planted chunks sit.
pub fn label_direction(seed: u64, e_dim: usize) -> Vec<f64> {
    let mut rng = SeededRng::derived(seed, "note-direction");
    let mut v: Vec<f64> = (0..e_dim).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn generate_instance(cfg: &SynthConfig, idx: usize, direction: &[f64]) -> (Instance, MaskPair) {
    let mut rng = SeededRng::new(derive_seed(cfg.seed, &format!("instance:{idx}")));
    let label = rng.bernoulli(cfg.prevalence);
    let notes_only = label && rng.bernoulli(cfg.notes_only_fraction);

    let mut ts = DenseMatrix::zeros(cfg.t, cfg.d);
    for v in ts.data_mut() {
        *v = cfg.noise_sd * rng.normal();
    }
    let mut gt = MaskPair::empty(cfg.t, cfg.m_max);
    if label && !notes_only {
        for h in rng.sample_indices(cfg.t, cfg.planted_ts) {
            for c in 0..cfg.signal_channels {
                let v = ts.get(h, c) + cfg.signal_strength;
                ts.set(h, c, v);
            }
            gt.ts[h] = true;
        }
    }

    let n_valid = rng.int_inclusive(cfg.planted_note, cfg.m_max);
    let mut note_emb = DenseMatrix::zeros(cfg.m_max, cfg.e_dim);
    let mut presence = vec![false; cfg.m_max];
    for j in 0..n_valid {
        presence[j] = true;
        for v in note_emb.row_mut(j) {
            *v = cfg.noise_sd * rng.normal();
        }
    }
    if label {
        let mu = cfg.signal_strength * cfg.note_signal_scale;
        for j in rng.sample_indices(n_valid, cfg.planted_note) {
            for (v, dir) in note_emb.row_mut(j).iter_mut().zip(direction) {
                *v += mu * dir;
            }
            gt.note[j] = true;
        }
    }

    let shift = if label { cfg.context_coef * cfg.signal_strength } else { 0.0 };
    let context_vec = |len: usize, rng: &mut SeededRng| {
        let has = rng.bernoulli(cfg.context_presence);
        let v: Vec<f64> = (0..len).map(|_| rng.normal() + shift).collect();
        if has {
            (v, true)
        } else {
            (vec![0.0; len], false)
        }
    };
    let (cxr, has_cxr) = context_vec(cfg.d_cxr, &mut rng);
    let (ecg, has_ecg) = context_vec(cfg.d_ecg, &mut rng);

    let inst = Instance {
        id: format!("i{idx:05}"),
        ts,
        note_emb,
        presence,
        context: ContextBlock {
            cxr,
            has_cxr,
            ecg,
            has_ecg,
        },
        label,
    };
    (inst, gt)
}

/// Pure function of `cfg` (including its seed).
pub fn generate_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let direction = label_direction(cfg.seed, cfg.e_dim);
    let mut cohort = Cohort::new(cfg.dims());
    let total = cfg.n_train + cfg.n_val + cfg.n_test;
    for idx in 0..total {
        let split = if idx < cfg.n_train {
            Split::Train
        } else if idx < cfg.n_train + cfg.n_val {
            Split::Val
        } else {
            Split::Test
        };
        let (inst, gt) = generate_instance(cfg, idx, &direction);
        cohort.push(inst, split, Some(gt));
    }
    Ok(cohort)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpuriousConfig {
    /// Probability that the flag equals the label on train and val.
    pub train_correlation: f64,
    /// Same for test. Zero means the flag is drawn independently of the
    /// label (fair coin).
    pub test_correlation: f64,
    pub feature: usize,
}

impl Default for SpuriousConfig {
    fn default() -> Self {
        SpuriousConfig {
            train_correlation: 0.8,
            test_correlation: 0.0,
            feature: 7,
        }
    }
}

fn draw_flag(rng: &mut SeededRng, label: bool, correlation: f64) -> bool {
    if correlation == 0.0 {
        rng.bernoulli(0.5)
    } else if rng.bernoulli(correlation) {
        label
    } else {
        !label
    }
}

/// Overwrites feature `scfg.feature` in every hour with a binary flag (1 when
/// on, 0 when off) whose agreement with the label depends on the split.
pub fn inject_spurious(cohort: &Cohort, scfg: &SpuriousConfig, seed: u64) -> Result<Cohort> {
    if scfg.feature >= cohort.dims.d {
        return Err(ToeError::InvalidConfig(format!(
            "spurious feature {} out of range for D = {}",
            scfg.feature, cohort.dims.d
        )));
    }
    for c in [scfg.train_correlation, scfg.test_correlation] {
        if !(0.0..=1.0).contains(&c) {
            return Err(ToeError::InvalidConfig("spurious correlations must lie in [0, 1]".into()));
        }
    }
    let mut rng = SeededRng::derived(seed, "spurious");
    let mut out = cohort.clone();
    for (inst, &split) in out.instances.iter_mut().zip(&cohort.splits) {
        let corr = match split {
            Split::Train | Split::Val => scfg.train_correlation,
            Split::Test => scfg.test_correlation,
        };
        let flag = draw_flag(&mut rng, inst.label, corr);
        let v = if flag { 1.0 } else { 0.0 };
        for t in 0..inst.ts.rows() {
            inst.ts.set(t, scfg.feature, v);
        }
    }
    out.meta.spurious_feature = Some(scfg.feature);
    Ok(out)
}

/// Flips each label in `splits` independently with probability `rate`.
/// Planted ground truth is left untouched.
pub fn inject_label_noise(cohort: &Cohort, rate: f64, seed: u64, splits: &[Split]) -> Result<Cohort> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(ToeError::InvalidConfig("label noise rate must lie in [0, 1]".into()));
    }
    let mut rng = SeededRng::derived(seed, "label-noise");
    let mut out = cohort.clone();
    for (inst, split) in out.instances.iter_mut().zip(&cohort.splits) {
        let flip = rng.bernoulli(rate);
        if flip && splits.contains(split) {
            inst.label = !inst.label;
        }
    }
    Ok(out)
}
