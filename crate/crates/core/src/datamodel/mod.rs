//! Instances, cohorts, evidence masks, and search traces.

mod io;

pub use io::{load_cohort, read_traces, save_cohort, write_atomic, write_traces, COHORT_FORMAT_VERSION};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, ToeError};
use crate::numerics::DenseMatrix;

/// Shape parameters shared by every instance of a cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Hourly bins.
    pub t: usize,
    /// Features per hour.
    pub d: usize,
    /// Note chunk slots, including padding.
    pub m_max: usize,
    pub e_dim: usize,
    pub d_cxr: usize,
    pub d_ecg: usize,
}

/// Fixed, non-searchable context vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBlock {
    pub cxr: Vec<f64>,
    pub has_cxr: bool,
    pub ecg: Vec<f64>,
    pub has_ecg: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    /// `T x D` hourly features.
    pub ts: DenseMatrix,
    /// `M_max x E_dim` chunk embeddings; padded rows are zero.
    pub note_emb: DenseMatrix,
    pub presence: Vec<bool>,
    pub context: ContextBlock,
    pub label: bool,
}

impl Instance {
    pub fn n_valid_notes(&self) -> usize {
        self.presence.iter().filter(|&&a| a).count()
    }

    pub fn n_units(&self) -> usize {
        self.ts.rows() + self.n_valid_notes()
    }

    /// Every selectable unit, in canonical order.
    pub fn units(&self) -> Vec<Unit> {
        let mut out: Vec<Unit> = (0..self.note_emb.rows())
            .filter(|&j| self.presence[j])
            .map(Unit::Note)
            .collect();
        out.extend((0..self.ts.rows()).map(Unit::Ts));
        out
    }

    pub fn validate(&self, dims: &Dims) -> Result<()> {
        let bad = |field: &str, message: String| ToeError::InvalidInstance {
            id: self.id.clone(),
            field: field.to_string(),
            message,
        };
        if self.ts.rows() != dims.t || self.ts.cols() != dims.d {
            return Err(bad("ts", format!("shape {}x{}, expected {}x{}", self.ts.rows(), self.ts.cols(), dims.t, dims.d)));
        }
        if !self.ts.is_finite() {
            return Err(bad("ts", "non-finite value".into()));
        }
        if self.note_emb.rows() != dims.m_max || self.note_emb.cols() != dims.e_dim {
            return Err(bad(
                "note_emb",
                format!("shape {}x{}, expected {}x{}", self.note_emb.rows(), self.note_emb.cols(), dims.m_max, dims.e_dim),
            ));
        }
        if !self.note_emb.is_finite() {
            return Err(bad("note_emb", "non-finite value".into()));
        }
        if self.presence.len() != dims.m_max {
            return Err(bad("presence", format!("length {}, expected {}", self.presence.len(), dims.m_max)));
        }
        for (j, &a) in self.presence.iter().enumerate() {
            if !a && self.note_emb.row(j).iter().any(|&v| v != 0.0) {
                return Err(bad("note_emb", format!("padded row {j} is not all zeros")));
            }
        }
        let ctx = &self.context;
        for (name, v, has, len) in [("cxr", &ctx.cxr, ctx.has_cxr, dims.d_cxr), ("ecg", &ctx.ecg, ctx.has_ecg, dims.d_ecg)] {
            if v.len() != len {
                return Err(bad(name, format!("length {}, expected {len}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(bad(name, "non-finite value".into()));
            }
            if !has && v.iter().any(|&x| x != 0.0) {
                return Err(bad(name, format!("has_{name} = 0 but vector is non-zero")));
            }
        }
        Ok(())
    }
}

/// One selectable evidence unit. Ordered by modality tag (`note` < `ts`),
/// then by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Unit {
    Note(usize),
    Ts(usize),
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unit::Ts(t) => write!(f, "ts:{t}"),
            Unit::Note(j) => write!(f, "note:{j}"),
        }
    }
}

impl FromStr for Unit {
    type Err = ToeError;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, idx) = s
            .split_once(':')
            .ok_or_else(|| ToeError::invalid(format!("malformed unit tag {s:?}")))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| ToeError::invalid(format!("malformed unit index in {s:?}")))?;
        match kind {
            "ts" => Ok(Unit::Ts(idx)),
            "note" => Ok(Unit::Note(idx)),
            _ => Err(ToeError::invalid(format!("unknown modality in unit tag {s:?}"))),
        }
    }
}

impl Serialize for Unit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Unit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Binary selection over the two searchable streams.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskPair {
    #[serde(with = "bits")]
    pub ts: Vec<bool>,
    #[serde(with = "bits")]
    pub note: Vec<bool>,
}

impl MaskPair {
    pub fn empty(t: usize, m_max: usize) -> Self {
        MaskPair {
            ts: vec![false; t],
            note: vec![false; m_max],
        }
    }

    /// Every hour and every present chunk.
    pub fn full(t: usize, presence: &[bool]) -> Self {
        MaskPair {
            ts: vec![true; t],
            note: presence.to_vec(),
        }
    }

    pub fn empty_for(inst: &Instance) -> Self {
        Self::empty(inst.ts.rows(), inst.presence.len())
    }

    pub fn full_for(inst: &Instance) -> Self {
        Self::full(inst.ts.rows(), &inst.presence)
    }

    /// Evidence size `K`.
    pub fn size(&self) -> usize {
        self.ts.iter().filter(|&&b| b).count() + self.note.iter().filter(|&&b| b).count()
    }

    pub fn contains(&self, unit: Unit) -> bool {
        match unit {
            Unit::Ts(t) => self.ts.get(t).copied().unwrap_or(false),
            Unit::Note(j) => self.note.get(j).copied().unwrap_or(false),
        }
    }

    pub fn insert(&mut self, unit: Unit) {
        match unit {
            Unit::Ts(t) => self.ts[t] = true,
            Unit::Note(j) => self.note[j] = true,
        }
    }

    pub fn with_unit(&self, unit: Unit) -> Self {
        let mut next = self.clone();
        next.insert(unit);
        next
    }

    pub fn from_units(t: usize, m_max: usize, units: &[Unit]) -> Self {
        let mut m = Self::empty(t, m_max);
        for &u in units {
            m.insert(u);
        }
        m
    }

    /// Selected units in canonical order.
    pub fn units(&self) -> Vec<Unit> {
        let notes = self.note.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| Unit::Note(j));
        let hours = self.ts.iter().enumerate().filter(|(_, &b)| b).map(|(t, _)| Unit::Ts(t));
        notes.chain(hours).collect()
    }

    /// Removal mask: every unselected hour and every unselected present chunk.
    pub fn complement(&self, presence: &[bool]) -> Self {
        MaskPair {
            ts: self.ts.iter().map(|&b| !b).collect(),
            note: self.note.iter().zip(presence).map(|(&b, &a)| a && !b).collect(),
        }
    }

    pub fn ts_weights(&self) -> Vec<f64> {
        self.ts.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn note_weights(&self) -> Vec<f64> {
        self.note.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Checks lengths and that no padding slot is selected.
    pub fn validate(&self, t: usize, presence: &[bool]) -> Result<()> {
        if self.ts.len() != t || self.note.len() != presence.len() {
            return Err(ToeError::dim(format!(
                "mask lengths ({}, {}) do not match ({t}, {})",
                self.ts.len(),
                self.note.len(),
                presence.len()
            )));
        }
        if let Some(j) = self.note.iter().zip(presence).position(|(&m, &a)| m && !a) {
            return Err(ToeError::PaddingSelected(j));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Cohort-level annotations carried in the file header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CohortMeta {
    /// Index of an injected spurious binary feature, if any.
    pub spurious_feature: Option<usize>,
    /// Free-form provenance (the resolved run configuration).
    pub config: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub dims: Dims,
    pub instances: Vec<Instance>,
    pub splits: Vec<Split>,
    pub ground_truth: Vec<Option<MaskPair>>,
    pub meta: CohortMeta,
}

impl Cohort {
    pub fn new(dims: Dims) -> Self {
        Cohort {
            dims,
            instances: Vec::new(),
            splits: Vec::new(),
            ground_truth: Vec::new(),
            meta: CohortMeta::default(),
        }
    }

    pub fn push(&mut self, inst: Instance, split: Split, gt: Option<MaskPair>) {
        self.instances.push(inst);
        self.splits.push(split);
        self.ground_truth.push(gt);
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Instance> {
        self.indices(split).into_iter().map(|i| &self.instances[i]).collect()
    }

    pub fn split_owned(&self, split: Split) -> Vec<Instance> {
        self.indices(split).into_iter().map(|i| self.instances[i].clone()).collect()
    }

    /// Value of the injected spurious flag for instance `i`.
    pub fn spurious_flag(&self, i: usize) -> Option<bool> {
        self.meta
            .spurious_feature
            .map(|f| self.instances[i].ts.get(0, f) == 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits.len() != self.instances.len() || self.ground_truth.len() != self.instances.len() {
            return Err(ToeError::invalid("cohort bookkeeping vectors differ in length"));
        }
        let mut seen = std::collections::HashSet::new();
        for (inst, gt) in self.instances.iter().zip(&self.ground_truth) {
            inst.validate(&self.dims)?;
            if !seen.insert(inst.id.as_str()) {
                return Err(ToeError::InvalidInstance {
                    id: inst.id.clone(),
                    field: "id".into(),
                    message: "duplicate id".into(),
                });
            }
            if let Some(gt) = gt {
                gt.validate(self.dims.t, &inst.presence).map_err(|e| ToeError::InvalidInstance {
                    id: inst.id.clone(),
                    field: "ground_truth".into(),
                    message: e.to_string(),
                })?;
            }
        }
        if let Some(f) = self.meta.spurious_feature {
            if f >= self.dims.d {
                return Err(ToeError::invalid(format!("spurious feature {f} out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ThresholdsMet,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub unit: Unit,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub score: f64,
    pub p: f64,
}

/// Auditable record of one search: the path of units leading to the
/// returned state, with each prefix's scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub instance_id: String,
    pub p_full: f64,
    #[serde(with = "bit")]
    pub y_hat_full: bool,
    pub steps: Vec<TraceStep>,
    pub final_mask: MaskPair,
    pub termination: Termination,
}

impl Trace {
    pub fn evidence_size(&self) -> usize {
        self.final_mask.size()
    }

    pub fn exhausted(&self) -> bool {
        self.termination == Termination::BudgetExhausted
    }
}

/// `Vec<bool>` as a JSON array of 0/1.
pub(crate) mod bits {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[bool], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|&b| u8::from(b)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("expected 0 or 1, got {other}"))),
            })
            .collect()
    }
}

/// `bool` as JSON 0/1.
pub(crate) mod bit {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("expected 0 or 1, got {other}"))),
        }
    }
}
