//! The two evidence-bottleneck streams.
//!
//! Each stream scores its units with a selector MLP, projects every unit,
//! mean-pools the projections over the selected units, appends projected
//! context, and classifies to a single logit. Time-series rows get a
//! one-hot hour code appended before projection. The fused probability is
//! `sigmoid(l_ts + l_note)`.
//!
//! A mask value enters only as the unit's pooling weight. For a binary mask
//! this is the same as zeroing an unselected hour's features and dropping
//! it from the mean, but the derivative with respect to an unselected
//! unit's weight, `(h_i - v) / (sum w + eps)`, still depends on what the
//! unit contains; zeroing the input as well would make it content-free.

use serde::{Deserialize, Serialize};

use crate::datamodel::{Dims, Instance, MaskPair};
use crate::error::{Result, ToeError};
use crate::numerics::{sigmoid, softmax_temp, Activation, DenseMatrix, MlpCache, MlpGrads, MlpParams, SeededRng};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    TimeSeries,
    Notes,
}

/// Trainable parts of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Selector,
    UnitProj,
    CtxProjCxr,
    CtxProjEcg,
    Classifier,
}

impl Part {
    pub const ALL: [Part; 5] = [
        Part::Selector,
        Part::UnitProj,
        Part::CtxProjCxr,
        Part::CtxProjEcg,
        Part::Classifier,
    ];

    pub const PREDICTOR: [Part; 4] = [Part::UnitProj, Part::CtxProjCxr, Part::CtxProjEcg, Part::Classifier];
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenFlags {
    pub selector: bool,
    pub unit_proj: bool,
    pub ctx_proj_cxr: bool,
    pub ctx_proj_ecg: bool,
    pub classifier: bool,
}

impl FrozenFlags {
    fn get(&self, part: Part) -> bool {
        match part {
            Part::Selector => self.selector,
            Part::UnitProj => self.unit_proj,
            Part::CtxProjCxr => self.ctx_proj_cxr,
            Part::CtxProjEcg => self.ctx_proj_ecg,
            Part::Classifier => self.classifier,
        }
    }

    pub fn set(&mut self, part: Part, frozen: bool) {
        let slot = match part {
            Part::Selector => &mut self.selector,
            Part::UnitProj => &mut self.unit_proj,
            Part::CtxProjCxr => &mut self.ctx_proj_cxr,
            Part::CtxProjEcg => &mut self.ctx_proj_ecg,
            Part::Classifier => &mut self.classifier,
        };
        *slot = frozen;
    }
}

/// Layer widths shared by both streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub selector_hidden: usize,
    pub unit_hidden: usize,
    pub ctx_hidden: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            selector_hidden: 16,
            unit_hidden: 16,
            ctx_hidden: 4,
            classifier_hidden: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamModel {
    pub kind: StreamKind,
    pub selector: MlpParams,
    pub unit_proj: MlpParams,
    pub ctx_proj_cxr: MlpParams,
    pub ctx_proj_ecg: MlpParams,
    pub classifier: MlpParams,
    pub frozen: FrozenFlags,
}

impl StreamModel {
    fn layer_dims(kind: StreamKind, dims: &Dims, shape: &ModelShape) -> [(Vec<usize>, Vec<Activation>); 5] {
        use Activation::{Identity, Relu};
        let (sel_in, unit_in) = match kind {
            StreamKind::TimeSeries => (dims.d, dims.d + dims.t),
            StreamKind::Notes => (dims.e_dim, dims.e_dim),
        };
        let cls_in = shape.unit_hidden + 2 * shape.ctx_hidden;
        [
            (vec![sel_in, shape.selector_hidden, 1], vec![Relu, Identity]),
            (vec![unit_in, shape.unit_hidden], vec![Relu]),
            (vec![dims.d_cxr + 1, shape.ctx_hidden], vec![Relu]),
            (vec![dims.d_ecg + 1, shape.ctx_hidden], vec![Relu]),
            (vec![cls_in, shape.classifier_hidden, 1], vec![Relu, Identity]),
        ]
    }

    fn from_parts(kind: StreamKind, mut parts: Vec<MlpParams>) -> Self {
        let classifier = parts.pop().unwrap();
        let ctx_proj_ecg = parts.pop().unwrap();
        let ctx_proj_cxr = parts.pop().unwrap();
        let unit_proj = parts.pop().unwrap();
        let selector = parts.pop().unwrap();
        StreamModel {
            kind,
            selector,
            unit_proj,
            ctx_proj_cxr,
            ctx_proj_ecg,
            classifier,
            frozen: FrozenFlags::default(),
        }
    }

    pub fn init(kind: StreamKind, dims: &Dims, shape: &ModelShape, rng: &mut SeededRng) -> Self {
        let parts = Self::layer_dims(kind, dims, shape)
            .iter()
            .map(|(d, a)| MlpParams::init(d, a, rng))
            .collect();
        Self::from_parts(kind, parts)
    }

    pub fn zeros(kind: StreamKind, dims: &Dims, shape: &ModelShape) -> Self {
        let parts = Self::layer_dims(kind, dims, shape)
            .iter()
            .map(|(d, a)| MlpParams::zeros(d, a))
            .collect();
        Self::from_parts(kind, parts)
    }

    pub fn part(&self, part: Part) -> &MlpParams {
        match part {
            Part::Selector => &self.selector,
            Part::UnitProj => &self.unit_proj,
            Part::CtxProjCxr => &self.ctx_proj_cxr,
            Part::CtxProjEcg => &self.ctx_proj_ecg,
            Part::Classifier => &self.classifier,
        }
    }

    fn part_mut(&mut self, part: Part) -> &mut MlpParams {
        match part {
            Part::Selector => &mut self.selector,
            Part::UnitProj => &mut self.unit_proj,
            Part::CtxProjCxr => &mut self.ctx_proj_cxr,
            Part::CtxProjEcg => &mut self.ctx_proj_ecg,
            Part::Classifier => &mut self.classifier,
        }
    }

    pub fn is_frozen(&self, part: Part) -> bool {
        self.frozen.get(part)
    }

    /// SGD update of one part. Fails on a frozen part.
    pub fn apply_update(&mut self, part: Part, grads: &MlpGrads, lr: f64) -> Result<()> {
        if self.is_frozen(part) {
            return Err(ToeError::FrozenPart(format!("{:?}.{:?}", self.kind, part)));
        }
        self.part_mut(part).sgd_step(grads, lr)
    }

    pub fn validate(&self, dims: &Dims) -> Result<()> {
        for p in Part::ALL {
            self.part(p).validate()?;
        }
        let (sel_in, unit_in) = match self.kind {
            StreamKind::TimeSeries => (dims.d, dims.d + dims.t),
            StreamKind::Notes => (dims.e_dim, dims.e_dim),
        };
        let pooled = self.unit_proj.output_dim();
        let ctx = self.ctx_proj_cxr.output_dim() + self.ctx_proj_ecg.output_dim();
        let checks = [
            (self.selector.input_dim() == sel_in, "selector input width"),
            (self.selector.output_dim() == 1, "selector output width must be 1"),
            (self.unit_proj.input_dim() == unit_in, "unit projection input width"),
            (self.ctx_proj_cxr.input_dim() == dims.d_cxr + 1, "cxr projection input width"),
            (self.ctx_proj_ecg.input_dim() == dims.d_ecg + 1, "ecg projection input width"),
            (self.classifier.input_dim() == pooled + ctx, "classifier input width"),
            (self.classifier.output_dim() == 1, "classifier output width must be 1"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(ToeError::dim(format!("{:?} stream: {what}", self.kind)));
            }
        }
        Ok(())
    }

    /// The rows this stream selects over.
    pub fn units<'a>(&self, inst: &'a Instance) -> &'a DenseMatrix {
        match self.kind {
            StreamKind::TimeSeries => &inst.ts,
            StreamKind::Notes => &inst.note_emb,
        }
    }

    /// Presence mask of this stream (all ones for hours).
    pub fn presence(&self, inst: &Instance) -> Vec<bool> {
        match self.kind {
            StreamKind::TimeSeries => vec![true; inst.ts.rows()],
            StreamKind::Notes => inst.presence.clone(),
        }
    }

    /// Projection input of unit `i`.
    fn unit_input(&self, units: &DenseMatrix, i: usize) -> Vec<f64> {
        match self.kind {
            StreamKind::TimeSeries => {
                let t = units.rows();
                let mut u: Vec<f64> = units.row(i).to_vec();
                u.extend((0..t).map(|h| if h == i { 1.0 } else { 0.0 }));
                u
            }
            StreamKind::Notes => units.row(i).to_vec(),
        }
    }

    fn ctx_inputs(inst: &Instance) -> (Vec<f64>, Vec<f64>) {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        let mut cxr = inst.context.cxr.clone();
        cxr.push(flag(inst.context.has_cxr));
        let mut ecg = inst.context.ecg.clone();
        ecg.push(flag(inst.context.has_ecg));
        (cxr, ecg)
    }

    /// Projected context `[psi_cxr; psi_ecg]`.
    fn context_features(&self, inst: &Instance) -> Vec<f64> {
        let (cxr, ecg) = Self::ctx_inputs(inst);
        let mut out = self.ctx_proj_cxr.apply(&cxr);
        out.extend(self.ctx_proj_ecg.apply(&ecg));
        out
    }

    /// Selector scores: `f(unit)` on present units, `-inf` on padding.
    pub fn score_units(&self, units: &DenseMatrix, presence: &[bool]) -> Result<Vec<f64>> {
        if units.rows() != presence.len() {
            return Err(ToeError::dim(format!(
                "{} units but presence of length {}",
                units.rows(),
                presence.len()
            )));
        }
        if units.cols() != self.selector.input_dim() {
            return Err(ToeError::dim("unit width does not match selector input"));
        }
        Ok((0..units.rows())
            .map(|i| {
                if presence[i] {
                    self.selector.apply(units.row(i))[0]
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect())
    }

    fn check_mask(&self, inst: &Instance, mask: &[f64]) -> Result<()> {
        let units = self.units(inst);
        if mask.len() != units.rows() {
            return Err(ToeError::dim(format!(
                "{:?} mask length {} != {}",
                self.kind,
                mask.len(),
                units.rows()
            )));
        }
        if self.kind == StreamKind::Notes {
            if let Some(j) = mask.iter().zip(&inst.presence).position(|(&m, &a)| m != 0.0 && !a) {
                return Err(ToeError::PaddingSelected(j));
            }
        }
        Ok(())
    }

    /// Stream logit under a (possibly relaxed) mask. Recomputes every
    /// projection; [`EvalCache`] is the fast path.
    pub fn logit(&self, inst: &Instance, mask: &[f64], eps: f64) -> Result<f64> {
        self.check_mask(inst, mask)?;
        let units = self.units(inst);
        let presence = self.presence(inst);
        let mut pooled = vec![0.0; self.unit_proj.output_dim()];
        let mut wsum = 0.0;
        for i in 0..units.rows() {
            let w = if presence[i] { mask[i] } else { 0.0 };
            if w == 0.0 {
                continue;
            }
            let h = self.unit_proj.apply(&self.unit_input(units, i));
            for (p, hk) in pooled.iter_mut().zip(&h) {
                *p += w * hk;
            }
            wsum += w;
        }
        let denom = wsum + eps;
        pooled.iter_mut().for_each(|p| *p /= denom);
        pooled.extend(self.context_features(inst));
        Ok(self.classifier.apply(&pooled)[0])
    }

    /// Forward pass that records everything needed for [`Self::backward`].
    pub fn forward_pass(&self, inst: &Instance, mask: &[f64], eps: f64) -> Result<StreamPass> {
        self.check_mask(inst, mask)?;
        let units = self.units(inst);
        let presence = self.presence(inst);
        let n = units.rows();
        let width = self.unit_proj.output_dim();
        let mut unit_caches = Vec::with_capacity(n);
        let mut hidden = Vec::with_capacity(n);
        let mut weights = vec![0.0; n];
        let mut pooled = vec![0.0; width];
        let mut wsum = 0.0;
        for i in 0..n {
            if !presence[i] {
                unit_caches.push(None);
                hidden.push(Vec::new());
                continue;
            }
            let (h, cache) = self.unit_proj.forward(&self.unit_input(units, i))?;
            let w = mask[i];
            weights[i] = w;
            if w != 0.0 {
                for (p, hk) in pooled.iter_mut().zip(&h) {
                    *p += w * hk;
                }
                wsum += w;
            }
            unit_caches.push(Some(cache));
            hidden.push(h);
        }
        let denom = wsum + eps;
        pooled.iter_mut().for_each(|p| *p /= denom);
        let (cxr, ecg) = Self::ctx_inputs(inst);
        let (cxr_out, cxr_cache) = self.ctx_proj_cxr.forward(&cxr)?;
        let (ecg_out, ecg_cache) = self.ctx_proj_ecg.forward(&ecg)?;
        let mut z = pooled.clone();
        z.extend(&cxr_out);
        z.extend(&ecg_out);
        let (out, cls_cache) = self.classifier.forward(&z)?;
        Ok(StreamPass {
            logit: out[0],
            unit_caches,
            hidden,
            weights,
            denom,
            pooled,
            cxr_cache,
            ecg_cache,
            cls_cache,
        })
    }

    /// Backpropagates `dlogit` through a recorded pass. Returns predictor
    /// gradients and the gradient of the logit scaled by `dlogit` with
    /// respect to each mask entry.
    pub fn backward(&self, pass: &StreamPass, dlogit: f64) -> Result<(PredictorGrads, Vec<f64>)> {
        let mut grads = PredictorGrads::zeros_like(self);
        let dz = self.classifier.backward_into(&pass.cls_cache, &[dlogit], &mut grads.classifier)?;
        let width = pass.pooled.len();
        let c1 = self.ctx_proj_cxr.output_dim();
        let dv = &dz[..width];
        self.ctx_proj_cxr
            .backward_into(&pass.cxr_cache, &dz[width..width + c1], &mut grads.ctx_proj_cxr)?;
        self.ctx_proj_ecg
            .backward_into(&pass.ecg_cache, &dz[width + c1..], &mut grads.ctx_proj_ecg)?;

        let mut dmask = vec![0.0; pass.weights.len()];
        for (i, cache) in pass.unit_caches.iter().enumerate() {
            let Some(cache) = cache else { continue };
            let h = &pass.hidden[i];
            dmask[i] = dv
                .iter()
                .zip(h.iter().zip(&pass.pooled))
                .map(|(d, (hk, vk))| d * (hk - vk))
                .sum::<f64>()
                / pass.denom;
            let w = pass.weights[i];
            if w == 0.0 {
                continue;
            }
            let dh: Vec<f64> = dv.iter().map(|d| d * w / pass.denom).collect();
            self.unit_proj.backward_into(cache, &dh, &mut grads.unit_proj)?;
        }
        Ok((grads, dmask))
    }
}

impl StreamModel {
    /// Derivative of the logit with respect to a factor scaling each unit's
    /// features (not its hour code), at factor 1, under `mask`.
    pub fn feature_scale_gradient(&self, inst: &Instance, pass: &StreamPass) -> Result<Vec<f64>> {
        let mut scratch = PredictorGrads::zeros_like(self);
        let dz = self.classifier.backward_into(&pass.cls_cache, &[1.0], &mut scratch.classifier)?;
        let dv = &dz[..pass.pooled.len()];
        let units = self.units(inst);
        let mut out = vec![0.0; pass.weights.len()];
        for (i, cache) in pass.unit_caches.iter().enumerate() {
            let Some(cache) = cache else { continue };
            let w = pass.weights[i];
            if w == 0.0 {
                continue;
            }
            let dh: Vec<f64> = dv.iter().map(|d| d * w / pass.denom).collect();
            let du = self.unit_proj.backward_into(cache, &dh, &mut scratch.unit_proj)?;
            out[i] = du.iter().zip(units.row(i)).map(|(g, x)| g * x).sum();
        }
        Ok(out)
    }
}

/// Record of one differentiable stream evaluation.
#[derive(Debug, Clone)]
pub struct StreamPass {
    pub logit: f64,
    unit_caches: Vec<Option<MlpCache>>,
    hidden: Vec<Vec<f64>>,
    weights: Vec<f64>,
    denom: f64,
    pooled: Vec<f64>,
    cxr_cache: MlpCache,
    ecg_cache: MlpCache,
    cls_cache: MlpCache,
}

/// Gradients for the predictor parts of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorGrads {
    pub unit_proj: MlpGrads,
    pub ctx_proj_cxr: MlpGrads,
    pub ctx_proj_ecg: MlpGrads,
    pub classifier: MlpGrads,
}

impl PredictorGrads {
    pub fn zeros_like(s: &StreamModel) -> Self {
        PredictorGrads {
            unit_proj: MlpGrads::zeros_like(&s.unit_proj),
            ctx_proj_cxr: MlpGrads::zeros_like(&s.ctx_proj_cxr),
            ctx_proj_ecg: MlpGrads::zeros_like(&s.ctx_proj_ecg),
            classifier: MlpGrads::zeros_like(&s.classifier),
        }
    }

    pub fn add_assign(&mut self, o: &PredictorGrads) {
        self.unit_proj.add_assign(&o.unit_proj);
        self.ctx_proj_cxr.add_assign(&o.ctx_proj_cxr);
        self.ctx_proj_ecg.add_assign(&o.ctx_proj_ecg);
        self.classifier.add_assign(&o.classifier);
    }

    pub fn scale(&mut self, f: f64) {
        self.unit_proj.scale(f);
        self.ctx_proj_cxr.scale(f);
        self.ctx_proj_ecg.scale(f);
        self.classifier.scale(f);
    }

    pub fn get(&self, part: Part) -> Option<&MlpGrads> {
        match part {
            Part::Selector => None,
            Part::UnitProj => Some(&self.unit_proj),
            Part::CtxProjCxr => Some(&self.ctx_proj_cxr),
            Part::CtxProjEcg => Some(&self.ctx_proj_ecg),
            Part::Classifier => Some(&self.classifier),
        }
    }
}

/// Hard top-k mask plus its softmax surrogate.
///
/// The straight-through composite `hard - sg(soft) + soft` has the hard
/// mask as its forward value and the surrogate's Jacobian as its backward
/// rule; [`SteTopK::backward`] implements the latter.
#[derive(Debug, Clone, PartialEq)]
pub struct SteTopK {
    pub hard: Vec<f64>,
    pub surrogate: Vec<f64>,
    pub tau: f64,
}

impl SteTopK {
    /// Forward value of the composite mask.
    pub fn composite(&self) -> &[f64] {
        &self.hard
    }

    /// Gradient with respect to the scores given the gradient with respect
    /// to the composite mask.
    pub fn backward(&self, upstream: &[f64]) -> Vec<f64> {
        let mean: f64 = self.surrogate.iter().zip(upstream).map(|(p, g)| p * g).sum();
        self.surrogate
            .iter()
            .zip(upstream)
            .map(|(p, g)| p * (g - mean) / self.tau)
            .collect()
    }
}

/// Indices of the `k` largest finite scores, larger first, ties by lower
/// index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_finite()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn ste_topk(scores: &[f64], k: usize, tau: f64) -> Result<SteTopK> {
    if k == 0 {
        return Err(ToeError::invalid("top-k needs k >= 1"));
    }
    let surrogate = softmax_temp(scores, tau)?;
    let mut hard = vec![0.0; scores.len()];
    for i in top_k_indices(scores, k) {
        hard[i] = 1.0;
    }
    Ok(SteTopK { hard, surrogate, tau })
}

/// Fused probability of two stream logits.
pub fn fuse(l_ts: f64, l_note: f64) -> f64 {
    sigmoid(l_ts + l_note)
}

/// Decision rule: positive iff `p >= 0.5`.
pub fn decide(p: f64) -> bool {
    p >= 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub dims: Dims,
    pub shape: ModelShape,
    pub ts_stream: StreamModel,
    pub note_stream: StreamModel,
    pub ste_temperature: f64,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
}

impl ModelBundle {
    pub fn init(dims: Dims, shape: ModelShape, seed: u64) -> Self {
        let mut ts_rng = SeededRng::derived(seed, "init:ts");
        let mut note_rng = SeededRng::derived(seed, "init:note");
        ModelBundle {
            version: MODEL_FORMAT_VERSION,
            dims,
            shape,
            ts_stream: StreamModel::init(StreamKind::TimeSeries, &dims, &shape, &mut ts_rng),
            note_stream: StreamModel::init(StreamKind::Notes, &dims, &shape, &mut note_rng),
            ste_temperature: 1.0,
            epsilon: 1e-8,
            config: None,
        }
    }

    pub fn zeros(dims: Dims, shape: ModelShape) -> Self {
        ModelBundle {
            version: MODEL_FORMAT_VERSION,
            dims,
            shape,
            ts_stream: StreamModel::zeros(StreamKind::TimeSeries, &dims, &shape),
            note_stream: StreamModel::zeros(StreamKind::Notes, &dims, &shape),
            ste_temperature: 1.0,
            epsilon: 1e-8,
            config: None,
        }
    }

    pub fn stream(&self, kind: StreamKind) -> &StreamModel {
        match kind {
            StreamKind::TimeSeries => &self.ts_stream,
            StreamKind::Notes => &self.note_stream,
        }
    }

    pub fn stream_mut(&mut self, kind: StreamKind) -> &mut StreamModel {
        match kind {
            StreamKind::TimeSeries => &mut self.ts_stream,
            StreamKind::Notes => &mut self.note_stream,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_FORMAT_VERSION {
            return Err(ToeError::invalid(format!("unsupported model version {}", self.version)));
        }
        if !(self.ste_temperature > 0.0) || !(self.epsilon > 0.0) {
            return Err(ToeError::invalid("ste_temperature and epsilon must be > 0"));
        }
        if self.ts_stream.kind != StreamKind::TimeSeries || self.note_stream.kind != StreamKind::Notes {
            return Err(ToeError::invalid("stream kinds are swapped"));
        }
        self.ts_stream.validate(&self.dims)?;
        self.note_stream.validate(&self.dims)
    }

    pub fn check_instance(&self, inst: &Instance) -> Result<()> {
        inst.validate(&self.dims)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        crate::datamodel::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let bundle: ModelBundle = serde_json::from_str(&text)?;
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn score_units(&self, kind: StreamKind, inst: &Instance) -> Result<Vec<f64>> {
        let s = self.stream(kind);
        s.score_units(s.units(inst), &s.presence(inst))
    }

    pub fn ts_logit(&self, inst: &Instance, ts_mask: &[f64]) -> Result<f64> {
        self.ts_stream.logit(inst, ts_mask, self.epsilon)
    }

    pub fn note_logit(&self, inst: &Instance, note_mask: &[f64]) -> Result<f64> {
        self.note_stream.logit(inst, note_mask, self.epsilon)
    }

    /// `(p_full, y_hat_full)` with every unit selected.
    pub fn full_input_decision(&self, inst: &Instance) -> Result<(f64, bool)> {
        let full = MaskPair::full_for(inst);
        let p = self.evaluate_masked(inst, &full)?;
        Ok((p, decide(p)))
    }

    /// Fused logit under `mask`, recomputed from raw inputs.
    pub fn masked_logit(&self, inst: &Instance, mask: &MaskPair) -> Result<f64> {
        mask.validate(inst.ts.rows(), &inst.presence)?;
        Ok(self.ts_logit(inst, &mask.ts_weights())? + self.note_logit(inst, &mask.note_weights())?)
    }

    /// Fused probability under `mask`, recomputed from raw inputs.
    pub fn evaluate_masked(&self, inst: &Instance, mask: &MaskPair) -> Result<f64> {
        mask.validate(inst.ts.rows(), &inst.presence)?;
        Ok(fuse(
            self.ts_logit(inst, &mask.ts_weights())?,
            self.note_logit(inst, &mask.note_weights())?,
        ))
    }

    /// Gradient of `l_ts + l_note` with respect to a relaxed mask at
    /// `m = 1` on every present unit. Padding entries are zero.
    pub fn mask_gradient_at_full(&self, inst: &Instance) -> Result<(Vec<f64>, Vec<f64>)> {
        let full = MaskPair::full_for(inst);
        let ts_pass = self.ts_stream.forward_pass(inst, &full.ts_weights(), self.epsilon)?;
        let (_, g_ts) = self.ts_stream.backward(&ts_pass, 1.0)?;
        let note_pass = self.note_stream.forward_pass(inst, &full.note_weights(), self.epsilon)?;
        let (_, g_note) = self.note_stream.backward(&note_pass, 1.0)?;
        Ok((g_ts, g_note))
    }

    /// Input-times-gradient per unit: derivative of `l_ts + l_note` with
    /// respect to a factor scaling the unit's features, at full evidence.
    pub fn input_gradient_at_full(&self, inst: &Instance) -> Result<(Vec<f64>, Vec<f64>)> {
        let full = MaskPair::full_for(inst);
        let ts_pass = self.ts_stream.forward_pass(inst, &full.ts_weights(), self.epsilon)?;
        let note_pass = self.note_stream.forward_pass(inst, &full.note_weights(), self.epsilon)?;
        Ok((
            self.ts_stream.feature_scale_gradient(inst, &ts_pass)?,
            self.note_stream.feature_scale_gradient(inst, &note_pass)?,
        ))
    }
}

/// Per-instance projections precomputed once so that each masked
/// evaluation is one pooling plus one classifier pass per stream.
#[derive(Debug, Clone)]
pub struct EvalCache {
    ts_hidden: Vec<Vec<f64>>,
    note_hidden: Vec<Option<Vec<f64>>>,
    ts_ctx: Vec<f64>,
    note_ctx: Vec<f64>,
    presence: Vec<bool>,
    t: usize,
}

impl EvalCache {
    pub fn build(bundle: &ModelBundle, inst: &Instance) -> Result<Self> {
        bundle.check_instance(inst)?;
        let ts = &bundle.ts_stream;
        let ts_hidden = (0..inst.ts.rows())
            .map(|t| ts.unit_proj.apply(&ts.unit_input(&inst.ts, t)))
            .collect();
        let notes = &bundle.note_stream;
        let note_hidden = (0..inst.note_emb.rows())
            .map(|j| inst.presence[j].then(|| notes.unit_proj.apply(inst.note_emb.row(j))))
            .collect();
        Ok(EvalCache {
            ts_hidden,
            note_hidden,
            ts_ctx: ts.context_features(inst),
            note_ctx: notes.context_features(inst),
            presence: inst.presence.clone(),
            t: inst.ts.rows(),
        })
    }

    fn pool<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize, eps: f64, ctx: &[f64]) -> Vec<f64> {
        let mut pooled = vec![0.0; width];
        let mut wsum = 0.0;
        for h in rows {
            for (p, hk) in pooled.iter_mut().zip(h) {
                *p += 1.0 * hk;
            }
            wsum += 1.0;
        }
        let denom = wsum + eps;
        pooled.iter_mut().for_each(|p| *p /= denom);
        pooled.extend_from_slice(ctx);
        pooled
    }

    /// `(l_ts, l_note)` under a binary mask.
    pub fn logits(&self, bundle: &ModelBundle, mask: &MaskPair) -> Result<(f64, f64)> {
        mask.validate(self.t, &self.presence)?;
        let eps = bundle.epsilon;
        let ts_rows = mask
            .ts
            .iter()
            .zip(&self.ts_hidden)
            .filter(|(&m, _)| m)
            .map(|(_, h)| h.as_slice());
        let z_ts = Self::pool(ts_rows, bundle.ts_stream.unit_proj.output_dim(), eps, &self.ts_ctx);
        let note_rows = mask
            .note
            .iter()
            .zip(&self.note_hidden)
            .filter(|(&m, _)| m)
            .filter_map(|(_, h)| h.as_deref());
        let z_note = Self::pool(note_rows, bundle.note_stream.unit_proj.output_dim(), eps, &self.note_ctx);
        Ok((
            bundle.ts_stream.classifier.apply(&z_ts)[0],
            bundle.note_stream.classifier.apply(&z_note)[0],
        ))
    }

    pub fn evaluate(&self, bundle: &ModelBundle, mask: &MaskPair) -> Result<f64> {
        let (a, b) = self.logits(bundle, mask)?;
        Ok(fuse(a, b))
    }
}
