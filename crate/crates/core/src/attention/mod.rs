//! Attention-fusion encoder: per-modality multi-head self-attention over the
//! lag window, feature-wise gating of the concatenated block outputs, and a
//! three-layer prediction head.
//!
//! Linear maps act on row vectors (`x W + b`). Parameter tensors, in
//! initialization and bundle order:
//!
//! | tensor | shape |
//! |---|---|
//! | `block{m}.w_in` | `d_m × D` |
//! | `block{m}.b_in` | `1 × D` |
//! | `block{m}.w_q`, `w_k`, `w_v`, `w_o` | `D × D` |
//! | `block{m}.ln_gain`, `ln_shift` | `1 × D` |
//! | `gate.w1`, `gate.b1` | `F × G`, `1 × G` |
//! | `gate.w2`, `gate.b2` | `G × F`, `1 × F` |
//! | `head.w1`, `head.b1` | `F × H1`, `1 × H1` |
//! | `head.w2`, `head.b2` | `H1 × H2`, `1 × H2` |
//! | `head.w3`, `head.b3` | `H2 × P`, `1 × P` |
//!
//! with one block per modality, `D = d_model`, `F = M·N·D` for flatten
//! vectorization (`M·D` for mean), `G = ⌈F · gate_bottleneck_ratio⌉`.
//! The parameter count is therefore
//!
//! ```text
//! Σ_m (d_m·D + 4D² + 3D) + (2FG + G + F) + (F·H1 + H1 + H1·H2 + H2 + H2·P + P)
//! ```

mod net;
mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{self, ByteReader, ByteWriter};
use crate::data::SourceData;
use crate::error::{Error, Result};
use crate::lagged::DesignMatrix;
use crate::prep::FeaturePrep;

pub use net::{
    forward, forward_batch, gate_forward, loss, loss_and_gradient, mha_forward, DropoutMasks, GateOutput,
    Mode, MhaOutput, LN_EPS,
};
pub use train::{train, train_from, EpochRecord, TrainingLog, LOG_HEADER};

pub const ATTENTION_MAGIC: [u8; 4] = *b"NMEA";
pub const ATTENTION_VERSION: u16 = 1;

/// How a block's `N × D` output becomes a vector before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Vectorize {
    /// Row-major flatten to length `N·D`.
    #[default]
    Flatten,
    /// Average over the lag axis, length `D`.
    Mean,
}

impl Vectorize {
    pub fn as_str(self) -> &'static str {
        match self {
            Vectorize::Flatten => "flatten",
            Vectorize::Mean => "mean",
        }
    }

    fn code(self) -> u8 {
        match self {
            Vectorize::Flatten => 0,
            Vectorize::Mean => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Vectorize::Flatten),
            1 => Ok(Vectorize::Mean),
            _ => Err(Error::Format(format!("unknown vectorize code {c}"))),
        }
    }
}

impl fmt::Display for Vectorize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Vectorize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flatten" => Ok(Vectorize::Flatten),
            "mean" => Ok(Vectorize::Mean),
            _ => Err(Error::Config(format!("vectorize must be flatten or mean, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    /// Lag slots per modality window (`N`).
    pub window_len: usize,
    /// Per-modality input dims, in modality order.
    pub input_dims: Vec<usize>,
    pub n_parcels: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub gate_bottleneck_ratio: f64,
    pub head_hidden_dims: (usize, usize),
    pub dropout_rate: f64,
    pub vectorize: Vectorize,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl AttentionConfig {
    /// Default hyperparameters for the given data shape.
    pub fn new(window_len: usize, input_dims: Vec<usize>, n_parcels: usize) -> Self {
        Self {
            window_len,
            input_dims,
            n_parcels,
            n_heads: 4,
            d_model: 128,
            gate_bottleneck_ratio: 0.25,
            head_hidden_dims: (1024, 512),
            dropout_rate: 0.3,
            vectorize: Vectorize::Flatten,
            seed: 0,
            learning_rate: 1e-4,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.window_len == 0 {
            return bad("window length must be at least 1".into());
        }
        if self.input_dims.is_empty() || self.input_dims.contains(&0) {
            return bad(format!("input dims must be non-empty and positive, got {:?}", self.input_dims));
        }
        if self.n_parcels == 0 {
            return bad("n_parcels must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model = {} must be a positive multiple of n_heads = {}",
                self.d_model, self.n_heads
            ));
        }
        if !(self.gate_bottleneck_ratio > 0.0 && self.gate_bottleneck_ratio <= 1.0) {
            return bad(format!(
                "gate_bottleneck_ratio must lie in (0, 1], got {}",
                self.gate_bottleneck_ratio
            ));
        }
        if self.head_hidden_dims.0 == 0 || self.head_hidden_dims.1 == 0 {
            return bad("head hidden dims must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be at least 1".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }

    pub fn n_modalities(&self) -> usize {
        self.input_dims.len()
    }

    /// Length of one modality's vectorized block output.
    pub fn block_vector_dim(&self) -> usize {
        match self.vectorize {
            Vectorize::Flatten => self.window_len * self.d_model,
            Vectorize::Mean => self.d_model,
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.n_modalities() * self.block_vector_dim()
    }

    pub fn bottleneck_dim(&self) -> usize {
        ((self.fused_dim() as f64 * self.gate_bottleneck_ratio).ceil() as usize).max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count (see the module docs).
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.fused_dim();
        let g = self.bottleneck_dim();
        let (h1, h2) = self.head_hidden_dims;
        let p = self.n_parcels;
        let blocks: usize = self.input_dims.iter().map(|&dm| dm * d + 4 * d * d + 3 * d).sum();
        blocks + (2 * f * g + g + f) + (f * h1 + h1 + h1 * h2 + h2 + h2 * p + p)
    }

    fn encode(&self, w: &mut ByteWriter) {
        w.u64(self.window_len as u64);
        w.u64(self.input_dims.len() as u64);
        for &d in &self.input_dims {
            w.u64(d as u64);
        }
        w.u64(self.n_parcels as u64);
        w.u64(self.n_heads as u64);
        w.u64(self.d_model as u64);
        w.f64(self.gate_bottleneck_ratio);
        w.u64(self.head_hidden_dims.0 as u64);
        w.u64(self.head_hidden_dims.1 as u64);
        w.f64(self.dropout_rate);
        w.u8(self.vectorize.code());
        w.u64(self.seed);
        w.f64(self.learning_rate);
        w.u64(self.batch_size as u64);
        w.u64(self.max_epochs as u64);
        w.u64(self.patience as u64);
        w.f64(self.adam_beta1);
        w.f64(self.adam_beta2);
        w.f64(self.adam_eps);
    }

    fn decode(r: &mut ByteReader<'_>) -> Result<Self> {
        const MAX: u64 = 1 << 32;
        let window_len = r.count("window length", MAX)?;
        let n = r.count("modality count", 3)?;
        let input_dims = (0..n).map(|_| r.count("input dim", MAX)).collect::<Result<_>>()?;
        let cfg = Self {
            window_len,
            input_dims,
            n_parcels: r.count("n_parcels", MAX)?,
            n_heads: r.count("n_heads", MAX)?,
            d_model: r.count("d_model", MAX)?,
            gate_bottleneck_ratio: r.f64()?,
            head_hidden_dims: (r.count("hidden dim", MAX)?, r.count("hidden dim", MAX)?),
            dropout_rate: r.f64()?,
            vectorize: Vectorize::from_code(r.u8()?)?,
            seed: r.u64()?,
            learning_rate: r.f64()?,
            batch_size: r.count("batch_size", MAX)?,
            max_epochs: r.count("max_epochs", MAX)?,
            patience: r.count("patience", MAX)?,
            adam_beta1: r.f64()?,
            adam_beta2: r.f64()?,
            adam_eps: r.f64()?,
        };
        cfg.validate().map_err(|e| Error::Format(format!("bad attention config: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhaBlockParams {
    pub w_in: Mat<f64>,
    pub b_in: Mat<f64>,
    pub w_q: Mat<f64>,
    pub w_k: Mat<f64>,
    pub w_v: Mat<f64>,
    pub w_o: Mat<f64>,
    pub ln_gain: Mat<f64>,
    pub ln_shift: Mat<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateModuleParams {
    pub w1: Mat<f64>,
    pub b1: Mat<f64>,
    pub w2: Mat<f64>,
    pub b2: Mat<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHeadParams {
    pub w1: Mat<f64>,
    pub b1: Mat<f64>,
    pub w2: Mat<f64>,
    pub b2: Mat<f64>,
    pub w3: Mat<f64>,
    pub b3: Mat<f64>,
}

/// Every trainable tensor of the network. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub blocks: Vec<MhaBlockParams>,
    pub gate: GateModuleParams,
    pub head: PredictionHeadParams,
}

enum Init {
    FanIn(usize),
    NearIdentity(usize),
    Ones,
}

impl AttentionParams {
    pub fn zeros(cfg: &AttentionConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.fused_dim();
        let g = cfg.bottleneck_dim();
        let (h1, h2) = cfg.head_hidden_dims;
        let z = Mat::<f64>::zeros;
        Self {
            blocks: cfg
                .input_dims
                .iter()
                .map(|&dm| MhaBlockParams {
                    w_in: z(dm, d),
                    b_in: z(1, d),
                    w_q: z(d, d),
                    w_k: z(d, d),
                    w_v: z(d, d),
                    w_o: z(d, d),
                    ln_gain: z(1, d),
                    ln_shift: z(1, d),
                })
                .collect(),
            gate: GateModuleParams {
                w1: z(f, g),
                b1: z(1, g),
                w2: z(g, f),
                b2: z(1, f),
            },
            head: PredictionHeadParams {
                w1: z(f, h1),
                b1: z(1, h1),
                w2: z(h1, h2),
                b2: z(1, h2),
                w3: z(h2, cfg.n_parcels),
                b3: z(1, cfg.n_parcels),
            },
        }
    }

    /// Seeded initialization: each tensor draws from its own ChaCha stream
    /// (stream index = tensor position). Linear maps and their biases are
    /// uniform in `±1/√fan_in`; an input projection whose input dim equals
    /// `d_model` starts at the identity plus 1% of that noise, with zero
    /// bias; layer-norm gain 1 and shift 0.
    pub fn init(cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self::zeros(cfg);
        let d = cfg.d_model;
        let f = cfg.fused_dim();
        let g = cfg.bottleneck_dim();
        let (h1, h2) = cfg.head_hidden_dims;
        let mut plan = Vec::new();
        for &dm in &cfg.input_dims {
            if dm == d {
                plan.extend([Init::NearIdentity(dm), Init::FanIn(0)]);
            } else {
                plan.extend([Init::FanIn(dm), Init::FanIn(dm)]);
            }
            plan.extend([Init::FanIn(d), Init::FanIn(d), Init::FanIn(d), Init::FanIn(d), Init::Ones, Init::FanIn(0)]);
        }
        plan.extend([Init::FanIn(f), Init::FanIn(f), Init::FanIn(g), Init::FanIn(g)]);
        plan.extend([Init::FanIn(f), Init::FanIn(f), Init::FanIn(h1), Init::FanIn(h1), Init::FanIn(h2), Init::FanIn(h2)]);

        for (idx, (t, how)) in p.tensors_mut().into_iter().zip(plan).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(idx as u64);
            match how {
                Init::Ones => t.fill(1.0),
                Init::FanIn(0) => {}
                Init::FanIn(fan) => {
                    let a = 1.0 / (fan as f64).sqrt();
                    fill_uniform(t, a, &mut rng);
                }
                Init::NearIdentity(fan) => {
                    let a = 0.01 / (fan as f64).sqrt();
                    fill_uniform(t, a, &mut rng);
                    for i in 0..t.nrows().min(t.ncols()) {
                        t[(i, i)] += 1.0;
                    }
                }
            }
        }
        Ok(p)
    }

    /// Named tensors in the documented order.
    pub fn tensors(&self) -> Vec<(String, &Mat<f64>)> {
        let mut out = Vec::new();
        for (m, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("w_in", &b.w_in),
                ("b_in", &b.b_in),
                ("w_q", &b.w_q),
                ("w_k", &b.w_k),
                ("w_v", &b.w_v),
                ("w_o", &b.w_o),
                ("ln_gain", &b.ln_gain),
                ("ln_shift", &b.ln_shift),
            ] {
                out.push((format!("block{m}.{name}"), t));
            }
        }
        let g = &self.gate;
        for (name, t) in [("w1", &g.w1), ("b1", &g.b1), ("w2", &g.w2), ("b2", &g.b2)] {
            out.push((format!("gate.{name}"), t));
        }
        let h = &self.head;
        for (name, t) in [
            ("w1", &h.w1),
            ("b1", &h.b1),
            ("w2", &h.w2),
            ("b2", &h.b2),
            ("w3", &h.w3),
            ("b3", &h.b3),
        ] {
            out.push((format!("head.{name}"), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat<f64>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([
                &mut b.w_in,
                &mut b.b_in,
                &mut b.w_q,
                &mut b.w_k,
                &mut b.w_v,
                &mut b.w_o,
                &mut b.ln_gain,
                &mut b.ln_shift,
            ]);
        }
        let g = &mut self.gate;
        out.extend([&mut g.w1, &mut g.b1, &mut g.w2, &mut g.b2]);
        let h = &mut self.head;
        out.extend([&mut h.w1, &mut h.b1, &mut h.w2, &mut h.b2, &mut h.w3, &mut h.b3]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.nrows() * t.ncols()).sum()
    }

    /// Errors unless every tensor has the shape `cfg` implies.
    pub fn check_shapes(&self, cfg: &AttentionConfig) -> Result<()> {
        let want = Self::zeros(cfg);
        if want.blocks.len() != self.blocks.len() {
            return Err(Error::Shape(format!(
                "{} attention blocks for {} modalities",
                self.blocks.len(),
                want.blocks.len()
            )));
        }
        for ((name, a), (_, b)) in self.tensors().into_iter().zip(want.tensors()) {
            if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
                return Err(Error::Shape(format!(
                    "{name} is {}×{}, expected {}×{}",
                    a.nrows(),
                    a.ncols(),
                    b.nrows(),
                    b.ncols()
                )));
            }
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.norm_max()).fold(0.0, f64::max)
    }
}

fn fill_uniform(t: &mut Mat<f64>, a: f64, rng: &mut ChaCha8Rng) {
    for j in 0..t.ncols() {
        for i in 0..t.nrows() {
            t[(i, j)] = rng.random_range(-a..a);
        }
    }
}

/// Lag windows for a set of samples, stacked per modality: sample `s`
/// occupies rows `s·N .. (s+1)·N` of each input, slot order as in the design.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    inputs: Vec<Mat<f64>>,
    targets: Option<Mat<f64>>,
    window_len: usize,
}

impl WindowSet {
    pub fn new(inputs: Vec<Mat<f64>>, targets: Option<Mat<f64>>, window_len: usize) -> Result<Self> {
        if inputs.is_empty() || window_len == 0 {
            return Err(Error::Shape("window set needs at least one modality and slot".into()));
        }
        let rows = inputs[0].nrows();
        if !rows.is_multiple_of(window_len) || inputs.iter().any(|m| m.nrows() != rows) {
            return Err(Error::Shape(format!(
                "input rows must agree and be a multiple of the window length {window_len}"
            )));
        }
        if let Some(t) = &targets {
            if t.nrows() * window_len != rows {
                return Err(Error::Shape(format!(
                    "{} target rows for {} windows",
                    t.nrows(),
                    rows / window_len
                )));
            }
        }
        Ok(Self {
            inputs,
            targets,
            window_len,
        })
    }

    /// Unpacks every design row into per-modality windows.
    pub fn from_design(design: &DesignMatrix, targets: Option<Mat<f64>>) -> Result<Self> {
        let lag = design
            .lag_config()
            .ok_or_else(|| Error::InvalidArgument("design carries no lag layout".into()))?;
        let n = lag.window_len();
        let rows = design.rows();
        let v = design.values();
        let mut offset = 0;
        let inputs = design
            .block_dims()
            .iter()
            .map(|&d| {
                let m = Mat::from_fn(rows * n, d, |r, c| v[(r / n, offset + (r % n) * d + c)]);
                offset += n * d;
                m
            })
            .collect();
        Self::new(inputs, targets, n)
    }

    /// Row-concatenation of several sets with equal layouts.
    pub fn concat(sets: &[WindowSet]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Dataset("no window sets to concatenate".into()))?;
        let n_mod = first.inputs.len();
        if sets.iter().any(|s| s.window_len != first.window_len || s.inputs.len() != n_mod) {
            return Err(Error::Shape("window sets have different layouts".into()));
        }
        let inputs = (0..n_mod)
            .map(|m| crate::lagged::stack_rows(&sets.iter().map(|s| &s.inputs[m]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let targets = if sets.iter().all(|s| s.targets.is_some()) {
            Some(crate::lagged::stack_rows(
                &sets.iter().map(|s| s.targets.as_ref().unwrap()).collect::<Vec<_>>(),
            )?)
        } else {
            None
        };
        Self::new(inputs, targets, first.window_len)
    }

    pub fn len(&self) -> usize {
        self.inputs[0].nrows() / self.window_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn inputs(&self) -> &[Mat<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> Option<&Mat<f64>> {
        self.targets.as_ref()
    }

    /// Per-modality dims.
    pub fn dims(&self) -> Vec<usize> {
        self.inputs.iter().map(|m| m.ncols()).collect()
    }

    pub(crate) fn gather(&self, idx: &[usize]) -> (Vec<Mat<f64>>, Option<Mat<f64>>) {
        let n = self.window_len;
        let inputs = self
            .inputs
            .iter()
            .map(|m| Mat::from_fn(idx.len() * n, m.ncols(), |r, c| m[(idx[r / n] * n + r % n, c)]))
            .collect();
        let targets = self
            .targets
            .as_ref()
            .map(|t| Mat::from_fn(idx.len(), t.ncols(), |r, c| t[(idx[r], c)]));
        (inputs, targets)
    }
}

/// Trained network plus the frozen input preparation it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionEncoderModel {
    config: AttentionConfig,
    params: AttentionParams,
    prep: Option<FeaturePrep>,
}

impl AttentionEncoderModel {
    pub fn new(config: AttentionConfig, params: AttentionParams, prep: Option<FeaturePrep>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        if let Some(p) = &prep {
            if p.lag_config().window_len() != config.window_len
                || p.lag_config().modality_order.len() != config.n_modalities()
            {
                return Err(Error::Config("feature preparation does not match the attention config".into()));
            }
            if let Some(dims) = p.reduced_dims() {
                if dims != config.input_dims {
                    return Err(Error::Config(format!(
                        "PCA dims {dims:?} do not match attention input dims {:?}",
                        config.input_dims
                    )));
                }
            }
        }
        Ok(Self { config, params, prep })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn params(&self) -> &AttentionParams {
        &self.params
    }

    pub fn prep(&self) -> Option<&FeaturePrep> {
        self.prep.as_ref()
    }

    pub fn n_parcels(&self) -> usize {
        self.config.n_parcels
    }

    /// Eval-mode predictions, one row per window.
    pub fn predict_windows(&self, windows: &WindowSet) -> Result<Mat<f64>> {
        net::predict_all(&self.params, &self.config, windows)
    }

    pub fn predict_source(&self, source: &SourceData) -> Result<(Vec<usize>, Mat<f64>)> {
        let prep = self
            .prep
            .as_ref()
            .ok_or_else(|| Error::Config("model carries no feature preparation".into()))?;
        let design = prep.design_for(source)?;
        let windows = WindowSet::from_design(&design, None)?;
        Ok((design.target_index().to_vec(), self.predict_windows(&windows)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(&ATTENTION_MAGIC);
        w.u16(ATTENTION_VERSION);
        self.config.encode(&mut w);
        match &self.prep {
            Some(p) => {
                w.u8(1);
                p.encode(&mut w);
            }
            None => w.u8(0),
        }
        let tensors = self.params.tensors();
        w.u64(tensors.len() as u64);
        for (_, t) in tensors {
            w.matrix(t);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic: [u8; 4] = r.array()?;
        if magic != ATTENTION_MAGIC {
            return Err(Error::BadMagic {
                expected: ATTENTION_MAGIC,
                found: magic,
            });
        }
        let version = r.u16()?;
        if version != ATTENTION_VERSION {
            return Err(Error::Version {
                expected: ATTENTION_VERSION,
                found: version,
            });
        }
        let config = AttentionConfig::decode(&mut r)?;
        let prep = if r.bool()? {
            Some(FeaturePrep::decode(&mut r)?)
        } else {
            None
        };
        let mut params = AttentionParams::zeros(&config);
        let n = r.count("tensor count", 1 << 16)?;
        let slots = params.tensors_mut();
        if n != slots.len() {
            return Err(Error::Format(format!("{n} tensors, expected {}", slots.len())));
        }
        for slot in slots {
            let t = r.matrix()?;
            if t.nrows() != slot.nrows() || t.ncols() != slot.ncols() {
                return Err(Error::Format("tensor shape does not match the config".into()));
            }
            codec::check_finite(&t)?;
            *slot = t;
        }
        r.finish()?;
        Self::new(config, params, prep).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        codec::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path.as_ref())?)
    }
}

/// Windows and aligned targets for every source, rows in source order.
pub fn window_set_for(prep: &FeaturePrep, sources: &[SourceData]) -> Result<WindowSet> {
    let sets = sources
        .iter()
        .map(|s| {
            let bold = s
                .bold()
                .ok_or_else(|| Error::Dataset(format!("source {:?} has no BOLD data", s.source_id())))?;
            let (design, y) = crate::lagged::align_targets(prep.design_for(s)?, bold)?;
            WindowSet::from_design(&design, Some(y))
        })
        .collect::<Result<Vec<_>>>()?;
    WindowSet::concat(&sets)
}

/// PCA on the training features, lag windows per source, then training
/// with early stopping on `val`. `template` supplies the hyperparameters;
/// its data-shape fields are overwritten.
pub fn fit_attention_pipeline(
    train_sources: &[SourceData],
    val_sources: &[SourceData],
    k_per_modality: &std::collections::BTreeMap<crate::data::Modality, usize>,
    whiten: bool,
    lag_config: &crate::lagged::LagConfig,
    template: &AttentionConfig,
) -> Result<(AttentionEncoderModel, TrainingLog)> {
    if train_sources.is_empty() || val_sources.is_empty() {
        return Err(Error::Dataset("attention training needs non-empty train and validation sets".into()));
    }
    let prep = if k_per_modality.is_empty() {
        FeaturePrep::identity(lag_config.clone())?
    } else {
        FeaturePrep::fit(train_sources, k_per_modality, whiten, lag_config)?
    };
    let train_set = window_set_for(&prep, train_sources)?;
    let val_set = window_set_for(&prep, val_sources)?;
    let mut cfg = template.clone();
    cfg.window_len = lag_config.window_len();
    cfg.input_dims = train_set.dims();
    cfg.n_parcels = train_set.targets().map_or(0, |t| t.ncols());
    let (params, log) = train(&cfg, &train_set, &val_set)?;
    Ok((AttentionEncoderModel::new(cfg, params, Some(prep))?, log))
}
