//! Lagged predictor construction.
//!
//! For a target at time `i`, the predictor row concatenates, for each
//! modality in `modality_order`, the feature rows at `i-1, i-2, …, i-n_lags`
//! (most recent first). The current sample is excluded unless
//! `include_lag0` is set, in which case the window becomes `i, i-1, …,
//! i-n_lags`. The first `n_lags` samples of every source have no complete
//! history and produce no row; windows never reach into another source.

use faer::Mat;

use crate::data::{BoldSeries, FeatureSeries, Modality};
use crate::error::{Error, Result};

pub const DEFAULT_N_LAGS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LagConfig {
    pub n_lags: usize,
    pub modality_order: Vec<Modality>,
    pub include_lag0: bool,
}

impl Default for LagConfig {
    fn default() -> Self {
        Self {
            n_lags: DEFAULT_N_LAGS,
            modality_order: vec![Modality::Visual, Modality::Audio],
            include_lag0: false,
        }
    }
}

impl LagConfig {
    pub fn new(n_lags: usize, modality_order: Vec<Modality>) -> Result<Self> {
        let cfg = Self {
            n_lags,
            modality_order,
            include_lag0: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_lags == 0 {
            return Err(Error::Config("n_lags must be at least 1".into()));
        }
        if self.modality_order.is_empty() {
            return Err(Error::Config("modality_order must not be empty".into()));
        }
        for (i, m) in self.modality_order.iter().enumerate() {
            if self.modality_order[..i].contains(m) {
                return Err(Error::Config(format!("modality {m} listed twice")));
            }
        }
        Ok(())
    }

    /// Number of time slots per modality block.
    pub fn window_len(&self) -> usize {
        self.n_lags + usize::from(self.include_lag0)
    }

    /// Time offset of slot `s`: the slot holds the feature row at `i - lag(s)`.
    pub fn lag_of_slot(&self, slot: usize) -> usize {
        if self.include_lag0 {
            slot
        } else {
            slot + 1
        }
    }

    /// Predictor width for the given per-modality dims (in `modality_order`).
    pub fn design_dim(&self, dims: &[usize]) -> usize {
        self.window_len() * dims.iter().sum::<usize>()
    }
}

/// Stacked predictor rows for one source, aligned to target time indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: Mat<f64>,
    target_index: Vec<usize>,
    source_id: String,
    source_len: usize,
    lag_config: Option<LagConfig>,
    block_dims: Vec<usize>,
}

impl DesignMatrix {
    /// Wraps an arbitrary predictor matrix with no lag structure; row `j`
    /// targets time `j`.
    pub fn from_raw(values: Mat<f64>, source_id: impl Into<String>) -> Self {
        let rows = values.nrows();
        Self {
            block_dims: vec![values.ncols()],
            values,
            target_index: (0..rows).collect(),
            source_id: source_id.into(),
            source_len: rows,
            lag_config: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Mat<f64> {
        &self.values
    }

    pub fn target_index(&self) -> &[usize] {
        &self.target_index
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Length of the series the design was built from.
    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn lag_config(&self) -> Option<&LagConfig> {
        self.lag_config.as_ref()
    }

    /// Per-modality feature dims, in `modality_order`.
    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    /// The `window_len × d` slice of row `row` for the `block`-th modality,
    /// slot 0 (most recent) first.
    pub fn window(&self, row: usize, block: usize) -> Mat<f64> {
        let window_len = self.lag_config.as_ref().map_or(1, LagConfig::window_len);
        let offset: usize = self.block_dims[..block].iter().sum::<usize>() * window_len;
        let d = self.block_dims[block];
        Mat::from_fn(window_len, d, |s, c| self.values[(row, offset + s * d + c)])
    }
}

/// Builds the lagged design for one source. `features` may be given in any
/// order; blocks are laid out by `cfg.modality_order`.
pub fn build_design(features: &[&FeatureSeries], cfg: &LagConfig) -> Result<DesignMatrix> {
    cfg.validate()?;
    if features.len() != cfg.modality_order.len() {
        return Err(Error::Dataset(format!(
            "expected {} modalities {:?}, got {}",
            cfg.modality_order.len(),
            cfg.modality_order,
            features.len()
        )));
    }
    let ordered: Vec<&FeatureSeries> = cfg
        .modality_order
        .iter()
        .map(|m| {
            features
                .iter()
                .copied()
                .find(|f| f.modality() == *m)
                .ok_or_else(|| Error::Dataset(format!("missing {m} features")))
        })
        .collect::<Result<_>>()?;

    let first = ordered[0];
    let t = first.t_samples();
    for f in &ordered[1..] {
        if f.source_id() != first.source_id() {
            return Err(Error::Dataset(format!(
                "source id mismatch: {:?} vs {:?}",
                first.source_id(),
                f.source_id()
            )));
        }
        if f.t_samples() != t {
            return Err(Error::Shape(format!(
                "{} has {} samples but {} has {t}",
                f.modality(),
                f.t_samples(),
                first.modality()
            )));
        }
    }
    if t <= cfg.n_lags {
        return Err(Error::Shape(format!(
            "source {:?} has {t} samples; need more than n_lags = {}",
            first.source_id(),
            cfg.n_lags
        )));
    }

    let block_dims: Vec<usize> = ordered.iter().map(|f| f.dim()).collect();
    let window_len = cfg.window_len();
    let dim = cfg.design_dim(&block_dims);
    let rows = t - cfg.n_lags;
    let mut values = Mat::<f64>::zeros(rows, dim);

    let mut offset = 0;
    for (f, &d) in ordered.iter().zip(&block_dims) {
        let src = f.values();
        for slot in 0..window_len {
            let lag = cfg.lag_of_slot(slot);
            let col0 = offset + slot * d;
            for c in 0..d {
                let mut dst = values.col_mut(col0 + c);
                for r in 0..rows {
                    let i = r + cfg.n_lags;
                    dst[r] = src[(i - lag, c)];
                }
            }
        }
        offset += window_len * d;
    }

    Ok(DesignMatrix {
        values,
        target_index: (cfg.n_lags..t).collect(),
        source_id: first.source_id().to_string(),
        source_len: t,
        lag_config: Some(cfg.clone()),
        block_dims,
    })
}

/// Pairs every design row with the BOLD row at its target index.
pub fn align_targets(design: DesignMatrix, bold: &BoldSeries) -> Result<(DesignMatrix, Mat<f64>)> {
    if bold.source_id() != design.source_id() {
        return Err(Error::Dataset(format!(
            "BOLD source {:?} does not match design source {:?}",
            bold.source_id(),
            design.source_id()
        )));
    }
    if bold.t_samples() != design.source_len() {
        return Err(Error::Shape(format!(
            "BOLD has {} samples but features have {}",
            bold.t_samples(),
            design.source_len()
        )));
    }
    let y = bold.values();
    let idx = design.target_index();
    let targets = Mat::from_fn(idx.len(), y.ncols(), |r, j| y[(idx[r], j)]);
    Ok((design, targets))
}

/// Concatenates rows of several matrices with equal column counts.
pub fn stack_rows(parts: &[&Mat<f64>]) -> Result<Mat<f64>> {
    let cols = parts.first().map_or(0, |m| m.ncols());
    if parts.iter().any(|m| m.ncols() != cols) {
        return Err(Error::Shape("cannot stack matrices with different widths".into()));
    }
    let rows: usize = parts.iter().map(|m| m.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r0 = 0;
    for m in parts {
        out.as_mut()
            .submatrix_mut(r0, 0, m.nrows(), cols)
            .copy_from(m.as_ref());
        r0 += m.nrows();
    }
    Ok(out)
}
