//! Parcel-wise linear encoder.
//!
//! Every parcel `j` gets its own `(w_j, b_j)` minimizing
//! `Σ_i (r_ij − w_jᵀ p_i − b_j)² + λ‖w_j‖²` with the bias unpenalized. All
//! parcels share the design, so the Gram matrix is factored once and the
//! factor is reused for every right-hand side.
//!
//! The unpenalized bias is eliminated by centering: with `X̄`, `Ȳ` the column
//! means, `(X_cᵀX_c + λI) W = X_cᵀY_c` and `b = Ȳ − X̄ W`. This is the exact
//! Schur complement of the normal equations augmented by an all-ones column.
//!
//! # Bundle format (`NMEL`, little-endian)
//!
//! ```text
//! "NMEL" | version u16 = 1
//! u64 len | lag block  (n_lags u64, include_lag0 u8, n u64, n × modality u8)
//! u64 n_pca | n × (modality u8, u64 len, PCA block)
//! ridge_lambda f64
//! P u64 | D u64 | P·D f64 weights, row-major (one row per parcel)
//! P u64 | P f64 biases
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};

use crate::codec::{self, ByteReader, ByteWriter};
use crate::data::{Modality, SourceData};
use crate::error::{Error, Result};
use crate::lagged::{align_targets, stack_rows, DesignMatrix, LagConfig};
use crate::pca::PcaModel;
use crate::prep::FeaturePrep;

pub const LINEAR_MAGIC: [u8; 4] = *b"NMEL";
pub const LINEAR_VERSION: u16 = 1;

/// Solution of the shared multi-target least-squares problem.
#[derive(Debug, Clone)]
pub struct LeastSquaresSolution {
    /// `d × P`, one column per target.
    pub coefficients: Mat<f64>,
    pub intercepts: Vec<f64>,
}

fn column_means(m: &Mat<f64>) -> Vec<f64> {
    let n = m.nrows() as f64;
    (0..m.ncols()).map(|j| m.col(j).iter().sum::<f64>() / n).collect()
}

fn centered(m: &Mat<f64>, means: &[f64]) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - means[j])
}

/// Solves all targets against one design with a single factorization.
pub fn solve_multi_target(
    design: &Mat<f64>,
    targets: &Mat<f64>,
    ridge_lambda: f64,
) -> Result<LeastSquaresSolution> {
    let (n, d) = (design.nrows(), design.ncols());
    if !ridge_lambda.is_finite() || ridge_lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "ridge_lambda must be a non-negative number, got {ridge_lambda}"
        )));
    }
    if targets.nrows() != n {
        return Err(Error::Shape(format!(
            "design has {n} rows but targets have {}",
            targets.nrows()
        )));
    }
    if d == 0 || targets.ncols() == 0 {
        return Err(Error::Shape("design and targets need at least one column".into()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 rows, got {n}")));
    }
    if ridge_lambda == 0.0 && n < d + 1 {
        return Err(Error::Singular(format!(
            "{n} rows cannot determine {d} weights plus a bias"
        )));
    }
    codec::check_finite(design)?;
    codec::check_finite(targets)?;

    let x_mean = column_means(design);
    let y_mean = column_means(targets);
    let xc = centered(design, &x_mean);
    let yc = centered(targets, &y_mean);

    let gram = xc.transpose() * &xc;
    let rhs = xc.transpose() * &yc;
    drop(xc);
    drop(yc);

    let coefficients = solve_gram(&gram, &rhs, ridge_lambda)?;
    let intercepts = (0..targets.ncols())
        .map(|j| {
            let dot: f64 = (0..d).map(|c| x_mean[c] * coefficients[(c, j)]).sum();
            y_mean[j] - dot
        })
        .collect();
    Ok(LeastSquaresSolution {
        coefficients,
        intercepts,
    })
}

/// Cholesky on `G + λI`; eigendecomposition fallback when λ > 0 and the
/// factorization breaks down numerically.
fn solve_gram(gram: &Mat<f64>, rhs: &Mat<f64>, lambda: f64) -> Result<Mat<f64>> {
    let d = gram.nrows();
    let mut reg = gram.clone();
    for i in 0..d {
        reg[(i, i)] += lambda;
    }
    let max_diag = (0..d).map(|i| reg[(i, i)]).fold(0.0_f64, f64::max);
    let floor = d as f64 * f64::EPSILON * max_diag;

    let deficiency = match reg.llt(Side::Lower) {
        Ok(llt) => {
            let l = llt.L();
            match (0..d).find(|&i| l[(i, i)] * l[(i, i)] <= floor) {
                None => return Ok(llt.solve(rhs)),
                Some(i) => format!("pivot for predictor column {i} is numerically zero"),
            }
        }
        Err(e) => format!("Cholesky breakdown: {e}"),
    };
    if lambda == 0.0 {
        return Err(Error::Singular(deficiency));
    }

    solve_gram_eigen(gram, rhs, lambda)
}

fn solve_gram_eigen(gram: &Mat<f64>, rhs: &Mat<f64>, lambda: f64) -> Result<Mat<f64>> {
    let evd = gram
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numerical(format!("eigendecomposition failed: {e:?}")))?;
    let u = evd.U();
    let s = evd.S().column_vector();
    let mut proj = u.transpose() * rhs;
    for i in 0..gram.nrows() {
        let scale = 1.0 / (s[i].max(0.0) + lambda);
        proj.row_mut(i).iter_mut().for_each(|x| *x *= scale);
    }
    Ok(u * proj)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearEncoderModel {
    /// `P × in_dim`.
    weights: Mat<f64>,
    biases: Vec<f64>,
    ridge_lambda: f64,
    prep: Option<FeaturePrep>,
}

impl LinearEncoderModel {
    /// Builds a model from explicit parameters (no feature preparation).
    pub fn from_parts(weights: Mat<f64>, biases: Vec<f64>, ridge_lambda: f64) -> Result<Self> {
        if biases.len() != weights.nrows() {
            return Err(Error::Shape(format!(
                "{} biases for {} parcels",
                biases.len(),
                weights.nrows()
            )));
        }
        Ok(Self {
            weights,
            biases,
            ridge_lambda,
            prep: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_parcels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Mat<f64> {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn ridge_lambda(&self) -> f64 {
        self.ridge_lambda
    }

    pub fn prep(&self) -> Option<&FeaturePrep> {
        self.prep.as_ref()
    }

    pub fn lag_config(&self) -> Option<&LagConfig> {
        self.prep.as_ref().map(FeaturePrep::lag_config)
    }

    pub fn pca_models(&self) -> &[(Modality, PcaModel)] {
        self.prep.as_ref().map_or(&[], |p| p.pca_models())
    }

    /// Predictions for one source's raw features, with the time index of
    /// each output row.
    pub fn predict_source(&self, source: &SourceData) -> Result<(Vec<usize>, Mat<f64>)> {
        let prep = self
            .prep
            .as_ref()
            .ok_or_else(|| Error::Config("model carries no feature preparation".into()))?;
        let design = prep.design_for(source)?;
        let out = predict_linear(self, &design)?;
        Ok((design.target_index().to_vec(), out))
    }

    /// Weights expressed over the raw (pre-PCA) lagged features, laid out
    /// exactly like a design built from raw features. Without PCA this is
    /// just the weight matrix.
    pub fn raw_space_weights(&self) -> Result<Mat<f64>> {
        let Some(prep) = &self.prep else {
            return Ok(self.weights.clone());
        };
        if prep.pca_models().is_empty() {
            return Ok(self.weights.clone());
        }
        let window = prep.lag_config().window_len();
        let raw_dims: Vec<usize> = prep.pca_models().iter().map(|(_, p)| p.in_dim()).collect();
        let raw_dim = window * raw_dims.iter().sum::<usize>();
        let mut out = Mat::zeros(self.n_parcels(), raw_dim);
        let (mut src_off, mut dst_off) = (0, 0);
        for (_, pca) in prep.pca_models() {
            let back = pca.back_projection();
            let (k, d) = (pca.k(), pca.in_dim());
            for slot in 0..window {
                let w_slot = self.weights.as_ref().subcols(src_off + slot * k, k);
                let raw = w_slot * back.transpose();
                out.as_mut()
                    .subcols_mut(dst_off + slot * d, d)
                    .copy_from(raw.as_ref());
            }
            src_off += window * k;
            dst_off += window * d;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let prep = self
            .prep
            .as_ref()
            .ok_or_else(|| Error::Config("only pipeline-fitted models can be bundled".into()))?;
        let mut w = ByteWriter::new();
        w.bytes(&LINEAR_MAGIC);
        w.u16(LINEAR_VERSION);
        prep.encode(&mut w);
        w.f64(self.ridge_lambda);
        w.matrix(&self.weights);
        w.f64_slice(&self.biases);
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic: [u8; 4] = r.array()?;
        if magic != LINEAR_MAGIC {
            return Err(Error::BadMagic {
                expected: LINEAR_MAGIC,
                found: magic,
            });
        }
        let version = r.u16()?;
        if version != LINEAR_VERSION {
            return Err(Error::Version {
                expected: LINEAR_VERSION,
                found: version,
            });
        }
        let prep = FeaturePrep::decode(&mut r)?;
        let ridge_lambda = r.f64()?;
        let weights = r.matrix()?;
        let biases = r.f64_vec()?;
        r.finish()?;
        if biases.len() != weights.nrows() {
            return Err(Error::Format("bias count does not match weight rows".into()));
        }
        if let Some(dims) = prep.reduced_dims() {
            if prep.lag_config().design_dim(&dims) != weights.ncols() {
                return Err(Error::Format("weight width does not match the lag layout".into()));
            }
        }
        Ok(Self {
            weights,
            biases,
            ridge_lambda,
            prep: Some(prep),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        codec::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path.as_ref())?)
    }
}

/// Fits every parcel of `targets` against `design`.
pub fn fit_linear(
    design: &DesignMatrix,
    targets: &Mat<f64>,
    ridge_lambda: f64,
) -> Result<LinearEncoderModel> {
    let sol = solve_multi_target(design.values(), targets, ridge_lambda)?;
    Ok(LinearEncoderModel {
        weights: sol.coefficients.transpose().to_owned(),
        biases: sol.intercepts,
        ridge_lambda,
        prep: None,
    })
}

/// `out[i, j] = w_jᵀ p_i + b_j`.
pub fn predict_linear(model: &LinearEncoderModel, design: &DesignMatrix) -> Result<Mat<f64>> {
    predict_matrix(model, design.values())
}

pub fn predict_matrix(model: &LinearEncoderModel, x: &Mat<f64>) -> Result<Mat<f64>> {
    if x.ncols() != model.in_dim() {
        return Err(Error::Shape(format!(
            "model expects {} predictors, design has {}",
            model.in_dim(),
            x.ncols()
        )));
    }
    let mut out = x * model.weights.transpose();
    for (j, &b) in model.biases.iter().enumerate() {
        out.col_mut(j).iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LinearPipelineConfig {
    pub k_per_modality: BTreeMap<Modality, usize>,
    pub whiten: bool,
    pub lag_config: LagConfig,
    pub ridge_lambda: f64,
}

/// Stacked design and targets over several sources, in the given order.
pub fn stacked_training_set(
    prep: &FeaturePrep,
    sources: &[SourceData],
) -> Result<(Mat<f64>, Mat<f64>)> {
    let mut xs = Vec::with_capacity(sources.len());
    let mut ys = Vec::with_capacity(sources.len());
    for s in sources {
        let bold = s
            .bold()
            .ok_or_else(|| Error::Dataset(format!("source {:?} has no BOLD data", s.source_id())))?;
        let (design, y) = align_targets(prep.design_for(s)?, bold)?;
        xs.push(design.values().clone());
        ys.push(y);
    }
    let n_parcels = ys[0].ncols();
    if ys.iter().any(|y| y.ncols() != n_parcels) {
        return Err(Error::Dataset("sources disagree on the number of parcels".into()));
    }
    let x = stack_rows(&xs.iter().collect::<Vec<_>>())?;
    let y = stack_rows(&ys.iter().collect::<Vec<_>>())?;
    Ok((x, y))
}

/// PCA per modality on the training features (skipped when no component
/// counts are given), lagged designs per source,
/// rows stacked in source order, one shared solve.
pub fn fit_linear_pipeline(
    sources: &[SourceData],
    cfg: &LinearPipelineConfig,
) -> Result<LinearEncoderModel> {
    if sources.is_empty() {
        return Err(Error::Dataset("training corpus is empty".into()));
    }
    let prep = if cfg.k_per_modality.is_empty() {
        FeaturePrep::identity(cfg.lag_config.clone())?
    } else {
        FeaturePrep::fit(sources, &cfg.k_per_modality, cfg.whiten, &cfg.lag_config)?
    };
    let (x, y) = stacked_training_set(&prep, sources)?;
    let sol = solve_multi_target(&x, &y, cfg.ridge_lambda)?;
    Ok(LinearEncoderModel {
        weights: sol.coefficients.transpose().to_owned(),
        biases: sol.intercepts,
        ridge_lambda: cfg.ridge_lambda,
        prep: Some(prep),
    })
}
