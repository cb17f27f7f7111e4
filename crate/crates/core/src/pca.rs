//! Principal component reduction of per-modality features.
//!
//! Fitting centers the data and takes the thin SVD of the centered matrix;
//! the covariance matrix is never formed.

use faer::Mat;

use crate::codec::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// `k × in_dim`, orthonormal rows.
    components: Mat<f64>,
    explained_variance: Vec<f64>,
    total_variance: f64,
    whiten: bool,
}

impl PcaModel {
    pub fn in_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &Mat<f64> {
        &self.components
    }

    /// Sample variance (denominator `N - 1`) along each retained component.
    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// Sum of the per-column sample variances of the fitting data.
    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    pub fn whiten(&self) -> bool {
        self.whiten
    }

    /// `N × in_dim` → `N × k`: each output row is `components · (row - mean)`,
    /// divided component-wise by the standard deviation when whitening.
    pub fn transform(&self, data: &Mat<f64>) -> Result<Mat<f64>> {
        if data.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "PCA expects {} columns, got {}",
                self.in_dim(),
                data.ncols()
            )));
        }
        let centered = center(data, &self.mean);
        let mut out = &centered * self.components.transpose();
        if self.whiten {
            for (j, &v) in self.explained_variance.iter().enumerate() {
                let s = v.sqrt();
                out.col_mut(j).iter_mut().for_each(|x| *x /= s);
            }
        }
        Ok(out)
    }

    /// Maps reduced coordinates back to the input space.
    pub fn inverse_transform(&self, reduced: &Mat<f64>) -> Result<Mat<f64>> {
        if reduced.ncols() != self.k() {
            return Err(Error::Shape(format!(
                "inverse transform expects {} columns, got {}",
                self.k(),
                reduced.ncols()
            )));
        }
        let mut z = reduced.clone();
        if self.whiten {
            for (j, &v) in self.explained_variance.iter().enumerate() {
                let s = v.sqrt();
                z.col_mut(j).iter_mut().for_each(|x| *x *= s);
            }
        }
        let mut out = &z * &self.components;
        for (j, &m) in self.mean.iter().enumerate() {
            out.col_mut(j).iter_mut().for_each(|x| *x += m);
        }
        Ok(out)
    }

    /// Linear map taking a weight vector over reduced coordinates to the
    /// equivalent weight vector over raw (centered) inputs: `in_dim × k`.
    pub fn back_projection(&self) -> Mat<f64> {
        let mut m = self.components.transpose().to_owned();
        if self.whiten {
            for (j, &v) in self.explained_variance.iter().enumerate() {
                let s = v.sqrt();
                m.col_mut(j).iter_mut().for_each(|x| *x /= s);
            }
        }
        m
    }

    pub(crate) fn encode(&self, w: &mut ByteWriter) {
        w.u8(u8::from(self.whiten));
        w.f64(self.total_variance);
        w.f64_slice(&self.mean);
        w.f64_slice(&self.explained_variance);
        w.matrix(&self.components);
    }

    pub(crate) fn decode(r: &mut ByteReader<'_>) -> Result<Self> {
        let whiten = r.bool()?;
        let total_variance = r.f64()?;
        let mean = r.f64_vec()?;
        let explained_variance = r.f64_vec()?;
        let components = r.matrix()?;
        let k = components.nrows();
        if components.ncols() != mean.len() || explained_variance.len() != k || k == 0 || k > mean.len()
        {
            return Err(Error::Format("inconsistent PCA block dimensions".into()));
        }
        codec::check_finite(&components)?;
        if mean.iter().chain(&explained_variance).any(|x| !x.is_finite()) || !total_variance.is_finite()
        {
            return Err(Error::Format("non-finite PCA parameters".into()));
        }
        Ok(Self {
            mean,
            components,
            explained_variance,
            total_variance,
            whiten,
        })
    }
}

fn center(data: &Mat<f64>, mean: &[f64]) -> Mat<f64> {
    Mat::from_fn(data.nrows(), data.ncols(), |i, j| data[(i, j)] - mean[j])
}

/// Fits a `k`-component PCA with no whitening.
pub fn pca_fit(data: &Mat<f64>, k: usize) -> Result<PcaModel> {
    pca_fit_with(data, k, false)
}

pub fn pca_fit_with(data: &Mat<f64>, k: usize, whiten: bool) -> Result<PcaModel> {
    let (n, d) = (data.nrows(), data.ncols());
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 samples, got {n}")));
    }
    if k == 0 || k > d || k > n - 1 {
        return Err(Error::InvalidArgument(format!(
            "number of components k = {k} must lie in 1..={}",
            d.min(n - 1)
        )));
    }
    codec::check_finite(data)?;

    let mean: Vec<f64> = (0..d)
        .map(|j| data.col(j).iter().sum::<f64>() / n as f64)
        .collect();
    let centered = center(data, &mean);
    let denom = (n - 1) as f64;
    let total_variance = centered.squared_norm_l2() / denom;
    if total_variance == 0.0 {
        return Err(Error::InvalidArgument("data has zero total variance".into()));
    }

    let svd = centered
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
    let s = svd.S().column_vector();
    let v = svd.V();

    let mut components = Mat::<f64>::zeros(k, d);
    let mut explained_variance = Vec::with_capacity(k);
    for c in 0..k {
        let col = v.col(c);
        // Largest-magnitude entry positive; strict `>` keeps the lowest index on ties.
        let mut pivot = 0;
        for j in 1..d {
            if col[j].abs() > col[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[(c, j)] = sign * col[j];
        }
        explained_variance.push(s[c] * s[c] / denom);
    }

    if whiten {
        if let Some(c) = explained_variance.iter().position(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cannot whiten: component {c} has zero variance"
            )));
        }
    }

    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        total_variance,
        whiten,
    })
}
