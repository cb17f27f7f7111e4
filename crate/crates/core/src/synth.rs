//! Synthetic corpora drawn from a known lagged-linear generative process.
//!
//! Features are i.i.d. standard normal (or AR(1) when requested). The clean
//! signal is `s_i = K p_i`, with `p_i` built by the same lag construction
//! the encoders use. Per parcel, white noise is centered, made orthogonal to
//! the realized signal and rescaled so that `var(signal) / var(noise)`
//! equals the requested SNR on the usable rows (`i ≥ n_lags_true`). The best
//! achievable held-out correlation is then `sqrt(snr / (1 + snr))`.
//!
//! Generated values are rounded to `f32` so in-memory corpora are exactly
//! what a write/read cycle through NMEF/NMEB produces.

use std::path::Path;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codec::{self, ByteReader, ByteWriter};
use crate::data::{BoldSeries, FeatureSeries, Modality, SourceData, Tr};
use crate::error::{Error, Result};
use crate::lagged::{build_design, LagConfig};
use crate::linear::LinearEncoderModel;

pub const KERNEL_MAGIC: [u8; 4] = *b"NMEK";
pub const KERNEL_VERSION: u16 = 1;

const STREAM_KERNEL: u64 = 0;
const STREAM_VISUAL: u64 = 1;
const STREAM_AUDIO: u64 = 2;
const STREAM_NOISE: u64 = 3;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub t_samples: usize,
    pub d_visual: usize,
    pub d_audio: usize,
    pub n_parcels: usize,
    pub n_lags_true: usize,
    pub snr: f64,
    pub seed: u64,
    /// `n_parcels × n_lags_true·(d_visual + d_audio)`; drawn from the seed
    /// when absent.
    pub kernel: Option<Mat<f64>>,
    /// AR(1) coefficient for the features; `None` means i.i.d.
    pub ar1: Option<f64>,
    pub source_id: String,
    pub subject_id: String,
    pub tr: Tr,
}

impl SynthSpec {
    pub fn new(
        t_samples: usize,
        d_visual: usize,
        d_audio: usize,
        n_parcels: usize,
        n_lags_true: usize,
        snr: f64,
        seed: u64,
    ) -> Self {
        Self {
            t_samples,
            d_visual,
            d_audio,
            n_parcels,
            n_lags_true,
            snr,
            seed,
            kernel: None,
            ar1: None,
            source_id: "synth".into(),
            subject_id: "sub-synth".into(),
            tr: Tr::default(),
        }
    }

    pub fn kernel_dim(&self) -> usize {
        self.n_lags_true * (self.d_visual + self.d_audio)
    }

    pub fn lag_config(&self) -> LagConfig {
        LagConfig {
            n_lags: self.n_lags_true,
            modality_order: vec![Modality::Visual, Modality::Audio],
            include_lag0: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d_visual == 0 || self.d_audio == 0 || self.n_parcels == 0 || self.n_lags_true == 0 {
            return Err(Error::InvalidArgument(
                "feature dims, parcel count and lag count must all be at least 1".into(),
            ));
        }
        if self.t_samples <= self.n_lags_true + 1 {
            return Err(Error::InvalidArgument(format!(
                "t_samples = {} must exceed n_lags_true + 1 = {}",
                self.t_samples,
                self.n_lags_true + 1
            )));
        }
        if !(self.snr.is_finite() && self.snr > 0.0) {
            return Err(Error::InvalidArgument(format!("snr must be positive, got {}", self.snr)));
        }
        if let Some(phi) = self.ar1 {
            if !(phi.is_finite() && phi.abs() < 1.0) {
                return Err(Error::InvalidArgument(format!("AR(1) coefficient must lie in (-1, 1), got {phi}")));
            }
        }
        if let Some(k) = &self.kernel {
            if k.nrows() != self.n_parcels || k.ncols() != self.kernel_dim() {
                return Err(Error::Shape(format!(
                    "kernel is {}×{}, expected {}×{}",
                    k.nrows(),
                    k.ncols(),
                    self.n_parcels,
                    self.kernel_dim()
                )));
            }
            codec::check_finite(k)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub visual: FeatureSeries,
    pub audio: FeatureSeries,
    pub bold: BoldSeries,
    pub kernel: Mat<f64>,
    /// Clean signal `K p_i` (before noise), `T × P`.
    pub signal: Mat<f64>,
}

impl SynthOutput {
    pub fn source(&self) -> SourceData {
        SourceData::new(vec![self.visual.clone(), self.audio.clone()], Some(self.bold.clone()))
            .expect("generator output is internally consistent")
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

/// Draws a kernel with i.i.d. standard normal entries.
pub fn draw_kernel(n_parcels: usize, dim: usize, seed: u64) -> Mat<f64> {
    let mut rng = stream(seed, STREAM_KERNEL);
    let mut k = Mat::zeros(n_parcels, dim);
    for i in 0..n_parcels {
        for j in 0..dim {
            k[(i, j)] = normal(&mut rng);
        }
    }
    k
}

fn draw_features(t: usize, d: usize, ar1: Option<f64>, rng: &mut ChaCha8Rng) -> Mat<f64> {
    let mut m = Mat::zeros(t, d);
    let phi = ar1.unwrap_or(0.0);
    let innov = (1.0 - phi * phi).sqrt();
    for i in 0..t {
        for j in 0..d {
            let e = normal(rng);
            m[(i, j)] = if i == 0 || ar1.is_none() {
                e
            } else {
                phi * m[(i - 1, j)] + innov * e
            };
        }
    }
    for j in 0..d {
        m.col_mut(j).iter_mut().for_each(|x| *x = f32_round(*x));
    }
    m
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let (t, p, lags) = (spec.t_samples, spec.n_parcels, spec.n_lags_true);
    let kernel = spec
        .kernel
        .clone()
        .unwrap_or_else(|| draw_kernel(p, spec.kernel_dim(), spec.seed));

    let vis = draw_features(t, spec.d_visual, spec.ar1, &mut stream(spec.seed, STREAM_VISUAL));
    let aud = draw_features(t, spec.d_audio, spec.ar1, &mut stream(spec.seed, STREAM_AUDIO));
    let visual = FeatureSeries::new(Modality::Visual, spec.tr, &spec.source_id, vis.clone())?;
    let audio = FeatureSeries::new(Modality::Audio, spec.tr, &spec.source_id, aud.clone())?;

    // Zero history before t = 0 so every sample gets a (partial) signal.
    let pad = |m: &Mat<f64>| Mat::from_fn(t + lags, m.ncols(), |i, j| if i < lags { 0.0 } else { m[(i - lags, j)] });
    let pv = FeatureSeries::new(Modality::Visual, spec.tr, &spec.source_id, pad(&vis))?;
    let pa = FeatureSeries::new(Modality::Audio, spec.tr, &spec.source_id, pad(&aud))?;
    let design = build_design(&[&pv, &pa], &spec.lag_config())?;
    let signal = design.values() * kernel.transpose();

    let mut rng = stream(spec.seed, STREAM_NOISE);
    let mut values = Mat::zeros(t, p);
    let usable = lags..t;
    let n_usable = (t - lags) as f64;
    for j in 0..p {
        let s = signal.col(j);
        let s_mean = usable.clone().map(|i| s[i]).sum::<f64>() / n_usable;
        let s_var = usable.clone().map(|i| (s[i] - s_mean).powi(2)).sum::<f64>() / n_usable;
        if s_var <= 0.0 {
            return Err(Error::InvalidArgument(format!("parcel {j} has zero signal variance")));
        }
        let mut noise: Vec<f64> = (0..t).map(|_| normal(&mut rng)).collect();
        let n_mean = usable.clone().map(|i| noise[i]).sum::<f64>() / n_usable;
        noise.iter_mut().for_each(|x| *x -= n_mean);
        let proj = usable.clone().map(|i| noise[i] * (s[i] - s_mean)).sum::<f64>()
            / (s_var * n_usable);
        for i in 0..t {
            noise[i] -= proj * (s[i] - s_mean);
        }
        let n_var = usable.clone().map(|i| noise[i] * noise[i]).sum::<f64>() / n_usable;
        let scale = (s_var / spec.snr / n_var).sqrt();
        for i in 0..t {
            values[(i, j)] = f32_round(s[i] + scale * noise[i]);
        }
    }
    let bold = BoldSeries::new(spec.tr, &spec.source_id, &spec.subject_id, values)?;

    Ok(SynthOutput {
        visual,
        audio,
        bold,
        kernel,
        signal,
    })
}

/// Per-parcel `1 − cos(true_row, fitted_row)`, with the fitted weights
/// mapped back through any PCA so both use the raw lagged layout.
pub fn kernel_recovery_error(true_kernel: &Mat<f64>, fitted: &LinearEncoderModel) -> Result<Vec<f64>> {
    let w = fitted.raw_space_weights()?;
    if w.nrows() != true_kernel.nrows() || w.ncols() != true_kernel.ncols() {
        return Err(Error::Shape(format!(
            "fitted weights are {}×{} but the kernel is {}×{}",
            w.nrows(),
            w.ncols(),
            true_kernel.nrows(),
            true_kernel.ncols()
        )));
    }
    (0..w.nrows())
        .map(|j| {
            let a = true_kernel.row(j);
            let b = w.row(j);
            let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
            let na = a.norm_l2();
            let nb = b.norm_l2();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::UndefinedCorrelation(format!("parcel {j} has a zero weight row")));
            }
            Ok(1.0 - dot / (na * nb))
        })
        .collect()
}

pub fn kernel_to_bytes(kernel: &Mat<f64>) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(&KERNEL_MAGIC);
    w.u16(KERNEL_VERSION);
    w.matrix(kernel);
    w.into_inner()
}

pub fn kernel_from_bytes(bytes: &[u8]) -> Result<Mat<f64>> {
    let mut r = ByteReader::new(bytes);
    let magic: [u8; 4] = r.array()?;
    if magic != KERNEL_MAGIC {
        return Err(Error::BadMagic {
            expected: KERNEL_MAGIC,
            found: magic,
        });
    }
    let version = r.u16()?;
    if version != KERNEL_VERSION {
        return Err(Error::Version {
            expected: KERNEL_VERSION,
            found: version,
        });
    }
    let k = r.matrix()?;
    r.finish()?;
    codec::check_finite(&k)?;
    Ok(k)
}

pub fn write_kernel_file(kernel: &Mat<f64>, path: impl AsRef<Path>) -> Result<()> {
    codec::write_atomic(path.as_ref(), &kernel_to_bytes(kernel))
}

pub fn read_kernel_file(path: impl AsRef<Path>) -> Result<Mat<f64>> {
    kernel_from_bytes(&codec::read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col_var(m: &Mat<f64>, j: usize, rows: std::ops::Range<usize>) -> f64 {
        let n = rows.len() as f64;
        let mean = rows.clone().map(|i| m[(i, j)]).sum::<f64>() / n;
        rows.map(|i| (m[(i, j)] - mean).powi(2)).sum::<f64>() / n
    }

    #[test]
    fn same_seed_same_output() {
        let spec = SynthSpec::new(200, 3, 2, 4, 3, 2.0, 7);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.bold, b.bold);
        assert_eq!(a.visual, b.visual);
        assert_eq!(a.kernel, b.kernel);
        let c = generate(&SynthSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.bold, c.bold);
    }

    #[test]
    fn snr_is_realized() {
        for snr in [0.5, 1.0, 4.0] {
            let spec = SynthSpec::new(3000, 3, 2, 5, 4, snr, 11);
            let out = generate(&spec).unwrap();
            for j in 0..5 {
                let vs = col_var(&out.signal, j, 4..3000);
                let noise = &out.bold.values().to_owned() - &out.signal;
                let vn = col_var(&noise, j, 4..3000);
                assert!(((vs / vn) / snr - 1.0).abs() < 0.02, "snr {snr} parcel {j}");
                let vb = col_var(out.bold.values(), j, 4..3000);
                assert!((vb / ((1.0 + 1.0 / snr) * vs) - 1.0).abs() < 0.02);
            }
        }
    }

    #[test]
    fn signal_follows_the_lag_construction() {
        let spec = SynthSpec::new(30, 2, 1, 2, 2, 1.0, 3);
        let out = generate(&spec).unwrap();
        let (v, a, k) = (out.visual.values(), out.audio.values(), &out.kernel);
        let i = 10;
        for j in 0..2 {
            // Layout: [v(i-1), v(i-2), a(i-1), a(i-2)]
            let p = [v[(i - 1, 0)], v[(i - 1, 1)], v[(i - 2, 0)], v[(i - 2, 1)], a[(i - 1, 0)], a[(i - 2, 0)]];
            let s: f64 = p.iter().enumerate().map(|(c, x)| k[(j, c)] * x).sum();
            assert!((s - out.signal[(i, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn explicit_kernel_is_used_and_checked() {
        let mut spec = SynthSpec::new(50, 1, 1, 2, 1, 1.0, 1);
        spec.kernel = Some(Mat::from_fn(2, 2, |i, j| (i + j + 1) as f64));
        assert_eq!(generate(&spec).unwrap().kernel, spec.kernel.clone().unwrap());
        spec.kernel = Some(Mat::zeros(2, 3));
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn degenerate_specs_rejected() {
        assert!(generate(&SynthSpec::new(50, 0, 1, 2, 1, 1.0, 1)).is_err());
        assert!(generate(&SynthSpec::new(3, 1, 1, 2, 2, 1.0, 1)).is_err());
        assert!(generate(&SynthSpec::new(50, 1, 1, 2, 1, 0.0, 1)).is_err());
        let mut s = SynthSpec::new(50, 1, 1, 2, 1, 1.0, 1);
        s.ar1 = Some(1.0);
        assert!(generate(&s).is_err());
    }

    #[test]
    fn ar1_features_are_autocorrelated() {
        let mut spec = SynthSpec::new(4000, 1, 1, 1, 1, 1.0, 5);
        spec.ar1 = Some(0.8);
        let out = generate(&spec).unwrap();
        let v = out.visual.values();
        let n = v.nrows();
        let lag1: f64 = (1..n).map(|i| v[(i, 0)] * v[(i - 1, 0)]).sum::<f64>() / (n - 1) as f64;
        let var: f64 = (0..n).map(|i| v[(i, 0)] * v[(i, 0)]).sum::<f64>() / n as f64;
        assert!((lag1 / var - 0.8).abs() < 0.05);
    }

    #[test]
    fn kernel_file_round_trip() {
        let k = draw_kernel(3, 4, 9);
        let bytes = kernel_to_bytes(&k);
        assert_eq!(kernel_from_bytes(&bytes).unwrap(), k);
        assert!(kernel_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(kernel_from_bytes(&bad).is_err());
    }

    #[test]
    fn recovery_error_rejects_mismatched_dims() {
        let m = LinearEncoderModel::from_parts(Mat::from_fn(2, 3, |_, _| 1.0), vec![0.0; 2], 0.0).unwrap();
        assert!(kernel_recovery_error(&Mat::zeros(2, 4), &m).is_err());
        let same = kernel_recovery_error(&Mat::from_fn(2, 3, |_, _| 2.0), &m).unwrap();
        assert!(same.iter().all(|d| d.abs() < 1e-15));
    }
}
