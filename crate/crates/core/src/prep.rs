//! Input preparation shared by both encoders: per-modality PCA fitted on
//! training features, then lagged design construction per source.

use std::collections::BTreeMap;

use faer::Mat;

use crate::codec::{ByteReader, ByteWriter};
use crate::data::{FeatureSeries, Modality, SourceData};
use crate::error::{Error, Result};
use crate::lagged::{build_design, DesignMatrix, LagConfig};
use crate::pca::{pca_fit_with, PcaModel};

/// Frozen PCA transforms plus the lag layout they feed.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePrep {
    lag_config: LagConfig,
    pca_models: Vec<(Modality, PcaModel)>,
}

impl FeaturePrep {
    /// Fits one PCA per modality in `lag_config.modality_order` on the row
    /// concatenation of all `train` sources.
    pub fn fit(
        train: &[SourceData],
        k_per_modality: &BTreeMap<Modality, usize>,
        whiten: bool,
        lag_config: &LagConfig,
    ) -> Result<Self> {
        lag_config.validate()?;
        if train.is_empty() {
            return Err(Error::Dataset("training corpus is empty".into()));
        }
        let mut pca_models = Vec::with_capacity(lag_config.modality_order.len());
        for &m in &lag_config.modality_order {
            let k = *k_per_modality
                .get(&m)
                .ok_or_else(|| Error::Config(format!("no PCA component count for {m}")))?;
            let series: Vec<&FeatureSeries> = train
                .iter()
                .map(|s| {
                    s.feature(m).ok_or_else(|| {
                        Error::Dataset(format!("source {:?} has no {m} features", s.source_id()))
                    })
                })
                .collect::<Result<_>>()?;
            let parts: Vec<&Mat<f64>> = series.iter().map(|s| s.values()).collect();
            let stacked = crate::lagged::stack_rows(&parts)
                .map_err(|_| Error::Dataset(format!("{m} features have inconsistent dims")))?;
            pca_models.push((m, pca_fit_with(&stacked, k, whiten)?));
        }
        Ok(Self {
            lag_config: lag_config.clone(),
            pca_models,
        })
    }

    /// No reduction: the design is built from raw features.
    pub fn identity(lag_config: LagConfig) -> Result<Self> {
        lag_config.validate()?;
        Ok(Self {
            lag_config,
            pca_models: Vec::new(),
        })
    }

    pub fn lag_config(&self) -> &LagConfig {
        &self.lag_config
    }

    pub fn pca_models(&self) -> &[(Modality, PcaModel)] {
        &self.pca_models
    }

    pub fn pca(&self, m: Modality) -> Option<&PcaModel> {
        self.pca_models.iter().find(|(mm, _)| *mm == m).map(|(_, p)| p)
    }

    /// Per-modality dims entering the design, in modality order.
    pub fn reduced_dims(&self) -> Option<Vec<usize>> {
        if self.pca_models.is_empty() {
            return None;
        }
        Some(self.pca_models.iter().map(|(_, p)| p.k()).collect())
    }

    /// Reduces each modality and builds the lagged design for one source.
    pub fn design_for(&self, source: &SourceData) -> Result<DesignMatrix> {
        let reduced: Vec<FeatureSeries> = self
            .lag_config
            .modality_order
            .iter()
            .map(|&m| {
                let f = source.feature(m).ok_or_else(|| {
                    Error::Dataset(format!("source {:?} has no {m} features", source.source_id()))
                })?;
                match self.pca(m) {
                    Some(p) => f.with_values(p.transform(f.values())?),
                    None => Ok(f.clone()),
                }
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&FeatureSeries> = reduced.iter().collect();
        build_design(&refs, &self.lag_config)
    }

    pub(crate) fn encode(&self, w: &mut ByteWriter) {
        let lag = &self.lag_config;
        let mut block = ByteWriter::new();
        block.u64(lag.n_lags as u64);
        block.u8(u8::from(lag.include_lag0));
        block.u64(lag.modality_order.len() as u64);
        for m in &lag.modality_order {
            block.u8(m.code());
        }
        let block = block.into_inner();
        w.u64(block.len() as u64);
        w.bytes(&block);

        w.u64(self.pca_models.len() as u64);
        for (m, p) in &self.pca_models {
            let mut b = ByteWriter::new();
            p.encode(&mut b);
            let b = b.into_inner();
            w.u8(m.code());
            w.u64(b.len() as u64);
            w.bytes(&b);
        }
    }

    pub(crate) fn decode(r: &mut ByteReader<'_>) -> Result<Self> {
        let len = r.count("lag block length", r.remaining() as u64)?;
        let mut lr = ByteReader::new(r.take(len)?);
        let n_lags = lr.count("n_lags", u32::MAX as u64)?;
        let include_lag0 = lr.bool()?;
        let n_mod = lr.count("modality count", 3)?;
        let modality_order = (0..n_mod)
            .map(|_| Modality::from_code(lr.u8()?))
            .collect::<Result<Vec<_>>>()?;
        lr.finish()?;
        let lag_config = LagConfig {
            n_lags,
            modality_order,
            include_lag0,
        };
        lag_config
            .validate()
            .map_err(|e| Error::Format(format!("bad lag block: {e}")))?;

        let n_pca = r.count("PCA block count", 3)?;
        let mut pca_models = Vec::with_capacity(n_pca);
        for _ in 0..n_pca {
            let m = Modality::from_code(r.u8()?)?;
            let len = r.count("PCA block length", r.remaining() as u64)?;
            let mut pr = ByteReader::new(r.take(len)?);
            let p = PcaModel::decode(&mut pr)?;
            pr.finish()?;
            pca_models.push((m, p));
        }
        if !pca_models.is_empty() {
            let order: Vec<Modality> = pca_models.iter().map(|(m, _)| *m).collect();
            if order != lag_config.modality_order {
                return Err(Error::Format("PCA blocks do not follow the modality order".into()));
            }
        }
        Ok(Self {
            lag_config,
            pca_models,
        })
    }
}
