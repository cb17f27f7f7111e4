//! Correlation scoring and report aggregation.
//!
//! Per-parcel Pearson correlations are averaged over parcels (undefined
//! entries excluded and counted), then combined into unweighted means:
//! per subject across sources, per source across subjects, and an overall
//! mean of the per-source rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use faer::Mat;

use crate::codec;
use crate::data::{BoldSeries, Tr};
use crate::error::{Error, Result};

/// Wildcard id used by aggregate rows.
pub const ALL: &str = "__ALL__";
/// Source id used when series are concatenated before scoring.
pub const CONCAT: &str = "__CONCAT__";
pub const CSV_HEADER: &str = "subject_id,source_id,model_tag,n_parcels_defined,n_samples,mean_rho";

const RHO_SLACK: f64 = 1e-12;

/// Pearson correlation with a two-pass (mean, then centered moments)
/// evaluation.
pub fn pearson(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::Shape(format!(
            "series lengths differ: {} vs {}",
            pred.len(),
            actual.len()
        )));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    if let Some(i) = pred.iter().chain(actual).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row: i % n, col: i / n });
    }
    let mp = pred.iter().sum::<f64>() / n as f64;
    let ma = actual.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &a) in pred.iter().zip(actual) {
        let (dp, da) = (p - mp, a - ma);
        sxy += dp * da;
        sxx += dp * dp;
        syy += da * da;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    let prod = sxx * syy;
    let denom = if prod.is_finite() && prod > 0.0 {
        prod.sqrt()
    } else {
        sxx.sqrt() * syy.sqrt()
    };
    let rho = sxy / denom;
    if !rho.is_finite() || rho.abs() > 1.0 + RHO_SLACK {
        return Err(Error::Numerical(format!("correlation {rho} outside [-1, 1]")));
    }
    Ok(rho.clamp(-1.0, 1.0))
}

/// Identifies one scored (subject, source, model) combination.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScoreMeta {
    pub subject_id: String,
    pub source_id: String,
    pub model_tag: String,
}

impl ScoreMeta {
    pub fn new(subject: impl Into<String>, source: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            subject_id: subject.into(),
            source_id: source.into(),
            model_tag: model.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParcelScores {
    pub meta: ScoreMeta,
    /// `None` marks a parcel whose correlation is undefined.
    pub rho: Vec<Option<f64>>,
    pub n_samples: usize,
}

impl ParcelScores {
    pub fn n_parcels(&self) -> usize {
        self.rho.len()
    }

    pub fn n_defined(&self) -> usize {
        self.rho.iter().flatten().count()
    }

    /// Mean over defined parcels; `None` if no parcel is defined.
    pub fn parcel_mean(&self) -> Option<f64> {
        let n = self.n_defined();
        (n > 0).then(|| self.rho.iter().flatten().sum::<f64>() / n as f64)
    }

    /// `1 × P` NMEB vector for external renderers; undefined parcels are
    /// written as 0 and listed by [`ParcelScores::undefined_parcels`].
    pub fn to_bold_vector(&self) -> Result<BoldSeries> {
        let v = Mat::from_fn(1, self.rho.len(), |_, j| self.rho[j].unwrap_or(0.0));
        BoldSeries::new(Tr::default(), &self.meta.source_id, &self.meta.subject_id, v)
    }

    pub fn undefined_parcels(&self) -> Vec<usize> {
        self.rho
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.is_none().then_some(i))
            .collect()
    }
}

/// Column-wise Pearson between predicted and actual responses.
pub fn score_parcels(pred: &Mat<f64>, actual: &Mat<f64>, meta: ScoreMeta) -> Result<ParcelScores> {
    if pred.nrows() != actual.nrows() || pred.ncols() != actual.ncols() {
        return Err(Error::Shape(format!(
            "prediction is {}×{} but actual is {}×{}",
            pred.nrows(),
            pred.ncols(),
            actual.nrows(),
            actual.ncols()
        )));
    }
    let n = pred.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    let mut rho = Vec::with_capacity(pred.ncols());
    let (mut p, mut a) = (vec![0.0; n], vec![0.0; n]);
    for j in 0..pred.ncols() {
        for i in 0..n {
            p[i] = pred[(i, j)];
            a[i] = actual[(i, j)];
        }
        match pearson(&p, &a) {
            Ok(r) => rho.push(Some(r)),
            Err(Error::UndefinedCorrelation(_)) => rho.push(None),
            Err(e) => return Err(e),
        }
    }
    Ok(ParcelScores {
        meta,
        rho,
        n_samples: n,
    })
}

/// Scores the row-concatenation of several (prediction, actual) pairs as a
/// single series per parcel.
pub fn score_concatenated(
    pairs: &[(&Mat<f64>, &Mat<f64>)],
    subject: &str,
    model: &str,
) -> Result<ParcelScores> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("nothing to score".into()));
    }
    let preds: Vec<&Mat<f64>> = pairs.iter().map(|p| p.0).collect();
    let actuals: Vec<&Mat<f64>> = pairs.iter().map(|p| p.1).collect();
    let pred = crate::lagged::stack_rows(&preds)?;
    let actual = crate::lagged::stack_rows(&actuals)?;
    score_parcels(&pred, &actual, ScoreMeta::new(subject, CONCAT, model))
}

/// One CSV line: an individual score or an aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub meta: ScoreMeta,
    pub n_parcels_defined: usize,
    pub n_samples: usize,
    /// NaN when no parcel was defined.
    pub mean_rho: f64,
}

impl ReportRow {
    pub fn is_aggregate(&self) -> bool {
        self.meta.subject_id == ALL || self.meta.source_id == ALL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Sorted by (model, subject, source).
    pub entries: Vec<ReportRow>,
    /// Parcel vectors behind `entries`, when available (empty for reports
    /// rebuilt from CSV).
    pub scores: Vec<ParcelScores>,
    pub aggregates: Vec<ReportRow>,
}

fn check_csv_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains([',', '\n', '\r', '"']) {
        return Err(Error::InvalidArgument(format!(
            "identifier {id:?} cannot be written to the report CSV"
        )));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn aggregate(scores: &[ParcelScores]) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate an empty collection".into()));
    }
    let p = scores[0].n_parcels();
    if scores.iter().any(|s| s.n_parcels() != p) {
        return Err(Error::Shape("reports disagree on the number of parcels".into()));
    }
    let rows = scores
        .iter()
        .map(|s| ReportRow {
            meta: s.meta.clone(),
            n_parcels_defined: s.n_defined(),
            n_samples: s.n_samples,
            mean_rho: s.parcel_mean().unwrap_or(f64::NAN),
        })
        .collect();
    let mut report = aggregate_rows(rows)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| sort_key(&a.meta).cmp(&sort_key(&b.meta)));
    report.scores = sorted;
    Ok(report)
}

fn sort_key(m: &ScoreMeta) -> (&str, &str, &str) {
    (&m.model_tag, &m.subject_id, &m.source_id)
}

/// Aggregates from per-entry parcel means alone.
pub fn aggregate_rows(mut entries: Vec<ReportRow>) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate an empty collection".into()));
    }
    entries.sort_by(|a, b| sort_key(&a.meta).cmp(&sort_key(&b.meta)));
    for w in entries.windows(2) {
        if w[0].meta == w[1].meta {
            return Err(Error::Dataset(format!("duplicate report entry {:?}", w[0].meta)));
        }
    }
    for e in &entries {
        check_csv_id(&e.meta.subject_id)?;
        check_csv_id(&e.meta.source_id)?;
        check_csv_id(&e.meta.model_tag)?;
        if e.is_aggregate() {
            return Err(Error::Dataset(format!("{ALL} is reserved for aggregate rows")));
        }
    }

    let mut aggregates = Vec::new();
    let mut by_model: BTreeMap<&str, Vec<&ReportRow>> = BTreeMap::new();
    for e in &entries {
        by_model.entry(&e.meta.model_tag).or_default().push(e);
    }
    for (model, rows) in by_model {
        let defined: Vec<&ReportRow> = rows.iter().copied().filter(|r| r.mean_rho.is_finite()).collect();
        let make = |subject: &str, source: &str, group: &[&ReportRow]| ReportRow {
            meta: ScoreMeta::new(subject, source, model),
            n_parcels_defined: group.iter().map(|r| r.n_parcels_defined).sum(),
            n_samples: group.iter().map(|r| r.n_samples).sum(),
            mean_rho: if group.is_empty() {
                f64::NAN
            } else {
                mean(&group.iter().map(|r| r.mean_rho).collect::<Vec<_>>())
            },
        };

        let mut by_subject: BTreeMap<&str, Vec<&ReportRow>> = BTreeMap::new();
        let mut by_source: BTreeMap<&str, Vec<&ReportRow>> = BTreeMap::new();
        for r in &defined {
            by_subject.entry(&r.meta.subject_id).or_default().push(r);
            by_source.entry(&r.meta.source_id).or_default().push(r);
        }
        for (subject, group) in &by_subject {
            aggregates.push(make(subject, ALL, group));
        }
        let mut source_rows = Vec::new();
        for (source, group) in &by_source {
            let row = make(ALL, source, group);
            source_rows.push(row.mean_rho);
            aggregates.push(row);
        }
        let mut overall = make(ALL, ALL, &defined);
        overall.mean_rho = if source_rows.is_empty() {
            f64::NAN
        } else {
            mean(&source_rows)
        };
        aggregates.push(overall);
    }
    Ok(EvalReport {
        entries,
        scores: Vec::new(),
        aggregates,
    })
}

impl EvalReport {
    /// Overall (all subjects, all sources) mean for one model.
    pub fn overall(&self, model_tag: &str) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|r| r.meta.model_tag == model_tag && r.meta.subject_id == ALL && r.meta.source_id == ALL)
            .map(|r| r.mean_rho)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.entries.iter().chain(&self.aggregates) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.meta.subject_id,
                r.meta.source_id,
                r.meta.model_tag,
                r.n_parcels_defined,
                r.n_samples,
                format_rho(r.mean_rho)
            );
        }
        out
    }
}

fn format_rho(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}

/// Parses a report CSV back into rows (entries and aggregates alike).
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        _ => return Err(Error::Format("report CSV header missing or wrong".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("report line {}: expected 6 fields", i + 2)));
        }
        let bad = |what: &str| Error::Format(format!("report line {}: bad {what}", i + 2));
        rows.push(ReportRow {
            meta: ScoreMeta::new(f[0], f[1], f[2]),
            n_parcels_defined: f[3].parse().map_err(|_| bad("n_parcels_defined"))?,
            n_samples: f[4].parse().map_err(|_| bad("n_samples"))?,
            mean_rho: f[5].parse().map_err(|_| bad("mean_rho"))?,
        });
    }
    Ok(rows)
}

/// Writes `report.csv` and one parcel-vector NMEB per entry into `dir`.
pub fn export_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if report.entries.is_empty() || report.aggregates.is_empty() {
        return Err(Error::InvalidArgument("refusing to export an empty report".into()));
    }
    let parcels = dir.join("parcels");
    fs::create_dir_all(&parcels).map_err(|e| Error::io(&parcels, e))?;
    for s in &report.scores {
        let stem = format!(
            "{}__{}__{}",
            s.meta.subject_id, s.meta.source_id, s.meta.model_tag
        );
        let bytes = s.to_bold_vector()?.to_bytes()?;
        codec::write_atomic(&parcels.join(format!("{stem}.nmeb")), &bytes)?;
        let undefined = s.undefined_parcels();
        let mask_path = parcels.join(format!("{stem}.undefined"));
        if !undefined.is_empty() {
            let text: String = undefined.iter().map(|i| format!("{i}\n")).collect();
            codec::write_atomic(&mask_path, text.as_bytes())?;
        }
    }
    codec::write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())
}
