//! Time-series containers and their binary file formats.
//!
//! Feature series (`NMEF`) and BOLD series (`NMEB`) share a 64-byte
//! little-endian header followed by `T × D` (or `T × P`) row-major `f32`
//! values:
//!
//! ```text
//! offset  size  NMEF                         NMEB
//! 0       4     magic "NMEF"                 magic "NMEB"
//! 4       2     version u16 = 1              version u16 = 1
//! 6       1     modality u8 (0 v, 1 a, 2 t)  reserved u8 = 0
//! 7       1     reserved u8 = 0              reserved u8 = 0
//! 8       8     T u64                        T u64
//! 16      8     D u64                        P u64
//! 24      8     TR in microseconds u64       TR in microseconds u64
//! 32      32    source_id, NUL-padded        source_id (16) + subject_id (16)
//! 64      4·T·D payload                      payload
//! ```
//!
//! Values are held as `f64` in memory and narrowed to `f32` on write, so a
//! read-back is bit-exact whenever the in-memory values are representable
//! in single precision (always true for anything that came from a file).

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use faer::Mat;

use crate::codec::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"NMEF";
pub const BOLD_MAGIC: [u8; 4] = *b"NMEB";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 64;
pub const FEATURE_ID_WIDTH: usize = 32;
pub const BOLD_ID_WIDTH: usize = 16;

/// Sampling interval used by the reference recordings.
pub const DEFAULT_TR_SECONDS: f64 = 1.49;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Visual,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Audio, Modality::Text];

    pub fn code(self) -> u8 {
        match self {
            Modality::Visual => 0,
            Modality::Audio => 1,
            Modality::Text => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::Visual),
            1 => Ok(Modality::Audio),
            2 => Ok(Modality::Text),
            c => Err(Error::Format(format!("unknown modality code {c}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "visual" => Ok(Modality::Visual),
            "audio" => Ok(Modality::Audio),
            "text" => Ok(Modality::Text),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Sampling interval, stored in whole microseconds exactly as on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tr(u64);

impl Tr {
    pub fn from_seconds(seconds: f64) -> Result<Self> {
        if !seconds.is_finite() || seconds <= 0.0 {
            return Err(Error::InvalidArgument(format!("TR must be positive, got {seconds}")));
        }
        let micros = (seconds * 1e6).round();
        if micros < 1.0 || micros > u64::MAX as f64 {
            return Err(Error::InvalidArgument(format!(
                "TR {seconds} s is not representable in microseconds"
            )));
        }
        Ok(Tr(micros as u64))
    }

    pub fn from_micros(micros: u64) -> Result<Self> {
        if micros == 0 {
            return Err(Error::Format("TR must be positive".into()));
        }
        Ok(Tr(micros))
    }

    pub fn micros(self) -> u64 {
        self.0
    }

    pub fn seconds(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

impl Default for Tr {
    fn default() -> Self {
        Tr(1_490_000)
    }
}

fn check_id(what: &str, id: &str, width: usize, allow_empty: bool) -> Result<()> {
    if id.is_empty() && !allow_empty {
        return Err(Error::InvalidArgument(format!("{what} must be non-empty")));
    }
    if id.len() > width {
        return Err(Error::InvalidArgument(format!(
            "{what} {id:?} is {} bytes; the format allows at most {width}",
            id.len()
        )));
    }
    if id.contains('\0') {
        return Err(Error::InvalidArgument(format!("{what} must not contain NUL")));
    }
    Ok(())
}

fn check_shape(values: &Mat<f64>, what: &str) -> Result<()> {
    if values.nrows() == 0 || values.ncols() == 0 {
        return Err(Error::Shape(format!(
            "{what} must have at least one row and one column, got {}×{}",
            values.nrows(),
            values.ncols()
        )));
    }
    codec::check_finite(values)
}

/// One modality's features for one stimulus, one row per TR.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    modality: Modality,
    tr: Tr,
    source_id: String,
    values: Mat<f64>,
}

impl FeatureSeries {
    pub fn new(
        modality: Modality,
        tr: Tr,
        source_id: impl Into<String>,
        values: Mat<f64>,
    ) -> Result<Self> {
        let source_id = source_id.into();
        check_id("source_id", &source_id, FEATURE_ID_WIDTH, false)?;
        check_shape(&values, "feature series")?;
        Ok(Self {
            modality,
            tr,
            source_id,
            values,
        })
    }

    /// Convenience constructor from nested rows.
    pub fn from_rows(
        modality: Modality,
        tr: Tr,
        source_id: impl Into<String>,
        rows: &[Vec<f64>],
    ) -> Result<Self> {
        Self::new(modality, tr, source_id, mat_from_rows(rows)?)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn tr(&self) -> Tr {
        self.tr
    }

    pub fn tr_seconds(&self) -> f64 {
        self.tr.seconds()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn t_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Mat<f64> {
        &self.values
    }

    /// Same metadata, new values (e.g. after PCA reduction).
    pub fn with_values(&self, values: Mat<f64>) -> Result<Self> {
        Self::new(self.modality, self.tr, self.source_id.clone(), values)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_capacity(HEADER_LEN + 4 * self.values.nrows() * self.values.ncols());
        w.bytes(&FEATURE_MAGIC);
        w.u16(FORMAT_VERSION);
        w.u8(self.modality.code());
        w.u8(0);
        w.u64(self.t_samples() as u64);
        w.u64(self.dim() as u64);
        w.u64(self.tr.micros());
        w.padded(&self.source_id, FEATURE_ID_WIDTH);
        write_f32_payload(&mut w, &self.values)?;
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        read_magic(&mut r, FEATURE_MAGIC)?;
        let modality = Modality::from_code(r.u8()?)?;
        if r.u8()? != 0 {
            return Err(Error::Format("reserved header byte is not zero".into()));
        }
        let (t, d, tr) = read_dims(&mut r)?;
        let source_id = r.padded(FEATURE_ID_WIDTH)?;
        let values = read_f32_payload(&mut r, t, d)?;
        Self::new(modality, tr, source_id, values).map_err(into_format_error)
    }
}

/// Parcel-wise BOLD responses for one subject watching one stimulus.
#[derive(Debug, Clone, PartialEq)]
pub struct BoldSeries {
    tr: Tr,
    source_id: String,
    subject_id: String,
    values: Mat<f64>,
}

impl BoldSeries {
    /// `subject_id` may be empty (prediction files carry no subject).
    pub fn new(
        tr: Tr,
        source_id: impl Into<String>,
        subject_id: impl Into<String>,
        values: Mat<f64>,
    ) -> Result<Self> {
        let source_id = source_id.into();
        let subject_id = subject_id.into();
        check_id("source_id", &source_id, BOLD_ID_WIDTH, false)?;
        check_id("subject_id", &subject_id, BOLD_ID_WIDTH, true)?;
        check_shape(&values, "BOLD series")?;
        Ok(Self {
            tr,
            source_id,
            subject_id,
            values,
        })
    }

    pub fn from_rows(
        tr: Tr,
        source_id: impl Into<String>,
        subject_id: impl Into<String>,
        rows: &[Vec<f64>],
    ) -> Result<Self> {
        Self::new(tr, source_id, subject_id, mat_from_rows(rows)?)
    }

    pub fn tr(&self) -> Tr {
        self.tr
    }

    pub fn tr_seconds(&self) -> f64 {
        self.tr.seconds()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn t_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_parcels(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Mat<f64> {
        &self.values
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_capacity(HEADER_LEN + 4 * self.values.nrows() * self.values.ncols());
        w.bytes(&BOLD_MAGIC);
        w.u16(FORMAT_VERSION);
        w.u8(0);
        w.u8(0);
        w.u64(self.t_samples() as u64);
        w.u64(self.n_parcels() as u64);
        w.u64(self.tr.micros());
        w.padded(&self.source_id, BOLD_ID_WIDTH);
        w.padded(&self.subject_id, BOLD_ID_WIDTH);
        write_f32_payload(&mut w, &self.values)?;
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        read_magic(&mut r, BOLD_MAGIC)?;
        if r.u8()? != 0 || r.u8()? != 0 {
            return Err(Error::Format("reserved header bytes are not zero".into()));
        }
        let (t, p, tr) = read_dims(&mut r)?;
        let source_id = r.padded(BOLD_ID_WIDTH)?;
        let subject_id = r.padded(BOLD_ID_WIDTH)?;
        let values = read_f32_payload(&mut r, t, p)?;
        Self::new(tr, source_id, subject_id, values).map_err(into_format_error)
    }
}

fn into_format_error(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) | Error::Shape(m) => Error::Format(m),
        other => other,
    }
}

fn read_magic(r: &mut ByteReader<'_>, expected: [u8; 4]) -> Result<()> {
    let found: [u8; 4] = r.array()?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    Ok(())
}

fn read_dims(r: &mut ByteReader<'_>) -> Result<(u64, u64, Tr)> {
    let t = r.u64()?;
    let d = r.u64()?;
    let tr = Tr::from_micros(r.u64()?)?;
    Ok((t, d, tr))
}

fn write_f32_payload(w: &mut ByteWriter, values: &Mat<f64>) -> Result<()> {
    for i in 0..values.nrows() {
        for j in 0..values.ncols() {
            let v = values[(i, j)] as f32;
            if !v.is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
            w.f32(v);
        }
    }
    Ok(())
}

fn read_f32_payload(r: &mut ByteReader<'_>, rows: u64, cols: u64) -> Result<Mat<f64>> {
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("declared dims {rows}×{cols} overflow")))?;
    let found = r.remaining() as u64;
    if found != expected {
        return Err(Error::PayloadLength { expected, found });
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("empty series {rows}×{cols}")));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let raw = r.take(found as usize)?;
    let mut m = Mat::zeros(rows, cols);
    for (idx, c) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        let (i, j) = (idx / cols, idx % cols);
        if !v.is_finite() {
            return Err(Error::NonFinite { row: i, col: j });
        }
        m[(i, j)] = v as f64;
    }
    Ok(m)
}

pub fn write_feature_file(series: &FeatureSeries, path: impl AsRef<Path>) -> Result<()> {
    let bytes = series.to_bytes()?;
    codec::write_atomic(path.as_ref(), &bytes)
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSeries> {
    FeatureSeries::from_bytes(&codec::read_file(path.as_ref())?)
}

pub fn write_bold_file(series: &BoldSeries, path: impl AsRef<Path>) -> Result<()> {
    let bytes = series.to_bytes()?;
    codec::write_atomic(path.as_ref(), &bytes)
}

pub fn read_bold_file(path: impl AsRef<Path>) -> Result<BoldSeries> {
    BoldSeries::from_bytes(&codec::read_file(path.as_ref())?)
}

pub fn mat_from_rows(rows: &[Vec<f64>]) -> Result<Mat<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Shape("ragged rows".into()));
    }
    Ok(Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// All modalities (and optionally the BOLD response) for one stimulus.
#[derive(Debug, Clone)]
pub struct SourceData {
    features: Vec<FeatureSeries>,
    bold: Option<BoldSeries>,
}

impl SourceData {
    pub fn new(features: Vec<FeatureSeries>, bold: Option<BoldSeries>) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::Dataset("a source needs at least one feature series".into()))?;
        let id = first.source_id();
        let mut seen = BTreeSet::new();
        for f in &features {
            if f.source_id() != id {
                return Err(Error::Dataset(format!(
                    "mixed source ids {:?} and {:?} in one source",
                    id,
                    f.source_id()
                )));
            }
            if !seen.insert(f.modality()) {
                return Err(Error::Dataset(format!(
                    "duplicate {} series for source {id:?}",
                    f.modality()
                )));
            }
        }
        if let Some(b) = &bold {
            if b.source_id() != id {
                return Err(Error::Dataset(format!(
                    "BOLD source id {:?} does not match features {id:?}",
                    b.source_id()
                )));
            }
        }
        Ok(Self { features, bold })
    }

    pub fn source_id(&self) -> &str {
        self.features[0].source_id()
    }

    pub fn features(&self) -> &[FeatureSeries] {
        &self.features
    }

    pub fn feature(&self, modality: Modality) -> Option<&FeatureSeries> {
        self.features.iter().find(|f| f.modality() == modality)
    }

    pub fn bold(&self) -> Option<&BoldSeries> {
        self.bold.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Val,
    TestId,
    TestOod,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Train, Role::Val, Role::TestId, Role::TestOod];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::TestId => "test_id",
            Role::TestOod => "test_ood",
        }
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown split role {s:?}")))
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Train / validation / ID-test / OOD-test partition of source ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test_id: Vec<String>,
    pub test_ood: Vec<String>,
}

impl DatasetSplit {
    pub fn role(&self, role: Role) -> &[String] {
        match role {
            Role::Train => &self.train,
            Role::Val => &self.validation,
            Role::TestId => &self.test_id,
            Role::TestOod => &self.test_ood,
        }
    }

    fn role_mut(&mut self, role: Role) -> &mut Vec<String> {
        match role {
            Role::Train => &mut self.train,
            Role::Val => &mut self.validation,
            Role::TestId => &mut self.test_id,
            Role::TestOod => &mut self.test_ood,
        }
    }

    /// Checks that no source id appears twice anywhere in the split.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for role in Role::ALL {
            for id in self.role(role) {
                if id.is_empty() || id.contains(['\t', '\n', '\r']) {
                    return Err(Error::Dataset(format!("invalid source id {id:?}")));
                }
                if !seen.insert(id.as_str()) {
                    return Err(Error::Dataset(format!(
                        "source id {id:?} appears more than once in the split"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parses `role<TAB>source_id` lines. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut split = DatasetSplit::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (role, id) = line.split_once('\t').ok_or_else(|| {
                Error::Dataset(format!("manifest line {}: expected role<TAB>source_id", lineno + 1))
            })?;
            let role: Role = role.parse()?;
            split.role_mut(role).push(id.to_string());
        }
        split.validate()?;
        Ok(split)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for role in Role::ALL {
            for id in self.role(role) {
                out.push_str(role.as_str());
                out.push('\t');
                out.push_str(id);
                out.push('\n');
            }
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = codec::read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Dataset(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        codec::write_atomic(path.as_ref(), self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn visual_2x3() -> FeatureSeries {
        FeatureSeries::from_rows(
            Modality::Visual,
            Tr::default(),
            "s01e01a",
            &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]],
        )
        .unwrap()
    }

    #[test]
    fn feature_file_size_is_header_plus_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nmef");
        write_feature_file(&visual_2x3(), &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 64 + 24);
    }

    #[test]
    fn feature_header_layout() {
        let bytes = visual_2x3().to_bytes().unwrap();
        assert_eq!(&bytes[0..4], b"NMEF");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 0);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 1_490_000);
        assert_eq!(&bytes[32..39], b"s01e01a");
        assert!(bytes[39..64].iter().all(|&b| b == 0));
        assert_eq!(f32::from_le_bytes(bytes[64..68].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[84..88].try_into().unwrap()), 6.0);
    }

    #[test]
    fn feature_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nmef");
        let s = visual_2x3();
        write_feature_file(&s, &path).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.tr_seconds(), 1.49);
    }

    #[test]
    fn non_finite_value_is_rejected_without_creating_a_file() {
        let err = FeatureSeries::from_rows(Modality::Audio, Tr::default(), "x", &[vec![f64::NAN]]);
        assert!(matches!(err, Err(Error::NonFinite { row: 0, col: 0 })));

        // Finite in f64 but overflows f32 on the way to disk.
        let s = FeatureSeries::from_rows(Modality::Audio, Tr::default(), "x", &[vec![1e300]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.nmef");
        assert!(write_feature_file(&s, &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = visual_2x3().to_bytes().unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(FeatureSeries::from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = visual_2x3().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            FeatureSeries::from_bytes(&bytes),
            Err(Error::Version { found: 2, .. })
        ));
    }

    #[test]
    fn truncation_by_one_byte_is_rejected() {
        let bytes = visual_2x3().to_bytes().unwrap();
        let err = FeatureSeries::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::PayloadLength { expected: 24, found: 23 }));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = visual_2x3().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(
            FeatureSeries::from_bytes(&bytes),
            Err(Error::PayloadLength { .. })
        ));
    }

    #[test]
    fn bold_round_trip_and_header() {
        let b = BoldSeries::from_rows(
            Tr::default(),
            "chaplin",
            "sub-02",
            &[vec![0.5, -1.0], vec![2.0, 3.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let bytes = b.to_bytes().unwrap();
        assert_eq!(bytes.len(), 64 + 3 * 2 * 4);
        assert_eq!(&bytes[0..4], b"NMEB");
        assert_eq!(&bytes[32..39], b"chaplin");
        assert_eq!(&bytes[48..54], b"sub-02");
        assert_eq!(BoldSeries::from_bytes(&bytes).unwrap(), b);

        let mut bad = bytes.clone();
        bad[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(BoldSeries::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(BoldSeries::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        // An NMEF file is not an NMEB file.
        assert!(BoldSeries::from_bytes(&visual_2x3().to_bytes().unwrap()).is_err());
    }

    #[test]
    fn bold_ids_must_fit_sixteen_bytes() {
        let m = Mat::zeros(1, 1);
        assert!(BoldSeries::new(Tr::default(), "a".repeat(17), "s", m.clone()).is_err());
        assert!(BoldSeries::new(Tr::default(), "a".repeat(16), "s".repeat(16), m).is_ok());
    }

    #[test]
    fn source_data_rejects_duplicate_modalities() {
        let s = visual_2x3();
        assert!(SourceData::new(vec![s.clone(), s], None).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let text = "train\ta\ntrain\tb\nval\tc\ntest_id\td\ntest_ood\te\n";
        let split = DatasetSplit::parse(text).unwrap();
        assert_eq!(split.train, ["a", "b"]);
        assert_eq!(split.test_ood, ["e"]);
        assert_eq!(split.to_text(), text);
    }

    #[test]
    fn manifest_rejects_overlap_and_bad_roles() {
        assert!(DatasetSplit::parse("train\ta\ntest_ood\ta\n").is_err());
        assert!(DatasetSplit::parse("holdout\ta\n").is_err());
        assert!(DatasetSplit::parse("train a\n").is_err());
    }

    #[test]
    fn tr_micro_round_trip() {
        let tr = Tr::from_seconds(1.49).unwrap();
        assert_eq!(tr.micros(), 1_490_000);
        assert_eq!(tr.seconds(), 1.49);
        assert!(Tr::from_seconds(0.0).is_err());
        assert!(Tr::from_seconds(-1.0).is_err());
    }
}
