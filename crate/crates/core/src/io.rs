//! Binary file formats and the metrics CSV.
//!
//! All integers and floats are little-endian. Every reader parses the whole
//! file and validates it before constructing a value, so a malformed file
//! never yields partial state.
//!
//! Checkpoint (`FFCK`, version 1):
//! ```text
//! magic "FFCK" | u16 version | u32 input_dim | u32 n_hidden | u32 hidden[n_hidden]
//! | u32 num_classes | u32 norm_tag (0 none, 1 group norm) | u32 groups (0 if none)
//! | u64 param_count | f64 values[param_count]
//! ```
//!
//! Logits table (`FFLT`, version 1):
//! ```text
//! magic "FFLT" | u16 version | u32 num_classes | u64 n_entries
//! | n_entries x (u64 example_id | f32 logits[num_classes])
//! | u32 source_len | source_len bytes of UTF-8
//! ```
//!
//! Dataset (`FFDS`, version 1):
//! ```text
//! magic "FFDS" | u16 version | u32 num_classes | u32 input_dim | u64 n_examples
//! | n_examples x (u64 example_id | u32 label | f64 features[input_dim])
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::data::Dataset;
use crate::nn::{ArchDescriptor, ModelParams, Norm};
use crate::teachers::LogitsTable;
use crate::{Error, FormatError, Matrix, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FFCK";
pub const LOGITS_MAGIC: [u8; 4] = *b"FFLT";
pub const DATASET_MAGIC: [u8; 4] = *b"FFDS";
pub const FORMAT_VERSION: u16 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        self.array().map(u64::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32, FormatError> {
        self.array().map(f32::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        self.array().map(f64::from_le_bytes)
    }

    fn header(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found = self.array::<4>()?;
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        match self.u16()? {
            FORMAT_VERSION => Ok(()),
            v => Err(FormatError::UnsupportedVersion(v)),
        }
    }

    /// Fails with `Truncated` unless `count * width` more bytes are present.
    fn require(&self, count: u64, width: u64) -> Result<(), FormatError> {
        let available = (self.bytes.len() - self.pos) as u64;
        match count.checked_mul(width) {
            Some(n) if n <= available => Ok(()),
            Some(n) => Err(FormatError::Truncated {
                offset: self.pos,
                needed: (n - available).try_into().unwrap_or(usize::MAX),
            }),
            None => Err(FormatError::Truncated {
                offset: self.pos,
                needed: usize::MAX,
            }),
        }
    }

    fn finish(&self) -> Result<(), FormatError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

fn dim(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value)
        .map_err(|_| Error::Validation(format!("{what} {value} does not fit the file format")))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let arch = params.arch();
    let mut out = Vec::with_capacity(40 + 8 * params.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(arch.input_dim, "input_dim")?.to_le_bytes());
    out.extend_from_slice(&dim(arch.hidden_dims.len(), "hidden layer count")?.to_le_bytes());
    for &h in &arch.hidden_dims {
        out.extend_from_slice(&dim(h, "hidden width")?.to_le_bytes());
    }
    out.extend_from_slice(&dim(arch.num_classes, "num_classes")?.to_le_bytes());
    let (tag, groups) = match arch.norm {
        Norm::None => (0u32, 0u32),
        Norm::GroupNorm { groups } => (1, dim(groups, "group count")?),
    };
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&groups.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes);
    r.header(CHECKPOINT_MAGIC)?;
    let input_dim = r.u32()? as usize;
    let n_hidden = r.u32()?;
    r.require(u64::from(n_hidden), 4)?;
    let hidden_dims = (0..n_hidden)
        .map(|_| r.u32().map(|h| h as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let num_classes = r.u32()? as usize;
    let norm = match (r.u32()?, r.u32()?) {
        (0, _) => Norm::None,
        (1, groups) => Norm::GroupNorm {
            groups: groups as usize,
        },
        (tag, _) => return Err(FormatError::InvalidField(format!("unknown norm tag {tag}")).into()),
    };
    let arch = ArchDescriptor::new(input_dim, hidden_dims, num_classes, norm)
        .map_err(|e| FormatError::InvalidField(e.to_string()))?;
    let declared = r.u64()?;
    let expected = arch.param_count() as u64;
    if declared != expected {
        return Err(FormatError::CountMismatch { declared, expected }.into());
    }
    r.require(declared, 8)?;
    let values = (0..declared).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    ModelParams::new(arch, values).map_err(|e| FormatError::InvalidField(e.to_string()).into())
}

pub fn write_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params)?)
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn encode_logits_table(table: &LogitsTable) -> Result<Vec<u8>> {
    let k = table.num_classes();
    let mut out = Vec::with_capacity(22 + table.len() * (8 + 4 * k) + table.source().len());
    out.extend_from_slice(&LOGITS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(k, "num_classes")?.to_le_bytes());
    out.extend_from_slice(&(table.len() as u64).to_le_bytes());
    for (id, logits) in table.iter() {
        out.extend_from_slice(&id.to_le_bytes());
        for v in logits {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let source = table.source().as_bytes();
    out.extend_from_slice(&dim(source.len(), "source description length")?.to_le_bytes());
    out.extend_from_slice(source);
    Ok(out)
}

pub fn decode_logits_table(bytes: &[u8]) -> Result<LogitsTable> {
    let mut r = Reader::new(bytes);
    r.header(LOGITS_MAGIC)?;
    let k = r.u32()? as usize;
    let n = r.u64()?;
    r.require(n, 8 + 4 * k as u64)?;
    let mut entries = BTreeMap::new();
    for _ in 0..n {
        let id = r.u64()?;
        let logits = (0..k).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
        if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
            return Err(FormatError::InvalidField(format!("example {id} has non-finite logit {v}")).into());
        }
        if entries.insert(id, logits).is_some() {
            return Err(FormatError::DuplicateId(id).into());
        }
    }
    let len = r.u32()? as usize;
    let source = std::str::from_utf8(r.take(len)?)
        .map_err(|e| FormatError::InvalidField(format!("source description is not UTF-8: {e}")))?
        .to_owned();
    r.finish()?;
    LogitsTable::new(k, entries, source).map_err(|e| FormatError::InvalidField(e.to_string()).into())
}

pub fn write_logits_table(table: &LogitsTable, path: &Path) -> Result<()> {
    write_atomic(path, &encode_logits_table(table)?)
}

pub fn read_logits_table(path: &Path) -> Result<LogitsTable> {
    decode_logits_table(&fs::read(path)?)
}

pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    let d = dataset.input_dim();
    let mut out = Vec::with_capacity(26 + dataset.len() * (12 + 8 * d));
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(dataset.num_classes(), "num_classes")?.to_le_bytes());
    out.extend_from_slice(&dim(d, "input_dim")?.to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    for i in 0..dataset.len() {
        out.extend_from_slice(&dataset.ids()[i].to_le_bytes());
        out.extend_from_slice(&dim(dataset.labels()[i], "label")?.to_le_bytes());
        for v in dataset.features().row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.header(DATASET_MAGIC)?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let n = r.u64()?;
    r.require(n, 12 + 8 * d as u64)?;
    let n = n as usize;
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * d);
    for _ in 0..n {
        ids.push(r.u64()?);
        labels.push(r.u32()? as usize);
        for _ in 0..d {
            features.push(r.f64()?);
        }
    }
    r.finish()?;
    Dataset::new(Matrix::from_vec(n, d, features)?, labels, k, ids)
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(dataset)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

pub const METRICS_HEADER: &str = "round,algorithm,seed,clients,accuracy,train_loss,lr,duration_ms";

/// One row of a metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub algorithm: String,
    pub seed: u64,
    /// Participating client ids.
    pub clients: Vec<usize>,
    pub accuracy: f64,
    pub train_loss: f64,
    pub lr: f64,
    pub duration_ms: u128,
}

impl MetricsRow {
    fn to_line(&self) -> String {
        let clients: Vec<String> = self.clients.iter().map(usize::to_string).collect();
        format!(
            "{},{},{},{},{:.6},{:.6},{:e},{}",
            self.round,
            self.algorithm,
            self.seed,
            clients.join(";"),
            self.accuracy,
            self.train_loss,
            self.lr,
            self.duration_ms
        )
    }
}

/// Appends one row, writing the header first if the file is new or empty.
pub fn append_metrics(row: &MetricsRow, path: &Path) -> Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut text = String::new();
    if file.metadata()?.len() == 0 {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    text.push_str(&row.to_line());
    text.push('\n');
    file.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as u64 + 1,
        column,
        message,
    };
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(parse_err(0, 1, format!("expected header `{METRICS_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(parse_err(i, f.len(), format!("expected 8 fields, found {}", f.len())));
        }
        fn num<T: std::str::FromStr>(s: &str) -> Option<T> {
            s.trim().parse().ok()
        }
        let bad = |col: usize| parse_err(i, col + 1, format!("cannot parse {:?}", f[col]));
        let clients = if f[3].is_empty() {
            Vec::new()
        } else {
            f[3].split(';').map(num).collect::<Option<Vec<usize>>>().ok_or_else(|| bad(3))?
        };
        rows.push(MetricsRow {
            round: num(f[0]).ok_or_else(|| bad(0))?,
            algorithm: f[1].to_owned(),
            seed: num(f[2]).ok_or_else(|| bad(2))?,
            clients,
            accuracy: num(f[4]).ok_or_else(|| bad(4))?,
            train_loss: num(f[5]).ok_or_else(|| bad(5))?,
            lr: num(f[6]).ok_or_else(|| bad(6))?,
            duration_ms: num(f[7]).ok_or_else(|| bad(7))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use proptest::prelude::*;

    fn sample_params() -> ModelParams {
        let arch = ArchDescriptor::new(3, vec![8, 4], 5, Norm::GroupNorm { groups: 4 }).unwrap();
        init_params(&arch, 17).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut p = sample_params();
        p.values_mut()[0] = -0.0;
        write_checkpoint(&p, &path).unwrap();
        assert!(read_checkpoint(&path).unwrap().bit_eq(&p));
    }

    #[test]
    fn checkpoint_rejections() {
        let bytes = encode_checkpoint(&sample_params()).unwrap();

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Format(FormatError::BadMagic { found, .. })) if &found == b"XXXX"
        ));

        let mut v2 = bytes.clone();
        v2[4..6].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&v2),
            Err(Error::Format(FormatError::UnsupportedVersion(2)))
        ));

        let cut = &bytes[..bytes.len() - 12];
        assert!(matches!(
            decode_checkpoint(cut),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));

        // header: magic 4 + version 2 + input 4 + n_hidden 4 + 2 widths 8 + classes 4 + norm 8
        let count_at = 4 + 2 + 4 + 4 + 8 + 4 + 8;
        let mut miscount = bytes.clone();
        miscount[count_at..count_at + 8].copy_from_slice(&7u64.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&miscount),
            Err(Error::Format(FormatError::CountMismatch { declared: 7, .. }))
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            decode_checkpoint(&trailing),
            Err(Error::Format(FormatError::TrailingBytes(1)))
        ));
    }

    fn table() -> LogitsTable {
        let mut entries = BTreeMap::new();
        entries.insert(7, vec![1.0f32, 2.0, f32::MIN_POSITIVE]);
        entries.insert(3, vec![-0.1f32, 0.3, 1e-7]);
        LogitsTable::new(3, entries, "unit test".into()).unwrap()
    }

    #[test]
    fn logits_roundtrip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fflt");
        let t = table();
        write_logits_table(&t, &path).unwrap();
        assert_eq!(read_logits_table(&path).unwrap(), t);

        let empty = LogitsTable::new(4, BTreeMap::new(), String::new()).unwrap();
        let back = decode_logits_table(&encode_logits_table(&empty).unwrap()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.num_classes(), 4);
    }

    #[test]
    fn logits_duplicate_id() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FFLT");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        for _ in 0..2 {
            bytes.extend_from_slice(&42u64.to_le_bytes());
            bytes.extend_from_slice(&1f32.to_le_bytes());
            bytes.extend_from_slice(&2f32.to_le_bytes());
        }
        bytes.extend_from_slice(&0u32.to_le_bytes());
        let err = decode_logits_table(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::DuplicateId(42))));
        assert!(err.to_string().contains("42"));
    }

    #[test]
    fn logits_truncated_and_trailing() {
        let bytes = encode_logits_table(&table()).unwrap();
        for cut in [3, 10, 30, bytes.len() - 1] {
            assert!(
                matches!(
                    decode_logits_table(&bytes[..cut]),
                    Err(Error::Format(FormatError::Truncated { .. } | FormatError::BadMagic { .. }))
                ),
                "cut at {cut}"
            );
        }
        let mut extra = bytes;
        extra.extend_from_slice(b"zz");
        assert!(matches!(
            decode_logits_table(&extra),
            Err(Error::Format(FormatError::TrailingBytes(2)))
        ));
    }

    #[test]
    fn dataset_binary_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ffds");
        let ds = crate::data::generate_synthetic(4, 5, 3, 2.0, 1).unwrap();
        write_dataset(&ds, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);
        let bytes = fs::read(&path).unwrap();
        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 1]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
    }

    fn row(round: usize, accuracy: f64) -> MetricsRow {
        MetricsRow {
            round,
            algorithm: "fedavg".into(),
            seed: 3,
            clients: vec![0, 1, 2],
            accuracy,
            train_loss: 0.5,
            lr: 0.01,
            duration_ms: 12,
        }
    }

    #[test]
    fn metrics_header_once_and_formatting() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        append_metrics(&row(1, 0.8229), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().contains(",0.822900,"));
        append_metrics(&row(2, 0.9), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("round,algorithm").count(), 1);
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].clients, vec![0, 1, 2]);
        assert_eq!(rows[1].accuracy, 0.9);
    }

    proptest! {
        #[test]
        fn checkpoint_roundtrip_any_values(
            values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::ZERO, 4 * 3 + 3),
        ) {
            let arch = ArchDescriptor::new(4, vec![], 3, Norm::None).unwrap();
            let p = ModelParams::new(arch, values).unwrap();
            let back = decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap();
            prop_assert!(back.bit_eq(&p));
            prop_assert_eq!(back.len(), p.arch().param_count());
        }
    }
}
