//! Embedding matrices and pair manifests on disk.
//!
//! Embeddings are stored as raw little-endian `f32`, row-major, in `<name>.f32`
//! with a plain-text sidecar `<name>.f32.meta`:
//!
//! ```text
//! count=1000
//! dim=128
//! normalized=false
//! checksum=sha256:<hex digest of the .f32 bytes>
//! ```
//!
//! Pair manifests are UTF-8, one `pair_id<TAB>query_ref<TAB>item_ref` record
//! per line. Row `i` of any embedding file corresponds to pair record `i`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Maximum deviation of a row norm from 1.0 for a set claimed to be normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// An N x d row-major matrix of `f32` embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    count: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingSet {
    /// Build a set from a flat row-major buffer. The result is not flagged as
    /// normalized; see [`normalize_rows`].
    pub fn new(count: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("embedding dim must be positive".into()));
        }
        let expected = count
            .checked_mul(dim)
            .ok_or_else(|| Error::Shape(format!("{count} x {dim} overflows")))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "buffer holds {} values, expected {count} x {dim} = {expected}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            count,
            dim,
            data,
            normalized: false,
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), dim, data)
    }

    /// Wrap rows that the caller guarantees are unit norm, verifying the claim.
    pub fn new_normalized(count: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        let mut set = Self::new(count, dim, data)?;
        set.check_unit_norm(UNIT_NORM_TOLERANCE)?;
        set.normalized = true;
        Ok(set)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    /// Gather the given rows, in order, into a new set. The normalized flag
    /// carries over.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.count {
                return Err(Error::Shape(format!(
                    "row index {i} out of range for {} rows",
                    self.count
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            count: indices.len(),
            dim: self.dim,
            data,
            normalized: self.normalized,
        })
    }

    /// Fail with a precondition error naming the first row whose norm is off
    /// by more than `tol`.
    pub fn check_unit_norm(&self, tol: f64) -> Result<()> {
        for (i, row) in self.rows().enumerate() {
            let norm = l2_norm(row);
            if (norm - 1.0).abs() > tol {
                return Err(Error::Precondition(format!(
                    "row {i} has norm {norm:.6}, expected 1 within {tol:e}"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn require_normalized(&self, what: &str) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "{what} must be normalized (call normalize_rows first)"
            )))
        }
    }

    /// Raw little-endian payload, exactly as written to the `.f32` file.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// `sha256:<hex>` over [`Self::to_bytes`].
    pub fn checksum(&self) -> String {
        sha256_tagged(&self.to_bytes())
    }

    pub fn meta_text(&self) -> String {
        format!(
            "count={}\ndim={}\nnormalized={}\nchecksum={}\n",
            self.count,
            self.dim,
            self.normalized,
            self.checksum()
        )
    }

    /// The `(path, contents)` pairs for the matrix file and its sidecar.
    pub fn file_contents(&self, path: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        vec![
            (path.to_path_buf(), self.to_bytes()),
            (meta_path(path), self.meta_text().into_bytes()),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_all_atomic(&self.file_contents(path))
    }
}

#[inline]
pub(crate) fn l2_norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Sidecar path for a data file: `emb.f32` -> `emb.f32.meta`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub(crate) fn sha256_tagged(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

/// Parsed `key=value` sidecar. Keys keep their first-seen line for error
/// messages.
#[derive(Debug, Default)]
pub(crate) struct Sidecar {
    path: PathBuf,
    values: HashMap<String, (usize, String)>,
}

impl Sidecar {
    pub(crate) fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::format(path, "missing metadata sidecar"),
            std::io::ErrorKind::InvalidData => Error::format(path, "sidecar is not UTF-8"),
            _ => Error::io(path, e),
        })?;
        Self::parse(path, &text)
    }

    pub(crate) fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut values = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, line_no, format!("expected key=value, got {line:?}")))?;
            if values
                .insert(key.to_string(), (line_no, value.to_string()))
                .is_some()
            {
                return Err(Error::parse(path, line_no, format!("duplicate key {key:?}")));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            values,
        })
    }

    pub(crate) fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(_, v)| v.as_str())
    }

    pub(crate) fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(&self.path, format!("missing key {key:?}")))
    }

    pub(crate) fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| {
            let line = self.values[key].0;
            Error::parse(&self.path, line, format!("invalid value {raw:?} for {key:?}"))
        })
    }
}

/// Load an embedding matrix and validate it against its sidecar.
///
/// When the sidecar claims `normalized=true`, every row must be within
/// [`UNIT_NORM_TOLERANCE`] of unit norm and the returned set is flagged as
/// normalized; otherwise the flag is false.
pub fn load_embeddings(path: &Path, expected_dim: Option<usize>) -> Result<EmbeddingSet> {
    let meta = Sidecar::read(&meta_path(path))?;
    let count: usize = meta.parsed("count")?;
    let dim: usize = meta.parsed("dim")?;
    let checksum = meta.require("checksum")?.to_string();
    let claims_normalized = match meta.get("normalized") {
        None => false,
        Some(_) => meta.parsed::<bool>("normalized")?,
    };
    if dim == 0 {
        return Err(Error::format(meta_path(path), "dim must be positive"));
    }

    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let declared = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Shape(format!("{count} x {dim} overflows")))?;
    if bytes.len() != declared {
        let physical_rows = bytes.len() as f64 / (dim as f64 * 4.0);
        return Err(Error::Shape(format!(
            "{} declares {count} rows x {dim} dims ({declared} bytes) but holds {} bytes ({physical_rows} rows)",
            path.display(),
            bytes.len()
        )));
    }
    let actual = sha256_tagged(&bytes);
    if actual != checksum {
        return Err(Error::format(
            path,
            format!("checksum mismatch: sidecar says {checksum}, data hashes to {actual}"),
        ));
    }
    if let Some(want) = expected_dim {
        if want != dim {
            return Err(Error::Shape(format!(
                "{} has dim {dim}, expected {want}",
                path.display()
            )));
        }
    }

    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut set = EmbeddingSet::new(count, dim, data)
        .map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })?;
    if claims_normalized {
        set.check_unit_norm(UNIT_NORM_TOLERANCE).map_err(|e| {
            Error::Data(format!("{}: claims normalized but {e}", path.display()))
        })?;
        set.normalized = true;
    }
    Ok(set)
}

/// Divide every row by its Euclidean norm.
///
/// Norms are accumulated in `f64`. A zero row is an error naming the row.
pub fn normalize_rows(e: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut data = Vec::with_capacity(e.data.len());
    for (i, row) in e.rows().enumerate() {
        let norm = l2_norm(row);
        if norm == 0.0 {
            return Err(Error::ZeroNormRow { row: i });
        }
        data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    Ok(EmbeddingSet {
        count: e.count,
        dim: e.dim,
        data,
        normalized: true,
    })
}

/// One query-item pair. Refs are opaque to this crate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub query_ref: String,
    pub item_ref: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairDataset {
    pairs: Vec<PairRecord>,
}

impl PairDataset {
    /// Build from records, rejecting duplicate ids and fields that cannot be
    /// written back as a single tab-separated line.
    pub fn new(pairs: Vec<PairRecord>) -> Result<Self> {
        let mut seen: HashMap<&str, usize> = HashMap::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            for field in [&p.pair_id, &p.query_ref, &p.item_ref] {
                if field.contains(['\t', '\n', '\r']) {
                    return Err(Error::Data(format!(
                        "record {} has a field containing a tab or newline",
                        i + 1
                    )));
                }
            }
            if p.pair_id.is_empty() {
                return Err(Error::Data(format!("record {} has an empty pair_id", i + 1)));
            }
            if let Some(first) = seen.insert(p.pair_id.as_str(), i + 1) {
                return Err(Error::Uniqueness {
                    pair_id: p.pair_id.clone(),
                    line: i + 1,
                    first_line: first,
                });
            }
        }
        Ok(Self { pairs })
    }

    pub fn count(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[PairRecord] {
        &self.pairs
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&p.pair_id);
            out.push('\t');
            out.push_str(&p.query_ref);
            out.push('\t');
            out.push_str(&p.item_ref);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    /// Hard error unless `e` has exactly one row per pair.
    pub fn check_aligned(&self, e: &EmbeddingSet, what: &str) -> Result<()> {
        if e.count() != self.count() {
            return Err(Error::Shape(format!(
                "{what} has {} rows but the pair dataset has {} records",
                e.count(),
                self.count()
            )));
        }
        Ok(())
    }
}

/// Load a tab-separated pair manifest, preserving file order.
pub fn load_pairs(path: &Path) -> Result<PairDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| {
        let line = e.as_bytes()[..e.utf8_error().valid_up_to()]
            .iter()
            .filter(|&&b| b == b'\n')
            .count()
            + 1;
        Error::parse(path, line, "invalid UTF-8")
    })?;
    parse_pairs(path, &text)
}

pub(crate) fn parse_pairs(path: &Path, text: &str) -> Result<PairDataset> {
    let mut pairs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        if fields[0].is_empty() {
            return Err(Error::parse(path, line_no, "empty pair_id"));
        }
        if let Some(&first_line) = seen.get(fields[0]) {
            return Err(Error::Uniqueness {
                pair_id: fields[0].to_string(),
                line: line_no,
                first_line,
            });
        }
        seen.insert(fields[0].to_string(), line_no);
        pairs.push(PairRecord {
            pair_id: fields[0].to_string(),
            query_ref: fields[1].to_string(),
            item_ref: fields[2].to_string(),
        });
    }
    Ok(PairDataset { pairs })
}

/// Write `bytes` to a temporary sibling of `path`, then rename over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_all_atomic(&[(path.to_path_buf(), bytes.to_vec())])
}

/// Stage every file as a temporary sibling first and rename only once all of
/// them are on disk, so a failure leaves none of the targets touched.
pub fn write_all_atomic(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    let mut staged: Vec<(PathBuf, &Path)> = Vec::with_capacity(files.len());
    let cleanup = |staged: &[(PathBuf, &Path)]| {
        for (tmp, _) in staged {
            let _ = fs::remove_file(tmp);
        }
    };
    for (path, bytes) in files {
        let tmp = temp_sibling(path);
        let res = fs::File::create(&tmp).and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        });
        if let Err(e) = res {
            let _ = fs::remove_file(&tmp);
            cleanup(&staged);
            return Err(Error::io(path, e));
        }
        staged.push((tmp, path.as_path()));
    }
    for (i, (tmp, path)) in staged.iter().enumerate() {
        if let Err(e) = fs::rename(tmp, path) {
            cleanup(&staged[i..]);
            return Err(Error::io(*path, e));
        }
    }
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn two_by_three_identity_rows_load() {
        let dir = tmpdir();
        let path = dir.path().join("e.f32");
        let e = EmbeddingSet::from_rows(&[[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        e.save(&path).unwrap();
        let back = load_embeddings(&path, Some(3)).unwrap();
        assert_eq!(back.count(), 2);
        assert_eq!(back.dim(), 3);
        assert!(!back.is_normalized());
        assert_eq!(back.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn declared_rows_exceeding_data_is_shape_error() {
        let dir = tmpdir();
        let path = dir.path().join("e.f32");
        let e = EmbeddingSet::new(3, 2, vec![0.5; 6]).unwrap();
        e.save(&path).unwrap();
        let meta = meta_path(&path);
        let text = fs::read_to_string(&meta).unwrap().replace("count=3", "count=4");
        fs::write(&meta, text).unwrap();
        assert!(matches!(load_embeddings(&path, None), Err(Error::Shape(_))));
    }

    #[test]
    fn missing_or_corrupt_sidecar_is_format_error() {
        let dir = tmpdir();
        let path = dir.path().join("e.f32");
        fs::write(&path, [0u8; 8]).unwrap();
        assert!(matches!(load_embeddings(&path, None), Err(Error::Format { .. })));

        let e = EmbeddingSet::new(1, 2, vec![0.25, 0.5]).unwrap();
        e.save(&path).unwrap();
        fs::write(&path, 1.0f32.to_le_bytes().repeat(2)).unwrap();
        assert!(matches!(load_embeddings(&path, None), Err(Error::Format { .. })));

        fs::write(meta_path(&path), "count=1\ndim\n").unwrap();
        assert!(matches!(load_embeddings(&path, None), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let dir = tmpdir();
        let path = dir.path().join("e.f32");
        EmbeddingSet::new(1, 2, vec![0.25, 0.5]).unwrap().save(&path).unwrap();
        assert!(matches!(load_embeddings(&path, Some(3)), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_values_are_data_errors() {
        assert!(matches!(
            EmbeddingSet::new(1, 2, vec![1.0, f32::NAN]),
            Err(Error::Data(_))
        ));
        let dir = tmpdir();
        let path = dir.path().join("e.f32");
        let bytes: Vec<u8> = [1.0f32, f32::INFINITY]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        fs::write(&path, &bytes).unwrap();
        fs::write(
            meta_path(&path),
            format!("count=1\ndim=2\nchecksum={}\n", sha256_tagged(&bytes)),
        )
        .unwrap();
        assert!(matches!(load_embeddings(&path, None), Err(Error::Data(_))));
    }

    #[test]
    fn claimed_normalization_is_checked() {
        let dir = tmpdir();
        let path = dir.path().join("e.f32");
        let e = normalize_rows(&EmbeddingSet::from_rows(&[[3.0f32, 4.0]]).unwrap()).unwrap();
        e.save(&path).unwrap();
        assert!(load_embeddings(&path, None).unwrap().is_normalized());

        let bytes: Vec<u8> = [3.0f32, 4.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&path, &bytes).unwrap();
        fs::write(
            meta_path(&path),
            format!("count=1\ndim=2\nnormalized=true\nchecksum={}\n", sha256_tagged(&bytes)),
        )
        .unwrap();
        assert!(matches!(load_embeddings(&path, None), Err(Error::Data(_))));
    }

    #[test]
    fn normalize_three_four_five() {
        let e = EmbeddingSet::from_rows(&[[3.0f32, 4.0], [0.0, 1.0]]).unwrap();
        let n = normalize_rows(&e).unwrap();
        assert!(n.is_normalized());
        assert!((n.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-7);
        assert_eq!(n.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn zero_row_names_its_index() {
        let e = EmbeddingSet::from_rows(&[[1.0f32, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(normalize_rows(&e), Err(Error::ZeroNormRow { row: 1 })));
    }

    #[test]
    fn pairs_parse_and_reject() {
        let p = Path::new("pairs.tsv");
        let ok = parse_pairs(p, "a\tq1\td1\nb\tq2\td2\nc\tq3\td3\n").unwrap();
        assert_eq!(ok.count(), 3);
        assert_eq!(ok.pairs()[2].item_ref, "d3");

        match parse_pairs(p, "a\tq1\td1\na\tq2\td2\n") {
            Err(Error::Uniqueness { line, first_line, .. }) => {
                assert_eq!((line, first_line), (2, 1));
            }
            other => panic!("expected uniqueness error, got {other:?}"),
        }
        assert!(matches!(
            parse_pairs(p, "a\tq1\td1\nb\tq2\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert_eq!(parse_pairs(p, "").unwrap().count(), 0);
    }

    #[test]
    fn pairs_round_trip_through_disk() {
        let dir = tmpdir();
        let path = dir.path().join("pairs.tsv");
        let text = "x\tquery one\titem one\ny\tq2\t\n";
        fs::write(&path, text).unwrap();
        let d = load_pairs(&path).unwrap();
        assert_eq!(d.count(), 2);
        let out = dir.path().join("pairs2.tsv");
        d.save(&out).unwrap();
        assert_eq!(fs::read_to_string(out).unwrap(), text);
    }

    #[test]
    fn select_gathers_rows_in_order() {
        let e = EmbeddingSet::from_rows(&[[1.0f32], [2.0], [3.0]]).unwrap();
        let s = e.select(&[2, 0]).unwrap();
        assert_eq!(s.as_slice(), &[3.0, 1.0]);
        assert!(e.select(&[3]).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tmpdir();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"hello").unwrap();
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from("out.txt")]);
    }
}
