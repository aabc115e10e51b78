//! On-disk formats.
//!
//! Binary files start with an 8-byte magic and a little-endian `u32`
//! version. Every reader checks both and reports truncation as a format
//! error rather than an I/O error.
//!
//! | file | contents |
//! |------|----------|
//! | cohort (`KNITCOH\0`) | `d: u32`, `n: u64`, `q: u32`, then per patient a LEB128 length and LEB128 codes |
//! | summary (`KNITSUM\0`) | `d: u32`, `n: u64`, `q: u32`, FNV-1a digest of the lengths, `nnz: u64`, lengths as `u64`, triplets `(u32, u32, u64)` sorted by `(w, w')` |
//! | PMI (`KNITPMI\0`) | JSON metadata block, then named dense `f64` arrays |
//!
//! Text outputs are CSV with a header row; float columns use the shortest
//! representation that parses back to the same value.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::cooccur::{CooccurrenceSummary, Triplet};
use crate::error::{KnitError, Result};
use crate::inference::{EdgeTest, EdgeTestResult};
use crate::simgen::{Cohort, CodeSequence};
use crate::spectra::{PmiEstimate, PmiKind};

pub const COHORT_MAGIC: &[u8; 8] = b"KNITCOH\0";
pub const SUMMARY_MAGIC: &[u8; 8] = b"KNITSUM\0";
pub const PMI_MAGIC: &[u8; 8] = b"KNITPMI\0";
pub const FORMAT_VERSION: u32 = 1;

impl From<csv::Error> for KnitError {
    fn from(err: csv::Error) -> Self {
        if err.is_io_error() {
            match err.into_kind() {
                csv::ErrorKind::Io(e) => KnitError::Io(e),
                _ => unreachable!("checked to be an I/O error"),
            }
        } else {
            KnitError::Format(err.to_string())
        }
    }
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(truncation)?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn varint(&mut self) -> Result<u64> {
        let mut value = 0u64;
        for shift in (0..64).step_by(7) {
            let [byte] = self.bytes::<1>()?;
            value |= u64::from(byte & 0x7f) << shift;
            if byte & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(KnitError::format("varint longer than 64 bits"))
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        let found: [u8; 8] = self.bytes()?;
        if &found != magic {
            return Err(KnitError::format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&found),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(KnitError::Version { found: version, expected: FORMAT_VERSION });
        }
        Ok(())
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(KnitError::format("trailing bytes after payload")),
        }
    }
}

fn truncation(err: std::io::Error) -> KnitError {
    if err.kind() == ErrorKind::UnexpectedEof {
        KnitError::format("file is truncated")
    } else {
        KnitError::Io(err)
    }
}

fn write_varint(out: &mut impl Write, mut value: u64) -> Result<()> {
    loop {
        let byte = (value & 0x7f) as u8;
        value >>= 7;
        if value == 0 {
            out.write_all(&[byte])?;
            return Ok(());
        }
        out.write_all(&[byte | 0x80])?;
    }
}

fn open(path: &Path) -> Result<Reader<BufReader<File>>> {
    Ok(Reader { inner: BufReader::new(File::open(path)?) })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| KnitError::invalid(format!("{what} = {value} does not fit in 32 bits")))
}

// ---------------------------------------------------------------------------
// cohorts

pub fn write_cohort(path: &Path, cohort: &Cohort, q: usize) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(COHORT_MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&to_u32(cohort.d, "d")?.to_le_bytes())?;
    out.write_all(&(cohort.n() as u64).to_le_bytes())?;
    out.write_all(&to_u32(q, "q")?.to_le_bytes())?;
    for seq in &cohort.sequences {
        write_varint(&mut out, seq.len() as u64)?;
        for &c in seq.codes() {
            write_varint(&mut out, u64::from(c))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Returns the cohort and the window recorded with it.
pub fn read_cohort(path: &Path) -> Result<(Cohort, usize)> {
    let mut r = open(path)?;
    r.header(COHORT_MAGIC)?;
    let d = r.u32()? as usize;
    let n = r.u64()?;
    let q = r.u32()? as usize;
    let mut sequences = Vec::with_capacity(n.min(1 << 20) as usize);
    for _ in 0..n {
        let len = r.varint()?;
        let mut codes = Vec::with_capacity(len.min(1 << 24) as usize);
        for _ in 0..len {
            let c = r.varint()?;
            codes.push(u32::try_from(c).map_err(|_| KnitError::format(format!("code {c} out of range")))?);
        }
        sequences.push(CodeSequence::new(codes, d).map_err(|e| KnitError::format(e.to_string()))?);
    }
    r.expect_end()?;
    Ok((Cohort { d, sequences }, q))
}

// ---------------------------------------------------------------------------
// summaries

/// FNV-1a over the little-endian `u64` lengths.
pub fn lengths_digest(lengths: &[usize]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &len in lengths {
        for byte in (len as u64).to_le_bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

pub fn write_summary(path: &Path, summary: &CooccurrenceSummary) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(SUMMARY_MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&to_u32(summary.d(), "d")?.to_le_bytes())?;
    out.write_all(&(summary.n() as u64).to_le_bytes())?;
    out.write_all(&to_u32(summary.q(), "q")?.to_le_bytes())?;
    out.write_all(&lengths_digest(summary.lengths()).to_le_bytes())?;
    out.write_all(&(summary.triplets().len() as u64).to_le_bytes())?;
    for &len in summary.lengths() {
        out.write_all(&(len as u64).to_le_bytes())?;
    }
    for t in summary.triplets() {
        out.write_all(&t.w.to_le_bytes())?;
        out.write_all(&t.w_prime.to_le_bytes())?;
        out.write_all(&t.count.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<CooccurrenceSummary> {
    let mut r = open(path)?;
    r.header(SUMMARY_MAGIC)?;
    let d = r.u32()? as usize;
    let n = r.u64()?;
    let q = r.u32()? as usize;
    let digest = r.u64()?;
    let nnz = r.u64()?;
    let lengths = (0..n).map(|_| r.u64().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
    if lengths_digest(&lengths) != digest {
        return Err(KnitError::format("length digest mismatch"));
    }
    let mut triplets = Vec::with_capacity(nnz.min(1 << 24) as usize);
    for _ in 0..nnz {
        triplets.push(Triplet { w: r.u32()?, w_prime: r.u32()?, count: r.u64()? });
    }
    r.expect_end()?;
    if triplets.windows(2).any(|p| (p[0].w, p[0].w_prime) >= (p[1].w, p[1].w_prime)) {
        return Err(KnitError::format("summary triplets are not strictly sorted"));
    }
    CooccurrenceSummary::from_triplets(d, q, lengths, triplets)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummarySidecar {
    pub d: usize,
    pub n: usize,
    pub q: usize,
    pub lengths: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CountRow {
    w: u32,
    w_prime: u32,
    count: u64,
}

/// Path of the JSON file that accompanies a CSV output.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// `w,w_prime,count` rows plus a `<path>.json` sidecar.
pub fn write_summary_csv(path: &Path, summary: &CooccurrenceSummary) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for t in summary.triplets() {
        w.serialize(CountRow { w: t.w, w_prime: t.w_prime, count: t.count })?;
    }
    w.flush()?;
    let side = SummarySidecar {
        d: summary.d(),
        n: summary.n(),
        q: summary.q(),
        lengths: summary.lengths().to_vec(),
    };
    write_json(&sidecar_path(path), &side)
}

/// Reads rows in any order; the result is canonical (sorted).
pub fn read_summary_csv(path: &Path) -> Result<CooccurrenceSummary> {
    let side: SummarySidecar = read_json(&sidecar_path(path))?;
    if side.lengths.len() != side.n {
        return Err(KnitError::format(format!("sidecar lists {} lengths for n = {}", side.lengths.len(), side.n)));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let triplets = reader
        .deserialize::<CountRow>()
        .map(|row| row.map(|r| Triplet { w: r.w, w_prime: r.w_prime, count: r.count }).map_err(KnitError::from))
        .collect::<Result<Vec<_>>>()?;
    CooccurrenceSummary::from_triplets(side.d, side.q, side.lengths, triplets)
}

/// Summary in either format, chosen by extension (`.csv` or binary).
pub fn read_summary_any(path: &Path) -> Result<CooccurrenceSummary> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_summary_csv(path)
    } else {
        read_summary(path)
    }
}

// ---------------------------------------------------------------------------
// PMI container

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmiMetadata {
    pub d: usize,
    pub p: usize,
    pub q: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub t_mean: f64,
    pub eta: f64,
    #[serde(default)]
    pub eta0: Option<f64>,
}

/// A named dense array: shape plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn array2(a: &Array2<f64>) -> NamedArray {
    NamedArray { shape: a.shape().to_vec(), data: a.iter().copied().collect() }
}

fn take2(arrays: &mut BTreeMap<String, NamedArray>, name: &str) -> Result<Array2<f64>> {
    let a = arrays.remove(name).ok_or_else(|| KnitError::format(format!("missing array {name}")))?;
    match a.shape[..] {
        [r, c] => Array2::from_shape_vec((r, c), a.data).map_err(|e| KnitError::format(e.to_string())),
        _ => Err(KnitError::format(format!("array {name} is not two-dimensional"))),
    }
}

pub fn write_arrays(path: &Path, meta: &serde_json::Value, arrays: &BTreeMap<String, NamedArray>) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(PMI_MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(meta)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&to_u32(arrays.len(), "array count")?.to_le_bytes())?;
    for (name, a) in arrays {
        out.write_all(&to_u32(name.len(), "name length")?.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&to_u32(a.shape.len(), "rank")?.to_le_bytes())?;
        for &s in &a.shape {
            out.write_all(&(s as u64).to_le_bytes())?;
        }
        for &x in &a.data {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_arrays(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, NamedArray>)> {
    let mut r = open(path)?;
    r.header(PMI_MAGIC)?;
    let meta_len = r.u64()? as usize;
    let mut json = vec![0u8; meta_len.min(1 << 30)];
    r.inner.read_exact(&mut json).map_err(truncation)?;
    let meta = serde_json::from_slice(&json)?;
    let count = r.u32()?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let mut name = vec![0u8; name_len];
        r.inner.read_exact(&mut name).map_err(truncation)?;
        let name = String::from_utf8(name).map_err(|_| KnitError::format("array name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or_else(|| KnitError::format("array size overflows"))?;
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        arrays.insert(name, NamedArray { shape, data });
    }
    r.expect_end()?;
    Ok((meta, arrays))
}

/// Stores `pmi_tilde`, `u_hat`, `lambda_hat` and the convenience
/// `embedding = U |Λ|^{1/2}` (negative eigenvalues clipped).
pub fn write_pmi(path: &Path, meta: &PmiMetadata, estimate: &PmiEstimate) -> Result<()> {
    let (Some(values), Some(vectors), Some(embedding)) =
        (estimate.eigenvalues(), estimate.eigenvectors(), estimate.embedding())
    else {
        return Err(KnitError::invalid("only low-rank estimates can be stored"));
    };
    let mut arrays = BTreeMap::new();
    arrays.insert("pmi_tilde".to_string(), array2(&estimate.matrix));
    arrays.insert("u_hat".to_string(), array2(vectors));
    arrays.insert("lambda_hat".to_string(), NamedArray { shape: vec![values.len()], data: values.to_vec() });
    arrays.insert("embedding".to_string(), array2(&embedding));
    write_arrays(path, &serde_json::to_value(meta)?, &arrays)
}

pub fn read_pmi(path: &Path) -> Result<(PmiMetadata, PmiEstimate)> {
    let (meta, mut arrays) = read_arrays(path)?;
    let meta: PmiMetadata = serde_json::from_value(meta)?;
    let matrix = take2(&mut arrays, "pmi_tilde")?;
    let vectors = take2(&mut arrays, "u_hat")?;
    let values = arrays
        .remove("lambda_hat")
        .ok_or_else(|| KnitError::format("missing array lambda_hat"))?;
    if values.shape.len() != 1 || matrix.dim() != (meta.d, meta.d) || vectors.dim() != (meta.d, values.data.len()) {
        return Err(KnitError::format("PMI arrays disagree with the metadata"));
    }
    let estimate = PmiEstimate::from_stored(matrix, Array1::from(values.data), vectors, meta.eta);
    debug_assert_eq!(estimate.kind, PmiKind::LowRank);
    Ok((meta, estimate))
}

/// Any serialisable rows as CSV with a header.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// pair lists, variances and edges

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRow {
    pub w: usize,
    pub w_prime: usize,
}

pub fn read_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize::<PairRow>()
        .map(|r| r.map(|p| (p.w, p.w_prime)).map_err(KnitError::from))
        .collect()
}

pub fn write_pairs(path: &Path, pairs: &[(usize, usize)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for &(a, b) in pairs {
        w.serialize(PairRow { w: a, w_prime: b })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub w: usize,
    pub w_prime: usize,
    pub pmi_tilde: f64,
    pub variance: f64,
    pub clamped: bool,
}

pub fn write_variances(path: &Path, rows: &[VarianceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_variances(path: &Path) -> Result<Vec<VarianceRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(KnitError::from)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRow {
    w: usize,
    w_prime: usize,
    pmi_tilde: f64,
    variance: f64,
    z: f64,
    p_value: f64,
    selected: bool,
}

/// Edge table plus a `<path>.json` sidecar with the multiplicity
/// bookkeeping and `config`.
pub fn write_edges(path: &Path, result: &EdgeTestResult, config: &serde_json::Value) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for t in &result.tests {
        w.serialize(EdgeRow {
            w: t.w,
            w_prime: t.w_prime,
            pmi_tilde: t.statistic,
            variance: t.variance,
            z: t.z,
            p_value: t.p_value,
            selected: t.selected,
        })?;
    }
    w.flush()?;
    let side = serde_json::json!({
        "alpha": result.alpha,
        "control": result.control,
        "sidedness": result.sidedness,
        "J": result.j,
        "j_max": result.j_max,
        "threshold": result.threshold,
        "rank": result.rank,
        "eta0": result.eta0,
        "clamped": result.clamped,
        "excluded": result.excluded,
        "config": config,
    });
    write_json(&sidecar_path(path), &side)
}

pub fn read_edges(path: &Path) -> Result<Vec<EdgeTest>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize::<EdgeRow>()
        .map(|r| {
            r.map(|e| EdgeTest {
                w: e.w,
                w_prime: e.w_prime,
                statistic: e.pmi_tilde,
                variance: e.variance,
                z: e.z,
                p_value: e.p_value,
                selected: e.selected,
            })
            .map_err(KnitError::from)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cooccur::{accumulate_cohort, merge};
    use crate::inference::{knit, KnitOptions};
    use crate::simgen::sample_null_cohort;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn small_summary(seed: u64) -> (Cohort, CooccurrenceSummary) {
        let probs = [0.1, 0.2, 0.3, 0.4];
        let cohort = sample_null_cohort(&probs, 12, 25, seed).unwrap();
        let summary = merge(&accumulate_cohort(&cohort, 2).unwrap()).unwrap();
        (cohort, summary)
    }

    #[test]
    fn cohort_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let (cohort, _) = small_summary(1);
        write_cohort(&path, &cohort, 2).unwrap();
        let (back, q) = read_cohort(&path).unwrap();
        assert_eq!(back, cohort);
        assert_eq!(q, 2);
    }

    #[test]
    fn summary_round_trips_in_both_formats() {
        let dir = tempdir().unwrap();
        let (_, summary) = small_summary(2);
        let bin = dir.path().join("s.knc");
        write_summary(&bin, &summary).unwrap();
        assert_eq!(read_summary(&bin).unwrap(), summary);
        let csv = dir.path().join("s.csv");
        write_summary_csv(&csv, &summary).unwrap();
        assert_eq!(read_summary_any(&csv).unwrap(), summary);
    }

    #[test]
    fn csv_rows_are_canonicalised() {
        let dir = tempdir().unwrap();
        let (_, summary) = small_summary(3);
        let csv = dir.path().join("s.csv");
        write_summary_csv(&csv, &summary).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let header = lines.remove(0);
        lines.reverse();
        std::fs::write(&csv, format!("{header}\n{}\n", lines.join("\n"))).unwrap();
        assert_eq!(read_summary_csv(&csv).unwrap(), summary);
    }

    #[test]
    fn corrupt_files_give_typed_errors() {
        let dir = tempdir().unwrap();
        let (cohort, summary) = small_summary(4);
        let path = dir.path().join("s.knc");
        write_summary(&path, &summary).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        std::fs::write(&path, &wrong).unwrap();
        let err = read_summary(&path).unwrap_err();
        assert!(matches!(err, KnitError::Format(_)));
        assert_eq!(err.exit_code(), 2);

        let mut version = bytes.clone();
        version[8] = 9;
        std::fs::write(&path, &version).unwrap();
        assert!(matches!(read_summary(&path), Err(KnitError::Version { found: 9, expected: 1 })));

        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_summary(&path), Err(KnitError::Format(_))));

        let cpath = dir.path().join("c.bin");
        write_cohort(&cpath, &cohort, 2).unwrap();
        assert!(matches!(read_summary(&cpath), Err(KnitError::Format(_))));
        assert!(matches!(read_cohort(&dir.path().join("missing")), Err(KnitError::Io(_))));
    }

    #[test]
    fn pmi_and_edges_round_trip() {
        let dir = tempdir().unwrap();
        let (_, summary) = small_summary(5);
        let (pmi, result) = knit(&summary, &KnitOptions::with_rank(2)).unwrap();
        let meta = PmiMetadata { d: 4, p: 2, q: 2, n: 12, t_mean: 25.0, eta: 1e-6, eta0: None };
        let path = dir.path().join("pmi.bin");
        write_pmi(&path, &meta, &pmi).unwrap();
        let (meta_back, pmi_back) = read_pmi(&path).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(pmi_back, pmi);

        let edges = dir.path().join("edges.csv");
        write_edges(&edges, &result, &serde_json::json!({"rank": 2})).unwrap();
        assert_eq!(read_edges(&edges).unwrap(), result.tests);
        let side: serde_json::Value = read_json(&sidecar_path(&edges)).unwrap();
        assert_eq!(side["J"], result.j);
    }

    #[test]
    fn pairs_and_variances_round_trip() {
        let dir = tempdir().unwrap();
        let pairs = vec![(0, 1), (3, 2)];
        let p = dir.path().join("pairs.csv");
        write_pairs(&p, &pairs).unwrap();
        assert_eq!(read_pairs(&p).unwrap(), pairs);
        let rows = vec![VarianceRow { w: 0, w_prime: 1, pmi_tilde: -0.1 / 3.0, variance: 1.0 / 7.0, clamped: false }];
        let v = dir.path().join("var.csv");
        write_variances(&v, &rows).unwrap();
        assert_eq!(read_variances(&v).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn random_summaries_round_trip(seed in 0u64..500) {
            let dir = tempdir().unwrap();
            let (_, summary) = small_summary(seed);
            let path = dir.path().join("s.knc");
            write_summary(&path, &summary).unwrap();
            prop_assert_eq!(read_summary(&path).unwrap(), summary);
        }

        #[test]
        fn varints_round_trip(values in prop::collection::vec(any::<u64>(), 0..50)) {
            let mut buf = Vec::new();
            for &v in &values {
                write_varint(&mut buf, v).unwrap();
            }
            let mut r = Reader { inner: &buf[..] };
            for &v in &values {
                prop_assert_eq!(r.varint().unwrap(), v);
            }
        }
    }
}
