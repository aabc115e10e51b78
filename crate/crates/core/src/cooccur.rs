//! Windowed co-occurrence counts.
//!
//! Two occurrences at positions `t` and `s` of one sequence co-occur when
//! `0 < |t - s| <= q` and the earlier of the two is at most `T - q` (1-based).
//! Pairs are ordered, so every qualifying `(t, s)` contributes to both
//! `C[w_t, w_s]` and `C[w_s, w_t]`, and a length-`T` sequence has total mass
//! exactly `2q(T - q)`.
//!
//! Counts are stored as triplets sorted by `(w, w')`. Both triangles are
//! kept, which makes row access and merging a plain linear scan.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{KnitError, Result};
use crate::simgen::{Cohort, CodeSequence};

/// One non-zero count `C[w, w_prime]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub w: u32,
    pub w_prime: u32,
    pub count: u64,
}

/// Co-occurrence counts of a single patient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientCooccurrence {
    pub d: usize,
    pub q: usize,
    pub length: usize,
    triplets: Vec<Triplet>,
}

impl PatientCooccurrence {
    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn total(&self) -> u64 {
        self.triplets.iter().map(|t| t.count).sum()
    }

    pub fn count(&self, w: usize, w_prime: usize) -> u64 {
        lookup(&self.triplets, w, w_prime)
    }

    /// Row sums `C⁽ⁱ⁾_w`.
    pub fn marginals(&self) -> Vec<u64> {
        marginals_of(self.d, &self.triplets)
    }

    /// Inverse of [`to_summary`](Self::to_summary); fails unless `n = 1`.
    pub fn from_summary(summary: &CooccurrenceSummary) -> Result<Self> {
        match summary.lengths() {
            &[length] => Ok(Self {
                d: summary.d(),
                q: summary.q(),
                length,
                triplets: summary.triplets().to_vec(),
            }),
            other => Err(KnitError::invalid(format!(
                "a per-patient summary must hold one patient, found {}",
                other.len()
            ))),
        }
    }

    /// View as a one-patient summary.
    pub fn to_summary(&self) -> CooccurrenceSummary {
        CooccurrenceSummary::from_parts_unchecked(self.d, self.q, vec![self.length], self.triplets.clone())
    }
}

fn lookup(triplets: &[Triplet], w: usize, w_prime: usize) -> u64 {
    let key = (w as u32, w_prime as u32);
    triplets
        .binary_search_by(|t| (t.w, t.w_prime).cmp(&key))
        .map(|i| triplets[i].count)
        .unwrap_or(0)
}

fn marginals_of(d: usize, triplets: &[Triplet]) -> Vec<u64> {
    let mut m = vec![0u64; d];
    for t in triplets {
        m[t.w as usize] += t.count;
    }
    m
}

fn check_window(len: usize, q: usize) -> Result<()> {
    if q == 0 {
        return Err(KnitError::invalid("window q must be at least 1"));
    }
    if len <= 2 * q {
        return Err(KnitError::invalid(format!(
            "sequence length {len} must exceed 2q = {}",
            2 * q
        )));
    }
    Ok(())
}

fn check_codes(seq: &CodeSequence, d: usize) -> Result<()> {
    match seq.codes().iter().find(|&&c| c as usize >= d) {
        Some(bad) => Err(KnitError::invalid(format!("code {bad} outside vocabulary of size {d}"))),
        None => Ok(()),
    }
}

/// Sliding-window counts for one sequence, `O(T q)`.
pub fn accumulate_patient(seq: &CodeSequence, d: usize, q: usize) -> Result<PatientCooccurrence> {
    let codes = seq.codes();
    check_window(codes.len(), q)?;
    check_codes(seq, d)?;
    let len = codes.len();
    let d64 = d as u64;
    let mut keys = Vec::with_capacity(2 * q * (len - q));
    for t in 0..len - q {
        let a = codes[t] as u64;
        for &b in &codes[t + 1..=t + q] {
            let b = b as u64;
            keys.push(a * d64 + b);
            keys.push(b * d64 + a);
        }
    }
    keys.sort_unstable();
    let mut triplets = Vec::new();
    for chunk in keys.chunk_by(|x, y| x == y) {
        let key = chunk[0];
        triplets.push(Triplet {
            w: (key / d64) as u32,
            w_prime: (key % d64) as u32,
            count: chunk.len() as u64,
        });
    }
    Ok(PatientCooccurrence { d, q, length: len, triplets })
}

/// Literal `O(T²)` enumeration of every qualifying `(t, s)` pair.
pub fn naive_count_oracle(seq: &CodeSequence, d: usize, q: usize) -> Result<PatientCooccurrence> {
    let codes = seq.codes();
    check_window(codes.len(), q)?;
    check_codes(seq, d)?;
    let len = codes.len();
    let mut dense = vec![0u64; d * d];
    for t in 1..=len {
        for s in 1..=len {
            let gap = t.abs_diff(s);
            if gap > 0 && gap <= q && t.min(s) <= len - q {
                dense[codes[t - 1] as usize * d + codes[s - 1] as usize] += 1;
            }
        }
    }
    let triplets = dense
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, &c)| Triplet { w: (k / d) as u32, w_prime: (k % d) as u32, count: c })
        .collect();
    Ok(PatientCooccurrence { d, q, length: len, triplets })
}

/// Cohort-level counts `C = Σᵢ C⁽ⁱ⁾` with the per-patient lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceSummary {
    d: usize,
    q: usize,
    lengths: Vec<usize>,
    triplets: Vec<Triplet>,
    marginals: Vec<u64>,
    total: u64,
}

impl CooccurrenceSummary {
    fn from_parts_unchecked(d: usize, q: usize, lengths: Vec<usize>, triplets: Vec<Triplet>) -> Self {
        let marginals = marginals_of(d, &triplets);
        let total = marginals.iter().sum();
        Self { d, q, lengths, triplets, marginals, total }
    }

    /// Build from raw triplets (any order, no duplicates). Validates range,
    /// symmetry and the window mass identity.
    pub fn from_triplets(d: usize, q: usize, lengths: Vec<usize>, mut triplets: Vec<Triplet>) -> Result<Self> {
        if d < 1 {
            return Err(KnitError::invalid("vocabulary must be non-empty"));
        }
        if lengths.is_empty() {
            return Err(KnitError::invalid("summary must describe at least one patient"));
        }
        for &len in &lengths {
            check_window(len, q)?;
        }
        triplets.retain(|t| t.count > 0);
        triplets.sort_unstable();
        for pair in triplets.windows(2) {
            if (pair[0].w, pair[0].w_prime) == (pair[1].w, pair[1].w_prime) {
                return Err(KnitError::format(format!(
                    "duplicate entry ({}, {})",
                    pair[0].w, pair[0].w_prime
                )));
            }
        }
        for t in &triplets {
            if t.w as usize >= d || t.w_prime as usize >= d {
                return Err(KnitError::format(format!(
                    "entry ({}, {}) outside vocabulary of size {d}",
                    t.w, t.w_prime
                )));
            }
            if lookup(&triplets, t.w_prime as usize, t.w as usize) != t.count {
                return Err(KnitError::format(format!(
                    "counts are not symmetric at ({}, {})",
                    t.w, t.w_prime
                )));
            }
        }
        let summary = Self::from_parts_unchecked(d, q, lengths, triplets);
        let expected = expected_total(q, &summary.lengths)?;
        if summary.total != expected {
            return Err(KnitError::format(format!(
                "total count {} does not equal Σ 2q(T_i - q) = {expected}",
                summary.total
            )));
        }
        Ok(summary)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// `T̄ = Σ T_i / n`.
    pub fn mean_length(&self) -> f64 {
        self.lengths.iter().sum::<usize>() as f64 / self.n() as f64
    }

    pub fn uniform_lengths(&self) -> bool {
        self.lengths.windows(2).all(|w| w[0] == w[1])
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn marginals(&self) -> &[u64] {
        &self.marginals
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, w: usize, w_prime: usize) -> u64 {
        lookup(&self.triplets, w, w_prime)
    }

    /// Dense counts as floats.
    pub fn dense_counts(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.d, self.d));
        for t in &self.triplets {
            m[[t.w as usize, t.w_prime as usize]] = t.count as f64;
        }
        m
    }

    /// Entrywise sum with another summary; lengths are concatenated.
    pub fn combine(&self, other: &Self) -> Result<Self> {
        if self.d != other.d || self.q != other.q {
            return Err(KnitError::Dimension(format!(
                "cannot merge summaries with (d, q) = ({}, {}) and ({}, {})",
                self.d, self.q, other.d, other.q
            )));
        }
        let triplets = merge_sorted(&self.triplets, &other.triplets)?;
        let mut lengths = self.lengths.clone();
        lengths.extend_from_slice(&other.lengths);
        Ok(Self::from_parts_unchecked(self.d, self.q, lengths, triplets))
    }
}

fn expected_total(q: usize, lengths: &[usize]) -> Result<u64> {
    lengths.iter().try_fold(0u64, |acc, &len| {
        acc.checked_add(2 * q as u64 * (len - q) as u64)
            .ok_or_else(|| KnitError::numerical("total co-occurrence count overflows u64"))
    })
}

fn merge_sorted(a: &[Triplet], b: &[Triplet]) -> Result<Vec<Triplet>> {
    let mut out = Vec::with_capacity(a.len().max(b.len()));
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        let ka = (a[i].w, a[i].w_prime);
        let kb = (b[j].w, b[j].w_prime);
        match ka.cmp(&kb) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                let count = a[i]
                    .count
                    .checked_add(b[j].count)
                    .ok_or_else(|| KnitError::numerical(format!("count overflow at {ka:?}")))?;
                out.push(Triplet { count, ..a[i] });
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    Ok(out)
}

fn reduce(summaries: &[CooccurrenceSummary]) -> Result<CooccurrenceSummary> {
    match summaries.len() {
        1 => Ok(summaries[0].clone()),
        2 => summaries[0].combine(&summaries[1]),
        len => {
            let (left, right) = summaries.split_at(len / 2);
            let (l, r) = rayon::join(|| reduce(left), || reduce(right));
            l?.combine(&r?)
        }
    }
}

/// Pool patient counts into a cohort summary (parallel tree reduction).
pub fn merge(patients: &[PatientCooccurrence]) -> Result<CooccurrenceSummary> {
    let first = patients
        .first()
        .ok_or_else(|| KnitError::invalid("cannot merge an empty list of patients"))?;
    if let Some(bad) = patients.iter().find(|p| p.d != first.d || p.q != first.q) {
        return Err(KnitError::Dimension(format!(
            "patients disagree on (d, q): ({}, {}) vs ({}, {})",
            first.d, first.q, bad.d, bad.q
        )));
    }
    let singles: Vec<_> = patients.iter().map(PatientCooccurrence::to_summary).collect();
    reduce(&singles)
}

/// Counts for every patient of a cohort, in patient order.
pub fn accumulate_cohort(cohort: &Cohort, q: usize) -> Result<Vec<PatientCooccurrence>> {
    cohort
        .sequences
        .par_iter()
        .map(|s| accumulate_patient(s, cohort.d, q))
        .collect()
}

/// Largest vocabulary for which [`summarize`] accumulates into dense blocks.
const DENSE_LIMIT: usize = 2048;

/// Cohort summary of the first `n` patients (all when `n` is `None`).
///
/// Produces exactly what `merge(accumulate_cohort(..))` produces; small
/// vocabularies are counted straight into dense per-chunk tables.
pub fn summarize(cohort: &Cohort, q: usize, n: Option<usize>) -> Result<CooccurrenceSummary> {
    let n = n.unwrap_or(cohort.n());
    if n == 0 || n > cohort.n() {
        return Err(KnitError::invalid(format!(
            "cannot summarise {n} of {} patients",
            cohort.n()
        )));
    }
    let seqs = &cohort.sequences[..n];
    let d = cohort.d;
    if d > DENSE_LIMIT {
        let patients: Vec<_> = seqs
            .par_iter()
            .map(|s| accumulate_patient(s, d, q))
            .collect::<Result<_>>()?;
        return merge(&patients);
    }
    for s in seqs {
        check_window(s.len(), q)?;
        check_codes(s, d)?;
    }
    let chunk = n.div_ceil(rayon::current_num_threads().max(1)).max(1);
    let tables = seqs
        .par_chunks(chunk)
        .map(|part| {
            let mut dense = vec![0u64; d * d];
            for s in part {
                let codes = s.codes();
                for t in 0..codes.len() - q {
                    let a = codes[t] as usize;
                    for &b in &codes[t + 1..=t + q] {
                        let b = b as usize;
                        dense[a * d + b] += 1;
                        dense[b * d + a] += 1;
                    }
                }
            }
            dense
        })
        .collect::<Vec<_>>();
    let mut dense = vec![0u64; d * d];
    for table in tables {
        for (acc, x) in dense.iter_mut().zip(table) {
            *acc += x;
        }
    }
    let triplets = dense
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, &c)| Triplet { w: (k / d) as u32, w_prime: (k % d) as u32, count: c })
        .collect();
    Ok(CooccurrenceSummary::from_parts_unchecked(d, q, seqs.iter().map(CodeSequence::len).collect(), triplets))
}
