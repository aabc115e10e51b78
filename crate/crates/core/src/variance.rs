//! Entrywise variance of the low-rank PMI estimate.
//!
//! To first order the error of the rank-`p` estimate is `P W + W P`, where
//! `P` is the spectral projector and `W` the residual of the empirical PMI.
//! Its `(w, w')` entry therefore has variance
//!
//! ```text
//! P_w Σ_{w',w'} P_wᵀ + P_{w'} Σ_{w,w} P_{w'}ᵀ + 2 P_w Σ_{w',w} P_{w'}ᵀ
//! ```
//!
//! with `Σ_{a,b}` the cross-covariance of residual rows `a` and `b`
//! (entry `(k, l)` is `Cov(W_{a,k}, W_{b,l})`). Two providers of `Σ` exist:
//! per-patient residual rows ([`PatientResiduals`]) and the closed form under
//! the global null ([`NullCovarianceModel`]), which only needs the summary.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use crate::cooccur::{merge, CooccurrenceSummary, PatientCooccurrence};
use crate::error::{KnitError, Result};
use crate::spectra::Projector;

/// Negative variances down to this value are treated as round-off.
pub const CLAMP_TOLERANCE: f64 = 1e-9;

/// A variance together with whether it was clamped up from a small
/// negative value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryVariance {
    pub value: f64,
    pub clamped: bool,
}

pub fn clamp_variance(raw: f64) -> Result<EntryVariance> {
    if !raw.is_finite() {
        return Err(KnitError::numerical(format!("non-finite variance {raw}")));
    }
    if raw < -CLAMP_TOLERANCE {
        return Err(KnitError::numerical(format!(
            "variance {raw:e} is negative beyond tolerance; covariance blocks are inconsistent"
        )));
    }
    Ok(if raw < 0.0 {
        EntryVariance { value: 0.0, clamped: true }
    } else {
        EntryVariance { value: raw, clamped: false }
    })
}

/// Source of residual-row covariance blocks `Σ_{a,b}`.
pub trait RowCovariance: Sync {
    fn d(&self) -> usize;

    /// Dense `Σ_{a,b}`.
    fn block(&self, a: usize, b: usize) -> Result<Array2<f64>>;

    /// `x Σ_{a,b} yᵀ`. The default materialises one block.
    fn bilinear(&self, a: usize, b: usize, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
        Ok(x.dot(&self.block(a, b)?.dot(&y)))
    }
}

/// Variance of `PMI-tilde(w, w')` from any covariance provider.
pub fn var_lowrank_entry(
    projector: &Projector,
    cov: &dyn RowCovariance,
    w: usize,
    w_prime: usize,
) -> Result<EntryVariance> {
    let d = projector.d();
    if cov.d() != d {
        return Err(KnitError::Dimension(format!(
            "projector is {d} x {d} but covariance blocks are {0} x {0}",
            cov.d()
        )));
    }
    if w >= d || w_prime >= d {
        return Err(KnitError::invalid(format!("pair ({w}, {w_prime}) outside vocabulary of size {d}")));
    }
    let x = projector.row(w);
    let y = projector.row(w_prime);
    let raw = cov.bilinear(w_prime, w_prime, x.view(), x.view())?
        + cov.bilinear(w, w, y.view(), y.view())?
        + 2.0 * cov.bilinear(w_prime, w, x.view(), y.view())?;
    clamp_variance(raw)
}

// ---------------------------------------------------------------------------
// Patient-level path

/// Residual rows `Ŵ⁽ⁱ⁾_{w,·}` built from per-patient counts.
///
/// Where the pooled count `C_{w,k}` is zero the empirical PMI sits at its
/// floor and does not move with the data, so [`row`] sets that coordinate
/// of the residual to 0; [`checked_row`] reports it as an error instead.
///
/// [`row`]: PatientResiduals::row
/// [`checked_row`]: PatientResiduals::checked_row
#[derive(Debug, Clone)]
pub struct PatientResiduals {
    d: usize,
    patients: Vec<PatientCooccurrence>,
    patient_marginals: Vec<Vec<u64>>,
    summary: CooccurrenceSummary,
    pooled: Array2<f64>,
    tau: Vec<f64>,
}

impl PatientResiduals {
    pub fn new(patients: Vec<PatientCooccurrence>) -> Result<Self> {
        let summary = merge(&patients)?;
        if let Some(code) = summary.marginals().iter().position(|&c| c == 0) {
            return Err(KnitError::ZeroMarginal { code });
        }
        let q = summary.q() as f64;
        let tau = if summary.uniform_lengths() {
            vec![1.0; patients.len()]
        } else {
            let mean = summary.mean_length();
            patients.iter().map(|p| (p.length as f64 - q) / (mean - q)).collect()
        };
        let patient_marginals = patients.iter().map(PatientCooccurrence::marginals).collect();
        Ok(Self {
            d: summary.d(),
            pooled: summary.dense_counts(),
            patients,
            patient_marginals,
            summary,
            tau,
        })
    }

    pub fn n(&self) -> usize {
        self.patients.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn summary(&self) -> &CooccurrenceSummary {
        &self.summary
    }

    /// Trailing constant of patient `i`: 1 for equal lengths, otherwise
    /// `(T_i - q)/(T̄ - q)`.
    pub fn tau(&self, i: usize) -> f64 {
        self.tau[i]
    }

    fn fill_row(&self, i: usize, w: usize, out: &mut [f64], strict: bool) -> Result<()> {
        let n = self.n() as f64;
        let pooled_marg = self.summary.marginals();
        let own = &self.patient_marginals[i];
        let anchor = n * own[w] as f64 / pooled_marg[w] as f64;
        let tau = self.tau[i];
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = tau - anchor - n * own[k] as f64 / pooled_marg[k] as f64;
        }
        if strict {
            if let Some(k) = self.pooled.row(w).iter().position(|&c| c == 0.0) {
                return Err(KnitError::ZeroCount { w, w_prime: k });
            }
        }
        for (slot, &c) in out.iter_mut().zip(self.pooled.row(w)) {
            if c == 0.0 {
                *slot = 0.0;
            }
        }
        let trip = self.patients[i].triplets();
        let start = trip.partition_point(|t| (t.w as usize) < w);
        for t in trip[start..].iter().take_while(|t| t.w as usize == w) {
            let k = t.w_prime as usize;
            out[k] += n * t.count as f64 / self.pooled[[w, k]];
        }
        Ok(())
    }

    /// `Ŵ⁽ⁱ⁾_{w,·}` with the zero-count convention.
    pub fn row(&self, i: usize, w: usize) -> Array1<f64> {
        let mut out = vec![0.0; self.d];
        self.fill_row(i, w, &mut out, false).expect("lenient row cannot fail");
        Array1::from(out)
    }

    /// `Ŵ⁽ⁱ⁾_{w,·}`, failing if any pooled count in row `w` is zero.
    pub fn checked_row(&self, i: usize, w: usize) -> Result<Array1<f64>> {
        let mut out = vec![0.0; self.d];
        self.fill_row(i, w, &mut out, true)?;
        Ok(Array1::from(out))
    }

    fn require_pairs(&self) -> Result<f64> {
        let n = self.n();
        if n < 2 {
            return Err(KnitError::invalid("patient-level covariance needs at least two patients"));
        }
        Ok((n * (n - 1)) as f64)
    }
}

/// `Σ̂_{w,w'} = (1/(n(n-1))) Σᵢ Ŵ⁽ⁱ⁾_{w,·}ᵀ Ŵ⁽ⁱ⁾_{w',·}`.
pub fn cov_rows_patient(res: &PatientResiduals, w: usize, w_prime: usize) -> Result<Array2<f64>> {
    let norm = res.require_pairs()?;
    let d = res.d;
    let mut out = Array2::zeros((d, d));
    for i in 0..res.n() {
        let a = res.row(i, w);
        let b = res.row(i, w_prime);
        out += &(a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0))));
    }
    Ok(out / norm)
}

impl RowCovariance for PatientResiduals {
    fn d(&self) -> usize {
        self.d
    }

    fn block(&self, a: usize, b: usize) -> Result<Array2<f64>> {
        cov_rows_patient(self, a, b)
    }

    fn bilinear(&self, a: usize, b: usize, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
        let norm = self.require_pairs()?;
        let mut ra = vec![0.0; self.d];
        let mut rb = vec![0.0; self.d];
        let mut acc = 0.0;
        for i in 0..self.n() {
            self.fill_row(i, a, &mut ra, false)?;
            self.fill_row(i, b, &mut rb, false)?;
            let xa: f64 = x.iter().zip(&ra).map(|(u, v)| u * v).sum();
            let yb: f64 = y.iter().zip(&rb).map(|(u, v)| u * v).sum();
            acc += xa * yb;
        }
        Ok(acc / norm)
    }
}

/// All-pairs evaluator for the patient path.
///
/// Stores `G_w = R_w U` (`n x p`) for every code, where `R_w` stacks the
/// patients' residual rows for `w`; then `P_w · Ŵ⁽ⁱ⁾_{w',·}` is the inner
/// product of `U_w` with row `i` of `G_{w'}`, and each pair costs `O(n p)`.
#[derive(Debug, Clone)]
pub struct PatientVariance {
    basis: Array2<f64>,
    projected: Vec<Array2<f64>>,
    norm: f64,
}

impl PatientVariance {
    pub fn new(res: &PatientResiduals, projector: &Projector) -> Result<Self> {
        let norm = res.require_pairs()?;
        if projector.d() != res.d() {
            return Err(KnitError::Dimension(format!(
                "projector dimension {} does not match vocabulary size {}",
                projector.d(),
                res.d()
            )));
        }
        let basis = projector.basis().clone();
        let projected = (0..res.d())
            .into_par_iter()
            .map(|w| {
                let mut g = Array2::zeros((res.n(), basis.ncols()));
                let mut row = vec![0.0; res.d()];
                for i in 0..res.n() {
                    res.fill_row(i, w, &mut row, false)?;
                    g.row_mut(i).assign(&ArrayView1::from(&row[..]).dot(&basis));
                }
                Ok(g)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { basis, projected, norm })
    }

    pub fn var(&self, w: usize, w_prime: usize) -> Result<EntryVariance> {
        let a = self.projected[w_prime].dot(&self.basis.row(w));
        let b = self.projected[w].dot(&self.basis.row(w_prime));
        let raw = a.iter().zip(&b).map(|(x, y)| (x + y) * (x + y)).sum::<f64>() / self.norm;
        clamp_variance(raw)
    }
}

impl PatientResiduals {
    /// `Var(PMI-hat(w, w')) ≈ Σ̂_{w,w}(w', w') = Σᵢ (Ŵ⁽ⁱ⁾_{w,w'})² / (n(n-1))`.
    pub fn var_empirical_entry(&self, w: usize, w_prime: usize) -> Result<f64> {
        let norm = self.require_pairs()?;
        let mut row = vec![0.0; self.d];
        let mut acc = 0.0;
        for i in 0..self.n() {
            self.fill_row(i, w, &mut row, false)?;
            acc += row[w_prime] * row[w_prime];
        }
        Ok(acc / norm)
    }

    /// [`var_empirical_entry`](Self::var_empirical_entry) for every pair
    /// `(w, w')` at once, as a dense symmetric matrix.
    pub fn var_empirical_all(&self) -> Result<Array2<f64>> {
        let norm = self.require_pairs()?;
        let d = self.d;
        let rows = (0..d)
            .into_par_iter()
            .map(|w| {
                let mut row = vec![0.0; d];
                let mut acc = vec![0.0; d];
                for i in 0..self.n() {
                    self.fill_row(i, w, &mut row, false)?;
                    for (a, r) in acc.iter_mut().zip(&row) {
                        *a += r * r;
                    }
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Array2::zeros((d, d));
        for (w, acc) in rows.into_iter().enumerate() {
            for (v, a) in acc.into_iter().enumerate() {
                out[[w, v]] = a / norm;
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Global-null path

/// Parameters of the null covariance: `p̂_w = C_w / C̄` and
/// `T₀ = T̄ q - q²`.
#[derive(Debug, Clone, PartialEq)]
pub struct NullCovarianceModel {
    p_hat: Array1<f64>,
    inv_p: Array1<f64>,
    pub n: usize,
    pub t_mean: f64,
    pub q: usize,
}

impl NullCovarianceModel {
    pub fn new(p_hat: Array1<f64>, n: usize, t_mean: f64, q: usize) -> Result<Self> {
        if p_hat.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(KnitError::invalid("null marginals must be positive"));
        }
        if (p_hat.sum() - 1.0).abs() > 1e-9 {
            return Err(KnitError::invalid(format!("null marginals sum to {}, not 1", p_hat.sum())));
        }
        if n == 0 || q == 0 {
            return Err(KnitError::invalid("n and q must be positive"));
        }
        let model = Self { inv_p: p_hat.mapv(f64::recip), p_hat, n, t_mean, q };
        if model.t0().is_nan() || model.t0() <= 0.0 {
            return Err(KnitError::invalid(format!("T0 = {} must be positive", model.t0())));
        }
        Ok(model)
    }

    pub fn from_summary(summary: &CooccurrenceSummary) -> Result<Self> {
        if let Some(code) = summary.marginals().iter().position(|&c| c == 0) {
            return Err(KnitError::ZeroMarginal { code });
        }
        let total = summary.total() as f64;
        let p_hat = Array1::from_iter(summary.marginals().iter().map(|&c| c as f64 / total));
        Self::new(p_hat, summary.n(), summary.mean_length(), summary.q())
    }

    pub fn d(&self) -> usize {
        self.p_hat.len()
    }

    pub fn p_hat(&self) -> &Array1<f64> {
        &self.p_hat
    }

    pub fn t0(&self) -> f64 {
        let q = self.q as f64;
        self.t_mean * q - q * q
    }

    /// `1 / (n T₀)`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.n as f64 * self.t0())
    }
}

/// `prefactor · (c₁ 11ᵀ + Σ 1 e_kᵀ + Σ e_k 1ᵀ + c_D diag(1/p̂) + Σ e_a e_bᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredCov<'a> {
    pub prefactor: f64,
    pub ones: f64,
    /// `(k, c)` for a term `c · 1 e_kᵀ`.
    pub ones_e: Vec<(usize, f64)>,
    /// `(k, c)` for a term `c · e_k 1ᵀ`.
    pub e_ones: Vec<(usize, f64)>,
    pub diag: f64,
    /// `(a, b, c)` for a term `c · e_a e_bᵀ`.
    pub e_e: Vec<(usize, usize, f64)>,
    inv_p: &'a Array1<f64>,
}

impl StructuredCov<'_> {
    pub fn d(&self) -> usize {
        self.inv_p.len()
    }

    pub fn entry(&self, k: usize, l: usize) -> f64 {
        let mut v = self.ones;
        v += self.ones_e.iter().filter(|t| t.0 == l).map(|t| t.1).sum::<f64>();
        v += self.e_ones.iter().filter(|t| t.0 == k).map(|t| t.1).sum::<f64>();
        if k == l {
            v += self.diag * self.inv_p[k];
        }
        v += self.e_e.iter().filter(|t| t.0 == k && t.1 == l).map(|t| t.2).sum::<f64>();
        self.prefactor * v
    }

    pub fn dense(&self) -> Array2<f64> {
        let d = self.d();
        Array2::from_shape_fn((d, d), |(k, l)| self.entry(k, l))
    }

    /// `x Σ yᵀ` from the sums `Σx`, `Σy`, `Σ x_k y_k / p̂_k` and coordinate
    /// lookups.
    pub fn bilinear_parts(
        &self,
        sum_x: f64,
        sum_y: f64,
        weighted_xy: f64,
        x: impl Fn(usize) -> f64,
        y: impl Fn(usize) -> f64,
    ) -> f64 {
        let mut v = self.ones * sum_x * sum_y + self.diag * weighted_xy;
        for &(k, c) in &self.ones_e {
            v += c * sum_x * y(k);
        }
        for &(k, c) in &self.e_ones {
            v += c * x(k) * sum_y;
        }
        for &(a, b, c) in &self.e_e {
            v += c * x(a) * y(b);
        }
        self.prefactor * v
    }

    /// `x Σ yᵀ` in `O(d)`.
    pub fn bilinear(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
        let weighted: f64 = x.iter().zip(y.iter()).zip(self.inv_p.iter()).map(|((a, b), w)| a * b * w).sum();
        self.bilinear_parts(x.sum(), y.sum(), weighted, |k| x[k], |k| y[k])
    }
}

/// Null covariance block `Σ̆_{w,w'}` in structured form.
pub fn null_cov_block(model: &NullCovarianceModel, w: usize, w_prime: usize) -> Result<StructuredCov<'_>> {
    let d = model.d();
    if w >= d || w_prime >= d {
        return Err(KnitError::invalid(format!("pair ({w}, {w_prime}) outside vocabulary of size {d}")));
    }
    let p = &model.p_hat;
    let scale = model.scale();
    Ok(if w == w_prime {
        let pw = p[w];
        StructuredCov {
            prefactor: scale / pw,
            ones: pw - 0.5,
            ones_e: vec![(w, -0.5)],
            e_ones: vec![(w, -0.5)],
            diag: 0.5 * (1.0 - pw),
            e_e: vec![(w, w, 0.5 / pw)],
            inv_p: &model.inv_p,
        }
    } else {
        let (pw, pv) = (p[w], p[w_prime]);
        StructuredCov {
            prefactor: scale,
            ones: 1.0,
            ones_e: vec![(w, -0.5 / pw)],
            e_ones: vec![(w_prime, -0.5 / pv)],
            diag: -0.5,
            e_e: vec![(w_prime, w, 0.5 / (pw * pv))],
            inv_p: &model.inv_p,
        }
    })
}

impl RowCovariance for NullCovarianceModel {
    fn d(&self) -> usize {
        self.p_hat.len()
    }

    fn block(&self, a: usize, b: usize) -> Result<Array2<f64>> {
        Ok(null_cov_block(self, a, b)?.dense())
    }

    fn bilinear(&self, a: usize, b: usize, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
        Ok(null_cov_block(self, a, b)?.bilinear(x, y))
    }
}

/// Null variance of an empirical PMI entry, `Σ̆_{w,w}(w', w')`.
pub fn var_empirical_entry_null(model: &NullCovarianceModel, w: usize, w_prime: usize) -> Result<f64> {
    Ok(null_cov_block(model, w, w)?.entry(w_prime, w_prime))
}

/// Null-path variance of one entry, `O(d p)`.
pub fn var_lowrank_entry_null(
    projector: &Projector,
    model: &NullCovarianceModel,
    w: usize,
    w_prime: usize,
) -> Result<EntryVariance> {
    var_lowrank_entry(projector, model, w, w_prime)
}

/// All-pairs evaluator for the null path: with `P`, `P 1` and
/// `P diag(1/p̂) P` precomputed every entry costs `O(1)`.
#[derive(Debug, Clone)]
pub struct NullVariance<'a> {
    model: &'a NullCovarianceModel,
    proj: Array2<f64>,
    sums: Array1<f64>,
    weighted: Array2<f64>,
}

impl<'a> NullVariance<'a> {
    pub fn new(projector: &Projector, model: &'a NullCovarianceModel) -> Result<Self> {
        if projector.d() != model.d() {
            return Err(KnitError::Dimension(format!(
                "projector dimension {} does not match vocabulary size {}",
                projector.d(),
                model.d()
            )));
        }
        let u = projector.basis();
        let proj = u.dot(&u.t());
        let sums = proj.sum_axis(Axis(1));
        let du = u * &model.inv_p.view().insert_axis(Axis(1));
        let weighted = u.dot(&u.t().dot(&du)).dot(&u.t());
        Ok(Self { model, proj, sums, weighted })
    }

    pub fn var(&self, w: usize, w_prime: usize) -> Result<EntryVariance> {
        let (p, s, m) = (&self.proj, &self.sums, &self.weighted);
        let x = |k: usize| p[[w, k]];
        let y = |k: usize| p[[w_prime, k]];
        let t1 = null_cov_block(self.model, w_prime, w_prime)?.bilinear_parts(s[w], s[w], m[[w, w]], x, x);
        let t2 = null_cov_block(self.model, w, w)?.bilinear_parts(s[w_prime], s[w_prime], m[[w_prime, w_prime]], y, y);
        let t3 = null_cov_block(self.model, w_prime, w)?.bilinear_parts(s[w], s[w_prime], m[[w, w_prime]], x, y);
        clamp_variance(t1 + t2 + 2.0 * t3)
    }
}

/// `Cov(PMI-tilde_{i,·})` under the null, assembled from four parts.
///
/// Writing `δ_{ij} = P_i W_{j,·}ᵀ + W_{i,·} P_jᵀ`, the `(j, l)` entry is
/// `P_i Σ̆_{j,l} P_iᵀ + P_j Σ̆_{i,i} P_lᵀ + P_i Σ̆_{j,i} P_lᵀ + P_j Σ̆_{i,l} P_iᵀ`.
/// Each part collapses to rank-one terms in `P 1`, `P_i`, `P diag(1/p̂) P_iᵀ`,
/// a diagonal scaling of `P`, and `P diag(1/p̂) P`. The diagonal blocks
/// `Σ̆_{j,j}` (in the first part) and `Σ̆_{i,i}` (row `j = i` of the third
/// part, column `l = i` of the fourth) have their own coefficients and are
/// applied as corrections.
pub fn row_cov_null_fast(projector: &Projector, model: &NullCovarianceModel, i: usize) -> Result<Array2<f64>> {
    let d = projector.d();
    if model.d() != d {
        return Err(KnitError::Dimension(format!(
            "projector dimension {d} does not match vocabulary size {}",
            model.d()
        )));
    }
    if i >= d {
        return Err(KnitError::invalid(format!("row {i} outside vocabulary of size {d}")));
    }
    let c = model.scale();
    let p = &model.p_hat;
    let inv_p = &model.inv_p;
    let u = projector.basis();
    let proj = u.dot(&u.t());
    let x = proj.row(i).to_owned();
    let s = proj.sum_axis(Axis(1));
    let big_s = s[i];
    let xi = x[i];
    let pi = p[i];
    let qx: f64 = x.iter().zip(inv_p.iter()).map(|(a, w)| a * a * w).sum();
    let xd = &x * inv_p;
    let v = proj.dot(&xd);
    let du = u * &inv_p.view().insert_axis(Axis(1));
    let pdp = u.dot(&u.t().dot(&du)).dot(&u.t());

    // part 1: P_i Σ̆_{j,l} P_iᵀ
    let h = Array1::from_iter((0..d).map(|j| x[j] * inv_p[j]));
    let mut out = Array2::from_shape_fn((d, d), |(j, l)| {
        c * (big_s * big_s - 0.5 * big_s * (h[j] + h[l]) - 0.5 * qx + 0.5 * h[j] * h[l])
    });
    for j in 0..d {
        let pj = p[j];
        out[[j, j]] = c / pj
            * (big_s * big_s * (pj - 0.5) - big_s * x[j] + 0.5 * qx * (1.0 - pj) + 0.5 * x[j] * x[j] / pj);
    }

    // part 2: P_j Σ̆_{i,i} P_lᵀ
    let a2 = c / pi;
    out.zip_mut_with(&pdp, |o, &m| *o += a2 * 0.5 * (1.0 - pi) * m);
    for j in 0..d {
        for l in 0..d {
            out[[j, l]] += a2
                * ((pi - 0.5) * s[j] * s[l] - 0.5 * (s[j] * x[l] + x[j] * s[l]) + 0.5 * x[j] * x[l] / pi);
        }
    }

    // parts 3 and 4: P_i Σ̆_{j,i} P_lᵀ and its transpose
    let mut cross = Array2::from_shape_fn((d, d), |(j, l)| {
        c * ((big_s - 0.5 * xi / pi) * s[l] - 0.5 * v[l] + 0.5 * proj[[j, l]] * inv_p[j] * (xi / pi - big_s))
    });
    for l in 0..d {
        cross[[i, l]] = c / pi
            * ((pi - 0.5) * big_s * s[l] - 0.5 * big_s * x[l] - 0.5 * xi * s[l]
                + 0.5 * (1.0 - pi) * v[l]
                + 0.5 * xi * x[l] / pi);
    }
    out += &cross;
    out += &cross.t();
    Ok(out)
}

/// Literal assembly of rows `rows` of `Cov(PMI-tilde_{i,·})`: four
/// structured bilinear forms per entry, `O(d)` each.
pub fn row_cov_null_naive(
    projector: &Projector,
    model: &NullCovarianceModel,
    i: usize,
    rows: Range<usize>,
) -> Result<Array2<f64>> {
    let d = projector.d();
    let proj = projector.dense();
    let pi = proj.row(i);
    let mut out = Array2::zeros((rows.len(), d));
    let anchor = null_cov_block(model, i, i)?;
    for (r, j) in rows.enumerate() {
        let pj = proj.row(j);
        for l in 0..d {
            let pl = proj.row(l);
            out[[r, l]] = null_cov_block(model, j, l)?.bilinear(pi, pi)
                + anchor.bilinear(pj, pl)
                + null_cov_block(model, j, i)?.bilinear(pi, pl)
                + null_cov_block(model, i, l)?.bilinear(pj, pi);
        }
    }
    Ok(out)
}
