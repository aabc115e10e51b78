//! Empirical PMI, its spectral truncation and rank selection.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::cooccur::CooccurrenceSummary;
use crate::error::{KnitError, Result};
use crate::rng::{stream, Purpose};

/// Default floor on the PMI ratio before taking logs.
pub const DEFAULT_PMI_FLOOR: f64 = 1e-6;
/// Largest vocabulary for which a dense `d x d` PMI matrix is built without
/// an explicit override.
pub const MAX_DENSE_D: usize = 20_000;
/// Above this size the truncation uses an iterative top-k solver.
pub const FULL_EIGEN_LIMIT: usize = 2000;
/// Extra eigenpairs carried by the iterative solver.
pub const SUBSPACE_MARGIN: usize = 10;
const SUBSPACE_TOL: f64 = 1e-10;
const SUBSPACE_MAX_ITER: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmiKind {
    Empirical,
    LowRank,
}

/// Orthogonal projector `P = U Uᵀ` kept in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    basis: Array2<f64>,
}

impl Projector {
    /// `basis` must have orthonormal columns.
    pub fn new(basis: Array2<f64>) -> Self {
        Self { basis }
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    pub fn d(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Row `P_{w,·}`, `O(d p)`.
    pub fn row(&self, w: usize) -> Array1<f64> {
        self.basis.dot(&self.basis.row(w))
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.basis.row(i).dot(&self.basis.row(j))
    }

    /// `P x`.
    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.basis.dot(&self.basis.t().dot(&x))
    }

    /// `P 1`.
    pub fn row_sums(&self) -> Array1<f64> {
        let ones = Array1::ones(self.d());
        self.apply(ones.view())
    }

    pub fn dense(&self) -> Array2<f64> {
        self.basis.dot(&self.basis.t())
    }
}

/// A symmetric PMI matrix, empirical or rank-truncated.
#[derive(Debug, Clone, PartialEq)]
pub struct PmiEstimate {
    pub matrix: Array2<f64>,
    pub kind: PmiKind,
    /// Floor used on the count ratio.
    pub eta: f64,
    eigenvalues: Option<Array1<f64>>,
    eigenvectors: Option<Array2<f64>>,
}

impl PmiEstimate {
    pub fn empirical(matrix: Array2<f64>, eta: f64) -> Self {
        Self { matrix, kind: PmiKind::Empirical, eta, eigenvalues: None, eigenvectors: None }
    }

    /// Low-rank estimate `U diag(λ) Uᵀ` from its eigenpairs.
    pub fn from_eigenpairs(eigenvalues: Array1<f64>, eigenvectors: Array2<f64>, eta: f64) -> Result<Self> {
        if eigenvectors.ncols() != eigenvalues.len() {
            return Err(KnitError::Dimension(format!(
                "{} eigenvalues for {} eigenvectors",
                eigenvalues.len(),
                eigenvectors.ncols()
            )));
        }
        let scaled = &eigenvectors * &eigenvalues.view().insert_axis(Axis(0));
        let mut matrix = scaled.dot(&eigenvectors.t());
        symmetrize(&mut matrix);
        Ok(Self {
            matrix,
            kind: PmiKind::LowRank,
            eta,
            eigenvalues: Some(eigenvalues),
            eigenvectors: Some(eigenvectors),
        })
    }

    /// Low-rank estimate restored from storage, keeping the stored matrix
    /// bit for bit.
    pub(crate) fn from_stored(matrix: Array2<f64>, eigenvalues: Array1<f64>, eigenvectors: Array2<f64>, eta: f64) -> Self {
        Self {
            matrix,
            kind: PmiKind::LowRank,
            eta,
            eigenvalues: Some(eigenvalues),
            eigenvectors: Some(eigenvectors),
        }
    }

    pub fn d(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn rank(&self) -> Option<usize> {
        self.eigenvalues.as_ref().map(Array1::len)
    }

    pub fn eigenvalues(&self) -> Option<&Array1<f64>> {
        self.eigenvalues.as_ref()
    }

    pub fn eigenvectors(&self) -> Option<&Array2<f64>> {
        self.eigenvectors.as_ref()
    }

    pub fn projector(&self) -> Option<Projector> {
        self.eigenvectors.clone().map(Projector::new)
    }

    /// `U |Λ|^{1/2}` with negative eigenvalues clipped to zero.
    pub fn embedding(&self) -> Option<Array2<f64>> {
        let (vals, vecs) = (self.eigenvalues.as_ref()?, self.eigenvectors.as_ref()?);
        let roots = vals.mapv(|l| l.max(0.0).sqrt());
        Some(vecs * &roots.view().insert_axis(Axis(0)))
    }
}

fn symmetrize(m: &mut Array2<f64>) {
    let d = m.nrows();
    for i in 0..d {
        for j in i + 1..d {
            let avg = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = avg;
            m[[j, i]] = avg;
        }
    }
}

/// `PMI-hat(w, w') = ln max(C̄ C_{w,w'} / (C_w C_{w'}), η)`.
pub fn empirical_pmi(summary: &CooccurrenceSummary, eta: f64) -> Result<PmiEstimate> {
    empirical_pmi_with_limit(summary, eta, MAX_DENSE_D)
}

/// As [`empirical_pmi`] with an explicit cap on the dense dimension.
pub fn empirical_pmi_with_limit(summary: &CooccurrenceSummary, eta: f64, max_d: usize) -> Result<PmiEstimate> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(KnitError::invalid(format!("PMI floor must be positive, got {eta}")));
    }
    let d = summary.d();
    if d > max_d {
        return Err(KnitError::invalid(format!(
            "dense PMI for d = {d} exceeds the limit of {max_d}; raise the limit explicitly"
        )));
    }
    let marg = summary.marginals();
    if let Some(code) = marg.iter().position(|&c| c == 0) {
        return Err(KnitError::ZeroMarginal { code });
    }
    let total = summary.total() as f64;
    let floor = eta.ln();
    let mut matrix = Array2::from_elem((d, d), floor);
    for t in summary.triplets() {
        let (w, v) = (t.w as usize, t.w_prime as usize);
        if w > v {
            continue;
        }
        let ratio = total * t.count as f64 / (marg[w] as f64 * marg[v] as f64);
        let value = ratio.max(eta).ln();
        matrix[[w, v]] = value;
        matrix[[v, w]] = value;
    }
    Ok(PmiEstimate::empirical(matrix, eta))
}

/// `α_p = √α (1 - α^{q/2}) / (q p (1 - √α))`, evaluated without cancellation
/// as `α → 1`.
pub fn alpha_p(alpha: f64, q: usize, p: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(KnitError::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if q == 0 || p == 0 {
        return Err(KnitError::invalid("q and p must be positive"));
    }
    let ln_a = alpha.ln();
    let num = -(0.5 * q as f64 * ln_a).exp_m1();
    let den = -(0.5 * ln_a).exp_m1();
    Ok(alpha.sqrt() * num / (q as f64 * p as f64 * den))
}

/// Eigenpairs sorted by magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEigen {
    pub values: Array1<f64>,
    /// Columns are eigenvectors.
    pub vectors: Array2<f64>,
}

fn magnitude_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(values[b].total_cmp(&values[a]))
            .then(a.cmp(&b))
    });
    idx
}

fn fix_sign(mut v: ndarray::ArrayViewMut1<f64>) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.mapv_inplace(|x| -x);
    }
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    DMatrix::from_fn(d, d, |i, j| 0.5 * (a[[i, j]] + a[[j, i]]))
}

/// Full symmetric eigendecomposition of `(A + Aᵀ)/2`, eigenvalues by
/// decreasing magnitude (ties: larger signed value first, then original
/// index); each eigenvector's largest-magnitude coordinate is positive.
pub fn eig_sym(a: &Array2<f64>) -> Result<SymEigen> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(KnitError::Dimension(format!("matrix is {} x {}, not square", d, a.ncols())));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(KnitError::numerical("non-finite matrix entry"));
    }
    let eig = to_nalgebra(a).symmetric_eigen();
    let raw: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let order = magnitude_order(&raw);
    let values = Array1::from_iter(order.iter().map(|&k| raw[k]));
    let mut vectors = Array2::from_shape_fn((d, d), |(i, j)| eig.eigenvectors[(i, order[j])]);
    for col in vectors.columns_mut() {
        fix_sign(col);
    }
    Ok(SymEigen { values, vectors })
}

fn orthonormalize(block: &Array2<f64>) -> Array2<f64> {
    let (d, k) = block.dim();
    let m = DMatrix::from_fn(d, k, |i, j| block[[i, j]]);
    let q = m.qr().q();
    Array2::from_shape_fn((d, k), |(i, j)| q[(i, j)])
}

/// Top-`k` eigenpairs by magnitude via block subspace iteration with
/// Rayleigh–Ritz extraction. Converged when every retained residual
/// `‖A u - λ u‖` is at most `1e-10 · |λ_1|`.
pub fn eig_sym_top(a: &Array2<f64>, k: usize, seed: u64) -> Result<SymEigen> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(KnitError::Dimension(format!("matrix is {} x {}, not square", d, a.ncols())));
    }
    if k == 0 || k > d {
        return Err(KnitError::invalid(format!("cannot extract {k} eigenpairs from a {d} x {d} matrix")));
    }
    let mut sym = a.clone();
    symmetrize(&mut sym);
    let block = (k + SUBSPACE_MARGIN).min(d);
    let mut rng = stream(seed, Purpose::Eigensolver, 0);
    let start = Array2::from_shape_fn((d, block), |_| StandardNormal.sample(&mut rng));
    let mut basis = orthonormalize(&start);
    for _ in 0..SUBSPACE_MAX_ITER {
        let image = sym.dot(&basis);
        let small = basis.t().dot(&image);
        let inner = eig_sym(&small)?;
        let ritz = basis.dot(&inner.vectors);
        let ritz_image = image.dot(&inner.vectors);
        let scale = inner.values[0].abs().max(f64::MIN_POSITIVE);
        let converged = (0..k).all(|j| {
            let resid = &ritz_image.column(j) - &(&ritz.column(j) * inner.values[j]);
            resid.dot(&resid).sqrt() <= SUBSPACE_TOL * scale
        });
        if converged {
            let values = inner.values.slice(s![..k]).to_owned();
            let mut vectors = ritz.slice(s![.., ..k]).to_owned();
            for col in vectors.columns_mut() {
                fix_sign(col);
            }
            return Ok(SymEigen { values, vectors });
        }
        basis = orthonormalize(&ritz_image);
    }
    Err(KnitError::numerical(format!(
        "subspace iteration did not converge in {SUBSPACE_MAX_ITER} sweeps"
    )))
}

/// Keep the top-`p` eigenpairs of `PMI-hat` by magnitude.
pub fn lowrank_pmi(pmi_hat: &PmiEstimate, p: usize) -> Result<PmiEstimate> {
    if pmi_hat.kind != PmiKind::Empirical {
        return Err(KnitError::invalid("truncation expects an empirical PMI estimate"));
    }
    let d = pmi_hat.d();
    if p == 0 || p > d {
        return Err(KnitError::invalid(format!("rank must lie in [1, {d}], got {p}")));
    }
    let eig = if d <= FULL_EIGEN_LIMIT {
        eig_sym(&pmi_hat.matrix)?
    } else {
        eig_sym_top(&pmi_hat.matrix, (p + 1).min(d), 0)?
    };
    truncate(&eig, p, pmi_hat.eta)
}

/// Rank-`p` estimate from an existing decomposition.
pub fn truncate(eig: &SymEigen, p: usize, eta: f64) -> Result<PmiEstimate> {
    let available = eig.values.len();
    if p == 0 || p > available {
        return Err(KnitError::invalid(format!("rank must lie in [1, {available}], got {p}")));
    }
    if p < available && (eig.values[p - 1].abs() - eig.values[p].abs()).abs() <= 1e-12 {
        log::warn!(
            "eigenvalues {} and {} tie in magnitude at the truncation point; keeping the larger signed value",
            eig.values[p - 1],
            eig.values[p]
        );
    }
    PmiEstimate::from_eigenpairs(
        eig.values.slice(s![..p]).to_owned(),
        eig.vectors.slice(s![.., ..p]).to_owned(),
        eta,
    )
}

/// Largest `k` (1-based) with `λ_k ≥ η₀`, scanning eigenvalues in the given
/// magnitude order and comparing signed values; 0 if there is none.
pub fn estimate_rank(eigenvalues: &[f64], eta0: f64) -> Result<usize> {
    if eta0.is_nan() || eta0 <= 0.0 {
        return Err(KnitError::invalid(format!("threshold must be positive, got {eta0}")));
    }
    Ok(eigenvalues.iter().rposition(|&l| l >= eta0).map_or(0, |k| k + 1))
}

/// `η₀ = 8 d³ p ln²(d) / √(nT)`.
pub fn default_eta0(d: usize, p: usize, n: usize, t: f64) -> f64 {
    let df = d as f64;
    8.0 * df.powi(3) * p as f64 * df.ln().powi(2) / (n as f64 * t).sqrt()
}

/// Rank chosen by iterating `r ← estimate_rank(λ, η₀(r))` from `r = d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutoRank {
    pub rank: usize,
    pub eta0: f64,
    pub iterations: usize,
}

pub fn auto_rank(eigenvalues: &[f64], d: usize, n: usize, t: f64) -> Result<AutoRank> {
    let mut guess = d;
    let mut seen = vec![guess];
    for iterations in 1..=d + 1 {
        let eta0 = default_eta0(d, guess, n, t);
        if eta0 <= 0.0 {
            return Ok(AutoRank { rank: 0, eta0, iterations });
        }
        let r = estimate_rank(eigenvalues, eta0)?;
        // a zero rank would zero the threshold, so retry from one
        let next = r.max(1);
        if r == guess || seen.contains(&next) {
            return Ok(AutoRank { rank: r, eta0, iterations });
        }
        seen.push(next);
        guess = next;
    }
    unreachable!("the rank sequence takes at most d + 1 distinct values")
}
