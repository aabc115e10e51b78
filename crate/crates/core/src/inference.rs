//! Standardisation, p-values and multiple-testing control; the end-to-end
//! edge test.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cooccur::CooccurrenceSummary;
use crate::error::{KnitError, Result};
use crate::spectra::{self, PmiEstimate, DEFAULT_PMI_FLOOR};
use crate::stats::{normal_cdf, two_sided_p};
use crate::variance::{NullCovarianceModel, NullVariance};

/// How a z-score becomes a p-value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    /// `2 (1 - Φ(|z|))`.
    #[default]
    TwoSided,
    /// `Φ(z)`, as the procedure is literally written.
    PaperLiteral,
}

pub fn z_and_p(statistic: f64, variance: f64, sidedness: Sidedness) -> Result<(f64, f64)> {
    if variance.is_nan() || variance <= 0.0 || variance.is_infinite() {
        return Err(KnitError::invalid(format!("variance must be positive, got {variance}")));
    }
    let z = statistic / variance.sqrt();
    let p = match sidedness {
        Sidedness::TwoSided => two_sided_p(z),
        Sidedness::PaperLiteral => normal_cdf(z),
    };
    Ok((z, p))
}

/// Outcome of a step-up procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct StepUp {
    /// Number of rejections.
    pub j_max: usize,
    /// Largest rejected p-value (0 when nothing is rejected).
    pub threshold: f64,
    pub selected: Vec<bool>,
}

fn check_level(p_values: &[f64], alpha: f64) -> Result<()> {
    if p_values.is_empty() {
        return Err(KnitError::invalid("no p-values to test"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(KnitError::invalid(format!("level must lie in (0, 1), got {alpha}")));
    }
    if p_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(KnitError::invalid("p-values must lie in [0, 1]"));
    }
    Ok(())
}

fn step_up(p_values: &[f64], line: impl Fn(usize) -> f64) -> StepUp {
    let mut order: Vec<usize> = (0..p_values.len()).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let j_max = (1..=order.len())
        .rev()
        .find(|&j| p_values[order[j - 1]] <= line(j))
        .unwrap_or(0);
    let threshold = if j_max == 0 { 0.0 } else { p_values[order[j_max - 1]] };
    let mut selected = vec![false; p_values.len()];
    for &k in &order[..j_max] {
        selected[k] = true;
    }
    StepUp { j_max, threshold, selected }
}

/// Step-up with the line `α j / (J (ln J + 1))`, valid under arbitrary
/// dependence.
pub fn bh_dependent(p_values: &[f64], alpha: f64) -> Result<StepUp> {
    check_level(p_values, alpha)?;
    let big_j = p_values.len() as f64;
    let harmonic = big_j.ln() + 1.0;
    Ok(step_up(p_values, |j| alpha * j as f64 / (big_j * harmonic)))
}

/// Plain step-up with the line `α j / J`.
pub fn bh(p_values: &[f64], alpha: f64) -> Result<StepUp> {
    check_level(p_values, alpha)?;
    let big_j = p_values.len() as f64;
    Ok(step_up(p_values, |j| alpha * j as f64 / big_j))
}

/// Reject `p ≤ α / J`.
pub fn bonferroni(p_values: &[f64], alpha: f64) -> Result<Vec<bool>> {
    check_level(p_values, alpha)?;
    let cut = alpha / p_values.len() as f64;
    Ok(p_values.iter().map(|&p| p <= cut).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorControl {
    /// False discovery rate under dependence.
    #[default]
    Fdr,
    /// Family-wise error rate (Bonferroni).
    Fwer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankChoice {
    Fixed(usize),
    /// Threshold the eigenvalues at `eta0`, or at the default formula
    /// iterated to a fixed point when `eta0` is absent.
    Auto { eta0: Option<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnitOptions {
    pub rank: RankChoice,
    pub alpha: f64,
    pub pmi_floor: f64,
    pub sidedness: Sidedness,
    pub control: ErrorControl,
}

impl KnitOptions {
    pub fn with_rank(p: usize) -> Self {
        Self {
            rank: RankChoice::Fixed(p),
            alpha: 0.05,
            pmi_floor: DEFAULT_PMI_FLOOR,
            sidedness: Sidedness::TwoSided,
            control: ErrorControl::Fdr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeTest {
    pub w: usize,
    pub w_prime: usize,
    pub statistic: f64,
    pub variance: f64,
    pub z: f64,
    pub p_value: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub w: usize,
    pub w_prime: usize,
    pub reason: String,
}

/// Per-pair results plus the multiplicity bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeTestResult {
    pub tests: Vec<EdgeTest>,
    pub alpha: f64,
    pub control: ErrorControl,
    pub sidedness: Sidedness,
    /// Number of tested pairs.
    pub j: usize,
    pub j_max: usize,
    pub threshold: f64,
    pub excluded: Vec<Exclusion>,
    /// Variances clamped from tiny negative values to zero.
    pub clamped: usize,
    pub rank: usize,
    pub eta0: Option<f64>,
}

impl EdgeTestResult {
    pub fn selected(&self) -> impl Iterator<Item = &EdgeTest> {
        self.tests.iter().filter(|t| t.selected)
    }
}

/// Rank of the truncation for the given choice; returns `(rank, η₀)`.
pub fn choose_rank(pmi_hat: &PmiEstimate, summary: &CooccurrenceSummary, choice: RankChoice) -> Result<(usize, Option<f64>)> {
    match choice {
        RankChoice::Fixed(p) => Ok((p, None)),
        RankChoice::Auto { eta0 } => {
            let eig = spectra::eig_sym(&pmi_hat.matrix)?;
            let values = eig.values.to_vec();
            let (rank, eta0) = match eta0 {
                Some(e) => (spectra::estimate_rank(&values, e)?, e),
                None => {
                    let auto = spectra::auto_rank(&values, summary.d(), summary.n(), summary.mean_length())?;
                    (auto.rank, auto.eta0)
                }
            };
            if rank == 0 {
                return Err(KnitError::numerical(format!(
                    "no eigenvalue reaches the rank threshold {eta0:e}; supply a rank or a smaller threshold"
                )));
            }
            Ok((rank, Some(eta0)))
        }
    }
}

/// Apply the selected error control to finished tests.
pub fn select(tests: &mut [EdgeTest], alpha: f64, control: ErrorControl) -> Result<(usize, f64)> {
    if tests.is_empty() {
        return Ok((0, 0.0));
    }
    let p: Vec<f64> = tests.iter().map(|t| t.p_value).collect();
    let (mask, j_max, threshold) = match control {
        ErrorControl::Fdr => {
            let s = bh_dependent(&p, alpha)?;
            (s.selected, s.j_max, s.threshold)
        }
        ErrorControl::Fwer => {
            let mask = bonferroni(&p, alpha)?;
            let j_max = mask.iter().filter(|&&m| m).count();
            (mask, j_max, alpha / p.len() as f64)
        }
    };
    for (t, m) in tests.iter_mut().zip(mask) {
        t.selected = m;
    }
    Ok((j_max, threshold))
}

/// Empirical PMI, rank truncation, null-path variance for every unordered
/// off-diagonal pair, z-scores and error control.
pub fn knit(summary: &CooccurrenceSummary, options: &KnitOptions) -> Result<(PmiEstimate, EdgeTestResult)> {
    let pmi_hat = spectra::empirical_pmi(summary, options.pmi_floor)?;
    let (rank, eta0) = choose_rank(&pmi_hat, summary, options.rank)?;
    let pmi = spectra::lowrank_pmi(&pmi_hat, rank)?;
    let result = test_edges(summary, &pmi, eta0, options)?;
    Ok((pmi, result))
}

/// Edge tests for an already truncated estimate; `eta0` is only recorded.
pub fn test_edges(
    summary: &CooccurrenceSummary,
    pmi: &PmiEstimate,
    eta0: Option<f64>,
    options: &KnitOptions,
) -> Result<EdgeTestResult> {
    let projector = pmi
        .projector()
        .ok_or_else(|| KnitError::invalid("edge tests need a low-rank estimate"))?;
    if pmi.d() != summary.d() {
        return Err(KnitError::Dimension(format!("estimate has d = {}, summary has d = {}", pmi.d(), summary.d())));
    }
    let rank = projector.rank();
    let model = NullCovarianceModel::from_summary(summary)?;
    let null = NullVariance::new(&projector, &model)?;
    let d = summary.d();

    let outcomes = (0..d)
        .into_par_iter()
        .map(|w| {
            let mut tests = Vec::new();
            let mut excluded = Vec::new();
            let mut clamped = 0;
            for v in w + 1..d {
                if summary.count(w, v) == 0 {
                    excluded.push(Exclusion { w, w_prime: v, reason: "zero co-occurrence count".into() });
                    continue;
                }
                let var = null.var(w, v)?;
                clamped += var.clamped as usize;
                if var.value <= 0.0 {
                    excluded.push(Exclusion { w, w_prime: v, reason: "zero variance".into() });
                    continue;
                }
                let statistic = pmi.matrix[[w, v]];
                let (z, p_value) = z_and_p(statistic, var.value, options.sidedness)?;
                tests.push(EdgeTest { w, w_prime: v, statistic, variance: var.value, z, p_value, selected: false });
            }
            Ok((tests, excluded, clamped))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut tests = Vec::new();
    let mut excluded = Vec::new();
    let mut clamped = 0;
    for (t, e, c) in outcomes {
        tests.extend(t);
        excluded.extend(e);
        clamped += c;
    }
    let (j_max, threshold) = select(&mut tests, options.alpha, options.control)?;
    if clamped > 0 {
        log::info!("{clamped} variances clamped to zero");
    }
    let result = EdgeTestResult {
        j: tests.len(),
        tests,
        alpha: options.alpha,
        control: options.control,
        sidedness: options.sidedness,
        j_max,
        threshold,
        excluded,
        clamped,
        rank,
        eta0,
    };
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn z_and_p_examples() {
        assert_eq!(z_and_p(0.0, 1.0, Sidedness::TwoSided).unwrap().1, 1.0);
        let (_, p) = z_and_p(1.959_964, 1.0, Sidedness::TwoSided).unwrap();
        assert!((p - 0.05).abs() < 1e-6);
        let (z, p) = z_and_p(1.0, 1.0, Sidedness::PaperLiteral).unwrap();
        assert_eq!(z, 1.0);
        assert!((p - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!(z_and_p(1.0, 0.0, Sidedness::TwoSided).is_err());
    }

    #[test]
    fn dependent_step_up_hand_example() {
        let r = bh_dependent(&[0.001, 0.2, 0.9], 0.05).unwrap();
        assert_eq!(r.j_max, 1);
        assert_eq!(r.selected, vec![true, false, false]);
        assert_eq!(r.threshold, 0.001);
        let line = |j: f64| 0.05 * j / (3.0 * (3f64.ln() + 1.0));
        assert!((line(1.0) - 0.00794).abs() < 1e-5);
        assert!((line(3.0) - 0.02383).abs() < 1e-5);
    }

    #[test]
    fn step_up_extremes() {
        let none = bh_dependent(&[1.0; 5], 0.05).unwrap();
        assert_eq!(none.j_max, 0);
        assert!(none.selected.iter().all(|s| !s));
        let all = bh_dependent(&[0.0; 5], 0.05).unwrap();
        assert_eq!(all.j_max, 5);
        assert!(all.selected.iter().all(|&s| s));
        assert!(bh_dependent(&[], 0.05).is_err());
        // a single test is rejected iff p ≤ α
        assert!(bh_dependent(&[0.05], 0.05).unwrap().selected[0]);
        assert!(!bh_dependent(&[0.0501], 0.05).unwrap().selected[0]);
    }

    #[test]
    fn bonferroni_cutoffs() {
        let mut p = vec![1.0; 100];
        p[3] = 5e-4;
        p[7] = 5.01e-4;
        let sel = bonferroni(&p, 0.05).unwrap();
        assert!(sel[3] && !sel[7]);
        assert_eq!(bonferroni(&[0.05], 0.05).unwrap(), vec![true]);
    }

    proptest! {
        #[test]
        fn dependent_line_never_beats_plain_line(p in prop::collection::vec(0.0f64..0.2, 1..60), alpha in 0.01f64..0.3) {
            let by = bh_dependent(&p, alpha).unwrap();
            let plain = bh(&p, alpha).unwrap();
            prop_assert!(by.j_max <= plain.j_max);
            prop_assert_eq!(by.selected.iter().filter(|&&s| s).count(), by.j_max);
            for (a, b) in by.selected.iter().zip(&plain.selected) {
                prop_assert!(!a || *b);
            }
        }

        #[test]
        fn selection_grows_with_alpha(p in prop::collection::vec(0.0f64..1.0, 1..60), a1 in 0.01f64..0.5, extra in 0.0f64..0.4) {
            let small = bh_dependent(&p, a1).unwrap();
            let large = bh_dependent(&p, (a1 + extra).min(0.99)).unwrap();
            for (s, l) in small.selected.iter().zip(&large.selected) {
                prop_assert!(!s || *l);
            }
            for (k, &s) in small.selected.iter().enumerate() {
                prop_assert_eq!(s, small.j_max > 0 && p[k] <= small.threshold);
            }
        }

        #[test]
        fn common_variance_scale_keeps_the_ranking(stats in prop::collection::vec(-3.0f64..3.0, 2..20), scale in 0.1f64..10.0) {
            let vars: Vec<f64> = (0..stats.len()).map(|k| 0.5 + k as f64 * 0.1).collect();
            let p1: Vec<f64> = stats.iter().zip(&vars).map(|(s, v)| z_and_p(*s, *v, Sidedness::TwoSided).unwrap().1).collect();
            let p2: Vec<f64> = stats.iter().zip(&vars).map(|(s, v)| z_and_p(*s, v * scale, Sidedness::TwoSided).unwrap().1).collect();
            for a in 0..stats.len() {
                for b in 0..stats.len() {
                    if p1[a] < p1[b] {
                        prop_assert!(p2[a] <= p2[b]);
                    }
                }
            }
        }
    }
}
