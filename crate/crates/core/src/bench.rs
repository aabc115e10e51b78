//! Simulation studies behind `knit bench`.
//!
//! Every study runs its replicates in parallel. Replicate `r` of grid cell
//! `c` draws its cohort from `derive_seed(seed, [c, r])`, so the tables do
//! not depend on scheduling and a rerun with the same spec reproduces them
//! byte for byte. Only `manifest.json` carries wall-clock data.
//!
//! The per-study functions return typed reports; [`run_bench`] adds the CSV
//! files and the manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cooccur::{self, accumulate_cohort, merge, summarize};
use crate::error::{KnitError, Result};
use crate::inference::{self, bonferroni, z_and_p, KnitOptions, Sidedness};
use crate::io;
use crate::rng::derive_seed;
use crate::simgen::{self, Cohort, DiscourseKind, EmbeddingMatrix, SimConfig};
use crate::spectra::{self, DEFAULT_PMI_FLOOR};
use crate::stats;
use crate::variance::{self, NullCovarianceModel, NullVariance, PatientResiduals, PatientVariance};

/// Two-sided 95% normal quantile.
const Z_95: f64 = 1.959_963_984_540_054;

/// Entries `(0, 0..CI_ENTRIES)` are reported by the CI-width study.
pub const CI_ENTRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    TypeI,
    DecayRate,
    Qq,
    CiWidth,
    Power,
    Robustness,
}

impl Study {
    pub const ALL: [Study; 6] = [Study::TypeI, Study::DecayRate, Study::Qq, Study::CiWidth, Study::Power, Study::Robustness];

    pub fn name(self) -> &'static str {
        match self {
            Study::TypeI => "type_i",
            Study::DecayRate => "decay_rate",
            Study::Qq => "qq",
            Study::CiWidth => "ci_width",
            Study::Power => "power",
            Study::Robustness => "robustness",
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = KnitError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Study::ALL
            .into_iter()
            .find(|st| st.name() == key || st.name().replace('_', "") == key)
            .ok_or_else(|| KnitError::invalid(format!("unknown study {s:?}")))
    }
}

/// Parameter lists of a study. Not every study reads every field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub n: Vec<usize>,
    #[serde(rename = "T")]
    pub t: Vec<usize>,
    pub d: Vec<usize>,
    pub p: usize,
    pub q: usize,
    #[serde(default)]
    pub kappa: Vec<f64>,
    #[serde(default = "default_processes")]
    pub process: Vec<DiscourseKind>,
    /// Fixes the embedding across cells; derived per cell when absent.
    #[serde(default)]
    pub embedding_seed: Option<u64>,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    /// Monte-Carlo size for the population PMI; 0 skips the bias column.
    #[serde(default)]
    pub bias_samples: usize,
    #[serde(default = "default_level")]
    pub alpha: f64,
}

fn default_processes() -> Vec<DiscourseKind> {
    vec![DiscourseKind::Ar1]
}

fn default_mc_samples() -> usize {
    simgen::DEFAULT_MC_SAMPLES
}

fn default_level() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub study: Study,
    pub grid: Grid,
    pub replicates: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl BenchSpec {
    /// Laptop-sized grid for `study`.
    pub fn desk(study: Study, seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        let base = Grid {
            n: vec![200, 400, 800, 1600],
            t: vec![1000],
            d: vec![100],
            p: 22,
            q: 2,
            kappa: Vec::new(),
            process: default_processes(),
            embedding_seed: None,
            mc_samples: simgen::DEFAULT_MC_SAMPLES,
            bias_samples: 0,
            alpha: 0.05,
        };
        let (grid, replicates) = match study {
            Study::TypeI => (Grid { n: vec![400, 800, 1600], t: vec![200], d: vec![50], p: 1, ..base }, 100),
            Study::DecayRate => (Grid { bias_samples: 200_000, ..base }, 20),
            Study::Qq => (Grid { n: vec![1000], t: vec![800], kappa: vec![1.0], ..base }, 100),
            Study::CiWidth => (Grid { n: vec![1000], t: vec![800], kappa: vec![1.0, 2.0], ..base }, 5),
            Study::Power => (
                Grid {
                    n: vec![2000],
                    t: vec![2500],
                    d: vec![4],
                    p: 2,
                    q: 1,
                    kappa: vec![2.0, 1.5, 1.0, 0.5],
                    embedding_seed: Some(3),
                    ..base
                },
                10,
            ),
            Study::Robustness => (
                Grid { process: vec![DiscourseKind::Ar1, DiscourseKind::Sphere, DiscourseKind::Arma13], ..base },
                10,
            ),
        };
        Self { study, grid, replicates, seed, out_dir: out_dir.into() }
    }

    /// The full grids of the original simulation section.
    pub fn paper_scale(study: Study, seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        let mut spec = Self::desk(study, seed, out_dir);
        let ns = vec![200, 400, 800, 1200, 1600, 2000];
        let g = &mut spec.grid;
        match study {
            Study::TypeI => {
                g.d = vec![100];
                g.t = vec![1000];
                g.n = ns;
            }
            Study::DecayRate | Study::Robustness => g.n = ns,
            Study::Qq | Study::CiWidth => {}
            Study::Power => {
                g.d = vec![100];
                g.p = 22;
                g.q = 2;
                g.n = vec![1000];
                g.t = vec![1000];
                g.embedding_seed = None;
            }
        }
        spec.replicates = 100;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if self.replicates < 1 {
            return Err(KnitError::invalid("replicates must be at least 1"));
        }
        for (name, list) in [("n", &g.n), ("T", &g.t), ("d", &g.d)] {
            if list.is_empty() || list.contains(&0) {
                return Err(KnitError::invalid(format!("grid {name} must be a non-empty list of positive values")));
            }
        }
        if g.p == 0 || g.q == 0 {
            return Err(KnitError::invalid("grid p and q must be positive"));
        }
        if let Some(&t) = g.t.iter().find(|&&t| t <= 2 * g.q) {
            return Err(KnitError::invalid(format!("infeasible grid: T = {t} must exceed 2q = {}", 2 * g.q)));
        }
        if g.kappa.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
            return Err(KnitError::invalid("grid kappa values must be positive"));
        }
        if matches!(self.study, Study::Qq | Study::CiWidth | Study::Power) && g.kappa.is_empty() {
            return Err(KnitError::invalid(format!("study {} needs at least one kappa", self.study)));
        }
        if g.process.is_empty() {
            return Err(KnitError::invalid("grid process list is empty"));
        }
        if !(g.alpha > 0.0 && g.alpha < 1.0) {
            return Err(KnitError::invalid("alpha must lie in (0, 1)"));
        }
        if self.study != Study::TypeI {
            if let Some(&d) = g.d.iter().find(|&&d| d < g.p) {
                return Err(KnitError::invalid(format!("rank p = {} exceeds d = {d}", g.p)));
            }
        }
        Ok(())
    }

    fn cells(&self) -> Vec<Cell> {
        let g = &self.grid;
        let kappas: Vec<Option<f64>> = if g.kappa.is_empty() { vec![None] } else { g.kappa.iter().map(|&k| Some(k)).collect() };
        let processes = match self.study {
            Study::Robustness => g.process.clone(),
            _ => vec![g.process[0]],
        };
        let kappas = match self.study {
            Study::TypeI | Study::DecayRate | Study::Robustness => vec![None],
            _ => kappas,
        };
        let mut cells = Vec::new();
        for &process in &processes {
            for &d in &g.d {
                for &t in &g.t {
                    for &kappa in &kappas {
                        let index = cells.len() as u64;
                        cells.push(Cell { index, process, d, t, kappa });
                    }
                }
            }
        }
        cells
    }

    fn replicate_seed(&self, cell: &Cell, r: usize) -> u64 {
        derive_seed(self.seed, &[cell.index, r as u64])
    }

    fn embedding_seed(&self, cell: &Cell) -> u64 {
        self.grid.embedding_seed.unwrap_or_else(|| derive_seed(self.seed, &[cell.index]))
    }

    fn max_n(&self) -> usize {
        self.grid.n.iter().copied().max().unwrap_or(0)
    }

    fn sorted_n(&self) -> Vec<usize> {
        let mut n = self.grid.n.clone();
        n.sort_unstable();
        n.dedup();
        n
    }
}

/// One combination of the non-`n` grid axes; `n` is covered by nested
/// prefixes of one cohort per replicate.
#[derive(Debug, Clone, Copy)]
struct Cell {
    index: u64,
    process: DiscourseKind,
    d: usize,
    t: usize,
    kappa: Option<f64>,
}

impl Cell {
    fn sim_config(&self, spec: &BenchSpec, n: usize, seed: u64) -> SimConfig {
        let g = &spec.grid;
        let mut cfg = SimConfig::new(self.d, g.p, n, self.t, g.q, seed);
        cfg.process = self.process;
        cfg.kappa_exponent = self.kappa;
        cfg.mc_samples = g.mc_samples;
        cfg
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedRecord {
    pub cell: u64,
    pub replicate: usize,
    pub seed: u64,
}

fn seed_records(spec: &BenchSpec, cells: &[Cell]) -> Vec<SeedRecord> {
    cells
        .iter()
        .flat_map(|c| (0..spec.replicates).map(move |r| SeedRecord { cell: c.index, replicate: r, seed: spec.replicate_seed(c, r) }))
        .collect()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn non_empty_fit(x: &[f64], y: &[f64]) -> Option<stats::LineFit> {
    let fit = (x.len() >= 2).then(|| stats::fit_line(x, y))?;
    fit.slope.is_finite().then_some(fit)
}

// ---------------------------------------------------------------------------
// type-I error

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VariancePath {
    Null,
    Patient,
}

#[derive(Debug, Clone, Serialize)]
pub struct TypeIReplicate {
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub n: usize,
    pub replicate: usize,
    pub seed: u64,
    pub method: VariancePath,
    pub tests: usize,
    pub rejected: bool,
    pub min_p: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FwerRow {
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub n: usize,
    pub method: VariancePath,
    pub replicates: usize,
    pub rejections: usize,
    pub fwer: f64,
}

#[derive(Debug, Clone)]
pub struct TypeIReport {
    pub rows: Vec<FwerRow>,
    pub replicates: Vec<TypeIReplicate>,
}

impl TypeIReport {
    pub fn fwer(&self, n: usize, method: VariancePath) -> Option<f64> {
        self.rows.iter().find(|r| r.n == n && r.method == method).map(|r| r.fwer)
    }
}

/// Global-null cohorts with uniform marginals; Bonferroni over the
/// off-diagonal empirical PMI entries, with each variance path.
pub fn type_one_error(spec: &BenchSpec) -> Result<TypeIReport> {
    spec.validate()?;
    let g = &spec.grid;
    let ns = spec.sorted_n();
    let mut replicates = Vec::new();
    for cell in spec.cells() {
        let probs = vec![1.0 / cell.d as f64; cell.d];
        let per_rep = (0..spec.replicates)
            .into_par_iter()
            .map(|r| {
                let seed = spec.replicate_seed(&cell, r);
                let cohort = simgen::sample_null_cohort(&probs, spec.max_n(), cell.t, seed)?;
                let patients = accumulate_cohort(&cohort, g.q)?;
                let mut out = Vec::new();
                for &n in &ns {
                    let summary = merge(&patients[..n])?;
                    let hat = spectra::empirical_pmi(&summary, DEFAULT_PMI_FLOOR)?;
                    let model = NullCovarianceModel::from_summary(&summary)?;
                    let patient_var = PatientResiduals::new(patients[..n].to_vec())?.var_empirical_all()?;
                    for method in [VariancePath::Null, VariancePath::Patient] {
                        let mut p_values = Vec::new();
                        for w in 0..cell.d {
                            for v in w + 1..cell.d {
                                if summary.count(w, v) == 0 {
                                    continue;
                                }
                                let var = match method {
                                    VariancePath::Null => variance::var_empirical_entry_null(&model, w, v)?,
                                    VariancePath::Patient => patient_var[[w, v]],
                                };
                                if var > 0.0 {
                                    p_values.push(z_and_p(hat.matrix[[w, v]], var, Sidedness::TwoSided)?.1);
                                }
                            }
                        }
                        let rejected = bonferroni(&p_values, g.alpha)?.into_iter().any(|x| x);
                        let min_p = p_values.iter().copied().fold(1.0, f64::min);
                        out.push(TypeIReplicate {
                            d: cell.d,
                            t: cell.t,
                            n,
                            replicate: r,
                            seed,
                            method,
                            tests: p_values.len(),
                            rejected,
                            min_p,
                        });
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        replicates.extend(per_rep.into_iter().flatten());
    }
    let mut rows = Vec::new();
    for cell in spec.cells() {
        for &n in &ns {
            for method in [VariancePath::Null, VariancePath::Patient] {
                let rejections = replicates
                    .iter()
                    .filter(|x| x.d == cell.d && x.t == cell.t && x.n == n && x.method == method && x.rejected)
                    .count();
                rows.push(FwerRow {
                    d: cell.d,
                    t: cell.t,
                    n,
                    method,
                    replicates: spec.replicates,
                    rejections,
                    fwer: rejections as f64 / spec.replicates as f64,
                });
            }
        }
    }
    Ok(TypeIReport { rows, replicates })
}

// ---------------------------------------------------------------------------
// error decay (also the robustness study)

#[derive(Debug, Clone, Serialize)]
pub struct DecayReplicate {
    pub process: DiscourseKind,
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub n: usize,
    pub replicate: usize,
    pub seed: u64,
    pub hat_error: f64,
    pub tilde_error: f64,
    /// Eigenvalues of the empirical PMI in magnitude order; kept in memory
    /// for rank diagnostics, not written out.
    #[serde(skip)]
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayRow {
    pub process: DiscourseKind,
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub n: usize,
    pub replicates: usize,
    pub median_hat_error: f64,
    pub median_tilde_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayFit {
    pub process: DiscourseKind,
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub alpha_p: f64,
    pub slope_hat: Option<f64>,
    pub slope_tilde: Option<f64>,
    /// `‖PMI − α_p V Vᵀ‖_max` with a Monte-Carlo population PMI.
    pub bias: Option<f64>,
}

/// Per-cell quantities a caller may want beyond the tables.
#[derive(Debug, Clone)]
pub struct DecayTruth {
    pub process: DiscourseKind,
    pub d: usize,
    pub t: usize,
    pub embedding: EmbeddingMatrix,
    pub alpha_p: f64,
}

#[derive(Debug, Clone)]
pub struct DecayReport {
    pub rows: Vec<DecayRow>,
    pub fits: Vec<DecayFit>,
    pub replicates: Vec<DecayReplicate>,
    pub truths: Vec<DecayTruth>,
}

impl DecayReport {
    pub fn row(&self, process: DiscourseKind, n: usize) -> Option<&DecayRow> {
        self.rows.iter().find(|r| r.process == process && r.n == n)
    }
}

/// Max-norm errors of both estimators against `α_p V Vᵀ` over nested
/// patient prefixes, their medians, and the log-log slope against `n`.
pub fn decay_rate(spec: &BenchSpec) -> Result<DecayReport> {
    spec.validate()?;
    let g = &spec.grid;
    let ns = spec.sorted_n();
    let mut report = DecayReport { rows: Vec::new(), fits: Vec::new(), replicates: Vec::new(), truths: Vec::new() };
    for cell in spec.cells() {
        let emb_cfg = cell.sim_config(spec, spec.max_n(), spec.embedding_seed(&cell));
        let embedding = simgen::build_embeddings(&emb_cfg)?;
        let process = emb_cfg.process()?;
        let alpha_p = spectra::alpha_p(process.alpha, g.q, g.p)?;
        let target = embedding.gram() * alpha_p;
        let lengths = vec![cell.t; spec.max_n()];

        let per_rep = (0..spec.replicates)
            .into_par_iter()
            .map(|r| {
                let seed = spec.replicate_seed(&cell, r);
                let cohort = simgen::simulate_cohort(&embedding, &lengths, &process, seed)?;
                ns.iter()
                    .map(|&n| {
                        let summary = summarize(&cohort, g.q, Some(n))?;
                        let hat = spectra::empirical_pmi(&summary, DEFAULT_PMI_FLOOR)?;
                        let eig = spectra::eig_sym(&hat.matrix)?;
                        let tilde = spectra::truncate(&eig, g.p, DEFAULT_PMI_FLOOR)?;
                        Ok(DecayReplicate {
                            process: cell.process,
                            d: cell.d,
                            t: cell.t,
                            n,
                            replicate: r,
                            seed,
                            hat_error: max_abs_diff(&hat.matrix, &target),
                            tilde_error: max_abs_diff(&tilde.matrix, &target),
                            eigenvalues: eig.values.to_vec(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let reps: Vec<DecayReplicate> = per_rep.into_iter().flatten().collect();

        let mut log_n = Vec::new();
        let (mut log_hat, mut log_tilde) = (Vec::new(), Vec::new());
        for &n in &ns {
            let at: Vec<&DecayReplicate> = reps.iter().filter(|x| x.n == n).collect();
            let hat: Vec<f64> = at.iter().map(|x| x.hat_error).collect();
            let tilde: Vec<f64> = at.iter().map(|x| x.tilde_error).collect();
            let row = DecayRow {
                process: cell.process,
                d: cell.d,
                t: cell.t,
                n,
                replicates: spec.replicates,
                median_hat_error: stats::median(&hat),
                median_tilde_error: stats::median(&tilde),
            };
            log_n.push((n as f64).ln());
            log_hat.push(row.median_hat_error.ln());
            log_tilde.push(row.median_tilde_error.ln());
            report.rows.push(row);
        }
        let bias = if g.bias_samples > 0 {
            let pop = simgen::population_pmi(&embedding, process.alpha, g.q, g.bias_samples, spec.embedding_seed(&cell))?;
            Some(max_abs_diff(&pop, &target))
        } else {
            None
        };
        report.fits.push(DecayFit {
            process: cell.process,
            d: cell.d,
            t: cell.t,
            alpha_p,
            slope_hat: non_empty_fit(&log_n, &log_hat).map(|f| f.slope),
            slope_tilde: non_empty_fit(&log_n, &log_tilde).map(|f| f.slope),
            bias,
        });
        report.truths.push(DecayTruth { process: cell.process, d: cell.d, t: cell.t, embedding, alpha_p });
        report.replicates.extend(reps);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// normality of a single entry

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Empirical,
    LowRank,
    /// Low-rank estimate with the global-null variance.
    LowRankNull,
}

#[derive(Debug, Clone, Serialize)]
pub struct QqSample {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub kappa: f64,
    pub replicate: usize,
    pub seed: u64,
    pub estimator: Estimator,
    pub value: f64,
    /// Centred and scaled by the replicate mean and standard deviation.
    pub standardized: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KsRow {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub kappa: f64,
    pub estimator: Estimator,
    pub replicates: usize,
    pub mean: f64,
    pub sd: f64,
    pub ks_statistic: Option<f64>,
    pub ks_p_value: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct QqReport {
    pub samples: Vec<QqSample>,
    pub ks: Vec<KsRow>,
}

fn first_n(spec: &BenchSpec) -> usize {
    spec.grid.n[0]
}

/// Replicate draws of entry `(0, 0)` for the empirical and low-rank
/// estimators, standardised, with a KS test against `N(0, 1)`.
pub fn qq(spec: &BenchSpec) -> Result<QqReport> {
    spec.validate()?;
    let g = &spec.grid;
    let n = first_n(spec);
    let mut report = QqReport { samples: Vec::new(), ks: Vec::new() };
    for cell in spec.cells() {
        let kappa = cell.kappa.expect("validated");
        let emb_cfg = cell.sim_config(spec, n, spec.embedding_seed(&cell));
        let embedding = simgen::scaled_embeddings(&emb_cfg)?;
        let process = emb_cfg.process()?;
        let lengths = vec![cell.t; n];
        let draws = (0..spec.replicates)
            .into_par_iter()
            .map(|r| {
                let seed = spec.replicate_seed(&cell, r);
                let cohort = simgen::simulate_cohort(&embedding, &lengths, &process, seed)?;
                let summary = summarize(&cohort, g.q, None)?;
                let hat = spectra::empirical_pmi(&summary, DEFAULT_PMI_FLOOR)?;
                let tilde = spectra::lowrank_pmi(&hat, g.p)?;
                Ok((seed, hat.matrix[[0, 0]], tilde.matrix[[0, 0]]))
            })
            .collect::<Result<Vec<_>>>()?;
        for estimator in [Estimator::Empirical, Estimator::LowRank] {
            let values: Vec<f64> = draws
                .iter()
                .map(|&(_, h, t)| if estimator == Estimator::Empirical { h } else { t })
                .collect();
            let mean = stats::mean(&values);
            let sd = if values.len() > 1 { stats::sample_variance(&values).sqrt() } else { f64::NAN };
            let standardized: Vec<f64> = values.iter().map(|v| (v - mean) / sd).collect();
            let ks = (values.len() > 1 && sd > 0.0).then(|| stats::ks_standard_normal(&standardized));
            for (r, (&(seed, _, _), (&value, &z))) in draws.iter().zip(values.iter().zip(&standardized)).enumerate() {
                report.samples.push(QqSample {
                    d: cell.d,
                    n,
                    t: cell.t,
                    kappa,
                    replicate: r,
                    seed,
                    estimator,
                    value,
                    standardized: z,
                });
            }
            report.ks.push(KsRow {
                d: cell.d,
                n,
                t: cell.t,
                kappa,
                estimator,
                replicates: spec.replicates,
                mean,
                sd,
                ks_statistic: ks.as_ref().map(|k| k.statistic),
                ks_p_value: ks.as_ref().map(|k| k.p_value),
            });
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// confidence-interval widths

#[derive(Debug, Clone, Serialize)]
pub struct CiReplicate {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub kappa: f64,
    pub replicate: usize,
    pub seed: u64,
    pub w: usize,
    pub w_prime: usize,
    pub estimator: Estimator,
    pub half_width: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CiRow {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub kappa: f64,
    pub w: usize,
    pub w_prime: usize,
    pub estimator: Estimator,
    pub replicates: usize,
    pub mean_half_width: f64,
}

#[derive(Debug, Clone)]
pub struct CiReport {
    pub rows: Vec<CiRow>,
    pub replicates: Vec<CiReplicate>,
}

impl CiReport {
    pub fn half_width(&self, kappa: f64, w_prime: usize, estimator: Estimator) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.kappa == kappa && r.w_prime == w_prime && r.estimator == estimator)
            .map(|r| r.mean_half_width)
    }
}

/// 95% half-widths for entries `(0, 0..10)`: empirical PMI with the
/// patient-level variance, and the low-rank estimate with both paths.
pub fn ci_width(spec: &BenchSpec) -> Result<CiReport> {
    spec.validate()?;
    let g = &spec.grid;
    let n = first_n(spec);
    let mut report = CiReport { rows: Vec::new(), replicates: Vec::new() };
    for cell in spec.cells() {
        let kappa = cell.kappa.expect("validated");
        let entries = CI_ENTRIES.min(cell.d);
        let emb_cfg = cell.sim_config(spec, n, spec.embedding_seed(&cell));
        let embedding = simgen::scaled_embeddings(&emb_cfg)?;
        let process = emb_cfg.process()?;
        let lengths = vec![cell.t; n];
        let per_rep = (0..spec.replicates)
            .into_par_iter()
            .map(|r| {
                let seed = spec.replicate_seed(&cell, r);
                let cohort = simgen::simulate_cohort(&embedding, &lengths, &process, seed)?;
                let patients = accumulate_cohort(&cohort, g.q)?;
                let summary = merge(&patients)?;
                let hat = spectra::empirical_pmi(&summary, DEFAULT_PMI_FLOOR)?;
                let tilde = spectra::lowrank_pmi(&hat, g.p)?;
                let projector = tilde.projector().expect("low rank");
                let residuals = PatientResiduals::new(patients)?;
                let patient = PatientVariance::new(&residuals, &projector)?;
                let model = NullCovarianceModel::from_summary(&summary)?;
                let null = NullVariance::new(&projector, &model)?;
                let mut out = Vec::new();
                for k in 0..entries {
                    let widths = [
                        (Estimator::Empirical, residuals.var_empirical_entry(0, k)?),
                        (Estimator::LowRank, patient.var(0, k)?.value),
                        (Estimator::LowRankNull, null.var(0, k)?.value),
                    ];
                    for (estimator, var) in widths {
                        out.push(CiReplicate {
                            d: cell.d,
                            n,
                            t: cell.t,
                            kappa,
                            replicate: r,
                            seed,
                            w: 0,
                            w_prime: k,
                            estimator,
                            half_width: Z_95 * var.max(0.0).sqrt(),
                        });
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let reps: Vec<CiReplicate> = per_rep.into_iter().flatten().collect();
        for k in 0..entries {
            for estimator in [Estimator::Empirical, Estimator::LowRank, Estimator::LowRankNull] {
                let hw: Vec<f64> = reps
                    .iter()
                    .filter(|x| x.w_prime == k && x.estimator == estimator)
                    .map(|x| x.half_width)
                    .collect();
                report.rows.push(CiRow {
                    d: cell.d,
                    n,
                    t: cell.t,
                    kappa,
                    w: 0,
                    w_prime: k,
                    estimator,
                    replicates: spec.replicates,
                    mean_half_width: stats::mean(&hw),
                });
            }
        }
        report.replicates.extend(reps);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// power

#[derive(Debug, Clone, Serialize)]
pub struct PowerReplicate {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub kappa: f64,
    pub replicate: usize,
    pub seed: u64,
    pub true_edges: usize,
    pub rejections: usize,
    pub selected: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerRow {
    pub d: usize,
    pub p: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub kappa: f64,
    pub replicates: usize,
    pub true_edges: usize,
    pub rejections: usize,
    pub rate: f64,
}

#[derive(Debug, Clone)]
pub struct PowerReport {
    pub rows: Vec<PowerRow>,
    pub replicates: Vec<PowerReplicate>,
    /// Smallest `|U_wᵀ U_w'|` over true edges, per `d`.
    pub min_inner_product: Vec<(usize, f64)>,
}

/// Inner products below this count as "no edge" in the power study.
const EDGE_TOLERANCE: f64 = 1e-12;

/// Fraction of true edges selected by the full procedure (rank `p`, BY at
/// `alpha`) as the embedding scale `d^{-κ}` varies.
pub fn power(spec: &BenchSpec) -> Result<PowerReport> {
    spec.validate()?;
    let g = &spec.grid;
    let n = first_n(spec);
    let mut report = PowerReport { rows: Vec::new(), replicates: Vec::new(), min_inner_product: Vec::new() };
    for cell in spec.cells() {
        let kappa = cell.kappa.expect("validated");
        let emb_cfg = cell.sim_config(spec, n, spec.embedding_seed(&cell));
        let embedding = simgen::scaled_embeddings(&emb_cfg)?;
        let process = emb_cfg.process()?;
        let gram = embedding.gram();
        let is_edge = |w: usize, v: usize| gram[[w, v]].abs() > EDGE_TOLERANCE * (cell.d as f64).powf(-2.0 * kappa);
        let true_edges = (0..cell.d).map(|w| (w + 1..cell.d).filter(|&v| is_edge(w, v)).count()).sum::<usize>();
        if !report.min_inner_product.iter().any(|&(d, _)| d == cell.d) {
            let scale = (cell.d as f64).powf(2.0 * kappa);
            let min = (0..cell.d)
                .flat_map(|w| (w + 1..cell.d).map(move |v| (w, v)))
                .map(|(w, v)| gram[[w, v]].abs() * scale)
                .fold(f64::INFINITY, f64::min);
            report.min_inner_product.push((cell.d, min));
        }
        let lengths = vec![cell.t; n];
        let mut options = KnitOptions::with_rank(g.p);
        options.alpha = g.alpha;
        let reps = (0..spec.replicates)
            .into_par_iter()
            .map(|r| {
                let seed = spec.replicate_seed(&cell, r);
                let cohort: Cohort = simgen::simulate_cohort(&embedding, &lengths, &process, seed)?;
                let summary = cooccur::summarize(&cohort, g.q, None)?;
                let (_, result) = inference::knit(&summary, &options)?;
                let selected = result.selected().count();
                let rejections = result.selected().filter(|e| is_edge(e.w, e.w_prime)).count();
                Ok(PowerReplicate { d: cell.d, n, t: cell.t, kappa, replicate: r, seed, true_edges, rejections, selected })
            })
            .collect::<Result<Vec<_>>>()?;
        let rejections: usize = reps.iter().map(|x| x.rejections).sum();
        let denom = true_edges * spec.replicates;
        report.rows.push(PowerRow {
            d: cell.d,
            p: g.p,
            n,
            t: cell.t,
            kappa,
            replicates: spec.replicates,
            true_edges,
            rejections,
            rate: if denom == 0 { f64::NAN } else { rejections as f64 / denom as f64 },
        });
        report.replicates.extend(reps);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// driver

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub study: Study,
    pub spec: BenchSpec,
    pub config_hash: String,
    pub seed_rule: &'static str,
    pub seeds: Vec<SeedRecord>,
    pub files: Vec<String>,
    pub started_unix_seconds: u64,
    pub wall_clock_seconds: f64,
}

/// FNV-1a of the canonical JSON encoding of the spec, minus `out_dir`.
pub fn config_hash(spec: &BenchSpec) -> Result<String> {
    let mut value = serde_json::to_value(spec)?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("out_dir");
    }
    let bytes = serde_json::to_vec(&value)?;
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("{hash:016x}"))
}

struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Outputs<'_> {
    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        io::write_rows(&self.dir.join(name), rows)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

/// Run one study and write its tables plus `manifest.json` to `out_dir`.
pub fn run_bench(spec: &BenchSpec) -> Result<Manifest> {
    spec.validate()?;
    let started = Instant::now();
    let started_unix_seconds = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    std::fs::create_dir_all(&spec.out_dir)?;
    let mut out = Outputs { dir: &spec.out_dir, files: Vec::new() };
    log::info!("running {} with {} replicates", spec.study, spec.replicates);
    match spec.study {
        Study::TypeI => {
            let r = type_one_error(spec)?;
            out.csv("type_i.csv", &r.rows)?;
            out.csv("type_i_replicates.csv", &r.replicates)?;
        }
        Study::DecayRate | Study::Robustness => {
            let r = decay_rate(spec)?;
            let stem = spec.study.name();
            out.csv(&format!("{stem}.csv"), &r.rows)?;
            out.csv(&format!("{stem}_fit.csv"), &r.fits)?;
            out.csv(&format!("{stem}_replicates.csv"), &r.replicates)?;
        }
        Study::Qq => {
            let r = qq(spec)?;
            out.csv("qq_samples.csv", &r.samples)?;
            out.csv("qq_ks.csv", &r.ks)?;
        }
        Study::CiWidth => {
            let r = ci_width(spec)?;
            out.csv("ci_width.csv", &r.rows)?;
            out.csv("ci_width_replicates.csv", &r.replicates)?;
        }
        Study::Power => {
            let r = power(spec)?;
            out.csv("power.csv", &r.rows)?;
            out.csv("power_replicates.csv", &r.replicates)?;
        }
    }
    let manifest = Manifest {
        study: spec.study,
        spec: spec.clone(),
        config_hash: config_hash(spec)?,
        seed_rule: "derive_seed(seed, [cell, replicate])",
        seeds: seed_records(spec, &spec.cells()),
        files: out.files,
        started_unix_seconds,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(spec.out_dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut file, &manifest)?;
    std::io::Write::flush(&mut file)?;
    Ok(manifest)
}
