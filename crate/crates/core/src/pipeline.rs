//! Stage functions shared by the CLI subcommands.
//!
//! Each stage takes and returns in-memory values; the CLI only adds file
//! reading and writing around them. Running the stages one after another
//! gives exactly the result of [`run_end_to_end`].

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::cooccur::{self, CooccurrenceSummary, PatientCooccurrence};
use crate::error::{KnitError, Result};
use crate::inference::{self, choose_rank, EdgeTestResult, KnitOptions, RankChoice};
use crate::io::{self, PmiMetadata, VarianceRow};
use crate::simgen::{self, Cohort, SimConfig};
use crate::spectra::{self, PmiEstimate};
use crate::variance::{NullCovarianceModel, NullVariance, PatientResiduals, PatientVariance};

/// Draw the cohort described by `cfg`.
pub fn simulate(cfg: &SimConfig) -> Result<Cohort> {
    cfg.validate()?;
    let embedding = simgen::embeddings_for(cfg)?;
    let process = cfg.process()?;
    simgen::simulate_cohort(&embedding, &cfg.patient_lengths(), &process, cfg.seed)
}

/// Empirical PMI followed by the rank-`p` truncation.
pub fn estimate(summary: &CooccurrenceSummary, rank: RankChoice, pmi_floor: f64) -> Result<(PmiMetadata, PmiEstimate)> {
    let pmi_hat = spectra::empirical_pmi(summary, pmi_floor)?;
    let (p, eta0) = choose_rank(&pmi_hat, summary, rank)?;
    let pmi = spectra::lowrank_pmi(&pmi_hat, p)?;
    let meta = PmiMetadata {
        d: summary.d(),
        p,
        q: summary.q(),
        n: summary.n(),
        t_mean: summary.mean_length(),
        eta: pmi_floor,
        eta0,
    };
    Ok((meta, pmi))
}

/// Every unordered off-diagonal pair `w < w'`.
pub fn all_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|w| (w + 1..d).map(move |v| (w, v))).collect()
}

/// Variance of `PMI-tilde` at the requested pairs. With `patients` the
/// patient-level path is used and their pooled counts must equal `summary`;
/// otherwise the global-null path.
pub fn variances(
    summary: &CooccurrenceSummary,
    pmi: &PmiEstimate,
    pairs: &[(usize, usize)],
    patients: Option<Vec<PatientCooccurrence>>,
) -> Result<Vec<VarianceRow>> {
    let projector = pmi
        .projector()
        .ok_or_else(|| KnitError::invalid("variances need a low-rank estimate"))?;
    let d = summary.d();
    if pmi.d() != d {
        return Err(KnitError::Dimension(format!("estimate has d = {}, summary has d = {d}", pmi.d())));
    }
    if let Some(&(w, v)) = pairs.iter().find(|&&(w, v)| w >= d || v >= d) {
        return Err(KnitError::invalid(format!("pair ({w}, {v}) outside vocabulary of size {d}")));
    }
    let row = |w: usize, v: usize, var: crate::variance::EntryVariance| VarianceRow {
        w,
        w_prime: v,
        pmi_tilde: pmi.matrix[[w, v]],
        variance: var.value,
        clamped: var.clamped,
    };
    match patients {
        Some(patients) => {
            let residuals = PatientResiduals::new(patients)?;
            if residuals.summary() != summary {
                return Err(KnitError::invalid("per-patient counts do not add up to the cohort summary"));
            }
            let var = PatientVariance::new(&residuals, &projector)?;
            pairs.par_iter().map(|&(w, v)| Ok(row(w, v, var.var(w, v)?))).collect()
        }
        None => {
            let model = NullCovarianceModel::from_summary(summary)?;
            let var = NullVariance::new(&projector, &model)?;
            pairs.par_iter().map(|&(w, v)| Ok(row(w, v, var.var(w, v)?))).collect()
        }
    }
}

/// Edge tests; reuses `stored` when given instead of re-estimating.
pub fn infer(
    summary: &CooccurrenceSummary,
    stored: Option<(&PmiMetadata, &PmiEstimate)>,
    options: &KnitOptions,
) -> Result<(PmiEstimate, EdgeTestResult)> {
    match stored {
        None => inference::knit(summary, options),
        Some((meta, pmi)) => {
            if meta.d != summary.d() || meta.n != summary.n() || meta.q != summary.q() {
                return Err(KnitError::invalid("stored estimate was built from a different summary"));
            }
            let result = inference::test_edges(summary, pmi, meta.eta0, options)?;
            Ok((pmi.clone(), result))
        }
    }
}

/// Simulate, count with the config's window and run the full procedure.
pub fn run_end_to_end(cfg: &SimConfig, options: &KnitOptions) -> Result<(CooccurrenceSummary, PmiEstimate, EdgeTestResult)> {
    let cohort = simulate(cfg)?;
    let summary = cooccur::summarize(&cohort, cfg.q, None)?;
    let (pmi, result) = inference::knit(&summary, options)?;
    Ok((summary, pmi, result))
}

fn patient_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("patient-{i:08}.knc"))
}

/// One `.knc` file per patient (`n = 1` each), named by patient index.
pub fn write_patient_dir(dir: &Path, patients: &[PatientCooccurrence]) -> Result<()> {
    fs::create_dir_all(dir)?;
    patients
        .par_iter()
        .enumerate()
        .try_for_each(|(i, p)| io::write_summary(&patient_file(dir, i), &p.to_summary()))
}

/// All `.knc` files of `dir` in file-name order.
pub fn read_patient_dir(dir: &Path) -> Result<Vec<PatientCooccurrence>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "knc") {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(KnitError::invalid(format!("no .knc files in {}", dir.display())));
    }
    paths.sort();
    paths
        .par_iter()
        .map(|p| PatientCooccurrence::from_summary(&io::read_summary(p)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cooccur::accumulate_cohort;
    use crate::simgen::DiscourseKind;
    use tempfile::tempdir;

    fn small_config() -> SimConfig {
        let mut cfg = SimConfig::new(8, 2, 30, 60, 2, 11);
        cfg.mc_samples = 20_000;
        cfg.process = DiscourseKind::Ar1;
        cfg
    }

    #[test]
    fn staged_run_equals_end_to_end() {
        let cfg = small_config();
        let options = KnitOptions::with_rank(2);
        let (summary, pmi, result) = run_end_to_end(&cfg, &options).unwrap();

        let cohort = simulate(&cfg).unwrap();
        let staged = cooccur::summarize(&cohort, cfg.q, None).unwrap();
        assert_eq!(staged, summary);
        let (meta, est) = estimate(&staged, options.rank, options.pmi_floor).unwrap();
        assert_eq!(est, pmi);
        let (_, staged_result) = infer(&staged, Some((&meta, &est)), &options).unwrap();
        assert_eq!(staged_result, result);
    }

    #[test]
    fn both_variance_paths_cover_requested_pairs() {
        let cfg = small_config();
        let cohort = simulate(&cfg).unwrap();
        let patients = accumulate_cohort(&cohort, cfg.q).unwrap();
        let summary = cooccur::merge(&patients).unwrap();
        let (_, pmi) = estimate(&summary, RankChoice::Fixed(2), 1e-6).unwrap();
        let pairs = all_pairs(8);
        assert_eq!(pairs.len(), 28);
        let null = variances(&summary, &pmi, &pairs, None).unwrap();
        let patient = variances(&summary, &pmi, &pairs, Some(patients)).unwrap();
        for (a, b) in null.iter().zip(&patient) {
            assert_eq!((a.w, a.w_prime, a.pmi_tilde), (b.w, b.w_prime, b.pmi_tilde));
            assert!(a.variance >= 0.0 && b.variance >= 0.0);
        }
    }

    #[test]
    fn patient_dir_round_trip() {
        let dir = tempdir().unwrap();
        let cfg = small_config();
        let cohort = simulate(&cfg).unwrap();
        let patients = accumulate_cohort(&cohort, cfg.q).unwrap();
        write_patient_dir(dir.path(), &patients).unwrap();
        assert_eq!(read_patient_dir(dir.path()).unwrap(), patients);
    }

    #[test]
    fn mismatched_patients_are_rejected() {
        let cfg = small_config();
        let cohort = simulate(&cfg).unwrap();
        let patients = accumulate_cohort(&cohort, cfg.q).unwrap();
        let summary = cooccur::merge(&patients).unwrap();
        let (_, pmi) = estimate(&summary, RankChoice::Fixed(2), 1e-6).unwrap();
        let err = variances(&summary, &pmi, &[(0, 1)], Some(patients[..10].to_vec())).unwrap_err();
        assert!(matches!(err, KnitError::InvalidInput(_)));
    }
}
