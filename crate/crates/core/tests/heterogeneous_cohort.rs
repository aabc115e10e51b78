//! A cohort with unequal sequence lengths through every stage and format.

use knit_core::cooccur::{accumulate_cohort, merge};
use knit_core::inference::{knit, KnitOptions, RankChoice};
use knit_core::io;
use knit_core::pipeline;
use knit_core::simgen::{Lengths, SimConfig};
use knit_core::variance::PatientResiduals;
use tempfile::tempdir;

fn config() -> SimConfig {
    let mut cfg = SimConfig::new(10, 3, 40, 0, 2, 77);
    cfg.lengths = Lengths::PerPatient((0..40).map(|i| 30 + 7 * (i % 5)).collect());
    cfg.mc_samples = 20_000;
    cfg
}

#[test]
fn unequal_lengths_survive_the_file_formats() {
    let dir = tempdir().unwrap();
    let cfg = config();
    let cohort = pipeline::simulate(&cfg).unwrap();
    assert_eq!(cohort.lengths(), cfg.patient_lengths());

    let patients = accumulate_cohort(&cohort, cfg.q).unwrap();
    let summary = merge(&patients).unwrap();
    let expected: u64 = cfg.patient_lengths().iter().map(|&t| (2 * cfg.q * (t - cfg.q)) as u64).sum();
    assert_eq!(summary.total(), expected);

    let bin = dir.path().join("s.knc");
    let csv = dir.path().join("s.csv");
    io::write_summary(&bin, &summary).unwrap();
    io::write_summary_csv(&csv, &summary).unwrap();
    assert_eq!(io::read_summary(&bin).unwrap(), summary);
    assert_eq!(io::read_summary_csv(&csv).unwrap(), summary);
    assert_eq!(io::read_summary(&bin).unwrap().lengths(), cfg.patient_lengths().as_slice());
}

#[test]
fn residual_weights_follow_lengths() {
    let cfg = config();
    let cohort = pipeline::simulate(&cfg).unwrap();
    let patients = accumulate_cohort(&cohort, cfg.q).unwrap();
    let res = PatientResiduals::new(patients).unwrap();
    let lengths = cfg.patient_lengths();
    let mean = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
    for (i, &t) in lengths.iter().enumerate() {
        let expected = (t as f64 - 2.0) / (mean - 2.0);
        assert!((res.tau(i) - expected).abs() < 1e-12);
    }
}

#[test]
fn knit_with_user_threshold_on_unequal_lengths() {
    let cfg = config();
    let cohort = pipeline::simulate(&cfg).unwrap();
    let summary = merge(&accumulate_cohort(&cohort, cfg.q).unwrap()).unwrap();
    let mut options = KnitOptions::with_rank(3);
    options.rank = RankChoice::Auto { eta0: Some(1e-3) };
    let (pmi, result) = knit(&summary, &options).unwrap();
    assert_eq!(result.eta0, Some(1e-3));
    assert_eq!(pmi.rank(), Some(result.rank));
    assert_eq!(result.j + result.excluded.len(), 45);
    let proj = pmi.projector().unwrap().dense();
    let sq = proj.dot(&proj);
    assert!(sq.iter().zip(proj.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
    assert!(result.tests.iter().all(|t| t.variance > 0.0 && (0.0..=1.0).contains(&t.p_value)));
}
