//! Synthetic cohorts from the dynamic log-linear topic model.
//!
//! At each step a patient emits one code drawn from `softmax(V c_t)`, where
//! `c_t` is a latent discourse vector that drifts slowly. Three drift laws
//! are provided: the stationary AR(1) process the theory is built on, and two
//! misspecified alternatives (a random walk on the unit sphere and an
//! ARMA(1,3) process) used for robustness studies.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KnitError, Result};
use crate::rng::{stream, Purpose, StreamRng};

/// MA coefficients on `r_t`, `r_{t-1}`, `r_{t-2}` of the ARMA(1,3) drift.
pub const ARMA_COEFFS: [f64; 3] = [0.2, 0.1, 0.05];
/// Steps discarded before `t = 1` when the ARMA drift starts from zero lags.
pub const ARMA_BURN_IN: usize = 100;
/// Default number of Monte-Carlo draws for the marginal occurrence vector.
pub const DEFAULT_MC_SAMPLES: usize = 1_000_000;
/// Smallest accepted Monte-Carlo sample size in a simulation config.
pub const MIN_MC_SAMPLES: usize = 10_000;

const MC_CHUNK: usize = 1 << 14;

/// Knowledge-graph embedding `V` (`d x p`, one row per code).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Array2<f64>,
    centering: Array1<f64>,
    mc_marginals: Option<Array1<f64>>,
}

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let p = values.ncols();
        Self::with_centering(values, Array1::zeros(p), None)
    }

    fn with_centering(
        values: Array2<f64>,
        centering: Array1<f64>,
        mc_marginals: Option<Array1<f64>>,
    ) -> Result<Self> {
        let (d, p) = values.dim();
        if d < 2 || p < 1 {
            return Err(KnitError::Dimension(format!(
                "embedding must be at least 2 x 1, got {d} x {p}"
            )));
        }
        if centering.len() != p {
            return Err(KnitError::Dimension(format!(
                "centering vector has length {}, expected {p}",
                centering.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(KnitError::numerical("non-finite embedding entry"));
        }
        let values = values.as_standard_layout().into_owned();
        Ok(Self { values, centering, mc_marginals })
    }

    pub fn d(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// The vector `V_initᵀ p_mc` that was subtracted from every row (zero for
    /// embeddings that were not centred).
    pub fn centering_vector(&self) -> &Array1<f64> {
        &self.centering
    }

    /// Monte-Carlo marginal vector used for centring, if any.
    pub fn mc_marginals(&self) -> Option<&Array1<f64>> {
        self.mc_marginals.as_ref()
    }

    /// `V Vᵀ`.
    pub fn gram(&self) -> Array2<f64> {
        self.values.dot(&self.values.t())
    }

    /// Singular values of `V`, descending.
    pub fn singular_values(&self) -> Vec<f64> {
        let vtv = self.values.t().dot(&self.values);
        let p = vtv.nrows();
        let m = DMatrix::from_fn(p, p, |i, j| vtv[[i, j]]);
        let mut s: Vec<f64> = m
            .symmetric_eigenvalues()
            .iter()
            .map(|l| l.max(0.0).sqrt())
            .collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// Largest scaled singular value `κ = √α_p · σ_max(V)`.
    pub fn kappa(&self, alpha_p: f64) -> f64 {
        alpha_p.sqrt() * self.singular_values()[0]
    }

    /// Condition ratio `ξ = σ_min(V) / σ_max(V)`.
    pub fn xi(&self) -> f64 {
        let s = self.singular_values();
        s[s.len() - 1] / s[0]
    }
}

/// Drift law of the latent discourse vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DiscourseKind {
    #[default]
    Ar1,
    Sphere,
    Arma13,
}

impl DiscourseKind {
    pub fn name(self) -> &'static str {
        match self {
            DiscourseKind::Ar1 => "ar1",
            DiscourseKind::Sphere => "sphere",
            DiscourseKind::Arma13 => "arma13",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscourseProcess {
    pub kind: DiscourseKind,
    /// Persistence `α`; `c_{t+1} = √α c_t + √(1-α) r_{t+1}` for AR(1).
    pub alpha: f64,
    pub dim: usize,
    /// Norm scale of one tangent step of the sphere walk.
    pub sphere_step: f64,
}

/// `α = 1 - ln(d) / p²`.
pub fn default_alpha(d: usize, p: usize) -> f64 {
    1.0 - (d as f64).ln() / (p as f64 * p as f64)
}

impl DiscourseProcess {
    pub fn new(kind: DiscourseKind, alpha: f64, dim: usize, sphere_step: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(KnitError::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if dim == 0 {
            return Err(KnitError::invalid("discourse dimension must be positive"));
        }
        if !(sphere_step.is_finite() && sphere_step >= 0.0) {
            return Err(KnitError::invalid("sphere step must be finite and non-negative"));
        }
        Ok(Self { kind, alpha, dim, sphere_step })
    }

    pub fn ar1(alpha: f64, dim: usize) -> Result<Self> {
        Self::new(DiscourseKind::Ar1, alpha, dim, 0.0)
    }

    /// Process with the model defaults for a `d`-code vocabulary and
    /// dimension `p`: `α = 1 - ln d / p²`, sphere step `√(ln d) / p`.
    pub fn for_model(kind: DiscourseKind, d: usize, p: usize) -> Result<Self> {
        let alpha = default_alpha(d, p);
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(KnitError::invalid(format!(
                "default alpha = 1 - ln({d})/{p}^2 = {alpha} is outside (0, 1)"
            )));
        }
        Self::new(kind, alpha, p, (d as f64).ln().sqrt() / p as f64)
    }
}

/// Current discourse vector plus the three most recent innovations (only
/// used by the ARMA drift).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscourseState {
    pub c: Vec<f64>,
    pub lags: [Vec<f64>; 3],
}

impl DiscourseState {
    pub fn from_vector(c: Vec<f64>) -> Self {
        let p = c.len();
        Self { c, lags: [vec![0.0; p], vec![0.0; p], vec![0.0; p]] }
    }

    /// Draw `c_1` from the stationary law of the process (`N(0, I/p)` for
    /// AR(1), uniform on the unit sphere for the walk). The ARMA drift starts
    /// from zero innovations and is burned in.
    pub fn initial(process: &DiscourseProcess, rng: &mut StreamRng) -> Self {
        let p = process.dim;
        match process.kind {
            DiscourseKind::Ar1 => Self::from_vector(gaussian_vec(p, 1.0 / (p as f64).sqrt(), rng)),
            DiscourseKind::Sphere => {
                let mut c = gaussian_vec(p, 1.0, rng);
                normalize(&mut c);
                Self::from_vector(c)
            }
            DiscourseKind::Arma13 => {
                let mut s = Self::from_vector(gaussian_vec(p, 1.0 / (p as f64).sqrt(), rng));
                let mut scratch = vec![0.0; p];
                for _ in 0..ARMA_BURN_IN {
                    s.advance(process, rng, &mut scratch);
                }
                s
            }
        }
    }

    /// In-place version of [`step_discourse`]; `scratch` has length `p`.
    pub fn advance(&mut self, process: &DiscourseProcess, rng: &mut StreamRng, scratch: &mut [f64]) {
        let p = self.c.len();
        let sd = 1.0 / (p as f64).sqrt();
        match process.kind {
            DiscourseKind::Ar1 => {
                let a = process.alpha.sqrt();
                let b = (1.0 - process.alpha).sqrt();
                for x in self.c.iter_mut() {
                    let r: f64 = StandardNormal.sample(rng);
                    *x = a * *x + b * sd * r;
                }
            }
            DiscourseKind::Sphere => {
                for g in scratch.iter_mut() {
                    let r: f64 = StandardNormal.sample(rng);
                    *g = r * process.sphere_step * sd;
                }
                let proj: f64 = scratch.iter().zip(&self.c).map(|(g, c)| g * c).sum();
                for (x, g) in self.c.iter_mut().zip(scratch.iter()) {
                    *x += g - proj * *x;
                }
                normalize(&mut self.c);
            }
            DiscourseKind::Arma13 => {
                let a = process.alpha.sqrt();
                let b = (1.0 - process.alpha).sqrt();
                for r in scratch.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *r = z * sd;
                }
                #[allow(clippy::needless_range_loop)]
                for k in 0..p {
                    self.c[k] = a * self.c[k]
                        + b * scratch[k]
                        + ARMA_COEFFS[0] * self.lags[0][k]
                        + ARMA_COEFFS[1] * self.lags[1][k]
                        + ARMA_COEFFS[2] * self.lags[2][k];
                }
                self.lags.rotate_right(1);
                self.lags[0].copy_from_slice(scratch);
            }
        }
    }
}

/// One step of the discourse drift.
pub fn step_discourse(
    state: &DiscourseState,
    process: &DiscourseProcess,
    rng: &mut StreamRng,
) -> DiscourseState {
    let mut next = state.clone();
    let mut scratch = vec![0.0; state.c.len()];
    next.advance(process, rng, &mut scratch);
    next
}

fn gaussian_vec(p: usize, sd: f64, rng: &mut StreamRng) -> Vec<f64> {
    (0..p)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sd
        })
        .collect()
}

fn normalize(c: &mut [f64]) {
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        c.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Unnormalised softmax weights of `V c` into `out` (max-subtracted); returns
/// their sum.
fn softmax_weights(values: &[f64], p: usize, c: &[f64], out: &mut [f64]) -> Result<f64> {
    let mut max = f64::NEG_INFINITY;
    for (w, row) in values.chunks_exact(p).enumerate() {
        let mut s = 0.0;
        for k in 0..p {
            s += row[k] * c[k];
        }
        out[w] = s;
        max = max.max(s);
    }
    if !max.is_finite() {
        return Err(KnitError::numerical("non-finite logit in code probabilities"));
    }
    let mut total = 0.0;
    for x in out.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    Ok(total)
}

/// `P(w | c) = softmax(V c)_w` for every code.
pub fn code_probabilities(embedding: &EmbeddingMatrix, c: &[f64]) -> Result<Array1<f64>> {
    if c.len() != embedding.p() {
        return Err(KnitError::Dimension(format!(
            "discourse vector has length {}, embedding dimension is {}",
            c.len(),
            embedding.p()
        )));
    }
    let mut out = vec![0.0; embedding.d()];
    let total = softmax_weights(embedding.values.as_slice().expect("standard layout"), embedding.p(), c, &mut out)?;
    Ok(Array1::from_iter(out.into_iter().map(|x| x / total)))
}

/// One patient's code sequence over the vocabulary `[0, d)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodeSequence(Vec<u32>);

impl CodeSequence {
    pub fn new(codes: Vec<u32>, d: usize) -> Result<Self> {
        if codes.is_empty() {
            return Err(KnitError::invalid("code sequence must be non-empty"));
        }
        if let Some(bad) = codes.iter().find(|&&c| c as usize >= d) {
            return Err(KnitError::invalid(format!("code {bad} outside vocabulary of size {d}")));
        }
        Ok(Self(codes))
    }

    pub fn codes(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `n` code sequences over a common vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cohort {
    pub d: usize,
    pub sequences: Vec<CodeSequence>,
}

impl Cohort {
    pub fn n(&self) -> usize {
        self.sequences.len()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(CodeSequence::len).collect()
    }

    /// Pooled occurrence counts of every code.
    pub fn code_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.d];
        for s in &self.sequences {
            for &c in s.codes() {
                counts[c as usize] += 1;
            }
        }
        counts
    }
}

/// Draw a length-`len` sequence from the topic model.
pub fn sample_sequence(
    embedding: &EmbeddingMatrix,
    len: usize,
    process: &DiscourseProcess,
    rng: &mut StreamRng,
) -> Result<CodeSequence> {
    if process.dim != embedding.p() {
        return Err(KnitError::Dimension(format!(
            "process dimension {} does not match embedding dimension {}",
            process.dim,
            embedding.p()
        )));
    }
    if len == 0 {
        return Err(KnitError::invalid("sequence length must be at least 1"));
    }
    let d = embedding.d();
    let p = embedding.p();
    let values = embedding.values.as_slice().expect("standard layout");
    let mut state = DiscourseState::initial(process, rng);
    let mut weights = vec![0.0; d];
    let mut scratch = vec![0.0; p];
    let mut codes = Vec::with_capacity(len);
    for t in 0..len {
        let total = softmax_weights(values, p, &state.c, &mut weights)?;
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut code = d - 1;
        for (w, &x) in weights.iter().enumerate() {
            acc += x;
            if target < acc {
                code = w;
                break;
            }
        }
        codes.push(code as u32);
        if t + 1 < len {
            state.advance(process, rng, &mut scratch);
        }
    }
    Ok(CodeSequence(codes))
}

/// Draw a whole cohort; patient `i` uses the stream keyed by `(seed, i)` so
/// the result does not depend on the worker count.
pub fn simulate_cohort(
    embedding: &EmbeddingMatrix,
    lengths: &[usize],
    process: &DiscourseProcess,
    seed: u64,
) -> Result<Cohort> {
    let sequences = lengths
        .par_iter()
        .enumerate()
        .map(|(i, &len)| {
            let mut rng = stream(seed, Purpose::Patient, i as u64);
            sample_sequence(embedding, len, process, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort { d: embedding.d(), sequences })
}

/// Global-null cohort: every code i.i.d. `Multinomial(1, p_vec)`.
pub fn sample_null_cohort(p_vec: &[f64], n: usize, len: usize, seed: u64) -> Result<Cohort> {
    let d = p_vec.len();
    if d == 0 {
        return Err(KnitError::invalid("empty probability vector"));
    }
    if p_vec.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
        return Err(KnitError::invalid("probabilities must be finite and non-negative"));
    }
    let total: f64 = p_vec.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(KnitError::invalid(format!("probabilities sum to {total}, not 1")));
    }
    if len == 0 {
        return Err(KnitError::invalid("sequence length must be at least 1"));
    }
    let mut cdf = Vec::with_capacity(d);
    let mut acc = 0.0;
    for &x in p_vec {
        acc += x;
        cdf.push(acc);
    }
    let last_positive = p_vec.iter().rposition(|&x| x > 0.0).expect("mass sums to one");
    let sequences = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, Purpose::NullPatient, i as u64);
            let codes = (0..len)
                .map(|_| {
                    let u = rng.random::<f64>() * acc;
                    cdf.partition_point(|&c| c <= u).min(last_positive) as u32
                })
                .collect();
            CodeSequence(codes)
        })
        .collect();
    Ok(Cohort { d, sequences })
}

/// Per-patient sequence lengths: either one common `T` or an explicit list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Lengths {
    Uniform(usize),
    PerPatient(Vec<usize>),
}

/// Simulation configuration (the JSON accepted by `knit simulate`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub d: usize,
    pub p: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub lengths: Lengths,
    pub q: usize,
    #[serde(default)]
    pub kappa_exponent: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub process: DiscourseKind,
    /// Overrides the default `1 - ln d / p²`.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub sphere_step: Option<f64>,
}

fn default_mc_samples() -> usize {
    DEFAULT_MC_SAMPLES
}

impl SimConfig {
    /// Config with the AR(1) defaults and a common length `t`.
    pub fn new(d: usize, p: usize, n: usize, t: usize, q: usize, seed: u64) -> Self {
        Self {
            d,
            p,
            n,
            lengths: Lengths::Uniform(t),
            q,
            kappa_exponent: None,
            seed,
            mc_samples: DEFAULT_MC_SAMPLES,
            process: DiscourseKind::Ar1,
            alpha: None,
            sphere_step: None,
        }
    }

    pub fn patient_lengths(&self) -> Vec<usize> {
        match &self.lengths {
            Lengths::Uniform(t) => vec![*t; self.n],
            Lengths::PerPatient(v) => v.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(KnitError::invalid("d must be at least 2"));
        }
        if self.p < 1 || self.p > self.d {
            return Err(KnitError::invalid(format!("p must lie in [1, d], got {}", self.p)));
        }
        if self.q < 1 {
            return Err(KnitError::invalid("window q must be at least 1"));
        }
        if self.n < 1 {
            return Err(KnitError::invalid("n must be at least 1"));
        }
        if let Lengths::PerPatient(v) = &self.lengths {
            if v.len() != self.n {
                return Err(KnitError::Dimension(format!(
                    "{} lengths given for n = {}",
                    v.len(),
                    self.n
                )));
            }
        }
        if let Some(&t) = self.patient_lengths().iter().find(|&&t| t <= 2 * self.q) {
            return Err(KnitError::invalid(format!(
                "sequence length {t} must exceed 2q = {}",
                2 * self.q
            )));
        }
        if self.kappa_exponent.is_none() && self.mc_samples < MIN_MC_SAMPLES {
            return Err(KnitError::invalid(format!(
                "mc_samples must be at least {MIN_MC_SAMPLES}, got {}",
                self.mc_samples
            )));
        }
        self.process()?;
        Ok(())
    }

    pub fn process(&self) -> Result<DiscourseProcess> {
        let mut proc = DiscourseProcess::for_model(self.process, self.d, self.p)
            .or_else(|e| match self.alpha {
                Some(a) => DiscourseProcess::new(self.process, a, self.p, (self.d as f64).ln().sqrt() / self.p as f64),
                None => Err(e),
            })?;
        if let Some(a) = self.alpha {
            proc = DiscourseProcess::new(proc.kind, a, proc.dim, proc.sphere_step)?;
        }
        if let Some(s) = self.sphere_step {
            proc = DiscourseProcess::new(proc.kind, proc.alpha, proc.dim, s)?;
        }
        Ok(proc)
    }
}

/// `d x p` Gaussian matrix with orthonormalised columns.
fn orthonormal_gaussian(d: usize, p: usize, seed: u64) -> Result<Array2<f64>> {
    if p > d {
        return Err(KnitError::Dimension(format!("cannot fit {p} orthonormal columns in R^{d}")));
    }
    let mut rng = stream(seed, Purpose::Embedding, 0);
    let g = DMatrix::from_fn(d, p, |_, _| StandardNormal.sample(&mut rng));
    if g.iter().any(|x: &f64| !x.is_finite()) {
        return Err(KnitError::numerical("non-finite Gaussian draw"));
    }
    let q = g.qr().q();
    Ok(Array2::from_shape_fn((d, p), |(i, j)| q[(i, j)]))
}

/// Three-step construction: orthonormal Gaussian basis, Monte-Carlo
/// marginals under the stationary discourse law, then centring every row by
/// `V_initᵀ p_mc`.
pub fn build_embeddings(cfg: &SimConfig) -> Result<EmbeddingMatrix> {
    cfg.validate()?;
    if cfg.mc_samples == 0 {
        return Err(KnitError::invalid("mc_samples must be positive"));
    }
    let init = EmbeddingMatrix::new(orthonormal_gaussian(cfg.d, cfg.p, cfg.seed)?)?;
    let p_mc = estimate_marginals_mc(&init, cfg.mc_samples, cfg.seed)?;
    let shift = init.values.t().dot(&p_mc);
    let centred = &init.values - &shift.view().insert_axis(Axis(0));
    EmbeddingMatrix::with_centering(centred, shift, Some(p_mc))
}

/// `V = d^{-κ} U` with `U` an orthonormalised Gaussian matrix; no centring.
pub fn scaled_embeddings(cfg: &SimConfig) -> Result<EmbeddingMatrix> {
    let kappa = cfg
        .kappa_exponent
        .ok_or_else(|| KnitError::invalid("kappa_exponent is not set"))?;
    cfg.validate()?;
    let u = orthonormal_gaussian(cfg.d, cfg.p, cfg.seed)?;
    EmbeddingMatrix::new(u * (cfg.d as f64).powf(-kappa))
}

/// Embedding for a config: scaled when `kappa_exponent` is set, otherwise
/// the three-step centred construction.
pub fn embeddings_for(cfg: &SimConfig) -> Result<EmbeddingMatrix> {
    if cfg.kappa_exponent.is_some() {
        scaled_embeddings(cfg)
    } else {
        build_embeddings(cfg)
    }
}

/// Monte-Carlo estimate of `p_w = E[softmax(V c)_w]`, `c ~ N(0, I/p)`.
pub fn estimate_marginals_mc(embedding: &EmbeddingMatrix, samples: usize, seed: u64) -> Result<Array1<f64>> {
    if samples == 0 {
        return Err(KnitError::invalid("at least one Monte-Carlo sample is required"));
    }
    let d = embedding.d();
    let p = embedding.p();
    let values = embedding.values.as_slice().expect("standard layout");
    let chunks = samples.div_ceil(MC_CHUNK);
    let partials = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = stream(seed, Purpose::Marginals, chunk as u64);
            let count = MC_CHUNK.min(samples - chunk * MC_CHUNK);
            let mut acc = vec![0.0; d];
            let mut weights = vec![0.0; d];
            let sd = 1.0 / (p as f64).sqrt();
            let mut c = vec![0.0; p];
            for _ in 0..count {
                for x in c.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x = z * sd;
                }
                let total = softmax_weights(values, p, &c, &mut weights)?;
                for (a, w) in acc.iter_mut().zip(&weights) {
                    *a += w / total;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0; d];
    for part in partials {
        for (s, x) in sum.iter_mut().zip(part) {
            *s += x;
        }
    }
    let total: f64 = sum.iter().sum();
    Ok(Array1::from_iter(sum.into_iter().map(|x| x / total)))
}

/// Monte-Carlo population PMI under the stationary AR(1) drift:
/// `log( Σ_u p^{(u)}_{w,w'} / (q p_w p_{w'}) )` where `p^{(u)}` is the joint
/// law of codes `u` steps apart. Used as the ground truth in bias studies.
pub fn population_pmi(
    embedding: &EmbeddingMatrix,
    alpha: f64,
    q: usize,
    samples: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if samples == 0 || q == 0 {
        return Err(KnitError::invalid("samples and q must be positive"));
    }
    let d = embedding.d();
    let p = embedding.p();
    let values = embedding.values.as_slice().expect("standard layout");
    let sd = 1.0 / (p as f64).sqrt();
    let chunks = samples.div_ceil(MC_CHUNK);
    let partials = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = stream(seed, Purpose::PopulationPmi, chunk as u64);
            let count = MC_CHUNK.min(samples - chunk * MC_CHUNK);
            let mut first = Array2::<f64>::zeros((count, d));
            let mut seconds: Vec<Array2<f64>> = (0..q).map(|_| Array2::zeros((count, d))).collect();
            let mut weights = vec![0.0; d];
            let mut c = vec![0.0; p];
            let mut c2 = vec![0.0; p];
            for m in 0..count {
                for x in c.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x = z * sd;
                }
                let total = softmax_weights(values, p, &c, &mut weights)?;
                for (dst, w) in first.row_mut(m).iter_mut().zip(&weights) {
                    *dst = w / total;
                }
                for (u, sec) in seconds.iter_mut().enumerate() {
                    let lag = (u + 1) as f64;
                    let a = alpha.powf(lag / 2.0);
                    let b = (1.0 - alpha.powf(lag)).sqrt();
                    for (y, x) in c2.iter_mut().zip(&c) {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *y = a * x + b * sd * z;
                    }
                    let total = softmax_weights(values, p, &c2, &mut weights)?;
                    for (dst, w) in sec.row_mut(m).iter_mut().zip(&weights) {
                        *dst = w / total;
                    }
                }
            }
            let mut joint = Array2::<f64>::zeros((d, d));
            let mut marg = first.sum_axis(Axis(0)) * (q as f64);
            for sec in &seconds {
                joint += &first.t().dot(sec);
                marg += &sec.sum_axis(Axis(0));
            }
            Ok((joint, marg))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut joint = Array2::<f64>::zeros((d, d));
    let mut marg = Array1::<f64>::zeros(d);
    for (j, m) in partials {
        joint += &j;
        marg += &m;
    }
    // joint sums q joint laws; marg pools 2q marginal draws
    let joint = (&joint + &joint.t()) / (2.0 * samples as f64);
    let marg = marg / (2.0 * q as f64 * samples as f64);
    let qf = q as f64;
    Ok(Array2::from_shape_fn((d, d), |(i, j)| (joint[[i, j]] / (qf * marg[i] * marg[j])).ln()))
}
