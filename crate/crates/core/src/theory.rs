//! Simulator for in-context linear regression with a trained linear
//! self-attention predictor, iterated through the server/client exchange.
//!
//! Each round, every client (1) predicts labels for its own queries from
//! the server's current (query, answer) pairs, then (2) answers the server
//! queries from its 2N pairs (true labels plus those predictions). The
//! server averages client answers with fixed weights. Because every step
//! is linear in the answers, server answers stay of the form `q . theta_k`;
//! `theta_k` is recovered by probing the client predictors with the
//! standard basis.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::trust_weights;

/// `(1 + 1/T) Lambda + (tr(Lambda) / T) I`.
pub fn make_gamma(covariance: &DMatrix<f64>, t: usize) -> Result<DMatrix<f64>> {
    check_spd(covariance)?;
    if t == 0 {
        return Err(Error::invalid("prompt length T must be at least 1"));
    }
    let t = t as f64;
    let d = covariance.nrows();
    Ok(covariance * (1.0 + 1.0 / t) + DMatrix::identity(d, d) * (covariance.trace() / t))
}

fn check_spd(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::invalid("covariance must be a non-empty square matrix"));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::invalid("covariance must be symmetric"));
    }
    if Cholesky::new(m.clone()).is_none() {
        return Err(Error::invalid("covariance must be positive definite"));
    }
    Ok(())
}

/// Factorized preconditioner; applying its inverse is a pair of triangular
/// solves.
#[derive(Debug, Clone)]
pub struct LsaPredictor {
    factor: Cholesky<f64, Dyn>,
}

impl LsaPredictor {
    pub fn new(gamma: &DMatrix<f64>) -> Result<Self> {
        let factor = Cholesky::new(gamma.clone())
            .ok_or_else(|| Error::Numerical("preconditioner is not positive definite".into()))?;
        Ok(LsaPredictor { factor })
    }

    /// `Gamma^{-1} mean(y_i x_i)`: the linear map the predictor applies to
    /// any query.
    pub fn weights(&self, xs: &[DVector<f64>], ys: &[f64]) -> Result<DVector<f64>> {
        if xs.len() != ys.len() {
            return Err(Error::invalid("predictor needs equally many inputs and labels"));
        }
        self.weights_from_pairs(xs.iter().zip(ys.iter().copied()))
    }

    /// As [`LsaPredictor::weights`] over borrowed pairs.
    pub fn weights_from_pairs<'a>(
        &self,
        pairs: impl IntoIterator<Item = (&'a DVector<f64>, f64)>,
    ) -> Result<DVector<f64>> {
        let d = self.factor.l_dirty().nrows();
        let mut moment = DVector::zeros(d);
        let mut count = 0usize;
        for (x, y) in pairs {
            if x.len() != d {
                return Err(Error::invalid(format!(
                    "input of dimension {} in a {d}-dimensional model",
                    x.len()
                )));
            }
            moment.axpy(y, x, 1.0);
            count += 1;
        }
        if count == 0 {
            return Err(Error::invalid("predictor needs at least one pair"));
        }
        moment /= count as f64;
        let w = self.factor.solve(&moment);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("solve produced non-finite values".into()));
        }
        Ok(w)
    }
}

/// `x_query^T Gamma^{-1} mean(y_i x_i)`.
pub fn lsa_predict(pairs: &[(DVector<f64>, f64)], query: &DVector<f64>, gamma: &DMatrix<f64>) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("prediction needs at least one pair"));
    }
    if query.len() != gamma.nrows() {
        return Err(Error::invalid("query dimension does not match the preconditioner"));
    }
    let (xs, ys): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    Ok(query.dot(&LsaPredictor::new(gamma)?.weights(&xs, &ys)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    Uniform,
    InverseSigma,
    SoftmaxSigma,
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(WeightScheme::Uniform),
            "inverse_sigma" => Ok(WeightScheme::InverseSigma),
            "softmax_sigma" => Ok(WeightScheme::SoftmaxSigma),
            other => Err(Error::invalid(format!("unknown weight scheme `{other}`"))),
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightScheme::Uniform => "uniform",
            WeightScheme::InverseSigma => "inverse_sigma",
            WeightScheme::SoftmaxSigma => "softmax_sigma",
        })
    }
}

/// Client weights under `scheme`. Inverse-sigma gives all mass, split
/// evenly, to noise-free clients when any exist.
pub fn weight_scheme_weights(scheme: WeightScheme, sigmas: &[f64], tau: f64) -> Result<Vec<f64>> {
    if sigmas.is_empty() {
        return Err(Error::invalid("need at least one client"));
    }
    if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::invalid(format!("noise level {s} must be non-negative")));
    }
    let l = sigmas.len() as f64;
    Ok(match scheme {
        WeightScheme::Uniform => vec![1.0 / l; sigmas.len()],
        WeightScheme::SoftmaxSigma => trust_weights(sigmas, tau)?.weights,
        WeightScheme::InverseSigma => {
            let zeros = sigmas.iter().filter(|s| **s == 0.0).count();
            if zeros > 0 {
                sigmas
                    .iter()
                    .map(|s| if *s == 0.0 { 1.0 / zeros as f64 } else { 0.0 })
                    .collect()
            } else {
                let total: f64 = sigmas.iter().map(|s| 1.0 / s).sum();
                sigmas.iter().map(|s| (1.0 / s) / total).collect()
            }
        }
    })
}

/// The regression world: covariance, ground truth and per-client noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryTask {
    pub covariance: DMatrix<f64>,
    pub theta: DVector<f64>,
    pub client_sigmas: Vec<f64>,
}

impl TheoryTask {
    pub fn new(covariance: DMatrix<f64>, theta: DVector<f64>, client_sigmas: Vec<f64>) -> Result<Self> {
        check_spd(&covariance)?;
        if theta.len() != covariance.nrows() {
            return Err(Error::invalid("theta and covariance dimensions differ"));
        }
        if theta.norm() > 1.0 + 1e-12 {
            return Err(Error::invalid(format!("|theta| = {} exceeds 1", theta.norm())));
        }
        if client_sigmas.is_empty() {
            return Err(Error::invalid("need at least one client"));
        }
        if client_sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        Ok(TheoryTask {
            covariance,
            theta,
            client_sigmas,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Identity covariance and a uniformly random direction of the given
    /// norm.
    pub fn isotropic(dim: usize, theta_norm: f64, client_sigmas: Vec<f64>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0074_6865_7461);
        let theta = random_direction(dim, &mut rng)? * theta_norm;
        Self::new(DMatrix::identity(dim, dim), theta, client_sigmas)
    }

    /// A random well-conditioned covariance `A A^T / d + I / 2` and a random
    /// ground truth with norm in (0, 1].
    pub fn random(dim: usize, client_sigmas: Vec<f64>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0063_6f76_6172);
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cov = (&a * a.transpose()) / dim as f64 + DMatrix::identity(dim, dim) * 0.5;
        let cov = (&cov + cov.transpose()) * 0.5;
        let norm = rng.random_range(0.1..=1.0);
        let theta = random_direction(dim, &mut rng)? * norm;
        Self::new(cov, theta, client_sigmas)
    }
}

fn random_direction(dim: usize, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    if dim == 0 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-9 {
            return Ok(v / n);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    /// Server queries.
    pub m: usize,
    /// Examples per client.
    pub n: usize,
    /// Prompt length entering the preconditioner.
    pub t: usize,
    /// Rounds.
    pub k: usize,
    pub weight_scheme: WeightScheme,
    pub tau: f64,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            m: 256,
            n: 256,
            t: 10_000,
            k: 20,
            weight_scheme: WeightScheme::Uniform,
            tau: 1.0,
            seed: 0,
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("m", self.m), ("n", self.n), ("t", self.t), ("k", self.k)] {
            if v == 0 {
                return Err(Error::Config(format!("theory `{name}` must be at least 1")));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config("theory tau must be positive".into()));
        }
        Ok(())
    }
}

/// One draw of all queries and labels, fixed for a run.
#[derive(Debug, Clone)]
pub struct SampledData {
    pub server_queries: Vec<DVector<f64>>,
    /// Per client: inputs and noisy labels.
    pub client_inputs: Vec<Vec<DVector<f64>>>,
    pub client_labels: Vec<Vec<f64>>,
}

impl SampledData {
    pub fn sample(task: &TheoryTask, m: usize, n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chol = Cholesky::new(task.covariance.clone())
            .ok_or_else(|| Error::invalid("covariance must be positive definite"))?;
        let l = chol.l();
        let d = task.dim();
        let draw = |rng: &mut ChaCha8Rng| -> DVector<f64> {
            &l * DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
        };
        let server_queries = (0..m).map(|_| draw(&mut rng)).collect();
        let mut client_inputs = Vec::with_capacity(task.client_sigmas.len());
        let mut client_labels = Vec::with_capacity(task.client_sigmas.len());
        for &sigma in &task.client_sigmas {
            let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            let xs: Vec<DVector<f64>> = (0..n).map(|_| draw(&mut rng)).collect();
            let ys = xs.iter().map(|x| x.dot(&task.theta) + noise.sample(&mut rng)).collect();
            client_inputs.push(xs);
            client_labels.push(ys);
        }
        Ok(SampledData {
            server_queries,
            client_inputs,
            client_labels,
        })
    }
}

/// Result of one exchange round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub answers: Vec<f64>,
    pub theta: DVector<f64>,
}

/// One round: client self-labeling from the server pairs, client answers
/// to the server queries, and the weighted server average.
pub fn simulate_round(
    answers: &[f64],
    data: &SampledData,
    predictor: &LsaPredictor,
    weights: &[f64],
) -> Result<RoundOutput> {
    let queries = &data.server_queries;
    if answers.len() != queries.len() {
        return Err(Error::invalid("one answer per server query is required"));
    }
    if weights.len() != data.client_inputs.len() {
        return Err(Error::invalid("one weight per client is required"));
    }
    let d = queries.first().map_or(0, |q| q.len());
    let server_map = predictor.weights(queries, answers)?;
    let mut next = vec![0.0; queries.len()];
    let mut theta = DVector::zeros(d);
    for ((xs, ys), &w) in data.client_inputs.iter().zip(&data.client_labels).zip(weights) {
        // true labels, then the client's own predictions from the server pairs
        let own = xs.iter().zip(ys.iter().copied());
        let predicted = xs.iter().map(|x| (x, x.dot(&server_map)));
        let client_map = predictor.weights_from_pairs(own.chain(predicted))?;
        for (a, q) in next.iter_mut().zip(queries) {
            *a += w * q.dot(&client_map);
        }
        for j in 0..d {
            theta[j] += w * DVector::from_fn(d, |i, _| f64::from(i == j)).dot(&client_map);
        }
    }
    Ok(RoundOutput { answers: next, theta })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `theta_k` for rounds 0..=K (round 0 is the zero start).
    pub theta_k: Vec<DVector<f64>>,
    /// `|theta_k - theta|` per round.
    pub errors: Vec<f64>,
    /// Per round, the largest `|a - theta_k . q| / (1 + |a|)` over queries.
    pub linearity_residuals: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Trajectory {
    pub fn final_error(&self) -> f64 {
        *self.errors.last().expect("trajectory is never empty")
    }
}

/// Samples data once and iterates `config.k` rounds from zero answers.
pub fn run_theory(task: &TheoryTask, config: &TheoryConfig) -> Result<Trajectory> {
    config.validate()?;
    let data = SampledData::sample(task, config.m, config.n, config.seed)?;
    let weights = weight_scheme_weights(config.weight_scheme, &task.client_sigmas, config.tau)?;
    run_on_data(task, &data, config, weights)
}

/// Like [`run_theory`] with caller-supplied data and weights.
pub fn run_on_data(
    task: &TheoryTask,
    data: &SampledData,
    config: &TheoryConfig,
    weights: Vec<f64>,
) -> Result<Trajectory> {
    let predictor = LsaPredictor::new(&make_gamma(&task.covariance, config.t)?)?;
    let mut answers = vec![0.0; data.server_queries.len()];
    let mut theta = DVector::zeros(task.dim());
    let mut trajectory = Trajectory {
        theta_k: vec![theta.clone()],
        errors: vec![(&theta - &task.theta).norm()],
        linearity_residuals: vec![0.0],
        weights: weights.clone(),
    };
    for _ in 0..config.k {
        let out = simulate_round(&answers, data, &predictor, &weights)?;
        answers = out.answers;
        theta = out.theta;
        let residual = answers
            .iter()
            .zip(&data.server_queries)
            .map(|(a, q)| (a - theta.dot(q)).abs() / (1.0 + a.abs()))
            .fold(0.0, f64::max);
        trajectory.errors.push((&theta - &task.theta).norm());
        trajectory.theta_k.push(theta.clone());
        trajectory.linearity_residuals.push(residual);
    }
    Ok(trajectory)
}

/// A grid of runs over example counts, schemes and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub dim: usize,
    pub sigmas: Vec<f64>,
    pub theta_norm: f64,
    pub ns: Vec<usize>,
    /// Server queries; `None` ties M to N.
    pub m: Option<usize>,
    pub t: usize,
    pub k: usize,
    pub tau: f64,
    pub schemes: Vec<WeightScheme>,
    pub seeds: u64,
    pub first_seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            dim: 4,
            sigmas: vec![0.5, 0.5, 0.5],
            theta_norm: 1.0,
            ns: vec![128, 512, 2048],
            m: None,
            t: 10_000,
            k: 20,
            tau: 1.0,
            schemes: vec![WeightScheme::Uniform],
            seeds: 50,
            first_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub scheme: WeightScheme,
    pub n: usize,
    pub seed: u64,
    pub trajectory: Trajectory,
}

/// Runs every (N, scheme, seed) cell. Seeds share the task and data across
/// schemes, so scheme comparisons are paired.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepCell>> {
    let jobs: Vec<(usize, u64)> = spec
        .ns
        .iter()
        .flat_map(|&n| (spec.first_seed..spec.first_seed + spec.seeds).map(move |s| (n, s)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(n, seed)| -> Result<Vec<SweepCell>> {
            let task = TheoryTask::isotropic(spec.dim, spec.theta_norm, spec.sigmas.clone(), seed)?;
            let config = TheoryConfig {
                m: spec.m.unwrap_or(n),
                n,
                t: spec.t,
                k: spec.k,
                weight_scheme: WeightScheme::Uniform,
                tau: spec.tau,
                seed,
            };
            config.validate()?;
            let data = SampledData::sample(&task, config.m, n, seed)?;
            spec.schemes
                .iter()
                .map(|&scheme| {
                    let weights = weight_scheme_weights(scheme, &task.client_sigmas, spec.tau)?;
                    Ok(SweepCell {
                        scheme,
                        n,
                        seed,
                        trajectory: run_on_data(&task, &data, &config, weights)?,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(cells.into_iter().flatten().collect())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Median final error per (scheme, N), in first-seen order.
pub fn median_final_errors(cells: &[SweepCell]) -> Vec<(WeightScheme, usize, f64)> {
    let mut keys: Vec<(WeightScheme, usize)> = Vec::new();
    for c in cells {
        if !keys.contains(&(c.scheme, c.n)) {
            keys.push((c.scheme, c.n));
        }
    }
    keys.into_iter()
        .map(|(scheme, n)| {
            let finals: Vec<f64> = cells
                .iter()
                .filter(|c| c.scheme == scheme && c.n == n)
                .map(|c| c.trajectory.final_error())
                .collect();
            (scheme, n, median(&finals))
        })
        .collect()
}

/// Comma-separated `round,error,scheme,N,seed` rows with a header.
pub fn trajectories_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("round,error,scheme,N,seed\n");
    for c in cells {
        for (round, e) in c.trajectory.errors.iter().enumerate() {
            writeln!(out, "{round},{e:.12e},{},{},{}", c.scheme, c.n, c.seed).expect("write to string");
        }
    }
    out
}
