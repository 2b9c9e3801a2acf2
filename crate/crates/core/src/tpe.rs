//! Tree-structured Parzen Estimator over a flat mixed search space.
//!
//! Trials below the `gamma` loss quantile form the "good" set. Each
//! dimension gets one density fitted to good points and one to the rest,
//! and the next suggestion is the candidate, drawn from the good density,
//! that maximises the product of per-dimension density ratios.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TpeError {
    #[error("invalid search space: {0}")]
    Space(String),
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error("no completed trials in the history")]
    NoCompletedTrials,
    #[error("no successful trial among {0}")]
    NoSuccessfulTrial(usize),
    #[error("{path}, line {line}: {reason}")]
    Log {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dimension {
    Categorical { choices: Vec<String> },
    /// Ordered numeric choices, modelled like a categorical.
    Ordinal { choices: Vec<f64> },
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Number(f64),
    Text(String),
}

pub type Point = BTreeMap<String, ParamValue>;

impl Dimension {
    fn validate(&self) -> Result<(), String> {
        match self {
            Dimension::Categorical { choices } if choices.is_empty() => Err("no choices".into()),
            Dimension::Ordinal { choices } if choices.is_empty() => Err("no choices".into()),
            Dimension::Uniform { lo, hi } if !(lo < hi) || !lo.is_finite() || !hi.is_finite() => {
                Err(format!("empty interval [{lo}, {hi}]"))
            }
            Dimension::LogUniform { lo, hi } if !(*lo > 0.0 && lo < hi && hi.is_finite()) => {
                Err(format!("log-uniform needs 0 < lo < hi, got [{lo}, {hi}]"))
            }
            _ => Ok(()),
        }
    }

    pub fn contains(&self, v: &ParamValue) -> bool {
        match (self, v) {
            (Dimension::Categorical { choices }, ParamValue::Text(s)) => choices.contains(s),
            (Dimension::Ordinal { choices }, ParamValue::Number(x)) => choices.contains(x),
            (Dimension::Uniform { lo, hi } | Dimension::LogUniform { lo, hi }, ParamValue::Number(x)) => {
                (*lo..=*hi).contains(x)
            }
            _ => false,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> ParamValue {
        match self {
            Dimension::Categorical { choices } => ParamValue::Text(choices[rng.gen_range(0..choices.len())].clone()),
            Dimension::Ordinal { choices } => ParamValue::Number(choices[rng.gen_range(0..choices.len())]),
            Dimension::Uniform { lo, hi } => ParamValue::Number(rng.gen_range(*lo..=*hi)),
            Dimension::LogUniform { lo, hi } => {
                ParamValue::Number(rng.gen_range(lo.ln()..=hi.ln()).exp().clamp(*lo, *hi))
            }
        }
    }

    /// Index of a discrete value, or the transformed coordinate of a
    /// continuous one.
    fn encode(&self, v: &ParamValue) -> Option<Coord> {
        match (self, v) {
            (Dimension::Categorical { choices }, ParamValue::Text(s)) => {
                choices.iter().position(|c| c == s).map(Coord::Index)
            }
            (Dimension::Ordinal { choices }, ParamValue::Number(x)) => {
                choices.iter().position(|c| c == x).map(Coord::Index)
            }
            (Dimension::Uniform { .. }, ParamValue::Number(x)) => Some(Coord::Real(*x)),
            (Dimension::LogUniform { .. }, ParamValue::Number(x)) if *x > 0.0 => Some(Coord::Real(x.ln())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Coord {
    Index(usize),
    Real(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    dims: Vec<(String, Dimension)>,
}

impl SearchSpace {
    pub fn new(dims: Vec<(String, Dimension)>) -> Result<Self, TpeError> {
        if dims.is_empty() {
            return Err(TpeError::Space("at least one dimension is required".into()));
        }
        for (i, (name, d)) in dims.iter().enumerate() {
            d.validate().map_err(|r| TpeError::Space(format!("{name}: {r}")))?;
            if dims[..i].iter().any(|(n, _)| n == name) {
                return Err(TpeError::Space(format!("duplicate dimension {name}")));
            }
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[(String, Dimension)] {
        &self.dims
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.len() == self.dims.len()
            && self
                .dims
                .iter()
                .all(|(n, d)| p.get(n).is_some_and(|v| d.contains(v)))
    }
}

/// Draw every dimension independently from its prior.
pub fn sample_uniform(space: &SearchSpace, rng: &mut impl Rng) -> Point {
    space
        .dims
        .iter()
        .map(|(n, d)| (n.clone(), d.sample(rng)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Startup,
    Tpe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: Point,
    /// `None` marks a failed evaluation.
    pub loss: Option<f64>,
    pub provenance: Provenance,
    pub wall_time_s: f64,
}

impl Trial {
    pub fn failed(&self) -> bool {
        self.loss.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    pub n_trials: usize,
    pub n_startup: usize,
    pub gamma: f64,
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            n_trials: 300,
            n_startup: 50,
            gamma: 0.25,
            n_candidates: 24,
            seed: 0,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<(), TpeError> {
        if self.n_startup > self.n_trials || self.n_trials == 0 {
            return Err(TpeError::Config(format!(
                "need 0 < n_trials and n_startup <= n_trials, got {} and {}",
                self.n_trials, self.n_startup
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(TpeError::Config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if self.n_candidates == 0 {
            return Err(TpeError::Config("n_candidates must be at least 1".into()));
        }
        Ok(())
    }
}

/// Losses used for modelling: failed trials get ten times the worst
/// finite loss.
fn effective_losses(trials: &[Trial]) -> Result<Vec<f64>, TpeError> {
    let worst = trials
        .iter()
        .filter_map(|t| t.loss)
        .fold(None, |m: Option<f64>, l| Some(m.map_or(l, |m| m.max(l))))
        .ok_or(TpeError::NoCompletedTrials)?;
    let penalty = if worst > 0.0 { worst * 10.0 } else { 1.0 };
    Ok(trials.iter().map(|t| t.loss.unwrap_or(penalty)).collect())
}

/// Partition trial positions into good and bad sets. The good set holds
/// the `ceil(gamma n)` lowest losses (at least one, ties broken by trial
/// index), the bad set the remainder.
pub fn split_history(trials: &[Trial], gamma: f64) -> Result<(Vec<usize>, Vec<usize>), TpeError> {
    let losses = effective_losses(trials)?;
    let n = trials.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        losses[a]
            .total_cmp(&losses[b])
            .then(trials[a].failed().cmp(&trials[b].failed()))
            .then(trials[a].index.cmp(&trials[b].index))
    });
    let finite = trials.iter().filter(|t| !t.failed()).count();
    let n_good = ((gamma * n as f64).ceil() as usize).clamp(1, finite);
    let mut good = order[..n_good].to_vec();
    let mut bad = order[n_good..].to_vec();
    good.sort_unstable();
    bad.sort_unstable();
    Ok((good, bad))
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Mixture of Gaussians truncated to `[lo, hi]`, one per observation plus a
/// wide prior kernel at the midpoint.
#[derive(Debug, Clone)]
pub struct ParzenEstimator {
    lo: f64,
    hi: f64,
    mus: Vec<f64>,
    sigmas: Vec<f64>,
    /// Probability mass of each kernel inside the bounds.
    mass: Vec<f64>,
}

impl ParzenEstimator {
    pub fn fit(observations: &[f64], lo: f64, hi: f64) -> Self {
        let range = hi - lo;
        let mut obs: Vec<f64> = observations.iter().map(|x| x.clamp(lo, hi)).collect();
        obs.sort_by(f64::total_cmp);
        let min_bw = range / obs.len().max(1) as f64;
        let mut mus = Vec::with_capacity(obs.len() + 1);
        let mut sigmas = Vec::with_capacity(obs.len() + 1);
        for (i, &x) in obs.iter().enumerate() {
            let left = if i == 0 { x - lo } else { x - obs[i - 1] };
            let right = if i + 1 == obs.len() { hi - x } else { obs[i + 1] - x };
            mus.push(x);
            sigmas.push(left.max(right).max(min_bw).min(range));
        }
        mus.push(0.5 * (lo + hi));
        sigmas.push(range);
        let mass = mus
            .iter()
            .zip(&sigmas)
            .map(|(m, s)| normal_cdf((hi - m) / s) - normal_cdf((lo - m) / s))
            .collect();
        Self {
            lo,
            hi,
            mus,
            sigmas,
            mass,
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.lo || x > self.hi {
            return 0.0;
        }
        let k = self.mus.len() as f64;
        self.mus
            .iter()
            .zip(&self.sigmas)
            .zip(&self.mass)
            .map(|((m, s), z)| {
                let u = (x - m) / s;
                (-0.5 * u * u).exp() / (s * (2.0 * std::f64::consts::PI).sqrt() * z)
            })
            .sum::<f64>()
            / k
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let k = rng.gen_range(0..self.mus.len());
        let (m, s) = (self.mus[k], self.sigmas[k]);
        for _ in 0..1000 {
            // Box-Muller keeps this dependent only on the uniform stream.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            let x = m + s * z;
            if (self.lo..=self.hi).contains(&x) {
                return x;
            }
        }
        m.clamp(self.lo, self.hi)
    }
}

/// Add-one smoothed frequencies over `k` choices.
fn smoothed_frequencies(indices: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![1.0; k];
    for &i in indices {
        counts[i] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c / total).collect()
}

enum DimModel {
    Discrete { good: Vec<f64>, bad: Vec<f64> },
    Continuous { good: ParzenEstimator, bad: ParzenEstimator, log: bool },
}

fn fit_dimension(dim: &Dimension, name: &str, trials: &[Trial], good: &[usize], bad: &[usize]) -> DimModel {
    let coords = |set: &[usize]| -> Vec<Coord> {
        set.iter()
            .filter_map(|&i| trials[i].params.get(name).and_then(|v| dim.encode(v)))
            .collect()
    };
    let (g, b) = (coords(good), coords(bad));
    let indices = |c: &[Coord]| -> Vec<usize> {
        c.iter()
            .filter_map(|c| match c {
                Coord::Index(i) => Some(*i),
                Coord::Real(_) => None,
            })
            .collect()
    };
    let reals = |c: &[Coord]| -> Vec<f64> {
        c.iter()
            .filter_map(|c| match c {
                Coord::Real(x) => Some(*x),
                Coord::Index(_) => None,
            })
            .collect()
    };
    match dim {
        Dimension::Categorical { choices } => DimModel::Discrete {
            good: smoothed_frequencies(&indices(&g), choices.len()),
            bad: smoothed_frequencies(&indices(&b), choices.len()),
        },
        Dimension::Ordinal { choices } => DimModel::Discrete {
            good: smoothed_frequencies(&indices(&g), choices.len()),
            bad: smoothed_frequencies(&indices(&b), choices.len()),
        },
        Dimension::Uniform { lo, hi } => DimModel::Continuous {
            good: ParzenEstimator::fit(&reals(&g), *lo, *hi),
            bad: ParzenEstimator::fit(&reals(&b), *lo, *hi),
            log: false,
        },
        Dimension::LogUniform { lo, hi } => DimModel::Continuous {
            good: ParzenEstimator::fit(&reals(&g), lo.ln(), hi.ln()),
            bad: ParzenEstimator::fit(&reals(&b), lo.ln(), hi.ln()),
            log: true,
        },
    }
}

fn categorical_draw(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// A suggested candidate with its log density ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub point: Point,
    pub log_ratio: f64,
}

/// Draw `n_candidates` points from the good-set densities and score each by
/// `sum_d log(l_d(x) / g_d(x))`. Falls back to prior draws with zero score
/// when the history has no finite loss.
pub fn score_candidates(
    trials: &[Trial],
    space: &SearchSpace,
    gamma: f64,
    n_candidates: usize,
    rng: &mut impl Rng,
) -> Vec<ScoredCandidate> {
    let (good, bad) = match split_history(trials, gamma) {
        Ok(split) => split,
        Err(_) => {
            return (0..n_candidates)
                .map(|_| ScoredCandidate {
                    point: sample_uniform(space, rng),
                    log_ratio: 0.0,
                })
                .collect()
        }
    };
    let models: Vec<DimModel> = space
        .dims
        .iter()
        .map(|(n, d)| fit_dimension(d, n, trials, &good, &bad))
        .collect();
    (0..n_candidates)
        .map(|_| {
            let mut point = Point::new();
            let mut log_ratio = 0.0;
            for ((name, dim), model) in space.dims.iter().zip(&models) {
                let value = match (model, dim) {
                    (DimModel::Discrete { good, bad }, _) => {
                        let i = categorical_draw(good, rng);
                        log_ratio += (good[i] / bad[i]).ln();
                        match dim {
                            Dimension::Categorical { choices } => ParamValue::Text(choices[i].clone()),
                            Dimension::Ordinal { choices } => ParamValue::Number(choices[i]),
                            _ => unreachable!("discrete model on a continuous dimension"),
                        }
                    }
                    (DimModel::Continuous { good, bad, log }, _) => {
                        let t = good.sample(rng);
                        log_ratio += good.pdf(t).ln() - bad.pdf(t).max(f64::MIN_POSITIVE).ln();
                        let x = if *log { t.exp() } else { t };
                        let x = match dim {
                            Dimension::Uniform { lo, hi } | Dimension::LogUniform { lo, hi } => x.clamp(*lo, *hi),
                            _ => x,
                        };
                        ParamValue::Number(x)
                    }
                };
                point.insert(name.clone(), value);
            }
            ScoredCandidate { point, log_ratio }
        })
        .collect()
}

/// Random stream for trial `index`, independent of how many draws earlier
/// trials consumed.
pub fn trial_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Next point to evaluate given the history so far. Until `n_startup`
/// trials have completed the point is a uniform draw.
pub fn suggest(trials: &[Trial], space: &SearchSpace, config: &TpeConfig, rng: &mut impl Rng) -> (Point, Provenance) {
    if trials.iter().filter(|t| !t.failed()).count() < config.n_startup {
        return (sample_uniform(space, rng), Provenance::Startup);
    }
    let mut candidates = score_candidates(trials, space, config.gamma, config.n_candidates, rng);
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.log_ratio > candidates[best].log_ratio {
            best = i;
        }
    }
    (candidates.swap_remove(best).point, Provenance::Tpe)
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub best: Trial,
    pub history: Vec<Trial>,
}

/// Lowest loss seen up to and including each trial.
pub fn best_so_far(history: &[Trial]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    history
        .iter()
        .map(|t| {
            if let Some(l) = t.loss {
                best = best.min(l);
            }
            best
        })
        .collect()
}

fn best_trial(history: &[Trial]) -> Result<Trial, TpeError> {
    history
        .iter()
        .filter(|t| t.loss.is_some())
        .min_by(|a, b| a.loss.unwrap().total_cmp(&b.loss.unwrap()).then(a.index.cmp(&b.index)))
        .cloned()
        .ok_or(TpeError::NoSuccessfulTrial(history.len()))
}

/// Run `config.n_trials` evaluations. The objective returns `Err` (or a
/// non-finite value) for a failed trial.
pub fn optimize<E>(
    objective: impl FnMut(usize, &Point) -> Result<f64, E>,
    space: &SearchSpace,
    config: &TpeConfig,
) -> Result<OptimizeResult, TpeError> {
    optimize_logged(objective, space, config, None)
}

/// [`optimize`] with a line-delimited JSON trial log. Trials already in the
/// log are reused, so an interrupted run resumes where it stopped.
pub fn optimize_logged<E>(
    mut objective: impl FnMut(usize, &Point) -> Result<f64, E>,
    space: &SearchSpace,
    config: &TpeConfig,
    log: Option<&Path>,
) -> Result<OptimizeResult, TpeError> {
    config.validate()?;
    let mut history = match log {
        Some(path) if path.exists() => read_log(path, space)?,
        _ => Vec::new(),
    };
    history.truncate(config.n_trials);
    let mut writer = match log {
        Some(path) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|source| TpeError::Io {
                    path: path.to_path_buf(),
                    source,
                })?,
        ),
        None => None,
    };
    while history.len() < config.n_trials {
        let index = history.len();
        let mut rng = trial_rng(config.seed, index);
        let (params, provenance) = suggest(&history, space, config, &mut rng);
        let start = Instant::now();
        let loss = objective(index, &params).ok().filter(|l| l.is_finite());
        let trial = Trial {
            index,
            params,
            loss,
            provenance,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if let (Some(w), Some(path)) = (writer.as_mut(), log) {
            let line = serde_json::to_string(&trial).expect("trial serializes");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|source| TpeError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
        }
        history.push(trial);
    }
    Ok(OptimizeResult {
        best: best_trial(&history)?,
        history,
    })
}

/// Plain random search with the same per-trial streams as [`optimize`].
pub fn random_search<E>(
    mut objective: impl FnMut(usize, &Point) -> Result<f64, E>,
    space: &SearchSpace,
    n_trials: usize,
    seed: u64,
) -> Result<OptimizeResult, TpeError> {
    let mut history = Vec::with_capacity(n_trials);
    for index in 0..n_trials {
        let params = sample_uniform(space, &mut trial_rng(seed, index));
        let start = Instant::now();
        let loss = objective(index, &params).ok().filter(|l| l.is_finite());
        history.push(Trial {
            index,
            params,
            loss,
            provenance: Provenance::Startup,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(OptimizeResult {
        best: best_trial(&history)?,
        history,
    })
}

/// Read a trial log, checking indices run 0, 1, 2, ... and every point lies
/// in `space`.
pub fn read_log(path: &Path, space: &SearchSpace) -> Result<Vec<Trial>, TpeError> {
    let file = File::open(path).map_err(|source| TpeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let bad = |reason: String| TpeError::Log {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let trial: Trial = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if trial.index != out.len() {
            return Err(bad(format!("expected trial {}, found {}", out.len(), trial.index)));
        }
        if !space.contains(&trial.params) {
            return Err(bad("parameters outside the search space".into()));
        }
        out.push(trial);
    }
    Ok(out)
}
