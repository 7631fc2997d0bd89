//! Bayesian optimisation over finite hyperparameter grids: a Gaussian
//! process with an RBF kernel on encoded grid points and exhaustive
//! Expected-Improvement maximisation over the untried points.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::adapters::{
    AdapterConfig, AdaptionPromptConfig, LoraConfig, PTuningConfig, PrefixConfig, PromptConfig,
    PromptInit, Reparameterization, Technique, PROMPT_INIT_TEXT,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MAX_TRIALS: usize = 20;
pub const INITIAL_RANDOM_TRIALS: usize = 5;
pub const LENGTH_SCALE: f64 = 0.5;
pub const JITTER: f64 = 1e-6;
pub const EI_XI: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type", content = "values")]
pub enum Dimension {
    Ordinal(Vec<f64>),
    Categorical(Vec<String>),
    Boolean,
}

impl Dimension {
    pub fn len(&self) -> usize {
        match self {
            Dimension::Ordinal(v) => v.len(),
            Dimension::Categorical(v) => v.len(),
            Dimension::Boolean => 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn width(&self) -> usize {
        match self {
            Dimension::Ordinal(_) => 1,
            other => other.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Num(f64),
    Sym(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<(String, Dimension)>,
}

/// A grid point as one choice index per dimension.
pub type Point = Vec<usize>;

fn ordinal(v: &[f64]) -> Dimension {
    Dimension::Ordinal(v.to_vec())
}

impl SearchSpace {
    pub fn new(dims: Vec<(String, Dimension)>) -> Result<Self> {
        if dims.iter().any(|(_, d)| d.is_empty()) {
            return Err(Error::Search(
                "every dimension needs at least one value".into(),
            ));
        }
        Ok(Self { dims })
    }

    /// Grid for the domain-adaptive pretraining sweep of one technique.
    pub fn pretraining(technique: Technique) -> Self {
        let named = |n: &str, d: Dimension| (n.to_string(), d);
        let vt = || named("num_virtual_tokens", ordinal(&[1.0, 5.0, 10.0, 15.0, 20.0]));
        let dims = match technique {
            Technique::Lora => return Self::downstream_lora(),
            Technique::Prefix => vec![vt(), named("prefix_projection", Dimension::Boolean)],
            Technique::Prompt => {
                vec![
                    vt(),
                    named(
                        "prompt_init",
                        Dimension::Categorical(vec!["text".into(), "random".into()]),
                    ),
                ]
            }
            Technique::Ptuning => vec![
                vt(),
                named(
                    "reparameterization",
                    Dimension::Categorical(vec!["MLP".into(), "LSTM".into()]),
                ),
                named("hidden_size", ordinal(&[64.0, 128.0, 256.0, 768.0])),
                named("num_layers", ordinal(&[1.0, 2.0, 4.0, 8.0, 12.0])),
                named("dropout", ordinal(&[0.0, 0.1, 0.2])),
            ],
            Technique::Adaption => vec![
                named("adapter_length", ordinal(&[5.0, 10.0])),
                named("adapter_layers", ordinal(&[10.0, 20.0, 30.0])),
            ],
        };
        Self { dims }
    }

    /// Grid for the downstream sweep, which tunes LoRA only.
    pub fn downstream_lora() -> Self {
        Self {
            dims: vec![
                ("r".into(), ordinal(&[2.0, 4.0, 8.0, 16.0])),
                ("alpha".into(), ordinal(&[4.0, 8.0, 16.0, 32.0])),
                ("dropout".into(), ordinal(&[0.0, 0.1, 0.2])),
            ],
        }
    }

    pub fn size(&self) -> usize {
        self.dims.iter().map(|(_, d)| d.len()).product()
    }

    /// Point at a mixed-radix grid index, last dimension fastest.
    pub fn point(&self, mut index: usize) -> Point {
        let mut p = vec![0; self.dims.len()];
        for (i, (_, d)) in self.dims.iter().enumerate().rev() {
            p[i] = index % d.len();
            index /= d.len();
        }
        p
    }

    pub fn all_points(&self) -> Vec<Point> {
        (0..self.size()).map(|i| self.point(i)).collect()
    }

    pub fn values(&self, p: &Point) -> Vec<(String, Value)> {
        self.dims
            .iter()
            .zip(p)
            .map(|((n, d), &i)| {
                let v = match d {
                    Dimension::Ordinal(v) => Value::Num(v[i]),
                    Dimension::Categorical(v) => Value::Sym(v[i].clone()),
                    Dimension::Boolean => Value::Bool(i == 1),
                };
                (n.clone(), v)
            })
            .collect()
    }

    /// Point holding the given value in each dimension.
    pub fn locate(&self, values: &[(String, Value)]) -> Result<Point> {
        self.dims
            .iter()
            .map(|(name, d)| {
                let (_, v) = values
                    .iter()
                    .find(|(n, _)| n == name)
                    .ok_or_else(|| Error::Search(format!("no value for dimension {name}")))?;
                let idx = match (d, v) {
                    (Dimension::Ordinal(vals), Value::Num(x)) => vals.iter().position(|y| y == x),
                    (Dimension::Categorical(vals), Value::Sym(s)) => {
                        vals.iter().position(|y| y == s)
                    }
                    (Dimension::Boolean, Value::Bool(b)) => Some(*b as usize),
                    _ => None,
                };
                idx.ok_or_else(|| Error::Search(format!("{v:?} is not a value of {name}")))
            })
            .collect()
    }

    /// Coordinates in `[0, 1]`: ordinal values by log₂ position between
    /// the grid's end points (rank position when a value is not positive),
    /// categorical and boolean choices one-hot.
    pub fn encode(&self, p: &Point) -> Result<Vec<f64>> {
        if p.len() != self.dims.len() {
            return Err(Error::Search(format!(
                "point has {} coordinates, space has {}",
                p.len(),
                self.dims.len()
            )));
        }
        let mut out = Vec::with_capacity(self.dims.iter().map(|(_, d)| d.width()).sum());
        for ((name, d), &i) in self.dims.iter().zip(p) {
            if i >= d.len() {
                return Err(Error::Search(format!("choice {i} out of range for {name}")));
            }
            match d {
                Dimension::Ordinal(v) if v.len() == 1 => out.push(0.0),
                Dimension::Ordinal(v) => {
                    let (lo, hi) = (v[0], v[v.len() - 1]);
                    if v.iter().all(|&x| x > 0.0) && lo != hi {
                        out.push((v[i].log2() - lo.log2()) / (hi.log2() - lo.log2()));
                    } else {
                        out.push(i as f64 / (v.len() - 1) as f64);
                    }
                }
                other => out.extend((0..other.len()).map(|j| (j == i) as u8 as f64)),
            }
        }
        Ok(out)
    }
}

/// Adapter configuration for a grid point of [`SearchSpace::pretraining`]
/// or [`SearchSpace::downstream_lora`].
pub fn adapter_config(
    technique: Technique,
    space: &SearchSpace,
    p: &Point,
) -> Result<AdapterConfig> {
    let vals = space.values(p);
    let num = |n: &str| -> Result<f64> {
        match vals.iter().find(|(k, _)| k == n) {
            Some((_, Value::Num(x))) => Ok(*x),
            _ => Err(Error::Search(format!("missing numeric {n}"))),
        }
    };
    let sym = |n: &str| -> Result<String> {
        match vals.iter().find(|(k, _)| k == n) {
            Some((_, Value::Sym(s))) => Ok(s.clone()),
            _ => Err(Error::Search(format!("missing choice {n}"))),
        }
    };
    let flag = |n: &str| -> Result<bool> {
        match vals.iter().find(|(k, _)| k == n) {
            Some((_, Value::Bool(b))) => Ok(*b),
            _ => Err(Error::Search(format!("missing flag {n}"))),
        }
    };
    Ok(match technique {
        Technique::Lora => AdapterConfig::Lora(LoraConfig {
            r: num("r")? as usize,
            alpha: num("alpha")?,
            dropout: num("dropout")?,
            ..LoraConfig::default()
        }),
        Technique::Prefix => AdapterConfig::Prefix(PrefixConfig {
            num_virtual_tokens: num("num_virtual_tokens")? as usize,
            prefix_projection: flag("prefix_projection")?,
        }),
        Technique::Prompt => AdapterConfig::Prompt(PromptConfig {
            num_virtual_tokens: num("num_virtual_tokens")? as usize,
            init: if sym("prompt_init")? == "text" {
                PromptInit::Text(PROMPT_INIT_TEXT.into())
            } else {
                PromptInit::Random
            },
        }),
        Technique::Ptuning => AdapterConfig::Ptuning(PTuningConfig {
            num_virtual_tokens: num("num_virtual_tokens")? as usize,
            reparameterization: if sym("reparameterization")? == "LSTM" {
                Reparameterization::Lstm
            } else {
                Reparameterization::Mlp
            },
            hidden_size: num("hidden_size")? as usize,
            num_layers: num("num_layers")? as usize,
            dropout: num("dropout")?,
        }),
        Technique::Adaption => AdapterConfig::Adaption(AdaptionPromptConfig {
            adapter_length: num("adapter_length")? as usize,
            adapter_layers: num("adapter_layers")? as usize,
        }),
    })
}

// ---- Gaussian process ---------------------------------------------------

fn rbf(a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * LENGTH_SCALE * LENGTH_SCALE)).exp()
}

/// GP posterior conditioned on standardized observations.
#[derive(Debug, Clone)]
pub struct GpState {
    xs: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl GpState {
    /// Fits to `(encoded point, objective)` pairs. Objectives are
    /// standardized to zero mean and unit variance.
    pub fn fit(xs: &[Vec<f64>], ys: &[f64]) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Search(
                "GP needs at least one observation and one value per point".into(),
            ));
        }
        let n = ys.len() as f64;
        let y_mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n;
        let y_std = if var > 0.0 { var.sqrt() } else { 1.0 };
        let k = DMatrix::from_fn(xs.len(), xs.len(), |i, j| {
            rbf(&xs[i], &xs[j]) + if i == j { JITTER } else { 0.0 }
        });
        let chol = Cholesky::new(k)
            .ok_or_else(|| Error::Search("kernel matrix is not positive definite".into()))?;
        let y = DVector::from_iterator(ys.len(), ys.iter().map(|y| (y - y_mean) / y_std));
        let alpha = chol.solve(&y);
        Ok(Self {
            xs: xs.to_vec(),
            chol,
            alpha,
            y_mean,
            y_std,
        })
    }

    /// Posterior mean and variance, in standardized units, at `x`.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| rbf(xi, x)));
        let mean = ks.dot(&self.alpha);
        let v = self
            .chol
            .l()
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor is invertible");
        let var = (1.0 - v.dot(&v)).max(0.0);
        (mean, var)
    }
}

/// Expected improvement over `best` for a maximised objective.
pub fn expected_improvement(mean: f64, var: f64, best: f64) -> f64 {
    let gain = mean - best - EI_XI;
    let sd = var.sqrt();
    if sd <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sd;
    let n = Normal::standard();
    gain * n.cdf(z) + sd * n.pdf(z)
}

// ---- search -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub point: Point,
    pub values: Vec<(String, Value)>,
    /// `None` when the objective failed.
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: TrialRecord,
    pub history: Vec<TrialRecord>,
}

/// Untried point with the highest expected improvement; ties go to the
/// lowest grid index.
pub fn suggest(
    state: &GpState,
    space: &SearchSpace,
    tried: &[Point],
    best_std: f64,
) -> Result<Point> {
    let mut chosen: Option<(f64, Point)> = None;
    for p in space.all_points() {
        if tried.contains(&p) {
            continue;
        }
        let (m, v) = state.posterior(&space.encode(&p)?);
        let ei = expected_improvement(m, v, best_std);
        if chosen.as_ref().map_or(true, |(b, _)| ei > *b) {
            chosen = Some((ei, p));
        }
    }
    chosen
        .map(|(_, p)| p)
        .ok_or_else(|| Error::Search("grid exhausted".into()))
}

/// Runs at most `max_trials` distinct evaluations: seeded random draws for
/// the first [`INITIAL_RANDOM_TRIALS`], then EI-guided ones. A failed
/// evaluation is recorded without an objective and scored as the worst
/// value seen. Returns the best observed trial.
pub fn search<E: std::fmt::Display>(
    space: &SearchSpace,
    direction: Direction,
    max_trials: usize,
    seed: u64,
    mut objective: impl FnMut(&Point) -> std::result::Result<f64, E>,
) -> Result<SearchResult> {
    if space.size() == 0 || max_trials == 0 {
        return Err(Error::Search("empty space or zero trial budget".into()));
    }
    let sign = match direction {
        Direction::Maximize => 1.0,
        Direction::Minimize => -1.0,
    };
    let mut rng = Rng::seeded(seed);
    let mut history: Vec<TrialRecord> = Vec::new();
    let mut tried: Vec<Point> = Vec::new();
    let budget = max_trials.min(space.size());
    while history.len() < budget {
        let p = if history.len() < INITIAL_RANDOM_TRIALS {
            let untried: Vec<Point> = space
                .all_points()
                .into_iter()
                .filter(|p| !tried.contains(p))
                .collect();
            untried[rng.below(untried.len())].clone()
        } else {
            let ok: Vec<f64> = history
                .iter()
                .filter_map(|t| t.objective)
                .map(|o| sign * o)
                .collect();
            let worst = ok.iter().copied().fold(f64::INFINITY, f64::min);
            let worst = if worst.is_finite() { worst } else { 0.0 };
            let xs = tried
                .iter()
                .map(|p| space.encode(p))
                .collect::<Result<Vec<_>>>()?;
            let ys: Vec<f64> = history
                .iter()
                .map(|t| t.objective.map_or(worst, |o| sign * o))
                .collect();
            let gp = GpState::fit(&xs, &ys)?;
            let best = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            suggest(&gp, space, &tried, (best - gp.y_mean) / gp.y_std)?
        };
        let objective = objective(&p).ok().filter(|v| v.is_finite());
        tried.push(p.clone());
        history.push(TrialRecord {
            trial_index: history.len(),
            values: space.values(&p),
            point: p,
            objective,
        });
    }
    let best = history
        .iter()
        .filter(|t| t.objective.is_some())
        .max_by(|a, b| {
            let (x, y) = (sign * a.objective.unwrap(), sign * b.objective.unwrap());
            // Earlier trials win ties.
            x.total_cmp(&y).then(b.trial_index.cmp(&a.trial_index))
        })
        .or(history.first())
        .cloned()
        .expect("at least one trial ran");
    Ok(SearchResult { best, history })
}

impl SearchResult {
    /// One JSON object per trial.
    pub fn history_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for t in &self.history {
            s.push_str(&serde_json::to_string(t)?);
            s.push('\n');
        }
        Ok(s)
    }
}
