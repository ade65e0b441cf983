//! Random-forest surrogate with expected-improvement acquisition.
//!
//! Inputs are encoded configurations with the normalized fidelity appended as
//! the last feature. Targets are ParEGO-scalarized costs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use statrs::function::erf::erfc;

use crate::configspace::{Configuration, SearchSpace};
use crate::error::{Error, Result};
use crate::objectives::ObjectiveVector;
use crate::scalarize::{parego, NormalizationState, WeightVector};

/// Rows of `(features, cost)` with a common width.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingMatrix {
    width: usize,
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
}

impl TrainingMatrix {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            xs: Vec::new(),
            ys: Vec::new(),
        }
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        if x.len() != self.width {
            return Err(Error::input(format!("row width {} does not match {}", x.len(), self.width)));
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("training rows must be finite"));
        }
        self.xs.push(x);
        self.ys.push(y);
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(sqrt(width))`.
    pub max_features: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 64,
            min_leaf: 3,
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

struct TreeBuilder<'a, R: Rng + ?Sized> {
    data: &'a TrainingMatrix,
    min_leaf: usize,
    max_features: usize,
    rng: &'a mut R,
    nodes: Vec<Node>,
}

impl<R: Rng + ?Sized> TreeBuilder<'_, R> {
    fn build(&mut self, mut idx: Vec<usize>) -> usize {
        let ys = &self.data.ys;
        let n = idx.len();
        let mean = idx.iter().map(|&i| ys[i]).sum::<f64>() / n as f64;
        let constant = idx.iter().all(|&i| ys[i] == ys[idx[0]]);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf(if constant { ys[idx[0]] } else { mean }));
        if constant || n < 2 * self.min_leaf {
            return at;
        }
        let Some((feature, threshold)) = self.best_split(&mut idx) else {
            return at;
        };
        let (l, r): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| self.data.xs[i][feature] <= threshold);
        let left = self.build(l);
        let right = self.build(r);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }

    /// Variance-reduction split over a random feature subset.
    fn best_split(&mut self, idx: &mut [usize]) -> Option<(usize, f64)> {
        let (xs, ys) = (&self.data.xs, &self.data.ys);
        let mut features: Vec<usize> = (0..self.data.width).collect();
        let (chosen, _) = features.partial_shuffle(self.rng, self.max_features);
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| ys[i]).sum();
        let mut best: Option<(f64, usize, f64)> = None;
        for &f in chosen.iter() {
            idx.sort_by(|&a, &b| xs[a][f].total_cmp(&xs[b][f]));
            let mut left_sum = 0.0;
            for k in 1..n {
                left_sum += ys[idx[k - 1]];
                if k < self.min_leaf || n - k < self.min_leaf {
                    continue;
                }
                let (lo, hi) = (xs[idx[k - 1]][f], xs[idx[k]][f]);
                if lo == hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / k as f64 + right_sum * right_sum / (n - k) as f64;
                if best.is_none_or(|(s, _, _)| score > s) {
                    let mid = lo + (hi - lo) / 2.0;
                    best = Some((score, f, if mid < hi { mid } else { lo }));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

/// Bagged regression trees.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    width: usize,
    trees: Vec<Tree>,
}

impl SurrogateModel {
    pub fn fit<R: Rng + ?Sized>(data: &TrainingMatrix, params: ForestParams, rng: &mut R) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::input("cannot fit a surrogate on zero rows"));
        }
        if params.n_trees == 0 || params.min_leaf == 0 {
            return Err(Error::input("forest needs at least one tree and min_leaf >= 1"));
        }
        let max_features = params
            .max_features
            .unwrap_or_else(|| (data.width as f64).sqrt().ceil() as usize)
            .clamp(1, data.width.max(1));
        let n = data.len();
        let trees = (0..params.n_trees)
            .map(|_| {
                let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let mut builder = TreeBuilder {
                    data,
                    min_leaf: params.min_leaf,
                    max_features,
                    rng: &mut *rng,
                    nodes: Vec::new(),
                };
                builder.build(sample);
                Tree { nodes: builder.nodes }
            })
            .collect();
        Ok(Self {
            width: data.width,
            trees,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Mean and across-tree sample variance.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.width {
            return Err(Error::input(format!("input width {} does not match {}", x.len(), self.width)));
        }
        let outs: Vec<f64> = self.trees.iter().map(|t| t.predict(x)).collect();
        let t = outs.len() as f64;
        let mean = outs.iter().sum::<f64>() / t;
        if outs.iter().all(|&o| o == outs[0]) {
            return Ok((outs[0], 0.0));
        }
        let var = outs.iter().map(|o| (o - mean) * (o - mean)).sum::<f64>() / (t - 1.0);
        Ok((mean, var.max(0.0)))
    }
}

fn std_normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(u: f64) -> f64 {
    0.5 * erfc(-u / std::f64::consts::SQRT_2)
}

/// Expected improvement below `best` for a Gaussian prediction.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    let gain = best - mean;
    if sigma == 0.0 {
        return gain.max(0.0);
    }
    let u = gain / sigma;
    (gain * std_normal_cdf(u) + sigma * std_normal_pdf(u)).max(0.0)
}

/// One evaluated point as seen by the surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub config: Configuration,
    pub fidelity: u32,
    pub objectives: ObjectiveVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuggestParams {
    /// Random configurations before the model is used.
    pub initial_design: usize,
    /// Probability of a random configuration once the model is in use.
    pub random_interleave: f64,
    pub random_candidates: usize,
    /// Incumbents whose neighborhoods are searched.
    pub local_incumbents: usize,
    pub perturbations_per_incumbent: usize,
    pub forest: ForestParams,
}

impl Default for SuggestParams {
    fn default() -> Self {
        Self {
            initial_design: 8,
            random_interleave: 0.25,
            random_candidates: 1000,
            local_incumbents: 10,
            perturbations_per_incumbent: 10,
            forest: ForestParams::default(),
        }
    }
}

/// What [`Suggester::suggest`] did, for logging and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuggestSource {
    InitialDesign,
    RandomInterleave,
    Model,
}

#[derive(Debug, Clone)]
pub struct Suggester {
    space: SearchSpace,
    objectives: Vec<String>,
    max_fidelity: u32,
    rho: f64,
    params: SuggestParams,
}

impl Suggester {
    pub fn new(space: SearchSpace, objectives: Vec<String>, max_fidelity: u32, rho: f64, params: SuggestParams) -> Self {
        Self {
            space,
            objectives,
            max_fidelity,
            rho,
            params,
        }
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    /// Normalization over the highest-fidelity observation of each configuration.
    pub fn normalization(&self, history: &[Observation]) -> Result<NormalizationState> {
        let mut latest: BTreeMap<String, &Observation> = BTreeMap::new();
        for obs in history {
            let slot = latest.entry(obs.config.key()).or_insert(obs);
            if obs.fidelity >= slot.fidelity {
                *slot = obs;
            }
        }
        NormalizationState::from_history(self.objectives.clone(), latest.values().map(|o| &o.objectives))
    }

    fn features(&self, config: &Configuration, fidelity: u32) -> Result<Vec<f64>> {
        let mut x = self.space.encode(config)?;
        x.push(f64::from(fidelity) / f64::from(self.max_fidelity));
        Ok(x)
    }

    /// Scalarizes `history` under `weight` and builds the surrogate's training set.
    pub fn training_matrix(&self, history: &[Observation], weight: &WeightVector) -> Result<TrainingMatrix> {
        let norm = self.normalization(history)?;
        let mut data = TrainingMatrix::new(self.space.encoded_width() + 1);
        for obs in history {
            let cost = parego(&norm.normalize(&obs.objectives)?, weight, self.rho)?;
            data.push(self.features(&obs.config, obs.fidelity)?, cost)?;
        }
        Ok(data)
    }

    pub fn suggest<R: Rng + ?Sized>(
        &self,
        history: &[Observation],
        weight: &WeightVector,
        rng: &mut R,
    ) -> Result<(Configuration, SuggestSource)> {
        if history.len() < self.params.initial_design {
            return Ok((self.space.sample(rng), SuggestSource::InitialDesign));
        }
        if rng.random::<f64>() < self.params.random_interleave {
            return Ok((self.space.sample(rng), SuggestSource::RandomInterleave));
        }
        let data = self.training_matrix(history, weight)?;
        let model = SurrogateModel::fit(&data, self.params.forest, rng)?;

        let top_fidelity = history.iter().map(|o| o.fidelity).max().expect("non-empty history");
        let best = history
            .iter()
            .zip(&data.ys)
            .filter(|(o, _)| o.fidelity == top_fidelity)
            .map(|(_, &y)| y)
            .fold(f64::INFINITY, f64::min);

        let mut candidates: Vec<Configuration> =
            (0..self.params.random_candidates).map(|_| self.space.sample(rng)).collect();
        let mut ranked: Vec<(f64, &Configuration)> = history.iter().zip(&data.ys).map(|(o, &y)| (y, &o.config)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut incumbents: Vec<&Configuration> = Vec::new();
        for (_, c) in ranked {
            if incumbents.len() == self.params.local_incumbents {
                break;
            }
            if !incumbents.contains(&c) {
                incumbents.push(c);
            }
        }
        for inc in incumbents {
            for _ in 0..self.params.perturbations_per_incumbent {
                candidates.push(self.space.perturb(inc, rng));
            }
        }

        let mut best_candidate: Option<(f64, usize)> = None;
        for (i, c) in candidates.iter().enumerate() {
            let (mean, var) = model.predict(&self.features(c, top_fidelity)?)?;
            let ei = expected_improvement(mean, var, best);
            if best_candidate.is_none_or(|(b, _)| ei > b) {
                best_candidate = Some((ei, i));
            }
        }
        let (_, i) = best_candidate.expect("candidate pool is non-empty");
        Ok((candidates.swap_remove(i), SuggestSource::Model))
    }
}
