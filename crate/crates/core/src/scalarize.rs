//! ParEGO scalarization: min-max normalization followed by the augmented
//! Tchebycheff function `max_j(λ_j f_j) + ρ Σ_j λ_j f_j`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::objectives::ObjectiveVector;

pub const DEFAULT_RHO: f64 = 0.05;

/// Non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if lambda.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::input(format!("weights must be non-negative: {lambda:?}")));
        }
        let sum: f64 = lambda.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(lambda))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Uniform draw from the unit simplex via sorted-uniform spacings.
pub fn sample_weights<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Result<WeightVector> {
    if k < 2 {
        return Err(Error::input(format!("need at least two objectives, got {k}")));
    }
    let mut cuts: Vec<f64> = (0..k - 1).map(|_| rng.random::<f64>()).collect();
    cuts.sort_by(f64::total_cmp);
    let mut lambda = Vec::with_capacity(k);
    let mut prev = 0.0;
    for c in cuts {
        lambda.push(c - prev);
        prev = c;
    }
    lambda.push(1.0 - prev);
    Ok(WeightVector(lambda))
}

/// Observed per-objective range.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationState {
    names: Vec<String>,
    min: Vec<f64>,
    max: Vec<f64>,
}

impl NormalizationState {
    pub fn new(names: Vec<String>) -> Self {
        let k = names.len();
        Self {
            names,
            min: vec![f64::INFINITY; k],
            max: vec![f64::NEG_INFINITY; k],
        }
    }

    pub fn from_history<'a>(names: Vec<String>, history: impl IntoIterator<Item = &'a ObjectiveVector>) -> Result<Self> {
        let mut state = Self::new(names);
        for v in history {
            state.observe(v)?;
        }
        Ok(state)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn bounds(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.names.iter().position(|n| n == name)?;
        Some((self.min[i], self.max[i]))
    }

    pub fn observe(&mut self, v: &ObjectiveVector) -> Result<()> {
        let values = v.values_in(&self.names)?;
        for (i, x) in values.into_iter().enumerate() {
            self.min[i] = self.min[i].min(x);
            self.max[i] = self.max[i].max(x);
        }
        Ok(())
    }

    /// Maps each objective to `(v - min) / (max - min)` clamped to `[0, 1]`;
    /// 0 when the observed range is degenerate. Values come back in `names` order.
    pub fn normalize(&self, v: &ObjectiveVector) -> Result<Vec<f64>> {
        if let Some((name, _)) = v.iter().find(|(n, _)| !self.names.iter().any(|m| m == n)) {
            return Err(Error::UnknownObjective(name.to_string()));
        }
        let values = v.values_in(&self.names)?;
        Ok(values
            .into_iter()
            .enumerate()
            .map(|(i, x)| {
                let (lo, hi) = (self.min[i], self.max[i]);
                if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
                    0.0
                } else {
                    ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
                }
            })
            .collect())
    }
}

/// Augmented Tchebycheff scalarization of normalized costs.
pub fn parego(f_norm: &[f64], lambda: &WeightVector, rho: f64) -> Result<f64> {
    if f_norm.len() != lambda.len() {
        return Err(Error::input(format!(
            "objective dimension {} does not match weight dimension {}",
            f_norm.len(),
            lambda.len()
        )));
    }
    let weighted = f_norm.iter().zip(lambda.as_slice()).map(|(f, l)| l * f);
    let (max, sum) = weighted.fold((f64::NEG_INFINITY, 0.0), |(m, s), w| (m.max(w), s + w));
    Ok(max + rho * sum)
}
