//! Joint architecture + hyperparameter search spaces.
//!
//! A space is an ordered list of parameters. Categorical parameters pick one
//! of a fixed set of strings; continuous parameters are positive reals sampled
//! log-uniformly. A continuous parameter may carry several ranges, each active
//! for a subset of an earlier categorical parameter's choices (the learning
//! rate range depends on the optimizer). Any parameter may additionally be
//! conditional on an earlier parameter taking one of a set of values.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the built-in preset space.
pub const DPN_FAIR_V1: &str = "dpn_fair_v1";

/// Face-recognition heads.
pub const HEADS: [&str; 3] = ["MagFace", "ArcFace", "CosFace"];

/// Optimizers.
pub const OPTIMIZERS: [&str; 3] = ["Adam", "AdamW", "SGD"];

/// The nine choices available to every slot of the searchable block.
pub const BLOCK_OPS: [&str; 9] = [
    "BnConv1x1",
    "Conv1x1Bn",
    "Conv1x1",
    "BnConv3x3",
    "Conv3x3Bn",
    "Conv3x3",
    "BnConv5x5",
    "Conv5x5Bn",
    "Conv5x5",
];

/// Log-normal step width used by [`SearchSpace::perturb`] on continuous values.
pub const PERTURB_SIGMA: f64 = 0.2;

/// Sentinel written into encoded coordinates of inactive parameters.
pub const INACTIVE_SENTINEL: f64 = 0.5;

/// A parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Real(f64),
    Choice(String),
}

impl Value {
    pub fn as_choice(&self) -> Option<&str> {
        match self {
            Value::Choice(s) => Some(s),
            Value::Real(_) => None,
        }
    }

    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(v) => Some(*v),
            Value::Choice(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Real(v) => write!(f, "{v}"),
            Value::Choice(s) => f.write_str(s),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Choice(s.to_string())
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Real(v)
    }
}

/// One point of a search space: parameter name to value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(BTreeMap<String, Value>);

impl Configuration {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.0.insert(name.to_string(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.0.get(name)
    }

    pub fn set(&mut self, name: &str, value: impl Into<Value>) {
        self.0.insert(name.to_string(), value.into());
    }

    pub fn remove(&mut self, name: &str) -> Option<Value> {
        self.0.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Canonical identifier, stable across runs: `name=value` pairs joined by `|`.
    pub fn key(&self) -> String {
        self.0
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Activation predicate: `parent` takes one of `equals`.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub parent: String,
    pub equals: Vec<String>,
}

impl Condition {
    fn holds(&self, config: &Configuration) -> bool {
        config
            .get(&self.parent)
            .and_then(Value::as_choice)
            .is_some_and(|v| self.equals.iter().any(|e| e == v))
    }
}

/// A log-scaled range, optionally active only under `when`.
#[derive(Debug, Clone, PartialEq)]
pub struct Range {
    pub when: Option<Condition>,
    pub low: f64,
    pub high: f64,
}

impl Range {
    fn label(&self) -> String {
        match &self.when {
            Some(c) => format!("{} ", c.equals.join("/")),
            None => String::new(),
        }
    }

    /// Maps `v` in `[low, high]` to `[0, 1]` on a log scale.
    pub fn to_unit(&self, v: f64) -> f64 {
        ((v.ln() - self.low.ln()) / (self.high.ln() - self.low.ln())).clamp(0.0, 1.0)
    }

    pub fn from_unit(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.low;
        }
        if t >= 1.0 {
            return self.high;
        }
        let (lo, hi) = (self.low.ln(), self.high.ln());
        (lo + t * (hi - lo)).exp().clamp(self.low, self.high)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = (self.low.ln(), self.high.ln());
        rng.random_range(lo..=hi).exp().clamp(self.low, self.high)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Categorical(Vec<String>),
    LogRange(Vec<Range>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSpec {
    pub name: String,
    pub domain: Domain,
    pub condition: Option<Condition>,
}

impl ParameterSpec {
    pub fn categorical(name: &str, choices: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            domain: Domain::Categorical(choices.iter().map(|s| s.to_string()).collect()),
            condition: None,
        }
    }

    pub fn log_range(name: &str, low: f64, high: f64) -> Self {
        Self {
            name: name.to_string(),
            domain: Domain::LogRange(vec![Range {
                when: None,
                low,
                high,
            }]),
            condition: None,
        }
    }

    fn is_active(&self, config: &Configuration) -> bool {
        self.condition.as_ref().is_none_or(|c| c.holds(config))
    }

    /// The range that applies under `config`, for continuous parameters.
    fn active_range(&self, config: &Configuration) -> Option<(usize, &Range)> {
        match &self.domain {
            Domain::LogRange(ranges) => ranges
                .iter()
                .enumerate()
                .find(|(_, r)| r.when.as_ref().is_none_or(|c| c.holds(config))),
            Domain::Categorical(_) => None,
        }
    }

    fn depends_on(&self, name: &str) -> bool {
        self.condition.as_ref().is_some_and(|c| c.parent == name)
            || match &self.domain {
                Domain::LogRange(ranges) => ranges
                    .iter()
                    .any(|r| r.when.as_ref().is_some_and(|c| c.parent == name)),
                Domain::Categorical(_) => false,
            }
    }

    fn encoded_width(&self) -> usize {
        let body = match &self.domain {
            Domain::Categorical(choices) => choices.len(),
            Domain::LogRange(ranges) if ranges.len() > 1 => 1 + ranges.len(),
            Domain::LogRange(_) => 1,
        };
        body + usize::from(self.condition.is_some())
    }

    fn sample_value<R: Rng + ?Sized>(&self, config: &Configuration, rng: &mut R) -> Value {
        match &self.domain {
            Domain::Categorical(choices) => {
                Value::Choice(choices[rng.random_range(0..choices.len())].clone())
            }
            Domain::LogRange(_) => {
                let (_, range) = self
                    .active_range(config)
                    .expect("range coverage is checked when the space is built");
                Value::Real(range.sample(rng))
            }
        }
    }
}

/// An immutable, validated search space.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    name: String,
    parameters: Vec<ParameterSpec>,
}

impl SearchSpace {
    pub fn new(name: impl Into<String>, parameters: Vec<ParameterSpec>) -> Result<Self> {
        let space = Self {
            name: name.into(),
            parameters,
        };
        space.check()?;
        Ok(space)
    }

    /// The joint head/optimizer/learning-rate/block-op space.
    pub fn dpn_fair_v1() -> Self {
        let optimizer_is = |values: &[&str]| Condition {
            parent: "optimizer".to_string(),
            equals: values.iter().map(|s| s.to_string()).collect(),
        };
        let lr = ParameterSpec {
            name: "lr".to_string(),
            domain: Domain::LogRange(vec![
                Range {
                    when: Some(optimizer_is(&["Adam", "AdamW"])),
                    low: 1e-4,
                    high: 1e-2,
                },
                Range {
                    when: Some(optimizer_is(&["SGD"])),
                    low: 0.09,
                    high: 0.8,
                },
            ]),
            condition: None,
        };
        Self::new(
            DPN_FAIR_V1,
            vec![
                ParameterSpec::categorical("head", &HEADS),
                ParameterSpec::categorical("optimizer", &OPTIMIZERS),
                lr,
                ParameterSpec::categorical("op1", &BLOCK_OPS),
                ParameterSpec::categorical("op2", &BLOCK_OPS),
                ParameterSpec::categorical("op3", &BLOCK_OPS),
            ],
        )
        .expect("preset space is valid")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            DPN_FAIR_V1 => Some(Self::dpn_fair_v1()),
            _ => None,
        }
    }

    /// Resolves a preset name, otherwise reads a space file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::preset(name_or_path) {
            Some(space) => Ok(space),
            None => Self::from_file(name_or_path),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SpaceFile = serde_json::from_str(text).map_err(|e| Error::InvalidSpace {
            parameter: "<file>".to_string(),
            reason: e.to_string(),
        })?;
        file.build()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SpaceFile::from_space(self)).expect("space serializes")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn parameters(&self) -> &[ParameterSpec] {
        &self.parameters
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }

    fn check(&self) -> Result<()> {
        let bad = |p: &ParameterSpec, reason: String| Error::InvalidSpace {
            parameter: p.name.clone(),
            reason,
        };
        if self.parameters.is_empty() {
            return Err(Error::InvalidSpace {
                parameter: "<space>".to_string(),
                reason: "no parameters".to_string(),
            });
        }
        let mut seen: BTreeMap<&str, &ParameterSpec> = BTreeMap::new();
        for p in &self.parameters {
            if p.name.is_empty() {
                return Err(bad(p, "empty name".to_string()));
            }
            if seen.contains_key(p.name.as_str()) {
                return Err(bad(p, "duplicate name".to_string()));
            }
            let check_condition = |c: &Condition| -> Result<&ParameterSpec> {
                let parent = seen.get(c.parent.as_str()).ok_or_else(|| {
                    bad(p, format!("condition parent `{}` is not declared earlier", c.parent))
                })?;
                let Domain::Categorical(choices) = &parent.domain else {
                    return Err(bad(p, format!("condition parent `{}` is not categorical", c.parent)));
                };
                if c.equals.is_empty() {
                    return Err(bad(p, "condition lists no values".to_string()));
                }
                if let Some(v) = c.equals.iter().find(|v| !choices.contains(v)) {
                    return Err(bad(p, format!("condition value `{v}` is not a choice of `{}`", c.parent)));
                }
                Ok(parent)
            };
            if let Some(c) = &p.condition {
                check_condition(c)?;
            }
            match &p.domain {
                Domain::Categorical(choices) => {
                    if choices.is_empty() {
                        return Err(bad(p, "no choices".to_string()));
                    }
                    let unique: BTreeSet<_> = choices.iter().collect();
                    if unique.len() != choices.len() {
                        return Err(bad(p, "duplicate choices".to_string()));
                    }
                }
                Domain::LogRange(ranges) => {
                    if ranges.is_empty() {
                        return Err(bad(p, "no bounds".to_string()));
                    }
                    for r in ranges {
                        if !(r.low.is_finite() && r.high.is_finite() && 0.0 < r.low && r.low < r.high) {
                            return Err(bad(
                                p,
                                format!("bounds must satisfy 0 < low < high, got [{}, {}]", r.low, r.high),
                            ));
                        }
                    }
                    if ranges.len() == 1 {
                        if let Some(c) = &ranges[0].when {
                            return Err(bad(p, format!("single range must not be conditional on `{}`", c.parent)));
                        }
                    } else {
                        // Branches must partition the choices of one unconditional parent.
                        let Some(first) = ranges[0].when.as_ref() else {
                            return Err(bad(p, "every range of a multi-range parameter needs `when`".to_string()));
                        };
                        let mut covered: Vec<&String> = Vec::new();
                        for r in ranges {
                            let Some(c) = &r.when else {
                                return Err(bad(p, "every range of a multi-range parameter needs `when`".to_string()));
                            };
                            if c.parent != first.parent {
                                return Err(bad(p, "ranges must all depend on the same parent".to_string()));
                            }
                            check_condition(c)?;
                            covered.extend(c.equals.iter());
                        }
                        let parent = seen[first.parent.as_str()];
                        if parent.condition.is_some() {
                            return Err(bad(p, format!("range parent `{}` must be unconditional", first.parent)));
                        }
                        let Domain::Categorical(choices) = &parent.domain else {
                            unreachable!("checked by check_condition")
                        };
                        let mut sorted = covered.clone();
                        sorted.sort();
                        sorted.dedup();
                        if sorted.len() != covered.len() {
                            return Err(bad(p, "ranges overlap: a parent value selects two ranges".to_string()));
                        }
                        if let Some(missing) = choices.iter().find(|c| !covered.contains(c)) {
                            return Err(bad(
                                p,
                                format!("no range is active for {} = {missing}", first.parent),
                            ));
                        }
                    }
                }
            }
            seen.insert(p.name.as_str(), p);
        }
        Ok(())
    }

    /// Draws a configuration: categorical values uniformly, continuous values
    /// log-uniformly within their active range.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Configuration {
        let mut config = Configuration::new();
        for p in &self.parameters {
            if p.is_active(&config) {
                let v = p.sample_value(&config, rng);
                config.set(&p.name, v);
            }
        }
        config
    }

    /// Returns every violated constraint, or `Ok(())`.
    pub fn validate(&self, config: &Configuration) -> std::result::Result<(), Vec<String>> {
        let mut violations = Vec::new();
        for (name, _) in config.iter() {
            if self.parameter(name).is_none() {
                violations.push(format!("unknown parameter `{name}`"));
            }
        }
        for p in &self.parameters {
            let value = config.get(&p.name);
            let active = p.is_active(config);
            match (active, value) {
                (true, None) => violations.push(format!("missing parameter `{}`", p.name)),
                (false, Some(_)) => {
                    let c = p.condition.as_ref().expect("inactive implies conditional");
                    violations.push(format!(
                        "`{}` is set but inactive (requires {} in [{}])",
                        p.name,
                        c.parent,
                        c.equals.join(", ")
                    ));
                }
                (false, None) => {}
                (true, Some(value)) => match (&p.domain, value) {
                    (Domain::Categorical(choices), Value::Choice(s)) => {
                        if !choices.contains(s) {
                            violations.push(format!(
                                "`{}` value `{s}` is not one of [{}]",
                                p.name,
                                choices.join(", ")
                            ));
                        }
                    }
                    (Domain::Categorical(_), Value::Real(v)) => {
                        violations.push(format!("`{}` expects a choice, got {v}", p.name))
                    }
                    (Domain::LogRange(_), Value::Choice(s)) => {
                        violations.push(format!("`{}` expects a real, got `{s}`", p.name))
                    }
                    (Domain::LogRange(_), Value::Real(v)) => {
                        let v = *v;
                        match p.active_range(config) {
                            None => violations.push(format!("`{}` has no active range", p.name)),
                            Some(_) if !(v.is_finite() && v > 0.0) => {
                                violations.push(format!("{} must be a positive real, got {v}", p.name))
                            }
                            Some((_, r)) if v < r.low => violations.push(format!(
                                "{} below {}range low {}",
                                p.name,
                                r.label(),
                                r.low
                            )),
                            Some((_, r)) if v > r.high => violations.push(format!(
                                "{} above {}range high {}",
                                p.name,
                                r.label(),
                                r.high
                            )),
                            Some(_) => {}
                        }
                    }
                },
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    pub fn check_config(&self, config: &Configuration) -> Result<()> {
        self.validate(config).map_err(Error::InvalidConfig)
    }

    /// Width of [`encode`](Self::encode) vectors for this space.
    pub fn encoded_width(&self) -> usize {
        self.parameters.iter().map(ParameterSpec::encoded_width).sum()
    }

    /// Fixed-width numeric encoding for surrogate models.
    ///
    /// Per parameter, in declaration order:
    /// * categorical: one-hot over the choices;
    /// * continuous: the log-scaled position in the active range, followed by
    ///   one indicator bit per range when there are several;
    /// * conditional parameters append an active bit. Inactive parameters
    ///   write [`INACTIVE_SENTINEL`] into their value coordinates and zeros
    ///   into indicator bits.
    pub fn encode(&self, config: &Configuration) -> Result<Vec<f64>> {
        self.check_config(config)?;
        let mut out = Vec::with_capacity(self.encoded_width());
        for p in &self.parameters {
            let active = p.is_active(config);
            match &p.domain {
                Domain::Categorical(choices) => {
                    if active {
                        let v = config.get(&p.name).and_then(Value::as_choice).unwrap_or_default();
                        out.extend(choices.iter().map(|c| if c == v { 1.0 } else { 0.0 }));
                    } else {
                        out.extend(std::iter::repeat_n(INACTIVE_SENTINEL, choices.len()));
                    }
                }
                Domain::LogRange(ranges) => {
                    let active_range = if active { p.active_range(config) } else { None };
                    match active_range {
                        Some((_, r)) => {
                            let v = config.get(&p.name).and_then(Value::as_real).unwrap_or(r.low);
                            out.push(r.to_unit(v));
                        }
                        None => out.push(INACTIVE_SENTINEL),
                    }
                    if ranges.len() > 1 {
                        let idx = active_range.map(|(i, _)| i);
                        out.extend((0..ranges.len()).map(|i| if idx == Some(i) { 1.0 } else { 0.0 }));
                    }
                }
            }
            if p.condition.is_some() {
                out.push(if active { 1.0 } else { 0.0 });
            }
        }
        Ok(out)
    }

    /// Inverse of [`encode`](Self::encode).
    pub fn decode(&self, encoded: &[f64]) -> Result<Configuration> {
        if encoded.len() != self.encoded_width() {
            return Err(Error::input(format!(
                "encoded width {} does not match space width {}",
                encoded.len(),
                self.encoded_width()
            )));
        }
        let mut config = Configuration::new();
        let mut at = 0;
        for p in &self.parameters {
            let width = p.encoded_width();
            let block = &encoded[at..at + width];
            at += width;
            let active = p.condition.is_none() || block[width - 1] > 0.5;
            if !active {
                continue;
            }
            match &p.domain {
                Domain::Categorical(choices) => {
                    let best = (0..choices.len())
                        .max_by(|&a, &b| block[a].total_cmp(&block[b]).then(b.cmp(&a)))
                        .expect("non-empty choices");
                    config.set(&p.name, choices[best].as_str());
                }
                Domain::LogRange(ranges) => {
                    let range = if ranges.len() > 1 {
                        let idx = (0..ranges.len())
                            .max_by(|&a, &b| block[1 + a].total_cmp(&block[1 + b]).then(b.cmp(&a)))
                            .expect("non-empty ranges");
                        &ranges[idx]
                    } else {
                        &ranges[0]
                    };
                    config.set(&p.name, range.from_unit(block[0]));
                }
            }
        }
        self.check_config(&config)?;
        Ok(config)
    }

    /// One scalar in `[0, 1]` per parameter, in declaration order: the
    /// choice index over `(choices - 1)` for categoricals, the log-scaled
    /// position for continuous values, `0` for inactive parameters.
    pub fn unit_coordinates(&self, config: &Configuration) -> Result<Vec<f64>> {
        self.check_config(config)?;
        Ok(self
            .parameters
            .iter()
            .map(|p| {
                if !p.is_active(config) {
                    return 0.0;
                }
                match &p.domain {
                    Domain::Categorical(choices) => {
                        let v = config.get(&p.name).and_then(Value::as_choice).unwrap_or_default();
                        let idx = choices.iter().position(|c| c == v).unwrap_or(0);
                        if choices.len() > 1 {
                            idx as f64 / (choices.len() - 1) as f64
                        } else {
                            0.0
                        }
                    }
                    Domain::LogRange(_) => {
                        let (_, r) = p.active_range(config).expect("validated");
                        r.to_unit(config.get(&p.name).and_then(Value::as_real).unwrap_or(r.low))
                    }
                }
            })
            .collect())
    }

    /// Resamples exactly one active parameter of a valid configuration.
    ///
    /// Categorical values move to a different choice; continuous values are
    /// multiplied by a log-normal factor and clamped. Parameters depending on
    /// a changed categorical are re-activated, dropped or redrawn as needed.
    pub fn perturb<R: Rng + ?Sized>(&self, config: &Configuration, rng: &mut R) -> Configuration {
        let candidates: Vec<&ParameterSpec> = self
            .parameters
            .iter()
            .filter(|p| p.is_active(config))
            .filter(|p| match &p.domain {
                Domain::Categorical(choices) => choices.len() > 1,
                Domain::LogRange(_) => true,
            })
            .collect();
        if candidates.is_empty() {
            return config.clone();
        }
        let target = candidates[rng.random_range(0..candidates.len())];
        let mut out = config.clone();
        match &target.domain {
            Domain::Categorical(choices) => {
                let current = config.get(&target.name).and_then(Value::as_choice);
                let others: Vec<&String> =
                    choices.iter().filter(|c| Some(c.as_str()) != current).collect();
                out.set(&target.name, others[rng.random_range(0..others.len())].as_str());
            }
            Domain::LogRange(_) => {
                let (_, r) = target.active_range(config).expect("validated");
                let v = config.get(&target.name).and_then(Value::as_real).unwrap_or(r.low);
                let z: f64 = StandardNormal.sample(rng);
                out.set(&target.name, (v * (PERTURB_SIGMA * z).exp()).clamp(r.low, r.high));
                return out;
            }
        }
        let mut changed = vec![target.name.clone()];
        let start = self
            .parameters
            .iter()
            .position(|p| p.name == target.name)
            .expect("target belongs to the space");
        for p in &self.parameters[start + 1..] {
            if !changed.iter().any(|c| p.depends_on(c)) {
                continue;
            }
            if !p.is_active(&out) {
                if out.remove(&p.name).is_some() {
                    changed.push(p.name.clone());
                }
                continue;
            }
            let range_parent_changed = match &p.domain {
                Domain::LogRange(ranges) => ranges
                    .iter()
                    .any(|r| r.when.as_ref().is_some_and(|c| changed.contains(&c.parent))),
                Domain::Categorical(_) => false,
            };
            if out.get(&p.name).is_none() || range_parent_changed {
                let v = p.sample_value(&out, rng);
                out.set(&p.name, v);
                changed.push(p.name.clone());
            }
        }
        out
    }
}

// On-disk form of a space.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    name: String,
    parameters: Vec<ParameterDef>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParameterDef {
    name: String,
    kind: ParameterKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bounds: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    branches: Option<Vec<BranchDef>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    condition: Option<ConditionDef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ParameterKind {
    Categorical,
    #[serde(alias = "continuous-log-range", alias = "continuous")]
    ContinuousLog,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchDef {
    when: ConditionDef,
    bounds: [f64; 2],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditionDef {
    parent: String,
    equals: OneOrMany,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl From<ConditionDef> for Condition {
    fn from(def: ConditionDef) -> Self {
        Condition {
            parent: def.parent,
            equals: match def.equals {
                OneOrMany::One(s) => vec![s],
                OneOrMany::Many(v) => v,
            },
        }
    }
}

impl From<&Condition> for ConditionDef {
    fn from(c: &Condition) -> Self {
        ConditionDef {
            parent: c.parent.clone(),
            equals: if c.equals.len() == 1 {
                OneOrMany::One(c.equals[0].clone())
            } else {
                OneOrMany::Many(c.equals.clone())
            },
        }
    }
}

impl SpaceFile {
    fn build(self) -> Result<SearchSpace> {
        let mut parameters = Vec::with_capacity(self.parameters.len());
        for def in self.parameters {
            let bad = |reason: &str| Error::InvalidSpace {
                parameter: def.name.clone(),
                reason: reason.to_string(),
            };
            let domain = match def.kind {
                ParameterKind::Categorical => {
                    if def.bounds.is_some() || def.branches.is_some() {
                        return Err(bad("categorical parameters take `choices` only"));
                    }
                    Domain::Categorical(def.choices.clone().ok_or_else(|| bad("missing `choices`"))?)
                }
                ParameterKind::ContinuousLog => {
                    if def.choices.is_some() {
                        return Err(bad("continuous parameters take `bounds` or `branches`, not `choices`"));
                    }
                    match (def.bounds, def.branches) {
                        (Some([low, high]), None) => Domain::LogRange(vec![Range { when: None, low, high }]),
                        (None, Some(branches)) => Domain::LogRange(
                            branches
                                .into_iter()
                                .map(|b| Range {
                                    when: Some(b.when.into()),
                                    low: b.bounds[0],
                                    high: b.bounds[1],
                                })
                                .collect(),
                        ),
                        (Some(_), Some(_)) => return Err(bad("give either `bounds` or `branches`, not both")),
                        (None, None) => return Err(bad("missing `bounds`")),
                    }
                }
            };
            parameters.push(ParameterSpec {
                name: def.name,
                domain,
                condition: def.condition.map(Condition::from),
            });
        }
        SearchSpace::new(self.name, parameters)
    }

    fn from_space(space: &SearchSpace) -> Self {
        let parameters = space
            .parameters
            .iter()
            .map(|p| {
                let condition = p.condition.as_ref().map(ConditionDef::from);
                match &p.domain {
                    Domain::Categorical(choices) => ParameterDef {
                        name: p.name.clone(),
                        kind: ParameterKind::Categorical,
                        choices: Some(choices.clone()),
                        bounds: None,
                        branches: None,
                        condition,
                    },
                    Domain::LogRange(ranges) if ranges.len() == 1 && ranges[0].when.is_none() => ParameterDef {
                        name: p.name.clone(),
                        kind: ParameterKind::ContinuousLog,
                        choices: None,
                        bounds: Some([ranges[0].low, ranges[0].high]),
                        branches: None,
                        condition,
                    },
                    Domain::LogRange(ranges) => ParameterDef {
                        name: p.name.clone(),
                        kind: ParameterKind::ContinuousLog,
                        choices: None,
                        bounds: None,
                        branches: Some(
                            ranges
                                .iter()
                                .map(|r| BranchDef {
                                    when: r.when.as_ref().expect("multi-range has conditions").into(),
                                    bounds: [r.low, r.high],
                                })
                                .collect(),
                        ),
                        condition,
                    },
                }
            })
            .collect();
        SpaceFile {
            name: space.name.clone(),
            parameters,
        }
    }
}
