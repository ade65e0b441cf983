//! The search loop.
//!
//! One control loop owns the scheduler, surrogate history, normalization and
//! run log. Evaluations run on up to `n_workers` threads and report back via
//! a completion channel. A single worker without a wall-clock limit evaluates
//! inline on the calling thread, which makes the loop fully deterministic for
//! a deterministic backend.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::asha::{Asha, Job, RungLadder};
use crate::configspace::{Configuration, SearchSpace};
use crate::error::{Error, Result};
use crate::objectives::ObjectiveVector;
use crate::paretostats::{aggregate_seeds, AggregatedPoint, ParetoFront};
use crate::runner::{evaluate, EvalRequest, Evaluation, ObjectiveBackend};
use crate::scalarize::{parego, sample_weights, WeightVector};
use crate::store::{RunLogWriter, TrialRecord, TrialStatus};
use crate::surrogate::{Observation, SuggestParams, SuggestSource, Suggester};

/// When to stop dispatching new evaluations. At least one limit must be set.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SearchBudget {
    /// Evaluations (run-log lines), promotions included.
    pub max_trials: Option<usize>,
    /// Sum of `fidelity / max_fidelity` over all epochs trained.
    pub max_fidelity_equivalents: Option<f64>,
    /// Running evaluations are cancelled and marked failed once this passes.
    pub wall_clock: Option<Duration>,
}

impl SearchBudget {
    pub fn trials(n: usize) -> Self {
        Self {
            max_trials: Some(n),
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.max_trials.is_none() && self.max_fidelity_equivalents.is_none() && self.wall_clock.is_none() {
            return Err(Error::input("search budget has no limit"));
        }
        if self.max_trials == Some(0) {
            return Err(Error::input("trial budget must be positive"));
        }
        if let Some(f) = self.max_fidelity_equivalents {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::input(format!("fidelity budget {f} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SearchOptions {
    pub ladder: RungLadder,
    pub rho: f64,
    pub n_workers: usize,
    pub seed: u64,
    pub budget: SearchBudget,
    pub trial_timeout: Option<Duration>,
    /// Consecutive backend failures after which the search aborts.
    pub max_consecutive_failures: usize,
    pub suggest: SuggestParams,
}

impl SearchOptions {
    pub fn new(ladder: RungLadder, budget: SearchBudget, seed: u64) -> Self {
        Self {
            ladder,
            rho: crate::scalarize::DEFAULT_RHO,
            n_workers: 1,
            seed,
            budget,
            trial_timeout: None,
            max_consecutive_failures: 5,
            suggest: SuggestParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub history: Vec<TrialRecord>,
    pub objectives: Vec<String>,
    /// Max-fidelity results with their front membership.
    pub points: Vec<AggregatedPoint>,
    pub on_front: Vec<bool>,
    pub front: ParetoFront,
    pub fidelity_equivalents: f64,
    pub suggestions: HashMap<SuggestSourceKey, usize>,
}

/// Hashable mirror of [`SuggestSource`] for counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SuggestSourceKey {
    InitialDesign,
    RandomInterleave,
    Model,
}

impl From<SuggestSource> for SuggestSourceKey {
    fn from(s: SuggestSource) -> Self {
        match s {
            SuggestSource::InitialDesign => Self::InitialDesign,
            SuggestSource::RandomInterleave => Self::RandomInterleave,
            SuggestSource::Model => Self::Model,
        }
    }
}

/// SplitMix64 step, used to derive per-trial seeds from the search seed.
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    let mut z = seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct InFlight {
    job: Job<Configuration>,
    seed: u64,
    cancel: Arc<AtomicBool>,
}

struct Completion {
    trial_id: String,
    result: Result<Evaluation>,
}

struct Loop<'a> {
    space: &'a SearchSpace,
    opts: &'a SearchOptions,
    objectives: Vec<String>,
    suggester: Suggester,
    asha: Asha<Configuration>,
    rng: ChaCha8Rng,
    weight: Option<WeightVector>,
    observations: Vec<Observation>,
    history: Vec<TrialRecord>,
    log: Option<&'a mut RunLogWriter>,
    seeds: HashMap<String, u64>,
    resumable: HashMap<String, bool>,
    worst_cost: Option<f64>,
    consecutive_failures: usize,
    dispatched: usize,
    consumed: f64,
    suggestions: HashMap<SuggestSourceKey, usize>,
}

impl Loop<'_> {
    fn budget_allows_dispatch(&self, started: Option<Instant>) -> bool {
        let b = &self.opts.budget;
        if b.max_trials.is_some_and(|n| self.dispatched >= n) {
            return false;
        }
        if b.max_fidelity_equivalents.is_some_and(|f| self.consumed >= f) {
            return false;
        }
        !matches!((b.wall_clock, started), (Some(w), Some(t)) if t.elapsed() >= w)
    }

    fn next_job(&mut self) -> Result<InFlight> {
        let job = if self.asha.promotion_candidate().is_some() {
            self.asha.next_job(|| unreachable!("promotion pending"))
        } else {
            let weight = sample_weights(&mut self.rng, self.objectives.len())?;
            let (config, source) = self.suggester.suggest(&self.observations, &weight, &mut self.rng)?;
            log::debug!("suggested {} via {source:?}", config.key());
            *self.suggestions.entry(source.into()).or_default() += 1;
            self.weight = Some(weight);
            self.asha.next_job(move || config)
        };
        let seed = *self
            .seeds
            .entry(job.trial_id.clone())
            .or_insert_with(|| derive_seed(self.opts.seed, self.dispatched as u64));
        let max = f64::from(self.opts.ladder.max_fidelity());
        let trained_from = match job.previous_fidelity {
            Some(prev) if self.resumable.get(&job.trial_id).copied().unwrap_or(false) => prev,
            _ => 0,
        };
        self.consumed += f64::from(job.fidelity - trained_from) / max;
        self.dispatched += 1;
        Ok(InFlight {
            job,
            seed,
            cancel: Arc::new(AtomicBool::new(false)),
        })
    }

    fn request(&self, f: &InFlight) -> EvalRequest {
        let resume_from = match f.job.previous_fidelity {
            Some(prev) if self.resumable.get(&f.job.trial_id).copied().unwrap_or(false) => Some(prev),
            _ => None,
        };
        EvalRequest {
            trial_id: f.job.trial_id.clone(),
            config: f.job.config.clone(),
            fidelity: f.job.fidelity,
            max_fidelity: self.opts.ladder.max_fidelity(),
            seed: f.seed,
            resume_from,
            timeout: self.opts.trial_timeout,
            cancel: f.cancel.clone(),
        }
    }

    fn record(&mut self, record: TrialRecord) -> Result<()> {
        if let Some(w) = self.log.as_deref_mut() {
            w.append(&record)?;
        }
        self.history.push(record);
        Ok(())
    }

    fn imputed_cost(&self) -> f64 {
        // parego of normalized costs never exceeds 1 + rho
        self.worst_cost.unwrap_or(1.0 + self.opts.rho)
    }

    fn complete(&mut self, f: InFlight, result: Result<Evaluation>) -> Result<()> {
        let Job {
            trial_id,
            config,
            rung,
            fidelity,
            ..
        } = f.job;
        match result {
            Ok(eval) => {
                self.consecutive_failures = 0;
                self.resumable.insert(trial_id.clone(), eval.resumable);
                let selected = ObjectiveVector::select(&eval.objectives, &self.objectives);
                let cost = match &selected {
                    Some(v) => {
                        self.observations.push(Observation {
                            config: config.clone(),
                            fidelity,
                            objectives: v.clone(),
                        });
                        let norm = self.suggester.normalization(&self.observations)?;
                        let weight = self.weight.as_ref().expect("a suggestion precedes every completion");
                        let cost = parego(&norm.normalize(v)?, weight, self.opts.rho)?;
                        self.worst_cost = Some(self.worst_cost.map_or(cost, |w| w.max(cost)));
                        cost
                    }
                    None => {
                        log::warn!("{trial_id}: objectives missing or undefined, imputing worst cost");
                        self.imputed_cost()
                    }
                };
                self.asha.report(&trial_id, rung, cost)?;
                self.record(TrialRecord::reported(
                    trial_id,
                    config,
                    f.seed,
                    fidelity,
                    eval.objectives,
                    eval.wall_time_s,
                ))?;
            }
            Err(e) => {
                log::warn!("{trial_id} at fidelity {fidelity} failed: {e}");
                self.consecutive_failures += 1;
                let cost = self.imputed_cost();
                self.asha.report(&trial_id, rung, cost)?;
                self.record(TrialRecord::failed(trial_id, config, f.seed, fidelity, 0.0))?;
                if self.consecutive_failures >= self.opts.max_consecutive_failures {
                    return Err(Error::Backend(format!(
                        "{} consecutive evaluations failed; last error: {e}",
                        self.consecutive_failures
                    )));
                }
            }
        }
        self.asha.check_invariants()
    }

    fn cancel(&mut self, f: InFlight) -> Result<()> {
        self.asha.cancel(&f.job.trial_id)?;
        self.record(TrialRecord::failed(
            f.job.trial_id,
            f.job.config,
            f.seed,
            f.job.fidelity,
            0.0,
        ))
    }
}

/// Runs a search and returns its history and the front of max-fidelity results.
pub fn run_search(
    space: &SearchSpace,
    backend: &ObjectiveBackend,
    opts: &SearchOptions,
    log: Option<&mut RunLogWriter>,
) -> Result<SearchOutcome> {
    opts.budget.check()?;
    if opts.n_workers == 0 {
        return Err(Error::input("need at least one worker"));
    }
    let objectives = backend.objective_names();
    // the clock is only read when needed; some targets have none
    let started = opts.budget.wall_clock.map(|_| Instant::now());
    let inline = opts.n_workers == 1 && started.is_none();
    let mut state = Loop {
        space,
        opts,
        suggester: Suggester::new(
            space.clone(),
            objectives.clone(),
            opts.ladder.max_fidelity(),
            opts.rho,
            opts.suggest,
        ),
        objectives,
        asha: Asha::new(opts.ladder.clone()),
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        weight: None,
        observations: Vec::new(),
        history: Vec::new(),
        log,
        seeds: HashMap::new(),
        resumable: HashMap::new(),
        worst_cost: None,
        consecutive_failures: 0,
        dispatched: 0,
        consumed: 0.0,
        suggestions: HashMap::new(),
    };

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::channel::<Completion>();
        let mut in_flight: HashMap<String, InFlight> = HashMap::new();
        let mut out_of_time = false;
        loop {
            while !out_of_time && in_flight.len() < opts.n_workers && state.budget_allows_dispatch(started) {
                let f = state.next_job()?;
                let req = state.request(&f);
                if inline {
                    let result = evaluate(backend, state.space, &req);
                    let _ = tx.send(Completion {
                        trial_id: req.trial_id,
                        result,
                    });
                } else {
                    let tx = tx.clone();
                    let backend = backend.clone();
                    let space = state.space;
                    scope.spawn(move || {
                        let result = evaluate(&backend, space, &req);
                        let _ = tx.send(Completion {
                            trial_id: req.trial_id,
                            result,
                        });
                    });
                }
                in_flight.insert(f.job.trial_id.clone(), f);
            }
            if in_flight.is_empty() {
                return Ok(());
            }
            let deadline = opts.budget.wall_clock.zip(started).map(|(w, t)| t + w);
            let completion = match deadline {
                Some(d) if !out_of_time => {
                    match rx.recv_timeout(d.saturating_duration_since(Instant::now())) {
                        Ok(c) => Some(c),
                        Err(mpsc::RecvTimeoutError::Timeout) => None,
                        Err(mpsc::RecvTimeoutError::Disconnected) => unreachable!("sender held by loop"),
                    }
                }
                _ => Some(rx.recv().expect("sender held by loop")),
            };
            let Some(c) = completion else {
                log::info!("wall-clock budget exhausted; cancelling {} running trial(s)", in_flight.len());
                out_of_time = true;
                for f in in_flight.values() {
                    f.cancel.store(true, Ordering::Relaxed);
                }
                continue;
            };
            let f = in_flight.remove(&c.trial_id).expect("completion for a dispatched trial");
            if out_of_time {
                state.cancel(f)?;
            } else {
                let result = state.complete(f, c.result);
                if result.is_err() {
                    for f in in_flight.values() {
                        f.cancel.store(true, Ordering::Relaxed);
                    }
                }
                result?;
            }
        }
    })?;

    let max_fidelity = opts.ladder.max_fidelity();
    let points = aggregate_seeds(&state.history, max_fidelity, &state.objectives);
    let (front, on_front) = ParetoFront::extract(&points, &state.objectives)?;
    debug_assert_eq!(
        state.history.iter().filter(|r| r.status != TrialStatus::Running).count(),
        state.dispatched
    );
    Ok(SearchOutcome {
        history: state.history,
        objectives: state.objectives,
        points,
        on_front,
        front,
        fidelity_equivalents: state.consumed,
        suggestions: state.suggestions,
    })
}

/// Uniform random configurations evaluated at full fidelity, as a baseline.
pub fn random_search(
    space: &SearchSpace,
    backend: &ObjectiveBackend,
    n: usize,
    max_fidelity: u32,
    seed: u64,
) -> Result<(Vec<TrialRecord>, ParetoFront)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(n);
    for i in 0..n {
        let config = space.sample(&mut rng);
        let trial_seed = derive_seed(seed, i as u64);
        let req = EvalRequest::new(&format!("r{i}"), config.clone(), max_fidelity, max_fidelity, trial_seed);
        let eval = evaluate(backend, space, &req)?;
        history.push(TrialRecord::reported(
            req.trial_id,
            config,
            trial_seed,
            max_fidelity,
            eval.objectives,
            eval.wall_time_s,
        ));
    }
    let objectives = backend.objective_names();
    let points = aggregate_seeds(&history, max_fidelity, &objectives);
    let (front, _) = ParetoFront::extract(&points, &objectives)?;
    Ok((history, front))
}
