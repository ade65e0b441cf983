//! Asynchronous successive halving (promotion variant).
//!
//! Trials start at the lowest rung. Whenever a worker asks for a job, the
//! scheduler looks from the highest non-top rung down for a completed,
//! not-yet-promoted trial ranked within the best `floor(completed / eta)` of
//! its rung and promotes it one rung up. A rung never promotes more than
//! `floor(completed / eta)` trials in total, even when later results reorder
//! its ranking. Only if no rung has a candidate is a new configuration
//! started at the base rung.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// Geometric fidelity ladder `min * eta^k`, with the last rung clamped to `max`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RungLadder {
    fidelities: Vec<u32>,
    eta: u32,
}

impl RungLadder {
    pub fn new(min_fidelity: u32, max_fidelity: u32, eta: u32) -> Result<Self> {
        if min_fidelity == 0 || min_fidelity > max_fidelity {
            return Err(Error::input(format!(
                "fidelity bounds must satisfy 0 < min <= max, got {min_fidelity}..{max_fidelity}"
            )));
        }
        if eta < 2 {
            return Err(Error::input(format!("eta must be at least 2, got {eta}")));
        }
        let mut fidelities = Vec::new();
        let mut f = u64::from(min_fidelity);
        while f < u64::from(max_fidelity) {
            fidelities.push(f as u32);
            f *= u64::from(eta);
        }
        fidelities.push(max_fidelity);
        Ok(Self { fidelities, eta })
    }

    pub fn fidelities(&self) -> &[u32] {
        &self.fidelities
    }

    pub fn eta(&self) -> u32 {
        self.eta
    }

    pub fn len(&self) -> usize {
        self.fidelities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fidelities.is_empty()
    }

    pub fn max_fidelity(&self) -> u32 {
        *self.fidelities.last().expect("ladder has at least one rung")
    }

    pub fn rung_of(&self, fidelity: u32) -> Option<usize> {
        self.fidelities.iter().position(|&f| f == fidelity)
    }
}

/// A unit of work handed to a worker.
#[derive(Debug, Clone, PartialEq)]
pub struct Job<C> {
    pub trial_id: String,
    pub config: C,
    pub rung: usize,
    pub fidelity: u32,
    /// Fidelity the trial last completed, for promoted trials.
    pub previous_fidelity: Option<u32>,
}

#[derive(Debug, Clone)]
struct Completed {
    trial_id: String,
    cost: f64,
    seq: u64,
}

#[derive(Debug, Clone, Default)]
struct Rung {
    completed: Vec<Completed>,
    promoted: HashSet<String>,
}

impl Rung {
    /// Completed trials in promotion order: cost, then completion order.
    fn ranked(&self) -> Vec<&Completed> {
        let mut v: Vec<&Completed> = self.completed.iter().collect();
        v.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(a.seq.cmp(&b.seq)));
        v
    }

    fn quota(&self, eta: u32) -> usize {
        self.completed.len() / eta as usize
    }
}

#[derive(Debug, Clone)]
pub struct Asha<C> {
    ladder: RungLadder,
    rungs: Vec<Rung>,
    pending: HashMap<String, usize>,
    configs: HashMap<String, C>,
    next_trial: u64,
    seq: u64,
}

impl<C: Clone> Asha<C> {
    pub fn new(ladder: RungLadder) -> Self {
        let rungs = vec![Rung::default(); ladder.len()];
        Self {
            ladder,
            rungs,
            pending: HashMap::new(),
            configs: HashMap::new(),
            next_trial: 0,
            seq: 0,
        }
    }

    pub fn ladder(&self) -> &RungLadder {
        &self.ladder
    }

    /// The rung and trial the next call to [`next_job`](Self::next_job) would promote.
    pub fn promotion_candidate(&self) -> Option<(usize, &str)> {
        let eta = self.ladder.eta;
        for r in (0..self.rungs.len().saturating_sub(1)).rev() {
            let rung = &self.rungs[r];
            let quota = rung.quota(eta);
            if rung.promoted.len() >= quota {
                continue;
            }
            if let Some(c) = rung
                .ranked()
                .into_iter()
                .take(quota)
                .find(|c| !rung.promoted.contains(&c.trial_id))
            {
                return Some((r, c.trial_id.as_str()));
            }
        }
        None
    }

    /// Promotes the best eligible trial, or starts `suggest()` at the base rung.
    pub fn next_job(&mut self, suggest: impl FnOnce() -> C) -> Job<C> {
        if let Some((r, id)) = self.promotion_candidate() {
            let id = id.to_string();
            self.rungs[r].promoted.insert(id.clone());
            self.pending.insert(id.clone(), r + 1);
            return Job {
                config: self.configs[&id].clone(),
                trial_id: id,
                rung: r + 1,
                fidelity: self.ladder.fidelities[r + 1],
                previous_fidelity: Some(self.ladder.fidelities[r]),
            };
        }
        let id = format!("t{}", self.next_trial);
        self.next_trial += 1;
        let config = suggest();
        self.configs.insert(id.clone(), config.clone());
        self.pending.insert(id.clone(), 0);
        Job {
            trial_id: id,
            config,
            rung: 0,
            fidelity: self.ladder.fidelities[0],
            previous_fidelity: None,
        }
    }

    /// Records the cost of a pending trial at `rung`.
    pub fn report(&mut self, trial_id: &str, rung: usize, cost: f64) -> Result<()> {
        if !cost.is_finite() {
            return Err(Error::Scheduler(format!("trial `{trial_id}`: non-finite cost {cost}")));
        }
        match self.pending.get(trial_id) {
            Some(&r) if r == rung => {}
            Some(&r) => {
                return Err(Error::Scheduler(format!(
                    "trial `{trial_id}` is pending at rung {r}, not {rung}"
                )))
            }
            None if self.rungs.get(rung).is_some_and(|g| g.completed.iter().any(|c| c.trial_id == trial_id)) => {
                return Err(Error::Scheduler(format!(
                    "duplicate report for trial `{trial_id}` at rung {rung}"
                )))
            }
            None => return Err(Error::Scheduler(format!("unknown trial `{trial_id}`"))),
        }
        self.pending.remove(trial_id);
        self.rungs[rung].completed.push(Completed {
            trial_id: trial_id.to_string(),
            cost,
            seq: self.seq,
        });
        self.seq += 1;
        Ok(())
    }

    /// Drops a pending job without recording a result.
    pub fn cancel(&mut self, trial_id: &str) -> Result<()> {
        self.pending
            .remove(trial_id)
            .map(|_| ())
            .ok_or_else(|| Error::Scheduler(format!("trial `{trial_id}` is not pending")))
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn completed(&self, rung: usize) -> usize {
        self.rungs[rung].completed.len()
    }

    pub fn promoted(&self, rung: usize) -> usize {
        self.rungs[rung].promoted.len()
    }

    pub fn completed_ids(&self, rung: usize) -> Vec<&str> {
        self.rungs[rung].completed.iter().map(|c| c.trial_id.as_str()).collect()
    }

    /// Cost a trial reported at `rung`, if any.
    pub fn cost(&self, trial_id: &str, rung: usize) -> Option<f64> {
        self.rungs[rung]
            .completed
            .iter()
            .find(|c| c.trial_id == trial_id)
            .map(|c| c.cost)
    }

    pub fn config(&self, trial_id: &str) -> Option<&C> {
        self.configs.get(trial_id)
    }

    /// Checks the scheduler's structural invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let eta = self.ladder.eta as usize;
        for (r, rung) in self.rungs.iter().enumerate() {
            if rung.promoted.len() > rung.completed.len() / eta {
                return Err(Error::Scheduler(format!(
                    "rung {r}: {} promoted > floor({} / {eta})",
                    rung.promoted.len(),
                    rung.completed.len()
                )));
            }
            for id in &rung.promoted {
                if !rung.completed.iter().any(|c| &c.trial_id == id) {
                    return Err(Error::Scheduler(format!("rung {r}: promoted `{id}` never completed there")));
                }
            }
            if r > 0 {
                for c in &rung.completed {
                    if !self.rungs[r - 1].promoted.contains(&c.trial_id) {
                        return Err(Error::Scheduler(format!(
                            "rung {r}: `{}` skipped rung {}",
                            c.trial_id,
                            r - 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladders() {
        assert_eq!(RungLadder::new(25, 100, 2).unwrap().fidelities(), &[25, 50, 100]);
        assert_eq!(RungLadder::new(1, 8, 2).unwrap().fidelities(), &[1, 2, 4, 8]);
        assert_eq!(RungLadder::new(10, 10, 2).unwrap().fidelities(), &[10]);
        assert_eq!(RungLadder::new(25, 90, 2).unwrap().fidelities(), &[25, 50, 90]);
        assert_eq!(RungLadder::new(1, 100, 3).unwrap().fidelities(), &[1, 3, 9, 27, 81, 100]);
        assert!(RungLadder::new(0, 10, 2).is_err());
        assert!(RungLadder::new(20, 10, 2).is_err());
        assert!(RungLadder::new(1, 10, 1).is_err());
    }

    fn fill(asha: &mut Asha<&'static str>, costs: &[(&'static str, f64)]) -> Vec<String> {
        let jobs: Vec<_> = costs.iter().map(|(name, _)| asha.next_job(|| *name)).collect();
        for (job, (_, cost)) in jobs.iter().zip(costs) {
            asha.report(&job.trial_id, 0, *cost).unwrap();
        }
        jobs.into_iter().map(|j| j.trial_id).collect()
    }

    #[test]
    fn promotes_best_of_top_fraction() {
        let mut asha = Asha::new(RungLadder::new(25, 100, 2).unwrap());
        let ids = fill(&mut asha, &[("A", 0.5), ("B", 0.3), ("C", 0.4), ("D", 0.6)]);
        let job = asha.next_job(|| unreachable!());
        assert_eq!((job.trial_id.as_str(), job.config, job.fidelity), (ids[1].as_str(), "B", 50));
        assert_eq!(job.previous_fidelity, Some(25));
        let job = asha.next_job(|| unreachable!());
        assert_eq!((job.config, job.fidelity), ("C", 50));
        // quota of 2 is used up
        let job = asha.next_job(|| "E");
        assert_eq!((job.config, job.fidelity, job.rung), ("E", 25, 0));
        asha.check_invariants().unwrap();
    }

    #[test]
    fn single_completion_starts_new_config() {
        let mut asha = Asha::new(RungLadder::new(25, 100, 2).unwrap());
        fill(&mut asha, &[("A", 0.5)]);
        let job = asha.next_job(|| "B");
        assert_eq!((job.config, job.fidelity), ("B", 25));
    }

    #[test]
    fn ties_go_to_earlier_completion() {
        let mut asha = Asha::new(RungLadder::new(1, 2, 2).unwrap());
        let a = asha.next_job(|| "A");
        let b = asha.next_job(|| "B");
        asha.report(&b.trial_id, 0, 0.5).unwrap();
        asha.report(&a.trial_id, 0, 0.5).unwrap();
        assert_eq!(asha.next_job(|| "C").config, "B");
    }

    #[test]
    fn report_errors() {
        let mut asha = Asha::new(RungLadder::new(25, 100, 2).unwrap());
        let job = asha.next_job(|| "A");
        assert!(asha.report(&job.trial_id, 1, 0.1).is_err());
        asha.report(&job.trial_id, 0, 0.1).unwrap();
        let dup = asha.report(&job.trial_id, 0, 0.1).unwrap_err();
        assert!(dup.to_string().contains("duplicate"), "{dup}");
        assert!(asha.report("t99", 0, 0.1).unwrap_err().to_string().contains("unknown"));
        let job = asha.next_job(|| "B");
        assert!(asha.report(&job.trial_id, 0, f64::NAN).is_err());
        asha.cancel(&job.trial_id).unwrap();
        assert_eq!(asha.pending(), 0);
        assert!(asha.cancel(&job.trial_id).is_err());
    }

    #[test]
    fn top_rung_trials_are_never_promoted() {
        let mut asha = Asha::new(RungLadder::new(1, 2, 2).unwrap());
        let ids = fill(&mut asha, &[("A", 0.1), ("B", 0.2)]);
        let up = asha.next_job(|| unreachable!());
        assert_eq!(up.trial_id, ids[0]);
        asha.report(&up.trial_id, 1, 0.05).unwrap();
        let next = asha.next_job(|| "C");
        assert_eq!(next.rung, 0);
        asha.check_invariants().unwrap();
    }
}
