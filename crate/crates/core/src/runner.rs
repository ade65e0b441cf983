//! Objective backends.
//!
//! * `builtin:zdt1` maps a configuration to `[0, 1]^n` and evaluates a
//!   fidelity-biased ZDT1.
//! * `worker:<command>` runs an external trainer speaking the line protocol
//!   below over its standard input/output.
//! * `embeddings:<template>` loads an embedding file written for the trial
//!   and measures identification error and rank disparity.
//!
//! Worker protocol: one JSON object per `\n`-terminated UTF-8 line.
//!
//! ```text
//! -> {"type":"start","trial_id":"t17","config":{...},"fidelity":50,"seed":3}
//! <- {"type":"progress","trial_id":"t17","fidelity":25,"objectives":{"error":0.41,"rank_disparity":2.1}}
//! <- {"type":"final","trial_id":"t17","fidelity":50,"objectives":{"error":0.32,"rank_disparity":1.7}}
//! <- {"type":"fail","trial_id":"t17","message":"..."}
//! ```
//!
//! Unknown fields are ignored. A `final` message may carry `"resumable":true`;
//! promotions of such trials are started with `"resume_from":<fidelity>`.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::configspace::{Configuration, SearchSpace};
use crate::error::{Error, Result};
use crate::fairmetrics::{compute_ranks, multi_group_metric, EmbeddingSet, FairnessMetric};
use crate::objectives::{MetricValue, ObjectiveVector, Objectives};

/// Objectives produced by the builtin backend.
pub const ZDT_OBJECTIVES: [&str; 2] = ["f1", "f2"];

/// Objectives produced by trainers and embedding evaluation.
pub const FAIRNESS_OBJECTIVES: [&str; 2] = ["error", "rank_disparity"];

/// Multi-fidelity ZDT1. At `fidelity_fraction = 1` this is exact ZDT1; lower
/// fidelities add the same bias `0.5 * (1 - s)` to both objectives.
pub fn zdt1_mf(x: &[f64], fidelity_fraction: f64) -> Result<ObjectiveVector> {
    if x.len() < 2 {
        return Err(Error::input(format!("zdt1 needs at least 2 variables, got {}", x.len())));
    }
    if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::input(format!("zdt1 variable {v} outside [0, 1]")));
    }
    if !(fidelity_fraction > 0.0 && fidelity_fraction <= 1.0) {
        return Err(Error::input(format!("fidelity fraction {fidelity_fraction} outside (0, 1]")));
    }
    let g = 1.0 + 9.0 * x[1..].iter().sum::<f64>() / (x.len() - 1) as f64;
    let bias = 0.5 * (1.0 - fidelity_fraction);
    let f1 = x[0];
    let f2 = g * (1.0 - (f1 / g).sqrt());
    ObjectiveVector::from_pairs([("f1", f1 + bias), ("f2", f2 + bias)])
}

/// A line of the worker protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum WorkerMessage {
    Start {
        trial_id: String,
        config: Configuration,
        fidelity: u32,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        resume_from: Option<u32>,
    },
    Progress {
        trial_id: String,
        fidelity: u32,
        objectives: Objectives,
    },
    Final {
        trial_id: String,
        fidelity: u32,
        objectives: Objectives,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        resumable: Option<bool>,
    },
    Fail {
        trial_id: String,
        message: String,
    },
}

impl WorkerMessage {
    pub fn trial_id(&self) -> &str {
        match self {
            WorkerMessage::Start { trial_id, .. }
            | WorkerMessage::Progress { trial_id, .. }
            | WorkerMessage::Final { trial_id, .. }
            | WorkerMessage::Fail { trial_id, .. } => trial_id,
        }
    }

    /// One protocol line, without the trailing newline.
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("protocol messages serialize")
    }

    pub fn decode(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim_end_matches(['\r', '\n'])).map_err(|e| Error::Protocol {
            line: line.to_string(),
            reason: e.to_string(),
        })
    }
}

/// Tracks one trial's incoming messages and enforces ordering rules.
#[derive(Debug)]
pub struct TranscriptChecker {
    trial_id: String,
    target: u32,
    last_progress: Option<u32>,
    pub progress: Vec<(u32, Objectives)>,
}

/// Outcome of feeding one line to a [`TranscriptChecker`].
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Continue,
    Final { objectives: Objectives, resumable: bool },
}

impl TranscriptChecker {
    pub fn new(trial_id: &str, target: u32) -> Self {
        Self {
            trial_id: trial_id.to_string(),
            target,
            last_progress: None,
            progress: Vec::new(),
        }
    }

    pub fn feed(&mut self, line: &str) -> Result<Step> {
        let protocol = |reason: String| Error::Protocol {
            line: line.to_string(),
            reason,
        };
        let msg = WorkerMessage::decode(line)?;
        if msg.trial_id() != self.trial_id {
            return Err(protocol(format!("expected trial_id `{}`", self.trial_id)));
        }
        match msg {
            WorkerMessage::Start { .. } => Err(protocol("workers must not send `start`".to_string())),
            WorkerMessage::Progress { fidelity, objectives, .. } => {
                if let Some(prev) = self.last_progress {
                    if fidelity <= prev {
                        return Err(protocol(format!(
                            "progress fidelity {fidelity} does not increase past {prev}"
                        )));
                    }
                }
                if fidelity > self.target {
                    return Err(protocol(format!("progress fidelity {fidelity} exceeds target {}", self.target)));
                }
                self.last_progress = Some(fidelity);
                self.progress.push((fidelity, objectives));
                Ok(Step::Continue)
            }
            WorkerMessage::Final {
                fidelity,
                objectives,
                resumable,
                ..
            } => {
                if fidelity != self.target {
                    return Err(protocol(format!(
                        "final fidelity {fidelity} differs from requested {}",
                        self.target
                    )));
                }
                Ok(Step::Final {
                    objectives,
                    resumable: resumable.unwrap_or(false),
                })
            }
            WorkerMessage::Fail { message, .. } => Err(Error::Backend(format!(
                "worker reported failure for `{}`: {message}",
                self.trial_id
            ))),
        }
    }
}

/// Where objective values come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveBackend {
    Builtin(BuiltinFunction),
    Worker { command: String },
    Embeddings { template: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinFunction {
    Zdt1,
}

impl ObjectiveBackend {
    pub fn objective_names(&self) -> Vec<String> {
        let names: &[&str] = match self {
            ObjectiveBackend::Builtin(BuiltinFunction::Zdt1) => &ZDT_OBJECTIVES,
            _ => &FAIRNESS_OBJECTIVES,
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Whether repeated evaluations return identical results regardless of timing.
    pub fn is_deterministic(&self) -> bool {
        matches!(self, ObjectiveBackend::Builtin(_))
    }
}

impl FromStr for ObjectiveBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, spec) = s
            .split_once(':')
            .ok_or_else(|| Error::input(format!("backend `{s}` is not `builtin:`, `worker:` or `embeddings:`")))?;
        match kind {
            "builtin" => match spec {
                "zdt1" | "zdt1_mf" => Ok(ObjectiveBackend::Builtin(BuiltinFunction::Zdt1)),
                other => Err(Error::input(format!("unknown builtin function `{other}`"))),
            },
            "worker" => {
                let command = spec.trim().trim_matches('"').trim().to_string();
                if command.is_empty() {
                    return Err(Error::input("worker command is empty"));
                }
                Ok(ObjectiveBackend::Worker { command })
            }
            "embeddings" => {
                if spec.is_empty() {
                    return Err(Error::input("embeddings path template is empty"));
                }
                Ok(ObjectiveBackend::Embeddings {
                    template: spec.to_string(),
                })
            }
            other => Err(Error::input(format!("unknown backend kind `{other}`"))),
        }
    }
}

impl fmt::Display for ObjectiveBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveBackend::Builtin(BuiltinFunction::Zdt1) => f.write_str("builtin:zdt1"),
            ObjectiveBackend::Worker { command } => write!(f, "worker:{command}"),
            ObjectiveBackend::Embeddings { template } => write!(f, "embeddings:{template}"),
        }
    }
}

/// Everything a backend needs for one evaluation.
#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub trial_id: String,
    pub config: Configuration,
    pub fidelity: u32,
    pub max_fidelity: u32,
    pub seed: u64,
    pub resume_from: Option<u32>,
    pub timeout: Option<Duration>,
    pub cancel: Arc<AtomicBool>,
}

impl EvalRequest {
    pub fn new(trial_id: &str, config: Configuration, fidelity: u32, max_fidelity: u32, seed: u64) -> Self {
        Self {
            trial_id: trial_id.to_string(),
            config,
            fidelity,
            max_fidelity,
            seed,
            resume_from: None,
            timeout: None,
            cancel: Arc::new(AtomicBool::new(false)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub objectives: Objectives,
    pub progress: Vec<(u32, Objectives)>,
    pub resumable: bool,
    pub wall_time_s: f64,
}

pub fn evaluate(backend: &ObjectiveBackend, space: &SearchSpace, req: &EvalRequest) -> Result<Evaluation> {
    space.check_config(&req.config)?;
    match backend {
        ObjectiveBackend::Builtin(BuiltinFunction::Zdt1) => {
            let x = space.unit_coordinates(&req.config)?;
            let s = f64::from(req.fidelity) / f64::from(req.max_fidelity);
            let f = zdt1_mf(&x, s)?;
            // simulated evaluation: no wall time is reported
            Ok(Evaluation {
                objectives: f.to_objectives(),
                progress: Vec::new(),
                resumable: false,
                wall_time_s: 0.0,
            })
        }
        ObjectiveBackend::Worker { command } => run_worker(command, req),
        ObjectiveBackend::Embeddings { template } => {
            let started = Instant::now();
            let path = expand_template(template, req);
            let set = EmbeddingSet::from_path(&path)?;
            let mut objectives = evaluate_embeddings(&set)?;
            objectives.retain(|k, _| FAIRNESS_OBJECTIVES.contains(&k.as_str()));
            Ok(Evaluation {
                objectives,
                progress: Vec::new(),
                resumable: false,
                wall_time_s: started.elapsed().as_secs_f64(),
            })
        }
    }
}

/// Error rate and (max-pairwise) rank disparity of an embedding set.
pub fn evaluate_embeddings(set: &EmbeddingSet) -> Result<Objectives> {
    let report = compute_ranks(set)?;
    let error = report
        .error_rate()
        .ok_or_else(|| Error::input("no probe has a same-identity image"))?;
    let rank_disparity = multi_group_metric(&report, FairnessMetric::RankDisparity, &report.group_names())?;
    let mut out = Objectives::new();
    out.insert("error".to_string(), MetricValue::Defined(error));
    out.insert("rank_disparity".to_string(), rank_disparity.value);
    Ok(out)
}

/// Substitutes `{trial_id}`, `{fidelity}`, `{seed}` and `{config_key}`.
pub fn expand_template(template: &str, req: &EvalRequest) -> String {
    template
        .replace("{trial_id}", &req.trial_id)
        .replace("{fidelity}", &req.fidelity.to_string())
        .replace("{seed}", &req.seed.to_string())
        .replace("{config_key}", &req.config.key())
}

struct KillOnDrop(Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        if let Ok(None) = self.0.try_wait() {
            let _ = self.0.kill();
        }
        let _ = self.0.wait();
    }
}

const POLL: Duration = Duration::from_millis(50);

fn run_worker(command: &str, req: &EvalRequest) -> Result<Evaluation> {
    let started = Instant::now();
    let mut child = KillOnDrop(
        Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot spawn `{command}`: {e}")))?,
    );
    let start = WorkerMessage::Start {
        trial_id: req.trial_id.clone(),
        config: req.config.clone(),
        fidelity: req.fidelity,
        seed: req.seed,
        resume_from: req.resume_from,
    };
    {
        let mut stdin = child.0.stdin.take().expect("stdin is piped");
        let line = format!("{}\n", start.encode());
        // a worker that exits without reading is reported below via its output
        if let Err(e) = stdin.write_all(line.as_bytes()).and_then(|()| stdin.flush()) {
            log::debug!("{}: writing start message: {e}", req.trial_id);
        }
    }
    let stdout = child.0.stdout.take().expect("stdout is piped");
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            if tx.send(line).is_err() {
                break;
            }
        }
    });

    let mut checker = TranscriptChecker::new(&req.trial_id, req.fidelity);
    let deadline = req.timeout.map(|t| started + t);
    loop {
        if req.cancel.load(Ordering::Relaxed) {
            return Err(Error::Backend(format!("trial `{}` cancelled", req.trial_id)));
        }
        let wait = match deadline {
            Some(d) => {
                let now = Instant::now();
                if now >= d {
                    return Err(Error::Timeout(req.timeout.expect("deadline implies timeout")));
                }
                (d - now).min(POLL)
            }
            None => POLL,
        };
        match rx.recv_timeout(wait) {
            Ok(Ok(line)) => {
                if line.trim().is_empty() {
                    continue;
                }
                log::debug!("{} <- {line}", req.trial_id);
                if let Step::Final { objectives, resumable } = checker.feed(&line)? {
                    return Ok(Evaluation {
                        objectives,
                        progress: std::mem::take(&mut checker.progress),
                        resumable,
                        wall_time_s: started.elapsed().as_secs_f64(),
                    });
                }
            }
            Ok(Err(e)) => return Err(Error::Backend(format!("reading worker output: {e}"))),
            Err(mpsc::RecvTimeoutError::Timeout) => continue,
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                let status = child.0.wait().map(|s| s.to_string()).unwrap_or_else(|e| e.to_string());
                return Err(Error::Backend(format!(
                    "worker for `{}` exited without a final message ({status})",
                    req.trial_id
                )));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &ObjectiveVector, f1: f64, f2: f64) -> bool {
        (a.get("f1").unwrap() - f1).abs() < 1e-15 && (a.get("f2").unwrap() - f2).abs() < 1e-15
    }

    #[test]
    fn zdt1_examples() {
        assert!(close(&zdt1_mf(&[0.0; 6], 1.0).unwrap(), 0.0, 1.0));
        assert!(close(&zdt1_mf(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1.0).unwrap(), 1.0, 0.0));
        assert!(close(&zdt1_mf(&[0.0; 6], 0.5).unwrap(), 0.25, 1.25));
        assert!(zdt1_mf(&[0.0], 1.0).is_err());
        assert!(zdt1_mf(&[0.0, 1.5], 1.0).is_err());
        assert!(zdt1_mf(&[0.0, 0.5], 0.0).is_err());
    }

    #[test]
    fn zdt1_front_at_full_fidelity() {
        for i in 0..=20 {
            let f1 = i as f64 / 20.0;
            let f = zdt1_mf(&[f1, 0.0, 0.0, 0.0], 1.0).unwrap();
            assert!((f.get("f2").unwrap() - (1.0 - f1.sqrt())).abs() < 1e-15);
        }
    }

    #[test]
    fn builtin_is_deterministic() {
        let space = SearchSpace::dpn_fair_v1();
        let backend: ObjectiveBackend = "builtin:zdt1".parse().unwrap();
        let config = space.sample(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1));
        let req = EvalRequest::new("t0", config, 50, 100, 7);
        let a = evaluate(&backend, &space, &req).unwrap();
        let b = evaluate(&backend, &space, &req).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.objectives.len(), 2);
    }

    #[test]
    fn backend_specs() {
        assert_eq!("builtin:zdt1".parse::<ObjectiveBackend>().unwrap(), ObjectiveBackend::Builtin(BuiltinFunction::Zdt1));
        assert_eq!(
            "worker:\"python3 train.py --fast\"".parse::<ObjectiveBackend>().unwrap(),
            ObjectiveBackend::Worker { command: "python3 train.py --fast".into() }
        );
        assert!("worker:".parse::<ObjectiveBackend>().is_err());
        assert!("worker:\"\"".parse::<ObjectiveBackend>().is_err());
        assert!("builtin:zdt9".parse::<ObjectiveBackend>().is_err());
        assert!("gpu:x".parse::<ObjectiveBackend>().is_err());
        let e: ObjectiveBackend = "embeddings:runs/{trial_id}/f{fidelity}.csv".parse().unwrap();
        let req = EvalRequest::new("t3", Configuration::new().with("head", "CosFace"), 50, 100, 2);
        let ObjectiveBackend::Embeddings { template } = &e else { unreachable!() };
        assert_eq!(expand_template(template, &req), "runs/t3/f50.csv");
    }

    #[test]
    fn wire_format_is_exact() {
        let start = WorkerMessage::Start {
            trial_id: "t17".into(),
            config: Configuration::new().with("head", "CosFace"),
            fidelity: 50,
            seed: 3,
            resume_from: None,
        };
        assert_eq!(
            start.encode(),
            r#"{"type":"start","trial_id":"t17","config":{"head":"CosFace"},"fidelity":50,"seed":3}"#
        );
        let line = r#"{"type":"progress","trial_id":"t17","fidelity":25,"objectives":{"error":0.41,"rank_disparity":2.1}}"#;
        assert_eq!(WorkerMessage::decode(line).unwrap().encode(), line);
        let line = r#"{"type":"final","trial_id":"t17","fidelity":50,"objectives":{"error":0.32,"rank_disparity":1.7}}"#;
        assert_eq!(WorkerMessage::decode(line).unwrap().encode(), line);
        let line = r#"{"type":"fail","trial_id":"t17","message":"out of memory"}"#;
        assert_eq!(WorkerMessage::decode(line).unwrap().encode(), line);
    }

    #[test]
    fn unknown_fields_ignored_missing_fields_rejected() {
        let m = WorkerMessage::decode(r#"{"type":"fail","trial_id":"t1","message":"x","host":"gpu3"}"#).unwrap();
        assert_eq!(m.trial_id(), "t1");
        assert!(WorkerMessage::decode(r#"{"type":"final","trial_id":"t1","objectives":{}}"#).is_err());
        assert!(WorkerMessage::decode(r#"{"type":"hello","trial_id":"t1"}"#).is_err());
        let err = WorkerMessage::decode("not json").unwrap_err().to_string();
        assert!(err.contains("`not json`"), "{err}");
    }

    #[test]
    fn transcript_rules() {
        let mut c = TranscriptChecker::new("t1", 100);
        let p = |f: u32| format!(r#"{{"type":"progress","trial_id":"t1","fidelity":{f},"objectives":{{"error":0.5}}}}"#);
        assert_eq!(c.feed(&p(50)).unwrap(), Step::Continue);
        let err = c.feed(&p(25)).unwrap_err();
        assert!(matches!(&err, Error::Protocol { reason, .. } if reason.contains("does not increase")), "{err}");
        let mut c = TranscriptChecker::new("t1", 100);
        assert!(c.feed(&p(150)).is_err());
        assert!(c.feed(r#"{"type":"final","trial_id":"t1","fidelity":50,"objectives":{}}"#).is_err());
        assert!(c.feed(r#"{"type":"final","trial_id":"t2","fidelity":100,"objectives":{}}"#).is_err());
        let step = c
            .feed(r#"{"type":"final","trial_id":"t1","fidelity":100,"objectives":{"error":0.1},"resumable":true}"#)
            .unwrap();
        assert!(matches!(step, Step::Final { resumable: true, .. }));
        assert!(matches!(
            c.feed(r#"{"type":"fail","trial_id":"t1","message":"boom"}"#),
            Err(Error::Backend(m)) if m.contains("boom")
        ));
    }

    fn objectives_strategy() -> impl Strategy<Value = Objectives> {
        prop::collection::btree_map(
            "[a-z_]{1,12}",
            prop_oneof![
                (-1e6f64..1e6).prop_map(MetricValue::Defined),
                Just(MetricValue::Undefined)
            ],
            0..4,
        )
    }

    fn message_strategy() -> impl Strategy<Value = WorkerMessage> {
        let id = "t[0-9]{1,4}";
        prop_oneof![
            (id, any::<u32>(), objectives_strategy()).prop_map(|(trial_id, fidelity, objectives)| {
                WorkerMessage::Progress { trial_id, fidelity, objectives }
            }),
            (id, any::<u32>(), objectives_strategy(), proptest::option::of(any::<bool>())).prop_map(
                |(trial_id, fidelity, objectives, resumable)| WorkerMessage::Final { trial_id, fidelity, objectives, resumable }
            ),
            (id, ".*").prop_map(|(trial_id, message)| WorkerMessage::Fail { trial_id, message }),
            (id, any::<u32>(), any::<u64>(), 0.0001f64..1.0, "[A-Za-z]{1,8}").prop_map(|(trial_id, fidelity, seed, lr, head)| {
                WorkerMessage::Start {
                    trial_id,
                    config: Configuration::new().with("head", head.as_str()).with("lr", lr),
                    fidelity,
                    seed,
                    resume_from: None,
                }
            }),
        ]
    }

    proptest! {
        #[test]
        fn protocol_round_trip(msg in message_strategy()) {
            let line = msg.encode();
            prop_assert!(!line.contains('\n'));
            let back = WorkerMessage::decode(&line).unwrap();
            prop_assert_eq!(&back, &msg);
            prop_assert_eq!(back.encode(), line);
        }
    }
}
