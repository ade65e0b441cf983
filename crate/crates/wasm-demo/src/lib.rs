//! Browser bindings for the demo page in `www/`.
//!
//! Three operations, each returning JSON text for the page to draw:
//! a seeded search on the builtin ZDT1 problem, a ParEGO cost grid, and
//! ranks plus fairness metrics for points on a line.

use fairpareto_core::asha::RungLadder;
use fairpareto_core::configspace::SearchSpace;
use fairpareto_core::fairmetrics::{compute_ranks, fairness_metric, EmbeddingRecord, EmbeddingSet, FairnessMetric};
use fairpareto_core::objectives::{MetricValue, ObjectiveVector};
use fairpareto_core::orchestrator::{random_search, run_search, SearchBudget, SearchOptions};
use fairpareto_core::runner::ObjectiveBackend;
use fairpareto_core::scalarize::{parego, WeightVector};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
struct Evaluated {
    f1: f64,
    f2: f64,
    fidelity: u32,
    on_front: bool,
}

#[derive(Serialize)]
struct SearchView {
    evaluations: Vec<Evaluated>,
    random: Vec<Evaluated>,
    hypervolume: f64,
    random_hypervolume: f64,
    fidelity_equivalents: f64,
}

const HV_REFERENCE: (f64, f64) = (1.1, 11.0);

/// Runs a single-worker search on `builtin:zdt1` and a random-search
/// baseline with the same fidelity budget.
pub fn search_view(budget_trials: usize, seed: u64, rho: f64) -> Result<String, String> {
    let space = SearchSpace::dpn_fair_v1();
    let backend = ObjectiveBackend::Builtin(fairpareto_core::runner::BuiltinFunction::Zdt1);
    let ladder = RungLadder::new(25, 100, 2).map_err(|e| e.to_string())?;
    let mut opts = SearchOptions::new(ladder, SearchBudget::trials(budget_trials.max(1)), seed);
    opts.rho = rho;
    let out = run_search(&space, &backend, &opts, None).map_err(|e| e.to_string())?;
    let reference = ObjectiveVector::from_pairs([("f1", HV_REFERENCE.0), ("f2", HV_REFERENCE.1)]).map_err(|e| e.to_string())?;

    let front_keys: Vec<&str> = out.front.members.iter().map(|m| m.config_key.as_str()).collect();
    let evaluations = out
        .history
        .iter()
        .filter_map(|r| {
            let o = r.objectives.as_ref()?;
            Some(Evaluated {
                f1: o.get("f1")?.value()?,
                f2: o.get("f2")?.value()?,
                fidelity: r.fidelity,
                on_front: r.fidelity == 100 && front_keys.contains(&r.config.key().as_str()),
            })
        })
        .collect();

    let n_random = (out.fidelity_equivalents.floor() as usize).max(1);
    let (random_history, random_front) =
        random_search(&space, &backend, n_random, 100, seed.wrapping_add(1000)).map_err(|e| e.to_string())?;
    let random_keys: Vec<&str> = random_front.members.iter().map(|m| m.config_key.as_str()).collect();
    let random = random_history
        .iter()
        .filter_map(|r| {
            let o = r.objectives.as_ref()?;
            Some(Evaluated {
                f1: o.get("f1")?.value()?,
                f2: o.get("f2")?.value()?,
                fidelity: r.fidelity,
                on_front: random_keys.contains(&r.config.key().as_str()),
            })
        })
        .collect();

    let view = SearchView {
        evaluations,
        random,
        hypervolume: out.front.hypervolume(&reference).map_err(|e| e.to_string())?,
        random_hypervolume: random_front.hypervolume(&reference).map_err(|e| e.to_string())?,
        fidelity_equivalents: out.fidelity_equivalents,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn search(budget_trials: usize, seed: u64, rho: f64) -> Result<String, JsError> {
    search_view(budget_trials, seed, rho).map_err(js_err)
}

/// Row-major `n x n` grid of ParEGO costs over normalized `(f1, f2)` in
/// `[0, 1]^2`, with weights `(lambda1, 1 - lambda1)`. Row 0 is `f2 = 0`.
pub fn parego_values(lambda1: f64, rho: f64, n: usize) -> Result<Vec<f64>, String> {
    let w = WeightVector::new(vec![lambda1, 1.0 - lambda1]).map_err(|e| e.to_string())?;
    let step = 1.0 / (n.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(parego(&[j as f64 * step, i as f64 * step], &w, rho).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn parego_grid(lambda1: f64, rho: f64, n: usize) -> Result<Vec<f64>, JsError> {
    parego_values(lambda1.clamp(0.0, 1.0), rho, n).map_err(js_err)
}

#[derive(Serialize)]
struct LineView {
    ranks: Vec<Option<usize>>,
    metrics: Vec<(String, String)>,
}

/// Ranks and the five metrics for 1-D embeddings given as
/// `position,identity,group` lines. The first group seen is the numerator.
pub fn line_view(text: &str) -> Result<String, String> {
    let mut records = Vec::new();
    for (i, line) in text.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let mut parts = line.split(',').map(str::trim);
        let (Some(x), Some(identity), Some(group)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format!("line {}: expected `position,identity,group`", i + 1));
        };
        let x: f64 = x.parse().map_err(|_| format!("line {}: bad position `{x}`", i + 1))?;
        records.push(EmbeddingRecord {
            image_id: format!("p{i}"),
            identity: identity.to_string(),
            group: group.to_string(),
            vector: vec![x],
        });
    }
    let set = EmbeddingSet::new(records).map_err(|e| e.to_string())?;
    let report = compute_ranks(&set).map_err(|e| e.to_string())?;
    let groups = report.group_names();
    let metrics = if groups.len() >= 2 {
        FairnessMetric::ALL
            .iter()
            .map(|&m| {
                let v = fairness_metric(&report, m, &groups[0], &groups[1]).map(|v| v.value);
                let shown = match v {
                    Ok(MetricValue::Defined(x)) => format!("{x:.4}"),
                    Ok(MetricValue::Undefined) => "undefined".to_string(),
                    Err(e) => e.to_string(),
                };
                (m.name().to_string(), shown)
            })
            .collect()
    } else {
        vec![("groups".to_string(), "need two groups with evaluable probes".to_string())]
    };
    serde_json::to_string(&LineView {
        ranks: report.per_image.iter().map(|p| p.rank).collect(),
        metrics,
    })
    .map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn line_metrics(text: &str) -> Result<String, JsError> {
    line_view(text).map_err(js_err)
}
