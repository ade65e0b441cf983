//! Dominance, Pareto fronts, multi-seed aggregation and 2-D hypervolume.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::objectives::{ObjectiveVector, Objectives};
use crate::store::{TrialRecord, TrialStatus};

/// `a` dominates `b`: no worse in every objective, strictly better in one.
pub fn dominates(a: &ObjectiveVector, b: &ObjectiveVector) -> Result<bool> {
    a.check_same_names(b)?;
    Ok(dominates_values(
        &a.iter().map(|(_, v)| v).collect::<Vec<_>>(),
        &b.iter().map(|(_, v)| v).collect::<Vec<_>>(),
    ))
}

pub fn dominates_values(a: &[f64], b: &[f64]) -> bool {
    debug_assert_eq!(a.len(), b.len());
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        strictly |= x < y;
    }
    strictly
}

/// Indices of the non-dominated rows, ascending. Identical rows are all kept.
pub fn non_dominated(rows: &[Vec<f64>]) -> Vec<usize> {
    match rows.first().map(Vec::len) {
        None => Vec::new(),
        Some(2) => non_dominated_2d(rows),
        Some(_) => (0..rows.len())
            .filter(|&i| !rows.iter().any(|q| dominates_values(q, &rows[i])))
            .collect(),
    }
}

/// Sort-and-sweep over (f1, f2).
fn non_dominated_2d(rows: &[Vec<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        rows[a][0]
            .total_cmp(&rows[b][0])
            .then(rows[a][1].total_cmp(&rows[b][1]))
    });
    let mut keep = Vec::new();
    let mut best_f2 = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        let f1 = rows[order[i]][0];
        let group_min = rows[order[i]][1];
        let mut j = i;
        while j < order.len() && rows[order[j]][0] == f1 {
            if rows[order[j]][1] == group_min && best_f2 > group_min {
                keep.push(order[j]);
            }
            j += 1;
        }
        best_f2 = best_f2.min(group_min);
        i = j;
    }
    keep.sort_unstable();
    keep
}

/// Indices of the non-dominated vectors among `points`.
pub fn pareto_front(points: &[ObjectiveVector]) -> Result<Vec<usize>> {
    let Some(first) = points.first() else {
        return Ok(Vec::new());
    };
    let names = first.names();
    let rows = points
        .iter()
        .map(|p| {
            first.check_same_names(p)?;
            p.values_in(&names)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(non_dominated(&rows))
}

/// Per-configuration mean and standard error over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregatedPoint {
    pub config_key: String,
    pub mean: ObjectiveVector,
    pub standard_error: ObjectiveVector,
    pub n_seeds: usize,
}

impl AggregatedPoint {
    /// A point observed once.
    pub fn single(config_key: impl Into<String>, value: ObjectiveVector) -> Self {
        let standard_error = ObjectiveVector::from_pairs(value.iter().map(|(k, _)| (k.to_string(), 0.0)))
            .expect("zeros are finite");
        Self {
            config_key: config_key.into(),
            mean: value,
            standard_error,
            n_seeds: 1,
        }
    }
}

/// Mean and standard error `s / sqrt(n)` (sample standard deviation; 0 for n = 1).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / n.sqrt())
}

/// Groups reported trials at `fidelity` by configuration and aggregates the
/// named objectives. Trials with an undefined objective are dropped (counted
/// in the warning log); configurations without any trial at `fidelity` are
/// skipped. Output order follows first appearance.
pub fn aggregate_seeds(
    trials: &[TrialRecord],
    fidelity: u32,
    objectives: &[String],
) -> Vec<AggregatedPoint> {
    let mut groups: Vec<(String, Vec<ObjectiveVector>)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut undefined = 0usize;
    let mut elsewhere: BTreeMap<String, ()> = BTreeMap::new();
    for t in trials.iter().filter(|t| t.status == TrialStatus::Reported) {
        let key = t.config.key();
        if t.fidelity != fidelity {
            elsewhere.insert(key, ());
            continue;
        }
        let Some(v) = t.objectives.as_ref().and_then(|o| ObjectiveVector::select(o, objectives)) else {
            undefined += 1;
            continue;
        };
        let slot = *index.entry(key.clone()).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(v);
    }
    let skipped = elsewhere.keys().filter(|k| !index.contains_key(*k)).count();
    if skipped > 0 {
        log::info!("{skipped} configuration(s) have no reported trial at fidelity {fidelity}");
    }
    if undefined > 0 {
        log::warn!("{undefined} trial(s) dropped for missing or undefined objectives");
    }
    groups
        .into_iter()
        .map(|(config_key, vs)| {
            let mut mean = ObjectiveVector::new();
            let mut se = ObjectiveVector::new();
            for name in objectives {
                let values: Vec<f64> = vs.iter().map(|v| v.get(name).expect("selected")).collect();
                let (m, s) = mean_and_stderr(&values);
                mean.insert(name.clone(), m);
                se.insert(name.clone(), s);
            }
            AggregatedPoint {
                config_key,
                mean,
                standard_error: se,
                n_seeds: vs.len(),
            }
        })
        .collect()
}

/// Non-dominated aggregated points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoFront {
    pub objectives: Vec<String>,
    pub members: Vec<AggregatedPoint>,
}

impl ParetoFront {
    /// Splits `points` into the front (by mean) and an `on_front` flag per point.
    pub fn extract(points: &[AggregatedPoint], objectives: &[String]) -> Result<(Self, Vec<bool>)> {
        let rows = points
            .iter()
            .map(|p| p.mean.values_in(objectives))
            .collect::<Result<Vec<_>>>()?;
        let mut flags = vec![false; points.len()];
        for i in non_dominated(&rows) {
            flags[i] = true;
        }
        let members = points
            .iter()
            .zip(&flags)
            .filter(|(_, &on)| on)
            .map(|(p, _)| p.clone())
            .collect();
        Ok((
            Self {
                objectives: objectives.to_vec(),
                members,
            },
            flags,
        ))
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Hypervolume of the member means against `reference` (two objectives only).
    pub fn hypervolume(&self, reference: &ObjectiveVector) -> Result<f64> {
        if self.objectives.len() != 2 {
            return Err(Error::input("hypervolume needs exactly two objectives"));
        }
        let r = reference.values_in(&self.objectives)?;
        let pts = self
            .members
            .iter()
            .map(|m| m.mean.values_in(&self.objectives).map(|v| (v[0], v[1])))
            .collect::<Result<Vec<_>>>()?;
        hypervolume2d(&pts, (r[0], r[1]))
    }
}

/// Area dominated by `points` and bounded by `reference`. Every point must
/// dominate the reference.
pub fn hypervolume2d(points: &[(f64, f64)], reference: (f64, f64)) -> Result<f64> {
    let (r1, r2) = reference;
    for &(a, b) in points {
        if !dominates_values(&[a, b], &[r1, r2]) {
            return Err(Error::input(format!(
                "point ({a}, {b}) does not dominate reference ({r1}, {r2})"
            )));
        }
    }
    let mut sorted: Vec<(f64, f64)> = points.to_vec();
    sorted.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
    // sweep in increasing f1, keeping a strictly decreasing f2 staircase
    let mut steps: Vec<(f64, f64)> = Vec::new();
    for p in sorted {
        if steps.last().is_none_or(|last| p.1 < last.1) {
            steps.push(p);
        }
    }
    let mut area = 0.0;
    for (i, &(f1, f2)) in steps.iter().enumerate() {
        let next_f1 = steps.get(i + 1).map_or(r1, |s| s.0);
        area += (next_f1 - f1) * (r2 - f2);
    }
    Ok(area)
}

/// A conjunction of `objective < threshold` comparisons, e.g. `error<0.3 && rank_disparity < 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    clauses: Vec<(String, f64)>,
}

impl Filter {
    pub fn clauses(&self) -> &[(String, f64)] {
        &self.clauses
    }

    pub fn objectives(&self) -> impl Iterator<Item = &str> {
        self.clauses.iter().map(|(n, _)| n.as_str())
    }

    /// True iff every clause holds. Undefined values never pass.
    pub fn matches(&self, objectives: &Objectives) -> Result<bool> {
        for (name, threshold) in &self.clauses {
            let v = objectives
                .get(name)
                .ok_or_else(|| Error::UnknownObjective(name.clone()))?;
            match v.value() {
                Some(v) if v < *threshold => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }
}

impl FromStr for Filter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let clauses = s
            .split("&&")
            .map(|clause| {
                let (name, value) = clause
                    .split_once('<')
                    .ok_or_else(|| Error::input(format!("filter clause `{}` is not `<objective> < <real>`", clause.trim())))?;
                let name = name.trim();
                let is_ident = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
                if !is_ident {
                    return Err(Error::input(format!("bad objective name `{name}` in filter")));
                }
                let threshold: f64 = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::input(format!("bad threshold `{}` in filter", value.trim())))?;
                Ok((name.to_string(), threshold))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clauses })
    }
}

/// One row of an exported front table.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontRow {
    pub point: AggregatedPoint,
    pub on_front: bool,
}

/// Writes `config_key, <obj>_mean, <obj>_stderr, ..., n_seeds, on_front`.
pub fn write_front_csv<W: Write>(writer: W, objectives: &[String], rows: &[FrontRow]) -> Result<()> {
    let to_err = |e: csv::Error| Error::input(e.to_string());
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec!["config_key".to_string()];
    for o in objectives {
        header.push(format!("{o}_mean"));
        header.push(format!("{o}_stderr"));
    }
    header.push("n_seeds".to_string());
    header.push("on_front".to_string());
    csv.write_record(&header).map_err(to_err)?;
    for row in rows {
        let mut out = vec![row.point.config_key.clone()];
        for o in objectives {
            let m = row.point.mean.get(o).ok_or_else(|| Error::UnknownObjective(o.clone()))?;
            let s = row.point.standard_error.get(o).ok_or_else(|| Error::UnknownObjective(o.clone()))?;
            out.push(m.to_string());
            out.push(s.to_string());
        }
        out.push(row.point.n_seeds.to_string());
        out.push(row.on_front.to_string());
        csv.write_record(&out).map_err(to_err)?;
    }
    csv.flush().map_err(|e| Error::input(e.to_string()))
}

/// Reads a table written by [`write_front_csv`].
pub fn read_front_csv<R: Read>(reader: R) -> Result<(Vec<String>, Vec<FrontRow>)> {
    let to_err = |e: csv::Error| Error::input(e.to_string());
    let mut csv = csv::Reader::from_reader(reader);
    let header: Vec<String> = csv.headers().map_err(to_err)?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("config_key") {
        return Err(Error::MissingColumn("config_key".to_string()));
    }
    let tail = &header[1..];
    if tail.len() < 2 || tail[tail.len() - 2] != "n_seeds" || tail[tail.len() - 1] != "on_front" {
        return Err(Error::MissingColumn("n_seeds,on_front".to_string()));
    }
    let objective_cols = &tail[..tail.len() - 2];
    if !objective_cols.len().is_multiple_of(2) {
        return Err(Error::input("front table has an unpaired objective column"));
    }
    let objectives = objective_cols
        .chunks(2)
        .map(|pair| {
            let name = pair[0]
                .strip_suffix("_mean")
                .ok_or_else(|| Error::MissingColumn(format!("{}_mean", pair[0])))?;
            if pair[1] != format!("{name}_stderr") {
                return Err(Error::MissingColumn(format!("{name}_stderr")));
            }
            Ok(name.to_string())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for record in csv.records() {
        let record = record.map_err(to_err)?;
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .map_err(|_| Error::input(format!("bad number `{}`", &record[i])))
        };
        let mut mean = Vec::new();
        let mut se = Vec::new();
        for (k, o) in objectives.iter().enumerate() {
            mean.push((o.clone(), num(1 + 2 * k)?));
            se.push((o.clone(), num(2 + 2 * k)?));
        }
        let n = header.len();
        rows.push(FrontRow {
            point: AggregatedPoint {
                config_key: record[0].to_string(),
                mean: ObjectiveVector::from_pairs(mean)?,
                standard_error: ObjectiveVector::from_pairs(se)?,
                n_seeds: record[n - 2]
                    .parse()
                    .map_err(|_| Error::input(format!("bad n_seeds `{}`", &record[n - 2])))?,
            },
            on_front: record[n - 1]
                .parse()
                .map_err(|_| Error::input(format!("bad on_front `{}`", &record[n - 1])))?,
        });
    }
    Ok((objectives, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::configspace::Configuration;
    use crate::objectives::MetricValue;

    fn ov(a: f64, b: f64) -> ObjectiveVector {
        ObjectiveVector::from_pairs([("error", a), ("rank_disparity", b)]).unwrap()
    }

    #[test]
    fn dominance_examples() {
        assert!(dominates(&ov(0.1, 0.2), &ov(0.2, 0.3)).unwrap());
        assert!(!dominates(&ov(0.1, 0.5), &ov(0.2, 0.3)).unwrap());
        assert!(!dominates(&ov(0.2, 0.3), &ov(0.1, 0.5)).unwrap());
        assert!(!dominates(&ov(0.1, 0.5), &ov(0.1, 0.5)).unwrap());
        let other = ObjectiveVector::from_pairs([("error", 0.1), ("ratio", 0.1)]).unwrap();
        assert!(matches!(dominates(&ov(0.1, 0.1), &other), Err(Error::ObjectiveMismatch { .. })));
    }

    #[test]
    fn front_examples() {
        let pts = vec![ov(0.1, 0.5), ov(0.2, 0.3), ov(0.3, 0.4)];
        assert_eq!(pareto_front(&pts).unwrap(), vec![0, 1]);
        assert_eq!(pareto_front(&pts[2..]).unwrap(), vec![0]);
        assert!(pareto_front(&[]).unwrap().is_empty());
        let dup = vec![ov(0.1, 0.5), ov(0.1, 0.5), ov(0.1, 0.6), ov(0.05, 0.9)];
        assert_eq!(pareto_front(&dup).unwrap(), vec![0, 1, 3]);
    }

    #[test]
    fn three_objective_front() {
        let rows = vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 1.0], vec![1.0, 0.0, 1.0]];
        assert_eq!(non_dominated(&rows), vec![0, 1, 3]);
    }

    #[test]
    fn mean_and_stderr_examples() {
        assert_eq!(mean_and_stderr(&[0.4; 4]), (0.4, 0.0));
        let (m, s) = mean_and_stderr(&[0.2, 0.4]);
        assert!((m - 0.3).abs() < 1e-15);
        assert!((s - 0.1).abs() < 1e-15);
        assert_eq!(mean_and_stderr(&[0.7]), (0.7, 0.0));
    }

    fn trial(id: &str, head: &str, seed: u64, fidelity: u32, err: f64) -> TrialRecord {
        let mut o = Objectives::new();
        o.insert("error".into(), MetricValue::Defined(err));
        o.insert("rank_disparity".into(), MetricValue::Defined(err * 2.0));
        TrialRecord::reported(id, Configuration::new().with("head", head), seed, fidelity, o, 0.0)
    }

    #[test]
    fn aggregate_groups_by_config() {
        let names = vec!["error".to_string(), "rank_disparity".to_string()];
        let trials = vec![
            trial("t0", "CosFace", 0, 100, 0.2),
            trial("t1", "ArcFace", 0, 100, 0.5),
            trial("t2", "CosFace", 1, 100, 0.4),
            trial("t3", "MagFace", 0, 50, 0.1),
        ];
        let agg = aggregate_seeds(&trials, 100, &names);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].config_key, "head=CosFace");
        assert_eq!(agg[0].n_seeds, 2);
        assert!((agg[0].mean.get("error").unwrap() - 0.3).abs() < 1e-15);
        assert!((agg[0].standard_error.get("error").unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(agg[1].standard_error.get("error"), Some(0.0));
    }

    #[test]
    fn hypervolume_examples() {
        let hv = hypervolume2d(&[(0.1, 0.5), (0.2, 0.3)], (1.0, 1.0)).unwrap();
        assert!((hv - 0.61).abs() < 1e-12);
        assert_eq!(hypervolume2d(&[(0.0, 0.0)], (1.0, 1.0)).unwrap(), 1.0);
        assert_eq!(hypervolume2d(&[], (1.0, 1.0)).unwrap(), 0.0);
        assert!(hypervolume2d(&[(1.5, 0.0)], (1.0, 1.0)).is_err());
        // dominated and duplicate points add nothing
        let hv2 = hypervolume2d(&[(0.1, 0.5), (0.2, 0.3), (0.3, 0.4), (0.2, 0.3)], (1.0, 1.0)).unwrap();
        assert_eq!(hv, hv2);
    }

    #[test]
    fn filter_parsing() {
        let f: Filter = "error<0.3".parse().unwrap();
        assert_eq!(f.clauses(), &[("error".to_string(), 0.3)]);
        let f: Filter = " error < 0.3 && rank_disparity<2 ".parse().unwrap();
        assert_eq!(f.clauses().len(), 2);
        let mut o = Objectives::new();
        o.insert("error".into(), MetricValue::Defined(0.3));
        o.insert("rank_disparity".into(), MetricValue::Defined(1.0));
        assert!(!f.matches(&o).unwrap());
        o.insert("error".into(), MetricValue::Defined(0.29));
        assert!(f.matches(&o).unwrap());
        o.insert("rank_disparity".into(), MetricValue::Undefined);
        assert!(!f.matches(&o).unwrap());
        assert!("error>0.3".parse::<Filter>().is_err());
        assert!("error<abc".parse::<Filter>().is_err());
        assert!("<0.3".parse::<Filter>().is_err());
        let g: Filter = "accuracy<0.3".parse().unwrap();
        assert!(matches!(g.matches(&o), Err(Error::UnknownObjective(_))));
    }

    #[test]
    fn front_csv_round_trip() {
        let names = vec!["error".to_string(), "rank_disparity".to_string()];
        let pts = vec![
            AggregatedPoint::single("a", ov(0.1, 0.5)),
            AggregatedPoint::single("b|lr=0.1", ov(0.2, 1.0 / 3.0)),
            AggregatedPoint::single("c", ov(0.3, 0.4)),
        ];
        let (front, flags) = ParetoFront::extract(&pts, &names).unwrap();
        assert_eq!(front.len(), 2);
        assert_eq!(flags, vec![true, true, false]);
        let rows: Vec<FrontRow> = pts
            .into_iter()
            .zip(flags)
            .map(|(point, on_front)| FrontRow { point, on_front })
            .collect();
        let mut buf = Vec::new();
        write_front_csv(&mut buf, &names, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("config_key,error_mean,error_stderr,rank_disparity_mean,rank_disparity_stderr,n_seeds,on_front\n"));
        let (names2, rows2) = read_front_csv(buf.as_slice()).unwrap();
        assert_eq!(names2, names);
        assert_eq!(rows2, rows);
    }
}
