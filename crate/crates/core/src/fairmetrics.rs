//! Identification rank, error and group fairness metrics over labeled
//! embedding sets.
//!
//! The rank of a probe image is the number of images of a *different*
//! identity that lie strictly closer to it (Euclidean distance) than its
//! nearest same-identity image. A probe is identified correctly iff its rank
//! is zero. Probes without any same-identity image are excluded.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::objectives::MetricValue;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub identity: String,
    pub group: String,
    pub vector: Vec<f64>,
}

/// Labeled embeddings sharing one dimension, with unique image ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingSet {
    pub fn new(records: Vec<EmbeddingRecord>) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::input("embedding set is empty"));
        };
        let dim = first.vector.len();
        if dim == 0 {
            return Err(Error::input("embedding dimension must be positive"));
        }
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            if r.vector.len() != dim {
                return Err(Error::input(format!(
                    "image `{}` has dimension {}, expected {dim}",
                    r.image_id,
                    r.vector.len()
                )));
            }
            if let Some(v) = r.vector.iter().find(|v| !v.is_finite()) {
                return Err(Error::input(format!("image `{}` has non-finite value {v}", r.image_id)));
            }
            if !ids.insert(r.image_id.as_str()) {
                return Err(Error::input(format!("duplicate image_id `{}`", r.image_id)));
            }
        }
        Ok(Self { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct groups in order of first appearance.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.group) {
                out.push(r.group.clone());
            }
        }
        out
    }

    /// Reads a `.jsonl`/`.json` file as JSON Lines, anything else as CSV.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let jsonl = matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("jsonl" | "json" | "ndjson")
        );
        if jsonl {
            Self::from_jsonl(BufReader::new(file), path)
        } else {
            Self::from_csv(file, path)
        }
    }

    /// CSV with header `image_id,identity,group,e0,...,e{d-1}`.
    pub fn from_csv<R: Read>(reader: R, path: &Path) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = csv
            .headers()
            .map_err(|e| parse_error(path, 1, e.to_string()))?
            .clone();
        let column = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let (id_col, identity_col, group_col) = (column("image_id")?, column("identity")?, column("group")?);
        let emb_cols = embedding_columns(header.iter())?;
        let mut records = Vec::new();
        for (i, row) in csv.records().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| parse_error(path, line, e.to_string()))?;
            let field = |col: usize| row.get(col).unwrap_or_default();
            let vector = emb_cols
                .iter()
                .map(|&c| {
                    field(c)
                        .parse::<f64>()
                        .map_err(|_| parse_error(path, line, format!("bad number `{}` in column `{}`", field(c), &header[c])))
                })
                .collect::<Result<Vec<_>>>()?;
            records.push(EmbeddingRecord {
                image_id: field(id_col).to_string(),
                identity: field(identity_col).to_string(),
                group: field(group_col).to_string(),
                vector,
            });
        }
        Self::new(records)
    }

    /// One JSON object per line with keys `image_id`, `identity`, `group`,
    /// `e0`, ..., `e{d-1}`.
    pub fn from_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut emb_keys: Option<Vec<String>> = None;
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let obj: serde_json::Map<String, serde_json::Value> =
                serde_json::from_str(&line).map_err(|e| parse_error(path, line_no, e.to_string()))?;
            let text = |key: &str| -> Result<String> {
                match obj.get(key) {
                    Some(serde_json::Value::String(s)) => Ok(s.clone()),
                    Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
                    Some(other) => Err(parse_error(path, line_no, format!("`{key}` must be a string, got {other}"))),
                    None => Err(Error::MissingColumn(key.to_string())),
                }
            };
            let keys = match &emb_keys {
                Some(k) => k.clone(),
                None => {
                    let cols = embedding_columns(obj.keys().map(String::as_str))?;
                    let keys: Vec<String> = (0..cols.len()).map(|j| format!("e{j}")).collect();
                    emb_keys = Some(keys.clone());
                    keys
                }
            };
            let vector = keys
                .iter()
                .map(|k| {
                    obj.get(k)
                        .ok_or_else(|| Error::MissingColumn(k.clone()))?
                        .as_f64()
                        .ok_or_else(|| parse_error(path, line_no, format!("`{k}` is not a number")))
                })
                .collect::<Result<Vec<_>>>()?;
            records.push(EmbeddingRecord {
                image_id: text("image_id")?,
                identity: text("identity")?,
                group: text("group")?,
                vector,
            });
        }
        Self::new(records)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        let mut header = vec!["image_id".to_string(), "identity".to_string(), "group".to_string()];
        header.extend((0..self.dim).map(|j| format!("e{j}")));
        let to_err = |e: csv::Error| Error::input(e.to_string());
        csv.write_record(&header).map_err(to_err)?;
        for r in &self.records {
            let mut row = vec![r.image_id.clone(), r.identity.clone(), r.group.clone()];
            row.extend(r.vector.iter().map(|v| v.to_string()));
            csv.write_record(&row).map_err(to_err)?;
        }
        csv.flush().map_err(|e| Error::input(e.to_string()))
    }
}

fn parse_error(path: &Path, line: usize, reason: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    }
}

/// Indices of `e0..e{d-1}` in `names`; requires a contiguous run starting at `e0`.
fn embedding_columns<'a>(names: impl Iterator<Item = &'a str>) -> Result<Vec<usize>> {
    let names: Vec<&str> = names.collect();
    let mut cols = Vec::new();
    for j in 0.. {
        let key = format!("e{j}");
        match names.iter().position(|n| *n == key) {
            Some(c) => cols.push(c),
            None if j == 0 => return Err(Error::MissingColumn(key)),
            None => break,
        }
    }
    Ok(cols)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub image_id: String,
    pub group: String,
    /// `None` when the probe has no same-identity image.
    pub rank: Option<usize>,
}

impl ProbeResult {
    pub fn excluded(&self) -> bool {
        self.rank.is_none()
    }

    /// 1 if misidentified, 0 if correct, `None` if excluded.
    pub fn error(&self) -> Option<u8> {
        self.rank.map(|r| u8::from(r > 0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStats {
    pub group: String,
    /// Non-excluded probes.
    pub n: usize,
    pub mean_rank: f64,
    pub accuracy: f64,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentificationReport {
    pub per_image: Vec<ProbeResult>,
    /// Groups with at least one non-excluded probe, in order of first appearance.
    pub per_group: Vec<GroupStats>,
}

impl IdentificationReport {
    pub fn group(&self, name: &str) -> Option<&GroupStats> {
        self.per_group.iter().find(|g| g.group == name)
    }

    pub fn group_names(&self) -> Vec<String> {
        self.per_group.iter().map(|g| g.group.clone()).collect()
    }

    /// Error rate over all non-excluded probes.
    pub fn error_rate(&self) -> Option<f64> {
        let errors: Vec<u8> = self.per_image.iter().filter_map(ProbeResult::error).collect();
        if errors.is_empty() {
            None
        } else {
            Some(errors.iter().map(|&e| f64::from(e)).sum::<f64>() / errors.len() as f64)
        }
    }

    pub fn excluded_count(&self) -> usize {
        self.per_image.iter().filter(|p| p.excluded()).count()
    }
}

/// Ranks every probe against all other images in the set.
pub fn compute_ranks(set: &EmbeddingSet) -> Result<IdentificationReport> {
    if set.is_empty() {
        return Err(Error::input("embedding set is empty"));
    }
    let records = set.records();
    let n = records.len();
    let mut dist = vec![0.0; n];
    let mut per_image = Vec::with_capacity(n);
    for (i, probe) in records.iter().enumerate() {
        let mut mate = f64::INFINITY;
        let mut has_mate = false;
        for (j, other) in records.iter().enumerate() {
            if i == j {
                continue;
            }
            dist[j] = euclidean(&probe.vector, &other.vector);
            if other.identity == probe.identity {
                has_mate = true;
                mate = mate.min(dist[j]);
            }
        }
        let rank = has_mate.then(|| {
            records
                .iter()
                .enumerate()
                .filter(|&(j, other)| j != i && other.identity != probe.identity && dist[j] < mate)
                .count()
        });
        per_image.push(ProbeResult {
            image_id: probe.image_id.clone(),
            group: probe.group.clone(),
            rank,
        });
    }

    let mut sums: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for p in &per_image {
        if let Some(rank) = p.rank {
            let e = sums.entry(p.group.as_str()).or_default();
            e.0 += 1;
            e.1 += rank;
            e.2 += usize::from(rank > 0);
        }
    }
    let per_group = set
        .groups()
        .into_iter()
        .filter_map(|g| {
            let &(n, rank_sum, errors) = sums.get(g.as_str())?;
            let error_rate = errors as f64 / n as f64;
            Some(GroupStats {
                n,
                mean_rank: rank_sum as f64 / n as f64,
                accuracy: 1.0 - error_rate,
                error_rate,
                group: g,
            })
        })
        .collect();
    Ok(IdentificationReport { per_image, per_group })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessMetric {
    Disparity,
    RankDisparity,
    Ratio,
    RankRatio,
    ErrorRatio,
}

impl FairnessMetric {
    pub const ALL: [FairnessMetric; 5] = [
        FairnessMetric::RankDisparity,
        FairnessMetric::Disparity,
        FairnessMetric::Ratio,
        FairnessMetric::RankRatio,
        FairnessMetric::ErrorRatio,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FairnessMetric::Disparity => "disparity",
            FairnessMetric::RankDisparity => "rank_disparity",
            FairnessMetric::Ratio => "ratio",
            FairnessMetric::RankRatio => "rank_ratio",
            FairnessMetric::ErrorRatio => "error_ratio",
        }
    }

    /// Applies the metric to two groups; `a` is the numerator group of the ratio forms.
    pub fn between(self, a: &GroupStats, b: &GroupStats) -> MetricValue {
        match self {
            FairnessMetric::Disparity => MetricValue::Defined((a.accuracy - b.accuracy).abs()),
            FairnessMetric::RankDisparity => MetricValue::Defined((a.mean_rank - b.mean_rank).abs()),
            FairnessMetric::Ratio => one_minus_ratio(a.accuracy, b.accuracy),
            FairnessMetric::RankRatio => one_minus_ratio(a.mean_rank, b.mean_rank),
            FairnessMetric::ErrorRatio => one_minus_ratio(a.error_rate, b.error_rate),
        }
    }
}

fn one_minus_ratio(num: f64, den: f64) -> MetricValue {
    if den == 0.0 {
        MetricValue::Undefined
    } else {
        MetricValue::Defined((1.0 - num / den).abs())
    }
}

impl fmt::Display for FairnessMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FairnessMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FairnessMetric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownObjective(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum GroupsCompared {
    Pair(String, String),
    MaxPairwise(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FairnessValue {
    pub metric: FairnessMetric,
    pub value: MetricValue,
    pub groups: GroupsCompared,
}

pub fn fairness_metric(
    report: &IdentificationReport,
    metric: FairnessMetric,
    group_a: &str,
    group_b: &str,
) -> Result<FairnessValue> {
    let a = report.group(group_a).ok_or_else(|| Error::MissingGroup(group_a.to_string()))?;
    let b = report.group(group_b).ok_or_else(|| Error::MissingGroup(group_b.to_string()))?;
    Ok(FairnessValue {
        metric,
        value: metric.between(a, b),
        groups: GroupsCompared::Pair(group_a.to_string(), group_b.to_string()),
    })
}

/// Maximum of the pairwise metric over all unordered pairs of `groups`
/// (earlier group as numerator). Undefined pairs are skipped.
pub fn multi_group_metric(
    report: &IdentificationReport,
    metric: FairnessMetric,
    groups: &[String],
) -> Result<FairnessValue> {
    if groups.len() < 2 {
        return Err(Error::input(format!(
            "at least two groups are required, got {}",
            groups.len()
        )));
    }
    let stats = groups
        .iter()
        .map(|g| report.group(g).ok_or_else(|| Error::MissingGroup(g.clone())))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<f64> = None;
    for i in 0..stats.len() {
        for j in i + 1..stats.len() {
            if let MetricValue::Defined(v) = metric.between(stats[i], stats[j]) {
                best = Some(best.map_or(v, |b| b.max(v)));
            }
        }
    }
    Ok(FairnessValue {
        metric,
        value: best.map_or(MetricValue::Undefined, MetricValue::Defined),
        groups: GroupsCompared::MaxPairwise(groups.to_vec()),
    })
}

/// Pearson product-moment correlation. Undefined when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<MetricValue> {
    if xs.len() != ys.len() {
        return Err(Error::input(format!(
            "pearson: length mismatch {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::input("pearson: need at least two points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(MetricValue::Undefined);
    }
    Ok(MetricValue::Defined((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}
