//! Objective values shared by metrics, records and Pareto analysis.
//!
//! All objectives are costs: smaller is better.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// A metric value that may be undefined (zero denominator in a ratio metric).
///
/// Serialized as a JSON number, or as the string `"undefined"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricValue {
    Defined(f64),
    Undefined,
}

impl MetricValue {
    pub fn value(self) -> Option<f64> {
        match self {
            MetricValue::Defined(v) => Some(v),
            MetricValue::Undefined => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, MetricValue::Defined(_))
    }
}

impl From<f64> for MetricValue {
    fn from(v: f64) -> Self {
        MetricValue::Defined(v)
    }
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricValue::Defined(v) => write!(f, "{v}"),
            MetricValue::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            MetricValue::Defined(v) => serializer.serialize_f64(*v),
            MetricValue::Undefined => serializer.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct MetricVisitor;

        impl Visitor<'_> for MetricVisitor {
            type Value = MetricValue;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or the string \"undefined\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<MetricValue, E> {
                Ok(MetricValue::Defined(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<MetricValue, E> {
                Ok(MetricValue::Defined(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<MetricValue, E> {
                Ok(MetricValue::Defined(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<MetricValue, E> {
                if v == "undefined" {
                    Ok(MetricValue::Undefined)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }

        deserializer.deserialize_any(MetricVisitor)
    }
}

/// Raw objective values as reported by a backend; entries may be undefined.
pub type Objectives = BTreeMap<String, MetricValue>;

/// Named, finite cost values. Undefined values never enter an `ObjectiveVector`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectiveVector(BTreeMap<String, f64>);

impl ObjectiveVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I, S>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut out = BTreeMap::new();
        for (name, v) in pairs {
            let name = name.into();
            if !v.is_finite() {
                return Err(Error::input(format!("objective `{name}` is not finite: {v}")));
            }
            out.insert(name, v);
        }
        Ok(Self(out))
    }

    /// Keeps only the named objectives. Returns `None` if any of them is
    /// missing, undefined or non-finite.
    pub fn select(raw: &Objectives, names: &[String]) -> Option<Self> {
        let mut out = BTreeMap::new();
        for name in names {
            match raw.get(name)? {
                MetricValue::Defined(v) if v.is_finite() => {
                    out.insert(name.clone(), *v);
                }
                _ => return None,
            }
        }
        Some(Self(out))
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn names(&self) -> Vec<String> {
        self.0.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Values in the order of `names`.
    pub fn values_in(&self, names: &[String]) -> Result<Vec<f64>> {
        names
            .iter()
            .map(|n| self.get(n).ok_or_else(|| Error::UnknownObjective(n.clone())))
            .collect()
    }

    pub fn to_objectives(&self) -> Objectives {
        self.0
            .iter()
            .map(|(k, v)| (k.clone(), MetricValue::Defined(*v)))
            .collect()
    }

    pub(crate) fn insert(&mut self, name: impl Into<String>, v: f64) {
        self.0.insert(name.into(), v);
    }

    pub(crate) fn check_same_names(&self, other: &Self) -> Result<()> {
        if self.0.len() == other.0.len() && self.0.keys().eq(other.0.keys()) {
            Ok(())
        } else {
            Err(Error::ObjectiveMismatch {
                left: self.names(),
                right: other.names(),
            })
        }
    }
}
