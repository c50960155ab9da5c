use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::metrics::{avg_at_k, gain_consistency, gain_vector, union_gain, EvalMatrix};
use crate::error::{Error, Result};

/// Sample identifier as found in evaluation logs; integers order before
/// strings.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleId {
    Int(i64),
    Str(String),
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleId::Int(i) => write!(f, "{i}"),
            SampleId::Str(s) => f.write_str(s),
        }
    }
}

/// One line of an evaluation log: either raw rollout outcomes or an already
/// aggregated accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model_id: String,
    pub task: String,
    pub sample_id: SampleId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcomes: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
}

impl EvalRecord {
    /// Per-sample accuracy; `k` is the configured rollout count for the task.
    pub fn accuracy(&self, k: Option<usize>) -> Result<f64> {
        match (&self.outcomes, self.acc) {
            (Some(o), None) => avg_at_k(o, k.unwrap_or(o.len())),
            (None, Some(a)) if (0.0..=1.0).contains(&a) => Ok(a),
            (None, Some(a)) => Err(Error::param("acc", format!("{a} is outside [0, 1]"))),
            _ => Err(Error::Parse(format!(
                "sample {} of ({}, {}) needs exactly one of `outcomes` or `acc`",
                self.sample_id, self.model_id, self.task
            ))),
        }
    }
}

pub fn read_eval_logs(reader: impl BufRead) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Evaluation matrices keyed by `(model_id, task)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalSet {
    pub matrices: BTreeMap<(String, String), EvalMatrix>,
}

impl EvalSet {
    /// Aggregate records into per-(model, task) matrices with samples sorted by
    /// id. `k_per_task` pins the rollout count of a task; unlisted tasks take
    /// each record's outcome count.
    pub fn from_records(records: &[EvalRecord], k_per_task: &BTreeMap<String, usize>) -> Result<Self> {
        let mut grouped: BTreeMap<(String, String), BTreeMap<SampleId, f64>> = BTreeMap::new();
        for r in records {
            let acc = r.accuracy(k_per_task.get(&r.task).copied())?;
            let samples = grouped.entry((r.model_id.clone(), r.task.clone())).or_default();
            if samples.insert(r.sample_id.clone(), acc).is_some() {
                return Err(Error::Parse(format!(
                    "duplicate sample {} for ({}, {})",
                    r.sample_id, r.model_id, r.task
                )));
            }
        }
        let mut matrices = BTreeMap::new();
        for ((model, task), samples) in grouped {
            let (ids, acc): (Vec<SampleId>, Vec<f64>) = samples.into_iter().unzip();
            let m = EvalMatrix::new(model.clone(), task.clone(), ids, acc)?;
            matrices.insert((model, task), m);
        }
        Ok(Self { matrices })
    }

    pub fn get(&self, model: &str, task: &str) -> Result<&EvalMatrix> {
        self.matrices
            .get(&(model.to_string(), task.to_string()))
            .ok_or_else(|| Error::MissingCell(format!("no evaluation of `{model}` on task `{task}`")))
    }

    pub fn tasks_of(&self, model: &str) -> Vec<String> {
        self.matrices
            .keys()
            .filter(|(m, _)| m == model)
            .map(|(_, t)| t.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Gain consistency of each target model with the union of single-task gains,
/// for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub task: String,
    pub union_gain: Vec<f64>,
    pub consistency: Vec<Option<f64>>,
}

/// One row per task evaluated for the baseline, one consistency value per
/// target in `targets` order.
pub fn consistency_table(
    set: &EvalSet,
    baseline: &str,
    singles: &[String],
    targets: &[String],
) -> Result<Vec<ConsistencyRow>> {
    if singles.is_empty() {
        return Err(Error::EmptyInput("single-task models"));
    }
    let tasks = set.tasks_of(baseline);
    if tasks.is_empty() {
        return Err(Error::MissingCell(format!("no evaluations for baseline `{baseline}`")));
    }
    tasks
        .into_iter()
        .map(|task| {
            let base = set.get(baseline, &task)?;
            let single_gains = singles
                .iter()
                .map(|s| gain_vector(set.get(s, &task)?, base))
                .collect::<Result<Vec<_>>>()?;
            let union = union_gain(&single_gains)?;
            let consistency = targets
                .iter()
                .map(|t| gain_consistency(&union, &gain_vector(set.get(t, &task)?, base)?))
                .collect::<Result<Vec<_>>>()?;
            Ok(ConsistencyRow {
                task,
                union_gain: union.gains,
                consistency,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_ids_parse_and_order() {
        let a: SampleId = serde_json::from_str("3").unwrap();
        let b: SampleId = serde_json::from_str("\"x\"").unwrap();
        assert_eq!(a, SampleId::Int(3));
        assert!(a < b);
        assert!(SampleId::Int(2) < SampleId::Int(10));
    }

    #[test]
    fn records_aggregate_with_configured_k() {
        let text = r#"{"model_id":"m","task":"math","sample_id":1,"outcomes":[true,false,true,true]}
{"model_id":"m","task":"math","sample_id":0,"acc":0.5}
"#;
        let recs = read_eval_logs(text.as_bytes()).unwrap();
        let k = BTreeMap::from([("math".to_string(), 4)]);
        let set = EvalSet::from_records(&recs, &k).unwrap();
        let m = set.get("m", "math").unwrap();
        assert_eq!(m.acc, vec![0.5, 0.75]);
        let k3 = BTreeMap::from([("math".to_string(), 3)]);
        assert!(EvalSet::from_records(&recs, &k3).is_err());
    }

    #[test]
    fn malformed_records() {
        let both = r#"{"model_id":"m","task":"t","sample_id":1,"outcomes":[true],"acc":1.0}"#;
        let recs = read_eval_logs(both.as_bytes()).unwrap();
        assert!(EvalSet::from_records(&recs, &BTreeMap::new()).is_err());
        let dup = "{\"model_id\":\"m\",\"task\":\"t\",\"sample_id\":1,\"acc\":1.0}\n".repeat(2);
        let recs = read_eval_logs(dup.as_bytes()).unwrap();
        assert!(EvalSet::from_records(&recs, &BTreeMap::new()).is_err());
        assert!(read_eval_logs("{".as_bytes()).is_err());
    }

    #[test]
    fn table_layout() {
        let mut recs = Vec::new();
        for (model, accs) in [("sft", [0.0, 0.0]), ("s1", [1.0, 0.0]), ("s2", [0.0, 1.0]), ("t", [1.0, 1.0])] {
            for (i, a) in accs.iter().enumerate() {
                recs.push(EvalRecord {
                    model_id: model.into(),
                    task: "math".into(),
                    sample_id: SampleId::Int(i as i64),
                    outcomes: None,
                    acc: Some(*a),
                });
            }
        }
        let set = EvalSet::from_records(&recs, &BTreeMap::new()).unwrap();
        let rows = consistency_table(
            &set,
            "sft",
            &["s1".into(), "s2".into()],
            &["t".into(), "s1".into(), "sft".into()],
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].union_gain, vec![1.0, 1.0]);
        assert!((rows[0].consistency[0].unwrap() - 1.0).abs() < 1e-15);
        assert!((rows[0].consistency[1].unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rows[0].consistency[2], None);
        assert!(consistency_table(&set, "sft", &["zz".into()], &[]).is_err());
    }
}
