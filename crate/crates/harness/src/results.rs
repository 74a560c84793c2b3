//! Result tables: flat `fingerprint,metric,value` rows with CSV
//! round-tripping and conflict-checked merging.

use std::path::Path;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub fingerprint: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn push(&mut self, fingerprint: &str, metric: &str, value: f64) {
        self.rows.push(ResultRow {
            fingerprint: fingerprint.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn get(&self, fingerprint: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.fingerprint == fingerprint && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fingerprint,metric,value\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.fingerprint, r.metric, format_value(r.value)));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<ResultTable> {
        let mut lines = text.lines();
        match lines.next() {
            Some("fingerprint,metric,value") => {}
            other => {
                return Err(HarnessError::InvalidArgument(format!(
                    "bad result header: {other:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ',');
            let (Some(fp), Some(metric), Some(value)) =
                (parts.next(), parts.next(), parts.next())
            else {
                return Err(HarnessError::InvalidArgument(format!(
                    "result row {} is malformed: {line}",
                    i + 2
                )));
            };
            let value: f64 = value.parse().map_err(|_| {
                HarnessError::InvalidArgument(format!("non-numeric value on row {}", i + 2))
            })?;
            rows.push(ResultRow {
                fingerprint: fp.to_string(),
                metric: metric.to_string(),
                value,
            });
        }
        Ok(ResultTable { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }

    pub fn load(path: &Path) -> Result<ResultTable> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    /// Append `other`, dropping exact duplicates and rejecting rows that
    /// disagree on the value for an existing (fingerprint, metric) key.
    pub fn merge(&mut self, other: &ResultTable) -> Result<()> {
        for r in &other.rows {
            match self.get(&r.fingerprint, &r.metric) {
                Some(v) if v == r.value => {}
                Some(v) => {
                    return Err(HarnessError::InvalidArgument(format!(
                        "conflicting values for {}/{}: {v} vs {}",
                        r.fingerprint, r.metric, r.value
                    )))
                }
                None => self.rows.push(r.clone()),
            }
        }
        Ok(())
    }
}

// Round-trips through parse exactly while staying readable for integers.
fn format_value(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v:.17}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_exact() {
        let mut t = ResultTable::default();
        t.push("abc123", "target_acc", 0.1 + 0.2);
        t.push("abc123", "source_acc", 1.0);
        t.push("def456", "target_acc", std::f64::consts::PI / 7.0);
        let back = ResultTable::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn merge_dedups_and_detects_conflicts() {
        let mut a = ResultTable::default();
        a.push("x", "m", 1.0);
        let mut b = ResultTable::default();
        b.push("x", "m", 1.0);
        b.push("y", "m", 2.0);
        a.merge(&b).unwrap();
        assert_eq!(a.rows.len(), 2);
        let mut c = ResultTable::default();
        c.push("x", "m", 3.0);
        assert!(a.merge(&c).is_err());
    }

    #[test]
    fn bad_header_rejected() {
        assert!(ResultTable::from_csv("fp,metric,value\nx,m,1\n").is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let mut t = ResultTable::default();
        t.push("run1", "target_acc", 0.875);
        t.save(&path).unwrap();
        assert_eq!(ResultTable::load(&path).unwrap(), t);
    }
}
