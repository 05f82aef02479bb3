use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub kind: String,
    pub seed: u64,
    pub condition: String,
    pub x: f64,
    pub metric: String,
    pub value: f64,
}

/// Long-format results: one row per `(kind, seed, condition, x, metric)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub schema_version: u32,
    /// Content hashes of the inputs (config, split, collective, learngene).
    pub provenance: BTreeMap<String, String>,
    pub rows: Vec<MetricRow>,
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.6}")
    }
}

impl MetricsTable {
    pub fn new() -> Self {
        MetricsTable {
            schema_version: METRICS_SCHEMA_VERSION,
            ..Default::default()
        }
    }

    pub fn push(
        &mut self,
        kind: &str,
        seed: u64,
        condition: &str,
        x: f64,
        metric: &str,
        value: f64,
    ) {
        self.rows.push(MetricRow {
            kind: kind.to_string(),
            seed,
            condition: condition.to_string(),
            x,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn extend(&mut self, other: MetricsTable) {
        for (k, v) in other.provenance {
            self.provenance.entry(k).or_insert(v);
        }
        self.rows.extend(other.rows);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn select<'a>(
        &'a self,
        kind: &'a str,
        condition: &'a str,
        metric: &'a str,
    ) -> impl Iterator<Item = &'a MetricRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.kind == kind && r.condition == condition && r.metric == metric)
    }

    /// Mean of `value` over all seeds at `x`.
    pub fn mean_at(&self, kind: &str, condition: &str, metric: &str, x: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .select(kind, condition, metric)
            .filter(|r| r.x == x)
            .map(|r| r.value)
            .collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    /// Data rows as CSV, rounded to six decimals.
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("kind,seed,condition,x,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.kind,
                r.seed,
                r.condition,
                fmt_num(r.x),
                r.metric,
                fmt_num(r.value)
            );
        }
        out
    }

    /// CSV with a commented header carrying the schema version and provenance.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# schema_version={}\n", self.schema_version);
        for (k, v) in &self.provenance {
            let _ = writeln!(out, "# {k}={v}");
        }
        out + &self.rows_csv()
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut table = MetricsTable::new();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.trim().split_once('=') {
                    if k == "schema_version" {
                        table.schema_version = v.parse().map_err(|_| {
                            Error::Data(format!("line {}: bad schema version {v:?}", i + 1))
                        })?;
                    } else {
                        table.provenance.insert(k.to_string(), v.to_string());
                    }
                }
                continue;
            }
            if !header_seen {
                if line != "kind,seed,condition,x,metric,value" {
                    return Err(Error::Data(format!(
                        "line {}: unexpected metrics header {line:?}",
                        i + 1
                    )));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Data(format!(
                    "line {}: expected 6 fields, found {}",
                    i + 1,
                    f.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Data(format!("line {}: bad number {s:?}", i + 1)))
            };
            table.rows.push(MetricRow {
                kind: f[0].to_string(),
                seed: f[1]
                    .parse()
                    .map_err(|_| Error::Data(format!("line {}: bad seed {:?}", i + 1, f[1])))?,
                condition: f[2].to_string(),
                x: num(f[3])?,
                metric: f[4].to_string(),
                value: num(f[5])?,
            });
        }
        if table.schema_version != METRICS_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "metrics schema {} unsupported (expected {})",
                table.schema_version, METRICS_SCHEMA_VERSION
            )));
        }
        Ok(table)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant or fewer than two pairs are given.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut t = MetricsTable::new();
        t.provenance.insert("config".into(), "abc".into());
        t.push(
            "scratch_compare",
            3,
            "individual",
            10.0,
            "query_accuracy",
            0.8125,
        );
        t.push(
            "scratch_compare",
            3,
            "scratch",
            10.0,
            "query_accuracy",
            1.0 / 3.0,
        );
        let csv = t.to_csv();
        assert!(csv.contains("scratch_compare,3,individual,10,query_accuracy,0.812500"));
        let back = MetricsTable::from_csv(&csv).unwrap();
        assert_eq!(back.provenance, t.provenance);
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows_csv(), t.rows_csv());
        assert!(
            MetricsTable::from_csv("# schema_version=9\nkind,seed,condition,x,metric,value\n")
                .is_err()
        );
        assert!(MetricsTable::from_csv("kind,seed,condition,x,metric,value\na,b\n").is_err());
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 45.0]),
            Some(1.0)
        );
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        // d = (0, 0, 1, -1, 0): 1 - 6·2 / (5·24) = 0.9
        let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((r - 0.9).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn mean_over_seeds() {
        let mut t = MetricsTable::new();
        t.push("k", 0, "c", 1.0, "m", 0.2);
        t.push("k", 1, "c", 1.0, "m", 0.4);
        t.push("k", 1, "c", 2.0, "m", 0.9);
        assert!((t.mean_at("k", "c", "m", 1.0).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(t.mean_at("k", "d", "m", 1.0), None);
    }
}
