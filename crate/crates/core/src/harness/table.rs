use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricRecord;

/// One (configuration, seed) cell of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub strategy: String,
    pub gamma: f64,
    pub batch_size: usize,
    /// Free-form remaining coordinates, e.g. `mode=subgroup`.
    pub setting: String,
    pub seed: u64,
    pub values: Vec<(String, f64)>,
}

impl ResultRow {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    fn group_key(&self) -> (String, String, String, usize, String) {
        (
            self.experiment.clone(),
            self.strategy.clone(),
            fmt_num(self.gamma),
            self.batch_size,
            self.setting.clone(),
        )
    }

    pub fn run_id(&self) -> String {
        let mut id = format!(
            "{}/{}/g{}/n{}",
            self.experiment,
            self.strategy,
            fmt_num(self.gamma),
            self.batch_size
        );
        if !self.setting.is_empty() {
            id.push('/');
            id.push_str(&self.setting);
        }
        id
    }
}

/// Shortest text that parses back to the same float.
pub fn fmt_num(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn new(rows: Vec<ResultRow>) -> Self {
        Self { rows }
    }

    /// Value columns in order of first appearance.
    fn value_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = Vec::new();
        for r in &self.rows {
            for (k, _) in &r.values {
                if !cols.contains(k) {
                    cols.push(k.clone());
                }
            }
        }
        cols
    }

    pub fn to_csv(&self) -> String {
        let cols = self.value_columns();
        let mut out = String::from("experiment,strategy,gamma,batch_size,setting,seed");
        for c in &cols {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{}",
                r.experiment,
                r.strategy,
                fmt_num(r.gamma),
                r.batch_size,
                r.setting,
                r.seed
            )
            .unwrap();
            for c in &cols {
                match r.get(c) {
                    Some(v) => write!(out, ",{}", fmt_num(v)).unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parses what [`ResultTable::to_csv`] wrote; empty cells are absent
    /// values.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or(Error::Empty("result table header"))?
            .split(',')
            .collect();
        if header.len() < 6 || header[..6] != ["experiment", "strategy", "gamma", "batch_size", "setting", "seed"] {
            return Err(Error::format("<results>", "not a result table header"));
        }
        let bad = |ln: usize, e: &dyn std::fmt::Display| Error::format("<results>", format!("row {}: {e}", ln + 2));
        let mut rows = Vec::new();
        for (ln, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(bad(ln, &format!("{} fields, expected {}", f.len(), header.len())));
            }
            let mut values = Vec::new();
            for (k, v) in header[6..].iter().zip(&f[6..]) {
                if !v.is_empty() {
                    values.push((k.to_string(), v.parse::<f64>().map_err(|e| bad(ln, &e))?));
                }
            }
            rows.push(ResultRow {
                experiment: f[0].into(),
                strategy: f[1].into(),
                gamma: f[2].parse().map_err(|e| bad(ln, &e))?,
                batch_size: f[3].parse().map_err(|e| bad(ln, &e))?,
                setting: f[4].into(),
                seed: f[5].parse().map_err(|e| bad(ln, &e))?,
                values,
            });
        }
        Ok(Self { rows })
    }

    /// Seed-aggregated means and sample standard deviations, one row per
    /// configuration, in order of first appearance.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut order = Vec::new();
        let mut groups: BTreeMap<_, Vec<&ResultRow>> = BTreeMap::new();
        for r in &self.rows {
            let k = r.group_key();
            if !groups.contains_key(&k) {
                order.push(k.clone());
            }
            groups.entry(k).or_default().push(r);
        }
        let cols = self.value_columns();
        order
            .into_iter()
            .map(|k| {
                let rows = &groups[&k];
                let first = rows[0];
                let stats = cols
                    .iter()
                    .filter_map(|c| {
                        let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(c)).collect();
                        if vals.is_empty() {
                            return None;
                        }
                        let n = vals.len() as f64;
                        let mean = vals.iter().sum::<f64>() / n;
                        let var = if vals.len() > 1 {
                            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
                        } else {
                            0.0
                        };
                        Some((c.clone(), mean, var.sqrt()))
                    })
                    .collect();
                SummaryRow {
                    experiment: first.experiment.clone(),
                    strategy: first.strategy.clone(),
                    gamma: first.gamma,
                    batch_size: first.batch_size,
                    setting: first.setting.clone(),
                    seeds: rows.iter().map(|r| r.seed).collect(),
                    stats,
                }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let summary = self.summary();
        let cols = self.value_columns();
        let mut out = String::from("experiment,strategy,gamma,batch_size,setting,seeds");
        for c in &cols {
            write!(out, ",{c}_mean,{c}_std").unwrap();
        }
        out.push('\n');
        for s in &summary {
            let seeds: Vec<String> = s.seeds.iter().map(|v| v.to_string()).collect();
            write!(
                out,
                "{},{},{},{},{},{}",
                s.experiment,
                s.strategy,
                fmt_num(s.gamma),
                s.batch_size,
                s.setting,
                seeds.join(" ")
            )
            .unwrap();
            for c in &cols {
                match s.stat(c) {
                    Some((m, sd)) => write!(out, ",{},{}", fmt_num(m), fmt_num(sd)).unwrap(),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Metric records, one per row and value.
    pub fn records(&self, n: usize) -> Vec<MetricRecord> {
        self.rows
            .iter()
            .flat_map(|r| {
                r.values.iter().map(move |(k, v)| MetricRecord {
                    run_id: r.run_id(),
                    metric: k.clone(),
                    value: *v,
                    n,
                    seed: r.seed,
                })
            })
            .collect()
    }

    /// Seed-mean of `key` over rows passing `filter`.
    pub fn mean(&self, key: &str, filter: impl Fn(&ResultRow) -> bool) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| filter(r))
            .filter_map(|r| r.get(key))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub experiment: String,
    pub strategy: String,
    pub gamma: f64,
    pub batch_size: usize,
    pub setting: String,
    pub seeds: Vec<u64>,
    /// `(column, mean, std)`.
    pub stats: Vec<(String, f64, f64)>,
}

impl SummaryRow {
    pub fn stat(&self, key: &str) -> Option<(f64, f64)> {
        self.stats.iter().find(|(k, ..)| k == key).map(|(_, m, s)| (*m, *s))
    }
}
