//! Ranking metrics (recall@k, average precision, R-precision), the
//! evaluation loop over named retriever configurations, and report tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Query, SplitName};
use crate::encoder::DenseRetriever;
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::sparse::InvertedIndex;

/// Names of every runnable retriever configuration.
pub const CONFIGURATIONS: &[&str] = &[
    "bm25",
    "be-flat",
    "be",
    "be+ge-stat",
    "qabisar",
    "no-kd",
    "bipartite-only",
    "statute-only",
    "no-graph",
    "feature-kd",
    "both-kd",
    "sequential",
];

pub fn check_configuration(name: &str) -> Result<()> {
    if CONFIGURATIONS.contains(&name) {
        Ok(())
    } else {
        Err(Error::UnknownConfig {
            name: name.to_string(),
            valid: CONFIGURATIONS.iter().map(|s| s.to_string()).collect(),
        })
    }
}

/// Fraction of `relevant` found in the first `k` entries of `ranked`.
pub fn recall_at_k<T: PartialEq>(ranked: &[T], relevant: &[T], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|d| relevant.contains(d)).count();
    hits as f64 / relevant.len() as f64
}

/// Mean of precision at the rank of each relevant item; items missing from
/// the ranking contribute zero.
pub fn average_precision<T: PartialEq>(ranked: &[T], relevant: &[T]) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, d) in ranked.iter().enumerate() {
        if relevant.contains(d) {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    total / relevant.len() as f64
}

/// Recall at cutoff `|relevant|`.
pub fn r_precision<T: PartialEq>(ranked: &[T], relevant: &[T]) -> f64 {
    recall_at_k(ranked, relevant, relevant.len())
}

/// Anything that can order the whole corpus for a query.
pub trait Retriever: Sync {
    /// Corpus positions, best first. Retrievers own their tie-breaking.
    fn rank(&self, query: &Query) -> Result<Vec<usize>>;
}

impl Retriever for InvertedIndex {
    fn rank(&self, query: &Query) -> Result<Vec<usize>> {
        let hits = self.search_all(&query.tokens);
        let mut seen = vec![false; self.num_docs()];
        let mut order: Vec<usize> = hits.iter().map(|h| h.0).collect();
        for &d in &order {
            seen[d] = true;
        }
        order.extend((0..self.num_docs()).filter(|&d| !seen[d]));
        Ok(order)
    }
}

impl Retriever for DenseRetriever {
    fn rank(&self, query: &Query) -> Result<Vec<usize>> {
        let hits = DenseRetriever::rank(self, &query.tokens, self.index.len())?;
        Ok(hits.into_iter().map(|h| h.0).collect())
    }
}

/// Ordered article ids for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub articles: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub recall: Vec<f64>,
    pub average_precision: f64,
    pub r_precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: String,
    pub split: String,
    pub split_digest: String,
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub map: f64,
    pub mrp: f64,
    pub per_query: Vec<QueryMetrics>,
}

/// One line of the machine-readable report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub config: String,
    pub split: String,
    pub metric: String,
    pub k: Option<usize>,
    pub value: f64,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    pub fn has_nan(&self) -> bool {
        self.recall.iter().chain([&self.map, &self.mrp]).any(|v| v.is_nan())
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        let rec = |metric: &str, k, value| MetricRecord {
            config: self.config.clone(),
            split: self.split.clone(),
            metric: metric.to_string(),
            k,
            value,
        };
        let mut out: Vec<MetricRecord> = self.ks.iter().zip(&self.recall).map(|(&k, &v)| rec("recall", Some(k), v)).collect();
        out.push(rec("map", None, self.map));
        out.push(rec("mrp", None, self.mrp));
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in self.records() {
            s.push_str(&serde_json::to_string(&r).expect("metric records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        compare_reports(std::slice::from_ref(self))
            .expect("a single report is always comparable")
            .to_text()
    }
}

/// Full rankings for the given queries, one per query.
pub fn rank_queries(retriever: &dyn Retriever, dataset: &Dataset, queries: &[usize], exec: Exec) -> Result<Vec<Vec<usize>>> {
    exec.map(queries, |&q| retriever.rank(&dataset.queries[q])).into_iter().collect()
}

/// Per-query metrics over full rankings, averaged in split order.
pub fn evaluate(
    config: &str,
    retriever: &dyn Retriever,
    dataset: &Dataset,
    split: SplitName,
    ks: &[usize],
    exec: Exec,
) -> Result<EvalReport> {
    check_configuration(config)?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("k list must be non-empty with k >= 1".into()));
    }
    let queries = dataset.split_queries(split);
    if queries.is_empty() {
        return Err(Error::InvalidData(format!("split `{split}` has no queries")));
    }
    let rankings = rank_queries(retriever, dataset, queries, exec)?;
    Ok(report_from_rankings(config, dataset, split, ks, queries, &rankings))
}

pub fn report_from_rankings(
    config: &str,
    dataset: &Dataset,
    split: SplitName,
    ks: &[usize],
    queries: &[usize],
    rankings: &[Vec<usize>],
) -> EvalReport {
    let per_query: Vec<QueryMetrics> = queries
        .iter()
        .zip(rankings)
        .map(|(&q, ranked)| {
            let rel = &dataset.queries[q].relevant;
            QueryMetrics {
                query_id: dataset.queries[q].id.clone(),
                recall: ks.iter().map(|&k| recall_at_k(ranked, rel, k)).collect(),
                average_precision: average_precision(ranked, rel),
                r_precision: r_precision(ranked, rel),
            }
        })
        .collect();
    let n = per_query.len() as f64;
    let recall = (0..ks.len()).map(|i| per_query.iter().map(|m| m.recall[i]).sum::<f64>() / n).collect();
    EvalReport {
        config: config.to_string(),
        split: split.to_string(),
        split_digest: dataset.split_digest(split),
        ks: ks.to_vec(),
        recall,
        map: per_query.iter().map(|m| m.average_precision).sum::<f64>() / n,
        mrp: per_query.iter().map(|m| m.r_precision).sum::<f64>() / n,
        per_query,
    }
}

/// Aligned comparison of several reports; the best value in every column is
/// flagged (all tied entries are flagged).
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
    pub best: Vec<Vec<bool>>,
}

pub fn compare_reports(reports: &[EvalReport]) -> Result<Comparison> {
    let first = reports.first().ok_or_else(|| Error::InvalidData("no reports to compare".into()))?;
    for r in reports {
        if r.split != first.split || r.split_digest != first.split_digest {
            return Err(Error::InvalidData(format!(
                "report `{}` covers split {} ({}) but `{}` covers {} ({})",
                r.config, r.split, r.split_digest, first.config, first.split, first.split_digest
            )));
        }
        if r.ks != first.ks {
            return Err(Error::InvalidData(format!("report `{}` uses a different k list", r.config)));
        }
    }
    let mut columns: Vec<String> = first.ks.iter().map(|k| format!("R@{k}")).collect();
    columns.push("MAP".into());
    columns.push("MRP".into());
    let rows: Vec<(String, Vec<f64>)> = reports
        .iter()
        .map(|r| {
            let mut v = r.recall.clone();
            v.push(r.map);
            v.push(r.mrp);
            (r.config.clone(), v)
        })
        .collect();
    let best_of: Vec<f64> = (0..columns.len())
        .map(|c| rows.iter().map(|r| r.1[c]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let best = rows
        .iter()
        .map(|r| r.1.iter().zip(&best_of).map(|(v, b)| v == b).collect())
        .collect();
    Ok(Comparison { columns, rows, best })
}

impl Comparison {
    /// Plain-text table; `*` marks the best value per column.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
        let mut s = format!("{:<width$}", "config");
        for c in &self.columns {
            write!(s, " {c:>9}").unwrap();
        }
        s.push('\n');
        for (row, marks) in self.rows.iter().zip(&self.best) {
            write!(s, "{:<width$}", row.0).unwrap();
            for (v, &m) in row.1.iter().zip(marks) {
                let cell = format!("{:.2}{}", v * 100.0, if m { "*" } else { " " });
                write!(s, " {cell:>9}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for (row, marks) in self.rows.iter().zip(&self.best) {
            for ((c, v), m) in self.columns.iter().zip(&row.1).zip(marks) {
                let line = serde_json::json!({ "config": row.0, "column": c, "value": v, "best": m });
                s.push_str(&line.to_string());
                s.push('\n');
            }
        }
        s
    }
}
