use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// One (query, positive) term of the loss. Indices are rows of the query
/// and article matrices handed to [`contrastive_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastivePair {
    pub query: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// A training query as drawn for one batch: its sampled positives, its
/// mined negatives, and its full relevant set (corpus indices).
#[derive(Clone, Debug)]
pub struct BatchQuery {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub relevant: Vec<usize>,
}

/// Batch laid out for encoding: the distinct articles to encode, the loss
/// pairs over rows of that list, and per query the full candidate list.
#[derive(Clone, Debug)]
pub struct AssembledBatch {
    pub articles: Vec<usize>,
    pub pairs: Vec<ContrastivePair>,
    pub candidates: Vec<Vec<usize>>,
}

/// Builds the per-pair candidate sets. Negatives of query `i` are its own
/// mined negatives plus the positives (and, when `share_negatives`, the
/// mined negatives) of the other queries, minus anything relevant to `i`.
/// Other positives of the same query never enter a pair's denominator.
pub fn assemble_batch(queries: &[BatchQuery], share_negatives: bool) -> Result<AssembledBatch> {
    let mut articles = Vec::new();
    let mut row_of = std::collections::HashMap::new();
    let mut row = |a: usize, articles: &mut Vec<usize>| -> usize {
        *row_of.entry(a).or_insert_with(|| {
            articles.push(a);
            articles.len() - 1
        })
    };
    let mut pairs = Vec::new();
    let mut candidates = Vec::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        let relevant: HashSet<usize> = q.relevant.iter().chain(&q.positives).copied().collect();
        let mut seen = HashSet::new();
        let mut negatives = Vec::new();
        let mut push = |a: usize, negatives: &mut Vec<usize>| {
            if !relevant.contains(&a) && seen.insert(a) {
                negatives.push(a);
            }
        };
        for &a in &q.negatives {
            push(a, &mut negatives);
        }
        for (j, other) in queries.iter().enumerate() {
            if j == i {
                continue;
            }
            for &a in &other.positives {
                push(a, &mut negatives);
            }
            if share_negatives {
                for &a in &other.negatives {
                    push(a, &mut negatives);
                }
            }
        }
        if negatives.is_empty() {
            return Err(Error::InvalidData(format!("batch query {i} has an empty negative set")));
        }
        let neg_rows: Vec<usize> = negatives.iter().map(|&a| row(a, &mut articles)).collect();
        let mut cand = Vec::with_capacity(q.positives.len() + neg_rows.len());
        for &p in &q.positives {
            let pr = row(p, &mut articles);
            cand.push(pr);
            pairs.push(ContrastivePair {
                query: i,
                positive: pr,
                negatives: neg_rows.clone(),
            });
        }
        cand.extend(&neg_rows);
        candidates.push(cand);
    }
    Ok(AssembledBatch {
        articles,
        pairs,
        candidates,
    })
}

/// Mean over pairs of `-log softmax` of the positive among `{p} ∪ negatives`,
/// with scores `q·a / temperature`.
pub fn contrastive_loss(
    tape: &mut Tape,
    queries: Var,
    articles: Var,
    pairs: &[ContrastivePair],
    temperature: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::InvalidData("contrastive loss over an empty batch".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let scores = tape.matmul_nt(queries, articles)?;
    let scores = if temperature == 1.0 {
        scores
    } else {
        tape.scale(scores, 1.0 / temperature)
    };
    let mut coords = Vec::new();
    let mut segments = Vec::new();
    let mut positives = Vec::with_capacity(pairs.len());
    for (t, pair) in pairs.iter().enumerate() {
        if pair.negatives.is_empty() {
            return Err(Error::InvalidData(format!("pair {t} has an empty negative set")));
        }
        positives.push((pair.query, pair.positive));
        coords.push((pair.query, pair.positive));
        segments.push(t);
        for &n in &pair.negatives {
            coords.push((pair.query, n));
            segments.push(t);
        }
    }
    let all = tape.gather_elements(scores, coords)?;
    let lse = tape.segment_log_sum_exp(all, segments, pairs.len())?;
    let pos = tape.gather_elements(scores, positives)?;
    let terms = tape.sub(lse, pos)?;
    Ok(tape.mean(terms))
}
