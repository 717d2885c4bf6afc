#![allow(dead_code)]

pub mod gradients;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sar_core::graph::{EdgeType, GatConfig, GraphEncoder, GraphMode, HeteroGraph, Node, NodeSource, NodeType};
use sar_core::tensor::Tensor;

pub const EDGE_TYPES: [EdgeType; 5] = [
    EdgeType::QueryArticle,
    EdgeType::SectionArticle,
    EdgeType::ChapterSection,
    EdgeType::TitleChapter,
    EdgeType::BookTitle,
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, edge_prob: f64) -> HeteroGraph {
    let nodes = (0..n)
        .map(|i| Node {
            id: format!("n{i}"),
            kind: NodeType::Article,
            source: NodeSource::Free,
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < edge_prob {
                edges.push((i, j, EDGE_TYPES[rng.random_range(0..EDGE_TYPES.len())]));
            }
        }
    }
    HeteroGraph::new(GraphMode::Both, nodes, edges).unwrap()
}

pub fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::uniform(n, d, 1.0, rng)
}

/// Graph encoder with every weight drawn at full scale.
pub fn random_gat(layers: usize, heads: usize, dim: usize, seed: u64) -> GraphEncoder {
    let config = GatConfig {
        layers,
        heads,
        dim,
        init_scale: 1.0,
        ..GatConfig::default()
    };
    let mut g = GraphEncoder::new(config, seed).unwrap();
    let mut r = rng(seed ^ 99);
    let names: Vec<String> = g.params.names().map(String::from).collect();
    for name in names {
        let t = g.params.get_mut(&name).unwrap();
        for v in t.data_mut() {
            *v = r.random_range(-0.8..0.8);
        }
    }
    g
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

fn at(t: &Tensor, r: usize, c: usize) -> f64 {
    t.data()[r * t.cols() + c]
}

pub type Attention = BTreeMap<(usize, usize, usize), f64>;

/// Straight-line evaluation of one attention layer from the defining
/// formulas. Returns updated features and attention keyed by
/// `(center, other, head)`.
pub fn oracle_layer(
    gat: &GraphEncoder,
    layer: usize,
    graph: &HeteroGraph,
    x: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Attention) {
    let cfg = &gat.config;
    let d = cfg.dim;
    let hd = d / cfg.heads;
    let p = |n: &str| gat.params.get(&format!("gat.l{layer}.{n}")).unwrap();
    let (ws, wt, we, a) = (p("ws"), p("wt"), p("we"), p("a"));
    let emb = gat.params.get("gat.edge_emb").unwrap();
    let proj = |w: &Tensor, v: &[f64], k: usize| -> Vec<f64> {
        (0..hd)
            .map(|c| (0..d).map(|r| v[r] * at(w, r, k * hd + c)).sum())
            .collect()
    };
    let mut out = Vec::new();
    let mut alphas = BTreeMap::new();
    for i in 0..graph.len() {
        let mut support = vec![(i, EdgeType::SelfLoop)];
        support.extend(graph.neighbors(i).iter().copied());
        let mut row = Vec::new();
        for k in 0..cfg.heads {
            let si = proj(ws, &x[i], k);
            let mut logits = Vec::new();
            for &(j, t) in &support {
                let tj = proj(wt, &x[j], k);
                let e: Vec<f64> = (0..d).map(|c| at(emb, t.index(), c)).collect();
                let ee = proj(we, &e, k);
                let z: Vec<f64> = si.iter().chain(&tj).chain(&ee).map(|&v| leaky(v, cfg.attention_slope)).collect();
                logits.push(z.iter().enumerate().map(|(m, v)| v * at(a, m, k)).sum::<f64>());
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut agg = vec![0.0; hd];
            for (s, &(j, _)) in support.iter().enumerate() {
                let alpha = exps[s] / total;
                alphas.insert((i, j, k), alpha);
                let v = if j == i { si.clone() } else { proj(wt, &x[j], k) };
                for c in 0..hd {
                    agg[c] += alpha * v[c];
                }
            }
            row.extend(agg.iter().map(|&v| leaky(v, cfg.activation_slope)));
        }
        if cfg.residual {
            for c in 0..d {
                row[c] += x[i][c];
            }
        }
        out.push(row);
    }
    (out, alphas)
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Corpus whose article `i` has id `d{i:03}` and the given words as text.
pub fn word_corpus(docs: &[Vec<String>]) -> sar_core::corpus::Corpus {
    let records = docs
        .iter()
        .enumerate()
        .map(|(i, words)| sar_core::corpus::ArticleRecord {
            id: format!("d{i:03}"),
            text: words.join(" "),
            book: None,
            title: None,
            chapter: None,
            section: None,
        })
        .collect();
    sar_core::corpus::build_corpus(records, vec![]).unwrap().0
}

/// BM25 straight from the formula over raw words: every document sharing
/// a word with the query, best first, ties by document position.
pub fn bm25_oracle(docs: &[Vec<String>], query: &[String], k1: f64, b: f64) -> Vec<(usize, f64)> {
    let n = docs.len() as f64;
    let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let df: Vec<f64> = query
        .iter()
        .map(|w| docs.iter().filter(|x| x.contains(w)).count() as f64)
        .collect();
    let mut out = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        let mut score = 0.0;
        let mut matched = false;
        for (w, &df) in query.iter().zip(&df) {
            let tf = doc.iter().filter(|x| *x == w).count() as f64;
            if tf == 0.0 {
                continue;
            }
            matched = true;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc.len() as f64 / avg));
        }
        if matched {
            out.push((d, score));
        }
    }
    out.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    out
}

/// Top-k of the dot products by exhaustive sort, ties by position.
pub fn dense_oracle(vectors: &[Vec<f64>], query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v.iter().zip(query).map(|(a, b)| a * b).sum()))
        .collect();
    scored.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    scored.truncate(k);
    scored
}

/// Metrics by set counting over prefixes: (recall@k, AP, R-precision).
pub fn metric_oracle(ranked: &[usize], relevant: &[usize], k: usize) -> (f64, f64, f64) {
    use std::collections::BTreeSet;
    let rel: BTreeSet<usize> = relevant.iter().copied().collect();
    let found = |cut: usize| -> f64 {
        let top: BTreeSet<usize> = ranked.iter().take(cut).copied().collect();
        top.intersection(&rel).count() as f64
    };
    let r = rel.len() as f64;
    let mut ap = 0.0;
    for (i, d) in ranked.iter().enumerate() {
        if rel.contains(d) {
            ap += found(i + 1) / (i + 1) as f64;
        }
    }
    (found(k) / r, ap / r, found(rel.len()) / r)
}

/// Seed-7 synthetic benchmark, its BM25 index and a small stage-1 encoder.
pub struct Trained {
    pub dataset: sar_core::corpus::Dataset,
    pub bm25: sar_core::sparse::InvertedIndex,
    pub encoder: sar_core::encoder::BiEncoder,
    pub stage1: sar_core::encoder::Stage1Output,
}

pub fn small_encoder() -> sar_core::encoder::EncoderConfig {
    sar_core::encoder::EncoderConfig {
        dim: 16,
        layers: 1,
        heads: 2,
        ff_dim: 64,
        ..Default::default()
    }
}

pub fn trained_small(epochs: usize) -> Trained {
    use sar_core::encoder::{stage1_train, Stage1Config};
    use sar_core::sparse::{Bm25Params, InvertedIndex};
    let (dataset, _) = sar_core::corpus::generate_synthetic(&Default::default(), 7).unwrap();
    let bm25 = InvertedIndex::build(&dataset.corpus, Bm25Params::default()).unwrap();
    let config = Stage1Config {
        epochs,
        ..Default::default()
    };
    let stage1 = stage1_train(&small_encoder(), &config, &dataset, &bm25, 7, sar_core::par::Exec::Parallel).unwrap();
    Trained {
        encoder: stage1.encoder.clone(),
        dataset,
        bm25,
        stage1,
    }
}
