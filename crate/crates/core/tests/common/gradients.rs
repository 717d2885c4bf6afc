//! Finite-difference checks shared by the gradient tests and the
//! acceptance report.

use rand::Rng;
use sar_core::distill::{kd_feature_loss, kd_score_loss};
use sar_core::encoder::{contrastive_loss, BiEncoder, ContrastivePair, Dropout, EncoderConfig};
use sar_core::error::Result;
use sar_core::graph::GraphEncoder;
use sar_core::tensor::gradcheck::{gradcheck, GradCheck};
use sar_core::tensor::ParamStore;

use super::{random_features, random_gat, random_graph, rng};

pub const POINTS: usize = 40;

fn tiny(hierarchical: bool) -> EncoderConfig {
    EncoderConfig {
        dim: 8,
        layers: 2,
        heads: 2,
        ff_dim: 16,
        dropout: 0.0,
        chunk_len: 4,
        max_chunks: 3,
        max_query_len: 6,
        hierarchical,
    }
}

/// Both encoders end to end under the contrastive loss.
pub fn encoder_contrastive(hierarchical: bool) -> Result<GradCheck> {
    let enc = BiEncoder::new(tiny(hierarchical), 12, 3)?;
    let queries: Vec<Vec<u32>> = vec![vec![2, 3, 4], vec![5, 6]];
    let articles: Vec<Vec<u32>> = vec![(2..11).collect(), vec![4, 7, 8], vec![9, 10, 11, 2, 3]];
    let pairs = vec![
        ContrastivePair { query: 0, positive: 0, negatives: vec![1, 2] },
        ContrastivePair { query: 1, positive: 1, negatives: vec![0, 2] },
    ];
    let config = enc.config.clone();
    gradcheck(&enc.params, POINTS, 1e-5, 11, |tape, store: &ParamStore| {
        let e = BiEncoder::from_params(config.clone(), store.clone())?;
        let qr: Vec<&[u32]> = queries.iter().map(Vec::as_slice).collect();
        let ar: Vec<&[u32]> = articles.iter().map(Vec::as_slice).collect();
        let q = e.encode_queries(tape, &qr, &mut Dropout::eval())?;
        let a = e.encode_articles(tape, &ar, &mut Dropout::eval())?;
        contrastive_loss(tape, q, a.vectors, &pairs, 0.7)
    })
}

/// Two GAT layers, edge embeddings and input features under a weighted sum
/// of the outputs.
pub fn graph_attention() -> Result<GradCheck> {
    let mut r = rng(8);
    let g = random_graph(&mut r, 7, 0.4);
    let gat = random_gat(2, 2, 4, 12);
    let mut store = gat.params.clone();
    store.insert("x", random_features(&mut r, 7, 4));
    let config = gat.config.clone();
    let pairs = g.pairs();
    let w = random_features(&mut r, 7, 4);
    gradcheck(&store, POINTS, 1e-6, 3, |tape, s: &ParamStore| {
        let enc = GraphEncoder::from_params(config.clone(), s.clone())?;
        let x = tape.param(s, "x")?;
        let out = enc.forward(tape, &pairs, x)?;
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out.nodes, wv)?;
        Ok(tape.sum(prod))
    })
}

/// Query encoder under the score and feature distillation losses against
/// constant graph readouts.
pub fn distillation() -> Result<GradCheck> {
    let mut enc = BiEncoder::new(tiny(true), 12, 5)?;
    enc.untie_query_tokens();
    let mut r = rng(21);
    let articles = random_features(&mut r, 5, 8);
    let targets = random_features(&mut r, 2, 8);
    let candidates = vec![vec![0, 1, 2], vec![3, 4, 0, 2]];
    let teachers: Vec<Vec<f64>> = candidates
        .iter()
        .map(|c| {
            let raw: Vec<f64> = c.iter().map(|_| r.random_range(0.1..1.0)).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|v| v / z).collect()
        })
        .collect();
    let queries: Vec<Vec<u32>> = vec![vec![2, 3, 4], vec![5, 6, 9]];
    let config = enc.config.clone();
    gradcheck(&enc.params.subset("query."), POINTS, 1e-5, 4, |tape, store: &ParamStore| {
        let mut all = enc.params.clone();
        all.extend(store);
        let e = BiEncoder::from_params(config.clone(), all)?;
        tape.freeze_prefix("article.");
        tape.freeze_prefix("emb.");
        let qr: Vec<&[u32]> = queries.iter().map(Vec::as_slice).collect();
        let q = e.encode_queries(tape, &qr, &mut Dropout::eval())?;
        let a = tape.constant(articles.clone());
        let (score, _) = kd_score_loss(tape, q, a, &candidates, &teachers)?;
        let t = tape.constant(targets.clone());
        let feature = kd_feature_loss(tape, q, t)?;
        let s = tape.scale(score, 0.5);
        let f = tape.scale(feature, 0.5);
        tape.add(s, f)
    })
}

/// Every suite with its name.
pub fn all() -> Vec<(&'static str, Result<GradCheck>)> {
    vec![
        ("hierarchical encoders + contrastive", encoder_contrastive(true)),
        ("flat encoders + contrastive", encoder_contrastive(false)),
        ("graph attention", graph_attention()),
        ("score + feature distillation", distillation()),
    ]
}
