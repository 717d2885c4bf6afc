mod common;

use common::*;
use sar_core::distill::{
    export_inference_artifacts, infer_rank, model_params, stage2_train, KdMode, Phase, Schedule, Stage2Config,
    Stage2Trainer,
};
use sar_core::encoder::{stage1_train, DenseRetriever, Stage1Config};
use sar_core::graph::GraphMode;
use sar_core::par::Exec;
use sar_core::tensor::ParamStore;

fn prefixed(store: &ParamStore, prefixes: &[&str]) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

const BI_ENCODER: [&str; 3] = ["query.", "article.", "emb."];
const ARTICLE_SIDE: [&str; 2] = ["article.", "emb."];

#[test]
fn stage1_loss_falls_and_repeats_exactly() {
    let a = trained_small(2);
    let losses = &a.stage1.epoch_losses;
    assert!(losses[1] < losses[0], "{losses:?}");
    let b = stage1_train(
        &small_encoder(),
        &Stage1Config {
            epochs: 2,
            ..Default::default()
        },
        &a.dataset,
        &a.bm25,
        7,
        Exec::Sequential,
    )
    .unwrap();
    assert_eq!(a.stage1.curve, b.curve);
    assert_eq!(a.encoder.params.to_bytes(), b.encoder.params.to_bytes());
}

#[test]
fn stage2_joint_components_fall() {
    let t = trained_small(1);
    // The teacher sharpens as the graph trains, so the KD term only falls
    // when the student takes steps large enough to keep up.
    let config = Stage2Config {
        epochs: 2,
        lr: 3e-3,
        batch_size: 8,
        ..Default::default()
    };
    let out = stage2_train(&config, &t.dataset, &t.bm25, t.encoder.clone(), 7, Exec::Parallel).unwrap();
    let [first, second] = [&out.epochs[0], &out.epochs[1]];
    assert!(second.contrastive.unwrap() < first.contrastive.unwrap(), "{:?}", out.epochs);
    assert!(second.kd.unwrap() < first.kd.unwrap(), "{:?}", out.epochs);
    let again = stage2_train(&config, &t.dataset, &t.bm25, t.encoder, 7, Exec::Sequential).unwrap();
    assert_eq!(out.curve, again.curve);
    assert_eq!(model_params(&out.model).to_bytes(), model_params(&again.model).to_bytes());
    assert_eq!(out.index.to_tsv(), again.index.to_tsv());
}

fn one_step(config: Stage2Config, phase: Phase) -> (ParamStore, ParamStore) {
    let t = trained_small(1);
    let mut trainer = Stage2Trainer::new(config, &t.dataset, &t.bm25, t.encoder, 3, Exec::Parallel).unwrap();
    let before = model_params(&trainer.model);
    let members: Vec<usize> = (0..16).collect();
    trainer.step(&members, phase).unwrap();
    (before, model_params(&trainer.model))
}

const JOINT: Phase = Phase {
    contrastive: true,
    kd: true,
};

#[test]
fn score_kd_leaves_article_side_untouched() {
    let (before, after) = one_step(Stage2Config::default(), JOINT);
    assert_eq!(prefixed(&before, &ARTICLE_SIDE), prefixed(&after, &ARTICLE_SIDE));
    assert_ne!(prefixed(&before, &["query."]), prefixed(&after, &["query."]));
    assert_ne!(prefixed(&before, &["gat."]), prefixed(&after, &["gat."]));
}

#[test]
fn no_kd_leaves_bi_encoder_untouched() {
    let config = Stage2Config {
        kd_mode: KdMode::None,
        ..Default::default()
    };
    let (before, after) = one_step(config, JOINT);
    assert_eq!(prefixed(&before, &BI_ENCODER), prefixed(&after, &BI_ENCODER));
    assert_ne!(prefixed(&before, &["gat."]), prefixed(&after, &["gat."]));
}

#[test]
fn sequential_kd_phase_freezes_graph() {
    let config = Stage2Config {
        schedule: Schedule::Sequential,
        ..Default::default()
    };
    let (before, after) = one_step(
        config,
        Phase {
            contrastive: false,
            kd: true,
        },
    );
    assert_eq!(prefixed(&before, &["gat."]), prefixed(&after, &["gat."]));
    assert_eq!(prefixed(&before, &ARTICLE_SIDE), prefixed(&after, &ARTICLE_SIDE));
    assert_ne!(prefixed(&before, &["query."]), prefixed(&after, &["query."]));
}

#[test]
fn rejected_mode_combinations() {
    let t = trained_small(1);
    for (kd_mode, graph, schedule) in [
        (KdMode::Score, GraphMode::None, Schedule::Joint),
        (KdMode::Feature, GraphMode::StatuteOnly, Schedule::Joint),
        (KdMode::None, GraphMode::Both, Schedule::Sequential),
    ] {
        let config = Stage2Config {
            kd_mode,
            graph,
            schedule,
            ..Default::default()
        };
        let err = Stage2Trainer::new(config, &t.dataset, &t.bm25, t.encoder.clone(), 1, Exec::Parallel);
        assert!(matches!(err, Err(sar_core::Error::Config(_))));
    }
}

#[test]
fn inference_composes_query_encoder_and_graph_readouts() {
    let t = trained_small(1);
    let config = Stage2Config {
        epochs: 1,
        ..Default::default()
    };
    let out = stage2_train(&config, &t.dataset, &t.bm25, t.encoder, 7, Exec::Parallel).unwrap();
    let again = export_inference_artifacts(&out.model, &t.dataset, Exec::Sequential).unwrap();
    assert_eq!(out.index, again);
    let ids: Vec<&str> = t.dataset.corpus.articles.iter().map(|a| a.id.as_str()).collect();
    assert_eq!(out.index.ids(), ids.as_slice());

    let retriever = DenseRetriever {
        encoder: out.model.encoder.clone(),
        index: out.index.clone(),
    };
    let n = t.dataset.corpus.len();
    for &q in &t.dataset.split.test {
        let query = &t.dataset.queries[q];
        let qv = out.model.encoder.encode_query(&query.tokens).unwrap();
        let vectors: Vec<Vec<f64>> = (0..n).map(|a| out.index.vector(a).to_vec()).collect();
        let want = dense_oracle(&vectors, &qv, n);
        let got = infer_rank(&retriever, &t.dataset.corpus.vocab, &query.text, n).unwrap();
        assert_eq!(got.len(), n);
        for ((id, score), (a, s)) in got.iter().zip(&want) {
            assert_eq!(id, &ids[*a]);
            assert!((score - s).abs() < 1e-12);
        }
    }
}
