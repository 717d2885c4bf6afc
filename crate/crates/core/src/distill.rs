//! Second training stage: the graph encoder learns contrastively over graph
//! readouts while the query bi-encoder is distilled towards the graph's
//! relevance distributions, then article readouts are exported for
//! inductive retrieval.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Vocabulary};
use crate::encoder::{
    assemble_batch, contrastive_loss, dense_recall_with, draw_batch, mine_all, total_steps, BiEncoder, DenseIndex,
    DenseRetriever, Dropout, LossRecord, ARTICLE_PREFIX, QUERY_PREFIX, SHARED_TOKENS,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph, init_node_features, GatConfig, GraphEncoder, GraphMode, HeteroGraph, NodeSource, GAT_PREFIX};
use crate::par::Exec;
use crate::sparse::InvertedIndex;
use crate::tensor::{clip_global_norm, AdamW, AdamWConfig, LrSchedule, ParamStore, Tape, Tensor, Var};

/// Floor applied to student probabilities inside the KL term.
pub const KD_PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdMode {
    #[default]
    Score,
    Feature,
    Both,
    None,
}

impl FromStr for KdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "score" => Ok(KdMode::Score),
            "feature" => Ok(KdMode::Feature),
            "both" => Ok(KdMode::Both),
            "none" => Ok(KdMode::None),
            other => Err(Error::Config(format!(
                "unknown kd mode `{other}` (expected score, feature, both or none)"
            ))),
        }
    }
}

impl std::fmt::Display for KdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KdMode::Score => "score",
            KdMode::Feature => "feature",
            KdMode::Both => "both",
            KdMode::None => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Joint,
    Sequential,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Schedule::Joint),
            "sequential" => Ok(Schedule::Sequential),
            other => Err(Error::Config(format!("unknown schedule `{other}` (expected joint or sequential)"))),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::Joint => "joint",
            Schedule::Sequential => "sequential",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub lambda_con: f64,
    pub lambda_kd: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub optimizer: AdamWConfig,
    pub temperature: f64,
    pub kd_mode: KdMode,
    pub schedule: Schedule,
    pub graph: GraphMode,
    pub gat: GatConfig,
    pub bm25_negatives: usize,
    pub max_positives: usize,
    pub share_negatives: bool,
    pub clip_norm: f64,
    pub select_k: usize,
    /// Recompute node features from the current encoders before every step.
    pub refresh_features: bool,
    /// Let the contrastive loss update the article encoder through the
    /// article and structural-unit node features.
    pub train_article_encoder: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lambda_con: 0.7,
            lambda_kd: 0.3,
            epochs: 20,
            batch_size: 64,
            lr: 2e-4,
            warmup_fraction: 0.05,
            optimizer: AdamWConfig::default(),
            temperature: 1.0,
            kd_mode: KdMode::Score,
            schedule: Schedule::Joint,
            graph: GraphMode::Both,
            gat: GatConfig::default(),
            bm25_negatives: 4,
            max_positives: 2,
            share_negatives: true,
            clip_norm: 1.0,
            select_k: 10,
            refresh_features: false,
            train_article_encoder: false,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.kd_mode != KdMode::None && matches!(self.graph, GraphMode::None | GraphMode::StatuteOnly) {
            return Err(Error::Config(format!(
                "kd mode `{}` needs query nodes in the graph; graph mode `{}` has none",
                self.kd_mode, self.graph
            )));
        }
        if self.schedule == Schedule::Sequential && self.kd_mode == KdMode::None {
            return Err(Error::Config("sequential schedule needs a kd mode".into()));
        }
        if self.batch_size == 0 || self.max_positives == 0 || self.select_k == 0 {
            return Err(Error::Config("batch size, max positives and select_k must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.temperature > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("learning rate, temperature and clip norm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1]", self.warmup_fraction)));
        }
        self.gat.validate()
    }
}

/// Stage-2 configurations with a report name, as (name, graph, kd, schedule).
pub const STAGE2_CONFIGURATIONS: [(&str, GraphMode, KdMode, Schedule); 9] = [
    ("qabisar", GraphMode::Both, KdMode::Score, Schedule::Joint),
    ("no-kd", GraphMode::Both, KdMode::None, Schedule::Joint),
    ("bipartite-only", GraphMode::BipartiteOnly, KdMode::Score, Schedule::Joint),
    ("statute-only", GraphMode::StatuteOnly, KdMode::None, Schedule::Joint),
    ("be+ge-stat", GraphMode::StatuteOnly, KdMode::None, Schedule::Joint),
    ("no-graph", GraphMode::None, KdMode::None, Schedule::Joint),
    ("feature-kd", GraphMode::Both, KdMode::Feature, Schedule::Joint),
    ("both-kd", GraphMode::Both, KdMode::Both, Schedule::Joint),
    ("sequential", GraphMode::Both, KdMode::Score, Schedule::Sequential),
];

/// First report name matching the graph, KD and schedule settings.
pub fn configuration_name(config: &Stage2Config) -> Option<&'static str> {
    STAGE2_CONFIGURATIONS
        .iter()
        .find(|c| (c.1, c.2, c.3) == (config.graph, config.kd_mode, config.schedule))
        .map(|c| c.0)
}

/// Sets graph, KD and schedule to those of a named configuration.
pub fn apply_configuration(name: &str, config: &mut Stage2Config) -> Result<()> {
    let Some(&(_, graph, kd, schedule)) = STAGE2_CONFIGURATIONS.iter().find(|c| c.0 == name) else {
        return Err(Error::UnknownConfig {
            name: name.to_string(),
            valid: STAGE2_CONFIGURATIONS.iter().map(|c| c.0.to_string()).collect(),
        });
    };
    config.graph = graph;
    config.kd_mode = kd;
    config.schedule = schedule;
    Ok(())
}

/// Softmax of dot products between `query` and each candidate vector.
pub fn score_distribution(query: &[f64], candidates: &[&[f64]]) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::InvalidData("score distribution over no candidates".into()));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.len() != query.len() {
            return Err(Error::shape("score_distribution", format!("{} vs {}", query.len(), c.len())));
        }
        scores.push(query.iter().zip(*c).map(|(a, b)| a * b).sum::<f64>());
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in &mut scores {
        *s = (*s - max).exp();
        total += *s;
    }
    scores.iter_mut().for_each(|s| *s /= total);
    Ok(scores)
}

/// `KL(teacher || student)` with the student floored at [`KD_PROB_FLOOR`];
/// also returns how many floored entries carried teacher mass.
pub fn kl_divergence(teacher: &[f64], student: &[f64]) -> Result<(f64, usize)> {
    if teacher.len() != student.len() {
        return Err(Error::shape("kl_divergence", format!("{} vs {}", teacher.len(), student.len())));
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for (&t, &s) in teacher.iter().zip(student) {
        if t > 0.0 {
            if s < KD_PROB_FLOOR {
                clamped += 1;
            }
            total += t * (t.ln() - s.max(KD_PROB_FLOOR).ln());
        }
    }
    Ok((total, clamped))
}

/// Score distillation on the tape. Student logits are `q^b · p` against the
/// constant article matrix; teachers are fixed distributions over each
/// query's candidate rows. Summed over queries.
pub fn kd_score_loss(
    tape: &mut Tape,
    student: Var,
    articles: Var,
    candidates: &[Vec<usize>],
    teachers: &[Vec<f64>],
) -> Result<(Var, usize)> {
    if candidates.len() != teachers.len() || candidates.len() != tape.shape(student)[0] {
        return Err(Error::shape(
            "kd_score_loss",
            format!("{} candidate lists, {} teachers", candidates.len(), teachers.len()),
        ));
    }
    let scores = tape.matmul_nt(student, articles)?;
    let mut coords = Vec::new();
    let mut segments = Vec::new();
    let mut target = Vec::new();
    let mut entropy = 0.0;
    for (i, (cand, teach)) in candidates.iter().zip(teachers).enumerate() {
        if cand.len() != teach.len() || cand.is_empty() {
            return Err(Error::shape("kd_score_loss", format!("query {i}: {} candidates, {} probs", cand.len(), teach.len())));
        }
        for (&c, &t) in cand.iter().zip(teach) {
            coords.push((i, c));
            segments.push(i);
            target.push(t);
            if t > 0.0 {
                entropy += t * t.ln();
            }
        }
    }
    let logits = tape.gather_elements(scores, coords)?;
    let probs = tape.segment_softmax(logits, segments)?;
    let clamped = tape
        .value(probs)
        .data()
        .iter()
        .zip(&target)
        .filter(|(&s, &t)| t > 0.0 && s < KD_PROB_FLOOR)
        .count();
    let log_probs = tape.log_clamped(probs, KD_PROB_FLOOR);
    let m = target.len();
    let t = tape.constant(Tensor::new(m, 1, target)?);
    let cross = tape.mul(t, log_probs)?;
    let cross = tape.sum(cross);
    let neg_entropy = tape.constant(Tensor::scalar(entropy));
    Ok((tape.sub(neg_entropy, cross)?, clamped))
}

/// Mean over rows of the squared distance to a constant target.
pub fn kd_feature_loss(tape: &mut Tape, student: Var, target: Var) -> Result<Var> {
    let rows = tape.shape(student)[0];
    let diff = tape.sub(student, target)?;
    let sq = tape.sum_squares(diff);
    Ok(tape.scale(sq, 1.0 / rows as f64))
}

/// Combined objective; a single active term is returned unweighted.
pub fn compose_loss(lambda_con: f64, lambda_kd: f64, con: Option<f64>, kd: Option<f64>) -> f64 {
    match (con, kd) {
        (Some(c), Some(k)) => lambda_con * c + lambda_kd * k,
        (Some(c), None) => c,
        (None, Some(k)) => k,
        (None, None) => 0.0,
    }
}

/// Which terms a step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub contrastive: bool,
    pub kd: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub contrastive: Option<f64>,
    pub kd: Option<f64>,
    pub clamped: usize,
}

/// Encoders and graph as they evolve through stage 2.
#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub encoder: BiEncoder,
    pub gat: Option<GraphEncoder>,
    pub graph: Option<HeteroGraph>,
    /// Node features, frozen at stage-2 start unless refreshed.
    pub features: Option<Tensor>,
}

pub struct Stage2Trainer<'a> {
    pub config: Stage2Config,
    pub model: Stage2Model,
    dataset: &'a Dataset,
    mined: Vec<Vec<usize>>,
    gat_opt: AdamW,
    query_opt: AdamW,
    article_opt: AdamW,
    rng: ChaCha8Rng,
    exec: Exec,
    pub clamped: usize,
}

impl<'a> Stage2Trainer<'a> {
    pub fn new(
        config: Stage2Config,
        dataset: &'a Dataset,
        index: &InvertedIndex,
        mut encoder: BiEncoder,
        seed: u64,
        exec: Exec,
    ) -> Result<Self> {
        let mut config = config;
        config.gat.dim = encoder.dim();
        config.validate()?;
        if dataset.split.train.is_empty() {
            return Err(Error::InvalidData("training split is empty".into()));
        }
        if config.kd_mode != KdMode::None {
            encoder.untie_query_tokens();
        }
        let (gat, graph, features) = if config.graph == GraphMode::None {
            (None, None, None)
        } else {
            let graph = build_graph(dataset, &dataset.split.train, config.graph)?;
            let features = init_node_features(&graph, &encoder, dataset, exec)?;
            let gat = GraphEncoder::new(config.gat.clone(), seed ^ 0x6A7)?;
            (Some(gat), Some(graph), Some(features))
        };
        let batches = total_steps(dataset.split.train.len(), config.batch_size, config.epochs);
        let schedule = LrSchedule::WarmupLinear {
            peak: config.lr,
            warmup_fraction: config.warmup_fraction,
            total_steps: batches,
        };
        Ok(Stage2Trainer {
            mined: mine_all(dataset, index, config.bm25_negatives, seed)?,
            gat_opt: AdamW::new(config.optimizer, schedule),
            query_opt: AdamW::new(config.optimizer, schedule),
            article_opt: AdamW::new(config.optimizer, schedule),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0002),
            config,
            model: Stage2Model {
                encoder,
                gat,
                graph,
                features,
            },
            dataset,
            exec,
            clamped: 0,
        })
    }

    pub fn has_graph(&self) -> bool {
        self.model.gat.is_some()
    }

    /// Node features for the subgraph rows, either as constants or, when
    /// the article encoder is trained, partly computed on the tape.
    fn subgraph_features(&self, tape: &mut Tape, nodes: &[usize], drop: &mut Dropout) -> Result<Var> {
        let features = self.model.features.as_ref().expect("graph features");
        if !self.config.train_article_encoder {
            return Ok(tape.constant(features.select_rows(nodes)));
        }
        let graph = self.model.graph.as_ref().expect("graph");
        let mut text_rows = Vec::new();
        let mut texts: Vec<&[u32]> = Vec::new();
        let mut const_rows = Vec::new();
        for (l, &g) in nodes.iter().enumerate() {
            match graph.nodes()[g].source {
                NodeSource::Article(a) => {
                    text_rows.push(l);
                    texts.push(&self.dataset.corpus.articles[a].tokens);
                }
                NodeSource::Unit(u) => {
                    text_rows.push(l);
                    texts.push(&self.dataset.corpus.units[u].tokens);
                }
                _ => const_rows.push(l),
            }
        }
        let mut parts = Vec::new();
        let mut order = vec![0; nodes.len()];
        let mut next = 0;
        if !texts.is_empty() {
            parts.push(self.model.encoder.encode_articles(tape, &texts, drop)?.vectors);
            for &l in &text_rows {
                order[l] = next;
                next += 1;
            }
        }
        if !const_rows.is_empty() {
            let rows: Vec<usize> = const_rows.iter().map(|&l| nodes[l]).collect();
            parts.push(tape.constant(features.select_rows(&rows)));
            for &l in &const_rows {
                order[l] = next;
                next += 1;
            }
        }
        let stacked = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        tape.gather_rows(stacked, order)
    }

    /// One optimization step on the training queries at `members`
    /// (positions in the training split).
    pub fn step(&mut self, members: &[usize], phase: Phase) -> Result<StepLosses> {
        let cfg = self.config.clone();
        let kd_active = phase.kd && cfg.kd_mode != KdMode::None;
        let con_active = phase.contrastive && self.has_graph();
        if self.config.refresh_features && self.has_graph() {
            let graph = self.model.graph.as_ref().unwrap();
            self.model.features = Some(init_node_features(graph, &self.model.encoder, self.dataset, self.exec)?);
        }
        let batch = draw_batch(self.dataset, members, &self.mined, cfg.max_positives, &mut self.rng);
        let assembled = assemble_batch(&batch, cfg.share_negatives)?;
        let query_ids: Vec<usize> = members.iter().map(|&s| self.dataset.split.train[s]).collect();
        let q_tokens: Vec<&[u32]> = query_ids.iter().map(|&q| self.dataset.queries[q].tokens.as_slice()).collect();
        let mut drop = Dropout::train(self.model.encoder.config.dropout, self.rng.random());
        let mut tape = Tape::new();
        if !(cfg.train_article_encoder && con_active) {
            tape.freeze_prefix(ARTICLE_PREFIX);
            tape.freeze_prefix(SHARED_TOKENS);
        }
        if !kd_active {
            tape.freeze_prefix(QUERY_PREFIX);
        }
        if !con_active {
            tape.freeze_prefix(GAT_PREFIX);
        }

        let mut readouts = None;
        if let (Some(gat), Some(graph)) = (&self.model.gat, &self.model.graph) {
            let q_nodes: Option<Vec<usize>> = match cfg.graph {
                GraphMode::StatuteOnly => None,
                _ => Some(
                    query_ids
                        .iter()
                        .map(|&q| graph.query_node(self.dataset, q))
                        .collect::<Result<_>>()?,
                ),
            };
            let a_nodes: Vec<usize> = assembled
                .articles
                .iter()
                .map(|&a| graph.article_node(self.dataset, a))
                .collect::<Result<_>>()?;
            let mut seeds = q_nodes.clone().unwrap_or_default();
            seeds.extend(&a_nodes);
            let sub = graph.sample_subgraph(&seeds, gat.config.layers)?;
            let mut feat_drop = Dropout::eval();
            let x = self.subgraph_features(&mut tape, &sub.nodes, &mut feat_drop)?;
            let out = gat.forward(&mut tape, &sub.pairs, x)?;
            let nq = q_nodes.as_ref().map_or(0, Vec::len);
            let qg = if nq > 0 {
                tape.gather_rows(out.nodes, sub.seeds[..nq].to_vec())?
            } else {
                let q = self.model.encoder.encode_queries_eval(&q_tokens, self.exec)?;
                tape.constant(q)
            };
            let pg = tape.gather_rows(out.nodes, sub.seeds[nq..].to_vec())?;
            readouts = Some((qg, pg));
        }

        let mut con = None;
        let mut con_value = None;
        if con_active {
            let (qg, pg) = readouts.expect("graph readouts");
            let l = contrastive_loss(&mut tape, qg, pg, &assembled.pairs, cfg.temperature)?;
            con_value = Some(tape.value(l).item());
            con = Some(l);
        }
        let mut kd = None;
        let mut kd_value = None;
        let mut clamped = 0;
        if kd_active {
            let (qg, pg) = readouts.expect("graph readouts");
            let qg_c = tape.constant(tape.value(qg).clone());
            let pg_c = tape.constant(tape.value(pg).clone());
            let qb = self.model.encoder.encode_queries(&mut tape, &q_tokens, &mut drop)?;
            let score = if matches!(cfg.kd_mode, KdMode::Score | KdMode::Both) {
                let qv = tape.value(qg_c).clone();
                let pv = tape.value(pg_c).clone();
                let teachers = assembled
                    .candidates
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let rows: Vec<&[f64]> = c.iter().map(|&r| pv.row(r)).collect();
                        score_distribution(qv.row(i), &rows)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (l, n) = kd_score_loss(&mut tape, qb, pg_c, &assembled.candidates, &teachers)?;
                clamped = n;
                Some(l)
            } else {
                None
            };
            let feature = if matches!(cfg.kd_mode, KdMode::Feature | KdMode::Both) {
                Some(kd_feature_loss(&mut tape, qb, qg_c)?)
            } else {
                None
            };
            let l = match (score, feature) {
                (Some(s), Some(f)) => {
                    let s = tape.scale(s, 0.5);
                    let f = tape.scale(f, 0.5);
                    tape.add(s, f)?
                }
                (Some(l), None) | (None, Some(l)) => l,
                (None, None) => unreachable!("kd mode none is inactive"),
            };
            kd_value = Some(tape.value(l).item());
            kd = Some(l);
        }
        let step = self.gat_opt.steps_taken().max(self.query_opt.steps_taken()) + 1;
        let total = match (con, kd) {
            (Some(c), Some(k)) => {
                let c = tape.scale(c, cfg.lambda_con);
                let k = tape.scale(k, cfg.lambda_kd);
                tape.add(c, k)?
            }
            (Some(l), None) | (None, Some(l)) => l,
            (None, None) => {
                return Ok(StepLosses {
                    total: 0.0,
                    contrastive: None,
                    kd: None,
                    clamped: 0,
                })
            }
        };
        let total_value = tape.value(total).item();
        if !total_value.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let grads = tape.backward(total)?.params();
        let mut gat_grads = std::collections::BTreeMap::new();
        let mut query_grads = std::collections::BTreeMap::new();
        let mut article_grads = std::collections::BTreeMap::new();
        for (name, g) in grads {
            if name.starts_with(GAT_PREFIX) {
                gat_grads.insert(name, g);
            } else if name.starts_with(QUERY_PREFIX) {
                query_grads.insert(name, g);
            } else {
                article_grads.insert(name, g);
            }
        }
        if con_active {
            clip_global_norm(&mut gat_grads, cfg.clip_norm);
            let gat = self.model.gat.as_mut().expect("graph encoder");
            self.gat_opt.step(&mut gat.params, &gat_grads)?;
        }
        if kd_active {
            clip_global_norm(&mut query_grads, cfg.clip_norm);
            self.query_opt.step(&mut self.model.encoder.params, &query_grads)?;
        }
        if cfg.train_article_encoder && con_active {
            clip_global_norm(&mut article_grads, cfg.clip_norm);
            self.article_opt.step(&mut self.model.encoder.params, &article_grads)?;
        }
        self.clamped += clamped;
        Ok(StepLosses {
            total: total_value,
            contrastive: con_value,
            kd: kd_value,
            clamped,
        })
    }

    /// Runs one epoch; returns the step losses in order.
    pub fn epoch(&mut self, phase: Phase) -> Result<Vec<StepLosses>> {
        let mut order: Vec<usize> = (0..self.dataset.split.train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut self.rng);
        order
            .chunks(self.config.batch_size)
            .map(|members| self.step(members, phase))
            .collect()
    }

    pub fn export(&self) -> Result<DenseIndex> {
        export_inference_artifacts(&self.model, self.dataset, self.exec)
    }
}

/// Article embeddings used at inference: graph readouts from one full-graph
/// forward pass, or the bi-encoder's own article vectors without a graph.
pub fn export_inference_artifacts(model: &Stage2Model, dataset: &Dataset, exec: Exec) -> Result<DenseIndex> {
    let (Some(gat), Some(graph), Some(features)) = (&model.gat, &model.graph, &model.features) else {
        return DenseIndex::build(&model.encoder, &dataset.corpus, exec);
    };
    let out = gat.forward_eval(&graph.pairs(), features)?;
    let rows: Vec<usize> = (0..dataset.corpus.len())
        .map(|a| graph.article_node(dataset, a))
        .collect::<Result<_>>()?;
    let ids = dataset.corpus.articles.iter().map(|a| a.id.clone()).collect();
    DenseIndex::from_vectors(ids, out.select_rows(&rows))
}

/// Ranks the corpus for free text with the distilled query encoder.
pub fn infer_rank(retriever: &DenseRetriever, vocab: &Vocabulary, text: &str, k: usize) -> Result<Vec<(String, f64)>> {
    let hits = retriever.rank(&vocab.tokenize(text), k)?;
    Ok(hits
        .into_iter()
        .map(|(d, s)| (retriever.index.ids()[d].clone(), s))
        .collect())
}

/// Mean losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub phase: String,
    pub total: f64,
    pub contrastive: Option<f64>,
    pub kd: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub model: Stage2Model,
    pub index: DenseIndex,
    pub curve: Vec<LossRecord>,
    pub epochs: Vec<EpochLosses>,
    pub best_epoch: usize,
    pub validation_recall: Vec<f64>,
    pub clamped: usize,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Full second stage from a trained bi-encoder. Keeps the epoch with the
/// best validation recall@k of the exported retriever.
pub fn stage2_train(
    config: &Stage2Config,
    dataset: &Dataset,
    index: &InvertedIndex,
    encoder: BiEncoder,
    seed: u64,
    exec: Exec,
) -> Result<Stage2Output> {
    let mut trainer = Stage2Trainer::new(config.clone(), dataset, index, encoder, seed, exec)?;
    let joint = Phase {
        contrastive: true,
        kd: true,
    };
    let phases: Vec<(&str, Phase)> = match config.schedule {
        Schedule::Joint => vec![("joint", joint); config.epochs],
        Schedule::Sequential => {
            let mut p = vec![("graph", Phase { contrastive: true, kd: false }); config.epochs];
            p.extend(vec![("kd", Phase { contrastive: false, kd: true }); config.epochs]);
            p
        }
    };
    let trains_anything = trainer.has_graph() || config.kd_mode != KdMode::None;
    let mut curve = Vec::new();
    let mut epochs = Vec::new();
    let mut validation_recall = Vec::new();
    let mut best: Option<(f64, usize, Stage2Model)> = None;
    let mut step = 0;
    if trains_anything {
        for (e, (name, phase)) in phases.into_iter().enumerate() {
            let losses = trainer.epoch(phase)?;
            for l in &losses {
                step += 1;
                for (component, value) in [("total", Some(l.total)), ("contrastive", l.contrastive), ("kd", l.kd)] {
                    if let Some(v) = value {
                        curve.push(LossRecord {
                            step,
                            epoch: e + 1,
                            loss: v,
                            lr: trainer.gat_opt.schedule.lr_at(step),
                            component: Some(component.to_string()),
                        });
                    }
                }
            }
            epochs.push(EpochLosses {
                epoch: e + 1,
                phase: name.to_string(),
                total: losses.iter().map(|l| l.total).sum::<f64>() / losses.len() as f64,
                contrastive: mean_of(losses.iter().map(|l| l.contrastive)),
                kd: mean_of(losses.iter().map(|l| l.kd)),
            });
            if !dataset.split.validation.is_empty() {
                let exported = trainer.export()?;
                let r = dense_recall_with(&trainer.model.encoder, &exported, dataset, &dataset.split.validation, config.select_k, exec)?;
                validation_recall.push(r);
                if best.as_ref().is_none_or(|b| r > b.0) {
                    best = Some((r, e + 1, trainer.model.clone()));
                }
            }
        }
    }
    let clamped = trainer.clamped;
    let (model, best_epoch) = match best {
        Some((_, e, model)) => (model, e),
        None => (trainer.model, epochs.len()),
    };
    let index = export_inference_artifacts(&model, dataset, exec)?;
    Ok(Stage2Output {
        model,
        index,
        curve,
        epochs,
        best_epoch,
        validation_recall,
        clamped,
    })
}

/// Parameters of every component, for checkpointing.
pub fn model_params(model: &Stage2Model) -> ParamStore {
    let mut store = model.encoder.params.clone();
    if let Some(g) = &model.gat {
        store.extend(&g.params);
    }
    store
}
