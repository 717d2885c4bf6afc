use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{assemble_batch, contrastive_loss, BatchQuery, BiEncoder, DenseIndex, Dropout, EncoderConfig};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::eval::recall_at_k;
use crate::par::Exec;
use crate::sparse::InvertedIndex;
use crate::tensor::{clip_global_norm, AdamW, AdamWConfig, LrSchedule, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub optimizer: AdamWConfig,
    pub temperature: f64,
    pub bm25_negatives: usize,
    pub max_positives: usize,
    /// Whether other queries' mined negatives join the in-batch negatives.
    pub share_negatives: bool,
    pub clip_norm: f64,
    /// Cutoff of the validation recall used to pick the kept epoch.
    pub select_k: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 15,
            batch_size: 24,
            peak_lr: 3e-3,
            warmup_fraction: 0.05,
            optimizer: AdamWConfig::default(),
            temperature: 1.0,
            bm25_negatives: 4,
            max_positives: 2,
            share_negatives: true,
            clip_norm: 1.0,
            select_k: 10,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_positives == 0 || self.select_k == 0 {
            return Err(Error::Config("batch size, max positives and select_k must be positive".into()));
        }
        if !(self.peak_lr >= 0.0 && self.temperature > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("learning rate, temperature and clip norm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1]", self.warmup_fraction)));
        }
        Ok(())
    }
}

/// One optimizer step of a loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub encoder: BiEncoder,
    pub curve: Vec<LossRecord>,
    pub epoch_losses: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub validation_recall: Vec<f64>,
    pub truncated_articles: usize,
}

/// Mean recall@k of the encoder over the given queries (eval mode).
pub fn dense_recall(encoder: &BiEncoder, dataset: &Dataset, queries: &[usize], k: usize, exec: Exec) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let index = DenseIndex::build(encoder, &dataset.corpus, exec)?;
    dense_recall_with(encoder, &index, dataset, queries, k, exec)
}

/// Mean recall@k of the query encoder against a prebuilt article index.
pub fn dense_recall_with(
    encoder: &BiEncoder,
    index: &DenseIndex,
    dataset: &Dataset,
    queries: &[usize],
    k: usize,
    exec: Exec,
) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let tokens: Vec<&[u32]> = queries.iter().map(|&q| dataset.queries[q].tokens.as_slice()).collect();
    let vecs = encoder.encode_queries_eval(&tokens, exec)?;
    let mut total = 0.0;
    for (i, &q) in queries.iter().enumerate() {
        let ranked: Vec<usize> = index.search(vecs.row(i), k)?.into_iter().map(|h| h.0).collect();
        total += recall_at_k(&ranked, &dataset.queries[q].relevant, k);
    }
    Ok(total / queries.len() as f64)
}

/// Per training query, the BM25 hard negatives it keeps for every epoch.
pub fn mine_all(
    dataset: &Dataset,
    index: &InvertedIndex,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    dataset
        .split
        .train
        .iter()
        .map(|&q| {
            let query = &dataset.queries[q];
            index.mine_negatives(&query.tokens, &query.relevant, n, seed ^ (q as u64).wrapping_mul(0x9E37_79B9))
        })
        .collect()
}

/// Samples up to `max` positives per query and attaches mined negatives.
pub fn draw_batch(
    dataset: &Dataset,
    members: &[usize],
    mined: &[Vec<usize>],
    max_positives: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<BatchQuery> {
    members
        .iter()
        .map(|&slot| {
            let q = &dataset.queries[dataset.split.train[slot]];
            let mut positives: Vec<usize> = q.relevant.choose_multiple(rng, max_positives).copied().collect();
            positives.sort_unstable();
            BatchQuery {
                positives,
                negatives: mined[slot].clone(),
                relevant: q.relevant.clone(),
            }
        })
        .collect()
}

pub fn total_steps(train: usize, batch: usize, epochs: usize) -> usize {
    train.div_ceil(batch) * epochs
}

/// Contrastive training of the bi-encoder on the training split. Keeps the
/// epoch with the best validation recall@k (the last epoch when there is no
/// validation split).
pub fn stage1_train(
    encoder_config: &EncoderConfig,
    config: &Stage1Config,
    dataset: &Dataset,
    index: &InvertedIndex,
    seed: u64,
    exec: Exec,
) -> Result<Stage1Output> {
    config.validate()?;
    if dataset.split.train.is_empty() {
        return Err(Error::InvalidData("training split is empty".into()));
    }
    let encoder_config = if encoder_config.hierarchical {
        encoder_config.clone()
    } else {
        encoder_config.clone().flat(dataset.corpus.max_article_len())
    };
    let mut encoder = BiEncoder::new(encoder_config, dataset.corpus.vocab.len(), seed)?;
    let mined = mine_all(dataset, index, config.bm25_negatives, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0001);
    let n_train = dataset.split.train.len();
    let mut optimizer = AdamW::new(
        config.optimizer,
        LrSchedule::WarmupLinear {
            peak: config.peak_lr,
            warmup_fraction: config.warmup_fraction,
            total_steps: total_steps(n_train, config.batch_size, config.epochs),
        },
    );
    let mut curve = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut validation_recall = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut truncated = 0;
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for members in order.chunks(config.batch_size) {
            let batch = draw_batch(dataset, members, &mined, config.max_positives, &mut rng);
            let assembled = assemble_batch(&batch, config.share_negatives)?;
            let mut tape = Tape::new();
            let mut drop = Dropout::train(encoder.config.dropout, rng.random());
            let q_tokens: Vec<&[u32]> = members
                .iter()
                .map(|&s| dataset.queries[dataset.split.train[s]].tokens.as_slice())
                .collect();
            let a_tokens: Vec<&[u32]> = assembled
                .articles
                .iter()
                .map(|&a| dataset.corpus.articles[a].tokens.as_slice())
                .collect();
            let q = encoder.encode_queries(&mut tape, &q_tokens, &mut drop)?;
            let a = encoder.encode_articles(&mut tape, &a_tokens, &mut drop)?;
            truncated += a.truncated;
            let loss = contrastive_loss(&mut tape, q, a.vectors, &assembled.pairs, config.temperature)?;
            let value = tape.value(loss).item();
            let step = optimizer.steps_taken() + 1;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(step));
            }
            let mut grads = tape.backward(loss)?.params();
            clip_global_norm(&mut grads, config.clip_norm);
            let lr = optimizer.step(&mut encoder.params, &grads)?;
            curve.push(LossRecord {
                step,
                epoch,
                loss: value,
                lr,
                component: None,
            });
            sum += value;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
        if !dataset.split.validation.is_empty() {
            let r = dense_recall(&encoder, dataset, &dataset.split.validation, config.select_k, exec)?;
            validation_recall.push(r);
            if best.as_ref().is_none_or(|b| r > b.0) {
                best = Some((r, epoch, encoder.params.clone()));
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            encoder.params = params;
            epoch
        }
        None => config.epochs,
    };
    Ok(Stage1Output {
        encoder,
        curve,
        epoch_losses,
        best_epoch,
        validation_recall,
        truncated_articles: truncated,
    })
}
