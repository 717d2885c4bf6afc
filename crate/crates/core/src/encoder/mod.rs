//! Dense bi-encoder: a query encoder and a hierarchical article encoder
//! sharing one token-embedding table, scored by plain dot product.
//!
//! Both encoders are small post-norm transformer stacks. The query vector is
//! the CLS position of the final layer. Articles are split into chunks, each
//! chunk is encoded like a query, and the chunk CLS vectors (plus learned
//! chunk-position embeddings) go through a second transformer whose outputs
//! are max-pooled into the article vector. With `hierarchical = false` the
//! article is a single truncated chunk read out at its CLS position.

mod contrastive;
mod index;
mod train;

pub use contrastive::{assemble_batch, contrastive_loss, AssembledBatch, BatchQuery, ContrastivePair};
pub use index::{DenseIndex, DenseRetriever};
pub use train::{
    dense_recall, dense_recall_with, draw_batch, mine_all, stage1_train, total_steps, LossRecord, Stage1Config, Stage1Output,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{chunk_article, CLS};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const SHARED_TOKENS: &str = "emb.tokens";
pub const QUERY_TOKENS: &str = "query.tokens";
pub const QUERY_PREFIX: &str = "query.";
pub const ARTICLE_PREFIX: &str = "article.";

const LN_EPS: f64 = 1e-6;
const EVAL_GROUP: usize = 16;
/// Half-width of the uniform init of embedding tables.
const EMB_INIT: f64 = 0.05;
/// Scale on the initial query/key and feed-forward output weights. With
/// identity value and output projections, each layer starts close to a
/// mean of its input embeddings.
const SMALL_INIT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub chunk_len: usize,
    pub max_chunks: usize,
    pub max_query_len: usize,
    pub hierarchical: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            dropout: 0.1,
            chunk_len: 64,
            max_chunks: 8,
            max_query_len: 32,
            hierarchical: true,
        }
    }
}

impl EncoderConfig {
    /// Single-chunk article encoder without the second level; `chunk_len`
    /// is widened to cover the longest article.
    pub fn flat(mut self, max_article_len: usize) -> Self {
        self.hierarchical = false;
        self.chunk_len = self.chunk_len.max(max_article_len).max(1);
        self.max_chunks = 1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.ff_dim == 0 || self.chunk_len == 0 || self.max_chunks == 0 || self.max_query_len == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Dropout switch for one forward pass. Masks are drawn from a seeded stream
/// so training runs are reproducible.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        match &mut self.rng {
            Some(rng) if self.rate > 0.0 => {
                let seed = rng.random();
                tape.dropout(x, self.rate, seed)
            }
            _ => x,
        }
    }
}

/// Encoded articles plus how many had to be cut to `max_chunks`.
pub struct EncodedArticles {
    pub vectors: Var,
    pub truncated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiEncoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

fn linear_params(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    store.insert(format!("{name}.w"), Tensor::xavier(fan_in, fan_out, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(1, fan_out));
}

fn norm_params(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::filled(1, dim, 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(1, dim));
}

fn stack_params(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.dim;
    for l in 0..cfg.layers {
        let p = format!("{prefix}.l{l}");
        for proj in ["q", "k", "v", "o"] {
            linear_params(store, &format!("{p}.{proj}"), d, d, rng);
            let w = store.get_mut(&format!("{p}.{proj}.w")).unwrap();
            if proj == "v" || proj == "o" {
                *w = Tensor::identity(d);
            } else {
                w.data_mut().iter_mut().for_each(|x| *x *= SMALL_INIT);
            }
        }
        norm_params(store, &format!("{p}.ln1"), d);
        linear_params(store, &format!("{p}.ff1"), d, cfg.ff_dim, rng);
        linear_params(store, &format!("{p}.ff2"), cfg.ff_dim, d, rng);
        store.get_mut(&format!("{p}.ff2.w")).unwrap().data_mut().iter_mut().for_each(|x| *x *= SMALL_INIT);
        norm_params(store, &format!("{p}.ln2"), d);
    }
}

fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn norm(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{name}.g"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

impl BiEncoder {
    pub fn new(config: EncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let mut params = ParamStore::new();
        params.insert(SHARED_TOKENS, Tensor::uniform(vocab_size, d, EMB_INIT, &mut rng));
        params.insert("query.pos", Tensor::uniform(config.max_query_len + 1, d, EMB_INIT, &mut rng));
        norm_params(&mut params, "query.emb_ln", d);
        stack_params(&mut params, "query.enc", &config, &mut rng);
        params.insert("article.pos", Tensor::uniform(config.chunk_len + 1, d, EMB_INIT, &mut rng));
        norm_params(&mut params, "article.emb_ln", d);
        stack_params(&mut params, "article.enc", &config, &mut rng);
        if config.hierarchical {
            params.insert("article.chunk_pos", Tensor::uniform(config.max_chunks, d, EMB_INIT, &mut rng));
            stack_params(&mut params, "article.top", &config, &mut rng);
        }
        Ok(BiEncoder { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        if !params.contains(SHARED_TOKENS) {
            return Err(Error::Format(format!("checkpoint lacks `{SHARED_TOKENS}`")));
        }
        Ok(BiEncoder { config, params })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Gives the query encoder its own copy of the token table so that it
    /// can be trained without moving article representations.
    pub fn untie_query_tokens(&mut self) {
        if !self.params.contains(QUERY_TOKENS) {
            let shared = self.params.get(SHARED_TOKENS).expect("shared table").clone();
            self.params.insert(QUERY_TOKENS, shared);
        }
    }

    fn query_table(&self) -> &'static str {
        if self.params.contains(QUERY_TOKENS) {
            QUERY_TOKENS
        } else {
            SHARED_TOKENS
        }
    }

    /// Token + position embeddings for a batch of CLS-led sequences laid out
    /// back to back, followed by the transformer stack.
    fn encode_sequences(
        &self,
        tape: &mut Tape,
        table: &str,
        prefix: &str,
        seqs: &[Vec<u32>],
        drop: &mut Dropout,
    ) -> Result<(Var, Vec<(usize, usize)>)> {
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        for s in seqs {
            spans.push((tokens.len(), s.len()));
            tokens.extend(s.iter().map(|&t| t as usize));
            positions.extend(0..s.len());
        }
        let table = tape.param(&self.params, table)?;
        let pos = tape.param(&self.params, &format!("{prefix}.pos"))?;
        let t = tape.gather_rows(table, tokens)?;
        let p = tape.gather_rows(pos, positions)?;
        let x = tape.add(t, p)?;
        let x = norm(tape, &self.params, &format!("{prefix}.emb_ln"), x)?;
        let x = drop.apply(tape, x);
        let x = self.transformer(tape, &format!("{prefix}.enc"), x, &spans, drop)?;
        Ok((x, spans))
    }

    /// Post-norm transformer layers; attention is restricted to each span.
    fn transformer(
        &self,
        tape: &mut Tape,
        prefix: &str,
        mut x: Var,
        spans: &[(usize, usize)],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        for l in 0..self.config.layers {
            let p = format!("{prefix}.l{l}");
            let q = linear(tape, &self.params, &format!("{p}.q"), x)?;
            let k = linear(tape, &self.params, &format!("{p}.k"), x)?;
            let v = linear(tape, &self.params, &format!("{p}.v"), x)?;
            let mut outs = Vec::with_capacity(spans.len());
            for &(start, len) in spans {
                let mut heads = Vec::with_capacity(self.config.heads);
                for h in 0..self.config.heads {
                    let qh = tape.slice(q, start, len, h * hd, hd)?;
                    let kh = tape.slice(k, start, len, h * hd, hd)?;
                    let vh = tape.slice(v, start, len, h * hd, hd)?;
                    let s = tape.matmul_nt(qh, kh)?;
                    let s = tape.scale(s, scale);
                    let a = tape.row_softmax(s);
                    heads.push(tape.matmul(a, vh)?);
                }
                outs.push(tape.concat_cols(&heads)?);
            }
            let attn = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs)? };
            let o = linear(tape, &self.params, &format!("{p}.o"), attn)?;
            let o = drop.apply(tape, o);
            let r = tape.add(x, o)?;
            x = norm(tape, &self.params, &format!("{p}.ln1"), r)?;
            let f = linear(tape, &self.params, &format!("{p}.ff1"), x)?;
            let f = tape.gelu(f);
            let f = linear(tape, &self.params, &format!("{p}.ff2"), f)?;
            let f = drop.apply(tape, f);
            let r = tape.add(x, f)?;
            x = norm(tape, &self.params, &format!("{p}.ln2"), r)?;
        }
        Ok(x)
    }

    /// Query vectors `[n, d]`, one row per query.
    pub fn encode_queries(&self, tape: &mut Tape, queries: &[&[u32]], drop: &mut Dropout) -> Result<Var> {
        let max = self.config.max_query_len;
        let seqs: Vec<Vec<u32>> = queries
            .iter()
            .map(|q| std::iter::once(CLS).chain(q.iter().copied().take(max)).collect())
            .collect();
        let (x, spans) = self.encode_sequences(tape, self.query_table(), "query", &seqs, drop)?;
        tape.gather_rows(x, spans.iter().map(|s| s.0).collect())
    }

    /// Article vectors `[n, d]`, one row per article.
    pub fn encode_articles(&self, tape: &mut Tape, articles: &[&[u32]], drop: &mut Dropout) -> Result<EncodedArticles> {
        let cfg = &self.config;
        let mut seqs = Vec::new();
        let mut groups = Vec::with_capacity(articles.len());
        let mut truncated = 0;
        for tokens in articles {
            let mut chunks = chunk_article(tokens, cfg.chunk_len);
            if chunks.len() > cfg.max_chunks {
                truncated += 1;
                chunks.truncate(cfg.max_chunks);
            }
            groups.push((seqs.len(), chunks.len()));
            seqs.extend(chunks);
        }
        let (x, spans) = self.encode_sequences(tape, SHARED_TOKENS, "article", &seqs, drop)?;
        let cls = tape.gather_rows(x, spans.iter().map(|s| s.0).collect())?;
        if !cfg.hierarchical {
            return Ok(EncodedArticles {
                vectors: cls,
                truncated,
            });
        }
        let positions: Vec<usize> = groups.iter().flat_map(|&(_, n)| 0..n).collect();
        let vectors = self.pool_chunks(tape, cls, &positions, &groups, drop)?;
        Ok(EncodedArticles { vectors, truncated })
    }

    /// Second level of the article encoder: chunk vectors `[c, d]` plus
    /// chunk-position embeddings, a transformer per article group, and a
    /// columnwise max-pool per group.
    pub fn pool_chunks(
        &self,
        tape: &mut Tape,
        chunk_vectors: Var,
        positions: &[usize],
        groups: &[(usize, usize)],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let table = tape.param(&self.params, "article.chunk_pos")?;
        let pos = tape.gather_rows(table, positions.to_vec())?;
        let x = tape.add(chunk_vectors, pos)?;
        let y = self.transformer(tape, "article.top", x, groups, drop)?;
        let mut pooled = Vec::with_capacity(groups.len());
        for &(start, len) in groups {
            let rows = tape.slice_rows(y, start, len)?;
            pooled.push(tape.max_pool_rows(rows));
        }
        if pooled.len() == 1 {
            Ok(pooled[0])
        } else {
            tape.concat_rows(&pooled)
        }
    }

    pub fn encode_query(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = self.encode_queries(&mut tape, &[tokens], &mut Dropout::eval())?;
        Ok(tape.value(v).data().to_vec())
    }

    pub fn encode_article(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let e = self.encode_articles(&mut tape, &[tokens], &mut Dropout::eval())?;
        Ok(tape.value(e.vectors).data().to_vec())
    }

    /// Evaluation-mode query encoding in independent groups.
    pub fn encode_queries_eval(&self, queries: &[&[u32]], exec: Exec) -> Result<Tensor> {
        let groups: Vec<&[&[u32]]> = queries.chunks(EVAL_GROUP).collect();
        let parts = exec.map(&groups, |g| -> Result<Tensor> {
            let mut tape = Tape::new();
            let v = self.encode_queries(&mut tape, g, &mut Dropout::eval())?;
            Ok(tape.value(v).clone())
        });
        stack(parts, queries.len(), self.dim())
    }

    /// Evaluation-mode article encoding in independent groups.
    pub fn encode_articles_eval(&self, articles: &[&[u32]], exec: Exec) -> Result<Tensor> {
        let groups: Vec<&[&[u32]]> = articles.chunks(EVAL_GROUP).collect();
        let parts = exec.map(&groups, |g| -> Result<Tensor> {
            let mut tape = Tape::new();
            let e = self.encode_articles(&mut tape, g, &mut Dropout::eval())?;
            Ok(tape.value(e.vectors).clone())
        });
        stack(parts, articles.len(), self.dim())
    }
}

fn stack(parts: Vec<Result<Tensor>>, rows: usize, dim: usize) -> Result<Tensor> {
    if rows == 0 {
        return Ok(Tensor::zeros(0, dim));
    }
    let mut data = Vec::with_capacity(rows * dim);
    for p in parts {
        data.extend_from_slice(p?.data());
    }
    Tensor::new(rows, dim, data)
}

/// Dot-product relevance of two equally sized vectors.
pub fn relevance_score(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::shape("relevance_score", format!("{} vs {}", q.len(), p.len())));
    }
    Ok(q.iter().zip(p).map(|(a, b)| a * b).sum())
}
