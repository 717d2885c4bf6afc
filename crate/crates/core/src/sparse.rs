//! Okapi BM25 over an in-memory inverted index. Serves as the sparse
//! baseline and as the hard-negative miner for contrastive training.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CLS, UNK};
use crate::error::{Error, Result};
use crate::par::Exec;

const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if self.k1.is_nan() || self.k1 <= 0.0 || !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!(
                "BM25 needs k1 > 0 and 0 <= b <= 1, got k1={} b={}",
                self.k1, self.b
            )));
        }
        Ok(())
    }
}

/// A ranked hit: article index and score.
pub type Hit = (usize, f64);

/// Sorts by descending score, ties by ascending article index. Adding zero
/// maps -0.0 to 0.0 so that signed zeros tie.
pub fn sort_hits(hits: &mut [Hit]) {
    hits.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0)));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    version: u32,
    params: Bm25Params,
    vocab_size: usize,
    /// Per token id: `(article index, term frequency)` sorted by article.
    postings: Vec<Vec<(u32, u32)>>,
    doc_len: Vec<u32>,
    avg_len: f64,
}

impl InvertedIndex {
    pub fn build(corpus: &Corpus, params: Bm25Params) -> Result<Self> {
        params.validate()?;
        let vocab_size = corpus.vocab.len();
        let mut postings: Vec<Vec<(u32, u32)>> = vec![Vec::new(); vocab_size];
        let mut doc_len = Vec::with_capacity(corpus.len());
        for (doc, article) in corpus.articles.iter().enumerate() {
            let mut counts: Vec<(u32, u32)> = Vec::new();
            let mut sorted = article.tokens.clone();
            sorted.sort_unstable();
            for t in sorted {
                match counts.last_mut() {
                    Some((last, c)) if *last == t => *c += 1,
                    _ => counts.push((t, 1)),
                }
            }
            let mut len = 0;
            for (t, tf) in counts {
                len += tf;
                postings[t as usize].push((doc as u32, tf));
            }
            doc_len.push(len);
        }
        let avg_len = if doc_len.is_empty() {
            0.0
        } else {
            doc_len.iter().map(|&l| f64::from(l)).sum::<f64>() / doc_len.len() as f64
        };
        Ok(InvertedIndex {
            version: SNAPSHOT_VERSION,
            params,
            vocab_size,
            postings,
            doc_len,
            avg_len,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn num_docs(&self) -> usize {
        self.doc_len.len()
    }

    pub fn doc_len(&self, doc: usize) -> u32 {
        self.doc_len[doc]
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    fn postings(&self, token: u32) -> &[(u32, u32)] {
        if token == CLS || token == UNK {
            return &[];
        }
        self.postings.get(token as usize).map_or(&[], Vec::as_slice)
    }

    pub fn doc_freq(&self, token: u32) -> usize {
        self.postings(token).len()
    }

    pub fn term_freq(&self, token: u32, doc: usize) -> u32 {
        let list = self.postings(token);
        list.binary_search_by_key(&(doc as u32), |p| p.0)
            .map_or(0, |i| list[i].1)
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`
    pub fn idf(&self, token: u32) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.doc_freq(token) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_score(&self, idf: f64, tf: u32, doc: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let norm = 1.0 - b + b * f64::from(self.doc_len[doc]) / self.avg_len;
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    pub fn score(&self, query: &[u32], doc: usize) -> Result<f64> {
        if doc >= self.num_docs() {
            return Err(Error::UnknownArticle(format!("#{doc}")));
        }
        let mut s = 0.0;
        for &t in query {
            let tf = self.term_freq(t, doc);
            if tf > 0 {
                s += self.term_score(self.idf(t), tf, doc);
            }
        }
        Ok(s)
    }

    /// All articles sharing at least one token with the query, best first.
    pub fn search_all(&self, query: &[u32]) -> Vec<Hit> {
        let mut scores = vec![0.0; self.num_docs()];
        let mut touched = vec![false; self.num_docs()];
        for &t in query {
            let list = self.postings(t);
            if list.is_empty() {
                continue;
            }
            let idf = self.idf(t);
            for &(doc, tf) in list {
                let doc = doc as usize;
                scores[doc] += self.term_score(idf, tf, doc);
                touched[doc] = true;
            }
        }
        let mut hits: Vec<Hit> = scores
            .into_iter()
            .enumerate()
            .filter(|(d, _)| touched[*d])
            .collect();
        sort_hits(&mut hits);
        hits
    }

    pub fn search_topk(&self, query: &[u32], k: usize) -> Vec<Hit> {
        let mut hits = self.search_all(query);
        hits.truncate(k);
        hits
    }

    pub fn search_batch(&self, queries: &[Vec<u32>], k: usize, exec: Exec) -> Vec<Vec<Hit>> {
        exec.map(queries, |q| self.search_topk(q, k))
    }

    /// The `n` best-scoring non-relevant articles. When fewer than `n`
    /// articles match, the rest is filled with seeded random non-relevant
    /// articles.
    pub fn mine_negatives(&self, query: &[u32], relevant: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
        let relevant: HashSet<usize> = relevant.iter().copied().collect();
        if self.num_docs() < relevant.len() + n {
            return Err(Error::InvalidData(format!(
                "cannot mine {n} negatives from {} articles with {} relevant",
                self.num_docs(),
                relevant.len()
            )));
        }
        let mut out: Vec<usize> = self
            .search_all(query)
            .into_iter()
            .map(|(d, _)| d)
            .filter(|d| !relevant.contains(d))
            .take(n)
            .collect();
        if out.len() < n {
            let taken: HashSet<usize> = out.iter().copied().collect();
            let mut pool: Vec<usize> = (0..self.num_docs())
                .filter(|d| !relevant.contains(d) && !taken.contains(d))
                .collect();
            pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            out.extend(pool.into_iter().take(n - out.len()));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path, corpus: &Corpus) -> Result<Self> {
        let index: InvertedIndex = serde_json::from_slice(&std::fs::read(path)?)?;
        if index.version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported index version {}", index.version)));
        }
        if index.vocab_size != corpus.vocab.len() || index.num_docs() != corpus.len() {
            return Err(Error::Format("index snapshot does not match the corpus".into()));
        }
        Ok(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, ArticleRecord};

    fn corpus(texts: &[&str]) -> Corpus {
        let recs = texts
            .iter()
            .enumerate()
            .map(|(i, t)| ArticleRecord {
                id: format!("d{i:02}"),
                text: t.to_string(),
                book: None,
                title: None,
                chapter: None,
                section: None,
            })
            .collect();
        build_corpus(recs, vec![]).unwrap().0
    }

    #[test]
    fn counting() {
        let c = corpus(&["a b a", "b c"]);
        let idx = InvertedIndex::build(&c, Bm25Params::default()).unwrap();
        let tok = |w| c.vocab.get(w).unwrap();
        assert_eq!(idx.doc_freq(tok("a")), 1);
        assert_eq!(idx.doc_freq(tok("b")), 2);
        assert_eq!(idx.term_freq(tok("a"), 0), 2);
        for d in 0..2 {
            let total: u32 = (0..c.vocab.len() as u32).map(|t| idx.term_freq(t, d)).sum();
            assert_eq!(total, idx.doc_len(d));
        }
    }

    #[test]
    fn empty_corpus() {
        let c = corpus(&[]);
        let idx = InvertedIndex::build(&c, Bm25Params::default()).unwrap();
        assert!(idx.search_topk(&[2, 3], 10).is_empty());
    }

    #[test]
    fn single_document_hand_value() {
        let c = corpus(&["a"]);
        let idx = InvertedIndex::build(&c, Bm25Params::default()).unwrap();
        let s = idx.score(&c.vocab.tokenize("a"), 0).unwrap();
        assert!((s - (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((s - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn absent_token_contributes_nothing() {
        let c = corpus(&["a b", "c"]);
        let idx = InvertedIndex::build(&c, Bm25Params::default()).unwrap();
        let q = c.vocab.tokenize("c");
        assert_eq!(idx.score(&q, 0).unwrap(), 0.0);
        assert!(idx.score(&q, 5).is_err());
    }

    #[test]
    fn no_match_and_oversized_k() {
        let c = corpus(&["a b", "a c", "a"]);
        let idx = InvertedIndex::build(&c, Bm25Params::default()).unwrap();
        assert!(idx.search_topk(&c.vocab.tokenize("zzz"), 5).is_empty());
        assert_eq!(idx.search_topk(&c.vocab.tokenize("a"), 50).len(), 3);
    }

    #[test]
    fn rebuild_is_identical() {
        let c = corpus(&["x y z", "y y", "z q"]);
        let a = InvertedIndex::build(&c, Bm25Params::default()).unwrap();
        let b = InvertedIndex::build(&c, Bm25Params::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negatives_skip_relevant_and_fill() {
        let c = corpus(&["a a b", "a c", "a", "d", "e", "f"]);
        let idx = InvertedIndex::build(&c, Bm25Params::default()).unwrap();
        let q = c.vocab.tokenize("a");
        let top = idx.search_topk(&q, 1)[0].0;
        let negs = idx.mine_negatives(&q, &[top], 2, 0).unwrap();
        assert_eq!(negs, idx.search_topk(&q, 3)[1..].iter().map(|h| h.0).collect::<Vec<_>>());

        let none = c.vocab.tokenize("zzz");
        let x = idx.mine_negatives(&none, &[0], 3, 9).unwrap();
        let y = idx.mine_negatives(&none, &[0], 3, 9).unwrap();
        assert_eq!(x, y);
        assert!(!x.contains(&0));
        assert!(idx.mine_negatives(&q, &[0, 1], 5, 0).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let c = corpus(&["a"]);
        assert!(InvertedIndex::build(&c, Bm25Params { k1: 0.0, b: 0.5 }).is_err());
        assert!(InvertedIndex::build(&c, Bm25Params { k1: 1.0, b: 1.5 }).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let c = corpus(&["a b", "b c d"]);
        let idx = InvertedIndex::build(&c, Bm25Params::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bm25.json");
        idx.save(&path).unwrap();
        assert_eq!(InvertedIndex::load(&path, &c).unwrap(), idx);
    }
}
