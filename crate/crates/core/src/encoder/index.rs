use std::fmt::Write as _;
use std::path::Path;

use super::BiEncoder;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::sparse::{sort_hits, Hit};
use crate::tensor::Tensor;

/// Article vectors in corpus order, searched exhaustively by dot product.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseIndex {
    ids: Vec<String>,
    vectors: Tensor,
}

impl DenseIndex {
    pub fn from_vectors(ids: Vec<String>, vectors: Tensor) -> Result<Self> {
        if ids.len() != vectors.rows() {
            return Err(Error::shape(
                "dense_index",
                format!("{} ids for {} vectors", ids.len(), vectors.rows()),
            ));
        }
        Ok(DenseIndex { ids, vectors })
    }

    pub fn build(encoder: &BiEncoder, corpus: &Corpus, exec: Exec) -> Result<Self> {
        let tokens: Vec<&[u32]> = corpus.articles.iter().map(|a| a.tokens.as_slice()).collect();
        let vectors = encoder.encode_articles_eval(&tokens, exec)?;
        let ids = corpus.articles.iter().map(|a| a.id.clone()).collect();
        DenseIndex::from_vectors(ids, vectors)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn vector(&self, doc: usize) -> &[f64] {
        self.vectors.row(doc)
    }

    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::shape("dense_search", format!("query dim {} vs index dim {}", query.len(), self.dim())));
        }
        Ok((0..self.len())
            .map(|d| self.vector(d).iter().zip(query).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Top `k` by score, ties broken by ascending corpus position (id order).
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        let mut hits: Vec<Hit> = self.scores(query)?.into_iter().enumerate().collect();
        sort_hits(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    /// Tab-separated text: a header line with the dimension and row count,
    /// then one `id<TAB>v1 v2 ...` line per article in index order.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# dim={} rows={}\n", self.dim(), self.len());
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            out.push('\t');
            for (j, v) in self.vector(i).iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                write!(out, "{v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty embedding file".into()))?;
        let field = |key: &str| -> Result<usize> {
            header
                .split_whitespace()
                .find_map(|t| t.strip_prefix(key))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("embedding header lacks `{key}`")))
        };
        let dim = field("dim=")?;
        let rows = field("rows=")?;
        let mut ids = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * dim);
        for (n, line) in lines.enumerate() {
            let (id, values) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("embedding line {} has no tab", n + 2)))?;
            let before = data.len();
            for v in values.split(' ') {
                data.push(
                    v.parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad value `{v}` on line {}", n + 2)))?,
                );
            }
            if data.len() - before != dim {
                return Err(Error::Format(format!("line {} has {} values, expected {dim}", n + 2, data.len() - before)));
            }
            ids.push(id.to_string());
        }
        if ids.len() != rows {
            return Err(Error::Format(format!("expected {rows} rows, found {}", ids.len())));
        }
        let vectors = if rows == 0 { Tensor::zeros(0, dim) } else { Tensor::new(rows, dim, data)? };
        DenseIndex::from_vectors(ids, vectors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    /// Loads an index and checks that its id order matches `corpus`.
    pub fn load(path: &Path, corpus: &Corpus) -> Result<Self> {
        let index = DenseIndex::from_tsv(&std::fs::read_to_string(path)?)?;
        let matches = index.len() == corpus.len() && index.ids.iter().zip(&corpus.articles).all(|(i, a)| *i == a.id);
        if !matches {
            return Err(Error::Format(format!("{} does not match the corpus article order", path.display())));
        }
        Ok(index)
    }
}

/// Query bi-encoder paired with an article index: the stage-1 retriever, or
/// the distilled query encoder over graph article embeddings.
#[derive(Clone, Debug)]
pub struct DenseRetriever {
    pub encoder: BiEncoder,
    pub index: DenseIndex,
}

impl DenseRetriever {
    pub fn rank(&self, query: &[u32], k: usize) -> Result<Vec<Hit>> {
        let q = self.encoder.encode_query(query)?;
        self.index.search(&q, k)
    }

    pub fn rank_batch(&self, queries: &[&[u32]], k: usize, exec: Exec) -> Result<Vec<Vec<Hit>>> {
        let q = self.encoder.encode_queries_eval(queries, exec)?;
        exec.map_range(queries.len(), |i| self.index.search(q.row(i), k))
            .into_iter()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index() -> DenseIndex {
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![1.0, 0.0], vec![-1.0, 2.0]]).unwrap();
        DenseIndex::from_vectors(vec!["a".into(), "b".into(), "c".into(), "d".into()], v).unwrap()
    }

    #[test]
    fn search_orders_and_breaks_ties_by_position() {
        let hits = index().search(&[1.0, 0.0], 4).unwrap();
        let order: Vec<usize> = hits.iter().map(|h| h.0).collect();
        assert_eq!(order, vec![0, 2, 1, 3]);
        assert_eq!(index().search(&[1.0, 0.0], 2).unwrap().len(), 2);
        assert!(index().search(&[1.0], 2).is_err());
    }

    #[test]
    fn tsv_round_trip_is_exact() {
        let v = Tensor::from_rows(&[vec![0.1 + 0.2, -1e-300], vec![std::f64::consts::PI, 7.0]]).unwrap();
        let idx = DenseIndex::from_vectors(vec!["x1".into(), "x2".into()], v).unwrap();
        let text = idx.to_tsv();
        assert!(text.starts_with("# dim=2 rows=2\n"));
        assert_eq!(DenseIndex::from_tsv(&text).unwrap(), idx);
    }

    #[test]
    fn malformed_tsv_rejected() {
        assert!(DenseIndex::from_tsv("").is_err());
        assert!(DenseIndex::from_tsv("# dim=2 rows=1\na\t1.0\n").is_err());
        assert!(DenseIndex::from_tsv("# dim=1 rows=2\na\t1.0\n").is_err());
    }
}
