//! Statutes, queries, the statute hierarchy, and their on-disk record format.

mod synthetic;
mod vocab;

pub use synthetic::{generate_synthetic, SyntheticSpec, SyntheticTruth};
pub use vocab::{split_words, Vocabulary, CLS, CLS_TOKEN, UNK, UNK_TOKEN};

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARTICLES_FILE: &str = "articles.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const SPLIT_FILE: &str = "split.json";

/// Levels of the statute hierarchy, outermost first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Book,
    Title,
    Chapter,
    Section,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Book, Level::Title, Level::Chapter, Level::Section];

    pub fn name(self) -> &'static str {
        match self {
            Level::Book => "book",
            Level::Title => "title",
            Level::Chapter => "chapter",
            Level::Section => "section",
        }
    }
}

/// Position of an article in the hierarchy. Any level may be absent.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HierarchyPath {
    pub book: Option<String>,
    pub title: Option<String>,
    pub chapter: Option<String>,
    pub section: Option<String>,
}

impl HierarchyPath {
    pub fn get(&self, level: Level) -> Option<&str> {
        match level {
            Level::Book => self.book.as_deref(),
            Level::Title => self.title.as_deref(),
            Level::Chapter => self.chapter.as_deref(),
            Level::Section => self.section.as_deref(),
        }
    }

    /// Present levels, outermost first.
    pub fn levels(&self) -> impl Iterator<Item = (Level, &str)> {
        Level::ALL
            .into_iter()
            .filter_map(move |l| self.get(l).map(|s| (l, s)))
    }
}

/// A book, title, chapter or section.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralUnit {
    /// Path-qualified key, unique in the corpus.
    pub key: String,
    pub level: Level,
    /// Heading text as given in the records.
    pub label: String,
    pub parent: Option<usize>,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Article {
    pub id: String,
    pub text: String,
    pub tokens: Vec<u32>,
    pub path: HierarchyPath,
    /// Innermost structural unit containing the article.
    pub unit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub tokens: Vec<u32>,
    /// Indices of relevant articles, ascending and non-empty.
    pub relevant: Vec<usize>,
}

impl Query {
    pub fn relevant_set(&self) -> HashSet<usize> {
        self.relevant.iter().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub articles: Vec<Article>,
    pub units: Vec<StructuralUnit>,
    pub vocab: Vocabulary,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn article_index(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn max_article_len(&self) -> usize {
        self.articles.iter().map(|a| a.tokens.len()).max().unwrap_or(0)
    }
}

/// Query indices for each split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" | "val" | "dev" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, validation or test)"
            ))),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    pub split: DatasetSplit,
}

/// Record identifiers may be strings or integers in the source files.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
enum RecordId {
    Text(String),
    Number(u64),
}

impl From<RecordId> for String {
    fn from(id: RecordId) -> String {
        match id {
            RecordId::Text(s) => s,
            RecordId::Number(n) => n.to_string(),
        }
    }
}

fn de_id<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    RecordId::deserialize(d).map(String::from)
}

fn de_ids<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    Vec::<RecordId>::deserialize(d).map(|v| v.into_iter().map(String::from).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArticleRecord {
    #[serde(deserialize_with = "de_id")]
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub book: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chapter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    #[serde(deserialize_with = "de_id")]
    pub id: String,
    pub text: String,
    #[serde(deserialize_with = "de_ids")]
    pub article_ids: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    #[serde(default, deserialize_with = "de_ids")]
    pub train: Vec<String>,
    #[serde(default, deserialize_with = "de_ids")]
    pub validation: Vec<String>,
    #[serde(default, deserialize_with = "de_ids")]
    pub test: Vec<String>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidData(format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads line-delimited article and query records and validates them.
pub fn load_corpus(articles_file: &Path, queries_file: &Path) -> Result<(Corpus, Vec<Query>)> {
    let articles: Vec<ArticleRecord> = read_jsonl(articles_file)?;
    let queries: Vec<QueryRecord> = read_jsonl(queries_file)?;
    build_corpus(articles, queries)
}

/// Splits text into hierarchy keys: each present level contributes one
/// `level=label` segment, so equal labels under different parents stay
/// distinct and the unit graph is a forest.
fn unit_key(path: &HierarchyPath, upto: Level) -> String {
    path.levels()
        .take_while(|(l, _)| *l <= upto)
        .map(|(l, s)| format!("{}={}", l.name(), s))
        .collect::<Vec<_>>()
        .join("/")
}

pub fn build_corpus(articles: Vec<ArticleRecord>, queries: Vec<QueryRecord>) -> Result<(Corpus, Vec<Query>)> {
    let mut seen = HashSet::new();
    for a in &articles {
        if !seen.insert(a.id.as_str()) {
            return Err(Error::DuplicateId(a.id.clone()));
        }
    }
    let mut seen_q = HashSet::new();
    for q in &queries {
        if !seen_q.insert(q.id.as_str()) {
            return Err(Error::DuplicateId(q.id.clone()));
        }
    }
    let mut dangling = BTreeSet::new();
    for q in &queries {
        if q.article_ids.is_empty() {
            return Err(Error::InvalidData(format!("query `{}` has no relevant articles", q.id)));
        }
        for id in &q.article_ids {
            if !seen.contains(id.as_str()) {
                dangling.insert(id.clone());
            }
        }
    }
    if !dangling.is_empty() {
        return Err(Error::DanglingIds(dangling.into_iter().collect()));
    }
    // Articles are held in ascending id order, so ties broken by position
    // are ties broken by id.
    let mut articles = articles;
    articles.sort_by(|a, b| a.id.cmp(&b.id));

    let paths: Vec<HierarchyPath> = articles
        .iter()
        .map(|a| HierarchyPath {
            book: a.book.clone(),
            title: a.title.clone(),
            chapter: a.chapter.clone(),
            section: a.section.clone(),
        })
        .collect();

    let vocab = Vocabulary::build(
        articles
            .iter()
            .map(|a| a.text.as_str())
            .chain(queries.iter().map(|q| q.text.as_str()))
            .chain(paths.iter().flat_map(|p| p.levels().map(|(_, s)| s))),
    );

    let mut units: Vec<StructuralUnit> = Vec::new();
    let mut unit_index: HashMap<String, usize> = HashMap::new();
    let mut innermost = Vec::with_capacity(paths.len());
    for path in &paths {
        let mut parent = None;
        for (level, label) in path.levels() {
            let key = unit_key(path, level);
            let idx = *unit_index.entry(key.clone()).or_insert_with(|| {
                units.push(StructuralUnit {
                    key,
                    level,
                    label: label.to_string(),
                    parent,
                    tokens: vocab.tokenize(label),
                });
                units.len() - 1
            });
            parent = Some(idx);
        }
        innermost.push(parent);
    }

    let by_id: HashMap<String, usize> = articles
        .iter()
        .enumerate()
        .map(|(i, a)| (a.id.clone(), i))
        .collect();
    let articles: Vec<Article> = articles
        .into_iter()
        .zip(paths)
        .zip(innermost)
        .map(|((rec, path), unit)| Article {
            tokens: vocab.tokenize(&rec.text),
            id: rec.id,
            text: rec.text,
            path,
            unit,
        })
        .collect();
    let queries = queries
        .into_iter()
        .map(|q| {
            let mut relevant: Vec<usize> = q.article_ids.iter().map(|id| by_id[id]).collect();
            relevant.sort_unstable();
            relevant.dedup();
            Query {
                tokens: vocab.tokenize(&q.text),
                id: q.id,
                text: q.text,
                relevant,
            }
        })
        .collect();
    Ok((
        Corpus {
            articles,
            units,
            vocab,
            by_id,
        },
        queries,
    ))
}

pub fn resolve_split(queries: &[Query], record: &SplitRecord) -> Result<DatasetSplit> {
    let index: HashMap<&str, usize> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| (q.id.as_str(), i))
        .collect();
    let mut used = HashSet::new();
    let mut resolve = |ids: &[String]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                let i = *index
                    .get(id.as_str())
                    .ok_or_else(|| Error::InvalidData(format!("split names unknown query `{id}`")))?;
                if !used.insert(i) {
                    return Err(Error::InvalidData(format!("query `{id}` appears in more than one split")));
                }
                Ok(i)
            })
            .collect()
    };
    Ok(DatasetSplit {
        train: resolve(&record.train)?,
        validation: resolve(&record.validation)?,
        test: resolve(&record.test)?,
    })
}

/// Splits text into `n`-token chunks, each led by the CLS token. Empty input
/// yields one CLS-only chunk.
pub fn chunk_article(tokens: &[u32], chunk_len: usize) -> Vec<Vec<u32>> {
    assert!(chunk_len >= 1, "chunk_len must be at least 1");
    if tokens.is_empty() {
        return vec![vec![CLS]];
    }
    tokens
        .chunks(chunk_len)
        .map(|c| {
            let mut chunk = Vec::with_capacity(c.len() + 1);
            chunk.push(CLS);
            chunk.extend_from_slice(c);
            chunk
        })
        .collect()
}

impl Dataset {
    pub fn from_records(
        articles: Vec<ArticleRecord>,
        queries: Vec<QueryRecord>,
        split: &SplitRecord,
    ) -> Result<Self> {
        let (corpus, queries) = build_corpus(articles, queries)?;
        let split = resolve_split(&queries, split)?;
        Ok(Dataset {
            corpus,
            queries,
            split,
        })
    }

    /// Loads `articles.jsonl`, `queries.jsonl` and `split.json` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let (corpus, queries) = load_corpus(&dir.join(ARTICLES_FILE), &dir.join(QUERIES_FILE))?;
        let split_path = dir.join(SPLIT_FILE);
        let record: SplitRecord = serde_json::from_reader(BufReader::new(File::open(&split_path)?))
            .map_err(|e| Error::InvalidData(format!("{}: {e}", split_path.display())))?;
        let split = resolve_split(&queries, &record)?;
        Ok(Dataset {
            corpus,
            queries,
            split,
        })
    }

    pub fn article_records(&self) -> Vec<ArticleRecord> {
        self.corpus
            .articles
            .iter()
            .map(|a| ArticleRecord {
                id: a.id.clone(),
                text: a.text.clone(),
                book: a.path.book.clone(),
                title: a.path.title.clone(),
                chapter: a.path.chapter.clone(),
                section: a.path.section.clone(),
            })
            .collect()
    }

    pub fn query_records(&self) -> Vec<QueryRecord> {
        self.queries
            .iter()
            .map(|q| QueryRecord {
                id: q.id.clone(),
                text: q.text.clone(),
                article_ids: q
                    .relevant
                    .iter()
                    .map(|&i| self.corpus.articles[i].id.clone())
                    .collect(),
            })
            .collect()
    }

    pub fn split_record(&self) -> SplitRecord {
        let ids = |v: &[usize]| v.iter().map(|&i| self.queries[i].id.clone()).collect();
        SplitRecord {
            train: ids(&self.split.train),
            validation: ids(&self.split.validation),
            test: ids(&self.split.test),
        }
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(ARTICLES_FILE), &self.article_records())?;
        write_jsonl(&dir.join(QUERIES_FILE), &self.query_records())?;
        let mut split = serde_json::to_string_pretty(&self.split_record())?;
        split.push('\n');
        std::fs::write(dir.join(SPLIT_FILE), split)?;
        Ok(())
    }

    pub fn split_queries(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.split.train,
            SplitName::Validation => &self.split.validation,
            SplitName::Test => &self.split.test,
        }
    }

    /// Stable fingerprint of a split: FNV-1a over the corpus ids and the
    /// split's query ids with their labels.
    pub fn split_digest(&self, name: SplitName) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |s: &str| {
            for b in s.bytes().chain(std::iter::once(0xff)) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for a in &self.corpus.articles {
            feed(&a.id);
        }
        feed(&name.to_string());
        for &q in self.split_queries(name) {
            let q = &self.queries[q];
            feed(&q.id);
            for &r in &q.relevant {
                feed(&self.corpus.articles[r].id);
            }
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn art(id: &str, text: &str) -> ArticleRecord {
        ArticleRecord {
            id: id.into(),
            text: text.into(),
            book: None,
            title: None,
            chapter: None,
            section: None,
        }
    }

    fn query(id: &str, ids: &[&str]) -> QueryRecord {
        QueryRecord {
            id: id.into(),
            text: "bail".into(),
            article_ids: ids.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn direct_load() {
        let (corpus, queries) = build_corpus(
            vec![art("a1", "x"), art("a2", "y"), art("a3", "z")],
            vec![query("q1", &["a1", "a3"])],
        )
        .unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(queries[0].relevant, vec![0, 2]);
    }

    #[test]
    fn dangling_ids_are_all_listed() {
        let err = build_corpus(
            vec![art("a1", "x")],
            vec![query("q1", &["a99"]), query("q2", &["a1", "a7"])],
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a99") && msg.contains("a7"), "{msg}");
    }

    #[test]
    fn duplicate_article_id_rejected() {
        let err = build_corpus(vec![art("a1", "x"), art("a1", "y")], vec![]).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(ref id) if id == "a1"));
    }

    #[test]
    fn missing_levels_are_skipped() {
        let mut a = art("a1", "x");
        a.section = Some("Section 2".into());
        let (corpus, _) = build_corpus(vec![a], vec![]).unwrap();
        let levels: Vec<_> = corpus.articles[0].path.levels().collect();
        assert_eq!(levels, vec![(Level::Section, "Section 2")]);
        assert_eq!(corpus.units.len(), 1);
        assert_eq!(corpus.units[0].parent, None);
    }

    #[test]
    fn same_label_under_different_parents_is_two_units() {
        let mut a = art("a1", "x");
        a.chapter = Some("C1".into());
        a.section = Some("S".into());
        let mut b = art("a2", "y");
        b.chapter = Some("C2".into());
        b.section = Some("S".into());
        let (corpus, _) = build_corpus(vec![a, b], vec![]).unwrap();
        assert_eq!(corpus.units.len(), 4);
        assert_ne!(corpus.articles[0].unit, corpus.articles[1].unit);
    }

    #[test]
    fn numeric_ids_accepted() {
        let a: ArticleRecord = serde_json::from_str(r#"{"id": 12, "text": "loi"}"#).unwrap();
        let q: QueryRecord =
            serde_json::from_str(r#"{"id": 3, "text": "?", "article_ids": [12, "13"]}"#).unwrap();
        assert_eq!(a.id, "12");
        assert_eq!(q.article_ids, vec!["12", "13"]);
    }

    #[test]
    fn chunk_lengths() {
        let tokens: Vec<u32> = (10..20).collect();
        let chunks = chunk_article(&tokens, 4);
        let lens: Vec<_> = chunks.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![5, 5, 3]);
        assert!(chunks.iter().all(|c| c[0] == CLS));
        assert_eq!(chunk_article(&tokens[..3], 8).len(), 1);
        assert_eq!(chunk_article(&[], 8), vec![vec![CLS]]);
    }

    #[test]
    fn split_overlap_rejected() {
        let (_, queries) = build_corpus(vec![art("a1", "x")], vec![query("q1", &["a1"])]).unwrap();
        let rec = SplitRecord {
            train: vec!["q1".into()],
            validation: vec![],
            test: vec!["q1".into()],
        };
        assert!(resolve_split(&queries, &rec).is_err());
    }
}
