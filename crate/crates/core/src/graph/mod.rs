//! Heterogeneous query-article graph joined with the statute hierarchy, and
//! the edge-typed multi-head graph attention network that runs over it.
//!
//! Training queries are linked to their relevant articles; articles hang off
//! their innermost structural unit, and units off their parents. Edges are
//! undirected and typed; every node also attends to itself through a
//! dedicated self edge type.

mod gat;

pub use gat::{GatConfig, GatOutput, GraphEncoder, GAT_PREFIX};

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{write_jsonl, Dataset, Level};
use crate::encoder::BiEncoder;
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Query,
    Article,
    Section,
    Chapter,
    Title,
    Book,
}

impl From<Level> for NodeType {
    fn from(level: Level) -> Self {
        match level {
            Level::Book => NodeType::Book,
            Level::Title => NodeType::Title,
            Level::Chapter => NodeType::Chapter,
            Level::Section => NodeType::Section,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeType {
    QueryArticle,
    SectionArticle,
    ChapterSection,
    TitleChapter,
    BookTitle,
    #[serde(rename = "self")]
    SelfLoop,
}

impl EdgeType {
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    /// Hierarchy edge type, named after the level of the child end.
    fn for_child(child: NodeType) -> EdgeType {
        match child {
            NodeType::Article => EdgeType::SectionArticle,
            NodeType::Section => EdgeType::ChapterSection,
            NodeType::Chapter => EdgeType::TitleChapter,
            NodeType::Title => EdgeType::BookTitle,
            NodeType::Query | NodeType::Book => unreachable!("no parent edge for {child:?}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMode {
    #[default]
    Both,
    BipartiteOnly,
    StatuteOnly,
    None,
}

impl FromStr for GraphMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(GraphMode::Both),
            "bipartite-only" => Ok(GraphMode::BipartiteOnly),
            "statute-only" => Ok(GraphMode::StatuteOnly),
            "none" => Ok(GraphMode::None),
            other => Err(Error::Config(format!(
                "unknown graph mode `{other}` (expected both, bipartite-only, statute-only or none)"
            ))),
        }
    }
}

impl std::fmt::Display for GraphMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GraphMode::Both => "both",
            GraphMode::BipartiteOnly => "bipartite-only",
            GraphMode::StatuteOnly => "statute-only",
            GraphMode::None => "none",
        })
    }
}

/// What a node stands for in the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeSource {
    Query(usize),
    Article(usize),
    Unit(usize),
    /// Hand-built graphs in tests.
    Free,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: String,
    pub kind: NodeType,
    pub source: NodeSource,
}

/// Flattened attention support: for every center node, first the self
/// pair, then its neighbors in ascending node order.
#[derive(Clone, Debug, PartialEq)]
pub struct Pairs {
    pub nodes: usize,
    pub centers: Vec<usize>,
    pub others: Vec<usize>,
    pub types: Vec<usize>,
}

impl Pairs {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    fn from_adjacency(adjacency: &[Vec<(usize, EdgeType)>]) -> Pairs {
        let mut p = Pairs {
            nodes: adjacency.len(),
            centers: Vec::new(),
            others: Vec::new(),
            types: Vec::new(),
        };
        for (i, nbrs) in adjacency.iter().enumerate() {
            p.centers.push(i);
            p.others.push(i);
            p.types.push(EdgeType::SelfLoop.index());
            for &(j, t) in nbrs {
                p.centers.push(i);
                p.others.push(j);
                p.types.push(t.index());
            }
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    pub mode: GraphMode,
    nodes: Vec<Node>,
    edges: Vec<(usize, usize, EdgeType)>,
    adjacency: Vec<Vec<(usize, EdgeType)>>,
    by_id: HashMap<String, usize>,
}

impl HeteroGraph {
    /// Builds a graph from explicit node and edge lists. Edges are
    /// undirected; duplicates and self edges are rejected.
    pub fn new(mode: GraphMode, nodes: Vec<Node>, edges: Vec<(usize, usize, EdgeType)>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if by_id.insert(n.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(n.id.clone()));
            }
        }
        let mut adjacency = vec![Vec::new(); nodes.len()];
        let mut seen = BTreeSet::new();
        for &(a, b, t) in &edges {
            if a >= nodes.len() || b >= nodes.len() {
                return Err(Error::InvalidData(format!("edge ({a}, {b}) outside {} nodes", nodes.len())));
            }
            if a == b || t == EdgeType::SelfLoop {
                return Err(Error::InvalidData(format!("explicit self edge at node {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::InvalidData(format!("duplicate edge ({a}, {b})")));
            }
            adjacency[a].push((b, t));
            adjacency[b].push((a, t));
        }
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
        }
        Ok(HeteroGraph {
            mode,
            nodes,
            edges,
            adjacency,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize, EdgeType)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, EdgeType)] {
        &self.adjacency[node]
    }

    pub fn node_index(&self, id: &str) -> Result<usize> {
        self.by_id.get(id).copied().ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn query_node(&self, dataset: &Dataset, query: usize) -> Result<usize> {
        self.node_index(&query_node_id(&dataset.queries[query].id))
    }

    pub fn article_node(&self, dataset: &Dataset, article: usize) -> Result<usize> {
        self.node_index(&article_node_id(&dataset.corpus.articles[article].id))
    }

    pub fn edge_histogram(&self) -> [usize; EdgeType::COUNT] {
        let mut h = [0; EdgeType::COUNT];
        for e in &self.edges {
            h[e.2.index()] += 1;
        }
        h
    }

    pub fn pairs(&self) -> Pairs {
        Pairs::from_adjacency(&self.adjacency)
    }

    /// Nodes within `hops` of the seeds with their induced edges. Local node
    /// order follows global order, so the attention support of every node
    /// appears in the same order as in the full graph.
    pub fn sample_subgraph(&self, seeds: &[usize], hops: usize) -> Result<SubgraphBatch> {
        let mut dist = vec![usize::MAX; self.len()];
        let mut queue = VecDeque::new();
        for &s in seeds {
            if s >= self.len() {
                return Err(Error::UnknownNode(format!("#{s}")));
            }
            if dist[s] == usize::MAX {
                dist[s] = 0;
                queue.push_back(s);
            }
        }
        while let Some(u) = queue.pop_front() {
            if dist[u] == hops {
                continue;
            }
            for &(v, _) in &self.adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        let nodes: Vec<usize> = (0..self.len()).filter(|&i| dist[i] != usize::MAX).collect();
        let mut local = vec![usize::MAX; self.len()];
        for (l, &g) in nodes.iter().enumerate() {
            local[g] = l;
        }
        let adjacency: Vec<Vec<(usize, EdgeType)>> = nodes
            .iter()
            .map(|&g| {
                self.adjacency[g]
                    .iter()
                    .filter(|(v, _)| local[*v] != usize::MAX)
                    .map(|&(v, t)| (local[v], t))
                    .collect()
            })
            .collect();
        Ok(SubgraphBatch {
            pairs: Pairs::from_adjacency(&adjacency),
            seeds: seeds.iter().map(|&s| local[s]).collect(),
            nodes,
        })
    }

    /// Line-delimited node and edge records.
    pub fn export(&self, nodes_path: &Path, edges_path: &Path) -> Result<()> {
        let nodes: Vec<NodeRecord> = self
            .nodes
            .iter()
            .map(|n| NodeRecord {
                id: n.id.clone(),
                kind: n.kind,
            })
            .collect();
        let edges: Vec<EdgeRecord> = self
            .edges
            .iter()
            .map(|&(a, b, t)| EdgeRecord {
                src: self.nodes[a].id.clone(),
                dst: self.nodes[b].id.clone(),
                kind: t,
            })
            .collect();
        write_jsonl(nodes_path, &nodes)?;
        write_jsonl(edges_path, &edges)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: NodeType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub src: String,
    pub dst: String,
    #[serde(rename = "type")]
    pub kind: EdgeType,
}

/// Induced L-hop neighbourhood of a set of seed nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphBatch {
    /// Global node indices, ascending.
    pub nodes: Vec<usize>,
    /// Local index of every seed, in the order given.
    pub seeds: Vec<usize>,
    pub pairs: Pairs,
}

pub fn query_node_id(id: &str) -> String {
    format!("query:{id}")
}

pub fn article_node_id(id: &str) -> String {
    format!("article:{id}")
}

pub fn unit_node_id(key: &str) -> String {
    format!("unit:{key}")
}

/// Graph over the whole corpus and the given training queries. Articles are
/// always present; queries join in `Both` and `BipartiteOnly`, structural
/// units in `Both` and `StatuteOnly`.
pub fn build_graph(dataset: &Dataset, train: &[usize], mode: GraphMode) -> Result<HeteroGraph> {
    if mode == GraphMode::None {
        return Err(Error::Config("graph mode `none` has no graph to build".into()));
    }
    let corpus = &dataset.corpus;
    let with_queries = matches!(mode, GraphMode::Both | GraphMode::BipartiteOnly);
    let with_units = matches!(mode, GraphMode::Both | GraphMode::StatuteOnly);
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let article_base = nodes.len();
    for (i, a) in corpus.articles.iter().enumerate() {
        nodes.push(Node {
            id: article_node_id(&a.id),
            kind: NodeType::Article,
            source: NodeSource::Article(i),
        });
    }
    if with_units {
        let unit_base = nodes.len();
        for (u, unit) in corpus.units.iter().enumerate() {
            let kind = NodeType::from(unit.level);
            nodes.push(Node {
                id: unit_node_id(&unit.key),
                kind,
                source: NodeSource::Unit(u),
            });
            if let Some(p) = unit.parent {
                edges.push((unit_base + p, unit_base + u, EdgeType::for_child(kind)));
            }
        }
        for (i, a) in corpus.articles.iter().enumerate() {
            if let Some(u) = a.unit {
                edges.push((unit_base + u, article_base + i, EdgeType::SectionArticle));
            }
        }
    }
    if with_queries {
        for &q in train {
            let query = dataset
                .queries
                .get(q)
                .ok_or_else(|| Error::InvalidData(format!("training query index {q} out of range")))?;
            if query.relevant.is_empty() {
                return Err(Error::InvalidData(format!("query `{}` has no relevant articles", query.id)));
            }
            let node = nodes.len();
            nodes.push(Node {
                id: query_node_id(&query.id),
                kind: NodeType::Query,
                source: NodeSource::Query(q),
            });
            for &a in &query.relevant {
                edges.push((node, article_base + a, EdgeType::QueryArticle));
            }
        }
    }
    HeteroGraph::new(mode, nodes, edges)
}

/// Initial node features from the eval-mode bi-encoder: queries through the
/// query encoder, articles and structural-unit headings through the article
/// encoder.
pub fn init_node_features(graph: &HeteroGraph, encoder: &BiEncoder, dataset: &Dataset, exec: Exec) -> Result<Tensor> {
    let mut query_rows = Vec::new();
    let mut query_tokens: Vec<&[u32]> = Vec::new();
    let mut article_rows = Vec::new();
    let mut article_tokens: Vec<&[u32]> = Vec::new();
    for (i, n) in graph.nodes.iter().enumerate() {
        match n.source {
            NodeSource::Query(q) => {
                query_rows.push(i);
                query_tokens.push(&dataset.queries[q].tokens);
            }
            NodeSource::Article(a) => {
                article_rows.push(i);
                article_tokens.push(&dataset.corpus.articles[a].tokens);
            }
            NodeSource::Unit(u) => {
                article_rows.push(i);
                article_tokens.push(&dataset.corpus.units[u].tokens);
            }
            NodeSource::Free => {
                return Err(Error::InvalidData(format!("node `{}` has no source text", n.id)));
            }
        }
    }
    let d = encoder.dim();
    let mut out = Tensor::zeros(graph.len(), d);
    let q = encoder.encode_queries_eval(&query_tokens, exec)?;
    let a = encoder.encode_articles_eval(&article_tokens, exec)?;
    for (rows, src) in [(&query_rows, &q), (&article_rows, &a)] {
        for (k, &r) in rows.iter().enumerate() {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(src.row(k));
        }
    }
    Ok(out)
}
