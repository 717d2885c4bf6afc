//! Run directories: the exact configuration, a manifest and the artifacts
//! of one experiment.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sar_core::corpus::Dataset;
use sar_core::encoder::{BiEncoder, DenseIndex, DenseRetriever, EncoderConfig};
use sar_core::eval::Retriever;
use sar_core::sparse::InvertedIndex;
use sar_core::tensor::ParamStore;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ENCODER_FILE: &str = "encoder.bin";
pub const GAT_FILE: &str = "gat.bin";
pub const EMBEDDINGS_FILE: &str = "article_embeddings.tsv";
pub const CURVE_FILE: &str = "loss_curve.jsonl";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const BM25_FILE: &str = "bm25_index.json";
pub const NODES_FILE: &str = "graph_nodes.jsonl";
pub const EDGES_FILE: &str = "graph_edges.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Bm25,
    Stage1,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: RunKind,
    /// Configuration name used in reports.
    pub configuration: String,
    pub seed: u64,
    /// Encoder configuration as trained (differs from the requested one in
    /// flat mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
    /// Stage-1 run this run started from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<PathBuf>,
    /// 1-based epoch whose parameters were kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub validation_recall: Vec<f64>,
    #[serde(default)]
    pub truncated_articles: usize,
    #[serde(default)]
    pub clamped_probabilities: usize,
    pub files: Vec<String>,
}

pub struct Run {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub manifest: Manifest,
}

impl Run {
    pub fn open(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            bail!(sar_core::Error::InvalidData(format!("run directory {} does not exist", dir.display())));
        }
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path)
            .with_context(|| format!("{} is not a run directory", dir.display()))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(sar_core::Error::from)?;
        let config = ExperimentConfig::load(Some(&dir.join(CONFIG_FILE)), &[])?;
        for f in &manifest.files {
            if !dir.join(f).is_file() {
                bail!(sar_core::Error::InvalidData(format!("run {} lacks {f}", dir.display())));
            }
        }
        Ok(Run {
            dir: dir.to_path_buf(),
            config,
            manifest,
        })
    }

    pub fn dataset(&self) -> Result<Dataset> {
        load_dataset(&self.config.data)
    }

    pub fn encoder(&self) -> Result<BiEncoder> {
        let config = self
            .manifest
            .encoder
            .clone()
            .ok_or_else(|| sar_core::Error::InvalidData(format!("run {} has no encoder", self.dir.display())))?;
        let params = ParamStore::load(&self.dir.join(ENCODER_FILE))?;
        Ok(BiEncoder::from_params(config, params)?)
    }

    /// The retriever this run evaluates with.
    pub fn retriever(&self, dataset: &Dataset) -> Result<Box<dyn Retriever>> {
        Ok(match self.manifest.kind {
            RunKind::Bm25 => Box::new(InvertedIndex::load(&self.dir.join(BM25_FILE), &dataset.corpus)?),
            RunKind::Stage1 | RunKind::Stage2 => Box::new(self.dense(dataset)?),
        })
    }

    pub fn dense(&self, dataset: &Dataset) -> Result<DenseRetriever> {
        Ok(DenseRetriever {
            encoder: self.encoder()?,
            index: DenseIndex::load(&self.dir.join(EMBEDDINGS_FILE), &dataset.corpus)?,
        })
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load_dir(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

/// Creates the directory and writes the configuration.
pub fn create(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(CONFIG_FILE), config.to_toml()?)?;
    Ok(())
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    Ok(sar_core::corpus::write_jsonl(path, records)?)
}
