use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EdgeType, Pairs};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const GAT_PREFIX: &str = "gat.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    /// Slope of the LeakyReLU inside the attention logits.
    pub attention_slope: f64,
    /// Slope of the LeakyReLU applied to each head's aggregate.
    pub activation_slope: f64,
    pub residual: bool,
    /// Multiplier on the initial source/target transforms; small values
    /// start the network close to the identity map.
    pub init_scale: f64,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            layers: 2,
            heads: 4,
            dim: 64,
            attention_slope: 0.2,
            activation_slope: 0.2,
            residual: true,
            init_scale: 0.1,
        }
    }
}

impl GatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "graph dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Result of a forward pass: final projected features, each layer's
/// output, and attention weights per layer and head (one entry per pair).
pub struct GatOutput {
    pub nodes: Var,
    pub layers: Vec<Var>,
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEncoder {
    pub config: GatConfig,
    pub params: ParamStore,
}

fn scaled(mut t: Tensor, factor: f64) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v *= factor);
    t
}

impl GraphEncoder {
    pub fn new(config: GatConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let hd = config.head_dim();
        let mut params = ParamStore::new();
        params.insert(
            "gat.edge_emb",
            Tensor::uniform(EdgeType::COUNT, d, 1.0 / (d as f64).sqrt(), &mut rng),
        );
        for l in 0..config.layers {
            params.insert(format!("gat.l{l}.ws"), scaled(Tensor::xavier(d, d, &mut rng), config.init_scale));
            params.insert(format!("gat.l{l}.wt"), scaled(Tensor::xavier(d, d, &mut rng), config.init_scale));
            params.insert(format!("gat.l{l}.we"), Tensor::xavier(d, d, &mut rng));
            params.insert(format!("gat.l{l}.a"), Tensor::xavier(3 * hd, config.heads, &mut rng));
        }
        params.insert("gat.out", Tensor::identity(d));
        Ok(GraphEncoder { config, params })
    }

    pub fn from_params(config: GatConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        if !params.contains("gat.out") {
            return Err(Error::Format("checkpoint lacks graph parameters".into()));
        }
        Ok(GraphEncoder { config, params })
    }

    /// One attention layer over the pair list; returns the updated node
    /// features and the per-head attention weights.
    pub fn layer(&self, tape: &mut Tape, l: usize, pairs: &Pairs, x: Var) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.config;
        let hd = cfg.head_dim();
        let n = pairs.nodes;
        if tape.shape(x) != [n, cfg.dim] {
            return Err(Error::shape(
                "gat_layer",
                format!("features {:?} for {n} nodes of dim {}", tape.shape(x), cfg.dim),
            ));
        }
        let ws = tape.param(&self.params, &format!("gat.l{l}.ws"))?;
        let wt = tape.param(&self.params, &format!("gat.l{l}.wt"))?;
        let we = tape.param(&self.params, &format!("gat.l{l}.we"))?;
        let a = tape.param(&self.params, &format!("gat.l{l}.a"))?;
        let emb = tape.param(&self.params, "gat.edge_emb")?;
        let xs = tape.matmul(x, ws)?;
        let xt = tape.matmul(x, wt)?;
        let ee = tape.matmul(emb, we)?;
        let sg = tape.gather_rows(xs, pairs.centers.clone())?;
        let tg = tape.gather_rows(xt, pairs.others.clone())?;
        let eg = tape.gather_rows(ee, pairs.types.clone())?;
        let both = tape.concat_rows(&[xs, xt])?;
        let value_rows = pairs
            .centers
            .iter()
            .zip(&pairs.others)
            .map(|(&i, &j)| if i == j { i } else { n + j })
            .collect();
        let vg = tape.gather_rows(both, value_rows)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut alphas = Vec::with_capacity(cfg.heads);
        for k in 0..cfg.heads {
            let parts = [
                tape.slice_cols(sg, k * hd, hd)?,
                tape.slice_cols(tg, k * hd, hd)?,
                tape.slice_cols(eg, k * hd, hd)?,
            ];
            let z = tape.concat_cols(&parts)?;
            let z = tape.leaky_relu(z, cfg.attention_slope);
            let ak = tape.slice_cols(a, k, 1)?;
            let logits = tape.matmul(z, ak)?;
            let alpha = tape.segment_softmax(logits, pairs.centers.clone())?;
            let v = tape.slice_cols(vg, k * hd, hd)?;
            let msg = tape.scale_rows(v, alpha)?;
            let agg = tape.segment_sum(msg, pairs.centers.clone(), n)?;
            heads.push(tape.leaky_relu(agg, cfg.activation_slope));
            alphas.push(alpha);
        }
        let h = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let out = if cfg.residual { tape.add(x, h)? } else { h };
        Ok((out, alphas))
    }

    pub fn forward(&self, tape: &mut Tape, pairs: &Pairs, x: Var) -> Result<GatOutput> {
        let mut h = x;
        let mut layers = Vec::with_capacity(self.config.layers);
        let mut attention = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (next, alpha) = self.layer(tape, l, pairs, h)?;
            h = next;
            layers.push(h);
            attention.push(alpha);
        }
        let proj = tape.param(&self.params, "gat.out")?;
        let nodes = tape.matmul(h, proj)?;
        Ok(GatOutput {
            nodes,
            layers,
            attention,
        })
    }

    /// Readouts for every node of `pairs` given constant input features.
    pub fn forward_eval(&self, pairs: &Pairs, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let out = self.forward(&mut tape, pairs, x)?;
        Ok(tape.value(out.nodes).clone())
    }
}
