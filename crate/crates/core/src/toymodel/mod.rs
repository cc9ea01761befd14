//! Seeded decoder-only transformer used as the pruning testbed.
//!
//! Pre-norm residual blocks:
//!
//! ```text
//! x = x + Wo · Attn(LN(x))
//! x = x + Wdown · gelu(Wup · LN(x))
//! ```
//!
//! LayerNorms carry no affine parameters and no linear map has a bias, so a
//! block whose `Wo` and `Wdown` are zero passes its input through bit for
//! bit ([`Model::neutralize_block`]).
//!
//! Weights come from [`crate::rng::Lcg`] seeded with `config.seed`, drawn in
//! this order, each entry `N(0, std²)` in row-major `out × in` layout:
//!
//! | tensor | shape | std |
//! |---|---|---|
//! | token embedding | vocab × d | 1 |
//! | position embedding | T_max × d | 0.5 |
//! | per block: Wq, Wk, Wv, Wo | d × d | 1/√d |
//! | per block: Wup | 4d × d | 1/√d |
//! | per block: Wdown | d × 4d | 1/√(4d) |
//! | unembedding | vocab × d | 1/√d |

mod capture;
mod probes;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::RealMatrix;
use crate::planner::PrunePlan;
use crate::rng::Lcg;

pub use capture::{capture_run, capture_run_with};
pub use probes::{generate_probes, tokens, ProbeSet, SubtaskProbes};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 12,
            hidden_dim: 64,
            num_heads: 4,
            vocab_size: 64,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 3 {
            return Err(Error::config("num_layers", "must be at least 3"));
        }
        if self.num_heads == 0 {
            return Err(Error::config("num_heads", "must be positive"));
        }
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "hidden_dim",
                format!(
                    "{} is not a positive multiple of num_heads {}",
                    self.hidden_dim, self.num_heads
                ),
            ));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size", "must be positive"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config("max_seq_len", "must be positive"));
        }
        Ok(())
    }

    /// Default protected set: first and last layer.
    pub fn protected_layers(&self) -> BTreeSet<usize> {
        [0, self.num_layers - 1].into()
    }

    pub fn model_id(&self) -> String {
        format!(
            "toy-L{}-d{}-h{}-v{}-t{}-s{}",
            self.num_layers, self.hidden_dim, self.num_heads, self.vocab_size, self.max_seq_len, self.seed
        )
    }
}

/// `out × in` weight, no bias.
#[derive(Debug, Clone)]
struct Linear {
    inputs: usize,
    outputs: usize,
    weight: Vec<f64>,
}

impl Linear {
    fn init(rng: &mut Lcg, outputs: usize, inputs: usize, std: f64) -> Self {
        Self {
            inputs,
            outputs,
            weight: rng.gaussian_vec(outputs * inputs, std),
        }
    }

    /// Applies to each `inputs`-wide row of `x`.
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let rows = x.len() / self.inputs;
        let mut out = Vec::with_capacity(rows * self.outputs);
        for row in x.chunks_exact(self.inputs) {
            for w in self.weight.chunks_exact(self.inputs) {
                out.push(w.iter().zip(row).map(|(a, b)| a * b).sum());
            }
        }
        out
    }

    fn zero(&mut self) {
        self.weight.iter_mut().for_each(|w| *w = 0.0);
    }
}

#[derive(Debug, Clone)]
struct Block {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    up: Linear,
    down: Linear,
}

impl Block {
    fn init(rng: &mut Lcg, d: usize) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Self {
            wq: Linear::init(rng, d, d, s),
            wk: Linear::init(rng, d, d, s),
            wv: Linear::init(rng, d, d, s),
            wo: Linear::init(rng, d, d, s),
            up: Linear::init(rng, 4 * d, d, s),
            down: Linear::init(rng, d, 4 * d, 1.0 / ((4 * d) as f64).sqrt()),
        }
    }

    fn forward(&self, x: &mut [f64], d: usize, heads: usize) {
        let t_len = x.len() / d;
        let normed = layer_norm(x, d);
        let q = self.wq.forward(&normed);
        let k = self.wk.forward(&normed);
        let v = self.wv.forward(&normed);
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut mixed = vec![0.0; t_len * d];
        let mut scores = vec![0.0; t_len];
        for h in 0..heads {
            let off = h * hd;
            for t in 0..t_len {
                let qt = &q[t * d + off..t * d + off + hd];
                let mut max = f64::NEG_INFINITY;
                for (s, sc) in scores.iter_mut().enumerate().take(t + 1) {
                    let ks = &k[s * d + off..s * d + off + hd];
                    *sc = qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(*sc);
                }
                let mut z = 0.0;
                for sc in &mut scores[..=t] {
                    *sc = (*sc - max).exp();
                    z += *sc;
                }
                let dst = &mut mixed[t * d + off..t * d + off + hd];
                for (s, &p) in scores[..=t].iter().enumerate() {
                    let vs = &v[s * d + off..s * d + off + hd];
                    let w = p / z;
                    for (o, &vv) in dst.iter_mut().zip(vs) {
                        *o += w * vv;
                    }
                }
            }
        }
        let attn = self.wo.forward(&mixed);
        for (xi, a) in x.iter_mut().zip(&attn) {
            *xi += a;
        }

        let normed = layer_norm(x, d);
        let mut hidden = self.up.forward(&normed);
        hidden.iter_mut().for_each(|h| *h = gelu(*h));
        let mlp = self.down.forward(&hidden);
        for (xi, m) in x.iter_mut().zip(&mlp) {
            *xi += m;
        }
    }
}

fn layer_norm(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// An immutable, shareable model. Blocks are reference-counted so pruned
/// variants share weights with their parent.
#[derive(Debug, Clone)]
pub struct Model {
    config: ToyModelConfig,
    tok_embed: Arc<Vec<f64>>,
    pos_embed: Arc<Vec<f64>>,
    blocks: Vec<(usize, Arc<Block>)>,
    unembed: Arc<Linear>,
}

/// Logits and final residual stream for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: RealMatrix,
    pub final_hidden: RealMatrix,
}

/// Hidden states around every retained block plus the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureTrace {
    pub layers: Vec<LayerCapture>,
    pub logits: RealMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCapture {
    /// Original layer index.
    pub layer: usize,
    pub input: RealMatrix,
    pub output: RealMatrix,
}

impl Model {
    pub fn build(config: &ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let mut rng = Lcg::new(config.seed);
        let tok_embed = rng.gaussian_vec(config.vocab_size * d, 1.0);
        let pos_embed = rng.gaussian_vec(config.max_seq_len * d, 0.5);
        let blocks = (0..config.num_layers)
            .map(|l| (l, Arc::new(Block::init(&mut rng, d))))
            .collect();
        let unembed = Linear::init(&mut rng, config.vocab_size, d, 1.0 / (d as f64).sqrt());
        Ok(Self {
            config: config.clone(),
            tok_embed: Arc::new(tok_embed),
            pos_embed: Arc::new(pos_embed),
            blocks,
            unembed: Arc::new(unembed),
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    /// Original indices of the blocks still present, in execution order.
    pub fn retained_layers(&self) -> Vec<usize> {
        self.blocks.iter().map(|(l, _)| *l).collect()
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Retained layers outside the default protected set.
    pub fn pruneable_layers(&self) -> BTreeSet<usize> {
        let protected = self.config.protected_layers();
        self.retained_layers()
            .into_iter()
            .filter(|l| !protected.contains(l))
            .collect()
    }

    /// Zeroes the attention output projection and MLP down-projection of
    /// `layer`, turning it into an exact identity on the residual stream.
    pub fn neutralize_block(&mut self, layer: usize) -> Result<()> {
        let slot = self
            .blocks
            .iter_mut()
            .find(|(l, _)| *l == layer)
            .ok_or_else(|| Error::PlanModelMismatch(format!("layer {layer} not present")))?;
        let block = Arc::make_mut(&mut slot.1);
        block.wo.zero();
        block.down.zero();
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let max = self.config.max_seq_len;
        if tokens.is_empty() || tokens.len() > max {
            return Err(Error::SequenceTooLong { len: tokens.len(), max });
        }
        let d = self.config.hidden_dim;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (t, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            if tok >= self.config.vocab_size {
                return Err(Error::schema(
                    None,
                    "tokens",
                    format!("token {tok} outside vocabulary of {}", self.config.vocab_size),
                ));
            }
            let e = &self.tok_embed[tok * d..(tok + 1) * d];
            let p = &self.pos_embed[t * d..(t + 1) * d];
            x.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }
        Ok(x)
    }

    /// Runs the model, calling `hook(layer, input, output)` around each
    /// retained block. Slices are `T × d` row-major.
    pub fn forward_hooked<F>(&self, tokens: &[u32], mut hook: F) -> Result<ForwardOutput>
    where
        F: FnMut(usize, &[f64], &[f64]) -> Result<()>,
    {
        let d = self.config.hidden_dim;
        let mut x = self.embed(tokens)?;
        let mut before = Vec::with_capacity(x.len());
        for (layer, block) in &self.blocks {
            before.clear();
            before.extend_from_slice(&x);
            block.forward(&mut x, d, self.config.num_heads);
            hook(*layer, &before, &x)?;
        }
        let logits = self.unembed.forward(&layer_norm(&x, d));
        let t = tokens.len();
        Ok(ForwardOutput {
            logits: RealMatrix::new(t, self.config.vocab_size, logits)?,
            final_hidden: RealMatrix::new(t, d, x)?,
        })
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardOutput> {
        self.forward_hooked(tokens, |_, _, _| Ok(()))
    }

    pub fn forward_with_hooks(&self, tokens: &[u32]) -> Result<CaptureTrace> {
        let d = self.config.hidden_dim;
        let t = tokens.len();
        let mut layers = Vec::with_capacity(self.blocks.len());
        let out = self.forward_hooked(tokens, |layer, input, output| {
            layers.push(LayerCapture {
                layer,
                input: RealMatrix::new(t, d, input.to_vec())?,
                output: RealMatrix::new(t, d, output.to_vec())?,
            });
            Ok(())
        })?;
        Ok(CaptureTrace {
            layers,
            logits: out.logits,
        })
    }

    /// Drops the plan's layers; remaining blocks keep their order and the
    /// residual stream flows straight across each gap.
    pub fn apply_prune_plan(&self, plan: &PrunePlan) -> Result<Model> {
        if plan.num_layers != self.config.num_layers {
            return Err(Error::PlanModelMismatch(format!(
                "plan is for {} layers, model has {}",
                plan.num_layers, self.config.num_layers
            )));
        }
        let pruneable = self.pruneable_layers();
        for &l in &plan.pruned {
            if plan.protected.contains(&l) || !pruneable.contains(&l) {
                return Err(Error::PlanModelMismatch(format!(
                    "layer {l} is protected, out of range, or already removed"
                )));
            }
        }
        let drop: BTreeSet<usize> = plan.pruned.iter().copied().collect();
        let mut pruned = self.clone();
        pruned.blocks.retain(|(l, _)| !drop.contains(l));
        Ok(pruned)
    }

    /// True when both models share embedding geometry, so their outputs are
    /// comparable position by position.
    pub fn comparable_with(&self, other: &Model) -> bool {
        let (a, b) = (&self.config, &other.config);
        a.vocab_size == b.vocab_size && a.max_seq_len == b.max_seq_len && a.hidden_dim == b.hidden_dim
    }
}
