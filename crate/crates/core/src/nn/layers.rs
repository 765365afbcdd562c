//! Pre-norm Transformer blocks built on [`Graph`] primitives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            dropout: 0.0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 || self.d_model % 2 != 0 {
            return Err(Error::Config(format!("d_model must be even, got {}", self.d_model)));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("layers and d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_xavier(format!("{name}.w"), d_in, d_out, rng),
            b: store.add_const(format!("{name}.b"), 1, d_out, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }

    /// Applies the layer to a constant tensor outside any graph.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add_const(format!("{name}.gain"), 1, d, 1.0),
            bias: store.add_const(format!("{name}.bias"), 1, d, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            heads,
        }
    }

    /// Attention of `x` over already-projected keys and values.
    pub fn attend(&self, g: &mut Graph, x: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let a = g.attention(q, k, v, self.heads, causal)?;
        self.out.forward(g, a)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, source: Var, causal: bool) -> Result<Var> {
        let k = self.k.forward(g, source)?;
        let v = self.v.forward(g, source)?;
        self.attend(g, x, k, v, causal)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, d_ff, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

/// Dropout settings threaded through a forward pass.
pub struct Regularizer<'r, R: Rng> {
    pub p: f64,
    pub rng: &'r mut R,
}

fn residual<R: Rng>(g: &mut Graph, x: Var, y: Var, reg: &mut Option<Regularizer<'_, R>>) -> Result<Var> {
    let y = match reg {
        Some(r) if r.p > 0.0 => g.dropout(y, r.p, r.rng),
        _ => y,
    };
    g.add(x, y)
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ArchConfig, rng: &mut R) -> Self {
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), cfg.d_model),
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), cfg.d_model, cfg.heads, rng),
                    ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), cfg.d_model),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), cfg.d_model, cfg.d_ff, rng),
                }
            })
            .collect();
        Self {
            layers,
            final_ln: LayerNorm::new(store, &format!("{name}.final_ln"), cfg.d_model),
        }
    }

    pub fn forward<R: Rng>(&self, g: &mut Graph, mut x: Var, mut reg: Option<Regularizer<'_, R>>) -> Result<Var> {
        for layer in &self.layers {
            let h = layer.ln_attn.forward(g, x)?;
            let h = layer.attn.forward(g, h, h, false)?;
            x = residual(g, x, h, &mut reg)?;
            let h = layer.ln_ffn.forward(g, x)?;
            let h = layer.ffn.forward(g, h)?;
            x = residual(g, x, h, &mut reg)?;
        }
        self.final_ln.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Per-layer key/value cache for incremental decoding.
#[derive(Clone, Debug, Default)]
pub struct LayerCache {
    self_k: Option<Tensor>,
    self_v: Option<Tensor>,
    mem_k: Option<Tensor>,
    mem_v: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
    final_ln: LayerNorm,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ArchConfig, rng: &mut R) -> Self {
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                DecoderLayer {
                    ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), cfg.d_model),
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), cfg.d_model, cfg.heads, rng),
                    ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), cfg.d_model),
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), cfg.d_model, cfg.heads, rng),
                    ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), cfg.d_model),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), cfg.d_model, cfg.d_ff, rng),
                }
            })
            .collect();
        Self {
            layers,
            final_ln: LayerNorm::new(store, &format!("{name}.final_ln"), cfg.d_model),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn new_cache(&self) -> Vec<LayerCache> {
        vec![LayerCache::default(); self.layers.len()]
    }

    /// Full-sequence pass. `causal` selects left-to-right self-attention.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        mut x: Var,
        memory: Var,
        causal: bool,
        mut reg: Option<Regularizer<'_, R>>,
    ) -> Result<Var> {
        for layer in &self.layers {
            let h = layer.ln_self.forward(g, x)?;
            let h = layer.self_attn.forward(g, h, h, causal)?;
            x = residual(g, x, h, &mut reg)?;
            let h = layer.ln_cross.forward(g, x)?;
            let h = layer.cross_attn.forward(g, h, memory, false)?;
            x = residual(g, x, h, &mut reg)?;
            let h = layer.ln_ffn.forward(g, x)?;
            let h = layer.ffn.forward(g, h)?;
            x = residual(g, x, h, &mut reg)?;
        }
        self.final_ln.forward(g, x)
    }

    /// Causal pass over new rows `x`, attending to everything cached so far.
    ///
    /// `memory` is only read on the first call for a given cache.
    pub fn forward_cached(
        &self,
        g: &mut Graph,
        mut x: Var,
        memory: &Tensor,
        cache: &mut [LayerCache],
    ) -> Result<Var> {
        if cache.len() != self.layers.len() {
            return Err(Error::shape("forward_cached", "cache does not match layer count"));
        }
        let store = g.store();
        for (layer, c) in self.layers.iter().zip(cache.iter_mut()) {
            let h = layer.ln_self.forward(g, x)?;
            let k_new = layer.self_attn.k.forward(g, h)?;
            let v_new = layer.self_attn.v.forward(g, h)?;
            for (slot, new) in [(&mut c.self_k, k_new), (&mut c.self_v, v_new)] {
                match slot {
                    Some(t) => t.push_rows(g.value(new))?,
                    None => *slot = Some(g.value(new).clone()),
                }
            }
            let k = g.input(c.self_k.clone().expect("filled above"));
            let v = g.input(c.self_v.clone().expect("filled above"));
            let h = layer.self_attn.attend(g, h, k, v, true)?;
            x = g.add(x, h)?;

            if c.mem_k.is_none() {
                c.mem_k = Some(layer.cross_attn.k.apply(store, memory)?);
                c.mem_v = Some(layer.cross_attn.v.apply(store, memory)?);
            }
            let h = layer.ln_cross.forward(g, x)?;
            let mk = g.input(c.mem_k.clone().expect("filled above"));
            let mv = g.input(c.mem_v.clone().expect("filled above"));
            let h = layer.cross_attn.attend(g, h, mk, mv, false)?;
            x = g.add(x, h)?;

            let h = layer.ln_ffn.forward(g, x)?;
            let h = layer.ffn.forward(g, h)?;
            x = g.add(x, h)?;
        }
        self.final_ln.forward(g, x)
    }
}

/// Token embeddings scaled by `sqrt(d)` plus constant positional rows.
pub fn embed_tokens(g: &mut Graph, table: ParamId, ids: &[usize], positions: &Tensor) -> Result<Var> {
    let t = g.param(table);
    let d = g.value(t).cols();
    if positions.rows() != ids.len() || positions.cols() != d {
        return Err(Error::shape(
            "embed_tokens",
            format!("{} tokens, positional rows {:?}, d {d}", ids.len(), positions.shape()),
        ));
    }
    let e = g.embedding(t, ids)?;
    let e = g.scale(e, (d as f64).sqrt());
    let p = g.input(positions.clone());
    g.add(e, p)
}
