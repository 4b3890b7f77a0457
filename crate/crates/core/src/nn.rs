//! Transformer building blocks over [`Graph`]. Blocks use pre-layer-norm
//! residual wiring.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Seeded parameter creation with hierarchical names.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    /// Glorot-uniform weights.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::uniform(fan_in, fan_out, a, &mut self.rng);
        self.store.add(name, t)
    }

    /// Embedding table with entries uniform in ±`a`.
    pub fn table(&mut self, name: &str, rows: usize, cols: usize, a: f64) -> ParamId {
        let t = Tensor::uniform(rows, cols, a, &mut self.rng);
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Tensor::filled(rows, cols, v))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = init.weight(&format!("{name}.w"), fan_in, fan_out);
        let b = init.constant(&format!("{name}.b"), 1, fan_out, 0.0);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Self {
        let g = init.constant(&format!("{name}.g"), 1, d, 1.0);
        let b = init.constant(&format!("{name}.b"), 1, d, 0.0);
        Self { g, b }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let gn = g.param(self.g);
        let b = g.param(self.b);
        g.layer_norm(x, gn, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.q"), d, d),
            k: Linear::new(init, &format!("{name}.k"), d, d),
            v: Linear::new(init, &format!("{name}.v"), d, d),
            o: Linear::new(init, &format!("{name}.o"), d, d),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, memory: NodeId, causal: bool) -> NodeId {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let a = g.attention(q, k, v, self.heads, causal);
        self.o.forward(g, a)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, d: usize, hidden: usize) -> Self {
        Self { l1: Linear::new(init, &format!("{name}.l1"), d, hidden), l2: Linear::new(init, &format!("{name}.l2"), hidden, d) }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.l1.forward(g, x);
        let h = g.gelu(h);
        let h = g.dropout(h);
        self.l2.forward(g, h)
    }
}

fn residual(g: &mut Graph, x: NodeId, y: NodeId) -> NodeId {
    let y = g.dropout(y);
    g.add(x, y)
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize, hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d, heads),
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), d),
            ff: FeedForward::new(init, &format!("{name}.ff"), d, hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, false);
        let x = residual(g, x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ff.forward(g, h);
        residual(g, x, f)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize, hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), d),
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self"), d, heads),
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), d),
            cross_attn: MultiHeadAttention::new(init, &format!("{name}.cross"), d, heads),
            ln3: LayerNorm::new(init, &format!("{name}.ln3"), d),
            ff: FeedForward::new(init, &format!("{name}.ff"), d, hidden),
        }
    }

    /// Causal self-attention over `x`, then attention into `memory`.
    pub fn forward(&self, g: &mut Graph, x: NodeId, memory: NodeId) -> NodeId {
        let h = self.ln1.forward(g, x);
        let a = self.self_attn.forward(g, h, h, true);
        let x = residual(g, x, a);
        let h = self.ln2.forward(g, x);
        let c = self.cross_attn.forward(g, h, memory, false);
        let x = residual(g, x, c);
        let h = self.ln3.forward(g, x);
        let f = self.ff.forward(g, h);
        residual(g, x, f)
    }
}
