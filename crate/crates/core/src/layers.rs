//! Building blocks shared by the encoders and the fine stage.

use std::ops::Range;

use rand::Rng;

use crate::params::{Bound, ParamId, ParamSet};
use crate::tape::{Graph, SegmentPair, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = ps.glorot(format!("{name}.w"), fan_in, fan_out, rng);
        let b = bias.then(|| ps.zeros(format!("{name}.b"), 1, fan_out));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => g.add_row(y, p.var(b)),
            None => y,
        }
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, p, x);
            if i < last {
                x = g.relu(x);
            }
        }
        x
    }
}

/// Learned per-feature gain and bias after a parameter-free layer norm.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        Self {
            gain: ps.filled(format!("{name}.gain"), 1, width, 1.0),
            bias: ps.zeros(format!("{name}.bias"), 1, width),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let n = g.layer_norm(x);
        let s = g.mul_row(n, p.var(self.gain));
        g.add_row(s, p.var(self.bias))
    }
}

/// Multi-head attention with separate query and key/value streams.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        assert_eq!(width % heads, 0, "width must divide into heads");
        Self {
            q: Linear::new(ps, &format!("{name}.q"), width, width, false, rng),
            k: Linear::new(ps, &format!("{name}.k"), width, width, false, rng),
            v: Linear::new(ps, &format!("{name}.v"), width, width, false, rng),
            o: Linear::new(ps, &format!("{name}.o"), width, width, true, rng),
            heads,
        }
    }

    /// Returns the output and the raw attention node (for inspecting the
    /// probability maps).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        query: Var,
        kv: Var,
        pairs: Vec<SegmentPair>,
    ) -> (Var, Var) {
        let q = self.q.forward(g, p, query);
        let k = self.k.forward(g, p, kv);
        let v = self.v.forward(g, p, kv);
        let a = g.attention(q, k, v, self.heads, pairs);
        (self.o.forward(g, p, a), a)
    }
}

/// Post-norm transformer encoder layer with segment-restricted
/// self-attention.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff: Mlp,
    pub norm2: LayerNorm,
}

impl TransformerLayer {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), width, heads, rng),
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), width),
            ff: Mlp::new(ps, &format!("{name}.ff"), &[width, ff_width, width], rng),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), width),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, segments: &[Range<usize>]) -> Var {
        let pairs = segments.iter().map(|s| (s.clone(), s.clone())).collect();
        let (a, _) = self.attn.forward(g, p, x, x, pairs);
        let r = g.add(x, a);
        let h = self.norm1.forward(g, p, r);
        let f = self.ff.forward(g, p, h);
        let r2 = g.add(h, f);
        self.norm2.forward(g, p, r2)
    }
}

/// Contiguous ranges for consecutive groups of the given lengths.
pub fn ranges_from_lengths(lengths: &[usize]) -> Vec<Range<usize>> {
    let mut at = 0;
    lengths
        .iter()
        .map(|&n| {
            let r = at..at + n;
            at += n;
            r
        })
        .collect()
}
