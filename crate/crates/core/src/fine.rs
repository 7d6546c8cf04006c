//! Fine localization: cascaded residual attention between hint rows and
//! instance rows, then an offset MLP relative to the submap center.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ranges_from_lengths, Linear, Mlp, MultiHeadAttention, TransformerLayer};
use crate::params::{Bound, ParamSet};
use crate::pc_encoder::PcEncoder;
use crate::scenegen::{Submap, Vec2};
use crate::tape::{Graph, Mat, Var};
use crate::text_encoder::{AlignInputs, FeatureCache, TextEncoder};

/// Centroid offsets are divided by this before entering the model and the
/// offset MLP output is multiplied by it.
pub const OFFSET_SCALE: f64 = 15.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineConfig {
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub ff_width: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for FineConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            depth: 4,
            ff_width: 256,
            mlp_hidden: 128,
            seed: 0,
        }
    }
}

impl FineConfig {
    pub fn tiny(seed: u64) -> Self {
        Self {
            width: 4,
            heads: 2,
            depth: 3,
            ff_width: 5,
            mlp_hidden: 3,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    text_in: Linear,
    text_layer: TransformerLayer,
    pc_in: Linear,
    cra: Vec<MultiHeadAttention>,
    offset: Mlp,
}

/// Fine-stage parameters: text projection and transformer layer, instance
/// projection, CRA layers and the offset MLP.
#[derive(Clone, Debug)]
pub struct FineModel {
    pub config: FineConfig,
    pub params: ParamSet,
    /// Widths of the token features, prior vectors and instance rows it
    /// was built for.
    pub input_widths: (usize, usize, usize),
    layout: Layout,
}

/// Instance-level rows of one batch of submaps.
#[derive(Clone, Debug)]
pub struct PcRows {
    pub rows: Mat,
    pub segments: Vec<Range<usize>>,
}

/// Graph handles of one CRA pass.
#[derive(Clone, Debug)]
pub struct CraTrace {
    /// R₁ … R_L.
    pub layers: Vec<Var>,
    /// Attention nodes, one per layer.
    pub attention: Vec<Var>,
    /// Mean of R_L per query.
    pub pooled: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosePrediction {
    pub submap_id: usize,
    pub offset: Vec2,
    pub position: Vec2,
    pub similarity: f64,
    /// Set when the submap had no instances and the center was returned.
    pub empty_submap: bool,
}

impl FineModel {
    pub fn new(config: FineConfig, token_width: usize, prior_dim: usize, instance_width: usize) -> Result<Self> {
        if config.depth < 2 {
            return Err(Error::Config(format!("CRA depth must be at least 2, got {}", config.depth)));
        }
        if config.width % config.heads != 0 {
            return Err(Error::Config(format!(
                "fine width {} is not divisible by {} heads",
                config.width, config.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let c = &config;
        let text_in = Linear::new(&mut ps, "fine.text_in", token_width + prior_dim, c.width, true, &mut rng);
        let text_layer = TransformerLayer::new(&mut ps, "fine.text_layer", c.width, c.heads, c.ff_width, &mut rng);
        let pc_in = Linear::new(&mut ps, "fine.pc_in", instance_width, c.width, true, &mut rng);
        let cra = (0..c.depth)
            .map(|i| MultiHeadAttention::new(&mut ps, &format!("fine.cra{i}"), c.width, c.heads, &mut rng))
            .collect();
        let offset = Mlp::new(&mut ps, "fine.offset", &[c.width, c.mlp_hidden, 2], &mut rng);
        Ok(Self {
            input_widths: (token_width, prior_dim, instance_width),
            params: ps,
            layout: Layout {
                text_in,
                text_layer,
                pc_in,
                cra,
                offset,
            },
            config,
        })
    }

    /// Builds a model sized for the given encoders.
    pub fn for_encoders(config: FineConfig, text: &TextEncoder, pc: &PcEncoder) -> Result<Self> {
        let inst = pc.config.d_model + 2 * pc.config.d_hidden + 2;
        Self::new(config, text.config.width, text.config.prior_dim, inst)
    }

    /// One row per hint sentence: projected tokens with their prior,
    /// a transformer layer over each sentence, max over its tokens.
    pub fn hint_rows(&self, g: &mut Graph, p: &Bound, inputs: &AlignInputs) -> Var {
        let l = &self.layout;
        let tokens = g.input(inputs.tokens.clone());
        let owner: Vec<Option<usize>> = inputs
            .token_sentences
            .iter()
            .enumerate()
            .flat_map(|(s, r)| std::iter::repeat(Some(s)).take(r.len()))
            .collect();
        let priors = g.input(inputs.priors.clone());
        let spread = g.gather_rows(priors, owner);
        let cat = g.concat_cols(&[tokens, spread]);
        let x = l.text_in.forward(g, p, cat);
        let x = l.text_layer.forward(g, p, x, &inputs.token_sentences);
        g.segment_max(x, &inputs.token_sentences)
    }

    pub fn instance_rows(&self, g: &mut Graph, p: &Bound, pc: &PcRows) -> Var {
        let x = g.input(pc.rows.clone());
        self.layout.pc_in.forward(g, p, x)
    }

    /// Cascaded residual attention. `text` rows are grouped per query by
    /// `text_segments`, `pc` rows by `pc_segments` (same number of groups).
    pub fn cra_fuse(
        &self,
        g: &mut Graph,
        p: &Bound,
        text: Var,
        pc: Var,
        text_segments: &[Range<usize>],
        pc_segments: &[Range<usize>],
    ) -> CraTrace {
        assert_eq!(text_segments.len(), pc_segments.len());
        let t_to_n: Vec<_> = text_segments.iter().cloned().zip(pc_segments.iter().cloned()).collect();
        let n_to_t: Vec<_> = pc_segments.iter().cloned().zip(text_segments.iter().cloned()).collect();
        let mut layers: Vec<Var> = Vec::with_capacity(self.config.depth);
        let mut attention = Vec::with_capacity(self.config.depth);
        for (i, mha) in self.layout.cra.iter().enumerate() {
            // Even layers (R₁, R₃, …) live on text rows, odd ones on instance rows.
            let (query, kv, pairs) = match i {
                0 => (text, pc, t_to_n.clone()),
                1 => (pc, layers[0], n_to_t.clone()),
                _ => {
                    let pairs = if i % 2 == 0 { t_to_n.clone() } else { n_to_t.clone() };
                    (layers[i - 2], layers[i - 1], pairs)
                }
            };
            let (a, node) = mha.forward(g, p, query, kv, pairs);
            layers.push(g.add(a, query));
            attention.push(node);
        }
        let last = *layers.last().expect("depth >= 2");
        let segs = if self.config.depth % 2 == 1 { text_segments } else { pc_segments };
        let pooled = g.segment_mean(last, segs);
        CraTrace {
            layers,
            attention,
            pooled,
        }
    }

    /// Offsets in meters, one row per fused vector.
    pub fn predict_offset(&self, g: &mut Graph, p: &Bound, fused: Var) -> Var {
        let y = self.layout.offset.forward(g, p, fused);
        g.scale(y, OFFSET_SCALE)
    }

    /// Offsets for query/submap pairs; every pair must have at least one
    /// hint and one instance.
    pub fn forward(&self, g: &mut Graph, p: &Bound, text: &AlignInputs, pc: &PcRows) -> (Var, CraTrace) {
        let t = self.hint_rows(g, p, text);
        let n = self.instance_rows(g, p, pc);
        let trace = self.cra_fuse(g, p, t, n, &text.query_sentences, &pc.segments);
        let offsets = self.predict_offset(g, p, trace.pooled);
        (offsets, trace)
    }
}

/// Frozen point-cloud encoder outputs per instance: fused features,
/// BiLSTM states and the centroid offset from the submap center (scaled).
/// Empty submaps give zero rows.
pub fn instance_features(pc: &PcEncoder, submaps: &[&Submap]) -> Result<Vec<Mat>> {
    let width = pc.config.d_model + 2 * pc.config.d_hidden + 2;
    let mut out: Vec<Mat> = submaps.iter().map(|_| Mat::zeros((0, width))).collect();
    let filled: Vec<usize> = (0..submaps.len()).filter(|&i| !submaps[i].is_empty()).collect();
    for chunk in filled.chunks(64) {
        let batch: Vec<&Submap> = chunk.iter().map(|&i| submaps[i]).collect();
        let mut g = Graph::new();
        let p = pc.params.bind(&mut g, false);
        let trace = pc.encode_batch(&mut g, &p, &batch)?;
        let s = g.value(trace.instance_features.expect("non-empty batch"));
        let h = g.value(trace.hidden.expect("non-empty batch"));
        let rel = trace.relative_centroids.mapv(|v| v / OFFSET_SCALE);
        let all = ndarray::concatenate(ndarray::Axis(1), &[s.view(), h.view(), rel.view()]).expect("rows agree");
        for (k, seg) in trace.segments.iter().enumerate() {
            out[chunk[k]] = all.slice(ndarray::s![seg.clone(), ..]).to_owned();
        }
    }
    Ok(out)
}

impl PcRows {
    pub fn from_parts(parts: &[&Mat]) -> Self {
        let lengths: Vec<usize> = parts.iter().map(|m| m.nrows()).collect();
        let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
        let rows = ndarray::concatenate(ndarray::Axis(0), &views).expect("instance widths agree");
        Self {
            rows,
            segments: ranges_from_lengths(&lengths),
        }
    }
}

/// Candidates to localize: hint sentences, submap and its coarse score.
pub struct Candidate<'a> {
    pub hints: &'a [String],
    pub submap: &'a Submap,
    pub similarity: f64,
}

/// Predicts positions for many (query, submap) pairs with frozen models.
/// `cache` must hold features for every hint sentence; `instance_cache`
/// maps submap ids to [`instance_features`] rows.
pub fn localize_batch(
    fine: &FineModel,
    cache: &FeatureCache,
    instance_cache: &dyn Fn(usize) -> Mat,
    candidates: &[Candidate],
) -> Result<Vec<PosePrediction>> {
    let mut out: Vec<Option<PosePrediction>> = candidates.iter().map(|_| None).collect();
    let live: Vec<usize> = (0..candidates.len())
        .filter(|&i| !candidates[i].submap.is_empty())
        .collect();
    for (i, c) in candidates.iter().enumerate() {
        if c.submap.is_empty() {
            out[i] = Some(PosePrediction {
                submap_id: c.submap.id,
                offset: [0.0, 0.0],
                position: c.submap.center,
                similarity: c.similarity,
                empty_submap: true,
            });
        }
    }
    for chunk in live.chunks(256) {
        let hints: Vec<&[String]> = chunk.iter().map(|&i| candidates[i].hints).collect();
        let text = cache.align_inputs(&hints)?;
        let mats: Vec<Mat> = chunk.iter().map(|&i| instance_cache(candidates[i].submap.id)).collect();
        let refs: Vec<&Mat> = mats.iter().collect();
        let pc = PcRows::from_parts(&refs);
        let mut g = Graph::new();
        let p = fine.params.bind(&mut g, false);
        let (offsets, _) = fine.forward(&mut g, &p, &text, &pc);
        let o = g.value(offsets);
        for (k, &i) in chunk.iter().enumerate() {
            let c = &candidates[i];
            let offset = [o[[k, 0]], o[[k, 1]]];
            out[i] = Some(PosePrediction {
                submap_id: c.submap.id,
                offset,
                position: [c.submap.center[0] + offset[0], c.submap.center[1] + offset[1]],
                similarity: c.similarity,
                empty_submap: false,
            });
        }
    }
    Ok(out.into_iter().map(|p| p.expect("every candidate handled")).collect())
}

/// Localizes one query inside one submap.
pub fn localize(
    hints: &[String],
    submap: &Submap,
    text: &TextEncoder,
    pc: &PcEncoder,
    fine: &FineModel,
) -> Result<PosePrediction> {
    if hints.is_empty() {
        return Err(Error::Invalid("a query needs at least one hint".into()));
    }
    let cache = FeatureCache::build(text, hints.iter().map(|s| s.as_str()));
    let rows = instance_features(pc, &[submap])?.remove(0);
    let lookup = move |_: usize| rows.clone();
    let c = Candidate {
        hints,
        submap,
        similarity: 0.0,
    };
    Ok(localize_batch(fine, &cache, &lookup, &[c])?.remove(0))
}

/// Euclidean distance between prediction and ground truth.
pub fn fine_loss(pred: Vec2, gt: Vec2) -> f64 {
    ((pred[0] - gt[0]).powi(2) + (pred[1] - gt[1]).powi(2)).sqrt()
}
