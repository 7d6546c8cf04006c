//! Stepped text encoder.
//!
//! Three components, each with its own parameter set:
//!
//! * a frozen backbone (token and position embeddings, transformer layers)
//!   run independently on every hint sentence;
//! * a prior head (transformer layers, MLP, max over tokens) distilled
//!   against a frozen [`TeacherEmbedder`];
//! * an alignment head: a transformer over the tokens of each sentence, an
//!   MLP over each token concatenated with its sentence's prior vector,
//!   max-pooling per sentence plus a hint-index embedding, a transformer
//!   across the sentences of a query, mean-pooling, projection to 256 dims
//!   and L2 normalization.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ranges_from_lengths, Linear, Mlp, TransformerLayer};
use crate::params::{Bound, ParamId, ParamSet};
use crate::scenegen::{Hint, Palette, Relation};
use crate::tape::{Graph, Mat, Var};

pub const UNKNOWN: &str = "<unk>";
pub const TERMINATOR: &str = ".";

/// Word → id table built from the hint grammar and a palette.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Vocab::new(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// `<unk>`, the terminator, the fixed grammar words, relations, then
    /// palette colors and classes.
    pub fn from_palette(palette: &Palette) -> Self {
        let mut words: Vec<String> = [UNKNOWN, TERMINATOR, "the", "pose", "is", "of", "a"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        words.extend(Relation::ALL.iter().map(|r| r.as_str().to_string()));
        for c in &palette.colors {
            words.push(c.name.to_lowercase());
        }
        for c in &palette.classes {
            words.push(c.name.to_lowercase());
        }
        let mut seen = std::collections::HashSet::new();
        words.retain(|w| seen.insert(w.clone()));
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unknown_id(&self) -> usize {
        0
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Token ids of one sentence: lowercase words, punctuation stripped, and
    /// a terminator at the end.
    pub fn sentence_ids(&self, sentence: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = sentence
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation() && c != '-'))
            .filter(|w| !w.is_empty())
            .map(|w| self.id(&w.to_lowercase()))
            .collect();
        ids.push(self.id(TERMINATOR));
        ids
    }

    pub fn tokenize<S: AsRef<str>>(&self, sentences: &[S]) -> TokenSeq {
        let mut ids = Vec::new();
        let mut sentence_breaks = Vec::with_capacity(sentences.len());
        for s in sentences {
            ids.extend(self.sentence_ids(s.as_ref()));
            sentence_breaks.push(ids.len());
        }
        TokenSeq { ids, sentence_breaks }
    }
}

/// Token ids of several sentences; `sentence_breaks[i]` is the exclusive
/// end of sentence `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub sentence_breaks: Vec<usize>,
}

impl TokenSeq {
    pub fn sentences(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.sentence_breaks
            .iter()
            .map(|&end| {
                let r = start..end;
                start = end;
                r
            })
            .collect()
    }

    /// Position of every token inside its sentence.
    pub fn positions(&self) -> Vec<usize> {
        self.sentences().into_iter().flat_map(|r| 0..r.len()).collect()
    }
}

/// Every sentence the hint grammar can produce over `palette`, in a fixed
/// order (relation, color, class).
pub fn grammar_sentences(palette: &Palette) -> Vec<String> {
    let mut out = Vec::new();
    for relation in Relation::ALL {
        for color in &palette.colors {
            for class in &palette.classes {
                let hint = Hint {
                    relation,
                    color: color.name.clone(),
                    class: class.name.clone(),
                };
                out.push(hint.sentence());
            }
        }
    }
    out
}

/// `1 − cos(student, teacher)`.
pub fn distill_loss(student: &[f64], teacher: &[f64]) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::Invalid(format!(
            "distillation vectors differ in length ({} vs {})",
            student.len(),
            teacher.len()
        )));
    }
    let ns = student.iter().map(|x| x * x).sum::<f64>();
    let nt = teacher.iter().map(|x| x * x).sum::<f64>();
    if ns == 0.0 || nt == 0.0 {
        return Err(Error::Invalid("distillation needs non-zero vectors".into()));
    }
    let dot: f64 = student.iter().zip(teacher).map(|(a, b)| a * b).sum();
    // One square root: sqrt(x * x) == x, so parallel inputs give exactly 0.
    Ok(1.0 - dot / (ns * nt).sqrt())
}

/// A frozen sentence embedder the prior head is distilled against.
pub trait TeacherEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    /// Unit-norm embedding of one sentence.
    fn embed(&self, sentence: &str) -> Vec<f64>;
    fn name(&self) -> String;
}

/// Default teacher: a randomly initialized transformer that is never
/// trained.
#[derive(Clone, Debug)]
pub struct RandomTransformerTeacher {
    vocab: Vocab,
    params: ParamSet,
    embed: ParamId,
    position: ParamId,
    layer: TransformerLayer,
    out: Mlp,
    seed: u64,
    dim: usize,
}

const TEACHER_WIDTH: usize = 64;

impl RandomTransformerTeacher {
    pub fn new(vocab: Vocab, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let embed = ps.glorot("teacher.embed", vocab.len(), TEACHER_WIDTH, &mut rng);
        let position = ps.glorot("teacher.position", MAX_POSITIONS, TEACHER_WIDTH, &mut rng);
        let layer = TransformerLayer::new(&mut ps, "teacher.layer", TEACHER_WIDTH, 4, 2 * TEACHER_WIDTH, &mut rng);
        let out = Mlp::new(&mut ps, "teacher.out", &[TEACHER_WIDTH, TEACHER_WIDTH, dim], &mut rng);
        Self {
            vocab,
            params: ps,
            embed,
            position,
            layer,
            out,
            seed,
            dim,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl TeacherEmbedder for RandomTransformerTeacher {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, sentence: &str) -> Vec<f64> {
        let tokens = self.vocab.tokenize(&[sentence]);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = embed_tokens(&mut g, &p, self.embed, self.position, &tokens);
        let segs = tokens.sentences();
        let h = self.layer.forward(&mut g, &p, x, &segs);
        let y = self.out.forward(&mut g, &p, h);
        let pooled = g.segment_max(y, &segs);
        let n = g.l2_normalize_rows(pooled);
        g.value(n).row(0).to_vec()
    }

    fn name(&self) -> String {
        format!("random-transformer(seed={})", self.seed)
    }
}

pub const MAX_POSITIONS: usize = 32;
pub const MAX_SENTENCES: usize = 16;

fn embed_tokens(g: &mut Graph, p: &Bound, embed: ParamId, position: ParamId, tokens: &TokenSeq) -> Var {
    let ids = tokens.ids.iter().map(|&i| Some(i)).collect();
    let pos = tokens
        .positions()
        .into_iter()
        .map(|t| Some(t.min(MAX_POSITIONS - 1)))
        .collect();
    let e = g.gather_rows(p.var(embed), ids);
    let q = g.gather_rows(p.var(position), pos);
    g.add(e, q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteConfig {
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub backbone_layers: usize,
    pub prior_layers: usize,
    pub prior_dim: usize,
    pub align_hidden: usize,
    pub out_dim: usize,
    pub seed: u64,
    pub teacher_seed: u64,
}

impl Default for SteConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            ff_width: 256,
            backbone_layers: 2,
            prior_layers: 2,
            prior_dim: 128,
            align_hidden: 256,
            out_dim: crate::pc_encoder::DESCRIPTOR_DIM,
            seed: 0,
            teacher_seed: 0x7EAC_4E12,
        }
    }
}

impl SteConfig {
    pub fn tiny(seed: u64) -> Self {
        Self {
            width: 4,
            heads: 2,
            ff_width: 6,
            backbone_layers: 1,
            prior_layers: 1,
            prior_dim: 3,
            align_hidden: 5,
            out_dim: 4,
            seed,
            teacher_seed: seed + 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    Backbone,
    Prior,
    Align,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Backbone, Component::Prior, Component::Align];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Backbone => "backbone",
            Component::Prior => "prior",
            Component::Align => "align",
        }
    }
}

/// Parameter sets of the three components with their frozen flags.
#[derive(Clone, Debug, PartialEq)]
pub struct SteParams {
    pub backbone: ParamSet,
    pub prior: ParamSet,
    pub align: ParamSet,
    pub frozen: BTreeMap<Component, bool>,
}

impl SteParams {
    pub fn set(&self, c: Component) -> &ParamSet {
        match c {
            Component::Backbone => &self.backbone,
            Component::Prior => &self.prior,
            Component::Align => &self.align,
        }
    }

    pub fn set_mut(&mut self, c: Component) -> &mut ParamSet {
        match c {
            Component::Backbone => &mut self.backbone,
            Component::Prior => &mut self.prior,
            Component::Align => &mut self.align,
        }
    }

    pub fn is_frozen(&self, c: Component) -> bool {
        self.frozen.get(&c).copied().unwrap_or(true)
    }

    pub fn set_frozen(&mut self, c: Component, frozen: bool) {
        if c == Component::Backbone && !frozen {
            panic!("the backbone is always frozen");
        }
        self.frozen.insert(c, frozen);
    }

    /// Binds every component; frozen ones become constants.
    pub fn bind(&self, g: &mut Graph) -> SteBound {
        SteBound {
            backbone: self.backbone.bind(g, !self.is_frozen(Component::Backbone)),
            prior: self.prior.bind(g, !self.is_frozen(Component::Prior)),
            align: self.align.bind(g, !self.is_frozen(Component::Align)),
        }
    }
}

pub struct SteBound {
    pub backbone: Bound,
    pub prior: Bound,
    pub align: Bound,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: ParamId,
    position: ParamId,
    backbone: Vec<TransformerLayer>,
    prior_layers: Vec<TransformerLayer>,
    prior_mlp: Mlp,
    word_layer: TransformerLayer,
    fuse_mlp: Mlp,
    sentence_index: ParamId,
    sentence_layer: TransformerLayer,
    project: Linear,
}

/// Unit-norm text-side descriptor of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct TextDescriptor(pub Vec<f64>);

impl TextDescriptor {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Frozen-component outputs for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceFeatures {
    /// Backbone features, one row per token.
    pub tokens: Mat,
    /// Unit-norm prior-head vector.
    pub prior: Vec<f64>,
}

/// Inputs to the alignment head for a batch of queries.
#[derive(Clone, Debug)]
pub struct AlignInputs {
    pub tokens: Mat,
    pub priors: Mat,
    pub token_sentences: Vec<Range<usize>>,
    pub query_sentences: Vec<Range<usize>>,
}

impl AlignInputs {
    pub fn from_features(queries: &[Vec<&SentenceFeatures>]) -> Self {
        let mut token_rows = Vec::new();
        let mut prior_rows = Vec::new();
        let mut token_lengths = Vec::new();
        let mut query_lengths = Vec::new();
        for q in queries {
            query_lengths.push(q.len());
            for f in q {
                token_lengths.push(f.tokens.nrows());
                token_rows.push(f.tokens.view());
                prior_rows.push(f.prior.clone());
            }
        }
        let tokens = ndarray::concatenate(ndarray::Axis(0), &token_rows).expect("token widths agree");
        let pd = prior_rows.first().map_or(0, |r| r.len());
        let priors = Mat::from_shape_fn((prior_rows.len(), pd), |(r, c)| prior_rows[r][c]);
        Self {
            tokens,
            priors,
            token_sentences: ranges_from_lengths(&token_lengths),
            query_sentences: ranges_from_lengths(&query_lengths),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: SteConfig,
    pub vocab: Vocab,
    pub params: SteParams,
    layout: Layout,
}

impl TextEncoder {
    /// Fresh encoder. The backbone and prior head start frozen and the
    /// alignment head trainable; stage-one distillation unfreezes the
    /// prior head explicitly.
    pub fn new(config: SteConfig, vocab: Vocab) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = &config;
        let mut backbone = ParamSet::new();
        let embed = backbone.glorot("ste.backbone.embed", vocab.len(), c.width, &mut rng);
        let position = backbone.glorot("ste.backbone.position", MAX_POSITIONS, c.width, &mut rng);
        let backbone_layers = (0..c.backbone_layers)
            .map(|i| {
                TransformerLayer::new(
                    &mut backbone,
                    &format!("ste.backbone.layer{i}"),
                    c.width,
                    c.heads,
                    c.ff_width,
                    &mut rng,
                )
            })
            .collect();

        let mut prior = ParamSet::new();
        let prior_layers = (0..c.prior_layers)
            .map(|i| {
                TransformerLayer::new(&mut prior, &format!("ste.prior.layer{i}"), c.width, c.heads, c.ff_width, &mut rng)
            })
            .collect();
        let prior_mlp = Mlp::new(&mut prior, "ste.prior.mlp", &[c.width, c.ff_width, c.prior_dim], &mut rng);

        let mut align = ParamSet::new();
        let word_layer = TransformerLayer::new(&mut align, "ste.align.word", c.width, c.heads, c.ff_width, &mut rng);
        let fuse_mlp = Mlp::new(
            &mut align,
            "ste.align.mlp",
            &[c.width + c.prior_dim, c.align_hidden, c.width],
            &mut rng,
        );
        let sentence_index = align.glorot("ste.align.sentence_index", MAX_SENTENCES, c.width, &mut rng);
        let sentence_layer =
            TransformerLayer::new(&mut align, "ste.align.sentence", c.width, c.heads, c.ff_width, &mut rng);
        let project = Linear::new(&mut align, "ste.align.project", c.width, c.out_dim, true, &mut rng);

        let frozen = BTreeMap::from([
            (Component::Backbone, true),
            (Component::Prior, true),
            (Component::Align, false),
        ]);
        Self {
            layout: Layout {
                embed,
                position,
                backbone: backbone_layers,
                prior_layers,
                prior_mlp,
                word_layer,
                fuse_mlp,
                sentence_index,
                sentence_layer,
                project,
            },
            params: SteParams {
                backbone,
                prior,
                align,
                frozen,
            },
            vocab,
            config,
        }
    }

    pub fn with_palette(config: SteConfig, palette: &Palette) -> Self {
        Self::new(config, Vocab::from_palette(palette))
    }

    /// The teacher matching this configuration.
    pub fn default_teacher(&self) -> RandomTransformerTeacher {
        RandomTransformerTeacher::new(self.vocab.clone(), self.config.prior_dim, self.config.teacher_seed)
    }

    /// Per-token backbone features; sentences are encoded independently.
    pub fn backbone_encode(&self, g: &mut Graph, p: &SteBound, tokens: &TokenSeq) -> Var {
        let l = &self.layout;
        let mut x = embed_tokens(g, &p.backbone, l.embed, l.position, tokens);
        let segs = tokens.sentences();
        for layer in &l.backbone {
            x = layer.forward(g, &p.backbone, x, &segs);
        }
        x
    }

    /// One unit-norm prior vector per sentence.
    pub fn prior_head(&self, g: &mut Graph, p: &SteBound, features: Var, sentences: &[Range<usize>]) -> Var {
        let l = &self.layout;
        let mut x = features;
        for layer in &l.prior_layers {
            x = layer.forward(g, &p.prior, x, sentences);
        }
        let y = l.prior_mlp.forward(g, &p.prior, x);
        let pooled = g.segment_max(y, sentences);
        g.l2_normalize_rows(pooled)
    }

    /// Alignment head over precomputed backbone features and prior vectors;
    /// one unit-norm row per query.
    pub fn alignment_head(
        &self,
        g: &mut Graph,
        p: &SteBound,
        tokens: Var,
        priors: Var,
        token_sentences: &[Range<usize>],
        query_sentences: &[Range<usize>],
    ) -> Var {
        let sent = self.sentence_rows(g, p, tokens, priors, token_sentences, query_sentences);
        let s = self.layout.sentence_layer.forward(g, &p.align, sent, query_sentences);
        let pooled = g.segment_mean(s, query_sentences);
        let y = self.layout.project.forward(g, &p.align, pooled);
        g.l2_normalize_rows(y)
    }

    /// Per-sentence rows entering the cross-sentence transformer.
    fn sentence_rows(
        &self,
        g: &mut Graph,
        p: &SteBound,
        tokens: Var,
        priors: Var,
        token_sentences: &[Range<usize>],
        query_sentences: &[Range<usize>],
    ) -> Var {
        let l = &self.layout;
        let words = l.word_layer.forward(g, &p.align, tokens, token_sentences);
        let owner: Vec<Option<usize>> = token_sentences
            .iter()
            .enumerate()
            .flat_map(|(s, r)| std::iter::repeat(Some(s)).take(r.len()))
            .collect();
        let spread = g.gather_rows(priors, owner);
        let cat = g.concat_cols(&[words, spread]);
        let h = l.fuse_mlp.forward(g, &p.align, cat);
        let per_sentence = g.segment_max(h, token_sentences);
        let index: Vec<Option<usize>> = query_sentences
            .iter()
            .flat_map(|r| (0..r.len()).map(|i| Some(i.min(MAX_SENTENCES - 1))))
            .collect();
        let idx = g.gather_rows(p.align.var(l.sentence_index), index);
        g.add(per_sentence, idx)
    }

    /// Per-sentence features used by the fine stage: rows of the
    /// alignment head just before the cross-sentence transformer.
    pub fn hint_rows(&self, g: &mut Graph, p: &SteBound, inputs: &AlignInputs) -> Var {
        let tokens = g.input(inputs.tokens.clone());
        let priors = g.input(inputs.priors.clone());
        self.sentence_rows(g, p, tokens, priors, &inputs.token_sentences, &inputs.query_sentences)
    }

    /// Frozen outputs for each sentence, computed in one graph.
    pub fn sentence_features<S: AsRef<str>>(&self, sentences: &[S]) -> Vec<SentenceFeatures> {
        if sentences.is_empty() {
            return Vec::new();
        }
        let tokens = self.vocab.tokenize(sentences);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let feats = self.backbone_encode(&mut g, &p, &tokens);
        let segs = tokens.sentences();
        let prior = self.prior_head(&mut g, &p, feats, &segs);
        let fm = g.value(feats);
        let pm = g.value(prior);
        segs.iter()
            .enumerate()
            .map(|(i, r)| SentenceFeatures {
                tokens: fm.slice(ndarray::s![r.clone(), ..]).to_owned(),
                prior: pm.row(i).to_vec(),
            })
            .collect()
    }

    /// Descriptors for whole queries (each a list of hint sentences).
    pub fn encode_queries<Q: AsRef<[S]>, S: AsRef<str>>(&self, queries: &[Q]) -> Result<Vec<TextDescriptor>> {
        let cache = FeatureCache::build(self, queries.iter().flat_map(|q| q.as_ref().iter().map(|s| s.as_ref())));
        self.encode_cached(&cache, queries)
    }

    pub fn encode_cached<Q: AsRef<[S]>, S: AsRef<str>>(
        &self,
        cache: &FeatureCache,
        queries: &[Q],
    ) -> Result<Vec<TextDescriptor>> {
        if queries.iter().any(|q| q.as_ref().is_empty()) {
            return Err(Error::Invalid("a query needs at least one hint".into()));
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let inputs = cache.align_inputs(queries)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let tokens = g.input(inputs.tokens.clone());
        let priors = g.input(inputs.priors.clone());
        let d = self.alignment_head(&mut g, &p, tokens, priors, &inputs.token_sentences, &inputs.query_sentences);
        Ok(g.value(d).rows().into_iter().map(|r| TextDescriptor(r.to_vec())).collect())
    }
}

/// Frozen-component outputs keyed by sentence text.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache {
    map: HashMap<String, SentenceFeatures>,
}

impl FeatureCache {
    pub fn build<'a>(enc: &TextEncoder, sentences: impl IntoIterator<Item = &'a str>) -> Self {
        let mut unique: Vec<&str> = sentences.into_iter().collect();
        unique.sort_unstable();
        unique.dedup();
        let mut map = HashMap::with_capacity(unique.len());
        for chunk in unique.chunks(256) {
            for (s, f) in chunk.iter().zip(enc.sentence_features(chunk)) {
                map.insert(s.to_string(), f);
            }
        }
        Self { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, sentence: &str) -> Option<&SentenceFeatures> {
        self.map.get(sentence)
    }

    pub fn align_inputs<Q: AsRef<[S]>, S: AsRef<str>>(&self, queries: &[Q]) -> Result<AlignInputs> {
        let feats = queries
            .iter()
            .map(|q| {
                q.as_ref()
                    .iter()
                    .map(|s| {
                        self.get(s.as_ref())
                            .ok_or_else(|| Error::Invalid(format!("sentence not in feature cache: {}", s.as_ref())))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AlignInputs::from_features(&feats))
    }
}
