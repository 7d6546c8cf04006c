//! Training phases: prior-head distillation, coarse contrastive alignment
//! and fine offset regression.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fine::{instance_features, FineConfig, FineModel, PcRows};
use crate::optim::{Optimizer, OptimizerKind};
use crate::pc_encoder::{PcEncoder, PcEncoderConfig};
use crate::scenegen::{Palette, Submap, TextQuery};
use crate::tape::{Graph, Mat, Var};
use crate::text_encoder::{Component, FeatureCache, SteConfig, TeacherEmbedder, TextEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ste1,
    Coarse,
    Fine,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Ste1 => "ste1",
            Phase::Coarse => "coarse",
            Phase::Fine => "fine",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ste1" => Ok(Phase::Ste1),
            "coarse" => Ok(Phase::Coarse),
            "fine" => Ok(Phase::Fine),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

/// Hyperparameters of one phase. Model widths only matter for the phase
/// that creates the component (text encoder in `ste1`, point-cloud encoder
/// in `coarse`, fine model in `fine`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub seed: u64,
    pub cra_depth: usize,
    pub pool_stride: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub d_model: usize,
    pub d_hidden: usize,
    pub d_k: usize,
    pub text_width: usize,
    pub fine_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_phase(Phase::Coarse)
    }
}

impl TrainConfig {
    pub fn for_phase(phase: Phase) -> Self {
        let (batch_size, learning_rate, epochs) = match phase {
            Phase::Ste1 => (32, 1e-3, 40),
            Phase::Coarse => (64, 5e-4, 20),
            Phase::Fine => (32, 3e-4, 35),
        };
        Self {
            phase,
            batch_size,
            learning_rate,
            epochs,
            temperature: 0.07,
            seed: 0,
            cra_depth: 4,
            pool_stride: 2,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            d_model: 128,
            d_hidden: 128,
            d_k: 64,
            text_width: 128,
            fine_width: 128,
        }
    }

    /// Parses `key = value` lines (`#` starts a comment). A `phase` key
    /// selects the defaults; otherwise `default_phase` does.
    pub fn parse(text: &str, default_phase: Phase) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let phase = match pairs.iter().find(|(_, k, _)| k == "phase") {
            Some((_, _, v)) => v.parse()?,
            None => default_phase,
        };
        let mut cfg = Self::for_phase(phase);
        for (n, k, v) in &pairs {
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {n}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        match key {
            "phase" => self.phase = value.parse().map_err(|e: Error| e.to_string())?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "cra_depth" => self.cra_depth = num(key, value)?,
            "pool_stride" => self.pool_stride = num(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "momentum" => self.momentum = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "d_hidden" => self.d_hidden = num(key, value)?,
            "d_k" => self.d_k = num(key, value)?,
            "text_width" => self.text_width = num(key, value)?,
            "fine_width" => self.fine_width = num(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.cra_depth < 2 {
            return bad("cra_depth must be at least 2");
        }
        if self.pool_stride < 1 {
            return bad("pool_stride must be at least 1");
        }
        Ok(())
    }

    /// `key = value` lines accepted by [`TrainConfig::parse`].
    pub fn to_kv(&self) -> String {
        format!(
            "phase = {}\nbatch_size = {}\nlearning_rate = {}\nepochs = {}\ntemperature = {}\nseed = {}\n\
             cra_depth = {}\npool_stride = {}\noptimizer = {}\nmomentum = {}\nd_model = {}\nd_hidden = {}\n\
             d_k = {}\ntext_width = {}\nfine_width = {}\n",
            self.phase,
            self.batch_size,
            self.learning_rate,
            self.epochs,
            self.temperature,
            self.seed,
            self.cra_depth,
            self.pool_stride,
            self.optimizer,
            self.momentum,
            self.d_model,
            self.d_hidden,
            self.d_k,
            self.text_width,
            self.fine_width
        )
    }

    fn optimizer_for(&self, params: &crate::params::ParamSet) -> Optimizer {
        Optimizer::new(self.optimizer, self.learning_rate, self.momentum, params)
    }
}

/// Per-epoch mean losses of one phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseHistory {
    pub phase: Phase,
    pub losses: Vec<f64>,
    /// Set when some epoch's loss rose by more than 1e-3 over the previous.
    pub flagged: bool,
}

impl PhaseHistory {
    fn new(phase: Phase) -> Self {
        Self {
            phase,
            losses: Vec::new(),
            flagged: false,
        }
    }

    fn push(&mut self, loss: f64) {
        if let Some(&prev) = self.losses.last() {
            if loss > prev + 1e-3 {
                self.flagged = true;
            }
        }
        self.losses.push(loss);
    }
}

/// Symmetric InfoNCE over the batch similarity matrix `pc · textᵀ / τ`.
pub fn contrastive_loss_graph(g: &mut Graph, pc: Var, text: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let s = g.matmul_t(pc, text);
    let s = g.scale(s, 1.0 / temperature);
    let a = g.info_nce_rows(s);
    let st = g.transpose(s);
    let b = g.info_nce_rows(st);
    let sum = g.add(a, b);
    Ok(g.scale(sum, 0.5))
}

pub fn contrastive_loss(pc: &Mat, text: &Mat, temperature: f64) -> Result<f64> {
    if pc.dim() != text.dim() || pc.nrows() == 0 {
        return Err(Error::Invalid(format!(
            "contrastive batches must be non-empty and equal in shape ({:?} vs {:?})",
            pc.dim(),
            text.dim()
        )));
    }
    let mut g = Graph::new();
    let a = g.input(pc.clone());
    let b = g.input(text.clone());
    let l = contrastive_loss_graph(&mut g, a, b, temperature)?;
    Ok(g.scalar(l))
}

/// Mean Euclidean distance between predicted and target rows.
pub fn fine_loss_graph(g: &mut Graph, pred: Var, target: Mat) -> Var {
    let t = g.input(target);
    let d = g.sub(pred, t);
    let n = g.row_norms(d);
    g.mean_all(n)
}

/// One epoch of batches with pairwise distinct keys. Every batch holds
/// `min(batch_size, distinct keys)` items and there are
/// `ceil(keys.len() / batch_size)` of them. Keys are drawn uniformly
/// without replacement per batch; each key hands out its items in a
/// shuffled cycle, so keys with many items do not crowd the tail.
pub fn balanced_batches(keys: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut pools: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &k) in keys.iter().enumerate() {
        pools.entry(k).or_default().push(i);
    }
    if pools.is_empty() || batch_size == 0 {
        return Vec::new();
    }
    let mut pools: Vec<(Vec<usize>, usize)> = pools.into_values().map(|p| (p, 0)).collect();
    for (p, _) in &mut pools {
        p.shuffle(rng);
    }
    let width = batch_size.min(pools.len());
    let steps = keys.len().div_ceil(batch_size);
    let mut slots: Vec<usize> = (0..pools.len()).collect();
    (0..steps)
        .map(|_| {
            let (chosen, _) = slots.partial_shuffle(rng, width);
            chosen
                .iter()
                .map(|&s| {
                    let (pool, cursor) = &mut pools[s];
                    if *cursor == pool.len() {
                        pool.shuffle(rng);
                        *cursor = 0;
                    }
                    *cursor += 1;
                    pool[*cursor - 1]
                })
                .collect()
        })
        .collect()
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

fn phase_rng(config: &TrainConfig) -> ChaCha8Rng {
    let salt = match config.phase {
        Phase::Ste1 => 0x5E1,
        Phase::Coarse => 0xC0A,
        Phase::Fine => 0xF1E,
    };
    ChaCha8Rng::seed_from_u64(config.seed ^ salt)
}

/// A fresh text encoder sized by `config`.
pub fn new_text_encoder(config: &TrainConfig, palette: &Palette) -> TextEncoder {
    let w = config.text_width;
    let ste = SteConfig {
        width: w,
        ff_width: 2 * w,
        prior_dim: w,
        align_hidden: 2 * w,
        seed: config.seed,
        ..SteConfig::default()
    };
    TextEncoder::with_palette(ste, palette)
}

pub fn new_pc_encoder(config: &TrainConfig) -> PcEncoder {
    PcEncoder::new(PcEncoderConfig {
        d_model: config.d_model,
        d_hidden: config.d_hidden,
        d_k: config.d_k,
        pool_stride: config.pool_stride,
        seed: config.seed.wrapping_add(1),
        ..PcEncoderConfig::default()
    })
}

/// Mean cosine between prior-head outputs and teacher embeddings.
pub fn mean_teacher_cosine(text: &TextEncoder, sentences: &[String], teacher: &dyn TeacherEmbedder) -> f64 {
    if sentences.is_empty() {
        return 1.0;
    }
    let feats = text.sentence_features(sentences);
    let total: f64 = feats
        .iter()
        .zip(sentences)
        .map(|(f, s)| f.prior.iter().zip(teacher.embed(s)).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    total / sentences.len() as f64
}

/// Distills the prior head against `teacher` on `sentences`; the backbone
/// stays frozen and the prior head is frozen again afterwards.
pub fn train_ste_stage1(
    config: &TrainConfig,
    mut text: TextEncoder,
    sentences: &[String],
    teacher: &dyn TeacherEmbedder,
) -> Result<Checkpoint> {
    config.validate()?;
    if teacher.dim() != text.config.prior_dim {
        return Err(Error::Config(format!(
            "teacher dimension {} differs from prior dimension {}",
            teacher.dim(),
            text.config.prior_dim
        )));
    }
    if sentences.is_empty() {
        return Err(Error::Invalid("no sentences to distill on".into()));
    }
    text.params.set_frozen(Component::Prior, false);
    text.params.set_frozen(Component::Align, true);
    let targets: Vec<Vec<f64>> = sentences.iter().map(|s| teacher.embed(s)).collect();
    let backbone: Vec<Mat> = text.sentence_features(sentences).into_iter().map(|f| f.tokens).collect();

    let mut rng = phase_rng(config);
    let mut opt = config.optimizer_for(&text.params.prior);
    let mut history = PhaseHistory::new(Phase::Ste1);
    let batch = config.batch_size.min(sentences.len());
    for epoch in 0..config.epochs {
        let order = shuffled(sentences.len(), &mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let views: Vec<_> = chunk.iter().map(|&i| backbone[i].view()).collect();
            let tokens = ndarray::concatenate(ndarray::Axis(0), &views).expect("token widths agree");
            let lengths: Vec<usize> = chunk.iter().map(|&i| backbone[i].nrows()).collect();
            let segs = crate::layers::ranges_from_lengths(&lengths);
            let target = Mat::from_shape_fn((chunk.len(), text.config.prior_dim), |(r, c)| targets[chunk[r]][c]);

            let mut g = Graph::new();
            let p = text.params.bind(&mut g);
            let x = g.input(tokens);
            let out = text.prior_head(&mut g, &p, x, &segs);
            let dot = g.dot_const(out, target);
            let mean_dot = g.scale(dot, -1.0 / chunk.len() as f64);
            let one = g.input(Mat::from_elem((1, 1), 1.0));
            let loss = g.add(one, mean_dot);
            total += g.scalar(loss) * chunk.len() as f64;
            let mut grads = g.backward(loss);
            let gp = p.prior.gradients(&mut grads);
            debug_assert!(p.backbone.gradients(&mut grads).iter().all(|x| x.is_none()));
            opt.step(&mut text.params.prior, &gp);
        }
        let mean = total / sentences.len() as f64;
        log::info!("ste1 epoch {}/{}: distill loss {:.6}", epoch + 1, config.epochs, mean);
        history.push(mean);
    }
    if history.flagged {
        log::warn!("ste1 loss history is not monotone within 1e-3");
    }
    text.params.set_frozen(Component::Prior, true);
    text.params.set_frozen(Component::Align, false);
    Ok(Checkpoint {
        text,
        pc: None,
        fine: None,
        config: config.clone(),
        epoch: config.epochs,
        history: vec![history],
    })
}

fn all_sentences(queries: &[TextQuery]) -> impl Iterator<Item = &str> {
    queries.iter().flat_map(|q| q.hints.iter().map(|s| s.as_str()))
}

fn clamp_batch(config: &TrainConfig, pairs: usize) -> Result<usize> {
    if pairs == 0 {
        return Err(Error::Invalid("no training pairs".into()));
    }
    if config.batch_size > pairs {
        log::warn!("batch size {} exceeds {} training pairs; clamping", config.batch_size, pairs);
        return Ok(pairs);
    }
    Ok(config.batch_size)
}

/// Trains the point-cloud encoder and the alignment head with the
/// contrastive loss. Creates the point-cloud encoder when the input
/// checkpoint has none.
pub fn train_coarse(config: &TrainConfig, dataset: &Dataset, input: Checkpoint) -> Result<Checkpoint> {
    config.validate()?;
    let Checkpoint {
        mut text,
        pc,
        mut history,
        ..
    } = input;
    let mut pc = pc.unwrap_or_else(|| new_pc_encoder(config));
    text.params.set_frozen(Component::Prior, true);
    text.params.set_frozen(Component::Align, false);

    let queries = dataset.train();
    let batch = clamp_batch(config, queries.len())?;
    let cache = FeatureCache::build(&text, all_sentences(queries));
    let keys: Vec<usize> = queries.iter().map(|q| q.positive_submap_id).collect();
    let submap = |id: usize| -> Result<&Submap> {
        dataset
            .world
            .submap(id)
            .ok_or_else(|| Error::Invalid(format!("query refers to missing submap {id}")))
    };

    let mut rng = phase_rng(config);
    let mut opt_pc = config.optimizer_for(&pc.params);
    let mut opt_align = config.optimizer_for(&text.params.align);
    let mut hist = PhaseHistory::new(Phase::Coarse);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let mut seen = 0usize;
        for b in balanced_batches(&keys, batch, &mut rng) {
            let submaps = b.iter().map(|&i| submap(keys[i])).collect::<Result<Vec<_>>>()?;
            let hints: Vec<&[String]> = b.iter().map(|&i| queries[i].hints.as_slice()).collect();
            let inputs = cache.align_inputs(&hints)?;

            let mut g = Graph::new();
            let pp = pc.params.bind(&mut g, true);
            let sp = text.params.bind(&mut g);
            let trace = pc.encode_batch(&mut g, &pp, &submaps)?;
            let t = g.input(inputs.tokens);
            let pr = g.input(inputs.priors);
            let d = text.alignment_head(&mut g, &sp, t, pr, &inputs.token_sentences, &inputs.query_sentences);
            let loss = contrastive_loss_graph(&mut g, trace.descriptors, d, config.temperature)?;
            total += g.scalar(loss) * b.len() as f64;
            seen += b.len();
            let mut grads = g.backward(loss);
            let gp = pp.gradients(&mut grads);
            let ga = sp.align.gradients(&mut grads);
            opt_pc.step(&mut pc.params, &gp);
            opt_align.step(&mut text.params.align, &ga);
        }
        let mean = total / seen as f64;
        log::info!("coarse epoch {}/{}: contrastive loss {:.6}", epoch + 1, config.epochs, mean);
        hist.push(mean);
    }
    history.push(hist);
    Ok(Checkpoint {
        text,
        pc: Some(pc),
        fine: None,
        config: config.clone(),
        epoch: config.epochs,
        history,
    })
}

/// Ground-truth offset of a query from its positive submap's center.
pub fn gt_offset(query: &TextQuery, submap: &Submap) -> [f64; 2] {
    [query.pose_gt[0] - submap.center[0], query.pose_gt[1] - submap.center[1]]
}

/// Mean distance of the always-predict-the-center baseline over queries
/// whose positive submap has instances.
pub fn center_baseline(dataset: &Dataset, queries: &[TextQuery]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for q in queries {
        if let Some(s) = dataset.world.submap(q.positive_submap_id) {
            if !s.is_empty() {
                let o = gt_offset(q, s);
                total += (o[0] * o[0] + o[1] * o[1]).sqrt();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Trains the fine model with the frozen encoders of `input`.
pub fn train_fine(config: &TrainConfig, dataset: &Dataset, input: Checkpoint) -> Result<Checkpoint> {
    config.validate()?;
    let Checkpoint {
        text,
        pc,
        fine,
        mut history,
        ..
    } = input;
    let pc = pc.ok_or_else(|| Error::Checkpoint("fine training needs a coarse checkpoint".into()))?;
    let mut fine = match fine {
        Some(f) => f,
        None => {
            let fc = FineConfig {
                width: config.fine_width,
                ff_width: 2 * config.fine_width,
                mlp_hidden: config.fine_width,
                depth: config.cra_depth,
                seed: config.seed.wrapping_add(2),
                ..FineConfig::default()
            };
            FineModel::for_encoders(fc, &text, &pc)?
        }
    };

    let queries: Vec<&TextQuery> = dataset
        .train()
        .iter()
        .filter(|q| dataset.world.submap(q.positive_submap_id).is_some_and(|s| !s.is_empty()))
        .collect();
    let batch = clamp_batch(config, queries.len())?;
    let cache = FeatureCache::build(&text, queries.iter().flat_map(|q| q.hints.iter().map(|s| s.as_str())));
    let all: Vec<&Submap> = dataset.world.submaps.iter().collect();
    let rows = instance_features(&pc, &all)?;

    let mut rng = phase_rng(config);
    let mut opt = config.optimizer_for(&fine.params);
    let mut hist = PhaseHistory::new(Phase::Fine);
    for epoch in 0..config.epochs {
        let order = shuffled(queries.len(), &mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let hints: Vec<&[String]> = chunk.iter().map(|&i| queries[i].hints.as_slice()).collect();
            let text_in = cache.align_inputs(&hints)?;
            let parts: Vec<&Mat> = chunk.iter().map(|&i| &rows[queries[i].positive_submap_id]).collect();
            let pc_in = PcRows::from_parts(&parts);
            let target = Mat::from_shape_fn((chunk.len(), 2), |(r, c)| {
                let q = queries[chunk[r]];
                gt_offset(q, &dataset.world.submaps[q.positive_submap_id])[c]
            });
            let mut g = Graph::new();
            let p = fine.params.bind(&mut g, true);
            let (offsets, _) = fine.forward(&mut g, &p, &text_in, &pc_in);
            let loss = fine_loss_graph(&mut g, offsets, target);
            total += g.scalar(loss) * chunk.len() as f64;
            let grads = p.gradients(&mut g.backward(loss));
            opt.step(&mut fine.params, &grads);
        }
        let mean = total / queries.len() as f64;
        log::info!("fine epoch {}/{}: mean error {:.4} m", epoch + 1, config.epochs, mean);
        hist.push(mean);
    }
    history.push(hist);
    Ok(Checkpoint {
        text,
        pc: Some(pc),
        fine: Some(fine),
        config: config.clone(),
        epoch: config.epochs,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use crate::gradcheck::{check_leaf_gradients, GradCheck};
    use ndarray::array;

    #[test]
    fn single_pair_loss_is_zero() {
        let v = array![[0.6, 0.8]];
        assert_eq!(contrastive_loss(&v, &v, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_pair_matches_closed_form() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let l = contrastive_loss(&e, &e, 1.0).unwrap();
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn bad_temperature_is_rejected() {
        let e = array![[1.0, 0.0]];
        assert!(contrastive_loss(&e, &e, 0.0).is_err());
        assert!(contrastive_loss(&e, &e, -1.0).is_err());
    }

    #[test]
    fn misaligned_pairing_costs_more() {
        let n = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let d = array![[0.9, 0.1, 0.0], [0.1, 0.9, 0.1], [0.0, 0.2, 0.9]];
        let good = contrastive_loss(&n, &d, 0.5).unwrap();
        let swapped = array![[0.1, 0.9, 0.1], [0.9, 0.1, 0.0], [0.0, 0.2, 0.9]];
        assert!(contrastive_loss(&n, &swapped, 0.5).unwrap() > good);
    }

    #[test]
    fn loss_gradients() {
        for seed in 0..3u64 {
            let f = |s: f64| Mat::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.7 + s).sin());
            let r = check_leaf_gradients(
                &[f(seed as f64), f(seed as f64 + 5.0)],
                &|g: &mut Graph, v: &[Var]| {
                    let a = g.l2_normalize_rows(v[0]);
                    let b = g.l2_normalize_rows(v[1]);
                    contrastive_loss_graph(g, a, b, 0.3).unwrap()
                },
                GradCheck::default(),
            );
            assert!(r.passed(), "{r}");
            let target = Mat::from_shape_fn((4, 2), |(i, j)| (i + j) as f64 * 0.5);
            let r = check_leaf_gradients(
                &[Mat::from_shape_fn((4, 2), |(i, j)| ((i * 2 + j) as f64 + seed as f64).cos() * 3.0)],
                &|g: &mut Graph, v: &[Var]| fine_loss_graph(g, v[0], target.clone()),
                GradCheck::default(),
            );
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn fine_loss_graph_matches_pointwise() {
        let mut g = Graph::new();
        let p = g.input(array![[3.0, 4.0], [1.0, 1.0]]);
        let l = fine_loss_graph(&mut g, p, array![[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(g.scalar(l), 2.5);
    }

    #[test]
    fn balanced_batches_have_distinct_keys() {
        let keys = vec![0, 0, 1, 2, 1, 0, 3, 0, 0, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = balanced_batches(&keys, 3, &mut rng);
        assert_eq!(b.len(), 4);
        for batch in &b {
            let k: HashSet<_> = batch.iter().map(|&i| keys[i]).collect();
            assert_eq!((k.len(), batch.len()), (3, 3));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(balanced_batches(&keys, 3, &mut rng), b);
        let few = balanced_batches(&[4, 4, 4], 8, &mut rng);
        assert_eq!((few.len(), few[0].len()), (1, 1));
    }

    #[test]
    fn config_parsing() {
        let c = TrainConfig::parse("# fine run\nphase = fine\nepochs = 3 # short\n\nseed=9\n", Phase::Coarse).unwrap();
        assert_eq!(c.phase, Phase::Fine);
        assert_eq!((c.batch_size, c.learning_rate, c.epochs, c.seed), (32, 3e-4, 3, 9));
        let d = TrainConfig::for_phase(Phase::Coarse);
        assert_eq!((d.batch_size, d.learning_rate, d.epochs), (64, 5e-4, 20));
        assert_eq!(TrainConfig::parse(&c.to_kv(), Phase::Ste1).unwrap(), c);
        assert!(TrainConfig::parse("temperature = 0\n", Phase::Coarse).is_err());
        assert!(TrainConfig::parse("batch_size = 0\n", Phase::Coarse).is_err());
        assert!(TrainConfig::parse("colour = red\n", Phase::Coarse).is_err());
        assert!(TrainConfig::parse("epochs\n", Phase::Coarse).is_err());
        assert!(TrainConfig::parse("cra_depth = 1\n", Phase::Fine).is_err());
    }
}
