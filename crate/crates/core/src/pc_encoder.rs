//! Submap → unit-norm 256-d global descriptor.
//!
//! The pipeline per submap:
//!
//! 1. instances are put in a canonical order (centroid x, then y, then z);
//! 2. each instance becomes one feature row: a PointNet-style
//!    max-pooled point MLP, plus color, position and density encoders, fused
//!    by a ReLU layer;
//! 3. MFAM: three 1-D convolutions (widths 1, 3, 5) along the instance
//!    sequence with residuals, per-scale self-attention, then a
//!    product-of-softmaxes cross-attention with the mid scale as value;
//! 4. a bidirectional LSTM over the enhanced sequence;
//! 5. strided selection of hidden states, mean, linear projection and L2
//!    normalization.
//!
//! Batches of submaps are encoded in one graph; every sequence operation
//! is restricted to its submap's row range.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ranges_from_lengths, Linear, Mlp};
use crate::params::{Bound, ParamId, ParamSet};
use crate::scenegen::{Submap, WORLD_HEIGHT};
use crate::tape::{Graph, Mat, Var};

pub const DESCRIPTOR_DIM: usize = 256;
/// Point features: offset from the instance centroid, RGB, intensity.
pub const POINT_FEATURES: usize = 7;
pub const CONV_WIDTHS: [usize; 3] = [1, 3, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcEncoderConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub d_k: usize,
    pub pool_stride: usize,
    pub point_widths: Vec<usize>,
    pub color_width: usize,
    pub position_width: usize,
    pub intensity_width: usize,
    pub out_dim: usize,
    pub seed: u64,
}

impl Default for PcEncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            d_hidden: 128,
            d_k: 64,
            pool_stride: 2,
            point_widths: vec![32, 64],
            color_width: 32,
            position_width: 32,
            intensity_width: 16,
            out_dim: DESCRIPTOR_DIM,
            seed: 0,
        }
    }
}

impl PcEncoderConfig {
    /// Narrow widths for gradient checks and quick tests.
    pub fn tiny(seed: u64) -> Self {
        Self {
            d_model: 6,
            d_hidden: 4,
            d_k: 3,
            pool_stride: 2,
            point_widths: vec![5, 6],
            color_width: 3,
            position_width: 3,
            intensity_width: 2,
            out_dim: 5,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
struct Scale {
    kernel: ParamId,
    bias: ParamId,
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    point_mlp: Mlp,
    aggregate: Linear,
    color: Mlp,
    position: Mlp,
    intensity: Mlp,
    fuse: Linear,
    scales: Vec<Scale>,
    fuse_query: ParamId,
    fuse_key_fine: ParamId,
    fuse_key_wide: ParamId,
    forward: LstmDirection,
    backward: LstmDirection,
    project: Linear,
    null: ParamId,
}

/// Encoder architecture together with its parameters.
#[derive(Clone, Debug)]
pub struct PcEncoder {
    pub config: PcEncoderConfig,
    pub params: ParamSet,
    layout: Layout,
}

/// Unit-norm submap descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor(pub Vec<f64>);

impl GlobalDescriptor {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Canonical instance order: centroid x, then y, then z; stable, so equal
/// centroids keep storage order.
pub fn order_instances(submap: &Submap) -> Result<Vec<usize>> {
    if submap.instances.is_empty() {
        return Err(Error::Invalid(format!("submap {} is empty", submap.id)));
    }
    let mut order: Vec<usize> = (0..submap.instances.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (submap.instances[a].centroid, submap.instances[b].centroid);
        ca[0].total_cmp(&cb[0])
            .then(ca[1].total_cmp(&cb[1]))
            .then(ca[2].total_cmp(&cb[2]))
    });
    Ok(order)
}

/// Raw numeric inputs for a batch of non-empty submaps, rows in canonical
/// instance order.
#[derive(Clone, Debug)]
pub struct InstanceInputs {
    pub points: Mat,
    pub point_segments: Vec<Range<usize>>,
    pub colors: Mat,
    pub positions: Mat,
    pub densities: Mat,
    /// Instance rows of each submap.
    pub segments: Vec<Range<usize>>,
}

impl InstanceInputs {
    pub fn build(submaps: &[&Submap]) -> Result<Self> {
        let mut point_rows: Vec<[f64; POINT_FEATURES]> = Vec::new();
        let mut point_lengths = Vec::new();
        let mut colors = Vec::new();
        let mut positions = Vec::new();
        let mut densities = Vec::new();
        let mut lengths = Vec::with_capacity(submaps.len());
        for submap in submaps {
            let order = order_instances(submap)?;
            let half = submap.side / 2.0;
            lengths.push(order.len());
            for i in order {
                let inst = &submap.instances[i];
                let c = inst.centroid;
                for ((p, rgb), &intensity) in inst.points.iter().zip(&inst.colors).zip(&inst.intensities)
                {
                    point_rows.push([
                        p[0] - c[0],
                        p[1] - c[1],
                        p[2] - c[2],
                        rgb[0],
                        rgb[1],
                        rgb[2],
                        intensity,
                    ]);
                }
                point_lengths.push(inst.points.len());
                colors.extend(inst.mean_color());
                positions.extend([
                    (c[0] - submap.center[0]) / half,
                    (c[1] - submap.center[1]) / half,
                    c[2] / WORLD_HEIGHT,
                ]);
                densities.push(inst.density.ln_1p());
            }
        }
        let n = densities.len();
        let points = Mat::from_shape_fn((point_rows.len(), POINT_FEATURES), |(r, c)| point_rows[r][c]);
        Ok(Self {
            points,
            point_segments: ranges_from_lengths(&point_lengths),
            colors: Mat::from_shape_vec((n, 3), colors).expect("color rows"),
            positions: Mat::from_shape_vec((n, 3), positions).expect("position rows"),
            densities: Mat::from_shape_vec((n, 1), densities).expect("density rows"),
            segments: ranges_from_lengths(&lengths),
        })
    }
}

/// Graph handles produced by [`PcEncoder::encode_batch`].
#[derive(Clone, Debug)]
pub struct BatchTrace {
    /// B × out_dim unit rows, one per input submap (empty ones included).
    pub descriptors: Var,
    /// Rows of the non-empty submaps' instances, canonical order.
    pub segments: Vec<Range<usize>>,
    /// Position in the batch of each entry of `segments`.
    pub nonempty: Vec<usize>,
    /// Instance feature rows after fusion (N × d_model).
    pub instance_features: Option<Var>,
    /// Per-scale self-attention nodes for widths 1, 3, 5.
    pub scale_attention: Vec<Var>,
    /// The product-of-softmaxes fusion node (MFAM output).
    pub local: Option<Var>,
    /// BiLSTM hidden states (N × 2·d_hidden).
    pub hidden: Option<Var>,
    /// Centroid offsets from the submap center, in meters (N × 2).
    pub relative_centroids: Mat,
}

impl PcEncoder {
    pub fn new(config: PcEncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let c = &config;
        let mut widths = vec![POINT_FEATURES];
        widths.extend(&c.point_widths);
        let point_out = *c.point_widths.last().expect("point widths");
        let point_mlp = Mlp::new(&mut ps, "pc.point", &widths, &mut rng);
        let aggregate = Linear::new(&mut ps, "pc.aggregate", point_out, point_out, true, &mut rng);
        let color = Mlp::new(&mut ps, "pc.color", &[3, c.color_width, c.color_width], &mut rng);
        let position = Mlp::new(
            &mut ps,
            "pc.position",
            &[3, c.position_width, c.position_width],
            &mut rng,
        );
        let intensity = Mlp::new(
            &mut ps,
            "pc.intensity",
            &[1, c.intensity_width, c.intensity_width],
            &mut rng,
        );
        let fused_in = point_out + c.color_width + c.position_width + c.intensity_width;
        let fuse = Linear::new(&mut ps, "pc.fuse", fused_in, c.d_model, true, &mut rng);
        let scales = CONV_WIDTHS
            .iter()
            .map(|&w| Scale {
                kernel: ps.glorot(format!("pc.mfam.conv{w}.kernel"), w * c.d_model, c.d_model, &mut rng),
                bias: ps.zeros(format!("pc.mfam.conv{w}.bias"), 1, c.d_model),
                query: ps.glorot(format!("pc.mfam.attn{w}.q"), c.d_model, c.d_k, &mut rng),
                key: ps.glorot(format!("pc.mfam.attn{w}.k"), c.d_model, c.d_k, &mut rng),
                value: ps.glorot(format!("pc.mfam.attn{w}.v"), c.d_model, c.d_model, &mut rng),
            })
            .collect();
        let fuse_query = ps.glorot("pc.mfam.fuse.q", c.d_model, c.d_k, &mut rng);
        let fuse_key_fine = ps.glorot("pc.mfam.fuse.k1", c.d_model, c.d_k, &mut rng);
        let fuse_key_wide = ps.glorot("pc.mfam.fuse.k5", c.d_model, c.d_k, &mut rng);
        let mut direction = |name: &str| LstmDirection {
            input: ps.glorot(format!("pc.lstm.{name}.input"), c.d_model, 4 * c.d_hidden, &mut rng),
            recurrent: ps.glorot(
                format!("pc.lstm.{name}.recurrent"),
                c.d_hidden,
                4 * c.d_hidden,
                &mut rng,
            ),
            bias: ps.zeros(format!("pc.lstm.{name}.bias"), 1, 4 * c.d_hidden),
        };
        let forward = direction("forward");
        let backward = direction("backward");
        let project = Linear::new(&mut ps, "pc.project", 2 * c.d_hidden, c.out_dim, true, &mut rng);
        let null = ps.glorot("pc.null", 1, c.out_dim, &mut rng);
        let layout = Layout {
            point_mlp,
            aggregate,
            color,
            position,
            intensity,
            fuse,
            scales,
            fuse_query,
            fuse_key_fine,
            fuse_key_wide,
            forward,
            backward,
            project,
            null,
        };
        Self {
            config,
            params: ps,
            layout,
        }
    }

    pub fn lstm_directions(&self) -> (&LstmDirection, &LstmDirection) {
        (&self.layout.forward, &self.layout.backward)
    }

    /// Ids of the per-scale attention value projections and the convolution
    /// kernels/biases, in width order 1, 3, 5.
    pub fn scale_params(&self, width: usize) -> Option<(ParamId, ParamId, ParamId)> {
        let i = CONV_WIDTHS.iter().position(|&w| w == width)?;
        let s = &self.layout.scales[i];
        Some((s.kernel, s.bias, s.value))
    }

    /// Per-instance part: one fused feature row per instance.
    pub fn encode_instances(&self, g: &mut Graph, p: &Bound, inputs: &InstanceInputs) -> Var {
        let l = &self.layout;
        let pts = g.input(inputs.points.clone());
        let h = l.point_mlp.forward(g, p, pts);
        let h = g.relu(h);
        let pooled = g.segment_max(h, &inputs.point_segments);
        let shape = l.aggregate.forward(g, p, pooled);
        let colors = g.input(inputs.colors.clone());
        let c = l.color.forward(g, p, colors);
        let positions = g.input(inputs.positions.clone());
        let pos = l.position.forward(g, p, positions);
        let densities = g.input(inputs.densities.clone());
        let r = l.intensity.forward(g, p, densities);
        let cat = g.concat_cols(&[shape, c, pos, r]);
        let fused = l.fuse.forward(g, p, cat);
        g.relu(fused)
    }

    /// Multi-scale fusion attention. Returns the enhanced sequence, the
    /// three per-scale self-attention nodes and the fusion node itself.
    pub fn mfam(
        &self,
        g: &mut Graph,
        p: &Bound,
        seq: Var,
        segments: &[Range<usize>],
    ) -> (Var, Vec<Var>, Var) {
        let l = &self.layout;
        let pairs: Vec<_> = segments.iter().map(|s| (s.clone(), s.clone())).collect();
        let mut scale_out = Vec::with_capacity(3);
        let mut attn_nodes = Vec::with_capacity(3);
        for (scale, &width) in l.scales.iter().zip(CONV_WIDTHS.iter()) {
            let half = (width as isize - 1) / 2;
            let taps: Vec<Var> = (-half..=half)
                .map(|o| if o == 0 { seq } else { g.shift_rows(seq, o, segments) })
                .collect();
            let stacked = if taps.len() == 1 { taps[0] } else { g.concat_cols(&taps) };
            let conv = g.matmul(stacked, p.var(scale.kernel));
            let conv = g.add_row(conv, p.var(scale.bias));
            let act = g.relu(conv);
            let x = g.add(act, seq);
            let q = g.matmul(x, p.var(scale.query));
            let k = g.matmul(x, p.var(scale.key));
            let v = g.matmul(x, p.var(scale.value));
            let a = g.attention(q, k, v, 1, pairs.clone());
            scale_out.push(a);
            attn_nodes.push(a);
        }
        let (f1, f3, f5) = (scale_out[0], scale_out[1], scale_out[2]);
        let q = g.matmul(f3, p.var(l.fuse_query));
        let k1 = g.matmul(f1, p.var(l.fuse_key_fine));
        let k5 = g.matmul(f5, p.var(l.fuse_key_wide));
        let fused = g.dual_attention(q, k1, k5, f3, segments.to_vec());
        (fused, attn_nodes, fused)
    }

    /// Bidirectional LSTM over each segment; returns N × 2·d_hidden rows
    /// aligned with the input rows (forward state, then backward state).
    pub fn bilstm(&self, g: &mut Graph, p: &Bound, seq: Var, segments: &[Range<usize>]) -> Var {
        let fwd = run_lstm(g, p, &self.layout.forward, self.config.d_hidden, seq, segments, false);
        let bwd = run_lstm(g, p, &self.layout.backward, self.config.d_hidden, seq, segments, true);
        g.concat_cols(&[fwd, bwd])
    }

    /// Strided selection, mean, projection and normalization per segment.
    pub fn pool_global(&self, g: &mut Graph, p: &Bound, hidden: Var, segments: &[Range<usize>]) -> Var {
        let mut index = Vec::new();
        let mut lengths = Vec::with_capacity(segments.len());
        for seg in segments {
            let picked = strided_indices(seg.len(), self.config.pool_stride);
            lengths.push(picked.len());
            index.extend(picked.into_iter().map(|t| Some(seg.start + t)));
        }
        let selected = g.gather_rows(hidden, index);
        let mean = g.segment_mean(selected, &ranges_from_lengths(&lengths));
        let projected = self.layout.project.forward(g, p, mean);
        g.l2_normalize_rows(projected)
    }

    /// Encodes a batch of submaps in one graph.
    pub fn encode_batch(&self, g: &mut Graph, p: &Bound, submaps: &[&Submap]) -> Result<BatchTrace> {
        let nonempty: Vec<usize> = (0..submaps.len()).filter(|&i| !submaps[i].is_empty()).collect();
        let filled: Vec<&Submap> = nonempty.iter().map(|&i| submaps[i]).collect();

        let null = g.l2_normalize_rows(p.var(self.layout.null));
        if filled.is_empty() {
            let descriptors = g.gather_rows(null, vec![Some(0); submaps.len()]);
            return Ok(BatchTrace {
                descriptors,
                segments: Vec::new(),
                nonempty,
                instance_features: None,
                scale_attention: Vec::new(),
                local: None,
                hidden: None,
                relative_centroids: Mat::zeros((0, 2)),
            });
        }

        let inputs = InstanceInputs::build(&filled)?;
        let segments = inputs.segments.clone();
        let features = self.encode_instances(g, p, &inputs);
        let (local, scale_attention, _) = self.mfam(g, p, features, &segments);
        let hidden = self.bilstm(g, p, local, &segments);
        let pooled = self.pool_global(g, p, hidden, &segments);

        let descriptors = if nonempty.len() == submaps.len() {
            pooled
        } else {
            let all = g.concat_rows(&[pooled, null]);
            let null_row = nonempty.len();
            let mut slot = vec![Some(null_row); submaps.len()];
            for (row, &b) in nonempty.iter().enumerate() {
                slot[b] = Some(row);
            }
            g.gather_rows(all, slot)
        };
        let half = inputs.positions.column(0).len();
        let mut relative_centroids = Mat::zeros((half, 2));
        for (r, seg) in segments.iter().enumerate() {
            let side = filled[r].side / 2.0;
            for i in seg.clone() {
                relative_centroids[[i, 0]] = inputs.positions[[i, 0]] * side;
                relative_centroids[[i, 1]] = inputs.positions[[i, 1]] * side;
            }
        }
        Ok(BatchTrace {
            descriptors,
            segments,
            nonempty,
            instance_features: Some(features),
            scale_attention,
            local: Some(local),
            hidden: Some(hidden),
            relative_centroids,
        })
    }

    /// Descriptor of one submap with read-only parameters.
    pub fn encode_submap(&self, submap: &Submap) -> Result<GlobalDescriptor> {
        Ok(self.encode_many(&[submap])?.remove(0))
    }

    pub fn encode_many(&self, submaps: &[&Submap]) -> Result<Vec<GlobalDescriptor>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let trace = self.encode_batch(&mut g, &p, submaps)?;
        let m = g.value(trace.descriptors);
        Ok(m.rows().into_iter().map(|r| GlobalDescriptor(r.to_vec())).collect())
    }
}

/// Zero-based indices `t = (j−1)·k` for `j = 1..=ceil(T/k)`.
pub fn strided_indices(len: usize, stride: usize) -> Vec<usize> {
    assert!(stride >= 1);
    (0..len).step_by(stride).collect()
}

/// One LSTM direction over every segment at once. Sequences are padded to
/// the longest one; in the reverse direction padded steps are masked so
/// each sequence starts from a zero state at its own last element.
fn run_lstm(
    g: &mut Graph,
    p: &Bound,
    dir: &LstmDirection,
    d_hidden: usize,
    seq: Var,
    segments: &[Range<usize>],
    reverse: bool,
) -> Var {
    let b = segments.len();
    let t_max = segments.iter().map(|s| s.len()).max().unwrap_or(0);
    let xw = g.matmul(seq, p.var(dir.input));
    let xw = g.add_row(xw, p.var(dir.bias));
    let mut h = g.input(Mat::zeros((b, d_hidden)));
    let mut c = g.input(Mat::zeros((b, d_hidden)));
    let mut outputs = vec![h; t_max];
    let steps: Vec<usize> = if reverse {
        (0..t_max).rev().collect()
    } else {
        (0..t_max).collect()
    };
    for t in steps {
        let index: Vec<Option<usize>> = segments
            .iter()
            .map(|s| (t < s.len()).then_some(s.start + t))
            .collect();
        let x_t = g.gather_rows(xw, index);
        let rec = g.matmul(h, p.var(dir.recurrent));
        let gates = g.add(x_t, rec);
        let f = g.slice_cols(gates, 0..d_hidden);
        let f = g.sigmoid(f);
        let i = g.slice_cols(gates, d_hidden..2 * d_hidden);
        let i = g.sigmoid(i);
        let cand = g.slice_cols(gates, 2 * d_hidden..3 * d_hidden);
        let cand = g.tanh(cand);
        let o = g.slice_cols(gates, 3 * d_hidden..4 * d_hidden);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        let mut c_new = g.add(keep, write);
        let tc = g.tanh(c_new);
        let mut h_new = g.mul(o, tc);
        if reverse && segments.iter().any(|s| t >= s.len()) {
            let mask = Mat::from_shape_fn((b, d_hidden), |(r, _)| {
                if t < segments[r].len() {
                    1.0
                } else {
                    0.0
                }
            });
            let m = g.input(mask);
            c_new = g.mul(c_new, m);
            h_new = g.mul(h_new, m);
        }
        c = c_new;
        h = h_new;
        outputs[t] = h;
    }
    if t_max == 0 {
        return g.input(Mat::zeros((0, d_hidden)));
    }
    let stacked = g.concat_rows(&outputs);
    let mut index = Vec::new();
    for (r, s) in segments.iter().enumerate() {
        for t in 0..s.len() {
            index.push(Some(t * b + r));
        }
    }
    g.gather_rows(stacked, index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::PointInstance;

    pub(crate) fn instance(centroid: [f64; 3], n: usize, salt: f64) -> PointInstance {
        let points: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                let a = i as f64 * 1.7 + salt;
                [centroid[0] + a.sin(), centroid[1] + (a * 0.7).cos(), centroid[2] + (a * 0.3).sin() * 0.5]
            })
            .collect();
        let m = points.iter().fold([0.0; 3], |acc, p| [acc[0] + p[0], acc[1] + p[1], acc[2] + p[2]]);
        let centroid = m.map(|s| s / n as f64);
        PointInstance {
            colors: (0..n).map(|i| [0.2, (i as f64 * 0.1 + salt).sin().abs(), 0.5]).collect(),
            intensities: (0..n).map(|i| ((i as f64 + salt) * 0.37).cos().abs()).collect(),
            points,
            centroid,
            density: 3.0 + salt,
            class_name: "garage".into(),
            color_name: "black".into(),
        }
    }

    fn submap(instances: Vec<PointInstance>) -> Submap {
        Submap {
            id: 0,
            center: [15.0, 15.0],
            side: 30.0,
            instance_indices: (0..instances.len()).collect(),
            instances,
        }
    }

    #[test]
    fn canonical_order() {
        let s = submap(vec![
            instance([5.0, 0.0, 1.0], 1, 0.0),
            instance([1.0, 0.0, 1.0], 1, 0.0),
            instance([3.0, 0.0, 1.0], 1, 0.0),
        ]);
        assert_eq!(order_instances(&s).unwrap(), vec![1, 2, 0]);
        let one = submap(vec![instance([5.0, 0.0, 1.0], 1, 0.0)]);
        assert_eq!(order_instances(&one).unwrap(), vec![0]);
        let tie = submap(vec![instance([2.0, 2.0, 1.0], 1, 0.0), instance([2.0, 2.0, 1.0], 1, 0.5)]);
        assert_eq!(order_instances(&tie).unwrap(), vec![0, 1]);
        assert!(order_instances(&submap(vec![])).is_err());
    }

    #[test]
    fn strided_selection() {
        assert_eq!(strided_indices(8, 4), vec![0, 4]);
        assert_eq!(strided_indices(1, 7), vec![0]);
        assert_eq!(strided_indices(9, 4), vec![0, 4, 8]);
    }

    #[test]
    fn empty_submap_uses_null_descriptor() {
        let enc = PcEncoder::new(PcEncoderConfig::tiny(1));
        let empty = submap(vec![]);
        let full = submap(vec![instance([10.0, 12.0, 1.0], 8, 0.1)]);
        let d = enc.encode_many(&[&empty, &full, &empty]).unwrap();
        assert_eq!(d[0], d[2]);
        assert_ne!(d[0], d[1]);
        for x in &d {
            assert!((x.norm() - 1.0).abs() < 1e-6);
        }
        let single = enc.encode_submap(&full).unwrap();
        assert_eq!(single, d[1]);
    }

    #[test]
    fn batch_matches_individual_encoding() {
        let enc = PcEncoder::new(PcEncoderConfig::tiny(2));
        let a = submap(vec![instance([3.0, 4.0, 1.0], 6, 0.2), instance([20.0, 8.0, 2.0], 9, 0.4)]);
        let b = submap(vec![
            instance([1.0, 1.0, 1.0], 5, 0.3),
            instance([9.0, 4.0, 1.0], 7, 0.6),
            instance([14.0, 25.0, 3.0], 4, 0.9),
        ]);
        let both = enc.encode_many(&[&a, &b]).unwrap();
        let ea = enc.encode_submap(&a).unwrap();
        let eb = enc.encode_submap(&b).unwrap();
        for (x, y) in both[0].0.iter().zip(&ea.0) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in both[1].0.iter().zip(&eb.0) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn row_lin(ps: &ParamSet, name: &str, x: &[f64]) -> Vec<f64> {
        let w = ps.get(ps.find(&format!("{name}.w")).unwrap());
        let b = ps.get(ps.find(&format!("{name}.b")).unwrap());
        (0..w.ncols())
            .map(|j| b[[0, j]] + (0..w.nrows()).map(|i| x[i] * w[[i, j]]).sum::<f64>())
            .collect()
    }

    fn relu(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| x.max(0.0)).collect()
    }

    fn two_layer(ps: &ParamSet, name: &str, x: &[f64]) -> Vec<f64> {
        let h = relu(row_lin(ps, &format!("{name}.0"), x));
        row_lin(ps, &format!("{name}.1"), &h)
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Step-by-step LSTM over `xs` with the named direction's weights.
    fn hand_lstm(ps: &ParamSet, dir: &str, xs: &[Vec<f64>], dh: usize) -> Vec<Vec<f64>> {
        let wx = ps.get(ps.find(&format!("pc.lstm.{dir}.input")).unwrap());
        let wh = ps.get(ps.find(&format!("pc.lstm.{dir}.recurrent")).unwrap());
        let b = ps.get(ps.find(&format!("pc.lstm.{dir}.bias")).unwrap());
        let (mut h, mut c) = (vec![0.0; dh], vec![0.0; dh]);
        let mut out = Vec::new();
        for x in xs {
            let pre = |j: usize| {
                b[[0, j]]
                    + (0..x.len()).map(|i| x[i] * wx[[i, j]]).sum::<f64>()
                    + (0..dh).map(|i| h[i] * wh[[i, j]]).sum::<f64>()
            };
            let mut hn = vec![0.0; dh];
            for u in 0..dh {
                let f = sigmoid(pre(u));
                let ig = sigmoid(pre(dh + u));
                let cand = pre(2 * dh + u).tanh();
                let o = sigmoid(pre(3 * dh + u));
                c[u] = f * c[u] + ig * cand;
                hn[u] = o * c[u].tanh();
            }
            h = hn;
            out.push(h.clone());
        }
        out
    }

    fn lstm_on(enc: &PcEncoder, x: &Mat, segs: &[Range<usize>]) -> Mat {
        let mut g = Graph::new();
        let p = enc.params.bind(&mut g, false);
        let xv = g.input(x.clone());
        let h = enc.bilstm(&mut g, &p, xv, segs);
        g.value(h).clone()
    }

    fn seq(rows: usize, cols: usize, salt: f64) -> Mat {
        Mat::from_shape_fn((rows, cols), |(i, j)| ((i * cols + j) as f64 * 0.61 + salt).sin())
    }

    #[test]
    fn instance_row_matches_hand_evaluation() {
        let enc = PcEncoder::new(PcEncoderConfig::tiny(3));
        let s = submap(vec![instance([12.0, 18.0, 1.5], 3, 0.7)]);
        let inputs = InstanceInputs::build(&[&s]).unwrap();
        let mut g = Graph::new();
        let p = enc.params.bind(&mut g, false);
        let row = enc.encode_instances(&mut g, &p, &inputs);
        let got = g.value(row).row(0).to_vec();

        let ps = &enc.params;
        let inst = &s.instances[0];
        let c = inst.centroid;
        let mut pooled = vec![f64::NEG_INFINITY; 6];
        for k in 0..3 {
            let pt = inst.points[k];
            let rgb = inst.colors[k];
            let x = [pt[0] - c[0], pt[1] - c[1], pt[2] - c[2], rgb[0], rgb[1], rgb[2], inst.intensities[k]];
            let h = relu(two_layer(ps, "pc.point", &x));
            for (m, v) in pooled.iter_mut().zip(h) {
                *m = m.max(v);
            }
        }
        let f = row_lin(ps, "pc.aggregate", &pooled);
        let col = two_layer(ps, "pc.color", &inst.mean_color());
        let pos = two_layer(ps, "pc.position", &[(c[0] - 15.0) / 15.0, (c[1] - 15.0) / 15.0, c[2] / WORLD_HEIGHT]);
        let den = two_layer(ps, "pc.intensity", &[inst.density.ln_1p()]);
        let cat: Vec<f64> = [f, col, pos, den].concat();
        let want = relu(row_lin(ps, "pc.fuse", &cat));
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn single_point_instance_uses_that_point() {
        let enc = PcEncoder::new(PcEncoderConfig::tiny(4));
        let s = submap(vec![instance([4.0, 4.0, 1.0], 1, 0.2)]);
        let inputs = InstanceInputs::build(&[&s]).unwrap();
        assert_eq!(inputs.points.nrows(), 1);
        for j in 0..3 {
            assert_eq!(inputs.points[[0, j]], 0.0);
        }
        let d = enc.encode_submap(&s).unwrap();
        assert!((d.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn attention_maps_are_normalized() {
        let enc = PcEncoder::new(PcEncoderConfig::tiny(5));
        let a = submap((0..5).map(|i| instance([2.0 + 5.0 * i as f64, 3.0 * i as f64, 1.0], 4, i as f64)).collect());
        let b = submap((0..3).map(|i| instance([1.0 + 7.0 * i as f64, 20.0, 2.0], 5, 0.3 * i as f64)).collect());
        let mut g = Graph::new();
        let p = enc.params.bind(&mut g, false);
        let trace = enc.encode_batch(&mut g, &p, &[&a, &b]).unwrap();
        assert_eq!(trace.scale_attention.len(), 3);
        for &node in &trace.scale_attention {
            for pair in g.attention_probs(node).unwrap() {
                for row in pair[0].rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
        let (first, second) = g.dual_attention_maps(trace.local.unwrap()).unwrap();
        for (x, y) in first.iter().zip(second) {
            for row in x.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
            for row in y.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
            let w = x * y;
            for row in w.rows() {
                assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
                let s: f64 = row.sum();
                assert!(s > 0.0 && s <= 1.0 + 1e-6);
            }
        }
        let hidden = g.value(trace.hidden.unwrap());
        assert_eq!(hidden.dim(), (8, 2 * enc.config.d_hidden));
        assert!(hidden.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn single_token_mfam_returns_mid_scale_residual() {
        let mut enc = PcEncoder::new(PcEncoderConfig::tiny(6));
        let d = enc.config.d_model;
        for w in CONV_WIDTHS {
            let (_, _, value) = enc.scale_params(w).unwrap();
            *enc.params.get_mut(value) = Mat::eye(d);
        }
        let s = seq(1, d, 0.4);
        let mut g = Graph::new();
        let p = enc.params.bind(&mut g, false);
        let x = g.input(s.clone());
        let (out, _, _) = enc.mfam(&mut g, &p, x, &[0..1]);
        let (kernel, bias, _) = enc.scale_params(3).unwrap();
        // With zero padding only the centre tap of the width-3 kernel sees data.
        let k = enc.params.get(kernel).slice(ndarray::s![d..2 * d, ..]).to_owned();
        let want = (s.dot(&k) + enc.params.get(bias)).mapv(|v| v.max(0.0)) + &s;
        let got = g.value(out);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_with_zero_weights_stays_zero() {
        let mut enc = PcEncoder::new(PcEncoderConfig::tiny(7));
        let ids: Vec<_> = enc.params.ids().filter(|&id| enc.params.name(id).starts_with("pc.lstm")).collect();
        for id in ids {
            enc.params.get_mut(id).fill(0.0);
        }
        let h = lstm_on(&enc, &seq(4, enc.config.d_model, 0.1), &[0..4]);
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_matches_hand_recurrence() {
        let enc = PcEncoder::new(PcEncoderConfig::tiny(8));
        let dh = enc.config.d_hidden;
        let x = seq(2, enc.config.d_model, 0.9);
        let h = lstm_on(&enc, &x, &[0..2]);
        let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        let fwd = hand_lstm(&enc.params, "forward", &rows, dh);
        let rev: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let mut bwd = hand_lstm(&enc.params, "backward", &rev, dh);
        bwd.reverse();
        for t in 0..2 {
            for u in 0..dh {
                assert!((h[[t, u]] - fwd[t][u]).abs() < 1e-12);
                assert!((h[[t, dh + u]] - bwd[t][u]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padded_batch_matches_separate_sequences() {
        let enc = PcEncoder::new(PcEncoderConfig::tiny(9));
        let x = seq(6, enc.config.d_model, 0.2);
        let together = lstm_on(&enc, &x, &[0..1, 1..6]);
        let first = lstm_on(&enc, &x.slice(ndarray::s![0..1, ..]).to_owned(), &[0..1]);
        let rest = lstm_on(&enc, &x.slice(ndarray::s![1..6, ..]).to_owned(), &[0..5]);
        let joined = ndarray::concatenate![ndarray::Axis(0), first, rest];
        for (a, b) in together.iter().zip(joined.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invariances() {
        let enc = PcEncoder::new(PcEncoderConfig::tiny(10));
        let insts: Vec<_> = (0..4)
            .map(|i| instance([3.0 + 6.0 * i as f64, 25.0 - 5.0 * i as f64, 1.0], 6, i as f64 * 0.5))
            .collect();
        let base = submap(insts.clone());
        let d = enc.encode_submap(&base).unwrap();
        assert_eq!(d, enc.encode_submap(&base.clone()).unwrap());

        let mut reversed = submap(insts.iter().rev().cloned().collect());
        reversed.instance_indices = (0..4).rev().collect();
        assert_eq!(d, enc.encode_submap(&reversed).unwrap());

        let mut permuted = base.clone();
        for inst in &mut permuted.instances {
            inst.points.reverse();
            inst.colors.reverse();
            inst.intensities.reverse();
        }
        assert_eq!(d, enc.encode_submap(&permuted).unwrap());

        let moved = enc.encode_submap(&base.translated([40.0, -20.0])).unwrap();
        for (a, b) in moved.0.iter().zip(&d.0) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [11u64, 12, 13] {
            let mut enc = PcEncoder::new(PcEncoderConfig::tiny(seed));
            // Zero biases put many ReLUs exactly on their kink; move off it.
            let ids: Vec<_> = enc.params.ids().collect();
            for id in ids {
                let m = enc.params.get_mut(id);
                let cols = m.ncols();
                for ((r, c), v) in m.indexed_iter_mut() {
                    *v += 0.1 * ((r * cols + c) as f64 * 1.37 + id.index() as f64 + seed as f64).sin();
                }
            }
            let a = submap(
                (0..3)
                    .map(|i| instance([4.0 + 8.0 * i as f64, 5.0 + 3.0 * i as f64, 1.0], 4, seed as f64 + i as f64))
                    .collect(),
            );
            let b = submap(
                (0..4)
                    .map(|i| instance([2.0 + 6.0 * i as f64, 22.0 - 4.0 * i as f64, 2.0], 3, 0.3 * i as f64))
                    .collect(),
            );
            let empty = submap(vec![]);
            let weights = seq(3, enc.config.out_dim, seed as f64);
            let loss = |ps: &ParamSet, grads: bool| {
                let e = PcEncoder { params: ps.clone(), ..enc.clone() };
                let mut g = Graph::new();
                let p = e.params.bind(&mut g, true);
                let t = e.encode_batch(&mut g, &p, &[&a, &empty, &b]).unwrap();
                let l = g.dot_const(t.descriptors, weights.clone());
                let v = g.scalar(l);
                (v, grads.then(|| p.gradients(&mut g.backward(l))))
            };
            let analytic = loss(&enc.params, true).1.unwrap();
            assert!(analytic.iter().all(|g| g.is_some()), "every parameter group reaches the loss");
            let report = crate::gradcheck::check_param_gradients(
                &enc.params,
                &analytic,
                |ps| loss(ps, false).0,
                crate::gradcheck::GradCheck::default(),
            );
            assert!(report.passed(), "seed {seed}: {report}");
        }
    }
}
