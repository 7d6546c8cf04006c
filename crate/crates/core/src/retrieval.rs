//! Descriptor index, top-k retrieval, recall tables and reports.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fine::{instance_features, localize_batch, Candidate, FineModel, PosePrediction};
use crate::pc_encoder::PcEncoder;
use crate::scenegen::{perturb_hints, PerturbMode, Submap, TextQuery, Vec2};
use crate::tape::Mat;
use crate::text_encoder::{FeatureCache, TextEncoder};

const NORM_TOLERANCE: f64 = 1e-6;

/// Immutable matrix of unit-norm submap descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorIndex {
    ids: Vec<usize>,
    matrix: Mat,
}

/// Ranked `(submap_id, cosine)` pairs for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query: usize,
    pub ranked: Vec<(usize, f64)>,
}

impl DescriptorIndex {
    pub fn build(ids: Vec<usize>, descriptors: &[Vec<f64>]) -> Result<Self> {
        assert_eq!(ids.len(), descriptors.len(), "one id per descriptor");
        let dim = descriptors.first().map_or(0, |d| d.len());
        for (row, d) in descriptors.iter().enumerate() {
            if d.len() != dim {
                return Err(Error::Index {
                    row,
                    reason: format!("has {} entries, expected {dim}", d.len()),
                });
            }
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !n.is_finite() || (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Index {
                    row,
                    reason: format!("norm {n} is not 1"),
                });
            }
        }
        let matrix = Mat::from_shape_fn((descriptors.len(), dim), |(r, c)| descriptors[r][c]);
        Ok(Self { ids, matrix })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Exact top-k by cosine similarity; ties go to the lower id.
    pub fn topk(&self, query: &[f64], k: usize) -> Vec<(usize, f64)> {
        assert!(k >= 1, "k must be at least 1");
        assert_eq!(query.len(), self.dim(), "query dimension");
        let q = ndarray::ArrayView1::from(query);
        let sims = self.matrix.dot(&q);
        rank(&self.ids, sims.as_slice().expect("contiguous"), k)
    }

    /// [`DescriptorIndex::topk`] for every row of `queries`.
    pub fn topk_batch(&self, queries: &[Vec<f64>], k: usize) -> Vec<CandidateSet> {
        queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| CandidateSet {
                query: i,
                ranked: self.topk(q, k),
            })
            .collect()
    }
}

fn rank(ids: &[usize], sims: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = ids.iter().copied().zip(sims.iter().copied()).collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// One recall value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: usize,
    pub threshold_m: Option<f64>,
    pub recall: f64,
    pub n: usize,
}

/// Recall values of one metric family, rows ordered by k then threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub name: String,
    pub rows: Vec<MetricRow>,
}

impl MetricsTable {
    pub fn recall(&self, k: usize, threshold: Option<f64>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.k == k && r.threshold_m == threshold)
            .map(|r| r.recall)
    }

    /// Recall must not decrease with k (same threshold) or with the
    /// threshold (same k).
    pub fn check_monotone(&self) -> Result<()> {
        for a in &self.rows {
            for b in &self.rows {
                let k_order = a.threshold_m == b.threshold_m && a.k < b.k;
                let t_order = a.k == b.k
                    && matches!((a.threshold_m, b.threshold_m), (Some(x), Some(y)) if x < y);
                if (k_order || t_order) && a.recall > b.recall {
                    return Err(Error::Invalid(format!(
                        "table {}: recall {} at (k={}, {:?}) exceeds {} at (k={}, {:?})",
                        self.name, a.recall, a.k, a.threshold_m, b.recall, b.k, b.threshold_m
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fraction of queries whose positive submap is in the top k.
pub fn coarse_recall(sets: &[CandidateSet], positives: &[usize], ks: &[usize], name: &str) -> MetricsTable {
    let n = positives.len();
    let rows = ks
        .iter()
        .map(|&k| {
            let hits = sets
                .iter()
                .zip(positives)
                .filter(|(s, &p)| s.ranked.iter().take(k).any(|&(id, _)| id == p))
                .count();
            MetricRow {
                k,
                threshold_m: None,
                recall: ratio(hits, n),
                n,
            }
        })
        .collect();
    MetricsTable {
        name: name.to_string(),
        rows,
    }
}

fn ratio(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

fn distance(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Fraction of queries with any of the first k refined positions strictly
/// closer than the threshold to the ground truth.
pub fn localization_recall(
    predictions: &[Vec<PosePrediction>],
    ground_truth: &[Vec2],
    ks: &[usize],
    thresholds: &[f64],
    name: &str,
) -> MetricsTable {
    let n = ground_truth.len();
    let mut rows = Vec::new();
    for &k in ks {
        for &t in thresholds {
            let hits = predictions
                .iter()
                .zip(ground_truth)
                .filter(|(p, &gt)| p.iter().take(k).any(|x| distance(x.position, gt) < t))
                .count();
            rows.push(MetricRow {
                k,
                threshold_m: Some(t),
                recall: ratio(hits, n),
                n,
            });
        }
    }
    MetricsTable {
        name: name.to_string(),
        rows,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

impl ReportFormat {
    /// Guesses from a file extension, defaulting to CSV.
    pub fn for_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("md") | Some("markdown") => ReportFormat::Markdown,
            _ => ReportFormat::Csv,
        }
    }
}

/// Renders tables as CSV (`table,k,threshold_m,recall,n`) or markdown.
pub fn emit_report(tables: &[MetricsTable], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str("table,k,threshold_m,recall,n\n");
            for t in tables {
                for r in &t.rows {
                    let th = r.threshold_m.map(|x| x.to_string()).unwrap_or_default();
                    writeln!(out, "{},{},{},{},{}", t.name, r.k, th, r.recall, r.n).unwrap();
                }
            }
        }
        ReportFormat::Markdown => {
            out.push_str("| table | recall |\n| --- | --- |\n");
            for t in tables {
                let mut ks: Vec<usize> = t.rows.iter().map(|r| r.k).collect();
                ks.dedup();
                let cells: Vec<String> = if t.rows.iter().all(|r| r.threshold_m.is_none()) {
                    let labels: Vec<String> = ks.iter().map(|k| k.to_string()).collect();
                    let values: Vec<String> = t.rows.iter().map(|r| format!("{:.2}", r.recall)).collect();
                    vec![format!("@{}: {}", labels.join("/"), values.join(" / "))]
                } else {
                    ks.iter()
                        .map(|&k| {
                            let rows: Vec<&MetricRow> = t.rows.iter().filter(|r| r.k == k).collect();
                            let th: Vec<String> =
                                rows.iter().map(|r| format!("{}", r.threshold_m.unwrap_or(0.0))).collect();
                            let vals: Vec<String> = rows.iter().map(|r| format!("{:.2}", r.recall)).collect();
                            format!("top-{k} E<{}m: {}", th.join("/"), vals.join("/"))
                        })
                        .collect()
                };
                writeln!(out, "| {} | {} |", t.name, cells.join("; ")).unwrap();
            }
        }
    }
    out
}

/// Compact cell strings: `0.33 / 0.54 / 0.64` for coarse rows,
/// `0.40/0.54/0.57` for one k of a localization table.
pub fn coarse_cell(t: &MetricsTable) -> String {
    t.rows.iter().map(|r| format!("{:.2}", r.recall)).collect::<Vec<_>>().join(" / ")
}

pub fn localization_cell(t: &MetricsTable, k: usize) -> String {
    t.rows
        .iter()
        .filter(|r| r.k == k)
        .map(|r| format!("{:.2}", r.recall))
        .collect::<Vec<_>>()
        .join("/")
}

/// Trained models assembled for evaluation.
pub struct Pipeline<'a> {
    pub text: &'a TextEncoder,
    pub pc: &'a PcEncoder,
    pub fine: &'a FineModel,
}

impl<'a> Pipeline<'a> {
    /// Text and point-cloud encoders from the coarse checkpoint, the fine
    /// model from the fine checkpoint.
    pub fn from_checkpoints(coarse: &'a Checkpoint, fine: &'a Checkpoint) -> Result<Self> {
        Ok(Self {
            text: &coarse.text,
            pc: coarse
                .pc
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("coarse checkpoint has no point-cloud encoder".into()))?,
            fine: fine
                .fine
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("fine checkpoint has no fine model".into()))?,
        })
    }
}

/// Everything measured on one query set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub coarse: MetricsTable,
    pub localization: MetricsTable,
    pub candidates: Vec<CandidateSet>,
    pub predictions: Vec<Vec<PosePrediction>>,
    /// Mean fine error over queries whose top-1 submap is the positive one.
    pub fine_error_on_correct: f64,
    /// Predict-the-center error on the same queries.
    pub center_error_on_correct: f64,
    pub correct_top1: usize,
}

/// Precomputed submap descriptors and instance rows for a world.
pub struct WorldIndex<'w> {
    pub submaps: Vec<&'w Submap>,
    pub index: DescriptorIndex,
    pub instance_rows: Vec<Mat>,
}

impl<'w> WorldIndex<'w> {
    pub fn build(pipeline: &Pipeline, dataset: &'w Dataset) -> Result<Self> {
        let submaps: Vec<&Submap> = dataset.world.submaps.iter().collect();
        let descriptors: Vec<Vec<f64>> = submaps
            .par_chunks(32)
            .map(|chunk| pipeline.pc.encode_many(chunk))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .map(|d| d.0)
            .collect();
        let ids = submaps.iter().map(|s| s.id).collect();
        let index = DescriptorIndex::build(ids, &descriptors)?;
        let instance_rows = instance_features(pipeline.pc, &submaps)?;
        Ok(Self {
            submaps,
            index,
            instance_rows,
        })
    }
}

pub fn evaluate(
    pipeline: &Pipeline,
    dataset: &Dataset,
    world: &WorldIndex,
    queries: &[TextQuery],
    coarse_ks: &[usize],
    loc_ks: &[usize],
    thresholds: &[f64],
    label: &str,
) -> Result<Evaluation> {
    let max_k = coarse_ks.iter().chain(loc_ks).copied().max().unwrap_or(1).max(1);
    let cache = FeatureCache::build(pipeline.text, queries.iter().flat_map(|q| q.hints.iter().map(|s| s.as_str())));
    let hints: Vec<&[String]> = queries.iter().map(|q| q.hints.as_slice()).collect();
    let descriptors: Vec<Vec<f64>> = hints
        .par_chunks(128)
        .map(|chunk| pipeline.text.encode_cached(&cache, chunk))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .map(|d| d.0)
        .collect();
    let candidates = world.index.topk_batch(&descriptors, max_k);
    let positives: Vec<usize> = queries.iter().map(|q| q.positive_submap_id).collect();
    let coarse = coarse_recall(&candidates, &positives, coarse_ks, &format!("{label}_coarse"));

    let fine_k = loc_ks.iter().copied().max().unwrap_or(1);
    let lookup = |id: usize| world.instance_rows[id].clone();
    let mut flat = Vec::new();
    for (q, set) in queries.iter().zip(&candidates) {
        for &(id, sim) in set.ranked.iter().take(fine_k) {
            let submap = dataset
                .world
                .submap(id)
                .ok_or_else(|| Error::Invalid(format!("index returned unknown submap {id}")))?;
            flat.push(Candidate {
                hints: &q.hints,
                submap,
                similarity: sim,
            });
        }
    }
    let preds = flat
        .par_chunks(256)
        .map(|chunk| localize_batch(pipeline.fine, &cache, &lookup, chunk))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    let mut predictions = Vec::with_capacity(queries.len());
    let mut it = preds.into_iter();
    for set in &candidates {
        predictions.push(it.by_ref().take(set.ranked.len().min(fine_k)).collect::<Vec<_>>());
    }
    let gts: Vec<Vec2> = queries.iter().map(|q| q.pose_gt).collect();
    let localization = localization_recall(&predictions, &gts, loc_ks, thresholds, &format!("{label}_localization"));

    let mut fine_err = 0.0;
    let mut center_err = 0.0;
    let mut correct = 0usize;
    for ((q, set), preds) in queries.iter().zip(&candidates).zip(&predictions) {
        if set.ranked.first().map(|r| r.0) == Some(q.positive_submap_id) {
            let p = &preds[0];
            let submap = &dataset.world.submaps[q.positive_submap_id];
            fine_err += distance(p.position, q.pose_gt);
            center_err += distance(submap.center, q.pose_gt);
            correct += 1;
        }
    }
    let denom = correct.max(1) as f64;
    Ok(Evaluation {
        coarse,
        localization,
        candidates,
        predictions,
        fine_error_on_correct: fine_err / denom,
        center_error_on_correct: center_err / denom,
        correct_top1: correct,
    })
}

/// Perturbs every query with `mode`; the seed of query `i` is
/// `seed + i`.
pub fn perturb_queries(dataset: &Dataset, queries: &[TextQuery], mode: PerturbMode, seed: u64) -> Result<Vec<TextQuery>> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| perturb_hints(q, mode, &dataset.world, seed.wrapping_add(i as u64)))
        .collect()
}

/// Evaluation under each perturbation mode.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep(
    pipeline: &Pipeline,
    dataset: &Dataset,
    world: &WorldIndex,
    queries: &[TextQuery],
    modes: &[PerturbMode],
    coarse_ks: &[usize],
    loc_ks: &[usize],
    thresholds: &[f64],
    seed: u64,
) -> Result<Vec<(PerturbMode, Evaluation)>> {
    modes
        .iter()
        .map(|&mode| {
            let q = perturb_queries(dataset, queries, mode, seed)?;
            let e = evaluate(pipeline, dataset, world, &q, coarse_ks, loc_ks, thresholds, mode.as_str())?;
            Ok((mode, e))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fine::PosePrediction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_units(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| unit((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect()
    }

    fn brute_force(rows: &[Vec<f64>], q: &[f64], k: usize) -> Vec<usize> {
        let mut scored: Vec<(usize, f64)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.iter().zip(q).map(|(a, b)| a * b).sum()))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.into_iter().take(k).map(|x| x.0).collect()
    }

    #[test]
    fn build_checks_rows() {
        let rows = random_units(16, 8, 1);
        assert_eq!(DescriptorIndex::build((0..16).collect(), &rows).unwrap().len(), 16);
        let dup = vec![rows[0].clone(), rows[0].clone()];
        assert_eq!(DescriptorIndex::build(vec![0, 1], &dup).unwrap().len(), 2);
        let mut bad = rows.clone();
        bad[3] = vec![0.0; 8];
        assert!(matches!(
            DescriptorIndex::build((0..16).collect(), &bad),
            Err(Error::Index { row: 3, .. })
        ));
    }

    #[test]
    fn topk_basics() {
        let rows = random_units(5, 6, 2);
        let idx = DescriptorIndex::build((0..5).collect(), &rows).unwrap();
        let top = idx.topk(&rows[2], 1);
        assert_eq!(top[0].0, 2);
        assert!((top[0].1 - 1.0).abs() < 1e-6);
        let q = random_units(1, 6, 3).remove(0);
        let got: Vec<usize> = idx.topk(&q, 3).into_iter().map(|x| x.0).collect();
        assert_eq!(got, brute_force(&rows, &q, 3));
        assert_eq!(idx.topk(&q, 50).len(), 5);
        let tied = DescriptorIndex::build(vec![7, 3], &[rows[0].clone(), rows[0].clone()]).unwrap();
        let r = tied.topk(&rows[0], 2);
        assert_eq!((r[0].0, r[1].0), (3, 7));
        let r = idx.topk(&q, 5);
        assert!(r.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn batch_equals_serial() {
        let rows = random_units(40, 8, 4);
        let idx = DescriptorIndex::build((0..40).collect(), &rows).unwrap();
        let qs = random_units(30, 8, 5);
        let batch = idx.topk_batch(&qs, 4);
        for (i, q) in qs.iter().enumerate() {
            assert_eq!(batch[i].ranked, idx.topk(q, 4));
        }
    }

    #[test]
    fn coarse_recall_hand_count() {
        let sets: Vec<CandidateSet> = [vec![5, 1, 2, 3, 4, 6, 7], vec![1, 5, 2, 3, 4, 6, 7], vec![1, 2, 3, 4, 6, 7, 5]]
            .into_iter()
            .enumerate()
            .map(|(i, ids)| CandidateSet {
                query: i,
                ranked: ids.into_iter().map(|id| (id, 0.0)).collect(),
            })
            .collect();
        let t = coarse_recall(&sets, &[5, 5, 5], &[1, 3, 5], "c");
        assert_eq!(t.recall(1, None), Some(1.0 / 3.0));
        assert_eq!(t.recall(3, None), Some(2.0 / 3.0));
        assert_eq!(t.recall(5, None), Some(2.0 / 3.0));
        t.check_monotone().unwrap();
        assert_eq!(coarse_cell(&t), "0.33 / 0.67 / 0.67");
    }

    fn pred(x: f64) -> PosePrediction {
        PosePrediction {
            submap_id: 0,
            offset: [0.0, 0.0],
            position: [x, 0.0],
            similarity: 0.0,
            empty_submap: false,
        }
    }

    #[test]
    fn localization_threshold_is_strict() {
        let preds = vec![vec![pred(4.9)], vec![pred(5.1)], vec![pred(30.0), pred(9.0)]];
        let gts = vec![[0.0, 0.0]; 3];
        let t = localization_recall(&preds, &gts, &[1, 5], &[5.0, 10.0], "l");
        assert_eq!(t.recall(1, Some(5.0)), Some(1.0 / 3.0));
        assert_eq!(t.recall(1, Some(10.0)), Some(2.0 / 3.0));
        assert_eq!(t.recall(5, Some(10.0)), Some(1.0));
        t.check_monotone().unwrap();
        assert_eq!(localization_cell(&t, 5), "0.33/1.00");
    }

    #[test]
    fn monotonicity_violation_is_reported() {
        let t = MetricsTable {
            name: "x".into(),
            rows: vec![
                MetricRow { k: 1, threshold_m: None, recall: 0.5, n: 2 },
                MetricRow { k: 3, threshold_m: None, recall: 0.0, n: 2 },
            ],
        };
        assert!(t.check_monotone().is_err());
    }

    #[test]
    fn reports_are_deterministic() {
        let t = MetricsTable {
            name: "full_coarse".into(),
            rows: vec![
                MetricRow { k: 1, threshold_m: None, recall: 0.25, n: 4 },
                MetricRow { k: 3, threshold_m: None, recall: 0.5, n: 4 },
            ],
        };
        let csv = emit_report(std::slice::from_ref(&t), ReportFormat::Csv);
        assert_eq!(csv, "table,k,threshold_m,recall,n\nfull_coarse,1,,0.25,4\nfull_coarse,3,,0.5,4\n");
        assert_eq!(csv, emit_report(&[t.clone()], ReportFormat::Csv));
        assert_eq!(emit_report(&[], ReportFormat::Csv), "table,k,threshold_m,recall,n\n");
        let md = emit_report(&[t], ReportFormat::Markdown);
        assert!(md.contains("0.25 / 0.50"));
        assert!("pdf".parse::<ReportFormat>().is_err());
    }
}
