use std::collections::HashSet;
use std::sync::OnceLock;

use despos::pc_encoder::{PcEncoder, PcEncoderConfig};
use despos::retrieval::{coarse_recall, CandidateSet, DescriptorIndex};
use despos::scenegen::{describe_pose, generate_world, perturb_hints, Palette, PerturbMode, World};
use despos::text_encoder::distill_loss;
use despos::training::{balanced_batches, contrastive_loss};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| generate_world(21, [60.0, 60.0], 40, &Palette::default()).unwrap())
}

fn unit_rows(values: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_vec((rows, cols), values[..rows * cols].to_vec()).unwrap();
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt().max(1e-9);
        r /= n;
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn point_order_never_changes_descriptor(submap in 0usize..16, seed in any::<u64>()) {
        let s = &world().submaps[submap];
        let enc = PcEncoder::new(PcEncoderConfig::tiny(5));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut permuted = s.clone();
        for inst in &mut permuted.instances {
            let mut idx: Vec<usize> = (0..inst.points.len()).collect();
            idx.shuffle(&mut rng);
            inst.points = idx.iter().map(|&i| inst.points[i]).collect();
            inst.colors = idx.iter().map(|&i| inst.colors[i]).collect();
            inst.intensities = idx.iter().map(|&i| inst.intensities[i]).collect();
        }
        prop_assert_eq!(enc.encode_submap(s).unwrap(), enc.encode_submap(&permuted).unwrap());
    }

    #[test]
    fn contrastive_loss_is_non_negative(
        values in prop::collection::vec(-1.0f64..1.0, 48),
        b in 1usize..6,
        tau in 0.05f64..2.0,
    ) {
        let t = unit_rows(&values, b, 4);
        let p = unit_rows(&values[24..], b, 4);
        let l = contrastive_loss(&t, &p, tau).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
    }

    #[test]
    fn distill_loss_ignores_scale_and_argument_order(
        u in prop::collection::vec(-1.0f64..1.0, 6),
        v in prop::collection::vec(-1.0f64..1.0, 6),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let base = distill_loss(&u, &v).unwrap();
        let au: Vec<f64> = u.iter().map(|x| a * x).collect();
        let bv: Vec<f64> = v.iter().map(|x| b * x).collect();
        prop_assert!((distill_loss(&au, &bv).unwrap() - base).abs() < 1e-12);
        prop_assert_eq!(distill_loss(&v, &u).unwrap(), base);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&base));
    }

    #[test]
    fn topk_agrees_with_sorting_every_row(
        values in prop::collection::vec(-1.0f64..1.0, 8 * 40 + 8),
        n in 1usize..40,
        k in 1usize..50,
    ) {
        let rows: Vec<Vec<f64>> = unit_rows(&values, n, 8).rows().into_iter().map(|r| r.to_vec()).collect();
        let q = unit_rows(&values[8 * 40..], 1, 8).row(0).to_vec();
        let index = DescriptorIndex::build((0..n).collect(), &rows).unwrap();
        let mut brute: Vec<(usize, f64)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.iter().zip(&q).map(|(a, b)| a * b).sum()))
            .collect();
        brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        brute.truncate(k);
        let got: Vec<usize> = index.topk(&q, k).into_iter().map(|x| x.0).collect();
        prop_assert_eq!(got, brute.into_iter().map(|x| x.0).collect::<Vec<_>>());
    }

    #[test]
    fn balanced_batches_cover_epoch_with_distinct_keys(
        keys in prop::collection::vec(0usize..12, 1..80),
        batch in 1usize..20,
        seed in any::<u64>(),
    ) {
        let batches = balanced_batches(&keys, batch, &mut ChaCha8Rng::seed_from_u64(seed));
        let distinct: HashSet<usize> = keys.iter().copied().collect();
        prop_assert_eq!(batches.len(), keys.len().div_ceil(batch));
        for b in &batches {
            prop_assert_eq!(b.len(), batch.min(distinct.len()));
            let seen: HashSet<usize> = b.iter().map(|&i| keys[i]).collect();
            prop_assert_eq!(seen.len(), b.len());
        }
    }

    #[test]
    fn coarse_recall_grows_with_k(
        ranks in prop::collection::vec(prop::collection::vec(0usize..20, 1..10), 1..30),
        positives in prop::collection::vec(0usize..20, 30),
    ) {
        let sets: Vec<CandidateSet> = ranks
            .iter()
            .enumerate()
            .map(|(q, r)| CandidateSet { query: q, ranked: r.iter().map(|&id| (id, 0.0)).collect() })
            .collect();
        let table = coarse_recall(&sets, &positives[..sets.len()], &[1, 2, 3, 5, 10], "t");
        prop_assert!(table.check_monotone().is_ok());
    }

    #[test]
    fn saved_hints_are_an_ordered_subset(x in 8.0f64..52.0, y in 8.0f64..52.0, seed in any::<u64>()) {
        let w = world();
        let Ok(q) = describe_pose(w, [x, y], 6) else { return Ok(()); };
        for mode in [PerturbMode::Save75, PerturbMode::Save50] {
            let out = perturb_hints(&q, mode, w, seed).unwrap();
            prop_assert_eq!(out.hints.len(), mode.kept(q.hints.len()));
            let mut pos = 0;
            for h in &out.hints {
                let at = q.hints[pos..].iter().position(|s| s == h);
                prop_assert!(at.is_some());
                pos += at.unwrap() + 1;
            }
        }
        let swapped = perturb_hints(&q, PerturbMode::SwapOne, w, seed).unwrap();
        let differing = swapped.hints.iter().zip(&q.hints).filter(|(a, b)| a != b).count();
        prop_assert!(differing <= 1);
        prop_assert_eq!(swapped.hints.len(), q.hints.len());
    }
}
