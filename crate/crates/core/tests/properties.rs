mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;

use common::*;
use newsnav_core::analytics::{compute_stats, StatsAccumulator, DEFAULT_THRESHOLDS};
use newsnav_core::detect::{read_predictions, write_prediction_line, ClassId, Prediction};
use newsnav_core::embedstore::{EmbeddingFamily, EmbeddingRecord, EmbeddingStore, Metric};
use newsnav_core::evalmap::{evaluate, GroundTruth};
use newsnav_core::geometry::{contains_point, iou, union_area, NormBox};
use newsnav_core::pipeline::PageRecord;

fn norm_box() -> impl Strategy<Value = NormBox> {
    any::<u64>().prop_map(|seed| nb(random_box(&mut rng(seed), 0.005)))
}

fn scene() -> impl Strategy<Value = (BTreeMap<String, Vec<Prediction>>, Vec<GroundTruth>)> {
    any::<u64>().prop_map(|seed| random_scene(&mut rng(seed), 8, 16, 3))
}

fn records(seed: u64, pages: usize) -> Vec<PageRecord> {
    let mut rng = rng(seed);
    (0..pages)
        .map(|i| {
            let n = rng.random_range(0..10);
            let boxes: Vec<NormBox> = (0..n).map(|_| nb(random_box(&mut rng, 0.01))).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let classes: Vec<ClassId> = (0..n).map(|_| ClassId::ALL[rng.random_range(0..7)]).collect();
            let crops = classes.iter().filter(|c| c.is_cropped()).map(|_| String::new()).collect();
            PageRecord {
                filepath: format!("b/{i}.jp2"),
                pub_date: format!("{}-03-01", 1880 + rng.random_range(0..4)),
                boxes,
                scores,
                pred_classes: classes,
                ocr: vec![Vec::new(); n],
                visual_content_filepaths: crops,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn iou_matches_oracle(a in norm_box(), b in norm_box()) {
        let want = oracle_iou(a.to_array(), b.to_array());
        prop_assert!((iou(&a, &b) - want).abs() < 1e-12);
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn union_area_bounds(seed in any::<u64>(), n in 1usize..12) {
        let mut r = rng(seed);
        let boxes: Vec<NormBox> = (0..n).map(|_| nb(random_box(&mut r, 0.01))).collect();
        let u = union_area(&boxes);
        let max_single = boxes.iter().map(NormBox::area).fold(0.0, f64::max);
        let sum: f64 = boxes.iter().map(NormBox::area).sum();
        prop_assert!(u >= max_single - 1e-12 && u <= sum + 1e-12 && u <= 1.0 + 1e-12);
        let mut reversed = boxes.clone();
        reversed.reverse();
        prop_assert!((union_area(&reversed) - u).abs() < 1e-12);
    }

    #[test]
    fn point_containment_is_half_open(b in norm_box()) {
        prop_assert!(contains_point(&b, b.x1(), b.y1()));
        prop_assert!(!contains_point(&b, b.x2(), b.y1()));
        prop_assert!(!contains_point(&b, b.x1(), b.y2()));
    }

    #[test]
    fn ap_invariant_under_monotone_score_transform((preds, gts) in scene()) {
        let base = evaluate(&preds, &gts).unwrap();
        // Lift scores into [0.525, 1) so squaring keeps them above the floor.
        let lifted: BTreeMap<String, Vec<Prediction>> = preds
            .iter()
            .map(|(k, v)| {
                let v = v.iter().map(|p| Prediction::new(p.bbox, 0.5 + p.score / 2.0, p.class_id)).collect();
                (k.clone(), v)
            })
            .collect();
        let squared: BTreeMap<String, Vec<Prediction>> = lifted
            .iter()
            .map(|(k, v)| {
                let v = v.iter().map(|p| Prediction::new(p.bbox, p.score * p.score, p.class_id)).collect();
                (k.clone(), v)
            })
            .collect();
        let a = evaluate(&lifted, &gts).unwrap();
        let b = evaluate(&squared, &gts).unwrap();
        prop_assert_eq!(&a.per_category_ap, &b.per_category_ap);
        prop_assert_eq!(a.one_class_ap, b.one_class_ap);
        prop_assert!(base.map_value >= 0.0 && base.map_value <= 1.0);
    }

    #[test]
    fn trailing_false_positive_never_raises_ap((preds, gts) in scene(), class_idx in 0usize..3) {
        let class = ClassId::ALL[class_idx];
        let base = evaluate(&preds, &gts).unwrap();
        let mut more = preds.clone();
        // Far from every box in the scene and scored below everything else.
        more.entry("unmatched-page".into())
            .or_default()
            .push(Prediction::new(nb([0.0, 0.0, 0.01, 0.01]), 0.05, class));
        let after = evaluate(&more, &gts).unwrap();
        if let (Some(b), Some(a)) = (base.per_category_ap[&class], after.per_category_ap[&class]) {
            prop_assert!(a <= b + 1e-12);
        }
        prop_assert!(after.one_class_ap <= base.one_class_ap + 1e-12);
    }

    #[test]
    fn one_class_ap_ignores_labels((preds, gts) in scene(), shift in 1u8..7) {
        let base = evaluate(&preds, &gts).unwrap();
        let relabel = |c: ClassId| ClassId::from_code(((c.code() + shift) % 7) as i64).unwrap();
        let preds2: BTreeMap<String, Vec<Prediction>> = preds
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|p| Prediction::new(p.bbox, p.score, relabel(p.class_id))).collect()))
            .collect();
        let after = evaluate(&preds2, &gts).unwrap();
        prop_assert_eq!(base.one_class_ap, after.one_class_ap);
    }

    #[test]
    fn stats_are_order_and_partition_independent(seed in any::<u64>(), pages in 1usize..25, cut in 0usize..25) {
        let recs = records(seed, pages);
        let whole = compute_stats(&recs, &DEFAULT_THRESHOLDS).unwrap();
        let mut reversed = recs.clone();
        reversed.reverse();
        prop_assert_eq!(&compute_stats(&reversed, &DEFAULT_THRESHOLDS).unwrap(), &whole);
        let cut = cut.min(recs.len());
        let mut left = StatsAccumulator::new(&DEFAULT_THRESHOLDS).unwrap();
        let mut right = StatsAccumulator::new(&DEFAULT_THRESHOLDS).unwrap();
        recs[..cut].iter().for_each(|r| left.add(r));
        recs[cut..].iter().for_each(|r| right.add(r));
        right.merge(left).unwrap();
        prop_assert_eq!(&right.finish(), &whole);
    }

    #[test]
    fn stats_totals_sum_over_classes(seed in any::<u64>(), pages in 1usize..25) {
        let recs = records(seed, pages);
        let r = compute_stats(&recs, &DEFAULT_THRESHOLDS).unwrap();
        for t in DEFAULT_THRESHOLDS {
            let by_class: u64 = ClassId::ALL.iter().map(|c| r.count(*c, t).unwrap()).sum();
            let direct = recs.iter().flat_map(|p| &p.scores).filter(|s| **s >= t).count() as u64;
            prop_assert_eq!(r.total(t).unwrap(), by_class);
            prop_assert_eq!(by_class, direct);
        }
    }

    #[test]
    fn wire_format_round_trips(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(0..8);
        let preds: Vec<Prediction> = (0..n)
            .map(|_| Prediction::new(nb(random_box(&mut r, 0.01)), r.random_range(0.05..1.0), ClassId::ALL[r.random_range(0..7)]))
            .collect();
        let mut buf = Vec::new();
        write_prediction_line(&mut buf, "b/sn1/1900-01-01/ed-1/seq-1.jp2", &preds).unwrap();
        let set = read_predictions(buf.as_slice()).unwrap();
        let mut want = preds.clone();
        want.sort_by(newsnav_core::detect::canonical_order);
        prop_assert_eq!(&set.by_page["b/sn1/1900-01-01/ed-1/seq-1.jp2"], &want);
    }
}

fn store_from(vectors: &[Vec<f32>]) -> EmbeddingStore {
    let records = vectors.iter().enumerate().map(|(i, v)| EmbeddingRecord {
        filepath: format!("p{i}.jp2"),
        resnet_50_embeddings: vec![vec![0.0; 2048]],
        resnet_18_embeddings: vec![v.clone()],
        visual_content_filepaths: vec![format!("p{i}_000.jpg")],
    });
    let (store, diags) = EmbeddingStore::load(records, EmbeddingFamily::R18);
    assert!(diags.is_empty(), "{diags:?}");
    store
}

fn vectors(seed: u64, n: usize) -> Vec<Vec<f32>> {
    let mut r = rng(seed);
    (0..n).map(|_| (0..512).map(|_| r.random_range(-1.0f32..1.0)).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn topk_is_prefix_of_larger_k(seed in any::<u64>(), k in 1usize..20) {
        let vs = vectors(seed, 60);
        let store = store_from(&vs);
        let q = &vs[0];
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let small = store.query_topk(q, k, metric).unwrap();
            let large = store.query_topk(q, k + 7, metric).unwrap();
            prop_assert_eq!(&small.hits[..], &large.hits[..k]);
        }
    }

    #[test]
    fn cosine_ranking_ignores_query_scale(seed in any::<u64>(), scale in prop_oneof![Just(0.5f32), Just(2.0f32), Just(8.0f32)]) {
        let vs = vectors(seed, 60);
        let store = store_from(&vs);
        let q: Vec<f32> = vectors(seed ^ 1, 1).remove(0);
        let scaled: Vec<f32> = q.iter().map(|x| x * scale).collect();
        let a: Vec<usize> = store.query_topk(&q, 10, Metric::Cosine).unwrap().hits.iter().map(|h| h.id).collect();
        let b: Vec<usize> = store.query_topk(&scaled, 10, Metric::Cosine).unwrap().hits.iter().map(|h| h.id).collect();
        prop_assert_eq!(a, b);
    }
}
