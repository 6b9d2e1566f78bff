use std::collections::BTreeSet;

use lameness_core::classifier::{softmax_rows, ClassifierModel};
use lameness_core::corpus::{
    binary_label, manifest_to_string, read_manifest, split_by_cow, BinaryLabel, FragmentRecord,
    LocomotionScore, Modality, View,
};
use lameness_core::evaluation::{
    confusion, metrics, parse_records, render_records, EvalReport, InputType, Metrics,
};
use ndarray::Array2;
use proptest::prelude::*;

/// One record per (cow, visit, view, modality) with the given visit scores.
fn records_from(scores: &[Vec<u8>]) -> Vec<FragmentRecord> {
    let mut out = Vec::new();
    for (c, visits) in scores.iter().enumerate() {
        for (v, &s) in visits.iter().enumerate() {
            for view in [View::Side, View::Top] {
                for modality in [Modality::Rgb, Modality::Depth] {
                    out.push(FragmentRecord {
                        fragment_id: format!("c{c:02}_v{v}_{view}_{modality}"),
                        cow_id: format!("c{c:02}"),
                        view,
                        modality,
                        score: LocomotionScore::new(s).unwrap(),
                        clip_path: format!("c{c:02}/v{v}/{view}"),
                    });
                }
            }
        }
    }
    out
}

fn herd() -> impl Strategy<Value = Vec<Vec<u8>>> {
    prop::collection::vec(prop::collection::vec(1u8..=5, 1..4), 2..14)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn split_is_cow_disjoint_partition(scores in herd(), nh in 0usize..4, nl in 0usize..4, seed in any::<u64>()) {
        let records = records_from(&scores);
        let healthy_cows = scores.iter().filter(|v| v.iter().all(|&s| s == 1)).count();
        let lame_cows = scores.len() - healthy_cows;
        match split_by_cow(&records, nh, nl, seed) {
            Ok(split) => {
                prop_assert!(nh <= healthy_cows && nl <= lame_cows);
                prop_assert_eq!(split.train.len() + split.validation.len(), records.len());
                let train: BTreeSet<_> = split.train.iter().map(|r| &r.cow_id).collect();
                let val: BTreeSet<_> = split.validation.iter().map(|r| &r.cow_id).collect();
                prop_assert!(train.is_disjoint(&val));
                prop_assert_eq!(val.len(), nh + nl);
                let listed: BTreeSet<_> = split.validation_cows.iter().collect();
                prop_assert_eq!(listed, val);
                let mut sorted = split.validation_cows.clone();
                sorted.sort();
                prop_assert_eq!(&sorted, &split.validation_cows);
                prop_assert_eq!(split_by_cow(&records, nh, nl, seed).unwrap(), split);
            }
            Err(e) => {
                prop_assert!(nh > healthy_cows || nl > lame_cows);
                prop_assert_eq!(e.category(), "infeasible");
            }
        }
    }

    #[test]
    fn manifest_text_round_trips(scores in herd()) {
        let records = records_from(&scores);
        let text = manifest_to_string(&records);
        prop_assert_eq!(read_manifest(text.as_bytes()).unwrap(), records);
    }

    #[test]
    fn only_score_one_is_healthy(s in 1u8..=5) {
        let label = binary_label(LocomotionScore::new(s).unwrap());
        prop_assert_eq!(label.is_lame(), s != 1);
    }

    #[test]
    fn metrics_stay_in_range(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let to = |b: bool| if b { BinaryLabel::Lame } else { BinaryLabel::Healthy };
        let pred: Vec<_> = pairs.iter().map(|p| to(p.0)).collect();
        let gt: Vec<_> = pairs.iter().map(|p| to(p.1)).collect();
        let c = confusion(&pred, &gt).unwrap();
        prop_assert_eq!(c.total(), pairs.len());
        prop_assert_eq!(c.positives(), gt.iter().filter(|l| l.is_lame()).count());
        let m = metrics(&c).unwrap();
        prop_assert!((0.0..=100.0).contains(&m.accuracy));
        prop_assert!((0.0..=1.0).contains(&m.precision));
        prop_assert!((0.0..=1.0).contains(&m.recall));
        let agree = pairs.iter().filter(|p| p.0 == p.1).count();
        prop_assert!((m.accuracy - 100.0 * agree as f64 / pairs.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn records_round_trip_exactly(vals in prop::collection::vec((0.0f64..=100.0, 0.0f64..=1.0, 0.0f64..=1.0), 8)) {
        let mut report = EvalReport::default();
        let inputs = [InputType::Rgb, InputType::Depth, InputType::Mask, InputType::SegmOverDepth];
        for (i, &(accuracy, precision, recall)) in vals.iter().enumerate() {
            let view = if i < 4 { View::Side } else { View::Top };
            report.insert(view, inputs[i % 4], Metrics { accuracy, precision, recall });
        }
        prop_assert_eq!(parse_records(&render_records(&report)).unwrap(), report);
    }

    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-500.0f64..500.0, 2..40)) {
        let rows = values.len() / 2;
        let mut logits = Array2::from_shape_vec((rows, 2), values[..rows * 2].to_vec()).unwrap();
        softmax_rows(&mut logits);
        for row in logits.rows() {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_outputs_are_distributions(seed in any::<u64>(), x in prop::collection::vec(-3.0f64..3.0, 12)) {
        let model = ClassifierModel::new([12, 8, 4, 2], seed).unwrap();
        let p = model.forward(&x).unwrap();
        prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!(model.forward(&x[..11]).is_err());
    }
}
