mod common;

use proptest::prelude::*;
use udadet::codec::{encode_targets, BBox, BoxAnnotation};
use udadet::eval::{average_precision, ScoredBox};
use udadet::losses;
use udadet::tensor::{Tape, Tensor};

fn nchw() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    (1usize..3, 1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(n, c, h, w)| {
        let len = n * c * h * w;
        (Just(vec![n, c, h, w]), prop::collection::vec(-50.0f64..50.0, len))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_a_distribution((shape, data) in nchw()) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(shape.clone(), data).unwrap());
        let p = tape.channel_softmax(x).unwrap();
        let s = tape.sum_channels(p).unwrap();
        prop_assert!(tape.data(p).iter().all(|v| (0.0..=1.0).contains(v)));
        for v in tape.data(s) {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptation_losses_stay_in_range((shape, data) in nchw()) {
        prop_assume!(shape[1] >= 2);
        let c = shape[1] as f64;
        let probs: Vec<f64> = data.iter().map(|v| 1.0 / (1.0 + (-v / 10.0).exp())).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(shape, probs).unwrap());
        let e = losses::entropy_map(&mut tape, x).unwrap();
        prop_assert!(tape.data(e).iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        let m = losses::max_squares_loss(&mut tape, x, 4).unwrap();
        let m = tape.item(m);
        prop_assert!(m >= -4.0 - 1e-12 && m <= -4.0 / c + 1e-12, "{m}");
    }

    #[test]
    fn ap_depends_only_on_score_order(seed in 0u64..10_000, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let mut r = common::rng(seed);
        let (dets, gts) = common::oracles::random_ap_instance(&mut r);
        let moved: Vec<ScoredBox> = dets.iter().map(|d| ScoredBox { score: (d.score * scale + shift).exp(), ..*d }).collect();
        prop_assert!((average_precision(&dets, &gts, 0.5) - average_precision(&moved, &gts, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn ap_is_a_fraction(seed in 0u64..10_000) {
        let mut r = common::rng(seed);
        let (dets, gts) = common::oracles::random_ap_instance(&mut r);
        let ap = average_precision(&dets, &gts, 0.5);
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn single_box_round_trip(x in 0.0f64..100.0, y in 0.0f64..100.0, w in 2.0f64..28.0, h in 2.0f64..28.0, class in 0usize..3) {
        let b = BoxAnnotation::new(x, y, x + w, y + h, class);
        let ious = common::oracles::codec_round_trip(&[b], 3);
        prop_assert!(ious[0] >= 0.99, "{:?}", ious);
    }

    #[test]
    fn heatmap_peak_is_one_at_center(x in 0.0f64..100.0, y in 0.0f64..100.0, w in 2.0f64..28.0, h in 2.0f64..28.0) {
        let maps = encode_targets(&[BoxAnnotation::new(x, y, x + w, y + h, 0)], (128, 128), 4, 1, 0.7).unwrap();
        let cell = maps.objects[0];
        prop_assert_eq!(maps.heatmap_at(0, cell.grid_y, cell.grid_x), 1.0);
        prop_assert!(maps.heatmap.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(maps.heatmap.iter().filter(|v| **v == 1.0).count(), 1);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::array::uniform4(0.0f64..50.0), b in prop::array::uniform4(0.0f64..50.0)) {
        let mk = |v: [f64; 4]| BBox::new(v[0].min(v[2]), v[1].min(v[3]), v[0].max(v[2]) + 1.0, v[1].max(v[3]) + 1.0);
        let (p, q) = (mk(a), mk(b));
        let o = udadet::eval::iou(&p, &q);
        prop_assert!((0.0..=1.0).contains(&o));
        prop_assert_eq!(o, udadet::eval::iou(&q, &p));
        prop_assert!((udadet::eval::iou(&p, &p) - 1.0).abs() < 1e-12);
    }
}
