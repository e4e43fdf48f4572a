use proptest::prelude::*;

use stpc::metrics::ConfusionMatrix;

/// Scores straight from label lists, without a confusion matrix.
fn oracle(truth: &[usize], pred: &[usize], classes: usize) -> (f64, f64, f64) {
    let oa = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64;
    let mut accs = vec![];
    let mut ious = vec![];
    for c in 0..classes {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count();
        let gt = truth.iter().filter(|&&t| t == c).count();
        let pc = pred.iter().filter(|&&p| p == c).count();
        if gt > 0 {
            accs.push(tp as f64 / gt as f64);
        }
        if gt + pc - tp > 0 {
            ious.push(tp as f64 / (gt + pc - tp) as f64);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (oa, mean(&accs), mean(&ious))
}

#[test]
fn two_by_two_reference() {
    // truth (0, 0, 1, 1), prediction (0, 0, 0, 1)
    let cm = ConfusionMatrix::from_counts(&[vec![2, 0], vec![1, 1]]).unwrap();
    let m = cm.report().unwrap();
    assert_eq!(m.oa, 0.75);
    assert_eq!(m.macc, 0.75);
    assert_eq!(m.miou, 7.0 / 12.0);
    assert_eq!(m.iou, vec![Some(2.0 / 3.0), Some(0.5)]);
}

#[test]
fn empty_matrix_is_an_error() {
    assert!(ConfusionMatrix::new(3).report().is_err());
}

proptest! {
    #[test]
    fn matrix_scores_match_label_oracle(
        classes in 1usize..6,
        pairs in proptest::collection::vec((0usize..6, 0usize..6), 1..300),
    ) {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0 % classes).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1 % classes).collect();
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&truth, &pred, None).unwrap();
        let m = cm.report().unwrap();
        let (oa, macc, miou) = oracle(&truth, &pred, classes);
        prop_assert!((m.oa - oa).abs() < 1e-12);
        prop_assert!((m.macc - macc).abs() < 1e-12);
        prop_assert!((m.miou - miou).abs() < 1e-12);
    }

    #[test]
    fn merging_equals_accumulating_once(
        a in proptest::collection::vec((0usize..4, 0usize..4), 1..50),
        b in proptest::collection::vec((0usize..4, 0usize..4), 1..50),
    ) {
        let split = |v: &[(usize, usize)]| -> (Vec<usize>, Vec<usize>) { v.iter().copied().unzip() };
        let (ta, pa) = split(&a);
        let (tb, pb) = split(&b);
        let mut x = ConfusionMatrix::new(4);
        x.accumulate(&ta, &pa, None).unwrap();
        let mut y = ConfusionMatrix::new(4);
        y.accumulate(&tb, &pb, None).unwrap();
        x.merge(&y).unwrap();
        let mut z = ConfusionMatrix::new(4);
        z.accumulate(&[ta, tb].concat(), &[pa, pb].concat(), None).unwrap();
        prop_assert_eq!(x, z);
    }
}
