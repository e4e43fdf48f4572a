mod common;

use proptest::prelude::*;

use common::{cloud_with_ties, naive_knn, random_cloud, rng};
use stpc::geometry::{knn, nearest_upsample, random_subsample, relative_offsets, squared_distance};

#[test]
fn knn_agrees_with_full_sort() {
    let mut r = rng(11);
    for trial in 0..300 {
        let n = 1 + trial % 70;
        let pts = if trial % 2 == 0 { random_cloud(&mut r, n) } else { cloud_with_ties(&mut r, n) };
        for k in [1, n.min(2), n.min(5), n.min(16), n] {
            let got = knn(&pts, k).unwrap();
            let want = naive_knn(&pts, k);
            for (i, row) in want.iter().enumerate() {
                assert_eq!(got.row(i), &row[..], "trial {trial} n {n} k {k} row {i}");
            }
        }
    }
}

#[test]
fn knn_rejects_bad_k() {
    let pts = [[0.0; 3], [1.0, 0.0, 0.0]];
    assert!(matches!(knn(&pts, 3), Err(stpc::Error::TooFewPoints { k: 3, n: 2 })));
    assert!(knn(&pts, 0).is_err());
}

#[test]
fn duplicate_points_keep_self_first() {
    let pts = [[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]];
    let nbr = knn(&pts, 3).unwrap();
    assert_eq!(nbr.row(0), &[0, 1, 2]);
    assert_eq!(nbr.row(1), &[1, 0, 2]);
    assert_eq!(nbr.row(2), &[2, 0, 1]);
    assert_eq!(nbr.row(3), &[3, 0, 1]);
}

#[test]
fn offsets_of_self_are_zero() {
    let mut r = rng(2);
    let pts = random_cloud(&mut r, 20);
    let nbr = knn(&pts, 4).unwrap();
    let off = relative_offsets(&pts, &nbr);
    for i in 0..20 {
        assert_eq!(&off[i * 12..i * 12 + 3], &[0.0, 0.0, 0.0]);
        let j = nbr.row(i)[2];
        for d in 0..3 {
            assert_eq!(off[i * 12 + 6 + d], pts[i][d] - pts[j][d]);
        }
    }
}

fn coords(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    proptest::collection::vec(proptest::array::uniform3(-5.0f64..5.0), 1..max)
}

proptest! {
    #[test]
    fn subsample_is_a_sorted_distinct_subset(n in 0usize..500, ratio in 1usize..9, seed: u64) {
        let s = random_subsample(n, ratio, seed);
        prop_assert_eq!(s.len(), n.div_ceil(ratio));
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&i| i < n));
        prop_assert_eq!(&s, &random_subsample(n, ratio, seed));
    }

    #[test]
    fn upsample_picks_a_nearest_coarse_point(fine in coords(60), coarse in coords(20)) {
        let map = nearest_upsample(&coarse, &fine).unwrap();
        prop_assert_eq!(map.len(), fine.len());
        for (p, &j) in fine.iter().zip(&map) {
            let best = coarse.iter().map(|q| squared_distance(p, q)).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(squared_distance(p, &coarse[j]), best);
            prop_assert!(coarse[..j].iter().all(|q| squared_distance(p, q) > best));
        }
    }

    #[test]
    fn upsampling_a_subsample_maps_kept_points_home(pts in coords(80), ratio in 1usize..5, seed: u64) {
        let keep = random_subsample(pts.len(), ratio, seed);
        let coarse: Vec<[f64; 3]> = keep.iter().map(|&i| pts[i]).collect();
        let map = nearest_upsample(&coarse, &pts).unwrap();
        for (c, &i) in keep.iter().enumerate() {
            prop_assert_eq!(coarse[map[i]], pts[i]);
            prop_assert!(map[i] <= c);
        }
    }
}
