use proptest::prelude::*;
use risfuse::data::{load_dataset, make_toy_data, make_toy_split, split_regions, write_dataset, Connectivity, ToyOptions, ToyVariant};
use risfuse::imaging::Mask;
use risfuse::text::toy_embed;

fn opts(variant: ToyVariant) -> ToyOptions {
    ToyOptions { variant, text_dim: 8 }
}

#[test]
fn toy_target_is_hot_in_infrared() {
    for variant in [ToyVariant::SingleTarget, ToyVariant::TwoTargets] {
        for s in make_toy_data(20, 64, 5, &opts(variant)).unwrap() {
            let (mut inside, mut outside, mut n_in) = (0.0, 0.0, 0usize);
            for (k, &m) in s.mask.bits().iter().enumerate() {
                if m {
                    inside += s.ir.data()[k];
                    n_in += 1;
                } else {
                    outside += s.ir.data()[k];
                }
            }
            let contrast = inside / n_in as f64 - outside / (s.mask.bits().len() - n_in) as f64;
            assert!(contrast > 0.3, "{}: contrast {contrast}", s.id);
            assert_eq!(split_regions(&s.mask, Connectivity::Eight).len(), 1);
            assert_eq!(s.embedding, toy_embed(&s.expression, 8).unwrap());
        }
    }
}

#[test]
fn single_target_sits_in_the_named_quadrant() {
    for s in make_toy_data(30, 64, 6, &opts(ToyVariant::SingleTarget)).unwrap() {
        let lower = s.expression.contains("lower");
        let right = s.expression.ends_with("right");
        for (k, &m) in s.mask.bits().iter().enumerate() {
            if m {
                assert_eq!((k / 64 >= 32, k % 64 >= 32), (lower, right), "{}", s.expression);
            }
        }
    }
}

#[test]
fn toy_data_is_deterministic_and_split_consistent() {
    let o = opts(ToyVariant::SingleTarget);
    let a = make_toy_data(12, 32, 9, &o).unwrap();
    assert_eq!(a, make_toy_data(12, 32, 9, &o).unwrap());
    assert_ne!(a, make_toy_data(12, 32, 10, &o).unwrap());
    let (train, test) = make_toy_split(8, 4, 32, 9, &o).unwrap();
    assert_eq!([train, test].concat(), a);
    assert!(make_toy_data(2, 36, 1, &o).is_err());
    assert!(make_toy_data(2, 8, 1, &o).is_err());
}

#[test]
fn dataset_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let samples = make_toy_data(5, 32, 11, &opts(ToyVariant::TwoTargets)).unwrap();
    let manifest = write_dataset(&samples, dir.path(), "train.jsonl").unwrap();
    assert_eq!(load_dataset(&manifest).unwrap(), samples);
}

#[test]
fn broken_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "\n").unwrap();
    assert!(load_dataset(&empty).unwrap_err().is_validation());
    let junk = dir.path().join("junk.jsonl");
    std::fs::write(&junk, "{not json}\n").unwrap();
    assert!(load_dataset(&junk).unwrap_err().is_validation());
    assert!(load_dataset(dir.path().join("missing.jsonl")).is_err());
}

#[test]
fn split_regions_fixture() {
    // two blobs plus an isolated diagonal pixel touching the second blob's corner
    let rows = ["##....", "##....", "......", "...##.", "...##.", ".....#"];
    let m = Mask::from_fn(6, 6, |i, j| rows[i].as_bytes()[j] == b'#');
    let eight = split_regions(&m, Connectivity::Eight);
    assert_eq!(eight.iter().map(Mask::count).collect::<Vec<_>>(), vec![4, 5]);
    let four = split_regions(&m, Connectivity::Four);
    assert_eq!(four.iter().map(Mask::count).collect::<Vec<_>>(), vec![4, 4, 1]);
    assert!(split_regions(&Mask::empty(5, 5), Connectivity::Four).is_empty());
}

proptest! {
    #[test]
    fn regions_partition_the_mask(bits in proptest::collection::vec(any::<bool>(), 64), four in any::<bool>()) {
        let m = Mask::from_fn(8, 8, |i, j| bits[i * 8 + j]);
        let conn = if four { Connectivity::Four } else { Connectivity::Eight };
        let regions = split_regions(&m, conn);
        let mut cover = vec![0u8; 64];
        for r in &regions {
            prop_assert!(!r.is_empty());
            for (k, &b) in r.bits().iter().enumerate() {
                cover[k] += b as u8;
            }
            // each region is itself a single component
            prop_assert_eq!(split_regions(r, conn).len(), 1);
        }
        for k in 0..64 {
            prop_assert_eq!(cover[k], bits[k] as u8);
        }
        // eight-connectivity never produces more components than four
        prop_assert!(split_regions(&m, Connectivity::Eight).len() <= split_regions(&m, Connectivity::Four).len());
    }
}
