use proptest::prelude::*;

use seqspace::io::{format_voxel_table, parse_voxel_table};
use seqspace::longitudinal::build_axis;
use seqspace::norm::compute_norm_stats;
use seqspace::stats::{permutation_p, MeanSe};
use seqspace::table::default_channels;
use seqspace::{NormMethod, VoxelTable};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        -1.0..1.0f64,
        Just(0.0),
        Just(-0.0),
        Just(1e-300),
        Just(f64::MAX)
    ]
}

fn table(d: usize, rows: usize) -> impl Strategy<Value = (VoxelTable, bool, bool)> {
    (
        prop::collection::vec(finite(), d * rows),
        prop::collection::vec(any::<bool>(), rows),
        prop::collection::vec((-50i64..50, -50i64..50, 0i64..20), rows),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(move |(values, mask, coords, with_mask, with_coords)| {
            let mut t = VoxelTable::new(default_channels(d), values).unwrap();
            if with_coords {
                t = t
                    .with_coords(coords.iter().map(|&(x, y, z)| [x, y, z]).collect())
                    .unwrap();
            }
            if with_mask {
                t = t.with_mask(mask).unwrap();
            }
            (t, with_mask, with_coords)
        })
}

proptest! {
    #[test]
    fn csv_round_trip_is_exact((t, _, _) in (1usize..=5, 1usize..20).prop_flat_map(|(d, n)| table(d, n))) {
        let text = format_voxel_table(&t);
        let back = parse_voxel_table(&text).unwrap();
        prop_assert_eq!(back.channels(), t.channels());
        prop_assert_eq!(back.coords(), t.coords());
        prop_assert_eq!(back.mask(), t.mask());
        for (a, b) in back.values().iter().zip(t.values()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(format_voxel_table(&back), text);
    }

    #[test]
    fn normalization_inverts(
        values in prop::collection::vec(-1e3..1e3f64, 30),
        method in prop_oneof![Just(NormMethod::Robust), Just(NormMethod::Zscore), Just(NormMethod::None)],
    ) {
        let t = VoxelTable::new(default_channels(3), values).unwrap();
        let Ok(stats) = compute_norm_stats(&t, method) else {
            // Constant channels have no scale.
            return Ok(());
        };
        for row in t.rows() {
            let back = stats.denormalize(&stats.normalize(row));
            for (a, b) in back.iter().zip(row) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn projection_of_axis_points(
        c_h in prop::collection::vec(-5.0..5.0f64, 4),
        delta in prop::collection::vec(-5.0..5.0f64, 4),
        s in -3.0..3.0f64,
        w in prop::collection::vec(-5.0..5.0f64, 4),
    ) {
        let c_t: Vec<f64> = c_h.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let Ok(frame) = build_axis(&c_h, &c_t) else {
            prop_assume!(false);
            unreachable!()
        };
        prop_assume!(frame.length > 1e-6);
        prop_assert!(frame.project(&c_h).abs() < 1e-12);
        prop_assert!((frame.project(&c_t) - frame.length).abs() < 1e-12 * (1.0 + frame.length));
        // Moving along the axis by s changes the projection by exactly s.
        let moved: Vec<f64> = w.iter().zip(&frame.direction).map(|(x, d)| x + s * d).collect();
        prop_assert!((frame.project(&moved) - frame.project(&w) - s).abs() < 1e-10);
        let unit: f64 = frame.direction.iter().map(|d| d * d).sum();
        prop_assert!((unit - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_difference_is_antisymmetric(
        a in prop::collection::vec(-10.0..10.0f64, 2..40),
        b in prop::collection::vec(-10.0..10.0f64, 2..40),
    ) {
        let (ma, mb) = (MeanSe::of(&a).unwrap(), MeanSe::of(&b).unwrap());
        let (d1, s1) = ma.difference(&mb);
        let (d2, s2) = mb.difference(&ma);
        prop_assert_eq!(d1, -d2);
        prop_assert_eq!(s1, s2);
        prop_assert!(s1 >= ma.se.max(mb.se));
    }

    #[test]
    fn permutation_p_is_a_probability(
        a in prop::collection::vec(-10.0..10.0f64, 2..15),
        b in prop::collection::vec(-10.0..10.0f64, 2..15),
        seed in any::<u64>(),
    ) {
        let p = permutation_p(&a, &b, 200, seed).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
        prop_assert_eq!(p, permutation_p(&a, &b, 200, seed).unwrap());
        // The add-one estimator never goes below 1/(n+1).
        prop_assert!(p >= 1.0 / 201.0);
    }
}
