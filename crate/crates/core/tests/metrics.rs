mod common;

use common::{boundary_f_oracle, jaccard_oracle, random_mask};
use egovos::metrics::{boundary_f, jaccard, SequenceScore, ObjectScore};
use egovos::MaskMap;
use proptest::prelude::*;

#[test]
fn jaccard_and_boundary_match_oracles() {
    for seed in 0..60u64 {
        let h = 8 + (seed as usize % 25);
        let p = random_mask(h, 32, 2, seed);
        let g = random_mask(h, 32, 2, seed + 1000);
        for obj in 1..=2u8 {
            assert_eq!(jaccard(&p, &g, obj).unwrap(), jaccard_oracle(&p, &g, obj));
            for tol in [0, 1, 2, 3] {
                let a = boundary_f(&p, &g, obj, tol).unwrap();
                let b = boundary_f_oracle(&p, &g, obj, tol);
                assert!((a - b).abs() < 1e-9, "seed {seed} obj {obj} tol {tol}: {a} vs {b}");
            }
        }
    }
}

fn shifted(m: &MaskMap, dy: usize, dx: usize) -> MaskMap {
    let (h, w) = (m.height() + dy + 4, m.width() + dx + 4);
    let mut labels = vec![0u8; h * w];
    for y in 0..m.height() {
        for x in 0..m.width() {
            labels[(y + dy + 2) * w + x + dx + 2] = m.get(y, x);
        }
    }
    MaskMap::new(h, w, labels, m.num_objects()).unwrap()
}

fn mask_strategy() -> impl Strategy<Value = (MaskMap, MaskMap)> {
    (4usize..20, 4usize..20, any::<u64>()).prop_map(|(h, w, seed)| {
        (random_mask(h, w, 2, seed), random_mask(h, w, 2, seed ^ 0xabcdef))
    })
}

proptest! {
    #[test]
    fn symmetric_under_swap((p, g) in mask_strategy(), tol in 0usize..3) {
        for obj in 1..=2u8 {
            prop_assert_eq!(jaccard(&p, &g, obj).unwrap(), jaccard(&g, &p, obj).unwrap());
            prop_assert_eq!(boundary_f(&p, &g, obj, tol).unwrap(), boundary_f(&g, &p, obj, tol).unwrap());
        }
    }

    #[test]
    fn invariant_under_joint_translation((p, g) in mask_strategy(), dy in 0usize..4, dx in 0usize..4, tol in 0usize..3) {
        // Embed both masks with a margin so no pixel touches the border.
        let (p0, g0) = (shifted(&p, 0, 0), shifted(&g, 0, 0));
        let (p1, g1) = (shifted(&p, dy, dx), shifted(&g, dy, dx));
        for obj in 1..=2u8 {
            prop_assert_eq!(jaccard(&p0, &g0, obj).unwrap(), jaccard(&p1, &g1, obj).unwrap());
            prop_assert_eq!(boundary_f(&p0, &g0, obj, tol).unwrap(), boundary_f(&p1, &g1, obj, tol).unwrap());
        }
    }

    #[test]
    fn adding_true_pixels_never_lowers_jaccard((p, g) in mask_strategy(), picks in prop::collection::vec(any::<prop::sample::Index>(), 1..20)) {
        let mut labels = p.labels().to_vec();
        let mut prev = jaccard(&p, &g, 1).unwrap();
        let gt_pixels: Vec<usize> = (0..labels.len()).filter(|&i| g.labels()[i] == 1).collect();
        prop_assume!(!gt_pixels.is_empty());
        for ix in picks {
            labels[gt_pixels[ix.index(gt_pixels.len())]] = 1;
            let m = MaskMap::new(p.height(), p.width(), labels.clone(), 2).unwrap();
            let j = jaccard(&m, &g, 1).unwrap();
            prop_assert!(j >= prev);
            prev = j;
        }
    }
}

#[test]
fn jf_is_mean_of_j_and_f_on_reported_rows() {
    // (J, F, reported J&F) in percent.
    for (j, f, reported) in [(88.1, 92.0, 90.1), (87.5, 91.8, 89.7)] {
        let s = SequenceScore::from_objects("row", vec![ObjectScore { j, f }], vec![]).unwrap();
        assert!((s.jf - reported).abs() <= 0.05 + 1e-9, "{} vs {reported}", s.jf);
    }
}
