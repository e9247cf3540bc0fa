mod common;

use llmood::detectors::{
    byte_tokenize, cosine_score, energy_score, fit_cosine, fit_maha, maha_score, msp_full_vocab, msp_renormalized,
    ClassTokenMap,
};
use llmood::dump::{EmbeddingDump, EmbeddingRecord};
use llmood::metrics::{anisotropy, aupr, auroc, far_at_95};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scores on a quarter grid, so ties are frequent and every transform used
/// below is exact.
fn grid_scores(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-12i32..12).prop_map(|k| k as f64 / 4.0), 1..max)
}

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<u32>().prop_map(|b| f32::from_bits(b & 0xBFFF_FFFF))
}

fn dump_strategy() -> impl Strategy<Value = EmbeddingDump> {
    (1usize..6, 0usize..4, 1usize..6).prop_flat_map(|(dim, k, n)| {
        let record = (
            "[a-z0-9é]{0,6}",
            prop::option::of(0..k.max(1) as u32),
            prop::collection::vec(finite_f32(), dim),
            prop::collection::vec(finite_f32(), k),
        );
        prop::collection::vec(record, n).prop_map(move |recs| EmbeddingDump {
            dim,
            class_names: (0..k).map(|i| format!("c{i}")).collect(),
            records: recs
                .into_iter()
                .enumerate()
                .map(|(i, (id, label, emb, logits))| EmbeddingRecord {
                    id: format!("{i}{id}"),
                    label: if k == 0 { None } else { label },
                    embedding: emb,
                    class_logits: (k > 0).then_some(logits),
                })
                .collect(),
        })
    })
}

proptest! {
    #[test]
    fn edf_bytes_round_trip(dump in dump_strategy()) {
        let bytes = dump.to_bytes().unwrap();
        let back = EmbeddingDump::from_bytes(&bytes).unwrap();
        prop_assert!(back.bit_eq(&dump));
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_bytes_are_rejected(dump in dump_strategy(), cut in 1usize..64) {
        let bytes = dump.to_bytes().unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(EmbeddingDump::from_bytes(&bytes[..keep]).is_err());
    }

    #[test]
    fn auroc_matches_pair_count(id in grid_scores(60), ood in grid_scores(60)) {
        let fast = auroc(&id, &ood).unwrap();
        prop_assert!((fast - common::auroc_pairs(&id, &ood)).abs() <= 1e-12);
        let swapped = auroc(&ood, &id).unwrap();
        prop_assert!((fast + swapped - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn metrics_ignore_increasing_transforms(id in grid_scores(40), ood in grid_scores(40)) {
        let f = |v: &[f64]| v.iter().map(|x| x * x * x + 2.0 * x - 7.0).collect::<Vec<_>>();
        let (ti, to) = (f(&id), f(&ood));
        prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc(&ti, &to).unwrap());
        prop_assert_eq!(far_at_95(&id, &ood).unwrap(), far_at_95(&ti, &to).unwrap());
        prop_assert_eq!(aupr(&id, &ood).unwrap(), aupr(&ti, &to).unwrap());
    }

    #[test]
    fn metrics_stay_in_unit_interval(id in grid_scores(40), ood in grid_scores(40)) {
        for m in [auroc(&id, &ood), far_at_95(&id, &ood), aupr(&id, &ood)] {
            let m = m.unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn energy_shifts_and_msp_does_not(
        x in prop::collection::vec(-30.0f64..30.0, 1..8),
        c in -100.0f64..100.0,
    ) {
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        prop_assert!((energy_score(&shifted).unwrap() - energy_score(&x).unwrap() - c).abs() <= 1e-12);
        let m = msp_renormalized(&x).unwrap();
        prop_assert!((msp_renormalized(&shifted).unwrap() - m).abs() <= 1e-12);
        prop_assert!(m > 0.0 && m <= 1.0);
    }

    #[test]
    fn full_vocab_msp_ignores_vocab_shift(
        logits in prop::collection::vec(-10.0f64..10.0, 258),
        c in -50.0f64..50.0,
    ) {
        let names = vec!["positive".to_string(), "negative".to_string()];
        let map = ClassTokenMap::build(&names, byte_tokenize, &[]).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        let a = msp_full_vocab(&logits, &map).unwrap();
        prop_assert!((msp_full_vocab(&shifted, &map).unwrap() - a).abs() <= 1e-12);
    }

    #[test]
    fn cosine_ignores_query_scale(seed in any::<u64>(), a in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = common::random_orthogonal(&mut rng, 5);
        let bank_vecs: Vec<Vec<f64>> = (0..5).map(|j| q.column(j).iter().copied().collect()).collect();
        let bank = fit_cosine(bank_vecs.iter().map(|v| ("b", v.as_slice()))).unwrap();
        let z: Vec<f64> = q.row(0).iter().copied().collect();
        let scaled: Vec<f64> = z.iter().map(|v| v * a).collect();
        let s = cosine_score(&bank, &z).unwrap();
        prop_assert!((cosine_score(&bank, &scaled).unwrap() - s).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn maha_is_rotation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let data: Vec<(usize, Vec<f64>)> = (0..16)
            .map(|i| (i % 2, common::random_orthogonal(&mut rng, d).column(0).iter().map(|x| x * (1 + i) as f64).collect()))
            .collect();
        let q = common::random_orthogonal(&mut rng, d);
        let bank = fit_maha(data.iter().map(|(c, v)| (*c, v.as_slice())), 1e-5).unwrap();
        let rot: Vec<(usize, Vec<f64>)> = data.iter().map(|(c, v)| (*c, common::rotate(&q, v))).collect();
        let rbank = fit_maha(rot.iter().map(|(c, v)| (*c, v.as_slice())), 1e-5).unwrap();
        let z = vec![0.3, -1.0, 2.0, 0.5];
        let s = maha_score(&bank, &z).unwrap();
        let r = maha_score(&rbank, &common::rotate(&q, &z)).unwrap();
        prop_assert!(s <= 0.0);
        prop_assert!((s - r).abs() <= 1e-6 * s.abs().max(1.0));
    }

    #[test]
    fn anisotropy_ignores_scale_and_rotation(seed in any::<u64>(), scales in prop::collection::vec(0.01f64..100.0, 6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = common::random_orthogonal(&mut rng, 6);
        let vecs: Vec<Vec<f64>> = (0..6).map(|j| q.column(j).iter().map(|x| x + 0.3).collect()).collect();
        let base = anisotropy(&vecs).unwrap();
        let scaled: Vec<Vec<f64>> = vecs.iter().zip(&scales).map(|(v, s)| v.iter().map(|x| x * s).collect()).collect();
        let r = common::random_orthogonal(&mut rng, 6);
        let rotated: Vec<Vec<f64>> = vecs.iter().map(|v| common::rotate(&r, v)).collect();
        prop_assert!((anisotropy(&scaled).unwrap() - base).abs() <= 1e-12);
        prop_assert!((anisotropy(&rotated).unwrap() - base).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }
}

#[test]
fn colliding_class_names_list_both() {
    let names = vec!["positive".to_string(), "position".to_string()];
    let err = ClassTokenMap::build(&names, byte_tokenize, &[])
        .unwrap_err()
        .to_string();
    assert!(err.contains("positive") && err.contains("position"), "{err}");
}
