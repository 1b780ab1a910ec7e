// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sae_lab::activation_store::{decode_shard, encode_shard, ActivationDataset, SampleMeta, Split, Sublayer};
use sae_lab::eval::ce_recovered;
use sae_lab::sae::checkpoint::{decode_checkpoint, encode_checkpoint};
use sae_lab::sae::{init_sae, Variant};
use sae_lab::steering::{delta_p, steerability};
use sae_lab::suppression::{expand_feature_set, select_features, tau_grid, FeatureSet, Pooling, Provenance};
use sae_lab::toy::head::{decode_head, encode_head};
use sae_lab::toy::VocabularyHead;

fn dataset(seed: u64, n: usize, t: usize, d: usize) -> ActivationDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let acts = Array3::from_shape_fn((n, t, d), |_| rng.sample::<f32, _>(StandardNormal));
    let meta = (0..n)
        .map(|i| SampleMeta {
            sample_id: seed.wrapping_mul(1000) + i as u64,
            class_label: (i % 3) as i64,
            attribute_flag: i % 2 == 0,
            split_tag: Split::Val,
            grid_rows: 1,
            grid_cols: (t - 1) as u16,
        })
        .collect();
    ActivationDataset::new(2, Sublayer::MlpOut, acts, meta).unwrap()
}

fn distribution(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let raw = Array1::from_shape_fn(n, |_| rng.random::<f64>() + 1e-3);
    let s = raw.sum();
    raw / s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shard_roundtrip(seed in any::<u64>(), n in 1usize..5, t in 2usize..6, d in 1usize..9) {
        let ds = dataset(seed, n, t, d);
        let back = decode_shard(&encode_shard(&ds).unwrap()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn checkpoint_roundtrip(seed in any::<u64>(), d in 1usize..8, e in 1usize..4, k in 1usize..4, topk in any::<bool>()) {
        let variant = if topk { Variant::TopK { k } } else { Variant::Vanilla { l1_coeff: 0.5 } };
        let sae = init_sae(d, e, variant, seed).unwrap();
        prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&sae)).unwrap(), sae);
    }

    #[test]
    fn head_roundtrip(seed in any::<u64>(), n in 2usize..6, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Array2::from_shape_fn((n, d), |_| rng.sample::<f32, _>(StandardNormal) + 0.1);
        let names = (0..n).map(|i| format!("concept {i}")).collect();
        let head = VocabularyHead::new(emb, names, 100.0).unwrap();
        let back = decode_head(&encode_head(&head).unwrap()).unwrap();
        prop_assert_eq!(back.names, head.names);
        prop_assert_eq!(back.embeddings, head.embeddings);
    }

    #[test]
    fn topk_never_exceeds_k(seed in any::<u64>(), d in 2usize..10, k in 1usize..6) {
        let sae = init_sae(d, 3, Variant::TopK { k }, seed).unwrap();
        let x = dataset(seed ^ 7, 3, 4, d).rows(Default::default());
        let f = sae.encode(x.view()).unwrap();
        for row in f.outer_iter() {
            prop_assert!(row.iter().filter(|&&v| v > 0.0).count() <= k);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn selection_shrinks_as_tau_grows(seed in any::<u64>(), d in 2usize..8) {
        let sae = init_sae(d, 2, Variant::Vanilla { l1_coeff: 0.0 }, seed).unwrap();
        let a = dataset(seed, 3, 3, d);
        let b = dataset(seed.wrapping_add(1), 4, 3, d);
        let mut previous: Option<BTreeSet<usize>> = None;
        for tau in tau_grid(12, 1e-6, 2.0) {
            let set: BTreeSet<usize> = select_features(&sae, &a, &b, tau, Pooling::AllTokens)
                .unwrap()
                .indices
                .into_iter()
                .collect();
            if let Some(prev) = &previous {
                prop_assert!(set.is_subset(prev));
            }
            previous = Some(set);
        }
    }

    #[test]
    fn expansion_grows_as_lambda_falls(seed in any::<u64>(), d in 2usize..8, pick in 0usize..4) {
        let sae = init_sae(d, 4, Variant::TopK { k: 2 }, seed).unwrap();
        let base = FeatureSet::new(0, vec![pick % sae.d_sae()], Provenance::Threshold { tau: 0.1 });
        let mut previous: Option<BTreeSet<usize>> = None;
        for lambda in [0.9f32, 0.6, 0.3, 0.0, -0.5] {
            let set: BTreeSet<usize> = expand_feature_set(&sae, &base, lambda).indices.into_iter().collect();
            prop_assert!(set.contains(&base.indices[0]));
            if let Some(prev) = &previous {
                prop_assert!(prev.is_subset(&set));
            }
            previous = Some(set);
        }
    }

    #[test]
    fn ce_recovered_is_affine_invariant(
        clean in 0.0f64..5.0,
        gap in 0.1f64..5.0,
        frac in -0.5f64..1.5,
        scale in 0.1f64..10.0,
        shift in -10.0f64..10.0,
    ) {
        let zero = clean + gap;
        let recon = zero - frac * gap;
        let base = ce_recovered(clean, recon, zero).unwrap();
        let moved = ce_recovered(scale * clean + shift, scale * recon + shift, scale * zero + shift).unwrap();
        prop_assert!((base - moved).abs() < 1e-6 * base.abs().max(1.0));
        prop_assert!((base - 100.0 * frac).abs() < 1e-6 * base.abs().max(1.0));
    }

    #[test]
    fn delta_p_is_bounded(seed in any::<u64>(), n in 2usize..12, images in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean: Vec<_> = (0..images).map(|_| distribution(&mut rng, n)).collect();
        let steered: Vec<_> = (0..images).map(|_| distribution(&mut rng, n)).collect();
        let dp = delta_p(&clean, &steered).unwrap();
        let s = steerability(&clean, &steered).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&dp));
        prop_assert!((0.0..=2.0 + 1e-12).contains(&s));
    }
}
