//! Round trips of the on-disk formats.

use std::path::Path;

use proptest::prelude::*;
use stdai::bundle::{read_bundle, read_truth, write_bundle};
use stdai::checkpoint::{decode_checkpoint, encode_checkpoint};
use stdai::features::{decode_features, encode_features};
use stdai_core::backbone::{BackboneConfig, ModelParams};
use stdai_core::pdl::{insert_pdls, trainable_subset, Stage};
use stdai_core::phantom::{synth_phantom, PhantomConfig};
use stdai_core::sample::normalize_expression;
use stdai_core::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn features_round_trip(c in 1usize..5, h in 1usize..9, w in 1usize..9, seed in any::<u32>()) {
        let t = Tensor::from_fn(&[c, h, w], |i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-7 - 100.0);
        let bytes = encode_features(&t).unwrap();
        let back = decode_features(Path::new("mem"), &bytes).unwrap();
        prop_assert!(back.bit_eq(&t));
        prop_assert!(decode_features(Path::new("mem"), &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn checkpoint_round_trip(genes in 1usize..5, seed in any::<u64>(), sites in proptest::collection::btree_set(0usize..5, 0..5), stage in 0u8..3) {
        let mut m = ModelParams::init(BackboneConfig { base_width: 4, depth: 2, ..BackboneConfig::new(genes) }, seed).unwrap();
        let sites: Vec<usize> = sites.into_iter().filter(|&s| m.config().site_channels(s).is_some()).collect();
        insert_pdls(&mut m, &sites).unwrap();
        for id in m.store().ids().collect::<Vec<_>>() {
            for (k, v) in m.store_mut().get_mut(id).data_mut().iter_mut().enumerate() {
                *v += (k as f32 + seed as f32).sin() * 0.01;
            }
        }
        trainable_subset(&mut m, [Stage::Pretrain, Stage::FmdrCentral, Stage::FmdrAdjacent][stage as usize]);
        let bytes = encode_checkpoint(&m);
        let back = decode_checkpoint(Path::new("mem"), &bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(encode_checkpoint(&back), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn bundle_round_trip(seed in 0u64..1000, genes in 1usize..4, sections in 2usize..4, normalized in any::<bool>()) {
        let ph = synth_phantom(&PhantomConfig {
            height: 16,
            width: 16,
            genes,
            sections,
            blobs: 20,
            gene_gain: vec![1.1; genes],
            gene_gamma: vec![1.0; genes],
            gene_bias: vec![0.0; genes],
            seed,
            ..Default::default()
        })
        .unwrap();
        let sample = if normalized { normalize_expression(&ph.sample).unwrap() } else { ph.sample.clone() };
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&sample, dir.path(), Some(&ph.truth), None).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        prop_assert_eq!(&back, &sample);
        for (a, b) in back.sections.iter().zip(&sample.sections) {
            prop_assert!(a.expression.bit_eq(&b.expression));
        }
        let truth = read_truth(dir.path()).unwrap().unwrap();
        prop_assert!(truth.iter().zip(&ph.truth).all(|(a, b)| a.bit_eq(b)));
    }
}
