use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use u2pp::frontend::{
    generate_synthetic_corpus, load_manifest, read_feature_file, spec_augment, spec_augment_traced, write_corpus,
    write_feature_file, MaskAxis, SpecAugConfig, SynthConfig,
};
use u2pp::numerics::Tensor;
use u2pp::Error;

fn ramp(t: usize, f: usize) -> Tensor {
    Tensor::new(vec![t, f], (0..t * f).map(|x| 1.0 + x as f64 * 0.25).collect()).unwrap()
}

proptest! {
    #[test]
    fn spec_augment_zeroes_exactly_its_bands(
        t in 1usize..60, f in 1usize..20, nf in 0usize..3, nt in 0usize..3, tmax in 0usize..30, seed in any::<u64>()
    ) {
        let cfg = SpecAugConfig { f_max: f, num_f_masks: nf, t_mask_max: tmax, num_t_masks: nt, fill: 0.0 };
        let x = ramp(t, f);
        let (y, bands) = spec_augment_traced(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(bands.len(), nf + nt);
        for r in 0..t {
            for c in 0..f {
                let masked = bands.iter().any(|b| match b.axis {
                    MaskAxis::Frequency => (b.start..b.start + b.width).contains(&c),
                    MaskAxis::Time => (b.start..b.start + b.width).contains(&r),
                });
                let v = y.at(r, c);
                if masked {
                    prop_assert_eq!(v, 0.0);
                } else {
                    prop_assert_eq!(v, x.at(r, c));
                }
            }
        }
    }
}

#[test]
fn spec_augment_with_zero_config_is_identity() {
    let cfg = SpecAugConfig {
        f_max: 0,
        num_f_masks: 0,
        t_mask_max: 0,
        num_t_masks: 0,
        fill: 0.0,
    };
    let x = ramp(10, 4);
    assert_eq!(spec_augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), x);
}

#[test]
fn feature_files_round_trip_f32() {
    let dir = tempfile::tempdir().unwrap();
    let x = Tensor::new(vec![3, 2], vec![0.5, -1.25, 3.0, 1e-3f32 as f64, 7.0, 0.0]).unwrap();
    let p = dir.path().join("x.feat");
    write_feature_file(&p, &x).unwrap();
    assert_eq!(read_feature_file(&p).unwrap(), x);
}

#[test]
fn corpus_is_deterministic_per_seed() {
    let cfg = SynthConfig {
        n_utts: 12,
        ..SynthConfig::default()
    };
    let a = generate_synthetic_corpus(&cfg).unwrap();
    assert_eq!(a, generate_synthetic_corpus(&cfg).unwrap());
    let b = generate_synthetic_corpus(&SynthConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(a, b);
    assert!(generate_synthetic_corpus(&SynthConfig { n_utts: 0, ..cfg }).unwrap().is_empty());
}

#[test]
fn manifest_round_trip_and_errors_name_the_utterance() {
    let dir = tempfile::tempdir().unwrap();
    let utts = generate_synthetic_corpus(&SynthConfig {
        n_utts: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let manifest = write_corpus(dir.path(), &utts).unwrap();
    let back = load_manifest(&manifest, 8).unwrap();
    assert_eq!(back.len(), utts.len());
    for (a, b) in utts.iter().zip(&back) {
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.id, b.id);
    }

    let text = std::fs::read_to_string(&manifest).unwrap();
    let bad = text.replacen("utt00001\tfeats/utt00001.feat", "utt00001\tfeats/missing.feat", 1);
    std::fs::write(&manifest, bad).unwrap();
    match load_manifest(&manifest, 8) {
        Err(Error::Ingestion { utt, .. }) => assert_eq!(utt, "utt00001"),
        other => panic!("expected ingestion error, got {other:?}"),
    }

    std::fs::write(&manifest, "utt9\tfeats/utt00000.feat\t1 7\n").unwrap();
    match load_manifest(&manifest, 8) {
        Err(Error::Ingestion { utt, .. }) => assert_eq!(utt, "utt9"),
        other => panic!("expected ingestion error, got {other:?}"),
    }
}
