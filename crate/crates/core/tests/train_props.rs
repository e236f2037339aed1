use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use u2pp::frontend::{generate_synthetic_corpus, SynthConfig, Utterance};
use u2pp::model::{ChunkMode, ParamStore, U2Model};
use u2pp::numerics::Tensor;
use u2pp::train::{average_params, run_training, train_step, TrainConfig, TrainState, CKPT_DIR, LOG_NAME};
use u2pp::verify::gradient_toy_config;
use u2pp::Error;

#[test]
fn averaging_ignores_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let stores: Vec<ParamStore> = (0..rng.gen_range(2..8))
            .map(|_| {
                let mut s = ParamStore::new();
                s.insert("a", Tensor::vector((0..5).map(|_| rng.gen_range(-1e3..1e3)).collect()));
                s.insert("b", Tensor::vector((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()));
                s
            })
            .collect();
        let mut refs: Vec<&ParamStore> = stores.iter().collect();
        let a = average_params(&refs).unwrap();
        refs.shuffle(&mut rng);
        let b = average_params(&refs).unwrap();
        for (name, t) in a.iter() {
            let d = t.max_abs_diff(b.get(name).unwrap());
            assert!(d <= 1e-12 * 1e3, "{name}: {d}");
        }
    }
}

fn toy_corpus(n: usize) -> Vec<Utterance> {
    let cfg = gradient_toy_config();
    generate_synthetic_corpus(&SynthConfig {
        n_utts: n,
        vocab: cfg.vocab,
        feat_dim: cfg.feat_dim,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn one_step_run_logs_once_and_checkpoints_once() {
    let dir = tempfile::tempdir().unwrap();
    let model = U2Model::new(gradient_toy_config(), 2).unwrap();
    let cfg = TrainConfig {
        max_steps: 1,
        batch_size: 2,
        spec_aug: None,
        ..TrainConfig::default()
    };
    let state = TrainState::new(model, cfg.adam);
    let out = run_training(&cfg, state, &toy_corpus(4), &[], dir.path()).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.checkpoints.len(), 1);
    let log = std::fs::read_to_string(dir.path().join(LOG_NAME)).unwrap();
    assert_eq!(log.lines().count(), 1);
    let ckpts = std::fs::read_dir(dir.path().join(CKPT_DIR))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "u2ck"))
        .count();
    assert_eq!(ckpts, 1);
    assert!(out.averaged.is_some());
}

#[test]
fn non_finite_input_aborts_the_step() {
    let model = U2Model::new(gradient_toy_config(), 3).unwrap();
    let cfg = TrainConfig::default();
    let mut state = TrainState::new(model, cfg.adam);
    let mut batch = toy_corpus(2);
    batch[0].features.data_mut()[5] = f64::NAN;
    let err = train_step(&mut state, &batch, ChunkMode::Full, &cfg).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 1, .. }), "{err}");
    assert_eq!(state.step, 0);
}

#[test]
fn losses_fall_on_a_small_corpus() {
    let corpus = toy_corpus(6);
    let model = U2Model::new(gradient_toy_config(), 4).unwrap();
    let cfg = TrainConfig {
        base_lr: 2.0,
        warmup_steps: 20,
        batch_size: 6,
        spec_sub: None,
        spec_aug: None,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(model, cfg.adam);
    let losses: Vec<f64> = (0..60)
        .map(|_| train_step(&mut state, &corpus, ChunkMode::Full, &cfg).unwrap().l_combined)
        .collect();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
}
