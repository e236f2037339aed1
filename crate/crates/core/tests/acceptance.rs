//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use u2pp::decode::{
    ctc_prefix_beam_search, fuse_scores, read_nbest, read_transcript, rescore, CorpusCer, DecodeConfig,
    DecoderUse, Hypothesis,
};
use u2pp::frontend::{generate_synthetic_corpus, load_manifest, SpecAugConfig, SynthConfig, Utterance};
use u2pp::loss::LossWeights;
use u2pp::model::{load_checkpoint, save_checkpoint, Checkpoint, ChunkMode, ChunkPolicy, U2Model};
use u2pp::numerics::Tensor;
use u2pp::train::{
    average_checkpoints, load_train_state, run_training, state_path_for, TrainConfig, TrainState, CKPT_DIR,
    LOG_NAME,
};
use u2pp::verify::{
    causality_suite, ctc_suite, gradient_suite, gradient_toy_config, prefix_beam_suite, spec_sub_suite,
    symmetry_suite, SuiteReport,
};

struct Outcome {
    id: u32,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn suite_outcome(id: u32, title: &'static str, r: &SuiteReport, limit: Duration) -> Outcome {
    let in_time = r.elapsed <= limit;
    let mut detail = format!(
        "{} cases, max error {:.2e} (tol {:.0e}), {:.2}s (limit {}s)",
        r.cases,
        r.max_error,
        r.tolerance,
        r.elapsed.as_secs_f64(),
        limit.as_secs()
    );
    for f in r.failures.iter().take(3) {
        detail.push_str(&format!("; {f}"));
    }
    Outcome {
        id,
        title,
        passed: r.passed() && in_time,
        detail,
    }
}

fn criterion_1() -> Outcome {
    let r = ctc_suite(11, 600);
    suite_outcome(1, "CTC loss vs alignment enumeration", &r, Duration::from_secs(30))
}

fn criterion_2() -> Outcome {
    let r = gradient_suite(12, 20);
    suite_outcome(2, "joint-loss gradient vs central differences", &r, Duration::from_secs(300))
}

fn criterion_3() -> Outcome {
    let r = prefix_beam_suite(13, 500);
    suite_outcome(3, "prefix beam vs exhaustive prefixes, streaming = batch", &r, Duration::from_secs(60))
}

fn criterion_4() -> Outcome {
    let r = causality_suite(14, 100, None);
    suite_outcome(4, "chunk encoder and decoder causality", &r, Duration::from_secs(60))
}

fn criterion_5() -> Outcome {
    let r = symmetry_suite(15, 200, None);
    suite_outcome(5, "R2L(y) = L2R(reverse y) with mirrored weights", &r, Duration::from_secs(60))
}

fn criterion_6() -> Outcome {
    let r = spec_sub_suite(16, 2000);
    suite_outcome(6, "SpecSub replay and invariants", &r, Duration::from_secs(10))
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_u2pp"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "u2pp {} exited with {}: {}",
            args.first().unwrap_or(&""),
            out.status,
            String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")
        ))
    }
}

fn corpus_cer(refs: &[Utterance], hyps: &BTreeMap<String, Hypothesis>) -> Result<f64, String> {
    let mut c = CorpusCer::default();
    for u in refs {
        let h = hyps.get(&u.id).ok_or(format!("{} missing from transcript", u.id))?;
        c.add(&u.tokens, &h.tokens);
    }
    Ok(c.rate())
}

/// Straight recomputation of the fused score from the dumped components.
fn brute_force_pick(cands: &[Hypothesis], lambda: f64, alpha: f64) -> Vec<usize> {
    let mut best: Option<(f64, &Vec<usize>)> = None;
    for h in cands {
        let s = lambda * h.s_ctc.unwrap() + (1.0 - alpha) * h.s_l2r.unwrap() + alpha * h.s_r2l.unwrap();
        let better = match best {
            None => true,
            Some((b, toks)) => s > b || (s == b && h.tokens < *toks),
        };
        if better {
            best = Some((s, &h.tokens));
        }
    }
    best.map(|(_, t)| t.clone()).unwrap_or_default()
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let run = || -> Result<String, String> {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let recipe = workspace_root().join("recipes/toy.conf");
        let recipe = recipe.to_str().unwrap();
        let corpus = tmp.path().join("corpus");
        let run_dir = tmp.path().join("run");
        let manifest = corpus.join("manifest.tsv");
        let m_arg = format!("manifest={}", manifest.display());
        cli(&["synth", "--out", corpus.to_str().unwrap(), "--config", recipe])?;
        cli(&["train", "--run-dir", run_dir.to_str().unwrap(), "--config", recipe, &m_arg])?;
        let steps = fs::read_to_string(run_dir.join(LOG_NAME)).map_err(|e| e.to_string())?.lines().count();
        if steps > 2000 {
            return Err(format!("{steps} training steps > 2000"));
        }
        let ckpt = format!("checkpoint={}", run_dir.join("final.u2ck").display());
        let refs = load_manifest(&manifest, 8).map_err(|e| e.to_string())?;
        if refs.len() != 100 {
            return Err(format!("corpus has {} utterances", refs.len()));
        }

        let mut cers = Vec::new();
        for (chunk, limit) in [("full", 0.05), ("16", 0.10)] {
            let out = tmp.path().join(format!("greedy_{chunk}"));
            let chunk_arg = format!("decode_chunk={chunk}");
            cli(&["decode", "--out", out.to_str().unwrap(), "--config", recipe, &m_arg, &ckpt, "mode=ctc_greedy", &chunk_arg])?;
            let hyps = read_transcript(&out.join("decode.tsv")).map_err(|e| e.to_string())?;
            let cer = corpus_cer(&refs, &hyps)?;
            if cer > limit {
                return Err(format!("ctc_greedy CER {cer:.4} > {limit} with chunk {chunk}"));
            }
            cers.push(cer);
        }

        let out = tmp.path().join("rescore");
        cli(&["decode", "--out", out.to_str().unwrap(), "--config", recipe, &m_arg, &ckpt,
              "mode=attention_rescore", "nbest_dump=true", "decode_lambda=0.5", "decode_alpha=0.3"])?;
        let chosen = read_transcript(&out.join("decode.tsv")).map_err(|e| e.to_string())?;
        let nbest = read_nbest(&out.join("nbest.tsv")).map_err(|e| e.to_string())?;
        for u in &refs {
            let pick = brute_force_pick(&nbest[&u.id], 0.5, 0.3);
            if chosen[&u.id].tokens != pick {
                return Err(format!("{}: rescoring chose {:?}, brute force {:?}", u.id, chosen[&u.id].tokens, pick));
            }
        }
        let elapsed = start.elapsed();
        if elapsed > Duration::from_secs(1200) {
            return Err(format!("took {:.0}s > 1200s", elapsed.as_secs_f64()));
        }
        Ok(format!(
            "{steps} steps, ctc_greedy CER full {:.4} (≤0.05), chunk 16 {:.4} (≤0.10), \
             rescoring = brute-force argmax on {} utterances, {:.1}s (limit 1200s)",
            cers[0],
            cers[1],
            refs.len(),
            elapsed.as_secs_f64()
        ))
    };
    to_outcome(7, "toy overfit and rescoring selection", run())
}

fn to_outcome(id: u32, title: &'static str, r: Result<String, String>) -> Outcome {
    match r {
        Ok(detail) => Outcome { id, title, passed: true, detail },
        Err(detail) => Outcome { id, title, passed: false, detail },
    }
}

fn criterion_8() -> Outcome {
    let run = || -> Result<String, String> {
        let s = fuse_scores(-2.0, Some(-1.0), Some(-1.5), 0.5, 0.3, DecoderUse::Both);
        if s != -2.15 {
            return Err(format!("fused score {s:?} != -2.15"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let cfg = gradient_toy_config();
        let mut checked = 0;
        for case in 0..30 {
            let model = U2Model::new(cfg.clone(), rng.gen()).map_err(|e| e.to_string())?;
            let frames = rng.gen_range(20..=40);
            let feats = Tensor::new(
                vec![frames, cfg.feat_dim],
                (0..frames * cfg.feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let enc = model.encode(&feats, ChunkMode::Full).map_err(|e| e.to_string())?;
            let first = ctc_prefix_beam_search(&model.ctc_log_probs(&enc).unwrap(), 6);
            for (lambda, alpha, mode) in [
                (1.0, rng.gen_range(0.0..1.0), DecoderUse::Both),
                (0.0, 0.0, DecoderUse::Both),
                (0.5, 0.3, DecoderUse::L2rOnly),
                (0.5, 0.3, DecoderUse::R2lOnly),
            ] {
                let dcfg = DecodeConfig {
                    lambda,
                    alpha,
                    use_decoders: mode,
                    ..DecodeConfig::default()
                };
                let ranked = rescore(&first, &model, &enc, &dcfg).map_err(|e| e.to_string())?;
                let mut best: Option<(f64, Vec<usize>)> = None;
                for h in &first {
                    let l2r = model.score_sequence(&enc, &h.tokens, u2pp::model::Direction::L2r).unwrap();
                    let r2l = model.score_sequence(&enc, &h.tokens, u2pp::model::Direction::R2l).unwrap();
                    let ctc = h.s_ctc.unwrap();
                    let s = match mode {
                        DecoderUse::Both => lambda * ctc + (1.0 - alpha) * l2r + alpha * r2l,
                        DecoderUse::L2rOnly => lambda * ctc + l2r,
                        DecoderUse::R2lOnly => lambda * ctc + r2l,
                    };
                    if best.as_ref().is_none_or(|(b, t)| s > *b || (s == *b && h.tokens < *t)) {
                        best = Some((s, h.tokens.clone()));
                    }
                }
                let expect = best.unwrap().1;
                if ranked[0].tokens != expect {
                    return Err(format!(
                        "case {case} {} λ={lambda} α={alpha}: chose {:?}, expected {expect:?}",
                        mode.as_str(),
                        ranked[0].tokens
                    ));
                }
                checked += 1;
            }
        }
        Ok(format!(
            "(-2.0,-1.0,-1.5) at λ=0.5 α=0.3 fuses to exactly -2.15; {checked} boundary selections \
             (λ=1, λ=α=0, l2r_only, r2l_only) match recomputation"
        ))
    };
    to_outcome(8, "fused-score arithmetic and boundary modes", run())
}

fn split_run_config(max_steps: usize) -> TrainConfig {
    TrainConfig {
        base_lr: 1.0,
        warmup_steps: 5,
        max_steps,
        batch_size: 3,
        seed: 19,
        weights: LossWeights::default(),
        checkpoint_every: 4,
        average_top_k: 2,
        chunk_policy: ChunkPolicy::default(),
        spec_aug: Some(SpecAugConfig {
            f_max: 4,
            t_mask_max: 6,
            ..SpecAugConfig::default()
        }),
        ..TrainConfig::default()
    }
}

fn criterion_9() -> Outcome {
    let run = || -> Result<String, String> {
        let e = |x: u2pp::Error| x.to_string();
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = gradient_toy_config();
        let model = U2Model::new(cfg.clone(), 9).map_err(e)?;

        let ckpt = Checkpoint::from_model(&model, 7, 1.25).quantized();
        let p = tmp.path().join("a.u2ck");
        save_checkpoint(&p, &ckpt).map_err(e)?;
        let back = load_checkpoint(&p).map_err(e)?;
        if back != ckpt || back.to_bytes() != fs::read(&p).unwrap() {
            return Err("checkpoint round trip is not exact".into());
        }

        let copies: Vec<PathBuf> = (0..5)
            .map(|i| {
                let q = tmp.path().join(format!("copy{i}.u2ck"));
                fs::copy(&p, &q).unwrap();
                q
            })
            .collect();
        let avg = average_checkpoints(&copies).map_err(e)?;
        if avg.params != ckpt.params {
            return Err("average of identical checkpoints differs from the checkpoint".into());
        }

        let corpus = generate_synthetic_corpus(&SynthConfig {
            n_utts: 10,
            vocab: cfg.vocab,
            feat_dim: cfg.feat_dim,
            ..SynthConfig::default()
        })
        .map_err(e)?;
        let (train, valid) = corpus.split_at(8);
        let full_dir = tmp.path().join("full");
        let split_dir = tmp.path().join("split");
        let fresh = || TrainState::new(model.clone(), TrainConfig::default().adam);
        let full = run_training(&split_run_config(12), fresh(), train, valid, &full_dir).map_err(e)?;
        run_training(&split_run_config(8), fresh(), train, valid, &split_dir).map_err(e)?;
        let mid = split_dir.join(CKPT_DIR).join("step_0000008.u2ck");
        let resumed_model = load_checkpoint(&mid).map_err(e)?.into_model().map_err(e)?;
        let state = load_train_state(&state_path_for(&mid), &resumed_model, TrainConfig::default().adam).map_err(e)?;
        let split = run_training(&split_run_config(12), state, train, valid, &split_dir).map_err(e)?;
        if split.state != full.state {
            return Err("resumed parameters or optimizer state differ".into());
        }
        for name in ["ckpt/step_0000012.u2ck", "ckpt/step_0000012.state", LOG_NAME, "final.u2ck"] {
            if fs::read(full_dir.join(name)).ok() != fs::read(split_dir.join(name)).ok() {
                return Err(format!("{name} differs between split and uninterrupted runs"));
            }
        }
        Ok("round trip byte-exact; mean of 5 identical checkpoints is that checkpoint; \
            8+4-step resumed run byte-identical to 12-step run"
            .into())
    };
    to_outcome(9, "checkpoint persistence, averaging, resume", run())
}

fn main() {
    let criteria: [fn() -> Outcome; 9] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
    ];
    let mut failed = 0;
    for c in criteria {
        let o = c();
        println!(
            "criterion {} [{}] {}: {}",
            o.id,
            if o.passed { "PASS" } else { "FAIL" },
            o.title,
            o.detail
        );
        if !o.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 9 acceptance criteria passed");
}
