use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use u2pp::config::RunConfig;
use u2pp::decode::{decode_features, nbest_line, read_transcript, transcript_line, CorpusCer, DecodeResult};
use u2pp::frontend::{generate_synthetic_corpus, load_manifest, write_corpus, Utterance};
use u2pp::model::{load_checkpoint, read_checkpoint_meta, save_checkpoint, U2Model};
use u2pp::train::{
    average_checkpoints, load_train_state, run_training, select_top_k, state_path_for, TrainState, CKPT_DIR,
};
use u2pp::verify::{run_all, Fault, VerifyOptions};
use u2pp::{Error, Result};

const ECHO_NAME: &str = "config.echo";

#[derive(Parser)]
#[command(name = "u2pp", version, about = "Unified streaming / non-streaming two-pass ASR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    threads: Option<usize>,
    /// `key=value` overrides, applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (feature files + manifest).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train from `manifest`, writing checkpoints and a log to the run directory.
    Train {
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Decode `manifest` with `checkpoint`; reports corpus CER.
    Decode {
        #[arg(long)]
        out: PathBuf,
        /// Exit with status 1 if corpus CER exceeds this value.
        #[arg(long)]
        max_cer: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Average checkpoints: explicit inputs, or the best of a run directory.
    Average {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 1.., conflicts_with = "run_dir")]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the oracle suites.
    Verify {
        /// Inject a known defect; the suites are expected to fail.
        #[arg(long)]
        fault: Option<Fault>,
        /// Fewer random cases per suite.
        #[arg(long)]
        quick: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score a transcript against the references in `manifest`.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        max_cer: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Shape(_) | Error::Config(_) => 2,
        Error::NonFinite { .. } => 1,
        Error::Ingestion { .. } | Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_) => 3,
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if cfg.threads == 0 {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(cfg)
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(ECHO_NAME);
    fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

fn required_path(value: &str, key: &str) -> Result<PathBuf> {
    if value.is_empty() {
        return Err(Error::Config(format!("{key} is not set")));
    }
    Ok(PathBuf::from(value))
}

fn cmd_synth(out: &Path, cfg: &RunConfig) -> Result<()> {
    let utts = generate_synthetic_corpus(&cfg.synth_config())?;
    let manifest = write_corpus(out, &utts)?;
    echo_config(out, cfg)?;
    let frames: usize = utts.iter().map(Utterance::frames).sum();
    let tokens: usize = utts.iter().map(|u| u.tokens.len()).sum();
    println!(
        "wrote {} utterances ({frames} frames, {tokens} tokens) to {}",
        utts.len(),
        manifest.display()
    );
    Ok(())
}

/// Training and validation sets: an explicit validation manifest, or the
/// trailing `valid_fraction` of the training manifest.
fn split_corpus(cfg: &RunConfig) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    let manifest = required_path(&cfg.manifest, "manifest")?;
    let mut train = load_manifest(&manifest, cfg.vocab)?;
    if !cfg.valid_manifest.is_empty() {
        let valid = load_manifest(Path::new(&cfg.valid_manifest), cfg.vocab)?;
        return Ok((train, valid));
    }
    let n_valid = (train.len() as f64 * cfg.valid_fraction).floor() as usize;
    let n_valid = n_valid.min(train.len().saturating_sub(1));
    let valid = train.split_off(train.len() - n_valid);
    Ok((train, valid))
}

fn cmd_train(run_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let tcfg = cfg.train_config()?;
    let (train, valid) = split_corpus(cfg)?;
    echo_config(run_dir, cfg)?;
    let state = if cfg.resume_from.is_empty() {
        TrainState::new(U2Model::new(cfg.model_config()?, cfg.seed)?, tcfg.adam)
    } else {
        let ckpt_path = PathBuf::from(&cfg.resume_from);
        let model = load_checkpoint(&ckpt_path)?.into_model()?;
        if model.config != cfg.model_config()? {
            log::warn!("model settings differ from the resumed checkpoint; using the checkpoint's");
        }
        load_train_state(&state_path_for(&ckpt_path), &model, tcfg.adam)?
    };
    let outcome = run_training(&tcfg, state, &train, &valid, run_dir)?;
    if let Some(last) = outcome.records.last() {
        println!(
            "step {} l_ctc {:.4} l_l2r {:.4} l_r2l {:.4} l_combined {:.4}",
            last.step, last.l_ctc, last.l_l2r, last.l_r2l, last.l_combined
        );
    }
    if let Some(path) = outcome.averaged {
        println!("averaged model: {}", path.display());
    }
    Ok(())
}

fn cmd_decode(out: &Path, max_cer: Option<f64>, cfg: &RunConfig) -> Result<bool> {
    let dcfg = cfg.decode_config()?;
    let ckpt = required_path(&cfg.checkpoint, "checkpoint")?;
    let model = load_checkpoint(&ckpt)?.into_model()?;
    let manifest = required_path(&cfg.manifest, "manifest")?;
    let utts = load_manifest(&manifest, model.config.vocab)?;
    echo_config(out, cfg)?;

    let results: Vec<DecodeResult> = utts
        .par_iter()
        .map(|u| decode_features(&model, &u.features, &dcfg))
        .collect::<Result<_>>()?;
    let mut lines = String::new();
    let mut nbest = String::new();
    let mut score = CorpusCer::default();
    for (u, r) in utts.iter().zip(&results) {
        lines.push_str(&transcript_line(&u.id, &r.best));
        lines.push('\n');
        for (rank, h) in r.nbest.iter().enumerate() {
            nbest.push_str(&nbest_line(&u.id, rank, h));
            nbest.push('\n');
        }
        score.add(&u.tokens, &r.best.tokens);
    }
    let path = out.join("decode.tsv");
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    if cfg.nbest_dump {
        let path = out.join("nbest.tsv");
        fs::write(&path, nbest).map_err(|e| Error::io(&path, e))?;
    }
    report_cer(&score, max_cer)
}

fn report_cer(score: &CorpusCer, max_cer: Option<f64>) -> Result<bool> {
    println!(
        "CER {:.4} ({} edits / {} reference tokens, {} utterances, {} empty references)",
        score.rate(),
        score.edits,
        score.ref_tokens,
        score.utterances,
        score.empty_refs
    );
    Ok(max_cer.is_none_or(|m| score.rate() <= m))
}

fn cmd_eval(hyp: &Path, max_cer: Option<f64>, cfg: &RunConfig) -> Result<bool> {
    let manifest = required_path(&cfg.manifest, "manifest")?;
    let refs = load_manifest(&manifest, cfg.vocab)?;
    let hyps = read_transcript(hyp)?;
    let mut score = CorpusCer::default();
    for u in &refs {
        let h = hyps.get(&u.id).ok_or_else(|| Error::Ingestion {
            utt: u.id.clone(),
            msg: format!("missing from {}", hyp.display()),
        })?;
        score.add(&u.tokens, &h.tokens);
    }
    report_cer(&score, max_cer)
}

fn cmd_average(out: &Path, inputs: &[PathBuf], run_dir: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let paths: Vec<PathBuf> = match run_dir {
        Some(dir) => {
            let ckpt_dir = dir.join(CKPT_DIR);
            let mut metas = Vec::new();
            for entry in fs::read_dir(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))? {
                let path = entry.map_err(|e| Error::io(&ckpt_dir, e))?.path();
                if path.extension().is_some_and(|e| e == "u2ck") {
                    metas.push(read_checkpoint_meta(&path)?);
                }
            }
            select_top_k(&metas, cfg.average_top_k).into_iter().map(|m| m.path).collect()
        }
        None => inputs.to_vec(),
    };
    if paths.is_empty() {
        return Err(Error::Usage("no checkpoints to average".into()));
    }
    let avg = average_checkpoints(&paths)?;
    save_checkpoint(out, &avg)?;
    println!("averaged {} checkpoints into {}", paths.len(), out.display());
    Ok(())
}

fn cmd_verify(fault: Option<Fault>, quick: bool, cfg: &RunConfig) -> bool {
    let mut opts = VerifyOptions {
        seed: cfg.seed,
        fault,
        ..VerifyOptions::default()
    };
    if quick {
        opts.ctc_cases = 100;
        opts.gradient_seeds = 2;
        opts.prefix_cases = 50;
        opts.causality_cases = 10;
        opts.symmetry_cases = 20;
        opts.spec_sub_cases = 200;
    }
    let reports = run_all(&opts);
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all suites passed");
        true
    } else {
        println!("failed suites: {}", failed.join(", "));
        false
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { out, common } => cmd_synth(&out, &resolve(&common)?).map(|_| true),
        Command::Train { run_dir, common } => cmd_train(&run_dir, &resolve(&common)?).map(|_| true),
        Command::Decode { out, max_cer, common } => cmd_decode(&out, max_cer, &resolve(&common)?),
        Command::Average {
            out,
            inputs,
            run_dir,
            common,
        } => cmd_average(&out, &inputs, run_dir.as_deref(), &resolve(&common)?).map(|_| true),
        Command::Verify { fault, quick, common } => {
            let cfg = resolve(&common)?;
            eprint!("{}", cfg.to_text().lines().map(|l| format!("# {l}\n")).collect::<String>());
            Ok(cmd_verify(fault, quick, &cfg))
        }
        Command::Eval { hyp, max_cer, common } => cmd_eval(&hyp, max_cer, &resolve(&common)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
