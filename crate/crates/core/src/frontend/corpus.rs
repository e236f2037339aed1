use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{usage, Error, Result};
use crate::numerics::Tensor;
use crate::{is_label, loss::ctc_min_frames, model::subsampled_len};

pub const MANIFEST_NAME: &str = "manifest.tsv";
const FEATURE_MAGIC: &[u8; 4] = b"U2FT";
const TEMPLATE_SEED: u64 = 0x7465_6d70;

/// One training or test example. `tokens` carries no sos/eos.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor,
    pub tokens: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }
}

/// Writes `U2FT | T:u32 | F:u32 | T·F f32`, all little-endian.
pub fn write_feature_file(path: &Path, features: &Tensor) -> Result<()> {
    let (t, f) = (features.rows(), features.cols());
    let mut buf = Vec::with_capacity(12 + 4 * t * f);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(f as u32).to_le_bytes());
    for &x in features.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "missing U2FT header"));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if t == 0 || f == 0 {
        return Err(Error::format(path, format!("empty feature matrix {t}x{f}")));
    }
    let body = &bytes[12..];
    if body.len() != 4 * t * f {
        return Err(Error::format(
            path,
            format!("header says {t}x{f} but body holds {} floats", body.len() / 4),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![t, f], data)
}

/// Reads a tab-separated manifest (`id`, feature path, space-separated
/// token ids). Relative paths resolve against the manifest's directory.
/// Every token must be an ordinary label of a `vocab`-sized vocabulary.
pub fn load_manifest(path: &Path, vocab: usize) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out: Vec<Utterance> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(
                path,
                format!("line {}: expected 3 tab-separated fields", lineno + 1),
            ));
        }
        let id = fields[0].to_string();
        let ingest = |msg: String| Error::Ingestion {
            utt: id.clone(),
            msg,
        };
        let mut tokens = Vec::new();
        for tok in fields[2].split_whitespace() {
            let k: usize = tok
                .parse()
                .map_err(|_| ingest(format!("token '{tok}' is not an integer")))?;
            if !is_label(k, vocab) {
                return Err(ingest(format!(
                    "token id {k} is reserved or outside a vocabulary of {vocab}"
                )));
            }
            tokens.push(k);
        }
        let feat_path = base.join(fields[1]);
        let features = read_feature_file(&feat_path).map_err(|e| ingest(e.to_string()))?;
        if let Some(first) = out.first() {
            if first.feat_dim() != features.cols() {
                return Err(ingest(format!(
                    "feature dim {} differs from {} in {}",
                    features.cols(),
                    first.feat_dim(),
                    first.id
                )));
            }
        }
        out.push(Utterance {
            id,
            features,
            tokens,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[(String, PathBuf, Vec<usize>)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (id, feat, tokens) in entries {
        let toks: Vec<String> = tokens.iter().map(usize::to_string).collect();
        writeln!(f, "{id}\t{}\t{}", feat.display(), toks.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes `dir/feats/<id>.feat` per utterance and `dir/manifest.tsv`.
pub fn write_corpus(dir: &Path, utts: &[Utterance]) -> Result<PathBuf> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let mut entries = Vec::with_capacity(utts.len());
    for u in utts {
        let rel = PathBuf::from("feats").join(format!("{}.feat", u.id));
        write_feature_file(&dir.join(&rel), &u.features)?;
        entries.push((u.id.clone(), rel, u.tokens.clone()));
    }
    let manifest = dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Recipe for a learnable toy corpus: every label is rendered as a fixed
/// random template, separated by silent gaps, plus uniform noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_utts: usize,
    pub vocab: usize,
    pub feat_dim: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub template_frames: usize,
    pub max_gap: usize,
    pub noise: f64,
    /// Upper bound on utterance length in frames.
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_utts: 100,
            vocab: 8,
            feat_dim: 16,
            min_tokens: 2,
            max_tokens: 5,
            template_frames: 8,
            max_gap: 3,
            noise: 0.1,
            max_frames: 64,
            seed: 1,
        }
    }
}

/// The fixed pattern of label `token`; depends only on the label, the
/// template length and the feature dim.
pub fn token_template(token: usize, frames: usize, feat_dim: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED ^ (token as u64).wrapping_mul(0x9e37_79b9));
    let data = (0..frames * feat_dim)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Tensor::raw(vec![frames, feat_dim], data)
}

pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<Vec<Utterance>> {
    if cfg.vocab < 4 {
        return Err(usage(format!(
            "vocabulary of {} leaves no room for labels besides blank/sos/eos",
            cfg.vocab
        )));
    }
    if cfg.feat_dim < 7 {
        return Err(usage("feature dim must be at least 7 to survive subsampling"));
    }
    if cfg.min_tokens == 0 || cfg.min_tokens > cfg.max_tokens || cfg.template_frames == 0 {
        return Err(usage("need 1 <= min_tokens <= max_tokens and template_frames >= 1"));
    }
    let worst = cfg.max_tokens * (cfg.template_frames + cfg.max_gap) + cfg.max_gap;
    if worst > cfg.max_frames {
        return Err(usage(format!(
            "max_frames {} cannot hold {} tokens of {} frames with gaps up to {} ({} needed)",
            cfg.max_frames, cfg.max_tokens, cfg.template_frames, cfg.max_gap, worst
        )));
    }
    let labels = cfg.vocab - 3;
    let templates: Vec<Tensor> = (0..=labels)
        .map(|k| token_template(k, cfg.template_frames, cfg.feat_dim))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let f = cfg.feat_dim;
    let mut utts = Vec::with_capacity(cfg.n_utts);
    for i in 0..cfg.n_utts {
        let n = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
        let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=labels)).collect();
        let mut frames: Vec<f64> = Vec::new();
        let silence = |frames: &mut Vec<f64>, len: usize| frames.extend(std::iter::repeat_n(0.0, len * f));
        silence(&mut frames, rng.gen_range(0..=cfg.max_gap));
        for &k in &tokens {
            frames.extend_from_slice(templates[k].data());
            silence(&mut frames, rng.gen_range(0..=cfg.max_gap));
        }
        let mut t_len = frames.len() / f;
        // Pad short utterances so the subsampled length can carry the labels.
        while subsampled_len(t_len).is_none_or(|tp| tp < ctc_min_frames(&tokens)) {
            silence(&mut frames, 1);
            t_len += 1;
        }
        for x in frames.iter_mut() {
            *x += rng.gen_range(-cfg.noise..=cfg.noise);
        }
        utts.push(Utterance {
            id: format!("utt{i:05}"),
            features: Tensor::raw(vec![t_len, f], frames),
            tokens,
        });
    }
    Ok(utts)
}
