//! End-to-end runs: corpus → tokens → quantizer → checkpoint → index →
//! generations → reports, each stage cached under a content hash of its
//! inputs, plus ablation sweeps over one axis.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::corpus::{self, Corpus, GrammarParams, PairKind, SyntheticGrammar, Utterance};
use crate::error::{Error, Result};
use crate::eval::{self, CubicFit, CurvePoint, EvalReport, LabeledEmbedding};
use crate::model::{self, Checkpoint, LmConfig, NegativePool};
use crate::quantize::{self, BottleneckMode, QuantizerModel};
use crate::rng;
use crate::sample::{self, GenerationParams, LexicalIndex, Transcriber};
use crate::tokenize::{self, AcousticToken, EncoderConfig, SegmentEncoder, Segmentation};

/// Bumped whenever an artifact format changes so stale caches are ignored.
const CACHE_VERSION: &str = "toklm-cache-2";
pub const CACHE_ENV: &str = "TOKLM_CACHE_DIR";

/// Fractions of utterances routed to the non-training splits; the rest
/// trains the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub valid: f64,
    pub index: f64,
    pub eval: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 3,
            valid: 0.05,
            index: 0.2,
            eval: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Index,
    Eval,
}

impl SplitConfig {
    /// Each utterance draws its split from its own seeded stream, so the
    /// assignment does not depend on corpus size or order.
    pub fn assign(&self, utt_id: u32) -> Split {
        let u: f64 = rng::stream(self.seed, utt_id as u64).random();
        if u < self.valid {
            Split::Valid
        } else if u < self.valid + self.index {
            Split::Index
        } else if u < self.valid + self.index + self.eval {
            Split::Eval
        } else {
            Split::Train
        }
    }

    fn validate(&self) -> Result<()> {
        let parts = [self.valid, self.index, self.eval];
        if parts.iter().any(|p| !(0.0..1.0).contains(p)) || parts.iter().sum::<f64>() >= 1.0 {
            return Err(Error::config(
                "split fractions must be in [0, 1) and leave room for training",
            ));
        }
        if self.index == 0.0 || self.eval == 0.0 {
            return Err(Error::config("index and eval splits must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub abx_triplets: usize,
    /// Cap on tokens entering the quadratic NED search.
    pub ned_tokens: usize,
    pub pairs: usize,
    pub pair_min_tokens: usize,
    pub negative_pool: usize,
    pub ppx_pseudo_count: f64,
    /// Also score the pair suites with the freshly initialised model.
    pub untrained_baseline: bool,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            abx_triplets: 4000,
            ned_tokens: 1500,
            pairs: 500,
            pair_min_tokens: 4,
            negative_pool: 256,
            ppx_pseudo_count: eval::PPX_PSEUDO_COUNT,
            untrained_baseline: true,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grammar: GrammarParams,
    pub n_utterances: usize,
    pub tokens_per_utterance: (usize, usize),
    pub corpus_seed: u64,
    pub segmentation: Segmentation,
    pub encoder: EncoderConfig,
    pub bottleneck: BottleneckMode,
    pub quant_d: usize,
    pub quant_k: usize,
    pub quant_seed: u64,
    pub model: LmConfig,
    pub splits: SplitConfig,
    pub generation: GenerationParams,
    pub temperatures: Vec<f64>,
    pub n_sentences: usize,
    pub eval: EvalSettings,
    pub output_dir: PathBuf,
    /// Cache root; `TOKLM_CACHE_DIR` takes precedence, the fallback is
    /// `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grammar: GrammarParams::default(),
            n_utterances: 2000,
            tokens_per_utterance: (6, 16),
            corpus_seed: 7,
            segmentation: Segmentation::Gold,
            encoder: EncoderConfig::default(),
            bottleneck: BottleneckMode::PcaDkmeans,
            quant_d: 24,
            quant_k: 10,
            quant_seed: 13,
            model: LmConfig {
                max_steps: 1000,
                warmup_steps: 100,
                eval_every: 50,
                learning_rate: 2e-3,
                dropout: 0.3,
                ..LmConfig::default()
            },
            splits: SplitConfig::default(),
            generation: GenerationParams {
                seed: 23,
                k_neighbours: 1000,
                ..GenerationParams::default()
            },
            temperatures: vec![0.002, 0.004, 0.008, 0.016, 0.032, 0.064, 0.128, 0.256],
            n_sentences: 100,
            eval: EvalSettings::default(),
            output_dir: PathBuf::from("out/run"),
            cache_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self =
            serde_json::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.tokens_per_utterance;
        if self.n_utterances == 0 || lo < 2 || lo > hi {
            return Err(Error::config("need utterances with at least two tokens"));
        }
        if let Segmentation::Fixed { window_frames: 0 } = self.segmentation {
            return Err(Error::config("window_frames must be >= 1"));
        }
        if self.bottleneck != BottleneckMode::None
            && (self.quant_d == 0 || self.quant_d > self.encoder.out_dim)
        {
            return Err(Error::config("quant_d must lie in 1..=encoder.out_dim"));
        }
        if self.bottleneck == BottleneckMode::PcaDkmeans && self.quant_k == 0 {
            return Err(Error::config("quant_k must be >= 1"));
        }
        self.model.validate()?;
        self.splits.validate()?;
        self.generation.validate()?;
        if self.temperatures.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::config("temperatures must be positive"));
        }
        if self.n_sentences < 2 && !self.temperatures.is_empty() {
            return Err(Error::config(
                "n_sentences must be >= 2 to measure diversity",
            ));
        }
        Ok(())
    }

    /// Stable digest of the configuration, excluding output locations.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.cache_dir = None;
        digest(&serde_json::to_value(&c).expect("config serialises"))
    }

    fn cache_root(&self) -> PathBuf {
        std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .or_else(|| self.cache_dir.clone())
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }
}

fn digest(value: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(CACHE_VERSION.as_bytes());
    h.update(value.to_string().as_bytes());
    hex::encode(&h.finalize()[..12])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub cached: bool,
}

fn key_locks() -> &'static Mutex<HashMap<PathBuf, Arc<Mutex<()>>>> {
    static LOCKS: OnceLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = OnceLock::new();
    LOCKS.get_or_init(Default::default)
}

struct Cache {
    root: PathBuf,
    records: Vec<StageRecord>,
}

impl Cache {
    /// Loads `<root>/<stage>-<key>` or builds it in a scratch directory that
    /// is renamed into place once complete. Concurrent runs in this process
    /// serialise on the key.
    fn stage<T>(
        &mut self,
        stage: &str,
        key: &str,
        build: impl FnOnce(&Path) -> Result<T>,
        load: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<(T, PathBuf)> {
        static SCRATCH: AtomicU64 = AtomicU64::new(0);
        let dir = self.root.join(format!("{stage}-{key}"));
        let lock = key_locks()
            .lock()
            .unwrap()
            .entry(dir.clone())
            .or_default()
            .clone();
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let wrap = |e: Error| Error::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        };
        if dir.is_dir() {
            match load(&dir) {
                Ok(v) => {
                    info!("{stage}: cached ({key})");
                    self.records.push(StageRecord {
                        stage: stage.into(),
                        key: key.into(),
                        cached: true,
                    });
                    return Ok((v, dir));
                }
                Err(e) => {
                    warn!("{stage}: discarding unreadable cache entry: {e}");
                    fs::remove_dir_all(&dir).map_err(|e| wrap(e.into()))?;
                }
            }
        }
        info!("{stage}: building ({key})");
        fs::create_dir_all(&self.root).map_err(|e| wrap(e.into()))?;
        let scratch = self.root.join(format!(
            ".tmp-{stage}-{key}-{}-{}",
            std::process::id(),
            SCRATCH.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&scratch).map_err(|e| wrap(e.into()))?;
        let value = match build(&scratch) {
            Ok(v) => v,
            Err(e) => {
                let _ = fs::remove_dir_all(&scratch);
                return Err(wrap(e));
            }
        };
        if fs::rename(&scratch, &dir).is_err() {
            // lost a race with another process; keep the winner's copy
            let _ = fs::remove_dir_all(&scratch);
        }
        self.records.push(StageRecord {
            stage: stage.into(),
            key: key.into(),
            cached: false,
        });
        Ok((value, dir))
    }
}

fn run_stage<T>(stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: stage.into(),
            source: Box::new(e),
        },
    })
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: EvalReport,
    pub stages: Vec<StageRecord>,
    pub output_dir: PathBuf,
}

/// One generated sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub temperature: f64,
    pub sentence: usize,
    pub entries: Vec<usize>,
    pub types: Vec<u32>,
}

/// Intermediate artifacts, exposed for tests and the CLI.
pub struct Artifacts {
    pub grammar: SyntheticGrammar,
    pub utterances: Vec<Utterance>,
    pub tokens: Vec<AcousticToken>,
    pub quantizer: QuantizerModel,
    pub checkpoint: Checkpoint,
    pub train_log: Vec<model::LogEntry>,
    pub index: LexicalIndex,
    pub generations: Vec<Generation>,
}

pub fn tokenize_all(
    utts: &[Utterance],
    segmentation: Segmentation,
    encoder: &SegmentEncoder,
) -> Result<Vec<AcousticToken>> {
    let mut out = Vec::new();
    for u in utts {
        out.extend(tokenize::tokenize_utterance(u, segmentation, encoder)?);
    }
    Ok(out)
}

fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::parse(format!("line {}", i + 1), e.to_string()))
        })
        .collect()
}

/// Runs (or resumes) every stage up to and including generation.
pub fn build_artifacts(config: &RunConfig) -> Result<(Artifacts, Vec<StageRecord>)> {
    config.validate()?;
    let mut cache = Cache {
        root: config.cache_root(),
        records: Vec::new(),
    };

    let corpus_key = digest(&json!({
        "stage": "corpus",
        "grammar": config.grammar,
        "n": config.n_utterances,
        "len": config.tokens_per_utterance,
        "seed": config.corpus_seed,
    }));
    let (corpus, _) = cache.stage(
        "corpus",
        &corpus_key,
        |dir| {
            let grammar = corpus::generate_grammar(&config.grammar)?;
            let utterances = corpus::sample_corpus(
                &grammar,
                config.n_utterances,
                config.tokens_per_utterance,
                config.corpus_seed,
            )?;
            let c = Corpus {
                grammar: Some(grammar),
                utterances,
            };
            corpus::write_corpus(&dir.join("corpus.bin"), &c)?;
            Ok(c)
        },
        |dir| corpus::read_corpus(&dir.join("corpus.bin")),
    )?;
    let grammar = corpus
        .grammar
        .clone()
        .ok_or_else(|| Error::invalid("cached corpus lacks its grammar"))?;
    let utterances = corpus.utterances;

    let encoder = SegmentEncoder::new(config.encoder, grammar.frame_dim())?;
    let tokens_key = digest(&json!({
        "stage": "tokens",
        "corpus": corpus_key,
        "segmentation": config.segmentation,
        "encoder": config.encoder,
    }));
    let (tokens, _) = cache.stage(
        "tokens",
        &tokens_key,
        |dir| {
            let t = tokenize_all(&utterances, config.segmentation, &encoder)?;
            tokenize::write_tokens(
                &dir.join("tokens.bin"),
                &t,
                Some(config.encoder),
                Some(config.segmentation),
            )?;
            Ok(t)
        },
        |dir| Ok(tokenize::read_tokens(&dir.join("tokens.bin"))?.tokens),
    )?;

    let split_of = |t: &AcousticToken| config.splits.assign(t.utt_id);
    let quant_key = digest(&json!({
        "stage": "quantizer",
        "tokens": tokens_key,
        "splits": config.splits,
        "mode": config.bottleneck,
        "d": config.quant_d,
        "k": config.quant_k,
        "seed": config.quant_seed,
    }));
    let (quantizer, _) = cache.stage(
        "quantizer",
        &quant_key,
        |dir| {
            let train: Vec<Vec<f64>> = tokens
                .iter()
                .filter(|t| split_of(t) == Split::Train)
                .map(|t| t.vector.iter().map(|&x| x as f64).collect())
                .collect();
            let q = quantize::fit_bottleneck(
                &train,
                config.bottleneck,
                config.quant_d,
                config.quant_k,
                config.quant_seed,
            )?;
            quantize::write_quantizer(&dir.join("quantizer.bin"), &q)?;
            Ok(q)
        },
        |dir| quantize::read_quantizer(&dir.join("quantizer.bin")),
    )?;

    let ckpt_key = digest(&json!({
        "stage": "checkpoint",
        "quantizer": quant_key,
        "model": config.model,
    }));
    let ((checkpoint, train_log), _) = cache.stage(
        "checkpoint",
        &ckpt_key,
        |dir| {
            let pick = |s: Split| -> Vec<AcousticToken> {
                tokens
                    .iter()
                    .filter(|t| split_of(t) == s)
                    .cloned()
                    .collect()
            };
            let max_len = config.model.tokens_per_sentence;
            let train_seqs =
                model::sequences_from_tokens(&pick(Split::Train), &quantizer, max_len)?;
            let valid_seqs =
                model::sequences_from_tokens(&pick(Split::Valid), &quantizer, max_len)?;
            info!(
                "training on {} sentences, validating on {}",
                train_seqs.len(),
                valid_seqs.len()
            );
            let out = model::train(&config.model, &quantizer, &train_seqs, &valid_seqs, |_| {})?;
            model::write_checkpoint(&dir.join("model.ckpt"), &out.checkpoint)?;
            write_json_lines(&dir.join("train_log.jsonl"), &out.log)?;
            Ok((out.checkpoint, out.log))
        },
        |dir| {
            Ok((
                model::read_checkpoint(&dir.join("model.ckpt"))?,
                read_json_lines(&dir.join("train_log.jsonl"))?,
            ))
        },
    )?;

    let by_id: HashMap<u32, &Utterance> = utterances.iter().map(|u| (u.utt_id, u)).collect();
    let index_key =
        digest(&json!({ "stage": "index", "checkpoint": ckpt_key, "splits": config.splits }));
    let (index, _) = cache.stage(
        "index",
        &index_key,
        |dir| {
            let training: std::collections::BTreeSet<u32> = utterances
                .iter()
                .map(|u| u.utt_id)
                .filter(|&id| matches!(config.splits.assign(id), Split::Train | Split::Valid))
                .collect();
            let entries = tokens
                .iter()
                .filter(|t| split_of(t) == Split::Index)
                .map(|t| {
                    (
                        t.clone(),
                        tokenize::span_majority_type(by_id[&t.utt_id], t.span),
                    )
                })
                .collect();
            let idx = sample::build_lexical_index(&checkpoint, entries, &training)?;
            sample::write_index(&dir.join("lexical.index"), &idx)?;
            Ok(idx)
        },
        |dir| sample::read_index(&dir.join("lexical.index")),
    )?;

    let gen_key = digest(&json!({
        "stage": "generations",
        "index": index_key,
        "params": config.generation,
        "temperatures": config.temperatures,
        "n": config.n_sentences,
    }));
    let (generations, _) = cache.stage(
        "generations",
        &gen_key,
        |dir| {
            let transcriber = Transcriber::new(&grammar, &encoder)?;
            let mut out = Vec::new();
            for &temperature in &config.temperatures {
                let params = GenerationParams {
                    temperature,
                    ..config.generation
                };
                for s in 0..config.n_sentences {
                    let entries =
                        sample::generate_stream(&checkpoint, &index, &[], &params, s as u64)?;
                    let types = transcriber.transcribe(&index, &entries);
                    out.push(Generation {
                        temperature,
                        sentence: s,
                        entries,
                        types,
                    });
                }
            }
            write_json_lines(&dir.join("generations.jsonl"), &out)?;
            Ok(out)
        },
        |dir| read_json_lines(&dir.join("generations.jsonl")),
    )?;

    Ok((
        Artifacts {
            grammar,
            utterances,
            tokens,
            quantizer,
            checkpoint,
            train_log,
            index,
            generations,
        },
        cache.records,
    ))
}

fn acoustic_f64(t: &AcousticToken) -> Vec<f64> {
    t.vector.iter().map(|&x| x as f64).collect()
}

/// Encodes both members of every pair with the run's segmentation.
fn pair_tokens(
    pairs: &[corpus::UtterancePair],
    segmentation: Segmentation,
    encoder: &SegmentEncoder,
) -> Result<Vec<(Vec<Vec<f32>>, Vec<Vec<f32>>)>> {
    pairs
        .iter()
        .map(|p| {
            let enc = |u: &Utterance| -> Result<Vec<Vec<f32>>> {
                Ok(tokenize::tokenize_utterance(u, segmentation, encoder)?
                    .into_iter()
                    .map(|t| t.vector)
                    .collect())
            };
            Ok((enc(&p.positive)?, enc(&p.negative)?))
        })
        .collect()
}

/// Computes every metric for a finished set of artifacts.
pub fn evaluate(config: &RunConfig, a: &Artifacts) -> Result<EvalReport> {
    let mut report = EvalReport::new(config.hash());
    let es = &config.eval;
    let ck = &a.checkpoint;
    let by_id: HashMap<u32, &Utterance> = a.utterances.iter().map(|u| (u.utt_id, u)).collect();

    // token-level probes on the eval split
    let eval_tokens: Vec<(&AcousticToken, u32)> = a
        .tokens
        .iter()
        .filter(|t| config.splits.assign(t.utt_id) == Split::Eval)
        .filter_map(|t| {
            let ty = tokenize::span_majority_type(by_id[&t.utt_id], t.span)?;
            a.grammar.entry(ty).filter(|e| e.is_word).map(|_| (t, ty))
        })
        .collect();
    if eval_tokens.len() < 4 {
        return Err(Error::invalid("eval split holds too few labelled tokens"));
    }
    let acoustic: Vec<Vec<f64>> = eval_tokens.iter().map(|(t, _)| acoustic_f64(t)).collect();
    let refs: Vec<&[f32]> = eval_tokens
        .iter()
        .map(|(t, _)| t.vector.as_slice())
        .collect();
    let lexical = ck.embed_acoustic(&refs)?;
    let types: Vec<u32> = eval_tokens.iter().map(|e| e.1).collect();
    for (name, sem) in [("sem", true), ("pos", false)] {
        let classes: Vec<u32> = types
            .iter()
            .map(|&t| {
                let e = a.grammar.entry(t).unwrap();
                if sem {
                    e.sem_class
                } else {
                    e.pos_class
                }
            })
            .collect();
        let triplets =
            eval::build_abx_triplets(&classes, &types, es.abx_triplets, es.seed + sem as u64)?;
        report.set(
            &format!("abx_{name}_acoustic"),
            eval::abx(&acoustic, &triplets)?,
        );
        report.set(
            &format!("abx_{name}_lexical"),
            eval::abx(&lexical, &triplets)?,
        );
    }
    let n_ned = eval_tokens.len().min(es.ned_tokens);
    let transcriptions: Vec<Vec<u32>> = eval_tokens[..n_ned]
        .iter()
        .map(|(t, _)| tokenize::span_types(by_id[&t.utt_id], t.span))
        .collect();
    for (name, vecs) in [("acoustic", &acoustic), ("lexical", &lexical)] {
        let embs: Vec<LabeledEmbedding> = vecs[..n_ned]
            .iter()
            .zip(&transcriptions)
            .map(|(v, tr)| LabeledEmbedding {
                vector: v.clone(),
                transcription: tr.clone(),
                sem_class: None,
                pos_class: None,
            })
            .collect();
        report.set(&format!("ned_{name}"), eval::ned(&embs, 1.0)?.ned);
    }

    // pair suites from eval-split utterances
    let eval_utts: Vec<Utterance> = a
        .utterances
        .iter()
        .filter(|u| config.splits.assign(u.utt_id) == Split::Eval)
        .cloned()
        .collect();
    let encoder = SegmentEncoder::new(config.encoder, a.grammar.frame_dim())?;
    let pool_src: Vec<&[f32]> = a
        .index
        .entries()
        .iter()
        .map(|e| e.acoustic.vector.as_slice())
        .collect();
    let pool = NegativePool::from_tokens(ck, &pool_src, es.negative_pool, es.seed)?;
    let untrained = if es.untrained_baseline {
        let init = Checkpoint::init(ck.config.clone(), ck.quantizer.clone())?;
        let pool = NegativePool::from_tokens(&init, &pool_src, es.negative_pool, es.seed)?;
        Some((init, pool))
    } else {
        None
    };
    for (name, kind) in [
        ("lexical", PairKind::Lexical),
        ("syntactic", PairKind::Syntactic),
    ] {
        let suite = corpus::make_pair_suite(
            &a.grammar,
            &eval_utts,
            kind,
            es.pairs,
            es.pair_min_tokens,
            es.seed + 7,
        )?;
        let pairs = pair_tokens(&suite, config.segmentation, &encoder)?;
        report.set(
            &format!("pairs_{name}"),
            eval::pair_accuracy(ck, &pool, &pairs)?,
        );
        if let Some((init, init_pool)) = &untrained {
            report.set(
                &format!("pairs_{name}_untrained"),
                eval::pair_accuracy(init, init_pool, &pairs)?,
            );
        }
    }

    // generation curve
    let mut by_temp: BTreeMap<u64, (f64, Vec<Vec<u32>>)> = BTreeMap::new();
    for g in &a.generations {
        by_temp
            .entry(g.temperature.to_bits())
            .or_insert((g.temperature, Vec::new()))
            .1
            .push(g.types.clone());
    }
    let mut curve: Vec<CurvePoint> = Vec::new();
    for &t in &config.temperatures {
        if let Some((_, batch)) = by_temp.get(&t.to_bits()) {
            curve.push(CurvePoint {
                temperature: t,
                vert: eval::vert(batch)?,
                ppx: eval::ngram_perplexity(batch, &a.grammar, es.ppx_pseudo_count)?,
            });
        }
    }
    if curve.len() >= 2 {
        let temps: Vec<f64> = curve.iter().map(|c| c.temperature).collect();
        let verts: Vec<f64> = curve.iter().map(|c| c.vert).collect();
        match eval::spearman(&temps, &verts) {
            Ok(rho) => report.set("temperature_vert_spearman", rho),
            Err(e) => {
                report
                    .metadata
                    .insert("temperature_vert_spearman".into(), e.to_string());
            }
        }
    }
    let points: Vec<(f64, f64)> = curve.iter().map(|c| (c.vert, c.ppx)).collect();
    for anchor in eval::VERT_ANCHORS {
        match eval::ppx_at_vert(&points, anchor) {
            Ok(r) => {
                report.set(&format!("ppx_at_vert_{anchor}"), r.ppx);
                report.set(
                    &format!("ppx_at_vert_{anchor}_extrapolated"),
                    r.extrapolated as u8 as f64,
                );
            }
            Err(e) => {
                report
                    .metadata
                    .insert(format!("ppx_at_vert_{anchor}"), e.to_string());
            }
        }
    }
    report.curve = curve;

    // reference values and bookkeeping
    report.set("grammar_ppx", a.grammar.entropy_rate().exp());
    if a.quantizer.mode == BottleneckMode::PcaDkmeans {
        let train_vecs: Vec<Vec<f32>> = a
            .tokens
            .iter()
            .filter(|t| config.splits.assign(t.utt_id) == Split::Train)
            .map(|t| t.vector.clone())
            .collect();
        report.set(
            "code_collision_rate",
            a.quantizer.collision_rate(&train_vecs)?,
        );
    }
    report.set("index_entries", a.index.len() as f64);
    report.set("lexical_code_dim", a.quantizer.feature_dim() as f64);
    for (k, v) in &ck.metrics {
        report.set(&format!("train_{k}"), *v);
    }
    report.set("train_best_step", ck.step as f64);
    if let Some(first) = a.train_log.first() {
        report.set("train_initial_loss", first.train_loss);
    }
    report
        .metadata
        .insert("bottleneck".into(), config.bottleneck.to_string());
    report.metadata.insert(
        "segmentation".into(),
        serde_json::to_string(&config.segmentation)?,
    );
    report
        .metadata
        .insert("pred_heads".into(), config.model.n_pred_heads.to_string());
    for w in &a.quantizer.warnings {
        warn!("quantizer: {w}");
    }
    Ok(report)
}

/// Fitted-curve samples across the observed VERT range, for plotting.
fn curve_samples(curve: &[CurvePoint]) -> Option<Vec<(f64, f64)>> {
    let pts: Vec<(f64, f64)> = curve.iter().map(|c| (c.vert, c.ppx)).collect();
    let fit = CubicFit::fit(&pts).ok()?;
    Some(
        (0..=50)
            .map(|i| {
                let v = fit.x_min + (fit.x_max - fit.x_min) * i as f64 / 50.0;
                (v, fit.eval(v))
            })
            .collect(),
    )
}

fn write_reports(dir: &Path, config: &RunConfig, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), config.to_json())?;
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    let mut w = csv::Writer::from_path(dir.join("curve.csv")).map_err(csv_err)?;
    w.write_record(["temperature", "vert", "ppx"])
        .map_err(csv_err)?;
    for c in &report.curve {
        w.write_record([
            c.temperature.to_string(),
            c.vert.to_string(),
            c.ppx.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    // Header only when the curve cannot be fitted.
    let mut w = csv::Writer::from_path(dir.join("curve_fit.csv")).map_err(csv_err)?;
    w.write_record(["vert", "ppx_fit"]).map_err(csv_err)?;
    for (v, p) in curve_samples(&report.curve).unwrap_or_default() {
        w.write_record([v.to_string(), p.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Full run; writes `config.json`, `report.json`, `curve.csv` and
/// `curve_fit.csv` under the output directory.
pub fn run_pipeline(config: &RunConfig) -> Result<RunOutput> {
    let (artifacts, stages) = build_artifacts(config)?;
    let report = run_stage("reports", || {
        let report = evaluate(config, &artifacts)?;
        write_reports(&config.output_dir, config, &report)?;
        Ok(report)
    })?;
    Ok(RunOutput {
        report,
        stages,
        output_dir: config.output_dir.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Number of prediction heads.
    Heads,
    /// Fixed segmentation window in frames.
    WindowFrames,
    /// Bottleneck variant: none, pca or pca+dkmeans.
    Bottleneck,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heads" => Ok(Self::Heads),
            "window_frames" | "window-frames" | "duration" => Ok(Self::WindowFrames),
            "bottleneck" | "q" => Ok(Self::Bottleneck),
            _ => Err(Error::config(format!("unknown ablation axis `{s}`"))),
        }
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Heads => "heads",
            Self::WindowFrames => "window_frames",
            Self::Bottleneck => "bottleneck",
        })
    }
}

/// The base config with one axis set to `value`, writing under its own
/// subdirectory but sharing the cache.
pub fn apply_axis(base: &RunConfig, axis: AblationAxis, value: &str) -> Result<RunConfig> {
    let mut c = base.clone();
    let bad = |e: &dyn std::fmt::Display| Error::config(format!("{axis} value `{value}`: {e}"));
    match axis {
        AblationAxis::Heads => c.model.n_pred_heads = value.parse().map_err(|e| bad(&e))?,
        AblationAxis::WindowFrames => {
            c.segmentation = Segmentation::Fixed {
                window_frames: value.parse().map_err(|e| bad(&e))?,
            }
        }
        AblationAxis::Bottleneck => c.bottleneck = value.parse().map_err(|e: Error| bad(&e))?,
    }
    c.cache_dir = Some(base.cache_root());
    c.output_dir = base
        .output_dir
        .join(format!("{axis}-{}", value.replace(['/', '+'], "_")));
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.metrics.keys().cloned())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn to_csv(&self) -> Result<String> {
        let names = self.metric_names();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![self.axis.to_string(), "status".into()];
        header.extend(names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.value.clone(),
                r.error.clone().unwrap_or_else(|| "ok".into()),
            ];
            rec.extend(
                names
                    .iter()
                    .map(|n| r.metrics.get(n).map_or(String::new(), |v| v.to_string())),
            );
            w.write_record(&rec).map_err(csv_err)?;
        }
        String::from_utf8(
            w.into_inner()
                .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?,
        )
        .map_err(|e| Error::invalid(e.to_string()))
    }
}

/// One full pipeline per value, `workers` at a time. Failing cells are
/// recorded in the table rather than aborting the sweep. Writes
/// `ablation-<axis>.json` and `.csv` under the base output directory.
pub fn run_ablation(
    base: &RunConfig,
    axis: AblationAxis,
    values: &[String],
    workers: usize,
) -> Result<AblationTable> {
    if values.is_empty() {
        return Err(Error::config("ablation needs at least one value"));
    }
    base.validate()?;
    let cells = values
        .iter()
        .map(|v| apply_axis(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<Mutex<Option<Result<RunOutput>>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicU64::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed) as usize;
                if i >= cells.len() {
                    break;
                }
                info!("ablation {axis}={}: starting", values[i]);
                *results[i].lock().unwrap() = Some(run_pipeline(&cells[i]));
            });
        }
    });
    let rows = values
        .iter()
        .zip(results)
        .map(
            |(v, r)| match r.into_inner().unwrap().expect("every cell ran") {
                Ok(out) => AblationRow {
                    value: v.clone(),
                    ok: true,
                    error: None,
                    metrics: out.report.metrics,
                },
                Err(e) => {
                    warn!("ablation {axis}={v} failed: {e}");
                    AblationRow {
                        value: v.clone(),
                        ok: false,
                        error: Some(e.to_string()),
                        metrics: BTreeMap::new(),
                    }
                }
            },
        )
        .collect();
    let table = AblationTable { axis, rows };
    fs::create_dir_all(&base.output_dir)?;
    fs::write(
        base.output_dir.join(format!("ablation-{axis}.json")),
        serde_json::to_string_pretty(&table)?,
    )?;
    fs::write(
        base.output_dir.join(format!("ablation-{axis}.csv")),
        table.to_csv()?,
    )?;
    Ok(table)
}
