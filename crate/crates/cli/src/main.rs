use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;
use serde_json::json;

use toklm::corpus::{self, Corpus};
use toklm::eval::{self, EvalReport};
use toklm::model::{self, LmConfig};
use toklm::pipeline::{self, AblationAxis, RunConfig};
use toklm::quantize::{self, BottleneckMode};
use toklm::sample::{self, GenerationParams, Transcriber};
use toklm::tokenize::{self, EncoderConfig, SegmentEncoder, Segmentation};
use toklm::{Error, Result};

#[derive(Parser)]
#[command(
    name = "toklm",
    version,
    about = "Word-sized continuous token language models on synthetic speech"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default run configuration as JSON.
    DefaultConfig,
    /// Generate a grammar and a corpus of utterances.
    GenCorpus {
        /// Run config supplying grammar and corpus settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus sampling seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        utts: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment and encode every utterance of a corpus.
    Tokenize {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fixed window length in frames; gold boundaries when omitted.
        #[arg(long)]
        window_frames: Option<usize>,
        #[arg(long, default_value_t = 17)]
        encoder_seed: u64,
        #[arg(long, default_value_t = 32)]
        out_dim: usize,
    },
    /// Fit the PCA + per-dimension k-means bottleneck on a token file.
    FitQuantizer {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        d: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "pca+dkmeans")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the lexical embedder and causal LM.
    Train {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        quantizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model config JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        valid_tokens: Option<PathBuf>,
        /// Per-step JSON-lines log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Embed held-out tokens into a lexical index.
    BuildIndex {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corpus for gold labels of the indexed spans.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Tokens the model was trained on; their utterances may not be indexed.
        #[arg(long)]
        train_tokens: Option<PathBuf>,
    },
    /// Generate sentences and write their transcripts.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        n_sentences: usize,
        #[arg(long, default_value_t = 10)]
        len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corpus whose grammar resolves unlabelled tokens.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 17)]
        encoder_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute one family of metrics and print a JSON report.
    Eval {
        #[arg(long, value_enum)]
        kind: EvalKind,
        /// Run config (ned, abx-sem, abx-pos, pairs, ppx-curve).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Transcripts JSON lines with a `types` array (vert).
        #[arg(long)]
        transcripts: Option<PathBuf>,
        /// Layers, tokens and width (memory).
        #[arg(long, num_args = 3, value_names = ["L", "N", "D"])]
        memory: Option<Vec<f64>>,
        /// Reference layers, tokens and width for a memory ratio.
        #[arg(long, num_args = 3, value_names = ["L", "N", "D"])]
        memory_ref: Option<Vec<f64>>,
        /// Also write the report (and curve CSVs for ppx-curve) here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the full pipeline from a config file.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Sweep one axis, one full pipeline per value.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// heads, window_frames or bottleneck.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalKind {
    Ned,
    AbxSem,
    AbxPos,
    Pairs,
    Vert,
    PpxCurve,
    Memory,
}

fn load_config(path: Option<&Path>, out_dir: Option<&PathBuf>) -> Result<RunConfig> {
    let mut c = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = out_dir {
        c.output_dir = d.clone();
    }
    c.validate()?;
    Ok(c)
}

fn need<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required for this kind")))
}

fn print_json(value: &EvalReport) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DefaultConfig => println!("{}", RunConfig::default().to_json()),
        Command::GenCorpus {
            config,
            seed,
            vocab_size,
            utts,
            out,
        } => {
            let mut c = load_config(config.as_deref(), None)?;
            c.corpus_seed = seed.unwrap_or(c.corpus_seed);
            c.grammar.vocab_size = vocab_size.unwrap_or(c.grammar.vocab_size);
            c.n_utterances = utts.unwrap_or(c.n_utterances);
            c.validate()?;
            let grammar = corpus::generate_grammar(&c.grammar)?;
            let utterances = corpus::sample_corpus(
                &grammar,
                c.n_utterances,
                c.tokens_per_utterance,
                c.corpus_seed,
            )?;
            corpus::write_corpus(
                &out,
                &Corpus {
                    grammar: Some(grammar),
                    utterances,
                },
            )?;
        }
        Command::Tokenize {
            corpus: path,
            out,
            window_frames,
            encoder_seed,
            out_dim,
        } => {
            let c = corpus::read_corpus(&path)?;
            let frame_dim = c
                .utterances
                .first()
                .map(|u| u.frame_dim())
                .ok_or_else(|| Error::Invalid("corpus is empty".into()))?;
            let enc_cfg = EncoderConfig {
                seed: encoder_seed,
                out_dim,
            };
            let encoder = SegmentEncoder::new(enc_cfg, frame_dim)?;
            let seg = match window_frames {
                Some(w) => Segmentation::Fixed { window_frames: w },
                None => Segmentation::Gold,
            };
            let tokens = pipeline::tokenize_all(&c.utterances, seg, &encoder)?;
            tokenize::write_tokens(&out, &tokens, Some(enc_cfg), Some(seg))?;
        }
        Command::FitQuantizer {
            tokens,
            out,
            d,
            k,
            mode,
            seed,
        } => {
            let mode: BottleneckMode = mode.parse()?;
            let t = tokenize::read_tokens(&tokens)?;
            let vecs: Vec<Vec<f64>> = t
                .tokens
                .iter()
                .map(|t| t.vector.iter().map(|&x| x as f64).collect())
                .collect();
            let q = quantize::fit_bottleneck(&vecs, mode, d, k, seed)?;
            let raw: Vec<Vec<f32>> = t.tokens.iter().map(|t| t.vector.clone()).collect();
            eprintln!("code collision rate: {:.4}", q.collision_rate(&raw)?);
            quantize::write_quantizer(&out, &q)?;
        }
        Command::Train {
            tokens,
            quantizer,
            out,
            config,
            valid_tokens,
            log,
        } => {
            let cfg: LmConfig = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p)?)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                None => LmConfig::default(),
            };
            cfg.validate()?;
            let q = quantize::read_quantizer(&quantizer)?;
            let train_seqs = model::sequences_from_tokens(
                &tokenize::read_tokens(&tokens)?.tokens,
                &q,
                cfg.tokens_per_sentence,
            )?;
            let valid_seqs = match valid_tokens {
                Some(p) => model::sequences_from_tokens(
                    &tokenize::read_tokens(&p)?.tokens,
                    &q,
                    cfg.tokens_per_sentence,
                )?,
                None => Vec::new(),
            };
            let mut lines = String::new();
            let outcome = model::train(&cfg, &q, &train_seqs, &valid_seqs, |e| {
                lines.push_str(&serde_json::to_string(e).expect("log entry serialises"));
                lines.push('\n');
            })?;
            if let Some(p) = log {
                fs::write(p, lines)?;
            }
            eprintln!(
                "best step {} of {}, {} negative fallbacks",
                outcome.best_step, cfg.max_steps, outcome.negative_fallbacks
            );
            model::write_checkpoint(&out, &outcome.checkpoint)?;
        }
        Command::BuildIndex {
            ckpt,
            tokens,
            out,
            corpus: corpus_path,
            train_tokens,
        } => {
            let ck = model::read_checkpoint(&ckpt)?;
            let toks = tokenize::read_tokens(&tokens)?.tokens;
            let training: BTreeSet<u32> = match train_tokens {
                Some(p) => tokenize::read_tokens(&p)?
                    .tokens
                    .iter()
                    .map(|t| t.utt_id)
                    .collect(),
                None => BTreeSet::new(),
            };
            let corpus = corpus_path.map(|p| corpus::read_corpus(&p)).transpose()?;
            let utt = |id: u32| {
                corpus
                    .as_ref()
                    .and_then(|c| c.utterances.iter().find(|u| u.utt_id == id))
            };
            let entries = toks
                .into_iter()
                .map(|t| {
                    let gold = utt(t.utt_id).and_then(|u| tokenize::span_majority_type(u, t.span));
                    (t, gold)
                })
                .collect();
            let idx = sample::build_lexical_index(&ck, entries, &training)?;
            sample::write_index(&out, &idx)?;
        }
        Command::Sample {
            ckpt,
            index,
            temperature,
            k,
            n_sentences,
            len,
            seed,
            corpus: corpus_path,
            encoder_seed,
            out,
        } => {
            let ck = model::read_checkpoint(&ckpt)?;
            let idx = sample::read_index(&index)?;
            let params = GenerationParams {
                temperature,
                k_neighbours: k,
                max_tokens: len,
                seed,
            };
            params.validate()?;
            let transcriber = match corpus_path {
                Some(p) => {
                    let g = corpus::read_corpus(&p)?
                        .grammar
                        .ok_or_else(|| Error::Invalid("corpus has no grammar".into()))?;
                    let enc = SegmentEncoder::new(
                        EncoderConfig {
                            seed: encoder_seed,
                            out_dim: idx.entry(0).acoustic.vector.len(),
                        },
                        g.frame_dim(),
                    )?;
                    Some(Transcriber::new(&g, &enc)?)
                }
                None => None,
            };
            let mut lines = String::new();
            for s in 0..n_sentences {
                let entries = sample::generate_stream(&ck, &idx, &[], &params, s as u64)?;
                let types: Vec<Option<u32>> = match &transcriber {
                    Some(t) => t.transcribe(&idx, &entries).into_iter().map(Some).collect(),
                    None => entries.iter().map(|&e| idx.entry(e).gold_type).collect(),
                };
                let spans: Vec<_> = entries
                    .iter()
                    .map(|&e| {
                        let a = &idx.entry(e).acoustic;
                        json!({"utt_id": a.utt_id, "span": a.span})
                    })
                    .collect();
                lines.push_str(
                    &json!({"sentence": s, "temperature": temperature, "entries": entries, "types": types, "segments": spans})
                        .to_string(),
                );
                lines.push('\n');
            }
            fs::write(out, lines)?;
        }
        Command::Eval {
            kind,
            config,
            transcripts,
            memory,
            memory_ref,
            out_dir,
        } => {
            let report = match kind {
                EvalKind::Memory => {
                    let m = need(&memory, "memory")?;
                    let mut r = EvalReport::new("");
                    r.set("activations", eval::memory_estimate(m[0], m[1], m[2])?);
                    if let Some(b) = &memory_ref {
                        r.set(
                            "ratio",
                            eval::memory_ratio((m[0], m[1], m[2]), (b[0], b[1], b[2]))?,
                        );
                    }
                    r
                }
                EvalKind::Vert => {
                    let path = need(&transcripts, "transcripts")?;
                    let batch = fs::read_to_string(path)?
                        .lines()
                        .filter(|l| !l.trim().is_empty())
                        .map(|l| {
                            let v: serde_json::Value = serde_json::from_str(l)?;
                            serde_json::from_value::<Vec<u32>>(v["types"].clone())
                                .map_err(Error::from)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let mut r = EvalReport::new("");
                    r.set("self_bleu", eval::self_bleu(&batch)?);
                    r.set("auto_bleu", eval::auto_bleu(&batch)?);
                    r.set("vert", eval::vert(&batch)?);
                    r
                }
                _ => {
                    let c = load_config(config.as_deref(), None)?;
                    let (artifacts, _) = pipeline::build_artifacts(&c)?;
                    let mut r = pipeline::evaluate(&c, &artifacts)?;
                    let prefixes: &[&str] = match kind {
                        EvalKind::Ned => &["ned_"],
                        EvalKind::AbxSem => &["abx_sem_"],
                        EvalKind::AbxPos => &["abx_pos_"],
                        EvalKind::Pairs => &["pairs_"],
                        _ => &["ppx_at_vert", "temperature_vert", "grammar_ppx"],
                    };
                    r.metrics
                        .retain(|k, _| prefixes.iter().any(|p| k.starts_with(p)));
                    if kind != EvalKind::PpxCurve {
                        r.curve.clear();
                    }
                    r
                }
            };
            if let Some(dir) = out_dir {
                fs::create_dir_all(&dir)?;
                fs::write(
                    dir.join("report.json"),
                    serde_json::to_string_pretty(&report)?,
                )?;
                if kind == EvalKind::PpxCurve {
                    let mut csv = String::from("temperature,vert,ppx\n");
                    for p in &report.curve {
                        csv.push_str(&format!("{},{},{}\n", p.temperature, p.vert, p.ppx));
                    }
                    fs::write(dir.join("curve.csv"), csv)?;
                }
            }
            print_json(&report)?;
        }
        Command::Run { config, out_dir } => {
            let c = load_config(config.as_deref(), out_dir.as_ref())?;
            let out = pipeline::run_pipeline(&c)?;
            for s in &out.stages {
                eprintln!(
                    "{:<12} {} {}",
                    s.stage,
                    s.key,
                    if s.cached { "cached" } else { "built" }
                );
            }
            print_json(&out.report)?;
        }
        Command::Ablate {
            config,
            axis,
            values,
            workers,
            out_dir,
        } => {
            let c = load_config(config.as_deref(), out_dir.as_ref())?;
            let axis: AblationAxis = axis.parse()?;
            let table = pipeline::run_ablation(&c, axis, &values, workers)?;
            print!("{}", table.to_csv()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
