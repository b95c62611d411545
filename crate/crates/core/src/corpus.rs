//! Synthetic speech corpora with known latent transcriptions.
//!
//! A [`SyntheticGrammar`] holds a Zipf-distributed vocabulary of word types,
//! each with an acoustic prototype, a semantic class and a part-of-speech
//! class. Token sequences come from a first-order Markov chain whose
//! stationary distribution is exactly the Zipf unigram; transitions depend
//! only on the classes of the two words, so class membership is learnable
//! from context while staying invisible in the prototypes.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{self, RecordBuf, RecordCursor};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarParams {
    pub seed: u64,
    pub vocab_size: usize,
    pub n_sem_classes: usize,
    pub n_pos_classes: usize,
    pub zipf_exponent: f64,
    pub frame_dim: usize,
    pub n_speakers: usize,
    pub noise_scale: f64,
    pub coarticulation: f64,
    /// Inclusive range of frames emitted per token.
    pub frames_per_token: (usize, usize),
    pub n_nonwords: usize,
    pub speaker_scale: f64,
    /// Transition weight multiplier toward the successor POS class.
    pub pos_affinity: f64,
    /// Transition weight multiplier toward the same semantic class.
    pub sem_affinity: f64,
}

impl Default for GrammarParams {
    fn default() -> Self {
        Self {
            seed: 1,
            vocab_size: 50,
            n_sem_classes: 5,
            n_pos_classes: 5,
            zipf_exponent: 1.0,
            frame_dim: 32,
            n_speakers: 8,
            noise_scale: 0.3,
            coarticulation: 0.3,
            frames_per_token: (6, 14),
            n_nonwords: 50,
            speaker_scale: 0.5,
            pos_affinity: 12.0,
            sem_affinity: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeEntry {
    pub type_id: u32,
    pub prototype: Vec<f64>,
    pub sem_class: u32,
    pub pos_class: u32,
    pub is_word: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGrammar {
    pub params: GrammarParams,
    /// Word types; `vocab[i].type_id == i` and index equals Zipf rank - 1.
    pub vocab: Vec<TypeEntry>,
    /// Non-word types with ids starting at `vocab.len()`; never emitted by
    /// the chain.
    pub nonwords: Vec<TypeEntry>,
    pub unigram: Vec<f64>,
    /// Row-stochastic transition matrix over word types.
    pub bigram: Vec<Vec<f64>>,
    pub speaker_offsets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: u32,
    pub speaker_id: u32,
    pub frames: Vec<Vec<f32>>,
    pub gold_types: Option<Vec<u32>>,
    pub gold_boundaries: Option<Vec<u32>>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid(format!(
                "utterance {} has no frames",
                self.utt_id
            )));
        }
        let dim = self.frame_dim();
        if self.frames.iter().any(|f| f.len() != dim) {
            return Err(Error::invalid(format!(
                "utterance {} has ragged frames",
                self.utt_id
            )));
        }
        match (&self.gold_types, &self.gold_boundaries) {
            (_, None) => Ok(()),
            (None, Some(_)) => Err(Error::invalid(format!(
                "utterance {} has boundaries without types",
                self.utt_id
            ))),
            (Some(types), Some(cuts)) => {
                let ok = cuts.len() == types.len() + 1
                    && cuts.first() == Some(&0)
                    && cuts.last().copied() == Some(self.frames.len() as u32)
                    && cuts.windows(2).all(|w| w[0] < w[1]);
                if ok {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "utterance {}: boundaries inconsistent with {} types and {} frames",
                        self.utt_id,
                        types.len(),
                        self.frames.len()
                    )))
                }
            }
        }
    }
}

/// A corpus file's content: the utterances plus the grammar they came from
/// when known.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub grammar: Option<SyntheticGrammar>,
    pub utterances: Vec<Utterance>,
}

pub fn generate_grammar(params: &GrammarParams) -> Result<SyntheticGrammar> {
    let p = params;
    if p.vocab_size == 0 || p.n_sem_classes == 0 || p.n_pos_classes == 0 {
        return Err(Error::config(
            "vocabulary and class counts must be positive",
        ));
    }
    if p.vocab_size < p.n_sem_classes || p.vocab_size < p.n_pos_classes {
        return Err(Error::config(format!(
            "vocab_size {} smaller than a class count ({} sem, {} pos)",
            p.vocab_size, p.n_sem_classes, p.n_pos_classes
        )));
    }
    if p.frame_dim < 8 {
        return Err(Error::config(format!("frame_dim {} < 8", p.frame_dim)));
    }
    if p.n_speakers == 0 {
        return Err(Error::config("n_speakers must be positive"));
    }
    if !(p.zipf_exponent > 0.0) {
        return Err(Error::config("zipf_exponent must be positive"));
    }
    if !(p.noise_scale >= 0.0) || !(0.0..1.0).contains(&p.coarticulation) {
        return Err(Error::config(
            "noise_scale must be >= 0 and coarticulation in [0,1)",
        ));
    }
    let (lo, hi) = p.frames_per_token;
    if lo == 0 || lo > hi {
        return Err(Error::config(
            "frames_per_token must be a non-empty range of positive counts",
        ));
    }
    if !(p.pos_affinity > 0.0 && p.sem_affinity > 0.0) {
        return Err(Error::config("affinities must be positive"));
    }

    let mut r = rng::stream(p.seed, 0);
    let mut gaussian = |n: usize, scale: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                scale * z
            })
            .collect::<Vec<f64>>()
    };

    let vocab: Vec<TypeEntry> = (0..p.vocab_size)
        .map(|i| TypeEntry {
            type_id: i as u32,
            prototype: gaussian(p.frame_dim, 1.0),
            sem_class: (i % p.n_sem_classes) as u32,
            pos_class: ((i / p.n_sem_classes) % p.n_pos_classes) as u32,
            is_word: true,
        })
        .collect();
    let nonwords: Vec<TypeEntry> = (0..p.n_nonwords)
        .map(|k| TypeEntry {
            type_id: (p.vocab_size + k) as u32,
            prototype: gaussian(p.frame_dim, 1.0),
            sem_class: (k % p.n_sem_classes) as u32,
            pos_class: ((k / p.n_sem_classes) % p.n_pos_classes) as u32,
            is_word: false,
        })
        .collect();
    let speaker_offsets: Vec<Vec<f64>> = (0..p.n_speakers)
        .map(|_| gaussian(p.frame_dim, p.speaker_scale))
        .collect();

    let unigram = zipf(p.vocab_size, p.zipf_exponent);
    let bigram = class_chain(&vocab, &unigram, p)?;

    Ok(SyntheticGrammar {
        params: p.clone(),
        vocab,
        nonwords,
        unigram,
        bigram,
        speaker_offsets,
    })
}

/// Normalised rank^(-s) weights for ranks 1..=n.
pub fn zipf(n: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Builds `P(i -> j) = T[c(i), c(j)] * pi_j / Pi_c(j)` where `T` is a
/// class-level chain with the class masses `Pi` as stationary law, found by
/// Sinkhorn-scaling the affinity matrix into a flow with row and column
/// sums `Pi`. The token chain then has `pi` as its exact stationary law.
fn class_chain(vocab: &[TypeEntry], pi: &[f64], p: &GrammarParams) -> Result<Vec<Vec<f64>>> {
    let n_pos = p.n_pos_classes as u32;
    let mut classes: Vec<(u32, u32)> = vocab.iter().map(|t| (t.sem_class, t.pos_class)).collect();
    classes.sort_unstable();
    classes.dedup();
    let class_of: Vec<usize> = vocab
        .iter()
        .map(|t| classes.binary_search(&(t.sem_class, t.pos_class)).unwrap())
        .collect();
    let c = classes.len();
    let mut mass = vec![0.0; c];
    for (i, &k) in class_of.iter().enumerate() {
        mass[k] += pi[i];
    }

    let affinity: Vec<Vec<f64>> = classes
        .iter()
        .map(|&(sa, pa)| {
            classes
                .iter()
                .map(|&(sb, pb)| {
                    let mut w = 1.0;
                    if pb == (pa + 1) % n_pos {
                        w *= p.pos_affinity;
                    }
                    if sa == sb {
                        w *= p.sem_affinity;
                    }
                    w
                })
                .collect()
        })
        .collect();

    let mut x = vec![1.0; c];
    let mut y = vec![1.0; c];
    let mut converged = false;
    for _ in 0..10_000 {
        for a in 0..c {
            let s: f64 = (0..c).map(|b| affinity[a][b] * y[b]).sum();
            x[a] = mass[a] / s;
        }
        for b in 0..c {
            let s: f64 = (0..c).map(|a| affinity[a][b] * x[a]).sum();
            y[b] = mass[b] / s;
        }
        let worst = (0..c)
            .map(|a| {
                let row: f64 = (0..c).map(|b| x[a] * affinity[a][b] * y[b]).sum();
                (row - mass[a]).abs() / mass[a]
            })
            .fold(0.0, f64::max);
        if worst < 1e-14 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::config("class transition scaling did not converge"));
    }

    let v = vocab.len();
    let mut bigram = vec![vec![0.0; v]; v];
    for i in 0..v {
        let a = class_of[i];
        for j in 0..v {
            let b = class_of[j];
            let t = x[a] * affinity[a][b] * y[b] / mass[a];
            bigram[i][j] = t * pi[j] / mass[b];
        }
        let z: f64 = bigram[i].iter().sum();
        bigram[i].iter_mut().for_each(|q| *q /= z);
    }
    Ok(bigram)
}

impl SyntheticGrammar {
    pub fn n_words(&self) -> usize {
        self.vocab.len()
    }

    pub fn frame_dim(&self) -> usize {
        self.params.frame_dim
    }

    /// Word or non-word entry by id.
    pub fn entry(&self, type_id: u32) -> Option<&TypeEntry> {
        let i = type_id as usize;
        if i < self.vocab.len() {
            Some(&self.vocab[i])
        } else {
            self.nonwords.get(i - self.vocab.len())
        }
    }

    /// Log-probability of a type sequence under the chain started from the
    /// unigram; `-inf` if it contains a non-word or unknown id.
    pub fn log_prob(&self, types: &[u32]) -> f64 {
        let v = self.vocab.len();
        if types.iter().any(|&t| t as usize >= v) {
            return f64::NEG_INFINITY;
        }
        let Some(&first) = types.first() else {
            return 0.0;
        };
        let mut lp = self.unigram[first as usize].ln();
        for w in types.windows(2) {
            lp += self.bigram[w[0] as usize][w[1] as usize].ln();
        }
        lp
    }

    /// Per-token entropy (nats) of the stationary chain.
    pub fn entropy_rate(&self) -> f64 {
        self.unigram
            .iter()
            .zip(&self.bigram)
            .map(|(&pi, row)| {
                pi * row
                    .iter()
                    .filter(|&&q| q > 0.0)
                    .map(|&q| -q * q.ln())
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn unigram_entropy(&self) -> f64 {
        self.unigram
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|&q| -q * q.ln())
            .sum()
    }

    pub fn sample_types<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<u32> {
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return out;
        }
        let mut cur = rng::categorical(&self.unigram, rng);
        out.push(cur as u32);
        for _ in 1..n {
            cur = rng::categorical(&self.bigram[cur], rng);
            out.push(cur as u32);
        }
        out
    }

    /// Emits frames for a type sequence with the given per-token durations.
    pub fn emit<R: Rng + ?Sized>(
        &self,
        types: &[u32],
        durations: &[usize],
        speaker: u32,
        rng: &mut R,
    ) -> Result<Vec<Vec<f32>>> {
        if types.len() != durations.len() {
            return Err(Error::invalid("types and durations differ in length"));
        }
        let offset = self
            .speaker_offsets
            .get(speaker as usize)
            .ok_or_else(|| Error::invalid(format!("unknown speaker {speaker}")))?;
        let protos: Vec<&[f64]> = types
            .iter()
            .map(|&t| {
                self.entry(t)
                    .map(|e| e.prototype.as_slice())
                    .ok_or_else(|| Error::invalid(format!("unknown type {t}")))
            })
            .collect::<Result<_>>()?;
        let coart = self.params.coarticulation;
        let noise = self.params.noise_scale;
        let dim = self.params.frame_dim;
        let mut frames = Vec::with_capacity(durations.iter().sum());
        for (pos, (&proto, &m)) in protos.iter().zip(durations).enumerate() {
            let edge = (m / 4).max(1);
            for k in 0..m {
                let mut frame: Vec<f64> = proto.iter().zip(offset).map(|(a, b)| a + b).collect();
                if coart > 0.0 {
                    if pos > 0 && k < edge {
                        let ramp = 1.0 - (k as f64 + 0.5) / edge as f64;
                        let prev = protos[pos - 1];
                        for d in 0..dim {
                            frame[d] += coart * ramp * (prev[d] - proto[d]);
                        }
                    }
                    if pos + 1 < protos.len() && m - 1 - k < edge {
                        let ramp = 1.0 - ((m - 1 - k) as f64 + 0.5) / edge as f64;
                        let next = protos[pos + 1];
                        for d in 0..dim {
                            frame[d] += coart * ramp * (next[d] - proto[d]);
                        }
                    }
                }
                if noise > 0.0 {
                    for x in frame.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *x += noise * z;
                    }
                }
                frames.push(frame.into_iter().map(|x| x as f32).collect());
            }
        }
        Ok(frames)
    }
}

pub fn sample_corpus(
    grammar: &SyntheticGrammar,
    n_utterances: usize,
    tokens_per_utterance: (usize, usize),
    seed: u64,
) -> Result<Vec<Utterance>> {
    let (lo, hi) = tokens_per_utterance;
    if lo == 0 || lo > hi {
        return Err(Error::config(format!(
            "tokens_per_utterance range ({lo}, {hi}) is empty"
        )));
    }
    let (flo, fhi) = grammar.params.frames_per_token;
    (0..n_utterances)
        .map(|u| {
            let mut r = rng::stream(seed, u as u64);
            let speaker = r.random_range(0..grammar.params.n_speakers) as u32;
            let n = r.random_range(lo..=hi);
            let types = grammar.sample_types(n, &mut r);
            let durations: Vec<usize> = (0..n).map(|_| r.random_range(flo..=fhi)).collect();
            let frames = grammar.emit(&types, &durations, speaker, &mut r)?;
            Ok(Utterance {
                utt_id: u as u32,
                speaker_id: speaker,
                frames,
                gold_types: Some(types),
                gold_boundaries: Some(cuts_from_durations(&durations)),
            })
        })
        .collect()
}

pub fn cuts_from_durations(durations: &[usize]) -> Vec<u32> {
    let mut cuts = Vec::with_capacity(durations.len() + 1);
    cuts.push(0);
    let mut acc = 0u32;
    for &d in durations {
        acc += d as u32;
        cuts.push(acc);
    }
    cuts
}

fn durations_from_cuts(cuts: &[u32]) -> Vec<usize> {
    cuts.windows(2).map(|w| (w[1] - w[0]) as usize).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    /// A word replaced by a non-word (sWUGGY analog).
    Lexical,
    /// Two words permuted so the sequence becomes less probable (sBLIMP
    /// analog).
    Syntactic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtterancePair {
    pub positive: Utterance,
    pub negative: Utterance,
}

/// Builds `count` minimal pairs. Both members are re-emitted from their type
/// sequences with the same noise stream, so they differ only around the
/// edited token.
pub fn make_pair_suite(
    grammar: &SyntheticGrammar,
    corpus: &[Utterance],
    kind: PairKind,
    count: usize,
    min_tokens: usize,
    seed: u64,
) -> Result<Vec<UtterancePair>> {
    if kind == PairKind::Lexical && grammar.nonwords.is_empty() {
        return Err(Error::config("grammar has no non-word entries"));
    }
    let eligible: Vec<&Utterance> = corpus
        .iter()
        .filter(|u| {
            u.gold_types
                .as_ref()
                .is_some_and(|t| t.len() >= min_tokens.max(1))
        })
        .collect();
    if eligible.is_empty() && count > 0 {
        return Err(Error::invalid(format!(
            "no utterance with at least {min_tokens} gold-labelled tokens"
        )));
    }
    let mut r = rng::stream(seed, 0);
    let mut out = Vec::with_capacity(count);
    let mut order: Vec<usize> = Vec::new();
    let mut attempts = 0usize;
    while out.len() < count {
        if order.is_empty() {
            order = (0..eligible.len()).collect();
            order.shuffle(&mut r);
        }
        attempts += 1;
        if attempts > count.saturating_mul(50).max(1000) {
            return Err(Error::invalid(format!(
                "could only build {} of {count} {kind:?} pairs",
                out.len()
            )));
        }
        let utt = eligible[order.pop().unwrap()];
        let types = utt.gold_types.as_ref().unwrap();
        let durations = durations_from_cuts(utt.gold_boundaries.as_ref().unwrap());
        let negative_types = match kind {
            PairKind::Lexical => {
                let pos = r.random_range(0..types.len());
                let nw = &grammar.nonwords[r.random_range(0..grammar.nonwords.len())];
                let mut t = types.clone();
                t[pos] = nw.type_id;
                Some((t, durations.clone()))
            }
            PairKind::Syntactic => swap_lowering_probability(grammar, types, &durations, &mut r),
        };
        let Some((neg_types, neg_durations)) = negative_types else {
            continue;
        };
        let pair_seed = r.random::<u64>();
        let positive = Utterance {
            frames: grammar.emit(
                types,
                &durations,
                utt.speaker_id,
                &mut rng::stream(pair_seed, 0),
            )?,
            ..utt.clone()
        };
        let negative = Utterance {
            utt_id: utt.utt_id,
            speaker_id: utt.speaker_id,
            frames: grammar.emit(
                &neg_types,
                &neg_durations,
                utt.speaker_id,
                &mut rng::stream(pair_seed, 0),
            )?,
            gold_boundaries: Some(cuts_from_durations(&neg_durations)),
            gold_types: Some(neg_types),
        };
        out.push(UtterancePair { positive, negative });
    }
    Ok(out)
}

fn swap_lowering_probability<R: Rng + ?Sized>(
    grammar: &SyntheticGrammar,
    types: &[u32],
    durations: &[usize],
    r: &mut R,
) -> Option<(Vec<u32>, Vec<usize>)> {
    let n = types.len();
    if n < 2 {
        return None;
    }
    let base = grammar.log_prob(types);
    let mut candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| types[i] != types[j])
        .collect();
    candidates.shuffle(r);
    candidates.into_iter().find_map(|(i, j)| {
        let mut t = types.to_vec();
        t.swap(i, j);
        (grammar.log_prob(&t) < base).then(|| {
            let mut d = durations.to_vec();
            d.swap(i, j);
            (t, d)
        })
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    kind: String,
    count: usize,
    frame_dim: usize,
    grammar: Option<SyntheticGrammar>,
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let frame_dim = corpus
        .utterances
        .first()
        .map(Utterance::frame_dim)
        .or(corpus.grammar.as_ref().map(SyntheticGrammar::frame_dim))
        .unwrap_or(0);
    let header = CorpusHeader {
        kind: "corpus".into(),
        count: corpus.utterances.len(),
        frame_dim,
        grammar: corpus.grammar.clone(),
    };
    let records = corpus.utterances.iter().map(|u| {
        let mut rec = RecordBuf::new();
        let flat: Vec<f32> = u.frames.iter().flatten().copied().collect();
        rec.u32(u.utt_id)
            .u32(u.speaker_id)
            .u32(u.frames.len() as u32)
            .f32s(&flat)
            .opt_u32s(u.gold_types.as_deref())
            .opt_u32s(u.gold_boundaries.as_deref());
        rec
    });
    container::write_container(path, &header, records)
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let (header, records): (CorpusHeader, _) = container::read_container(path)?;
    container::check_kind(&header.kind, "corpus", header.count, records.len())?;
    let utterances = records
        .iter()
        .enumerate()
        .map(|(i, bytes)| {
            let mut c = RecordCursor::new(bytes, i);
            let utt_id = c.u32()?;
            let speaker_id = c.u32()?;
            let n_frames = c.u32()? as usize;
            let flat = c.f32s()?;
            let gold_types = c.opt_u32s()?;
            let gold_boundaries = c.opt_u32s()?;
            c.finish()?;
            if n_frames == 0 || flat.len() != n_frames * header.frame_dim {
                return Err(Error::parse(
                    format!("record {i}"),
                    format!(
                        "{} values do not form {n_frames} frames of dim {}",
                        flat.len(),
                        header.frame_dim
                    ),
                ));
            }
            let u = Utterance {
                utt_id,
                speaker_id,
                frames: flat.chunks(header.frame_dim).map(<[f32]>::to_vec).collect(),
                gold_types,
                gold_boundaries,
            };
            u.validate()
                .map_err(|e| Error::parse(format!("record {i}"), e.to_string()))?;
            Ok(u)
        })
        .collect::<Result<_>>()?;
    Ok(Corpus {
        grammar: header.grammar,
        utterances,
    })
}

/// Ids of all word types in a semantic or POS class, used by tests and the
/// ABX builders.
pub fn class_members(grammar: &SyntheticGrammar, sem: bool, class: u32) -> HashSet<u32> {
    grammar
        .vocab
        .iter()
        .filter(|t| {
            if sem {
                t.sem_class == class
            } else {
                t.pos_class == class
            }
        })
        .map(|t| t.type_id)
        .collect()
}
