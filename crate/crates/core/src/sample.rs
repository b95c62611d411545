//! Lexical space (exact cosine k-NN over stored lexical/acoustic pairs) and
//! autoregressive generation by temperature softmax over neighbour
//! similarities.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::COS_EPS;
use crate::container::{self, RecordBuf, RecordCursor};
use crate::corpus::SyntheticGrammar;
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::rng;
use crate::tokenize::{AcousticToken, SegmentEncoder};

/// Below this temperature sampling degenerates to argmax.
pub const ARGMAX_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub k_neighbours: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            k_neighbours: 64,
            max_tokens: 10,
            seed: 0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("temperature must be positive"));
        }
        if self.k_neighbours == 0 {
            return Err(Error::config("k_neighbours must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub lexical: Vec<f64>,
    pub acoustic: AcousticToken,
    /// Majority gold type of the stored segment, when known.
    pub gold_type: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LexicalIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
    /// Cached `1 / max(|l_i|, eps)`.
    inv_norms: Vec<f64>,
}

fn inv_norm(v: &[f64]) -> f64 {
    1.0 / v.iter().map(|x| x * x).sum::<f64>().sqrt().max(COS_EPS)
}

impl LexicalIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self> {
        let dim = entries
            .first()
            .map(|e| e.lexical.len())
            .ok_or_else(|| Error::invalid("lexical index needs at least one entry"))?;
        for (i, e) in entries.iter().enumerate() {
            if e.lexical.len() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    got: e.lexical.len(),
                });
            }
            if e.lexical.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!(
                    "entry {i} has a non-finite lexical vector"
                )));
            }
        }
        let inv_norms = entries.iter().map(|e| inv_norm(&e.lexical)).collect();
        Ok(Self {
            dim,
            entries,
            inv_norms,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, id: usize) -> &IndexEntry {
        &self.entries[id]
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// The `min(k, N)` most cosine-similar entries, by decreasing
    /// similarity; ties go to the lower entry id.
    pub fn query(&self, probe: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if probe.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                got: probe.len(),
            });
        }
        let pn = inv_norm(probe);
        let mut sims: Vec<(usize, f64)> = self
            .entries
            .iter()
            .zip(&self.inv_norms)
            .enumerate()
            .map(|(i, (e, n))| {
                (
                    i,
                    e.lexical.iter().zip(probe).map(|(a, b)| a * b).sum::<f64>() * n * pn,
                )
            })
            .collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        let k = k.min(sims.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < sims.len() {
            sims.select_nth_unstable_by(k - 1, order);
            sims.truncate(k);
        }
        sims.sort_by(order);
        Ok(sims)
    }
}

/// Embeds every held-out token. Errors if any token comes from an
/// utterance in `training_utts`.
pub fn build_lexical_index(
    checkpoint: &Checkpoint,
    tokens: Vec<(AcousticToken, Option<u32>)>,
    training_utts: &BTreeSet<u32>,
) -> Result<LexicalIndex> {
    if let Some((t, _)) = tokens
        .iter()
        .find(|(t, _)| training_utts.contains(&t.utt_id))
    {
        return Err(Error::invalid(format!(
            "utterance {} belongs to the training split and cannot be indexed",
            t.utt_id
        )));
    }
    let vectors: Vec<&[f32]> = tokens.iter().map(|(t, _)| t.vector.as_slice()).collect();
    let lexical = checkpoint.embed_acoustic(&vectors)?;
    let entries = tokens
        .into_iter()
        .zip(lexical)
        .map(|((acoustic, gold_type), lexical)| IndexEntry {
            lexical,
            acoustic,
            gold_type,
        })
        .collect();
    LexicalIndex::new(entries)
}

/// Softmax of `similarities / temperature`; one-hot on the first maximum
/// below [`ARGMAX_TEMPERATURE`].
pub fn sampling_distribution(similarities: &[f64], temperature: f64) -> Vec<f64> {
    if similarities.is_empty() {
        return Vec::new();
    }
    let max = similarities
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if temperature < ARGMAX_TEMPERATURE {
        let best = similarities.iter().position(|&s| s == max).unwrap();
        let mut p = vec![0.0; similarities.len()];
        p[best] = 1.0;
        return p;
    }
    let w: Vec<f64> = similarities
        .iter()
        .map(|s| ((s - max) / temperature).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub entry: usize,
    /// Neighbour ids and similarities the draw was made from.
    pub neighbours: Vec<(usize, f64)>,
}

/// Draws the next entry given the lexical context: queries with the first
/// head's prediction at the last position. Context beyond the model's
/// window is cut from the left.
pub fn next_from_lexical<R: Rng + ?Sized>(
    checkpoint: &Checkpoint,
    index: &LexicalIndex,
    context: &[Vec<f64>],
    params: &GenerationParams,
    rng: &mut R,
) -> Result<Draw> {
    params.validate()?;
    if context.is_empty() {
        return Err(Error::invalid("empty prompt"));
    }
    let window = checkpoint.config.tokens_per_sentence;
    let ctx = &context[context.len().saturating_sub(window)..];
    let out = checkpoint.lm_forward(ctx)?;
    let probe = &out.predictions[0][ctx.len() - 1];
    let neighbours = index.query(probe, params.k_neighbours)?;
    let sims: Vec<f64> = neighbours.iter().map(|n| n.1).collect();
    let pick = rng::categorical(&sampling_distribution(&sims, params.temperature), rng);
    let entry = neighbours[pick].0;
    debug_assert!(neighbours.iter().any(|n| n.0 == entry));
    Ok(Draw { entry, neighbours })
}

/// Encodes an acoustic prompt and draws one continuation entry.
pub fn next_token<R: Rng + ?Sized>(
    checkpoint: &Checkpoint,
    index: &LexicalIndex,
    prompt: &[&[f32]],
    params: &GenerationParams,
    rng: &mut R,
) -> Result<(Vec<f64>, AcousticToken)> {
    if prompt.is_empty() {
        return Err(Error::invalid("empty prompt"));
    }
    let context = checkpoint.embed_acoustic(prompt)?;
    let draw = next_from_lexical(checkpoint, index, &context, params, rng)?;
    let e = index.entry(draw.entry);
    Ok((e.lexical.clone(), e.acoustic.clone()))
}

/// Entry ids of a `max_tokens` continuation. Without a prompt the first
/// entry is drawn uniformly from the index and counts toward `max_tokens`.
pub fn generate(
    checkpoint: &Checkpoint,
    index: &LexicalIndex,
    prompt: &[&[f32]],
    params: &GenerationParams,
) -> Result<Vec<usize>> {
    generate_stream(checkpoint, index, prompt, params, 0)
}

/// [`generate`] on an explicit rng stream, so batches of sentences are
/// independent yet reproducible.
pub fn generate_stream(
    checkpoint: &Checkpoint,
    index: &LexicalIndex,
    prompt: &[&[f32]],
    params: &GenerationParams,
    stream: u64,
) -> Result<Vec<usize>> {
    params.validate()?;
    let mut r = rng::stream(params.seed, stream);
    let mut out = Vec::with_capacity(params.max_tokens);
    if params.max_tokens == 0 {
        return Ok(out);
    }
    let mut context = if prompt.is_empty() {
        let first = r.random_range(0..index.len());
        out.push(first);
        vec![index.entry(first).lexical.clone()]
    } else {
        checkpoint.embed_acoustic(prompt)?
    };
    while out.len() < params.max_tokens {
        let draw = next_from_lexical(checkpoint, index, &context, params, &mut r)?;
        out.push(draw.entry);
        context.push(index.entry(draw.entry).lexical.clone());
    }
    Ok(out)
}

/// Maps acoustic tokens back to grammar types: gold labels where the index
/// has them, else the word whose noiseless encoding is most cosine-similar.
pub struct Transcriber {
    prototypes: Vec<(u32, Vec<f32>)>,
}

impl Transcriber {
    pub fn new(grammar: &SyntheticGrammar, encoder: &SegmentEncoder) -> Result<Self> {
        let prototypes = grammar
            .vocab
            .iter()
            .map(|t| Ok((t.type_id, encoder.project(&t.prototype)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { prototypes })
    }

    pub fn nearest_type(&self, vector: &[f32]) -> u32 {
        let norm = vector
            .iter()
            .map(|&x| (x as f64).powi(2))
            .sum::<f64>()
            .sqrt()
            .max(COS_EPS);
        let mut best = (f64::NEG_INFINITY, 0);
        for (id, p) in &self.prototypes {
            // prototype encodings are unit norm
            let c = p
                .iter()
                .zip(vector)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
                / norm;
            if c > best.0 {
                best = (c, *id);
            }
        }
        best.1
    }

    pub fn transcribe(&self, index: &LexicalIndex, entries: &[usize]) -> Vec<u32> {
        entries
            .iter()
            .map(|&i| {
                let e = index.entry(i);
                e.gold_type
                    .unwrap_or_else(|| self.nearest_type(&e.acoustic.vector))
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    kind: String,
    count: usize,
    dim: usize,
    acoustic_dim: usize,
}

/// Manifest plus one record per entry: provenance, gold type, lexical
/// vector, acoustic vector.
pub fn write_index(path: &Path, index: &LexicalIndex) -> Result<()> {
    let header = IndexHeader {
        kind: "index".into(),
        count: index.len(),
        dim: index.dim,
        acoustic_dim: index.entries[0].acoustic.vector.len(),
    };
    let records = index.entries.iter().map(|e| {
        let mut r = RecordBuf::new();
        r.u32(e.acoustic.utt_id)
            .u32(e.acoustic.span.0)
            .u32(e.acoustic.span.1)
            .u32(e.acoustic.speaker_id)
            .opt_u32s(e.gold_type.as_ref().map(std::slice::from_ref))
            .f64s(&e.lexical)
            .f32s(&e.acoustic.vector);
        r
    });
    container::write_container(path, &header, records)
}

pub fn read_index(path: &Path) -> Result<LexicalIndex> {
    let (h, records): (IndexHeader, _) = container::read_container(path)?;
    container::check_kind(&h.kind, "index", h.count, records.len())?;
    let entries = records
        .iter()
        .enumerate()
        .map(|(i, bytes)| {
            let mut c = RecordCursor::new(bytes, i);
            let utt_id = c.u32()?;
            let span = (c.u32()?, c.u32()?);
            let speaker_id = c.u32()?;
            let gold = c.opt_u32s()?;
            let lexical = c.f64s()?;
            let vector = c.f32s()?;
            c.finish()?;
            if lexical.len() != h.dim
                || vector.len() != h.acoustic_dim
                || gold.as_ref().is_some_and(|g| g.len() != 1)
            {
                return Err(Error::parse(
                    format!("record {i}"),
                    "entry inconsistent with manifest",
                ));
            }
            Ok(IndexEntry {
                lexical,
                acoustic: AcousticToken {
                    vector,
                    utt_id,
                    span,
                    speaker_id,
                },
                gold_type: gold.map(|g| g[0]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LexicalIndex::new(entries)
}
