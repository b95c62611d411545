use std::collections::BTreeMap;

use log::{debug, info};
use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{rows_to_mat, Checkpoint, LmConfig};
use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::quantize::QuantizerModel;
use crate::rng;
use crate::tokenize::AcousticToken;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-8;
const CLIP_NORM: f64 = 1.0;
const MAX_VALID_BATCHES: usize = 8;

/// One training sentence: bottleneck features of consecutive tokens of a
/// single utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub utt_id: u32,
    pub speaker_id: u32,
    pub features: Vec<Vec<f64>>,
}

/// Groups tokens by utterance (ordered by span start), maps them through the
/// bottleneck and cuts them into sentences of at most `max_len` tokens.
/// Pieces shorter than two tokens carry no prediction target and are dropped.
pub fn sequences_from_tokens(
    tokens: &[AcousticToken],
    quantizer: &QuantizerModel,
    max_len: usize,
) -> Result<Vec<TrainSequence>> {
    if max_len < 2 {
        return Err(Error::config("sentence length must be at least 2"));
    }
    let mut by_utt: BTreeMap<u32, Vec<&AcousticToken>> = BTreeMap::new();
    for t in tokens {
        by_utt.entry(t.utt_id).or_default().push(t);
    }
    let mut out = Vec::new();
    for (utt_id, mut toks) in by_utt {
        toks.sort_by_key(|t| t.span.0);
        let speaker_id = toks[0].speaker_id;
        let feats = toks
            .iter()
            .map(|t| quantizer.features(&t.vector))
            .collect::<Result<Vec<_>>>()?;
        for chunk in feats.chunks(max_len) {
            if chunk.len() >= 2 {
                out.push(TrainSequence {
                    utt_id,
                    speaker_id,
                    features: chunk.to_vec(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub utt_id: u32,
    pub speaker_id: u32,
    pub start: usize,
    pub len: usize,
}

/// Stacked sentences plus, per sentence, the batch rows used as negatives.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Mat,
    pub items: Vec<BatchItem>,
    pub neg_sets: Vec<Vec<usize>>,
    /// Sentences whose negatives came from other speakers.
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeDraw {
    pub rows: Vec<usize>,
    /// True when no other utterance of the same speaker was in the batch.
    pub fallback: bool,
}

/// Draws up to `n` negative rows for sentence `anchor`, without replacement,
/// from other utterances of the same speaker. Falls back to other
/// utterances of any speaker when the speaker has no other utterance.
pub fn sample_negatives<R: Rng + ?Sized>(
    items: &[BatchItem],
    anchor: usize,
    n: usize,
    rng: &mut R,
) -> NegativeDraw {
    let a = items[anchor];
    let rows_where = |pred: &dyn Fn(&BatchItem) -> bool| -> Vec<usize> {
        items
            .iter()
            .filter(|i| i.utt_id != a.utt_id && pred(i))
            .flat_map(|i| i.start..i.start + i.len)
            .collect()
    };
    let mut pool = rows_where(&|i| i.speaker_id == a.speaker_id);
    let fallback = pool.is_empty();
    if fallback {
        pool = rows_where(&|_| true);
    }
    let k = n.min(pool.len());
    let rows = rand::seq::index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    NegativeDraw { rows, fallback }
}

impl Batch {
    pub fn assemble<R: Rng + ?Sized>(
        sequences: &[&TrainSequence],
        n_negatives: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut items = Vec::with_capacity(sequences.len());
        let mut rows = Vec::new();
        for s in sequences {
            items.push(BatchItem {
                utt_id: s.utt_id,
                speaker_id: s.speaker_id,
                start: rows.len(),
                len: s.features.len(),
            });
            rows.extend(s.features.iter().cloned());
        }
        let dim = rows.first().map_or(0, Vec::len);
        let features = rows_to_mat(&rows, dim)?;
        let mut neg_sets = Vec::with_capacity(items.len());
        let mut fallbacks = 0;
        for i in 0..items.len() {
            let draw = sample_negatives(&items, i, n_negatives, rng);
            fallbacks += draw.fallback as usize;
            neg_sets.push(draw.rows);
        }
        Ok(Self {
            features,
            items,
            neg_sets,
            fallbacks,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the step with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
    pub best_step: usize,
    pub negative_fallbacks: usize,
}

/// Linear warmup to the peak rate, then linear decay to zero at
/// `max_steps`. `step` is 1-based.
pub fn lr_at(config: &LmConfig, step: usize) -> f64 {
    let peak = config.learning_rate;
    let warm = config.warmup_steps.min(config.max_steps);
    if step <= warm && warm > 0 {
        return peak * step as f64 / warm as f64;
    }
    let span = (config.max_steps - warm).max(1) as f64;
    let done = (step - warm) as f64;
    peak * (1.0 - done / span).max(0.0)
}

/// Speaker-grouped batch sampler: up to `utts_per_speaker` sentences from
/// each of a shuffled list of speakers until the batch is full.
struct Sampler<'a> {
    sequences: &'a [TrainSequence],
    by_speaker: Vec<Vec<usize>>,
    batch: usize,
    per_speaker: usize,
}

impl<'a> Sampler<'a> {
    fn new(sequences: &'a [TrainSequence], batch: usize, per_speaker: usize) -> Self {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in sequences.iter().enumerate() {
            map.entry(s.speaker_id).or_default().push(i);
        }
        Self {
            sequences,
            by_speaker: map.into_values().collect(),
            batch,
            per_speaker,
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<&'a TrainSequence> {
        let mut order: Vec<usize> = (0..self.by_speaker.len()).collect();
        order.shuffle(rng);
        let mut out = Vec::with_capacity(self.batch);
        for s in order {
            let members = &self.by_speaker[s];
            let take = self
                .per_speaker
                .min(members.len())
                .min(self.batch - out.len());
            for i in rand::seq::index::sample(rng, members.len(), take) {
                out.push(&self.sequences[members[i]]);
            }
            if out.len() == self.batch {
                break;
            }
        }
        out
    }
}

struct AdamW {
    m: Vec<Mat>,
    v: Vec<Mat>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    fn new(ck: &Checkpoint) -> Self {
        Self {
            m: ck.params.iter().map(|p| Mat::zeros(p.raw_dim())).collect(),
            v: ck.params.iter().map(|p| Mat::zeros(p.raw_dim())).collect(),
            decay: ck
                .tensor_specs()
                .iter()
                .map(|s| s.name.ends_with(".w"))
                .collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Mat], grads: &[Mat], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let wd = if self.decay[i] { weight_decay } else { 0.0 };
            Zip::from(p)
                .and(g)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    *p -= lr * (update + wd * *p);
                });
        }
    }
}

fn clip(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Trains from a fresh initialisation. `on_log` sees every log entry as it
/// is produced. Validation batches and their negatives are fixed up front;
/// without validation data the training loss at each evaluation step is
/// used for model selection.
pub fn train(
    config: &LmConfig,
    quantizer: &QuantizerModel,
    train_set: &[TrainSequence],
    valid_set: &[TrainSequence],
    mut on_log: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.len() < 2 {
        return Err(Error::invalid("training needs at least two sentences"));
    }
    for s in train_set.iter().chain(valid_set) {
        if s.features.len() > config.tokens_per_sentence {
            return Err(Error::invalid(format!(
                "sentence of utterance {} has {} tokens, context is {}",
                s.utt_id,
                s.features.len(),
                config.tokens_per_sentence
            )));
        }
    }
    let mut ck = Checkpoint::init(config.clone(), quantizer.clone())?;
    let sampler = Sampler::new(train_set, config.batch_sentences, config.utts_per_speaker);
    let mut batch_rng = rng::stream(config.seed, 2);
    let mut dropout_rng = rng::stream(config.seed, 4);

    let valid_batches = if valid_set.len() >= 2 {
        let vs = Sampler::new(
            valid_set,
            config.batch_sentences.min(valid_set.len()),
            config.utts_per_speaker,
        );
        let mut vr = rng::stream(config.seed, 3);
        let n = valid_set
            .len()
            .div_ceil(config.batch_sentences)
            .clamp(1, MAX_VALID_BATCHES);
        (0..n)
            .map(|_| Batch::assemble(&vs.draw(&mut vr), config.n_negatives, &mut vr))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let mut opt = AdamW::new(&ck);
    let mut log = Vec::with_capacity(config.max_steps);
    let mut best: Option<(f64, usize, Vec<Mat>)> = None;
    let mut fallbacks = 0;
    let mut last_train = f64::NAN;

    for step in 1..=config.max_steps {
        let batch = Batch::assemble(
            &sampler.draw(&mut batch_rng),
            config.n_negatives,
            &mut batch_rng,
        )?;
        fallbacks += batch.fallbacks;
        let (loss, mut grads) = ck.loss_and_grads(&batch, Some(&mut dropout_rng))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                message: format!("training loss is {loss}"),
            });
        }
        let gnorm = clip(&mut grads, CLIP_NORM);
        let lr = lr_at(config, step);
        opt.step(&mut ck.params, &grads, lr, config.weight_decay);
        last_train = loss;

        let evaluate =
            config.eval_every > 0 && (step % config.eval_every == 0 || step == config.max_steps);
        let mut entry = LogEntry {
            step,
            lr,
            train_loss: loss,
            valid_loss: None,
        };
        if evaluate {
            let score = if valid_batches.is_empty() {
                loss
            } else {
                let total = valid_batches
                    .iter()
                    .map(|b| ck.batch_loss(b))
                    .collect::<Result<Vec<_>>>()?
                    .iter()
                    .sum::<f64>();
                let v = total / valid_batches.len() as f64;
                if !v.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        message: format!("validation loss is {v}"),
                    });
                }
                entry.valid_loss = Some(v);
                v
            };
            info!(
                "step {step}: train {loss:.4} valid {:?} lr {lr:.2e}",
                entry.valid_loss
            );
            if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
                best = Some((score, step, ck.params.clone()));
            }
        } else {
            debug!("step {step}: train {loss:.4} |g| {gnorm:.3}");
        }
        on_log(&entry);
        log.push(entry);
    }

    let best_step = match best {
        Some((score, step, params)) => {
            ck.params = params;
            ck.metrics.insert("best_selection_loss".into(), score);
            step
        }
        None => config.max_steps,
    };
    ck.step = best_step;
    ck.metrics.insert("final_train_loss".into(), last_train);
    ck.metrics
        .insert("negative_fallbacks".into(), fallbacks as f64);
    Ok(TrainOutcome {
        checkpoint: ck,
        log,
        best_step,
        negative_fallbacks: fallbacks,
    })
}
