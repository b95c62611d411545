//! Lexical embedder and causal transformer LM with parallel prediction
//! heads, trained contrastively.
//!
//! `LexEmb = L ∘ q`: the bottleneck `q` comes from [`crate::quantize`], `L`
//! is a stack of fully-connected → layer-norm → ReLU blocks. Head `m`
//! (1-based) at position `t` predicts the lexical token at `t + m`.

mod io;
mod nce;
mod train;

use std::collections::BTreeMap;

use ndarray::Axis;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, NceTerm, Tape, Var};
use crate::error::{Error, Result};
use crate::quantize::{QuantizedCode, QuantizerModel};
use crate::rng;

pub use io::{read_checkpoint, write_checkpoint};
pub use nce::{nce_loss, nce_loss_with_grad};
pub use train::{
    lr_at, sample_negatives, sequences_from_tokens, train, Batch, BatchItem, LogEntry,
    NegativeDraw, TrainOutcome, TrainSequence,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub n_layers: usize,
    pub n_attn_heads: usize,
    /// Model width; also the lexical token dimension.
    pub width: usize,
    pub ffn_width: usize,
    pub lexemb_blocks: usize,
    pub n_pred_heads: usize,
    pub nce_temperature: f64,
    pub n_negatives: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub batch_sentences: usize,
    /// Maximum tokens per training sentence; also the context length.
    pub tokens_per_sentence: usize,
    /// Sentences drawn per speaker when assembling a batch.
    pub utts_per_speaker: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_attn_heads: 4,
            width: 128,
            ffn_width: 512,
            lexemb_blocks: 2,
            n_pred_heads: 3,
            nce_temperature: 0.1,
            n_negatives: 64,
            dropout: 0.1,
            learning_rate: 5e-4,
            warmup_steps: 50,
            weight_decay: 0.1,
            batch_sentences: 16,
            tokens_per_sentence: 32,
            utts_per_speaker: 8,
            max_steps: 1000,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl LmConfig {
    /// Layer sizes for a full-size model.
    pub fn full_scale() -> Self {
        Self {
            n_layers: 12,
            n_attn_heads: 16,
            width: 1024,
            ffn_width: 4096,
            lexemb_blocks: 5,
            n_negatives: 500,
            batch_sentences: 64,
            tokens_per_sentence: 64,
            warmup_steps: 5000,
            max_steps: 200_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_attn_heads", self.n_attn_heads),
            ("width", self.width),
            ("ffn_width", self.ffn_width),
            ("lexemb_blocks", self.lexemb_blocks),
            ("n_pred_heads", self.n_pred_heads),
            ("n_negatives", self.n_negatives),
            ("batch_sentences", self.batch_sentences),
            ("tokens_per_sentence", self.tokens_per_sentence),
            ("utts_per_speaker", self.utts_per_speaker),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be >= 1")));
        }
        if self.width % self.n_attn_heads != 0 {
            return Err(Error::config("width must be divisible by n_attn_heads"));
        }
        if !(self.nce_temperature > 0.0) {
            return Err(Error::config("nce_temperature must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Output of LexEmb for one acoustic token.
#[derive(Debug, Clone, PartialEq)]
pub struct LexicalToken {
    pub vector: Vec<f64>,
    pub utt_id: u32,
    pub span: (u32, u32),
}

/// Per-position outputs of the causal LM.
#[derive(Debug, Clone, PartialEq)]
pub struct LmOutput {
    pub context: Vec<Vec<f64>>,
    /// `predictions[m][t]` is head `m + 1`'s guess at position `t + m + 1`.
    pub predictions: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy)]
struct DenseIds {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1: NormIds,
    q: DenseIds,
    k: DenseIds,
    v: DenseIds,
    o: DenseIds,
    ln2: NormIds,
    ff1: DenseIds,
    ff2: DenseIds,
}

/// Positions of each parameter tensor in the flat parameter list.
#[derive(Debug, Clone)]
struct Layout {
    lexemb: Vec<(DenseIds, NormIds)>,
    pos_emb: usize,
    layers: Vec<LayerIds>,
    ln_f: NormIds,
    heads: Vec<DenseIds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

fn layout_and_specs(config: &LmConfig, input_dim: usize) -> (Layout, Vec<TensorSpec>) {
    let mut specs = Vec::new();
    let mut add = |name: String, rows: usize, cols: usize| {
        specs.push(TensorSpec { name, rows, cols });
        specs.len() - 1
    };
    let w = config.width;
    let dense = |add: &mut dyn FnMut(String, usize, usize) -> usize,
                 name: &str,
                 fan_in: usize,
                 fan_out: usize| DenseIds {
        w: add(format!("{name}.w"), fan_in, fan_out),
        b: add(format!("{name}.b"), 1, fan_out),
    };
    let norm = |add: &mut dyn FnMut(String, usize, usize) -> usize, name: &str| NormIds {
        gamma: add(format!("{name}.gamma"), 1, w),
        beta: add(format!("{name}.beta"), 1, w),
    };
    let lexemb = (0..config.lexemb_blocks)
        .map(|i| {
            let fan_in = if i == 0 { input_dim } else { w };
            let d = dense(&mut add, &format!("lexemb.{i}.fc"), fan_in, w);
            let n = norm(&mut add, &format!("lexemb.{i}.ln"));
            (d, n)
        })
        .collect();
    let pos_emb = add("pos_emb".into(), config.tokens_per_sentence, w);
    let layers = (0..config.n_layers)
        .map(|i| LayerIds {
            ln1: norm(&mut add, &format!("layer.{i}.ln1")),
            q: dense(&mut add, &format!("layer.{i}.q"), w, w),
            k: dense(&mut add, &format!("layer.{i}.k"), w, w),
            v: dense(&mut add, &format!("layer.{i}.v"), w, w),
            o: dense(&mut add, &format!("layer.{i}.o"), w, w),
            ln2: norm(&mut add, &format!("layer.{i}.ln2")),
            ff1: dense(&mut add, &format!("layer.{i}.ff1"), w, config.ffn_width),
            ff2: dense(&mut add, &format!("layer.{i}.ff2"), config.ffn_width, w),
        })
        .collect();
    let ln_f = norm(&mut add, "ln_f");
    let heads = (0..config.n_pred_heads)
        .map(|m| dense(&mut add, &format!("head.{}", m + 1), w, w))
        .collect();
    (
        Layout {
            lexemb,
            pos_emb,
            layers,
            ln_f,
            heads,
        },
        specs,
    )
}

/// Trained (or freshly initialised) model state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: LmConfig,
    pub quantizer: QuantizerModel,
    pub params: Vec<Mat>,
    pub step: usize,
    pub metrics: BTreeMap<String, f64>,
    specs: Vec<TensorSpec>,
    layout: Layout,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.quantizer == other.quantizer
            && self.params == other.params
            && self.step == other.step
            && self.metrics == other.metrics
    }
}

/// Intermediate handles of one forward pass.
pub(crate) struct ForwardVars {
    pub lexical: Var,
    pub heads: Vec<Var>,
    pub params: Vec<Var>,
}

impl Checkpoint {
    /// Random initialisation: Xavier-uniform weights, zero biases, unit
    /// layer-norm gains, small Gaussian positional embeddings.
    pub fn init(config: LmConfig, quantizer: QuantizerModel) -> Result<Self> {
        config.validate()?;
        let input_dim = quantizer.feature_dim();
        if input_dim == 0 {
            return Err(Error::config("quantizer produces empty features"));
        }
        let (layout, specs) = layout_and_specs(&config, input_dim);
        let mut r = rng::stream(config.seed, 1);
        let params = specs
            .iter()
            .map(|s| {
                if s.name.ends_with(".gamma") {
                    Mat::ones((s.rows, s.cols))
                } else if s.name.ends_with(".b") || s.name.ends_with(".beta") {
                    Mat::zeros((s.rows, s.cols))
                } else if s.name == "pos_emb" {
                    Mat::from_shape_fn((s.rows, s.cols), |_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        0.02 * z
                    })
                } else {
                    let a = (6.0 / (s.rows + s.cols) as f64).sqrt();
                    Mat::from_shape_fn((s.rows, s.cols), |_| r.random_range(-a..a))
                }
            })
            .collect();
        Ok(Self {
            config,
            quantizer,
            params,
            step: 0,
            metrics: BTreeMap::new(),
            specs,
            layout,
        })
    }

    pub(crate) fn from_parts(
        config: LmConfig,
        quantizer: QuantizerModel,
        params: Vec<Mat>,
        step: usize,
        metrics: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let mut ck = Self::init(config, quantizer)?;
        if params.len() != ck.params.len() {
            return Err(Error::Shape {
                expected: ck.params.len(),
                got: params.len(),
            });
        }
        for (spec, p) in ck.specs.iter().zip(&params) {
            if p.dim() != (spec.rows, spec.cols) {
                return Err(Error::invalid(format!(
                    "tensor {} has shape {:?}",
                    spec.name,
                    p.dim()
                )));
            }
        }
        ck.params = params;
        ck.step = step;
        ck.metrics = metrics;
        Ok(ck)
    }

    pub fn tensor_specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn input_dim(&self) -> usize {
        self.quantizer.feature_dim()
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    fn dense(tape: &mut Tape, p: &[Var], ids: DenseIds, x: Var) -> Var {
        tape.linear(x, p[ids.w], p[ids.b])
    }

    fn norm(tape: &mut Tape, p: &[Var], ids: NormIds, x: Var) -> Var {
        tape.layer_norm(x, p[ids.gamma], p[ids.beta])
    }

    fn lexemb_vars(&self, tape: &mut Tape, p: &[Var], features: Var) -> Var {
        let mut h = features;
        for &(d, n) in &self.layout.lexemb {
            let z = Self::dense(tape, p, d, h);
            let z = Self::norm(tape, p, n, z);
            h = tape.relu(z);
        }
        h
    }

    fn dropout<R: Rng + ?Sized>(&self, tape: &mut Tape, x: Var, rng: Option<&mut R>) -> Var {
        let rate = self.config.dropout;
        match rng {
            Some(r) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let shape = tape.value(x).raw_dim();
                let mask = Mat::from_shape_fn(shape, |_| {
                    if r.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                tape.mask(x, mask)
            }
            _ => x,
        }
    }

    /// Transformer over stacked lexical rows split into `segments`.
    fn transformer_vars<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &[Var],
        lexical: Var,
        segments: &[(usize, usize)],
        mut rng: Option<&mut R>,
    ) -> (Var, Vec<Var>) {
        let positions: Vec<usize> = segments.iter().flat_map(|&(_, len)| 0..len).collect();
        let pos = tape.gather_rows(p[self.layout.pos_emb], positions);
        let mut x = tape.add(lexical, pos);
        for layer in &self.layout.layers {
            let h = Self::norm(tape, p, layer.ln1, x);
            let q = Self::dense(tape, p, layer.q, h);
            let k = Self::dense(tape, p, layer.k, h);
            let v = Self::dense(tape, p, layer.v, h);
            let a = tape.causal_attention(q, k, v, segments, self.config.n_attn_heads);
            let a = Self::dense(tape, p, layer.o, a);
            let a = self.dropout(tape, a, rng.as_deref_mut());
            x = tape.add(x, a);
            let h = Self::norm(tape, p, layer.ln2, x);
            let f = Self::dense(tape, p, layer.ff1, h);
            let f = tape.relu(f);
            let f = Self::dense(tape, p, layer.ff2, f);
            let f = self.dropout(tape, f, rng.as_deref_mut());
            x = tape.add(x, f);
        }
        let context = Self::norm(tape, p, self.layout.ln_f, x);
        let heads = self
            .layout
            .heads
            .iter()
            .map(|&ids| Self::dense(tape, p, ids, context))
            .collect();
        (context, heads)
    }

    fn check_segments(&self, segments: &[(usize, usize)]) -> Result<()> {
        for &(_, len) in segments {
            if len == 0 {
                return Err(Error::invalid("empty sequence"));
            }
            if len > self.config.tokens_per_sentence {
                return Err(Error::invalid(format!(
                    "sequence of {len} tokens exceeds context of {}",
                    self.config.tokens_per_sentence
                )));
            }
        }
        Ok(())
    }

    /// Full forward from bottleneck features.
    pub(crate) fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        features: Mat,
        segments: &[(usize, usize)],
        rng: Option<&mut R>,
    ) -> Result<ForwardVars> {
        self.check_segments(segments)?;
        if features.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: features.ncols(),
            });
        }
        let params = self.bind(tape);
        let f = tape.leaf(features);
        let lexical = self.lexemb_vars(tape, &params, f);
        let (_, heads) = self.transformer_vars(tape, &params, lexical, segments, rng);
        Ok(ForwardVars {
            lexical,
            heads,
            params,
        })
    }

    /// LexEmb applied to a batch of bottleneck feature vectors.
    pub fn lexemb_features(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let m = rows_to_mat(features, self.input_dim())?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let f = tape.leaf(m);
        let l = self.lexemb_vars(&mut tape, &p, f);
        Ok(mat_to_rows(tape.value(l)))
    }

    pub fn lexemb_forward(&self, code: &QuantizedCode) -> Result<Vec<f64>> {
        let mut out = self.lexemb_features(&[code.to_one_hot()])?;
        Ok(out.pop().unwrap())
    }

    /// Bottleneck + LexEmb for raw acoustic token vectors.
    pub fn embed_acoustic(&self, tokens: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
        let features = tokens
            .iter()
            .map(|t| self.quantizer.features(t))
            .collect::<Result<Vec<_>>>()?;
        self.lexemb_features(&features)
    }

    /// Causal LM over one lexical token sequence.
    pub fn lm_forward(&self, lexical: &[Vec<f64>]) -> Result<LmOutput> {
        let mut out = self.lm_forward_batch(&[lexical.to_vec()])?;
        Ok(out.pop().unwrap())
    }

    pub fn lm_forward_batch(&self, sequences: &[Vec<Vec<f64>>]) -> Result<Vec<LmOutput>> {
        let segments = segments_of(sequences.iter().map(Vec::len));
        self.check_segments(&segments)?;
        let stacked: Vec<Vec<f64>> = sequences.iter().flatten().cloned().collect();
        let m = rows_to_mat(&stacked, self.width())?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let l = tape.leaf(m);
        let (context, heads) =
            self.transformer_vars::<rng::StageRng>(&mut tape, &p, l, &segments, None);
        let ctx = tape.value(context);
        Ok(segments
            .iter()
            .map(|&(start, len)| LmOutput {
                context: mat_to_rows(&ctx.slice(ndarray::s![start..start + len, ..]).to_owned()),
                predictions: heads
                    .iter()
                    .map(|&h| {
                        mat_to_rows(
                            &tape
                                .value(h)
                                .slice(ndarray::s![start..start + len, ..])
                                .to_owned(),
                        )
                    })
                    .collect(),
            })
            .collect())
    }

    /// Mean contrastive loss of a lexical sequence against a fixed negative
    /// pool, averaged over every (position, head) with a target in range.
    /// Lower means more probable. Sequences longer than the context are
    /// scored as consecutive context-sized chunks.
    pub fn score_sequence(&self, lexical: &[Vec<f64>], pool: &NegativePool) -> Result<f64> {
        let len = lexical.len();
        if len < 2 {
            return Err(Error::invalid("scoring needs at least two tokens"));
        }
        if pool.vectors.nrows() == 0 {
            return Err(Error::invalid("empty negative pool"));
        }
        let window = self.config.tokens_per_sentence;
        let segments = segments_of((0..len).step_by(window).map(|s| window.min(len - s)));
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let l = tape.leaf(rows_to_mat(lexical, self.width())?);
        let (_, heads) = self.transformer_vars::<rng::StageRng>(&mut tape, &p, l, &segments, None);
        let negs = tape.leaf(pool.vectors.clone());
        let heads_n = self.config.n_pred_heads;
        let terms: Vec<NceTerm> = segments
            .iter()
            .flat_map(|&(start, n)| {
                (0..n).flat_map(move |t| {
                    (1..=heads_n)
                        .filter(move |m| t + m < n)
                        .map(move |m| NceTerm {
                            head: m - 1,
                            pred_row: start + t,
                            pos_row: start + t + m,
                            neg_set: 0,
                        })
                })
            })
            .collect();
        if terms.is_empty() {
            return Err(Error::invalid("sequence yields no scoring terms"));
        }
        let all: Vec<usize> = (0..pool.vectors.nrows()).collect();
        let loss = tape.info_nce(
            &heads,
            l,
            negs,
            terms,
            vec![all],
            self.config.nce_temperature,
        );
        Ok(tape.scalar(loss))
    }

    /// Loss and parameter gradients for one assembled batch. Dropout is
    /// active only when `rng` is given.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        rng: Option<&mut R>,
    ) -> Result<(f64, Vec<Mat>)> {
        let mut tape = Tape::new();
        let (loss, params) = self.batch_loss_vars(&mut tape, batch, rng)?;
        let grads = tape.backward(loss);
        let out = params
            .iter()
            .zip(&self.params)
            .map(|(v, p)| {
                grads[v.index()]
                    .clone()
                    .unwrap_or_else(|| Mat::zeros(p.raw_dim()))
            })
            .collect();
        Ok((tape.scalar(loss), out))
    }

    pub fn batch_loss(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = self.batch_loss_vars::<rng::StageRng>(&mut tape, batch, None)?;
        Ok(tape.scalar(loss))
    }

    fn batch_loss_vars<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        rng: Option<&mut R>,
    ) -> Result<(Var, Vec<Var>)> {
        let segments: Vec<(usize, usize)> = batch.items.iter().map(|i| (i.start, i.len)).collect();
        let fw = self.forward(tape, batch.features.clone(), &segments, rng)?;
        let mut terms = Vec::new();
        for (s, item) in batch.items.iter().enumerate() {
            if batch.neg_sets[s].is_empty() {
                continue;
            }
            for t in 0..item.len {
                for m in 1..=self.config.n_pred_heads {
                    if t + m < item.len {
                        terms.push(NceTerm {
                            head: m - 1,
                            pred_row: item.start + t,
                            pos_row: item.start + t + m,
                            neg_set: s,
                        });
                    }
                }
            }
        }
        if terms.is_empty() {
            return Err(Error::invalid("batch yields no contrastive terms"));
        }
        let loss = tape.info_nce(
            &fw.heads,
            fw.lexical,
            fw.lexical,
            terms,
            batch.neg_sets.clone(),
            self.config.nce_temperature,
        );
        Ok((loss, fw.params))
    }
}

/// Fixed set of lexical vectors used as negatives when scoring test items.
#[derive(Debug, Clone)]
pub struct NegativePool {
    pub vectors: Mat,
}

impl NegativePool {
    /// Embeds `size` tokens drawn without replacement (seeded) from
    /// `candidates`.
    pub fn from_tokens(
        checkpoint: &Checkpoint,
        candidates: &[&[f32]],
        size: usize,
        seed: u64,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::invalid("no candidate tokens for the negative pool"));
        }
        let mut r = rng::stream(seed, 0);
        let n = size.min(candidates.len());
        let picked: Vec<&[f32]> = rand::seq::index::sample(&mut r, candidates.len(), n)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        let lex = checkpoint.embed_acoustic(&picked)?;
        Ok(Self {
            vectors: rows_to_mat(&lex, checkpoint.width())?,
        })
    }
}

pub(crate) fn segments_of(lengths: impl Iterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut start = 0;
    lengths
        .map(|len| {
            let seg = (start, len);
            start += len;
            seg
        })
        .collect()
}

pub(crate) fn rows_to_mat(rows: &[Vec<f64>], cols: usize) -> Result<Mat> {
    let mut m = Mat::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(Error::Shape {
                expected: cols,
                got: r.len(),
            });
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite input vector"));
        }
        m.row_mut(i)
            .assign(&ndarray::ArrayView1::from(r.as_slice()));
    }
    Ok(m)
}

pub(crate) fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
}
