//! Automatic metrics.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::COS_EPS;
use crate::corpus::SyntheticGrammar;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, NegativePool};
use crate::rng;

/// Anchor diversity levels at which generation perplexity is reported.
pub const VERT_ANCHORS: [f64; 2] = [0.113, 0.189];

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COS_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COS_EPS);
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEmbedding {
    pub vector: Vec<f64>,
    pub transcription: Vec<u32>,
    pub sem_class: Option<u32>,
    pub pos_class: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NedResult {
    pub ned: f64,
    /// Accepted `(i, j, cosine)` pairs with `i < j`, in acceptance order.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Each embedding proposes a pair with its nearest neighbour (ties to the
/// lower id). Pairs are taken by decreasing cosine until the requested
/// fraction of embeddings appears in at least one taken pair; the score is
/// the mean length-normalised edit distance over taken pairs.
pub fn ned(embeddings: &[LabeledEmbedding], coverage_target: f64) -> Result<NedResult> {
    if !(coverage_target > 0.0 && coverage_target <= 1.0) {
        return Err(Error::invalid("coverage_target must lie in (0, 1]"));
    }
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::invalid("NED needs at least two embeddings"));
    }
    if embeddings.iter().any(|e| e.transcription.is_empty()) {
        return Err(Error::invalid("empty transcription"));
    }
    let mut candidates: Vec<(usize, usize, f64)> = (0..n)
        .map(|i| {
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for j in (0..n).filter(|&j| j != i) {
                let c = cosine(&embeddings[i].vector, &embeddings[j].vector);
                if c > best.1 {
                    best = (j, c);
                }
            }
            (i.min(best.0), i.max(best.0), best.1)
        })
        .collect();
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    candidates.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);

    let needed = ((coverage_target * n as f64) - 1e-9).ceil() as usize;
    let mut covered = vec![false; n];
    let mut n_covered = 0;
    let mut pairs = Vec::new();
    for (i, j, c) in candidates {
        if n_covered >= needed {
            break;
        }
        for k in [i, j] {
            if !covered[k] {
                covered[k] = true;
                n_covered += 1;
            }
        }
        pairs.push((i, j, c));
    }
    let total: f64 = pairs
        .iter()
        .map(|&(i, j, _)| {
            let (a, b) = (&embeddings[i].transcription, &embeddings[j].transcription);
            levenshtein(a, b) as f64 / a.len().max(b.len()) as f64
        })
        .sum();
    Ok(NedResult {
        ned: total / pairs.len() as f64,
        pairs,
    })
}

/// Fraction of `(a, b, x)` index triplets with `d(a, b) < d(a, x)` under
/// cosine distance; ties earn half credit.
pub fn abx(vectors: &[Vec<f64>], triplets: &[(usize, usize, usize)]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::invalid("ABX needs at least one triplet"));
    }
    let score: f64 = triplets
        .iter()
        .map(|&(a, b, x)| {
            let dab = 1.0 - cosine(&vectors[a], &vectors[b]);
            let dax = 1.0 - cosine(&vectors[a], &vectors[x]);
            if dab < dax {
                1.0
            } else if dab == dax {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(score / triplets.len() as f64)
}

/// Seeded triplets over labelled tokens: A and B share a class but have
/// different types, X comes from another class.
pub fn build_abx_triplets(
    classes: &[u32],
    types: &[u32],
    n_triplets: usize,
    seed: u64,
) -> Result<Vec<(usize, usize, usize)>> {
    if classes.len() != types.len() {
        return Err(Error::Shape {
            expected: classes.len(),
            got: types.len(),
        });
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let distinct_types = |m: &[usize]| {
        let mut t: Vec<u32> = m.iter().map(|&i| types[i]).collect();
        t.sort_unstable();
        t.dedup();
        t.len()
    };
    let eligible: Vec<u32> = by_class
        .iter()
        .filter(|(_, m)| distinct_types(m) >= 2)
        .map(|(&c, _)| c)
        .collect();
    if by_class.len() < 2 || eligible.is_empty() {
        return Err(Error::invalid(
            "ABX needs two classes and a class with two distinct types",
        ));
    }
    let mut r = rng::stream(seed, 0);
    let mut out = Vec::with_capacity(n_triplets);
    while out.len() < n_triplets {
        let c = eligible[r.random_range(0..eligible.len())];
        let members = &by_class[&c];
        let a = members[r.random_range(0..members.len())];
        let others: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| types[i] != types[a])
            .collect();
        if others.is_empty() {
            continue;
        }
        let b = others[r.random_range(0..others.len())];
        let x = loop {
            let x = r.random_range(0..classes.len());
            if classes[x] != c {
                break x;
            }
        };
        out.push((a, b, x));
    }
    Ok(out)
}

/// Fraction of `(positive, negative)` score pairs where the positive loss
/// is strictly lower; ties earn half credit.
pub fn pair_accuracy_from_scores(scores: &[(f64, f64)]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("empty pair suite"));
    }
    let s: f64 = scores
        .iter()
        .map(|&(p, n)| {
            if p < n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(s / scores.len() as f64)
}

/// Scores both members of every pair of acoustic token sequences with the
/// checkpoint's contrastive loss and counts wins for the positive member.
pub fn pair_accuracy(
    checkpoint: &Checkpoint,
    pool: &NegativePool,
    pairs: &[(Vec<Vec<f32>>, Vec<Vec<f32>>)],
) -> Result<f64> {
    let score = |seq: &[Vec<f32>]| -> Result<f64> {
        let refs: Vec<&[f32]> = seq.iter().map(Vec::as_slice).collect();
        checkpoint.score_sequence(&checkpoint.embed_acoustic(&refs)?, pool)
    };
    let scores = pairs
        .iter()
        .map(|(p, n)| Ok((score(p)?, score(n)?)))
        .collect::<Result<Vec<_>>>()?;
    pair_accuracy_from_scores(&scores)
}

/// n-gram orders used by both BLEU variants.
pub const BLEU_ORDERS: [usize; 2] = [2, 3];
const MIN_BLEU_LEN: usize = 3;

fn ngram_counts(s: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut m = HashMap::new();
    for g in s.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

fn usable(batch: &[Vec<u32>]) -> Vec<&[u32]> {
    let kept: Vec<&[u32]> = batch
        .iter()
        .filter(|s| s.len() >= MIN_BLEU_LEN)
        .map(Vec::as_slice)
        .collect();
    if kept.len() < batch.len() {
        warn!(
            "skipping {} sentences shorter than {MIN_BLEU_LEN} symbols",
            batch.len() - kept.len()
        );
    }
    kept
}

/// Mean over sentences of the geometric mean of clipped 2- and 3-gram
/// precision against all other sentences as references.
pub fn self_bleu(batch: &[Vec<u32>]) -> Result<f64> {
    let sents = usable(batch);
    if sents.len() < 2 {
        return Err(Error::invalid(
            "self-BLEU needs at least two sentences of length >= 3",
        ));
    }
    let counts: Vec<Vec<HashMap<&[u32], usize>>> = sents
        .iter()
        .map(|s| BLEU_ORDERS.iter().map(|&n| ngram_counts(s, n)).collect())
        .collect();
    let mut total = 0.0;
    for i in 0..sents.len() {
        let mut log_sum = 0.0;
        let mut zero = false;
        for (o, &n) in BLEU_ORDERS.iter().enumerate() {
            let hyp = &counts[i][o];
            let mut matched = 0usize;
            for (g, &c) in hyp {
                let max_ref = (0..sents.len())
                    .filter(|&j| j != i)
                    .map(|j| counts[j][o].get(g).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched += c.min(max_ref);
            }
            let p = matched as f64 / (sents[i].len() + 1 - n) as f64;
            if p == 0.0 {
                zero = true;
            } else {
                log_sum += p.ln();
            }
        }
        if !zero {
            total += (log_sum / BLEU_ORDERS.len() as f64).exp();
        }
    }
    Ok(total / sents.len() as f64)
}

/// Mean over sentences of the average (over orders 2 and 3) fraction of
/// n-gram positions whose n-gram recurs within the same sentence.
pub fn auto_bleu(batch: &[Vec<u32>]) -> Result<f64> {
    let sents = usable(batch);
    if sents.is_empty() {
        return Err(Error::invalid("auto-BLEU needs a sentence of length >= 3"));
    }
    let total: f64 = sents
        .iter()
        .map(|s| {
            BLEU_ORDERS
                .iter()
                .map(|&n| {
                    let c = ngram_counts(s, n);
                    let repeated: usize = c.values().filter(|&&k| k > 1).sum();
                    repeated as f64 / (s.len() + 1 - n) as f64
                })
                .sum::<f64>()
                / BLEU_ORDERS.len() as f64
        })
        .sum();
    Ok(total / sents.len() as f64)
}

pub fn vert(batch: &[Vec<u32>]) -> Result<f64> {
    Ok(0.5 * (self_bleu(batch)? + auto_bleu(batch)?))
}

/// Default pseudo-count weighting the grammar's bigram chain against the
/// add-one prior.
pub const PPX_PSEUDO_COUNT: f64 = 1e4;

/// Perplexity of type-id transcripts under the grammar's bigram chain,
/// smoothed as `(C·P(j|i) + 1) / (C + V)` over the `V` words. The first
/// token of each transcript is scored with the smoothed unigram; ids that
/// are not words get `1 / (C + V)`.
pub fn ngram_perplexity(
    transcripts: &[Vec<u32>],
    grammar: &SyntheticGrammar,
    pseudo_count: f64,
) -> Result<f64> {
    if !(pseudo_count >= 0.0) || !pseudo_count.is_finite() {
        return Err(Error::invalid(
            "pseudo_count must be finite and non-negative",
        ));
    }
    let v = grammar.vocab.len();
    let denom = pseudo_count + v as f64;
    let mut nll = 0.0;
    let mut n = 0usize;
    for t in transcripts {
        let mut prev: Option<usize> = None;
        for &tok in t {
            let j = tok as usize;
            let p = if j >= v {
                0.0
            } else {
                match prev {
                    Some(i) if i < v => grammar.bigram[i][j],
                    Some(_) => 1.0 / v as f64,
                    None => grammar.unigram[j],
                }
            };
            nll -= ((pseudo_count * p + 1.0) / denom).ln();
            n += 1;
            prev = Some(j);
        }
    }
    if n == 0 {
        return Err(Error::invalid("no tokens to score"));
    }
    Ok((nll / n as f64).exp())
}

/// Least-squares cubic on a centred and scaled abscissa.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicFit {
    pub centre: f64,
    pub scale: f64,
    /// Coefficients of `1, u, u², u³` with `u = (x - centre) / scale`.
    pub coeffs: [f64; 4],
    pub x_min: f64,
    pub x_max: f64,
}

impl CubicFit {
    pub fn fit(points: &[(f64, f64)]) -> Result<Self> {
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::invalid("non-finite curve point"));
        }
        let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        if xs.len() < 4 {
            return Err(Error::invalid(format!(
                "cubic fit needs 4 distinct x values, got {}",
                xs.len()
            )));
        }
        let (x_min, x_max) = (xs[0], xs[xs.len() - 1]);
        let centre = 0.5 * (x_min + x_max);
        let scale = 0.5 * (x_max - x_min);
        let a = DMatrix::from_fn(points.len(), 4, |i, k| {
            ((points[i].0 - centre) / scale).powi(k as i32)
        });
        let b = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
        let qr = a.qr();
        let qtb = qr.q().transpose() * b;
        let sol = qr
            .r()
            .solve_upper_triangular(&qtb)
            .ok_or_else(|| Error::invalid("singular cubic design matrix"))?;
        Ok(Self {
            centre,
            scale,
            coeffs: [sol[0], sol[1], sol[2], sol[3]],
            x_min,
            x_max,
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let u = (x - self.centre) / self.scale;
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * u + c)
    }

    pub fn extrapolates(&self, x: f64) -> bool {
        x < self.x_min || x > self.x_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchoredPpx {
    pub anchor: f64,
    pub ppx: f64,
    pub extrapolated: bool,
}

/// Perplexity read off a cubic fit of `(VERT, PPX)` points at `anchor`.
pub fn ppx_at_vert(points: &[(f64, f64)], anchor: f64) -> Result<AnchoredPpx> {
    let fit = CubicFit::fit(points)?;
    Ok(AnchoredPpx {
        anchor,
        ppx: fit.eval(anchor),
        extrapolated: fit.extrapolates(anchor),
    })
}

/// Activations kept for backpropagation by `layers` transformer layers on
/// `n_tokens` inputs of width `width`.
pub fn memory_estimate(layers: f64, n_tokens: f64, width: f64) -> Result<f64> {
    if !(layers > 0.0 && n_tokens > 0.0 && width > 0.0) {
        return Err(Error::invalid("memory estimate arguments must be positive"));
    }
    Ok(layers * n_tokens * width * (34.0 + 5.0 * n_tokens / width))
}

pub fn memory_ratio(a: (f64, f64, f64), b: (f64, f64, f64)) -> Result<f64> {
    Ok(memory_estimate(a.0, a.1, a.2)? / memory_estimate(b.0, b.1, b.2)?)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid(
            "spearman needs two equal-length series of length >= 2",
        ));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::invalid("constant series has no rank correlation"));
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub temperature: f64,
    pub vert: f64,
    pub ppx: f64,
}

/// Named metrics from one configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub curve: Vec<CurvePoint>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            ..Self::default()
        }
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(vector: Vec<f64>, transcription: Vec<u32>) -> LabeledEmbedding {
        LabeledEmbedding {
            vector,
            transcription,
            sem_class: None,
            pos_class: None,
        }
    }

    #[test]
    fn edit_distance_cases() {
        assert_eq!(levenshtein(&["a", "b", "c"], &["a", "b", "c"]), 0);
        assert_eq!(levenshtein(&["a", "b", "c"], &["a", "b", "d"]), 1);
        let k: Vec<char> = "kitten".chars().collect();
        let s: Vec<char> = "sitting".chars().collect();
        assert_eq!(levenshtein(&k, &s), 3);
        assert_eq!(levenshtein::<u8>(&[], &[1, 2]), 2);
    }

    #[test]
    fn ned_identical_and_clusters() {
        let same: Vec<_> = (0..5).map(|_| emb(vec![1.0, 2.0], vec![3, 4])).collect();
        assert_eq!(ned(&same, 1.0).unwrap().ned, 0.0);
        let mut two = Vec::new();
        for i in 0..4 {
            two.push(emb(vec![1.0, 0.01 * i as f64], vec![1, 2]));
            two.push(emb(vec![0.01 * i as f64, 1.0], vec![7, 8, 9]));
        }
        let r = ned(&two, 1.0).unwrap();
        assert_eq!(r.ned, 0.0);
        assert!(ned(&two, 0.0).is_err());
        assert!(ned(&two[..1], 1.0).is_err());
    }

    #[test]
    fn abx_ties_and_identity() {
        let v = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(abx(&v, &[(0, 1, 2)]).unwrap(), 1.0);
        assert_eq!(abx(&v, &[(0, 2, 2)]).unwrap(), 0.5);
        assert!(abx(&v, &[]).is_err());
    }

    #[test]
    fn triplet_constraints() {
        let classes = [0, 0, 0, 1, 1, 2];
        let types = [10, 11, 10, 20, 21, 30];
        let t = build_abx_triplets(&classes, &types, 200, 4).unwrap();
        assert_eq!(t.len(), 200);
        for &(a, b, x) in &t {
            assert_eq!(classes[a], classes[b]);
            assert_ne!(types[a], types[b]);
            assert_ne!(classes[a], classes[x]);
        }
        assert_eq!(t, build_abx_triplets(&classes, &types, 200, 4).unwrap());
        assert!(build_abx_triplets(&[0, 0, 0], &[1, 2, 3], 5, 0).is_err());
    }

    #[test]
    fn bleu_hand_values() {
        let same = vec![vec![1, 2, 1, 2, 3]; 3];
        assert_eq!(self_bleu(&same).unwrap(), 1.0);
        assert_eq!(auto_bleu(&[vec![1, 2, 3, 4, 5]]).unwrap(), 0.0);
        // "a b a b" / "a b c d": no shared trigram, so both self-BLEU terms
        // vanish; auto-BLEU is (2/3 + 0) / 2 for the first sentence.
        let batch = vec![vec![0, 1, 0, 1], vec![0, 1, 2, 3]];
        assert_eq!(self_bleu(&batch).unwrap(), 0.0);
        assert!((auto_bleu(&batch).unwrap() - 1.0 / 6.0).abs() < 1e-12);
        assert!((vert(&batch).unwrap() - 1.0 / 12.0).abs() < 1e-12);
        let batch = vec![vec![0, 1, 2, 0, 1], vec![0, 1, 2, 3]];
        // "a b c a b" vs "a b c d".
        // s1 bigrams ab bc ca ab: ref has ab bc cd -> clipped 1+1+0 = 2 of 4;
        // trigrams abc bca cab: ref abc bcd -> 1 of 3.
        // s2 bigrams ab bc cd: ref counts ab 2, bc 1 -> 2 of 3; trigrams abc
        // bcd: 1 of 2.
        let s1 = (0.5f64 * (1.0 / 3.0)).sqrt();
        let s2 = ((2.0f64 / 3.0) * 0.5).sqrt();
        assert!((self_bleu(&batch).unwrap() - 0.5 * (s1 + s2)).abs() < 1e-12);
    }

    #[test]
    fn short_sentences_are_skipped() {
        let batch = vec![vec![1, 2], vec![1, 2, 3], vec![1, 2, 3]];
        assert_eq!(self_bleu(&batch).unwrap(), 1.0);
        assert!(self_bleu(&[vec![1, 2]]).is_err());
        assert!(auto_bleu(&[vec![1]]).is_err());
    }

    #[test]
    fn cubic_recovery_and_extrapolation() {
        let p = |v: f64| 2.0 * v.powi(3) - v + 1.0;
        let pts: Vec<(f64, f64)> = [0.05, 0.1, 0.15, 0.2, 0.3]
            .iter()
            .map(|&v| (v, p(v)))
            .collect();
        let r = ppx_at_vert(&pts, 0.113).unwrap();
        assert!((r.ppx - p(0.113)).abs() < 1e-9);
        assert!(!r.extrapolated);
        assert!(ppx_at_vert(&pts, 0.4).unwrap().extrapolated);
        assert!(ppx_at_vert(&pts[..3], 0.1).is_err());
        let dup = vec![(0.1, 1.0), (0.1, 2.0), (0.2, 1.0), (0.3, 0.0), (0.3, 5.0)];
        assert!(ppx_at_vert(&dup, 0.2).is_err());
    }

    #[test]
    fn memory_formula() {
        assert_eq!(memory_estimate(1.0, 1.0, 1.0).unwrap(), 39.0);
        let r = memory_ratio((16.0, 1500.0, 1024.0), (16.0, 300.0, 1024.0)).unwrap();
        assert!((r - 5.83).abs() < 0.01);
        assert_eq!(memory_ratio((2.0, 3.0, 4.0), (2.0, 3.0, 4.0)).unwrap(), 1.0);
        assert!(memory_estimate(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0
        );
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}
