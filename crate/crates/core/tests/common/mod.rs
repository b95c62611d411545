#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use toklm::eval::LabeledEmbedding;
use toklm::model::{Checkpoint, LmConfig, TrainSequence};
use toklm::quantize::{fit_bottleneck, BottleneckMode, QuantizedCode, QuantizerModel};
use toklm::rng;

pub fn gaussian<R: Rng + ?Sized>(r: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            scale * z
        })
        .collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    // Full table, no row reuse.
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        t[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = t[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            t[i][j] = sub.min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
        }
    }
    t[a.len()][b.len()]
}

/// All-pairs NED: full similarity matrix, nearest neighbour per row, then
/// repeated max-selection over the remaining candidate pairs until the
/// coverage target is met.
pub fn brute_force_ned(items: &[LabeledEmbedding], coverage_target: f64) -> f64 {
    let n = items.len();
    let sim: Vec<Vec<f64>> = items
        .iter()
        .map(|a| {
            items
                .iter()
                .map(|b| oracle_cosine(&a.vector, &b.vector))
                .collect()
        })
        .collect();
    let mut pool: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n {
        let mut best = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            match best {
                Some((_, s)) if sim[i][j] <= s => {}
                _ => best = Some((j, sim[i][j])),
            }
        }
        let (j, s) = best.unwrap();
        let pair = (i.min(j), i.max(j), s);
        if !pool.iter().any(|p| p.0 == pair.0 && p.1 == pair.1) {
            pool.push(pair);
        }
    }
    let needed = (coverage_target * n as f64 - 1e-9).ceil() as usize;
    let mut covered = vec![false; n];
    let mut taken = Vec::new();
    while covered.iter().filter(|&&c| c).count() < needed {
        let mut pick = 0;
        for k in 1..pool.len() {
            let (a, b) = (pool[k], pool[pick]);
            if a.2 > b.2 || (a.2 == b.2 && (a.0, a.1) < (b.0, b.1)) {
                pick = k;
            }
        }
        let (i, j, _) = pool.remove(pick);
        covered[i] = true;
        covered[j] = true;
        taken.push((i, j));
    }
    let total: f64 = taken
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (&items[i].transcription, &items[j].transcription);
            edit_distance(a, b) as f64 / a.len().max(b.len()) as f64
        })
        .sum();
    total / taken.len() as f64
}

/// Nearest centroid by scanning every table entry, projecting with plain
/// loops; ties keep the earlier index.
pub fn brute_force_code(model: &QuantizerModel, token: &[f32]) -> Vec<u32> {
    let x: Vec<f64> = token.iter().map(|&v| v as f64).collect();
    model
        .centroid_tables
        .iter()
        .enumerate()
        .map(|(j, table)| {
            let mut z = 0.0;
            for i in 0..x.len() {
                z += model.projection[j][i] * (x[i] - model.mean[i]);
            }
            let mut best = 0;
            for (c, &v) in table.iter().enumerate() {
                if (z - v).abs() < (z - table[best]).abs() {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

pub fn ones(code: &QuantizedCode) -> usize {
    code.to_one_hot().iter().filter(|&&x| x == 1.0).count()
}

pub fn tiny_config() -> LmConfig {
    LmConfig {
        n_layers: 1,
        n_attn_heads: 2,
        width: 16,
        ffn_width: 32,
        lexemb_blocks: 1,
        n_pred_heads: 3,
        n_negatives: 8,
        dropout: 0.0,
        learning_rate: 3e-3,
        warmup_steps: 5,
        batch_sentences: 6,
        tokens_per_sentence: 8,
        utts_per_speaker: 3,
        max_steps: 40,
        eval_every: 10,
        seed: 5,
        ..LmConfig::default()
    }
}

/// Utterances whose tokens step through `n_protos` prototypes in a fixed
/// order, projected by a PCA bottleneck. Also returns each token's
/// prototype id.
pub fn cyclic_data(
    n_utts: usize,
    n_protos: usize,
    seed: u64,
) -> (QuantizerModel, Vec<TrainSequence>, Vec<Vec<usize>>) {
    let mut r = rng::stream(seed, 0);
    let protos: Vec<Vec<f64>> = (0..n_protos).map(|_| gaussian(&mut r, 6, 1.0)).collect();
    let mut raw = Vec::new();
    let mut labels = Vec::new();
    for u in 0..n_utts {
        let start = r.random_range(0..n_protos);
        let len = r.random_range(5..=8);
        labels.push((0..len).map(|t| (start + t) % n_protos).collect());
        let toks: Vec<Vec<f64>> = (0..len)
            .map(|t| {
                let noise = gaussian(&mut r, 6, 0.05);
                protos[(start + t) % n_protos]
                    .iter()
                    .zip(noise)
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();
        raw.push((u as u32, (u % 3) as u32, toks));
    }
    let all: Vec<Vec<f64>> = raw.iter().flat_map(|(_, _, t)| t.clone()).collect();
    let q = fit_bottleneck(&all, BottleneckMode::Pca, 4, 8, 0).unwrap();
    let seqs = raw
        .into_iter()
        .map(|(utt_id, speaker_id, toks)| TrainSequence {
            utt_id,
            speaker_id,
            features: toks
                .iter()
                .map(|t| q.features(&to_f32(t)).unwrap())
                .collect(),
        })
        .collect();
    (q, seqs, labels)
}

pub fn tiny_checkpoint(seed: u64) -> (Checkpoint, Vec<TrainSequence>) {
    let (q, seqs, _) = cyclic_data(6, 5, seed);
    (Checkpoint::init(tiny_config(), q).unwrap(), seqs)
}
