//! Checks against independent references: closed forms, Monte Carlo and
//! hand-rolled linear algebra.

mod common;

use common::{cyclic_data, gaussian, oracle_cosine, tiny_checkpoint, tiny_config, to_f32};
use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use toklm::corpus::{generate_grammar, sample_corpus, zipf, GrammarParams};
use toklm::eval::{self, CubicFit};
use toklm::model::{
    nce_loss, nce_loss_with_grad, sample_negatives, sequences_from_tokens, train, Batch, BatchItem,
    Checkpoint, LmConfig, NegativePool, TrainSequence,
};
use toklm::pipeline::tokenize_all;
use toklm::quantize::{fit_bottleneck, fit_quantizer, BottleneckMode};
use toklm::rng;
use toklm::sample::{
    next_from_lexical, sampling_distribution, GenerationParams, IndexEntry, LexicalIndex,
};
use toklm::tokenize::{AcousticToken, EncoderConfig, SegmentEncoder, Segmentation};

fn chi_square(counts: &[usize], probs: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = n as f64 * p;
            (c as f64 - e).powi(2) / e
        })
        .sum()
}

fn critical_99(df: usize) -> f64 {
    ChiSquared::new(df as f64).unwrap().inverse_cdf(0.99)
}

#[test]
fn unigram_counts_follow_zipf() {
    let g = generate_grammar(&GrammarParams::default()).unwrap();
    let utts = sample_corpus(&g, 1000, (10, 10), 3).unwrap();
    let mut counts = vec![0usize; g.n_words()];
    for u in &utts {
        for &t in u.gold_types.as_ref().unwrap() {
            counts[t as usize] += 1;
        }
    }
    let n = counts.iter().sum::<usize>() as f64;
    assert_eq!(n, 10_000.0);
    let target = zipf(g.n_words(), g.params.zipf_exponent);
    for (i, (&c, &p)) in counts.iter().zip(&target).enumerate() {
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!(
            (c as f64 - n * p).abs() <= 3.0 * sigma,
            "type {i}: {c} vs {}",
            n * p
        );
    }
}

#[test]
fn semantic_classes_are_acoustically_neutral() {
    let (mut within, mut across) = ((0.0, 0usize), (0.0, 0usize));
    for seed in 0..20 {
        let g = generate_grammar(&GrammarParams {
            seed,
            ..GrammarParams::default()
        })
        .unwrap();
        for a in &g.vocab {
            for b in g.vocab.iter().filter(|b| b.type_id > a.type_id) {
                let d: f64 = a
                    .prototype
                    .iter()
                    .zip(&b.prototype)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let slot = if a.sem_class == b.sem_class {
                    &mut within
                } else {
                    &mut across
                };
                slot.0 += d;
                slot.1 += 1;
            }
        }
    }
    let ratio = (within.0 / within.1 as f64) / (across.0 / across.1 as f64);
    assert!(
        (ratio - 1.0).abs() < 0.05,
        "within/across distance ratio {ratio}"
    );
}

#[test]
fn same_speaker_negatives_are_uniform() {
    let item = |utt_id, start, len| BatchItem {
        utt_id,
        speaker_id: 7,
        start,
        len,
    };
    let items = vec![item(0, 0, 4), item(1, 4, 3), item(2, 7, 3)];
    let mut r = rng::stream(1, 0);
    let mut counts = [0usize; 6];
    for _ in 0..100_000 {
        let draw = sample_negatives(&items, 0, 1, &mut r);
        assert!(!draw.fallback);
        counts[draw.rows[0] - 4] += 1;
    }
    let stat = chi_square(&counts, &[1.0 / 6.0; 6]);
    assert!(stat < critical_99(5), "chi-square {stat}");
}

#[test]
fn nce_gradient_matches_central_differences_in_16_dims() {
    let mut r = rng::stream(8, 0);
    let p = gaussian(&mut r, 16, 1.0);
    let pos = gaussian(&mut r, 16, 1.0);
    let negs: Vec<Vec<f64>> = (0..10).map(|_| gaussian(&mut r, 16, 1.0)).collect();
    let (loss, g) = nce_loss_with_grad(&p, &pos, &negs, 0.1).unwrap();
    assert!(loss >= 0.0);
    let h = 1e-4;
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
    for i in 0..16 {
        let (mut up, mut dn) = (p.clone(), p.clone());
        up[i] += h;
        dn[i] -= h;
        let fd = (nce_loss(&up, &pos, &negs, 0.1).unwrap()
            - nce_loss(&dn, &pos, &negs, 0.1).unwrap())
            / (2.0 * h);
        assert!(
            rel(fd, g.pred[i]) < 1e-4,
            "pred[{i}]: {fd} vs {}",
            g.pred[i]
        );
    }
}

#[test]
fn nce_loss_is_ln_one_plus_n_for_equal_similarities() {
    let v = vec![0.5, -1.0, 2.0];
    for n in [1usize, 4, 63] {
        let loss = nce_loss(&v, &v, &vec![v.clone(); n], 0.1).unwrap();
        assert!((loss - (1.0 + n as f64).ln()).abs() < 1e-12);
    }
}

fn toy_sequences(config: &LmConfig) -> (toklm::quantize::QuantizerModel, Vec<TrainSequence>) {
    let g = generate_grammar(&GrammarParams::default()).unwrap();
    let utts = sample_corpus(&g, 300, (6, 16), 7).unwrap();
    let enc = SegmentEncoder::new(EncoderConfig::default(), g.frame_dim()).unwrap();
    let tokens = tokenize_all(&utts, Segmentation::Gold, &enc).unwrap();
    let raw: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| t.vector.iter().map(|&x| x as f64).collect())
        .collect();
    let q = fit_quantizer(&raw, 24, 10, 13).unwrap();
    let seqs = sequences_from_tokens(&tokens, &q, config.tokens_per_sentence).unwrap();
    (q, seqs)
}

#[test]
fn training_on_the_toy_corpus_lowers_the_loss() {
    let config = LmConfig {
        width: 32,
        ffn_width: 64,
        n_attn_heads: 2,
        n_negatives: 16,
        batch_sentences: 8,
        utts_per_speaker: 4,
        max_steps: 200,
        warmup_steps: 20,
        learning_rate: 2e-3,
        eval_every: 50,
        dropout: 0.0,
        ..LmConfig::default()
    };
    let (q, seqs) = toy_sequences(&config);
    let refs: Vec<&TrainSequence> = seqs.iter().take(16).collect();
    let batch = Batch::assemble(&refs, config.n_negatives, &mut rng::stream(99, 0)).unwrap();
    let before = Checkpoint::init(config.clone(), q.clone())
        .unwrap()
        .batch_loss(&batch)
        .unwrap();
    let out = train(&config, &q, &seqs, &[], |_| {}).unwrap();
    let after = out.checkpoint.batch_loss(&batch).unwrap();
    assert!(after < before, "loss {before} -> {after}");
}

fn train_cyclic(steps: usize) -> (Checkpoint, Checkpoint, Vec<TrainSequence>, Vec<Vec<usize>>) {
    let (q, seqs, labels) = cyclic_data(80, 11, 21);
    let config = LmConfig {
        max_steps: steps,
        warmup_steps: 20,
        ..tiny_config()
    };
    let untrained = Checkpoint::init(config.clone(), q.clone()).unwrap();
    let trained = train(&config, &q, &seqs, &[], |_| {}).unwrap().checkpoint;
    (untrained, trained, seqs, labels)
}

/// Fraction of a head's predictions whose nearest token among all tokens of
/// the set carries the label `offset` steps ahead.
fn head_accuracy(
    ck: &Checkpoint,
    seqs: &[TrainSequence],
    labels: &[Vec<usize>],
    head: usize,
    offset: usize,
) -> f64 {
    let lex: Vec<Vec<Vec<f64>>> = seqs
        .iter()
        .map(|s| ck.lexemb_features(&s.features).unwrap())
        .collect();
    let bank: Vec<(&Vec<f64>, usize)> = lex
        .iter()
        .zip(labels)
        .flat_map(|(l, y)| l.iter().zip(y.iter().copied()))
        .collect();
    let (mut hit, mut total) = (0usize, 0usize);
    for (l, y) in lex.iter().zip(labels) {
        let out = ck.lm_forward(l).unwrap();
        for t in 0..l.len().saturating_sub(head.max(offset)) {
            let pred = &out.predictions[head - 1][t];
            let best = bank
                .iter()
                .max_by(|a, b| oracle_cosine(pred, a.0).total_cmp(&oracle_cosine(pred, b.0)))
                .unwrap();
            hit += usize::from(best.1 == y[t + offset]);
            total += 1;
        }
    }
    hit as f64 / total as f64
}

#[test]
fn each_head_predicts_its_own_offset() {
    let (untrained, trained, seqs, labels) = train_cyclic(400);
    for head in 1..=3 {
        let acc = head_accuracy(&trained, &seqs, &labels, head, head);
        let base = head_accuracy(&untrained, &seqs, &labels, head, head);
        assert!(acc >= 0.9, "head {head}: trained accuracy {acc}");
        assert!(base < 0.3, "head {head}: untrained accuracy {base}");
        if head > 1 {
            let next = head_accuracy(&trained, &seqs, &labels, head, 1);
            assert!(next < 0.3, "head {head} predicts the next token ({next})");
        }
    }
}

#[test]
fn shuffled_sequences_score_worse() {
    let (_, trained, seqs, _) = train_cyclic(300);
    let mut r = rng::stream(4, 0);
    let pool_rows: Vec<Vec<f64>> = seqs
        .iter()
        .flat_map(|s| trained.lexemb_features(&s.features).unwrap())
        .collect();
    let pool = NegativePool {
        vectors: ndarray::Array2::from_shape_vec(
            (pool_rows.len(), trained.width()),
            pool_rows.into_iter().flatten().collect(),
        )
        .unwrap(),
    };
    let (mut real, mut shuffled) = (0.0, 0.0);
    for s in &seqs {
        let lex = trained.lexemb_features(&s.features).unwrap();
        let mut mixed = lex.clone();
        mixed.shuffle(&mut r);
        real += trained.score_sequence(&lex, &pool).unwrap();
        shuffled += trained.score_sequence(&mixed, &pool).unwrap();
    }
    assert!(real < shuffled, "real {real} vs shuffled {shuffled}");
}

#[test]
fn sampler_frequencies_match_softmax() {
    let (ck, seqs) = tiny_checkpoint(12);
    let mut r = rng::stream(30, 0);
    let entries: Vec<IndexEntry> = (0..12)
        .map(|i| {
            let raw = to_f32(&gaussian(&mut r, 6, 1.0));
            IndexEntry {
                lexical: ck.embed_acoustic(&[raw.as_slice()]).unwrap().remove(0),
                acoustic: AcousticToken {
                    vector: raw,
                    utt_id: i,
                    span: (0, 1),
                    speaker_id: 0,
                },
                gold_type: None,
            }
        })
        .collect();
    let index = LexicalIndex::new(entries).unwrap();
    let context = ck.lexemb_features(&seqs[0].features[..3]).unwrap();
    let mut params = GenerationParams {
        k_neighbours: 4,
        ..GenerationParams::default()
    };
    let first = next_from_lexical(&ck, &index, &context, &params, &mut r).unwrap();
    let sims: Vec<f64> = first.neighbours.iter().map(|n| n.1).collect();
    // Spread the four probabilities out.
    params.temperature = (sims[0] - sims[3]) / 2.0;
    let probs = sampling_distribution(&sims, params.temperature);
    assert!(
        probs.iter().all(|&p| p > 1e-3),
        "degenerate softmax {probs:?}"
    );
    let mut counts = [0usize; 4];
    for _ in 0..100_000 {
        let d = next_from_lexical(&ck, &index, &context, &params, &mut r).unwrap();
        let slot = d
            .neighbours
            .iter()
            .position(|n| n.0 == d.entry)
            .expect("draw outside the neighbours");
        assert_eq!(d.neighbours, first.neighbours);
        counts[slot] += 1;
    }
    let stat = chi_square(&counts, &probs);
    assert!(
        stat < critical_99(3),
        "chi-square {stat}, counts {counts:?}, p {probs:?}"
    );
}

#[test]
fn abx_on_random_unit_vectors_is_chance() {
    let mut r = rng::stream(5, 0);
    let vectors: Vec<Vec<f64>> = (0..3000)
        .map(|_| {
            let v = gaussian(&mut r, 16, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let triplets: Vec<(usize, usize, usize)> = (0..10_000)
        .map(|_| {
            (
                r.random_range(0..3000),
                r.random_range(0..3000),
                r.random_range(0..3000),
            )
        })
        .collect();
    let acc = eval::abx(&vectors, &triplets).unwrap();
    assert!((acc - 0.5).abs() < 0.015, "{acc}");
}

#[test]
fn perplexity_of_grammar_samples_matches_chain_entropy() {
    let g = generate_grammar(&GrammarParams::default()).unwrap();
    let mut r = rng::stream(6, 0);
    let batch: Vec<Vec<u32>> = (0..2000).map(|_| g.sample_types(50, &mut r)).collect();
    let ppx = eval::ngram_perplexity(&batch, &g, eval::PPX_PSEUDO_COUNT).unwrap();
    let analytic = g.entropy_rate().exp();
    assert!((ppx / analytic - 1.0).abs() < 0.05, "{ppx} vs {analytic}");
}

#[test]
fn perplexity_limits() {
    let mut g = generate_grammar(&GrammarParams {
        vocab_size: 6,
        n_sem_classes: 2,
        n_pos_classes: 2,
        n_nonwords: 1,
        ..GrammarParams::default()
    })
    .unwrap();
    let v = g.n_words();
    g.unigram = vec![1.0 / v as f64; v];
    g.bigram = vec![vec![1.0 / v as f64; v]; v];
    let batch = vec![vec![0, 3, 5, 1, 1], vec![2, 4]];
    let ppx = eval::ngram_perplexity(&batch, &g, 1e4).unwrap();
    assert!((ppx - v as f64).abs() < 1e-9);

    // Deterministic cycle 0 -> 1 -> ... -> 0.
    g.bigram = (0..v)
        .map(|i| (0..v).map(|j| f64::from(j == (i + 1) % v)).collect())
        .collect();
    g.unigram = vec![0.0; v];
    g.unigram[0] = 1.0;
    let cycle: Vec<u32> = (0..30).map(|t| (t % v) as u32).collect();
    let loose = eval::ngram_perplexity(std::slice::from_ref(&cycle), &g, 10.0).unwrap();
    let tight = eval::ngram_perplexity(std::slice::from_ref(&cycle), &g, 1e12).unwrap();
    assert!(tight < loose);
    assert!((tight - 1.0).abs() < 1e-9, "{tight}");
}

/// Weighted least squares on raw powers of x, solved by Gaussian
/// elimination with partial pivoting.
fn normal_equations(points: &[(f64, f64, f64)]) -> [f64; 4] {
    let mut m = [[0.0f64; 5]; 4];
    for &(x, y, w) in points {
        let pw = [1.0, x, x * x, x * x * x];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] += w * pw[i] * pw[j];
            }
            m[i][4] += w * pw[i] * y;
        }
    }
    for c in 0..4 {
        let p = (c..4)
            .max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()))
            .unwrap();
        m.swap(c, p);
        for r in 0..4 {
            if r != c {
                let f = m[r][c] / m[c][c];
                for k in c..5 {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    std::array::from_fn(|i| m[i][4] / m[i][i])
}

fn poly(c: &[f64; 4], x: f64) -> f64 {
    c[0] + x * (c[1] + x * (c[2] + x * c[3]))
}

#[test]
fn cubic_fit_matches_normal_equations() {
    let mut r = rng::stream(9, 0);
    for _ in 0..50 {
        let n = r.random_range(5..10);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (r.random_range(0.0..2.0), r.random_range(-5.0..5.0)))
            .collect();
        let fit = CubicFit::fit(&pts).unwrap();
        let oracle = normal_equations(&pts.iter().map(|&(x, y)| (x, y, 1.0)).collect::<Vec<_>>());
        for x in [0.1, 0.5, 1.0, 1.7] {
            let (a, b) = (fit.eval(x), poly(&oracle, x));
            assert!((a - b).abs() < 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }

        // Every point twice: same fit.
        let doubled: Vec<(f64, f64)> = pts.iter().chain(&pts).copied().collect();
        let again = CubicFit::fit(&doubled).unwrap();
        for x in [0.2, 1.3] {
            assert!((again.eval(x) - fit.eval(x)).abs() < 1e-9 * fit.eval(x).abs().max(1.0));
        }

        // One point twice: weight two in the normal equations.
        let mut extra = pts.clone();
        extra.push(pts[0]);
        let weighted: Vec<(f64, f64, f64)> = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (x, y, if i == 0 { 2.0 } else { 1.0 }))
            .collect();
        let (a, b) = (
            CubicFit::fit(&extra).unwrap().eval(0.8),
            poly(&normal_equations(&weighted), 0.8),
        );
        assert!((a - b).abs() < 1e-6 * b.abs().max(1.0), "{a} vs {b}");
    }
}

/// Largest eigenpairs of a symmetric matrix by power iteration with
/// deflation.
fn top_eigen(mut c: Vec<Vec<f64>>, count: usize) -> Vec<(f64, Vec<f64>)> {
    let n = c.len();
    let mut out = Vec::new();
    for e in 0..count {
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i + e) as f64 * 0.1).collect();
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| c[i][j] * v[j]).sum())
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            lambda = norm;
            v = w.into_iter().map(|x| x / norm).collect();
        }
        for i in 0..n {
            for j in 0..n {
                c[i][j] -= lambda * v[i] * v[j];
            }
        }
        out.push((lambda, v));
    }
    out
}

#[test]
fn pca_matches_power_iteration() {
    let mut r = rng::stream(10, 0);
    let scales = [3.0, 2.0, 1.0, 0.5, 0.25];
    let data: Vec<Vec<f64>> = (0..400)
        .map(|_| {
            gaussian(&mut r, 5, 1.0)
                .iter()
                .zip(scales)
                .map(|(x, s)| x * s + 1.0)
                .collect()
        })
        .collect();
    let q = fit_bottleneck(&data, BottleneckMode::Pca, 2, 4, 0).unwrap();
    let n = data.len() as f64;
    let mean: Vec<f64> = (0..5)
        .map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n)
        .collect();
    let cov: Vec<Vec<f64>> = (0..5)
        .map(|a| {
            (0..5)
                .map(|b| {
                    data.iter()
                        .map(|x| (x[a] - mean[a]) * (x[b] - mean[b]))
                        .sum::<f64>()
                        / n
                })
                .collect()
        })
        .collect();
    let eig = top_eigen(cov, 2);
    for (j, (lambda, v)) in eig.iter().enumerate() {
        assert!(
            (q.variances[j] / lambda - 1.0).abs() < 1e-8,
            "{} vs {lambda}",
            q.variances[j]
        );
        let align: f64 = q.projection[j].iter().zip(v).map(|(a, b)| a * b).sum();
        assert!((align.abs() - 1.0).abs() < 1e-8);
    }

    // Reconstruction error: no random rank-2 subspace beats the fitted one.
    let residual = |rows: &[Vec<f64>]| -> f64 {
        data.iter()
            .map(|x| {
                let c: Vec<f64> = x.iter().zip(&mean).map(|(a, m)| a - m).collect();
                let coords: Vec<f64> = rows
                    .iter()
                    .map(|p| p.iter().zip(&c).map(|(a, b)| a * b).sum())
                    .collect();
                (0..5)
                    .map(|i| {
                        let back: f64 = rows.iter().zip(&coords).map(|(p, z)| p[i] * z).sum();
                        (c[i] - back).powi(2)
                    })
                    .sum::<f64>()
            })
            .sum()
    };
    let best = residual(&q.projection);
    for _ in 0..200 {
        let a = gaussian(&mut r, 5, 1.0);
        let mut b = gaussian(&mut r, 5, 1.0);
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let a: Vec<f64> = a.iter().map(|x| x / na).collect();
        let ab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        b.iter_mut().zip(&a).for_each(|(y, x)| *y -= ab * x);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let b: Vec<f64> = b.iter().map(|x| x / nb).collect();
        assert!(residual(&[a, b]) >= best - 1e-9);
    }
}
