mod common;

use common::{brute_force_code, gaussian, ones, to_f32};
use proptest::prelude::*;
use rand::Rng;
use toklm::corpus::{generate_grammar, sample_corpus, GrammarParams, Utterance};
use toklm::eval::{self, LabeledEmbedding};
use toklm::quantize::{centroid_budget, fit_quantizer};
use toklm::rng;
use toklm::sample::{entropy, sampling_distribution, IndexEntry, LexicalIndex};
use toklm::tokenize::{
    encode_segment, segment_fixed, AcousticToken, EncoderConfig, SegmentEncoder,
};

fn random_tokens(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, 0);
    // Anisotropic so the PCA spectrum is not flat.
    let scales: Vec<f64> = (0..dim).map(|i| 1.0 / (1.0 + i as f64)).collect();
    (0..n)
        .map(|_| {
            gaussian(&mut r, dim, 1.0)
                .into_iter()
                .zip(&scales)
                .map(|(x, s)| x * s)
                .collect()
        })
        .collect()
}

fn utterance(n_frames: usize, dim: usize, seed: u64) -> Utterance {
    let mut r = rng::stream(seed, 1);
    Utterance {
        utt_id: 0,
        speaker_id: 0,
        frames: (0..n_frames)
            .map(|_| to_f32(&gaussian(&mut r, dim, 1.0)))
            .collect(),
        gold_types: None,
        gold_boundaries: None,
    }
}

fn index_from(vectors: &[Vec<f64>]) -> LexicalIndex {
    let entries = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| IndexEntry {
            lexical: v.clone(),
            acoustic: AcousticToken {
                vector: vec![1.0],
                utt_id: i as u32,
                span: (0, 1),
                speaker_id: 0,
            },
            gold_type: None,
        })
        .collect();
    LexicalIndex::new(entries).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quantizer_codes_are_structured(
        seed in any::<u64>(),
        d in 1usize..=8,
        k in 1usize..=10,
        extra_dim in 0usize..4,
        extra_n in 0usize..200,
    ) {
        let dim = d + extra_dim;
        let n = (dim + 2).max(k) + extra_n;
        let tokens = random_tokens(seed, n, dim);
        let q = fit_quantizer(&tokens, d, k, seed).unwrap();
        prop_assert_eq!(q.block_sizes()[0], k);
        for (j, &size) in q.block_sizes().iter().enumerate() {
            prop_assert_eq!(size, centroid_budget(k, q.variances[j], q.variances[0]));
        }
        for t in &tokens {
            let t = to_f32(t);
            let code = q.quantize(&t).unwrap();
            prop_assert_eq!(ones(&code), d);
            prop_assert_eq!(code.len(), q.code_dim());
            prop_assert_eq!(code.indices, brute_force_code(&q, &t));
        }
    }

    #[test]
    fn fixed_windows_partition_frames(n in 1usize..200, w in 1usize..30) {
        let b = segment_fixed(&utterance(n, 2, 0), w).unwrap();
        let spans: Vec<(u32, u32)> = b.spans().collect();
        prop_assert!(!spans.is_empty());
        prop_assert_eq!(spans[0].0, 0);
        prop_assert_eq!(spans.last().unwrap().1 as usize, n);
        for pair in spans.windows(2) {
            prop_assert_eq!(pair[0].1, pair[1].0);
        }
        prop_assert!(spans.iter().all(|(a, b)| a < b));
    }

    #[test]
    fn encoded_segments_have_unit_norm(seed in any::<u64>(), n in 1usize..40, out_dim in 1usize..40) {
        let utt = utterance(n, 8, seed);
        let enc = SegmentEncoder::new(EncoderConfig { seed, out_dim }, 8).unwrap();
        let tok = encode_segment(&utt, (0, n as u32), &enc).unwrap();
        let norm: f64 = tok.vector.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn corpus_boundaries_match_types(seed in 0u64..1000, utts in 1usize..20) {
        let g = generate_grammar(&GrammarParams { seed, vocab_size: 12, n_nonwords: 3, ..GrammarParams::default() }).unwrap();
        for u in sample_corpus(&g, utts, (1, 6), seed).unwrap() {
            let cuts = u.gold_boundaries.as_ref().unwrap();
            prop_assert_eq!(cuts.len(), u.gold_types.as_ref().unwrap().len() + 1);
            prop_assert_eq!(*cuts.last().unwrap() as usize, u.n_frames());
        }
    }

    #[test]
    fn knn_query_is_clamped_distinct_and_ordered(
        seed in any::<u64>(),
        n in 1usize..60,
        k in 1usize..80,
        dup in any::<bool>(),
    ) {
        let mut r = rng::stream(seed, 0);
        let mut vectors: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut r, 5, 1.0)).collect();
        if dup && n > 1 {
            vectors[n - 1] = vectors[0].clone();
        }
        let idx = index_from(&vectors);
        let probe = gaussian(&mut r, 5, 1.0);
        let hits = idx.query(&probe, k).unwrap();
        prop_assert_eq!(hits.len(), k.min(n));
        let mut ids: Vec<usize> = hits.iter().map(|h| h.0).collect();
        for w in hits.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), hits.len());
        // Nothing left out scores higher than the last hit.
        let last = hits.last().unwrap().1;
        for (i, v) in vectors.iter().enumerate() {
            if !ids.contains(&i) {
                prop_assert!(eval::cosine(v, &probe) <= last + 1e-12);
            }
        }
    }

    #[test]
    fn stored_vector_is_its_own_nearest(seed in any::<u64>(), n in 1usize..40) {
        let mut r = rng::stream(seed, 0);
        let vectors: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut r, 6, 1.0)).collect();
        let idx = index_from(&vectors);
        for (i, v) in vectors.iter().enumerate() {
            prop_assert_eq!(idx.query(v, 1).unwrap()[0].0, i);
        }
    }

    #[test]
    fn sampling_entropy_grows_with_temperature(
        sims in prop::collection::vec(-1.0f64..1.0, 1..30),
        t1 in 1e-4f64..10.0,
        factor in 1.0f64..20.0,
    ) {
        let lo = entropy(&sampling_distribution(&sims, t1));
        let hi = entropy(&sampling_distribution(&sims, t1 * factor));
        prop_assert!(hi >= lo - 1e-9, "{} < {}", hi, lo);
    }

    #[test]
    fn ned_ignores_input_order(seed in any::<u64>(), n in 2usize..40, rot in 0usize..40) {
        let mut r = rng::stream(seed, 0);
        let items: Vec<LabeledEmbedding> = (0..n)
            .map(|_| LabeledEmbedding {
                vector: gaussian(&mut r, 4, 1.0),
                transcription: (0..r.random_range(1..5)).map(|_| r.random_range(0..3)).collect(),
                sem_class: None,
                pos_class: None,
            })
            .collect();
        let mut shuffled = items.clone();
        shuffled.rotate_left(rot % n);
        shuffled.reverse();
        let a = eval::ned(&items, 1.0).unwrap().ned;
        let b = eval::ned(&shuffled, 1.0).unwrap().ned;
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn abx_ignores_common_rescaling(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut r = rng::stream(seed, 0);
        let vectors: Vec<Vec<f64>> = (0..30).map(|_| gaussian(&mut r, 4, 1.0)).collect();
        let triplets: Vec<(usize, usize, usize)> =
            (0..200).map(|_| (r.random_range(0..30), r.random_range(0..30), r.random_range(0..30))).collect();
        let scaled: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
        let a = eval::abx(&vectors, &triplets).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, eval::abx(&scaled, &triplets).unwrap());
    }

    #[test]
    fn memory_estimate_strictly_increases(
        l in 1.0f64..64.0, n in 1.0f64..5000.0, d in 1.0f64..4096.0, bump in 1.0f64..100.0,
    ) {
        let base = eval::memory_estimate(l, n, d).unwrap();
        prop_assert!(eval::memory_estimate(l + bump, n, d).unwrap() > base);
        prop_assert!(eval::memory_estimate(l, n + bump, d).unwrap() > base);
        prop_assert!(eval::memory_estimate(l, n, d + bump).unwrap() > base);
    }

    #[test]
    fn diversity_scores_are_bounded(seed in any::<u64>(), n in 2usize..10, vocab in 2u32..8) {
        let mut r = rng::stream(seed, 0);
        let batch: Vec<Vec<u32>> = (0..n)
            .map(|_| (0..r.random_range(3..12)).map(|_| r.random_range(0..vocab)).collect())
            .collect();
        for v in [eval::self_bleu(&batch).unwrap(), eval::auto_bleu(&batch).unwrap(), eval::vert(&batch).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn perplexity_is_at_least_one(seed in any::<u64>(), n in 1usize..10) {
        let g = generate_grammar(&GrammarParams { vocab_size: 10, n_nonwords: 2, ..GrammarParams::default() }).unwrap();
        let mut r = rng::stream(seed, 0);
        let batch: Vec<Vec<u32>> = (0..n).map(|_| g.sample_types(8, &mut r)).collect();
        prop_assert!(eval::ngram_perplexity(&batch, &g, eval::PPX_PSEUDO_COUNT).unwrap() >= 1.0);
    }

    #[test]
    fn edit_distance_is_a_metric(
        a in prop::collection::vec(0u8..4, 0..10),
        b in prop::collection::vec(0u8..4, 0..10),
        c in prop::collection::vec(0u8..4, 0..10),
    ) {
        let d = |x: &[u8], y: &[u8]| eval::levenshtein(x, y);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
    }
}
