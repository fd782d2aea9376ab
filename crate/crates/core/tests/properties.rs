use std::collections::BTreeMap;

use cgru::decoding::{beam_search, ensemble_step_dist, greedy_decode, BeamConfig};
use cgru::io::{
    build_factor_vocabs, decode_archive, encode_archive, read_factored_corpus, write_factored_corpus, ArchiveMetadata,
    Dtype, Vocab,
};
use cgru::metrics::{clipped_matches, smoothed_sentence_bleu};
use cgru::model::{InitConfig, ModelConfig, ModelParams};
use cgru::training::{clip_global_norm, expected_risk};
use cgru::viz::{emit_attention, parse_attention};
use cgru::{Tensor, EOS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(seed: u64, sv: usize, tv: usize, d: usize) -> ModelParams {
    let init = InitConfig {
        scale: 1.0,
        orthogonal_recurrent: false,
    };
    ModelParams::init(ModelConfig::uniform(sv, tv, d), &init, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn word() -> impl Strategy<Value = String> {
    "[a-e]{1,2}"
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(word(), 1..7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn vocab_file_roundtrip(corpus in prop::collection::vec(sentence(), 1..10), max in 2usize..40) {
        let v = Vocab::build(corpus.iter().map(|s| s.iter().map(String::as_str)), max);
        prop_assert!(v.len() <= max.max(2));
        prop_assert_eq!(v.token(EOS), "</s>");
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let back = Vocab::read(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &v);
        for (i, t) in v.tokens().iter().enumerate() {
            prop_assert_eq!(v.id(t), i);
        }
    }

    #[test]
    fn factored_corpus_roundtrip(corpus in prop::collection::vec(prop::collection::vec((word(), "[xy]"), 1..6), 1..8)) {
        let lines: Vec<String> = corpus
            .iter()
            .map(|s| s.iter().map(|(w, f)| format!("{w}|{f}")).collect::<Vec<_>>().join(" "))
            .collect();
        let vocabs = build_factor_vocabs(&lines, 2, &[100, 100]).unwrap();
        let ids = read_factored_corpus(&lines, &vocabs).unwrap();
        prop_assert!(ids.iter().all(|s| s.last() == Some(&vec![EOS, EOS])));
        let mut out = Vec::new();
        write_factored_corpus(&mut out, &ids, &vocabs).unwrap();
        let text = String::from_utf8(out).unwrap();
        prop_assert_eq!(text.lines().collect::<Vec<_>>(), lines.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn bleu_is_bounded_and_maximal_on_identity(hyp in sentence(), reference in sentence()) {
        let b = smoothed_sentence_bleu(&hyp, &reference, 4);
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!((smoothed_sentence_bleu(&reference, &reference, 4) - 1.0).abs() < 1e-12);
        // Unigram matches are symmetric in the multiset sense.
        let (m1, _) = clipped_matches(&hyp, &reference, 1);
        let (m2, _) = clipped_matches(&reference, &hyp, 1);
        prop_assert_eq!(m1, m2);
        if m1 == 0 {
            prop_assert_eq!(b, 0.0);
        }
    }

    #[test]
    fn ensemble_distribution_is_normalised(rows in prop::collection::vec(prop::collection::vec(-8.0f64..0.0, 5), 1..4)) {
        let members: Vec<Tensor> = rows
            .iter()
            .map(|r| {
                let z = r.iter().map(|v| v.exp()).sum::<f64>().ln();
                Tensor::matrix(1, 5, r.iter().map(|v| v - z).collect()).unwrap()
            })
            .collect();
        let dist = ensemble_step_dist(&members).unwrap();
        prop_assert!((dist.data().iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        if members.len() == 1 {
            prop_assert_eq!(&dist, &members[0]);
        }
    }

    #[test]
    fn expected_risk_lies_between_extreme_deltas(
        lps in prop::collection::vec(-20.0f64..0.0, 1..8),
        seed in any::<u64>(),
        alpha in 0.001f64..2.0,
    ) {
        let deltas: Vec<f64> = lps.iter().enumerate().map(|(i, _)| ((seed >> (i % 60)) & 7) as f64 / 7.0).collect();
        let r = expected_risk(&lps, &deltas, alpha);
        let lo = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = deltas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(r >= lo - 1e-12 && r <= hi + 1e-12);
    }

    #[test]
    fn clipping_caps_the_global_norm(values in prop::collection::vec(-10.0f64..10.0, 2..20), max in 0.1f64..5.0) {
        let mut grads = BTreeMap::new();
        let half = values.len() / 2;
        grads.insert("a".to_string(), Tensor::vector(values[..half].to_vec()));
        grads.insert("b".to_string(), Tensor::vector(values[half..].to_vec()));
        let before = clip_global_norm(&mut grads, max);
        let after = grads.values().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((before - values.iter().map(|v| v * v).sum::<f64>().sqrt()).abs() < 1e-9);
        prop_assert!(after <= max + 1e-9);
        if before <= max {
            prop_assert!((after - before).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_tsv_roundtrip(alpha in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..5)) {
        let src: Vec<String> = ["x", "y", "</s>"].map(String::from).to_vec();
        let tgt: Vec<String> = (0..alpha.len()).map(|i| format!("t{i}")).collect();
        let tsv = emit_attention(&src, &tgt, &alpha).unwrap();
        prop_assert_eq!(parse_attention(&tsv).unwrap(), (src, tgt, alpha));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn beam_output_is_consistent(seed in any::<u64>(), src in prop::collection::vec(1usize..6, 1..5), k in 1usize..6) {
        let p = model(seed, 6, 5, 4);
        let source: Vec<Vec<usize>> = src.iter().map(|&t| vec![t]).chain([vec![EOS]]).collect();
        let cfg = BeamConfig { beam_size: k, max_len: 8, length_norm: 1.0 };
        let out = beam_search(std::slice::from_ref(&p), &source, &cfg).unwrap();
        prop_assert!(out.hypotheses.len() <= k);
        for w in out.hypotheses.windows(2) {
            prop_assert!(w[0].normalized_score(1.0) >= w[1].normalized_score(1.0));
        }
        for d in 1..=8 {
            prop_assert!(out.graph.nodes.iter().filter(|n| n.depth == d).count() <= k);
        }
        for h in &out.hypotheses {
            prop_assert!(h.tokens.len() <= 8);
            let teacher: f64 = if h.finished {
                p.forward_logprobs(&source, &h.tokens, None).unwrap().iter().sum()
            } else {
                h.step_logprobs.iter().sum()
            };
            prop_assert!((teacher - h.logprob).abs() < 1e-9);
        }
        if k == 1 {
            let greedy = greedy_decode(std::slice::from_ref(&p), &[source.as_slice()], 8).unwrap();
            prop_assert_eq!(out.best().output(), greedy[0].as_slice());
        }
    }

    #[test]
    fn f32_archive_is_within_single_precision(seed in any::<u64>(), d in 1usize..5) {
        let p = model(seed, 4, 5, d);
        let meta = ArchiveMetadata::new(p.config().clone());
        let (back, _) = decode_archive(&encode_archive(&p, &meta, Dtype::F32).unwrap()).unwrap();
        for (name, t) in p.tensors() {
            let u = back.get(name).unwrap();
            for (a, b) in t.data().iter().zip(u.data()) {
                prop_assert_eq!(*b, *a as f32 as f64);
            }
        }
    }
}
