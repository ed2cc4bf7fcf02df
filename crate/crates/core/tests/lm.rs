//! Bidirectional language model behavior against count-based oracles.

mod common;

use std::collections::HashMap;

use common::*;
use slu_core::corpus::{UnlabeledCorpus, Vocabulary};
use slu_core::lm::{train_bilm, BiLm, LmConfig};
use slu_core::model::SluModel;
use slu_core::nn::Params;

fn corpus(lines: &[&str]) -> UnlabeledCorpus {
    UnlabeledCorpus::from_sentences(lines.iter().map(|l| l.split_whitespace().map(String::from).collect()))
}

fn small_config(hidden: usize, epochs: usize) -> LmConfig {
    LmConfig {
        layers: 1,
        hidden,
        word_dim: hidden,
        char_dim: 4,
        char_cnn: vec![(1, hidden / 2), (2, hidden - hidden / 2)],
        batch_size: 3,
        epochs,
        lr: 0.02,
        dropout: 0.0,
        seed: 2,
        ..LmConfig::elmol()
    }
}

/// Pooled two-direction perplexity of maximum-likelihood bigram models
/// fitted to `text` and scored on `text`.
fn bigram_perplexity(text: &UnlabeledCorpus) -> f64 {
    let framed: Vec<Vec<&str>> = text
        .sentences
        .iter()
        .map(|s| std::iter::once("<s>").chain(s.iter().map(String::as_str)).chain(["</s>"]).collect())
        .collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for backward in [false, true] {
        let mut pair: HashMap<(&str, &str), f64> = HashMap::new();
        let mut ctx: HashMap<&str, f64> = HashMap::new();
        for s in &framed {
            for w in s.windows(2) {
                let (c, t) = if backward { (w[1], w[0]) } else { (w[0], w[1]) };
                *pair.entry((c, t)).or_default() += 1.0;
                *ctx.entry(c).or_default() += 1.0;
            }
        }
        for s in &framed {
            for w in s.windows(2) {
                let (c, t) = if backward { (w[1], w[0]) } else { (w[0], w[1]) };
                total -= (pair[&(c, t)] / ctx[c]).ln();
                n += 1;
            }
        }
    }
    (total / n as f64).exp()
}

#[test]
fn untrained_perplexity_equals_vocabulary_size() {
    let text = corpus(&["play some jazz", "what is the weather", "book a table for two"]);
    let lm = BiLm::new(small_config(8, 1), Vocabulary::from_corpus(&text, 1)).unwrap();
    let report = lm.perplexity(&text, "toy").unwrap();
    let v = lm.vocab.len() as f64;
    assert!((report.perplexity - v).abs() / v < 0.01, "{} vs {v}", report.perplexity);
    assert_eq!(report.token_count, 3 + 4 + 5 + 3);
}

#[test]
fn trained_lm_reaches_the_bigram_bound_on_its_training_text() {
    // Ambiguous bigrams ("the" -> cat/dog, "cat" -> sat/ran) that a model
    // with longer context can resolve.
    let text = corpus(&["the cat sat", "the dog sat", "a cat ran"]);
    let oracle = bigram_perplexity(&text);
    let lm = BiLm::new(small_config(16, 1), Vocabulary::from_corpus(&text, 1)).unwrap();
    let untrained = lm.perplexity(&text, "toy").unwrap().perplexity;
    let out = train_bilm(&text, &small_config(16, 150), &text, None).unwrap();
    let trained = out.best.perplexity(&text, "toy").unwrap().perplexity;
    assert!(oracle < untrained / 2.0, "oracle {oracle} untrained {untrained}");
    assert!(trained <= oracle * 1.05, "trained {trained} bigram bound {oracle}");
    let history: Vec<usize> = out.history.iter().map(|e| e.epoch).collect();
    assert_eq!(history, (0..=150).collect::<Vec<_>>());
}

#[test]
fn states_are_causal_per_direction() {
    let lm = toy_lm(2, 6, 3);
    let base = ["show", "flights", "to", "denver", "today"];
    let a = lm.contextual_states(&base);
    let h = lm.hidden();
    assert_eq!(a.len(), 2);
    for t in 0..base.len() {
        // Change every token after t: forward halves up to t are unchanged.
        let mut later = base;
        for w in later.iter_mut().skip(t + 1) {
            *w = "jazz";
        }
        let b = lm.contextual_states(&later);
        // Change every token before t: backward halves from t on are unchanged.
        let mut earlier = base;
        for w in earlier.iter_mut().take(t) {
            *w = "adele";
        }
        let c = lm.contextual_states(&earlier);
        for layer in 0..2 {
            for i in 0..=t {
                assert_eq!(a[layer].row(i).slice(ndarray::s![..h]), b[layer].row(i).slice(ndarray::s![..h]));
            }
            for i in t..base.len() {
                assert_eq!(a[layer].row(i).slice(ndarray::s![h..]), c[layer].row(i).slice(ndarray::s![h..]));
            }
        }
    }
    assert_eq!(a, lm.contextual_states(&base));
}

#[test]
fn elmol_shared_states_equal_the_lm_before_fine_tuning() {
    let lm = toy_lm(1, 8, 4);
    let bundle = lm.export_shared_layer().unwrap();
    let model = SluModel::from_shared_layer(toy_space(), &bundle, toy_config(), 5).unwrap();
    for u in toy_utterances().iter().chain(&memorization_set()) {
        let trace = model.forward(&u.tokens).unwrap();
        let states = &lm.contextual_states(&u.tokens)[0];
        assert_eq!(trace.shared.dim(), (u.len(), 16));
        let diff = (&trace.shared - states).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b));
        assert!(diff < 1e-12, "{diff}");
    }
    // The shared layer starts as an exact copy of the LM's recurrent weights.
    let mut lm_params = Vec::new();
    bundle.bilstm.visit("", &mut |n, p| lm_params.push((n.to_string(), p.value.clone())));
    let mut shared = Vec::new();
    model.shared.visit("", &mut |n, p| shared.push((n.to_string(), p.value.clone())));
    assert_eq!(lm_params, shared);
}

#[test]
fn export_is_refused_for_deep_models() {
    assert!(toy_lm(2, 4, 1).export_shared_layer().is_err());
    let bundle = toy_lm(1, 4, 1).export_shared_layer().unwrap();
    assert_eq!(bundle.output_dim(), 8);
}

#[test]
fn checkpoint_and_resume_are_exact() {
    let text = corpus(&["play some jazz", "play adele", "what is the weather", "weather in boston"]);
    let cfg = small_config(8, 3);
    let out = train_bilm(&text, &cfg, &text, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lm.ckpt");
    out.best.save(&path).unwrap();
    let back = BiLm::load(&path).unwrap();
    assert_eq!(back, out.best);
    assert_eq!(back.perplexity(&text, "t").unwrap(), out.best.perplexity(&text, "t").unwrap());
    let resumed = train_bilm(&text, &LmConfig { epochs: 2, ..cfg }, &text, Some(back)).unwrap();
    let epochs: Vec<usize> = resumed.history.iter().map(|e| e.epoch).collect();
    assert_eq!(epochs, [0, 1, 2, 3, 4, 5]);
}
