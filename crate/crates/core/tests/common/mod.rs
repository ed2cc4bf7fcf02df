//! Independent oracles and toy fixtures shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slu_core::corpus::{Dataset, LabelSpace, Utterance, Vocabulary};
use slu_core::crf::{self, TransitionView};
use slu_core::embeddings::WordVectors;
use slu_core::lm::{train_bilm, BiLm, LmConfig};
use slu_core::metrics::EvalPair;
use slu_core::model::{InputLayer, SluConfig, SluModel};
use slu_core::nn::Params;
use slu_core::schedules::ScheduleConfig;
use slu_core::synthetic::{self, Domain};
use slu_core::train::TrainOptions;
use slu_core::transfer::{Condition, PipelineSpec};

// ---------------------------------------------------------------- CRF

/// A CRF instance: emissions `T x K`, transitions `K x K` (from, to),
/// start and end scores.
#[derive(Debug, Clone)]
pub struct CrfInstance {
    pub e: Array2<f64>,
    pub trans: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

impl CrfInstance {
    pub fn view(&self) -> TransitionView<'_> {
        TransitionView {
            trans: self.trans.view(),
            start: self.start.view(),
            end: self.end.view(),
        }
    }

    /// Random instance with `T <= max_t`, `K <= max_k`. Integer scores in
    /// a small range make exact ties common.
    pub fn random<R: Rng>(rng: &mut R, max_t: usize, max_k: usize, integer: bool) -> Self {
        let t = rng.gen_range(1..=max_t);
        let k = rng.gen_range(1..=max_k);
        let draw = |rng: &mut R| {
            if integer {
                rng.gen_range(-2..=2) as f64
            } else {
                rng.gen_range(-3.0..3.0)
            }
        };
        CrfInstance {
            e: Array2::from_shape_fn((t, k), |_| draw(rng)),
            trans: Array2::from_shape_fn((k, k), |_| draw(rng)),
            start: Array1::from_shape_fn(k, |_| draw(rng)),
            end: Array1::from_shape_fn(k, |_| draw(rng)),
        }
    }
}

/// Every tag path of length `t` over `k` tags, in lexicographic order.
pub fn all_paths(t: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..t {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..k).map(move |y| {
                    let mut q = p.clone();
                    q.push(y);
                    q
                })
            })
            .collect();
    }
    out
}

/// Path score by a plain scalar loop.
pub fn brute_score(inst: &CrfInstance, path: &[usize]) -> f64 {
    let mut s = inst.start[path[0]];
    for (t, &y) in path.iter().enumerate() {
        s += inst.e[[t, y]];
        if t > 0 {
            s += inst.trans[[path[t - 1], y]];
        }
    }
    s + inst.end[path[path.len() - 1]]
}

pub struct Enumerated {
    pub log_z: f64,
    pub scores: Vec<(Vec<usize>, f64)>,
    pub best_score: f64,
    /// The best path under the documented tie rule: lowest final tag, then
    /// lowest predecessor at every step going backwards.
    pub best_path: Vec<usize>,
    /// Number of paths attaining the best score.
    pub ties: usize,
}

pub fn enumerate(inst: &CrfInstance) -> Enumerated {
    let (t, k) = inst.e.dim();
    let scores: Vec<(Vec<usize>, f64)> = all_paths(t, k)
        .into_iter()
        .map(|p| {
            let s = brute_score(inst, &p);
            (p, s)
        })
        .collect();
    let best_score = scores.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
    let m = best_score;
    let log_z = m + scores.iter().map(|(_, s)| (s - m).exp()).sum::<f64>().ln();
    let tied: Vec<&Vec<usize>> = scores.iter().filter(|(_, s)| *s == best_score).map(|(p, _)| p).collect();
    let best_path = tied
        .iter()
        .min_by(|a, b| a.iter().rev().cmp(b.iter().rev()))
        .map(|p| (*p).clone())
        .unwrap();
    Enumerated {
        log_z,
        best_score,
        best_path,
        ties: tied.len(),
        scores,
    }
}

/// Worst deviations of the library CRF from enumeration over `n` random
/// instances.
#[derive(Debug, Default)]
pub struct CrfComparison {
    pub instances: usize,
    pub tie_instances: usize,
    pub log_z_err: f64,
    pub nll_err: f64,
    pub viterbi_score_err: f64,
    pub tie_score_err: f64,
    pub path_mismatches: usize,
    pub normalization_err: f64,
}

pub fn compare_crf(n: usize, seed: u64) -> CrfComparison {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = CrfComparison::default();
    for i in 0..n {
        let integer = i % 2 == 1;
        let inst = CrfInstance::random(&mut rng, 4, 4, integer);
        let oracle = enumerate(&inst);
        let tr = inst.view();
        let log_z = crf::log_partition(inst.e.view(), tr).unwrap();
        c.log_z_err = c.log_z_err.max((log_z - oracle.log_z).abs());

        let gold = &oracle.scores[rng.gen_range(0..oracle.scores.len())];
        let nll = crf::crf_nll(inst.e.view(), tr, &gold.0).unwrap();
        c.nll_err = c.nll_err.max((nll - (oracle.log_z - gold.1)).abs());

        let total: f64 = oracle.scores.iter().map(|(_, s)| (s - log_z).exp()).sum();
        c.normalization_err = c.normalization_err.max((total - 1.0).abs());

        let v = crf::viterbi(inst.e.view(), tr).unwrap();
        let err = (v.score - oracle.best_score).abs();
        if oracle.ties > 1 {
            c.tie_instances += 1;
            c.tie_score_err = c.tie_score_err.max(err);
        } else {
            c.viterbi_score_err = c.viterbi_score_err.max(err);
        }
        if v.tags != oracle.best_path {
            c.path_mismatches += 1;
        }
        c.instances += 1;
    }
    c
}

// ---------------------------------------------------------------- spans

const TAG_ALPHABET: [&str; 5] = ["O", "B-X", "I-X", "B-Y", "I-Y"];

/// Random tag sequence, deliberately including orphan `I-` tags.
pub fn random_tags<R: Rng>(rng: &mut R, len: usize) -> Vec<String> {
    (0..len).map(|_| TAG_ALPHABET[rng.gen_range(0..5)].to_string()).collect()
}

/// Orphan `I-X` (at the start, after `O`, or after another type) becomes `B-X`.
fn oracle_repair(tags: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(tags.len());
    for tag in tags {
        let fixed = match tag.strip_prefix("I-") {
            Some(ty) => {
                let continues = out
                    .last()
                    .and_then(|p| p.get(2..))
                    .is_some_and(|prev_ty| prev_ty == ty && out.last().unwrap() != "O");
                if continues {
                    tag.clone()
                } else {
                    format!("B-{ty}")
                }
            }
            None => tag.clone(),
        };
        out.push(fixed);
    }
    out
}

/// Spans found by testing every `(start, end, type)` triple against the
/// definition of a maximal `B-X (I-X)*` run.
pub fn oracle_spans(tags: &[String]) -> Vec<(usize, usize, String)> {
    let tags = oracle_repair(tags);
    let n = tags.len();
    let mut out = Vec::new();
    for ty in ["X", "Y"] {
        let b = format!("B-{ty}");
        let i_tag = format!("I-{ty}");
        for start in 0..n {
            for end in start..n {
                let opens = tags[start] == b;
                let inside = tags[start + 1..=end].iter().all(|t| *t == i_tag);
                let closed = end + 1 == n || tags[end + 1] != i_tag;
                if opens && inside && closed {
                    out.push((start, end, ty.to_string()));
                }
            }
        }
    }
    out
}

/// `(gold spans, predicted spans, matched spans)` over `pairs`.
pub fn oracle_span_counts(pairs: &[EvalPair]) -> (usize, usize, usize) {
    let (mut g, mut p, mut m) = (0, 0, 0);
    for pair in pairs {
        let gold = oracle_spans(&pair.gold_tags);
        let pred = oracle_spans(&pair.pred_tags);
        m += pred.iter().filter(|s| gold.contains(s)).count();
        g += gold.len();
        p += pred.len();
    }
    (g, p, m)
}

/// Harmonic mean of precision and recall with the zero conventions.
pub fn oracle_f1(g: usize, p: usize, m: usize) -> f64 {
    let prec = if p == 0 { 0.0 } else { m as f64 / p as f64 };
    let rec = if g == 0 { 0.0 } else { m as f64 / g as f64 };
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}

pub fn random_pairs<R: Rng>(rng: &mut R, n: usize) -> Vec<EvalPair> {
    let intents = ["a", "b", "c"];
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=7);
            let gold_tags = random_tags(rng, len);
            // Predictions are often close to gold so that matches occur.
            let pred_tags = if rng.gen_bool(0.4) {
                gold_tags.clone()
            } else {
                gold_tags
                    .iter()
                    .map(|t| if rng.gen_bool(0.3) { TAG_ALPHABET[rng.gen_range(0..5)].to_string() } else { t.clone() })
                    .collect()
            };
            EvalPair {
                gold_intent: intents[rng.gen_range(0..3)].into(),
                gold_tags,
                pred_intent: intents[rng.gen_range(0..3)].into(),
                pred_tags,
            }
        })
        .collect()
}

// ---------------------------------------------------------- t-test

/// Two-sided tail probability `P(|T| > t)` of Student's t with `df` degrees
/// of freedom, from the finite trigonometric series for integer `df`.
pub fn t_two_sided_p(t: f64, df: usize) -> f64 {
    let theta = (t.abs() / (df as f64).sqrt()).atan();
    let (s, c) = (theta.sin(), theta.cos());
    let inside = if df % 2 == 0 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in (2..df).step_by(2) {
            term *= c * c * (k - 1) as f64 / k as f64;
            sum += term;
        }
        s * sum
    } else if df == 1 {
        2.0 * theta / std::f64::consts::PI
    } else {
        let mut term = c;
        let mut sum = c;
        for k in (3..df).step_by(2) {
            term *= c * c * (k - 1) as f64 / k as f64;
            sum += term;
        }
        2.0 / std::f64::consts::PI * (theta + s * sum)
    };
    1.0 - inside
}

/// Paired t statistic computed by hand.
pub fn paired_t(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    mean / (var / n).sqrt()
}

// ---------------------------------------------------------- toy models

pub const TOY_WORDS: [&str; 16] = [
    "show", "flights", "from", "boston", "to", "denver", "play", "some", "jazz", "by", "adele", "what", "is", "the",
    "weather", "today",
];

/// Vocabulary of 20 entries: four specials plus [`TOY_WORDS`].
pub fn toy_vocab() -> Vocabulary {
    let words: Vec<String> = TOY_WORDS.iter().map(|w| w.to_string()).collect();
    Vocabulary::build(&[words], 1)
}

pub fn toy_space() -> LabelSpace {
    LabelSpace::new(["flight", "music", "weather"], ["city", "genre", "artist", "date"]).unwrap()
}

fn utt(tokens: &str, tags: &str, intent: &str) -> Utterance {
    Utterance::new(
        tokens.split(' ').map(String::from).collect(),
        tags.split(' ').map(String::from).collect(),
        intent,
    )
}

/// Two short utterances (T <= 5), one with an out-of-vocabulary word.
pub fn toy_utterances() -> Vec<Utterance> {
    vec![
        utt("flights from boston to denver", "O O B-city O B-city", "flight"),
        utt("play jazz by zappa", "O B-genre O B-artist", "music"),
    ]
}

/// Ten memorizable utterances over three intents.
pub fn memorization_set() -> Vec<Utterance> {
    vec![
        utt("show flights from boston to denver", "O O O B-city O B-city", "flight"),
        utt("flights to boston", "O O B-city", "flight"),
        utt("show flights from denver", "O O O B-city", "flight"),
        utt("flights from denver to boston today", "O O B-city O B-city B-date", "flight"),
        utt("play some jazz", "O O B-genre", "music"),
        utt("play adele", "O B-artist", "music"),
        utt("play jazz by adele", "O B-genre O B-artist", "music"),
        utt("what is the weather today", "O O O O B-date", "weather"),
        utt("weather in boston", "O O B-city", "weather"),
        utt("what is the weather in denver today", "O O O O O B-city B-date", "weather"),
    ]
}

pub fn toy_config() -> SluConfig {
    SluConfig {
        hidden: 8,
        dropout: 0.0,
        ..SluConfig::default()
    }
}

/// LM whose input width equals its state width (`2 * hidden`).
pub fn toy_lm(layers: usize, hidden: usize, seed: u64) -> BiLm {
    let half = hidden / 2;
    let cfg = LmConfig {
        layers,
        hidden,
        word_dim: hidden,
        char_dim: 4,
        char_cnn: vec![(1, half), (2, hidden - half)],
        batch_size: 4,
        epochs: 1,
        dropout: 0.0,
        seed,
        ..LmConfig::elmol()
    };
    BiLm::new(cfg, toy_vocab()).unwrap()
}

/// Moves every parameter away from its initial value (CRF and mixing start
/// at symmetric points where some gradients vanish).
pub fn jitter(model: &mut dyn Params, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.visit_mut("", &mut |_, p| {
        p.value.mapv_inplace(|v| v + rng.gen_range(-0.3..0.3));
    });
}

pub fn toy_no_ut(seed: u64) -> SluModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = InputLayer::trainable(toy_vocab(), 6, &mut rng);
    let mut m = SluModel::new(toy_space(), input, toy_config(), seed).unwrap();
    jitter(&mut m, seed + 1);
    m
}

pub fn toy_pretrained(seed: u64) -> SluModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors = WordVectors {
        dim: 5,
        vectors: TOY_WORDS[..10]
            .iter()
            .map(|w| (w.to_string(), (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect(),
    };
    let input = InputLayer::pretrained(toy_vocab(), &vectors, 3, &mut rng);
    let mut m = SluModel::new(toy_space(), input, toy_config(), seed).unwrap();
    jitter(&mut m, seed + 1);
    m
}

pub fn toy_elmo(seed: u64) -> SluModel {
    let lm = toy_lm(2, 4, seed);
    let mut m = SluModel::new(toy_space(), InputLayer::Elmo { lm: Arc::new(lm) }, toy_config(), seed).unwrap();
    jitter(&mut m, seed + 1);
    m
}

pub fn toy_elmol(seed: u64) -> SluModel {
    let lm = toy_lm(1, 8, seed);
    let bundle = lm.export_shared_layer().unwrap();
    let mut m = SluModel::from_shared_layer(toy_space(), &bundle, toy_config(), seed).unwrap();
    jitter(&mut m, seed + 1);
    m
}

// ---------------------------------------------------- finite differences

/// Worst relative error `|a - f| / max(|a|, |f|, 1e-4)` per parameter,
/// comparing analytic gradients with central differences of `loss`.
pub fn gradient_check<M, L, G>(model: &M, loss: L, analytic: G, step: f64) -> Vec<(String, f64)>
where
    M: Params + Clone,
    L: Fn(&M) -> f64,
    G: Fn(&mut M),
{
    let mut with_grad = model.clone();
    with_grad.zero_grad();
    analytic(&mut with_grad);
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    with_grad.visit("", &mut |name, p| grads.push((name.to_string(), p.grad.iter().copied().collect())));

    let mut out = Vec::new();
    for (name, g) in grads {
        let mut worst: f64 = 0.0;
        for (idx, &a) in g.iter().enumerate() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.visit_mut("", &mut |n, p| {
                    if n == name {
                        *p.value.iter_mut().nth(idx).unwrap() += delta;
                    }
                });
                loss(&m)
            };
            let f = (eval(step) - eval(-step)) / (2.0 * step);
            let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-4);
            worst = worst.max(rel);
        }
        out.push((name, worst));
    }
    out
}

/// Summed joint loss of `utts` under `model` in evaluation mode.
pub fn joint_loss_sum(model: &SluModel, utts: &[Utterance]) -> f64 {
    utts.iter()
        .map(|u| {
            let trace = model.forward(&u.tokens).unwrap();
            model.joint_loss(&trace, &u.intent, &u.bio_tags).unwrap().total()
        })
        .sum()
}

/// Gradient check of the joint loss for `model` on `utts`.
pub fn joint_loss_check(model: &SluModel, utts: &[Utterance]) -> Vec<(String, f64)> {
    gradient_check(
        model,
        |m| joint_loss_sum(m, utts),
        |m| {
            for u in utts {
                m.accumulate_gradients::<ChaCha8Rng>(u, 1.0, None).unwrap();
            }
        },
        1e-5,
    )
}

// ------------------------------------------------- synthetic transfer

/// Small assistant (source) and travel (target) datasets.
pub fn transfer_datasets() -> (Arc<Dataset>, Arc<Dataset>) {
    let source = synthetic::dataset(Domain::Assistant, 40, 12, 12, 11).unwrap();
    let target = synthetic::dataset(Domain::Travel, 30, 12, 16, 12).unwrap();
    (Arc::new(source), Arc::new(target))
}

/// Small LM briefly trained on the pooled text of both datasets.
pub fn transfer_lm(layers: usize) -> Arc<BiLm> {
    let (source, target) = transfer_datasets();
    let text = synthetic::pooled_text(&[&source, &target]);
    let cfg = LmConfig {
        layers,
        hidden: 8,
        word_dim: 8,
        char_dim: 4,
        char_cnn: vec![(1, 4), (2, 4)],
        batch_size: 8,
        epochs: 2,
        lr: 0.01,
        dropout: 0.0,
        seed: 3,
        ..LmConfig::elmol()
    };
    Arc::new(train_bilm(&text, &cfg, &text, None).unwrap().best)
}

/// Pipeline spec over the synthetic transfer datasets with the full
/// unfreezing, discriminative and triangular schedule on both stages.
pub fn transfer_spec(condition: Condition, lm: Option<Arc<BiLm>>, seed: u64) -> PipelineSpec {
    let (source, target) = transfer_datasets();
    let schedule = ScheduleConfig {
        max_epochs: 4,
        patience: 0,
        ..ScheduleConfig::full(0.01, 1, 0.01)
    };
    PipelineSpec {
        condition,
        target,
        source: Some(source),
        lm,
        word_vectors: None,
        slu: SluConfig {
            hidden: 8,
            dropout: 0.1,
            no_ut_dim: 12,
            ..SluConfig::default()
        },
        schedule: schedule.clone(),
        source_schedule: schedule,
        train: TrainOptions {
            batch_size: 8,
            ..TrainOptions::default()
        },
        seed,
    }
}

/// Slanted triangular rate expanded by hand from its definition.
pub fn hand_tlr(step: usize, total: usize, peak: f64, ratio: f64, warm: f64) -> f64 {
    let low = peak / ratio;
    let cut = ((total as f64 * warm) as usize).max(1);
    if step <= cut {
        low + (peak - low) * (step as f64 / cut as f64)
    } else {
        low + (peak - low) * ((total - step) as f64 / (total - cut) as f64)
    }
}
