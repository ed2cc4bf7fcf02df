//! Library numerics against independent brute-force and closed-form oracles.

mod common;

use common::*;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slu_core::crf::{self, TransitionView};
use slu_core::embeddings::{elmo_mix, elmol_mix, MixingWeights};
use slu_core::metrics::{self, evaluate, paired_significance, EvalPair};

fn zero_view(k: usize) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    (Array2::zeros((k, k)), Array1::zeros(k), Array1::zeros(k))
}

#[test]
fn crf_matches_path_enumeration() {
    let c = compare_crf(500, 11);
    assert!(c.log_z_err < 1e-8, "{c:?}");
    assert!(c.nll_err < 1e-8, "{c:?}");
    assert!(c.viterbi_score_err < 1e-8, "{c:?}");
    assert!(c.tie_score_err < 1e-6, "{c:?}");
    assert!(c.normalization_err < 1e-6, "{c:?}");
    assert_eq!(c.path_mismatches, 0, "{c:?}");
    assert!(c.tie_instances > 20, "integer instances should produce ties: {c:?}");
}

#[test]
fn crf_small_identities() {
    let (tr, st, en) = zero_view(2);
    let view = TransitionView {
        trans: tr.view(),
        start: st.view(),
        end: en.view(),
    };
    let e = array![[1.5, -0.5]];
    let expected = (1.5f64.exp() + (-0.5f64).exp()).ln();
    assert!((crf::log_partition(e.view(), view).unwrap() - expected).abs() < 1e-12);

    let e = array![[5.0, 3.0]];
    let v = crf::viterbi(e.view(), view).unwrap();
    assert_eq!((v.tags, v.score), (vec![0], 5.0));

    let z = Array2::zeros((2, 2));
    assert!((crf::crf_nll(z.view(), view, &[1, 0]).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);

    let (tr, st, en) = zero_view(3);
    let view = TransitionView {
        trans: tr.view(),
        start: st.view(),
        end: en.view(),
    };
    let z = Array2::zeros((4, 3));
    assert!((crf::log_partition(z.view(), view).unwrap() - 4.0 * 3f64.ln()).abs() < 1e-12);
    assert_eq!(crf::viterbi(z.view(), view).unwrap().tags, vec![0, 0, 0, 0]);

    // Strongly peaked scores on the gold path give a near-zero loss.
    let peaked = array![[50.0, 0.0, 0.0], [0.0, 50.0, 0.0], [0.0, 0.0, 50.0]];
    assert!(crf::crf_nll(peaked.view(), view, &[0, 1, 2]).unwrap() < 1e-12);
}

#[test]
fn crf_rejects_bad_input() {
    let (tr, st, en) = zero_view(2);
    let view = TransitionView {
        trans: tr.view(),
        start: st.view(),
        end: en.view(),
    };
    let e = array![[1.0, f64::NAN]];
    assert!(crf::log_partition(e.view(), view).is_err());
    let e = array![[1.0, 2.0]];
    assert!(crf::crf_nll(e.view(), view, &[2]).is_err());
    let e = array![[1.0, 2.0, 3.0]];
    assert!(crf::viterbi(e.view(), view).is_err());
}

#[test]
fn crf_is_stable_for_long_sequences_with_large_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = 5;
    let e = Array2::from_shape_fn((128, k), |_| rng.gen_range(-50.0..50.0));
    let tr = Array2::from_shape_fn((k, k), |_| rng.gen_range(-50.0..50.0));
    let (st, en) = (Array1::zeros(k), Array1::zeros(k));
    let view = TransitionView {
        trans: tr.view(),
        start: st.view(),
        end: en.view(),
    };
    let z = crf::log_partition(e.view(), view).unwrap();
    let v = crf::viterbi(e.view(), view).unwrap();
    assert!(z.is_finite() && v.score <= z + 1e-9);
}

#[test]
fn crf_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    for _ in 0..50 {
        let inst = CrfInstance::random(&mut rng, 4, 4, false);
        let (t, k) = inst.e.dim();
        let gold: Vec<usize> = (0..t).map(|_| rng.gen_range(0..k)).collect();
        let (_, g) = crf::crf_nll_with_grad(inst.e.view(), inst.view(), &gold).unwrap();
        let nll = |i: &CrfInstance| crf::crf_nll(i.e.view(), i.view(), &gold).unwrap();
        let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-4);
        let mut worst: f64 = 0.0;
        for idx in 0..t * k {
            let (r, c) = (idx / k, idx % k);
            let mut p = inst.clone();
            p.e[[r, c]] += h;
            let mut m = inst.clone();
            m.e[[r, c]] -= h;
            worst = worst.max(rel(g.emissions[[r, c]], (nll(&p) - nll(&m)) / (2.0 * h)));
        }
        for idx in 0..k * k {
            let (r, c) = (idx / k, idx % k);
            let mut p = inst.clone();
            p.trans[[r, c]] += h;
            let mut m = inst.clone();
            m.trans[[r, c]] -= h;
            worst = worst.max(rel(g.trans[[r, c]], (nll(&p) - nll(&m)) / (2.0 * h)));
        }
        for j in 0..k {
            let mut p = inst.clone();
            p.start[j] += h;
            let mut m = inst.clone();
            m.start[j] -= h;
            worst = worst.max(rel(g.start[j], (nll(&p) - nll(&m)) / (2.0 * h)));
            let mut p = inst.clone();
            p.end[j] += h;
            let mut m = inst.clone();
            m.end[j] -= h;
            worst = worst.max(rel(g.end[j], (nll(&p) - nll(&m)) / (2.0 * h)));
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }
}

proptest! {
    #[test]
    fn crf_invariants(seed in any::<u64>(), shift in -10.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = CrfInstance::random(&mut rng, 4, 4, false);
        let z = crf::log_partition(inst.e.view(), inst.view()).unwrap();
        let v = crf::viterbi(inst.e.view(), inst.view()).unwrap();
        prop_assert!(v.score <= z + 1e-12);
        let gold = v.tags.clone();
        prop_assert!(crf::crf_nll(inst.e.view(), inst.view(), &gold).unwrap() >= -1e-9);

        let pos = rng.gen_range(0..inst.e.nrows());
        let mut shifted = inst.clone();
        shifted.e.row_mut(pos).mapv_inplace(|x| x + shift);
        let z2 = crf::log_partition(shifted.e.view(), shifted.view()).unwrap();
        prop_assert!((z2 - z - shift).abs() < 1e-9);
        prop_assert_eq!(crf::viterbi(shifted.e.view(), shifted.view()).unwrap().tags, v.tags);

        let m = crf::marginals(inst.e.view(), inst.view()).unwrap();
        for row in m.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn entity_f1_matches_span_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=4);
        let pairs = random_pairs(&mut rng, n);
        let report = evaluate(&pairs).unwrap();
        let (g, p, m) = oracle_span_counts(&pairs);
        assert_eq!(
            (report.counts.gold_spans, report.counts.predicted_spans, report.counts.matched_spans),
            (g, p, m),
            "{pairs:?}"
        );
        assert_eq!(report.ef1, oracle_f1(g, p, m));
        assert_eq!(metrics::entity_f1(&pairs).unwrap(), report.ef1);

        let n = pairs.len() as f64;
        let ica = pairs.iter().filter(|q| q.gold_intent == q.pred_intent).count() as f64 / n;
        let wrong = |q: &EvalPair| q.gold_intent != q.pred_intent || (0..q.gold_tags.len()).any(|i| q.gold_tags[i] != q.pred_tags[i]);
        let ser = pairs.iter().filter(|q| wrong(q)).count() as f64 / n;
        assert_eq!(report.ica, ica);
        assert_eq!(report.ser, ser);
        assert!(report.ser >= 1.0 - report.ica - 1e-12);
        assert!(report.counts.sentence_errors >= report.counts.utterances - report.counts.intent_correct);
    }
}

#[test]
fn metric_examples() {
    let pair = |g: &str, p: &str| EvalPair {
        gold_intent: "i".into(),
        gold_tags: g.split(' ').map(String::from).collect(),
        pred_intent: "i".into(),
        pred_tags: p.split(' ').map(String::from).collect(),
    };
    let r = evaluate(&[pair("B-X I-X", "B-X O")]).unwrap();
    assert_eq!((r.counts.matched_spans, r.precision, r.recall, r.ef1), (0, 0.0, 0.0, 0.0));
    let r = evaluate(&[pair("B-X O B-Y", "B-X O B-X")]).unwrap();
    assert_eq!((r.precision, r.recall, r.ef1), (0.5, 0.5, 0.5));

    let mut four = vec![pair("B-X O", "B-X O"); 4];
    assert_eq!(evaluate(&four).unwrap().ser, 0.0);
    four[2].pred_tags[1] = "B-X".into();
    assert_eq!(evaluate(&four).unwrap().ser, 0.25);
    four[2].pred_intent = "j".into();
    let r = evaluate(&four).unwrap();
    assert_eq!((r.ser, r.ica), (0.25, 0.75));
    assert!(evaluate(&[]).is_err());
    assert!(evaluate(&[pair("O O", "O")]).is_err());
}

proptest! {
    #[test]
    fn entity_f1_is_permutation_invariant(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = random_pairs(&mut rng, n);
        let mut shuffled = pairs.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = evaluate(&pairs).unwrap();
        let b = evaluate(&shuffled).unwrap();
        prop_assert_eq!(a.ef1, b.ef1);
        prop_assert!(a.ser >= 1.0 - a.ica - 1e-12);
    }
}

#[test]
fn paired_t_test_matches_closed_form() {
    let a = [0.182, 0.175, 0.190, 0.171, 0.186];
    let b = [0.151, 0.149, 0.158, 0.150, 0.139];
    let s = paired_significance(&a, &b).unwrap();
    let t = paired_t(&a, &b);
    assert!((s.t - t).abs() < 1e-9);
    assert_eq!(s.df, 4);
    assert!((s.p_value - t_two_sided_p(t, 4)).abs() < 1e-3);
    assert!(s.significant);

    // Table value: the two-sided 5% critical point of t with 4 df is 2.776.
    assert!((t_two_sided_p(2.776, 4) - 0.05).abs() < 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for df in [1usize, 2, 3, 4, 7] {
        let n = df + 1;
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = paired_significance(&a, &b).unwrap();
        assert!((s.p_value - t_two_sided_p(paired_t(&a, &b), df)).abs() < 1e-6, "df {df}");
    }

    let same = paired_significance(&a, &a).unwrap();
    assert_eq!((same.p_value, same.significant), (1.0, false));
    let shifted: Vec<f64> = b.iter().enumerate().map(|(i, x)| x + 10.0 + 1e-6 * i as f64).collect();
    assert!(paired_significance(&shifted, &b).unwrap().significant);
    assert!(paired_significance(&a[..1], &b[..1]).is_err());
}

#[test]
fn mixing_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for layers in 1..=3 {
        for _ in 0..50 {
            let d = rng.gen_range(1..12);
            let x = Array1::from_shape_fn(d, |_| rng.gen_range(-2.0..2.0));
            let hs: Vec<Array1<f64>> = (0..layers)
                .map(|_| Array1::from_shape_fn(d, |_| rng.gen_range(-2.0..2.0)))
                .collect();
            let w = MixingWeights {
                gamma: rng.gen_range(-2.0..2.0),
                s: (0..=layers).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            };
            let views: Vec<_> = hs.iter().map(|h| h.view()).collect();
            let got = elmo_mix(x.view(), &views, &w).unwrap();
            // Softmax of s by hand, then the weighted sum entry by entry.
            let exps: Vec<f64> = w.s.iter().map(|v| v.exp()).collect();
            let total: f64 = exps.iter().sum();
            for i in 0..d {
                let mut acc = exps[0] / total * x[i];
                for (l, h) in hs.iter().enumerate() {
                    acc += exps[l + 1] / total * h[i];
                }
                assert!((got[i] - w.gamma * acc).abs() < 1e-6);
            }
            if layers == 1 {
                assert_eq!(elmol_mix(x.view(), hs[0].view(), &w).unwrap(), got);
            }
            let norm = w.normalized();
            assert!((norm.iter().sum::<f64>() - 1.0).abs() < 1e-6 && norm.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn mixing_examples() {
    let x = array![1.0, 1.0];
    let h = array![3.0, 3.0];
    let half = MixingWeights { gamma: 2.0, s: vec![0.0, 0.0] };
    assert_eq!(elmo_mix(x.view(), &[h.view()], &half).unwrap(), array![4.0, 4.0]);
    let identity = MixingWeights { gamma: 1.0, s: vec![0.0, -1e4] };
    assert_eq!(elmol_mix(x.view(), h.view(), &identity).unwrap(), x);
    assert!(elmo_mix(x.view(), &[array![1.0].view()], &half).is_err());
    assert!(elmol_mix(x.view(), h.view(), &MixingWeights::uniform(2)).is_err());
}

proptest! {
    #[test]
    fn mixing_is_linear(alpha in -5.0f64..5.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array1::from_shape_fn(6, |_| rng.gen_range(-2.0..2.0));
        let h = Array1::from_shape_fn(6, |_| rng.gen_range(-2.0..2.0));
        let w = MixingWeights { gamma: rng.gen_range(-2.0..2.0), s: vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)] };
        let base = elmol_mix(x.view(), h.view(), &w).unwrap();
        let scaled = elmol_mix((&x * alpha).view(), (&h * alpha).view(), &w).unwrap();
        for (a, b) in scaled.iter().zip(base.iter()) {
            prop_assert!((a - alpha * b).abs() < 1e-9);
        }
    }
}
