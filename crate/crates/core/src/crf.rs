//! Linear-chain CRF over tag sequences.
//!
//! A path `y` over `T` positions scores
//! `start[y0] + sum_t emit[t, y_t] + sum_t trans[y_{t-1}, y_t] + end[y_{T-1}]`.
//! Everything is computed in log space.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::log_sum_exp;

/// Tag-to-tag transition scores plus start and end scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    /// `trans[[from, to]]`.
    pub trans: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

impl TransitionMatrix {
    pub fn zeros(num_tags: usize) -> Self {
        TransitionMatrix {
            trans: Array2::zeros((num_tags, num_tags)),
            start: Array1::zeros(num_tags),
            end: Array1::zeros(num_tags),
        }
    }

    pub fn view(&self) -> TransitionView<'_> {
        TransitionView {
            trans: self.trans.view(),
            start: self.start.view(),
            end: self.end.view(),
        }
    }
}

/// Borrowed transition scores.
#[derive(Debug, Clone, Copy)]
pub struct TransitionView<'a> {
    pub trans: ArrayView2<'a, f64>,
    pub start: ArrayView1<'a, f64>,
    pub end: ArrayView1<'a, f64>,
}

impl TransitionView<'_> {
    pub fn num_tags(&self) -> usize {
        self.start.len()
    }
}

/// A decoded tag path and its score.
#[derive(Debug, Clone, PartialEq)]
pub struct TagSequence {
    pub tags: Vec<usize>,
    pub score: f64,
}

/// Gradients of [`crf_nll`] with respect to every input.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfGrad {
    pub emissions: Array2<f64>,
    pub trans: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

fn check(e: ArrayView2<f64>, tr: TransitionView) -> Result<()> {
    let k = tr.num_tags();
    if e.nrows() == 0 {
        return Err(Error::Shape("emission matrix has no positions".into()));
    }
    if e.ncols() != k || tr.trans.dim() != (k, k) || tr.end.len() != k {
        return Err(Error::Shape(format!(
            "emissions {:?}, transitions {:?}, start {}, end {}",
            e.dim(),
            tr.trans.dim(),
            k,
            tr.end.len()
        )));
    }
    let finite = e
        .iter()
        .chain(tr.trans.iter())
        .chain(tr.start.iter())
        .chain(tr.end.iter())
        .all(|x| x.is_finite());
    if !finite {
        return Err(Error::InvalidArgument("CRF scores must be finite".into()));
    }
    Ok(())
}

/// Forward log-messages: `alpha[t, k]` is the log-sum of all prefixes
/// ending in tag `k` at position `t`.
fn forward_messages(e: ArrayView2<f64>, tr: TransitionView) -> Array2<f64> {
    let (t_len, k) = e.dim();
    let mut alpha = Array2::zeros((t_len, k));
    alpha.row_mut(0).assign(&(&tr.start + &e.row(0)));
    let mut buf = Array1::zeros(k);
    for t in 1..t_len {
        for to in 0..k {
            for from in 0..k {
                buf[from] = alpha[[t - 1, from]] + tr.trans[[from, to]];
            }
            alpha[[t, to]] = log_sum_exp(buf.view()) + e[[t, to]];
        }
    }
    alpha
}

/// Backward log-messages: `beta[t, k]` is the log-sum over suffixes after
/// position `t` given tag `k` at `t`, including the end score.
fn backward_messages(e: ArrayView2<f64>, tr: TransitionView) -> Array2<f64> {
    let (t_len, k) = e.dim();
    let mut beta = Array2::zeros((t_len, k));
    beta.row_mut(t_len - 1).assign(&tr.end);
    let mut buf = Array1::zeros(k);
    for t in (0..t_len - 1).rev() {
        for from in 0..k {
            for to in 0..k {
                buf[to] = tr.trans[[from, to]] + e[[t + 1, to]] + beta[[t + 1, to]];
            }
            beta[[t, from]] = log_sum_exp(buf.view());
        }
    }
    beta
}

fn final_log_partition(alpha: &Array2<f64>, tr: TransitionView) -> f64 {
    let last = alpha.row(alpha.nrows() - 1);
    log_sum_exp((&last + &tr.end).view())
}

/// Log of the sum over all `K^T` paths of `exp(score)`.
pub fn log_partition(e: ArrayView2<f64>, tr: TransitionView) -> Result<f64> {
    check(e, tr)?;
    Ok(final_log_partition(&forward_messages(e, tr), tr))
}

/// Unnormalized score of one path.
pub fn path_score(e: ArrayView2<f64>, tr: TransitionView, tags: &[usize]) -> Result<f64> {
    check(e, tr)?;
    if tags.len() != e.nrows() {
        return Err(Error::Shape(format!("{} tags for {} positions", tags.len(), e.nrows())));
    }
    let k = tr.num_tags();
    if let Some(&bad) = tags.iter().find(|&&t| t >= k) {
        return Err(Error::InvalidArgument(format!("tag index {bad} out of range for {k} tags")));
    }
    let mut s = tr.start[tags[0]] + tr.end[tags[tags.len() - 1]];
    for (t, &tag) in tags.iter().enumerate() {
        s += e[[t, tag]];
        if t > 0 {
            s += tr.trans[[tags[t - 1], tag]];
        }
    }
    Ok(s)
}

/// Highest-scoring path. Among equal scores the lowest tag index wins at
/// every backtracking step.
pub fn viterbi(e: ArrayView2<f64>, tr: TransitionView) -> Result<TagSequence> {
    check(e, tr)?;
    let (t_len, k) = e.dim();
    let mut score = Array2::<f64>::zeros((t_len, k));
    let mut back = Array2::<usize>::zeros((t_len, k));
    score.row_mut(0).assign(&(&tr.start + &e.row(0)));
    for t in 1..t_len {
        for to in 0..k {
            let mut best = 0;
            let mut best_score = score[[t - 1, 0]] + tr.trans[[0, to]];
            for from in 1..k {
                let s = score[[t - 1, from]] + tr.trans[[from, to]];
                if s > best_score {
                    best = from;
                    best_score = s;
                }
            }
            score[[t, to]] = best_score + e[[t, to]];
            back[[t, to]] = best;
        }
    }
    let mut last = 0;
    let mut best_score = score[[t_len - 1, 0]] + tr.end[0];
    for tag in 1..k {
        let s = score[[t_len - 1, tag]] + tr.end[tag];
        if s > best_score {
            last = tag;
            best_score = s;
        }
    }
    let mut tags = vec![0; t_len];
    tags[t_len - 1] = last;
    for t in (1..t_len).rev() {
        tags[t - 1] = back[[t, tags[t]]];
    }
    Ok(TagSequence {
        tags,
        score: best_score,
    })
}

/// Negative log-likelihood of `gold`: `log_partition - path_score(gold)`.
pub fn crf_nll(e: ArrayView2<f64>, tr: TransitionView, gold: &[usize]) -> Result<f64> {
    let gold_score = path_score(e, tr, gold)?;
    Ok(log_partition(e, tr)? - gold_score)
}

/// [`crf_nll`] together with its gradient, from forward-backward marginals.
pub fn crf_nll_with_grad(e: ArrayView2<f64>, tr: TransitionView, gold: &[usize]) -> Result<(f64, CrfGrad)> {
    let gold_score = path_score(e, tr, gold)?;
    let (t_len, k) = e.dim();
    let alpha = forward_messages(e, tr);
    let beta = backward_messages(e, tr);
    let log_z = final_log_partition(&alpha, tr);

    let mut d_emit = (&alpha + &beta).mapv(|v| (v - log_z).exp());
    let mut d_trans = Array2::zeros((k, k));
    for t in 1..t_len {
        for from in 0..k {
            for to in 0..k {
                d_trans[[from, to]] +=
                    (alpha[[t - 1, from]] + tr.trans[[from, to]] + e[[t, to]] + beta[[t, to]] - log_z).exp();
            }
        }
    }
    let mut d_start = d_emit.row(0).to_owned();
    let mut d_end = d_emit.row(t_len - 1).to_owned();

    for (t, &tag) in gold.iter().enumerate() {
        d_emit[[t, tag]] -= 1.0;
        if t > 0 {
            d_trans[[gold[t - 1], tag]] -= 1.0;
        }
    }
    d_start[gold[0]] -= 1.0;
    d_end[gold[t_len - 1]] -= 1.0;

    Ok((
        log_z - gold_score,
        CrfGrad {
            emissions: d_emit,
            trans: d_trans,
            start: d_start,
            end: d_end,
        },
    ))
}

/// Per-position tag marginals `P(y_t = k)`.
pub fn marginals(e: ArrayView2<f64>, tr: TransitionView) -> Result<Array2<f64>> {
    check(e, tr)?;
    let alpha = forward_messages(e, tr);
    let beta = backward_messages(e, tr);
    let log_z = final_log_partition(&alpha, tr);
    let mut m = &alpha + &beta;
    m.mapv_inplace(|v| (v - log_z).exp());
    debug_assert!(m.sum_axis(Axis(1)).iter().all(|s| (s - 1.0).abs() < 1e-6));
    Ok(m)
}
