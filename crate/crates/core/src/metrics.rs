//! Intent accuracy, exact-span entity F1, sentence error rate and the
//! paired t-test used to compare conditions across seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{parse_tag, repair_bio, Bio};
use crate::error::{Error, Result};

/// Gold and predicted labels of one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub gold_intent: String,
    pub gold_tags: Vec<String>,
    pub pred_intent: String,
    pub pred_tags: Vec<String>,
}

impl EvalPair {
    fn check(&self) -> Result<()> {
        if self.gold_tags.len() != self.pred_tags.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gold tags but {} predicted tags",
                self.gold_tags.len(),
                self.pred_tags.len()
            )));
        }
        Ok(())
    }

    pub fn intent_correct(&self) -> bool {
        self.gold_intent == self.pred_intent
    }

    /// Wrong intent or at least one wrong tag.
    pub fn is_error(&self) -> bool {
        !self.intent_correct() || self.gold_tags != self.pred_tags
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub utterances: usize,
    pub intent_correct: usize,
    pub sentence_errors: usize,
    pub gold_spans: usize,
    pub predicted_spans: usize,
    pub matched_spans: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ica: f64,
    pub ef1: f64,
    pub ser: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: Counts,
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ICA {:.2}  EF1 {:.2}  SER {:.2}  (P {:.2} R {:.2}; {} utterances, {} gold / {} predicted / {} matched spans)",
            100.0 * self.ica,
            100.0 * self.ef1,
            100.0 * self.ser,
            100.0 * self.precision,
            100.0 * self.recall,
            self.counts.utterances,
            self.counts.gold_spans,
            self.counts.predicted_spans,
            self.counts.matched_spans
        )
    }
}

/// A typed entity span over token positions `[start, end]` inclusive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Maximal `B-X (I-X)*` runs, after turning orphan `I-X` into `B-X`.
pub fn spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut tags: Vec<String> = tags.iter().map(|t| t.as_ref().to_string()).collect();
    repair_bio(&mut tags);
    let mut out = Vec::new();
    let mut open: Option<Span> = None;
    for (i, tag) in tags.iter().enumerate() {
        match parse_tag(tag) {
            Some(Bio::Inside(ty)) if open.as_ref().is_some_and(|s| s.label == ty) => {
                open.as_mut().unwrap().end = i;
            }
            Some(Bio::Begin(ty)) | Some(Bio::Inside(ty)) => {
                out.extend(open.take());
                open = Some(Span {
                    start: i,
                    end: i,
                    label: ty.to_string(),
                });
            }
            _ => out.extend(open.take()),
        }
    }
    out.extend(open);
    out
}

fn non_empty(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no utterances to evaluate".into()));
    }
    pairs.iter().try_for_each(EvalPair::check)
}

pub fn intent_accuracy(pairs: &[EvalPair]) -> Result<f64> {
    non_empty(pairs)?;
    Ok(pairs.iter().filter(|p| p.intent_correct()).count() as f64 / pairs.len() as f64)
}

pub fn sentence_error_rate(pairs: &[EvalPair]) -> Result<f64> {
    non_empty(pairs)?;
    Ok(pairs.iter().filter(|p| p.is_error()).count() as f64 / pairs.len() as f64)
}

/// Micro-averaged exact-span F1 with `(precision, recall, f1)` and the span
/// counts `(gold, predicted, matched)`.
fn span_scores(pairs: &[EvalPair]) -> Result<((f64, f64, f64), (usize, usize, usize))> {
    let (mut gold, mut pred, mut matched) = (0, 0, 0);
    for p in pairs {
        p.check()?;
        let g = spans(&p.gold_tags);
        let q = spans(&p.pred_tags);
        matched += q.iter().filter(|s| g.contains(s)).count();
        gold += g.len();
        pred += q.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(matched, pred);
    let recall = ratio(matched, gold);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    if gold == 0 && pred == 0 && !pairs.is_empty() {
        warn!("no gold or predicted entity spans; entity F1 reported as 0");
    }
    Ok(((precision, recall, f1), (gold, pred, matched)))
}

pub fn entity_f1(pairs: &[EvalPair]) -> Result<f64> {
    Ok(span_scores(pairs)?.0 .2)
}

pub fn evaluate(pairs: &[EvalPair]) -> Result<MetricReport> {
    non_empty(pairs)?;
    let ((precision, recall, ef1), (gold, pred, matched)) = span_scores(pairs)?;
    let intent_correct = pairs.iter().filter(|p| p.intent_correct()).count();
    let sentence_errors = pairs.iter().filter(|p| p.is_error()).count();
    let n = pairs.len();
    Ok(MetricReport {
        ica: intent_correct as f64 / n as f64,
        ef1,
        ser: sentence_errors as f64 / n as f64,
        precision,
        recall,
        counts: Counts {
            utterances: n,
            intent_correct,
            sentence_errors,
            gold_spans: gold,
            predicted_spans: pred,
            matched_spans: matched,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub mean_difference: f64,
    pub t: f64,
    pub df: usize,
    pub p_value: f64,
    pub significant: bool,
}

/// Two-sided paired t-test on `a[i] - b[i]`; significant when `p < 0.05`.
/// Zero variance of the differences gives `p = 1` for a zero mean
/// difference and `p = 0` otherwise.
pub fn paired_significance(a: &[f64], b: &[f64]) -> Result<Significance> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "paired t-test needs two equally long lists of at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    let (t, p) = if var == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / (var / n as f64).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
        (t, 2.0 * (1.0 - dist.cdf(t.abs())))
    };
    Ok(Significance {
        mean_difference: mean,
        t,
        df,
        p_value: p,
        significant: p < 0.05,
    })
}

/// Renders predictions as CoNLL-style blocks:
/// `# intent: <gold>`, `# predicted: <pred>`, then `token\tgold\tpred` lines.
pub fn format_predictions<S: AsRef<str>>(items: &[(Vec<S>, EvalPair)]) -> String {
    let mut out = String::new();
    for (tokens, p) in items {
        let _ = writeln!(out, "# intent: {}", p.gold_intent);
        let _ = writeln!(out, "# predicted: {}", p.pred_intent);
        for ((tok, g), q) in tokens.iter().zip(&p.gold_tags).zip(&p.pred_tags) {
            let _ = writeln!(out, "{}\t{g}\t{q}", tok.as_ref());
        }
        out.push('\n');
    }
    out
}

pub fn write_predictions<S: AsRef<str>>(path: &Path, items: &[(Vec<S>, EvalPair)]) -> Result<()> {
    fs::write(path, format_predictions(items)).map_err(|e| Error::io(path, e))
}

/// Parses a prediction file written by [`write_predictions`].
pub fn read_predictions(path: &Path) -> Result<Vec<(Vec<String>, EvalPair)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out: Vec<(Vec<String>, EvalPair)> = Vec::new();
    let mut current: Option<(Vec<String>, EvalPair)> = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            out.extend(current.take());
            continue;
        }
        if let Some(intent) = line.strip_prefix("# intent:") {
            out.extend(current.take());
            current = Some((
                Vec::new(),
                EvalPair {
                    gold_intent: intent.trim().to_string(),
                    gold_tags: Vec::new(),
                    pred_intent: String::new(),
                    pred_tags: Vec::new(),
                },
            ));
            continue;
        }
        let (tokens, pair) = current
            .as_mut()
            .ok_or_else(|| err(lineno, "line outside an utterance block".into()))?;
        if let Some(pred) = line.strip_prefix("# predicted:") {
            pair.pred_intent = pred.trim().to_string();
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [tok, gold, pred] = fields[..] else {
            return Err(err(lineno, format!("expected `token\\tgold\\tpred`, got `{line}`")));
        };
        tokens.push(tok.to_string());
        pair.gold_tags.push(gold.to_string());
        pair.pred_tags.push(pred.to_string());
    }
    out.extend(current);
    Ok(out)
}
