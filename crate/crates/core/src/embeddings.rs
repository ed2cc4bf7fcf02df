//! Word input representations and the scalar mixing of non-contextual and
//! contextual vectors.
//!
//! Mixing computes `gamma * (w_0 * x + sum_i w_i * h_i)` where `w` is the
//! softmax of the raw layer scores `s`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::param::join;
use crate::nn::{softmax, CharCnn, CharVocab, Param, Params};

/// Widths and channel counts of the character CNN used by the light LM.
pub const ELMOL_CHAR_CNN: [(usize, usize); 6] = [(1, 10), (2, 20), (3, 20), (4, 20), (5, 20), (6, 10)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    /// All input dimensions trainable, no pretraining.
    #[serde(rename = "no-ut")]
    NoUt,
    /// Externally pretrained fixed vectors plus a trainable part.
    Pretrained,
    /// Frozen bi-LM states mixed into the input.
    Elmo,
    /// LM-pretrained shared layer, mixed with its own input.
    Elmol,
}

impl EmbeddingMode {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingMode::NoUt => "no-ut",
            EmbeddingMode::Pretrained => "pretrained",
            EmbeddingMode::Elmo => "elmo",
            EmbeddingMode::Elmol => "elmol",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub mode: EmbeddingMode,
    /// Trainable word-vector width.
    pub word_dim: usize,
    /// Width of the fixed part (pretrained vectors or character CNN).
    pub fixed_dim: usize,
    pub total_dim: usize,
    pub char_cnn_spec: Vec<(usize, usize)>,
}

impl EmbeddingConfig {
    pub fn no_ut() -> Self {
        EmbeddingConfig {
            mode: EmbeddingMode::NoUt,
            word_dim: 400,
            fixed_dim: 0,
            total_dim: 400,
            char_cnn_spec: Vec::new(),
        }
    }

    pub fn pretrained() -> Self {
        EmbeddingConfig {
            mode: EmbeddingMode::Pretrained,
            word_dim: 100,
            fixed_dim: 300,
            total_dim: 400,
            char_cnn_spec: Vec::new(),
        }
    }

    /// Contextual width is twice the LM hidden size per direction.
    pub fn elmo(contextual_dim: usize) -> Self {
        EmbeddingConfig {
            mode: EmbeddingMode::Elmo,
            word_dim: 0,
            fixed_dim: contextual_dim,
            total_dim: contextual_dim,
            char_cnn_spec: Vec::new(),
        }
    }

    pub fn elmol() -> Self {
        EmbeddingConfig {
            mode: EmbeddingMode::Elmol,
            word_dim: 100,
            fixed_dim: 100,
            total_dim: 200,
            char_cnn_spec: ELMOL_CHAR_CNN.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.word_dim + self.fixed_dim != self.total_dim {
            return Err(Error::Validation(format!(
                "{} trainable + {} fixed != {} total",
                self.word_dim, self.fixed_dim, self.total_dim
            )));
        }
        let cnn: usize = self.char_cnn_spec.iter().map(|&(_, c)| c).sum();
        if self.mode == EmbeddingMode::Elmol && cnn != self.fixed_dim {
            return Err(Error::Validation(format!(
                "character CNN yields {cnn} dims but the fixed part is {}",
                self.fixed_dim
            )));
        }
        Ok(())
    }

    /// Concatenates the trainable word part and the fixed part, word first.
    pub fn compose_input(&self, word_vec: ArrayView1<f64>, fixed_vec: ArrayView1<f64>) -> Result<Array1<f64>> {
        if word_vec.len() != self.word_dim || fixed_vec.len() != self.fixed_dim {
            return Err(Error::Shape(format!(
                "expected {} + {} dims, got {} + {}",
                self.word_dim,
                self.fixed_dim,
                word_vec.len(),
                fixed_vec.len()
            )));
        }
        Ok(concatenate![Axis(0), word_vec, fixed_vec])
    }
}

/// Character-CNN vector of one word.
pub fn char_cnn_embed(word: &str, cnn: &CharCnn, chars: &CharVocab) -> Array1<f64> {
    cnn.forward(&chars.encode(word, cnn.max_width())).output
}

/// The scale `gamma` and raw layer scores `s_0..s_L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingWeights {
    pub gamma: f64,
    pub s: Vec<f64>,
}

impl MixingWeights {
    /// `gamma = 1` and equal layer weights.
    pub fn uniform(layers: usize) -> Self {
        MixingWeights {
            gamma: 1.0,
            s: vec![0.0; layers + 1],
        }
    }

    /// Softmax of the raw scores.
    pub fn normalized(&self) -> Vec<f64> {
        softmax(ArrayView1::from(&self.s)).to_vec()
    }
}

fn check_finite(w: &MixingWeights) -> Result<()> {
    if !w.gamma.is_finite() || w.s.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("mixing weights must be finite".into()));
    }
    Ok(())
}

/// `gamma * (w_0 x + sum_i w_i h_i)` for one position.
pub fn elmo_mix(x: ArrayView1<f64>, h_layers: &[ArrayView1<f64>], w: &MixingWeights) -> Result<Array1<f64>> {
    check_finite(w)?;
    if w.s.len() != h_layers.len() + 1 {
        return Err(Error::Shape(format!(
            "{} layer weights for {} contextual layers",
            w.s.len(),
            h_layers.len()
        )));
    }
    if let Some(h) = h_layers.iter().find(|h| h.len() != x.len()) {
        return Err(Error::Shape(format!("input has {} dims, layer has {}", x.len(), h.len())));
    }
    let norm = w.normalized();
    let mut out = x.mapv(|v| v * norm[0]);
    for (h, &wi) in h_layers.iter().zip(&norm[1..]) {
        out.scaled_add(wi, h);
    }
    out.mapv_inplace(|v| v * w.gamma);
    Ok(out)
}

/// Mixing with a single contextual layer.
pub fn elmol_mix(x: ArrayView1<f64>, h: ArrayView1<f64>, w: &MixingWeights) -> Result<Array1<f64>> {
    if w.s.len() != 2 {
        return Err(Error::Shape(format!("expected 2 layer weights, got {}", w.s.len())));
    }
    elmo_mix(x, &[h], w)
}

/// Trainable mixing over whole sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixing {
    pub gamma: Param,
    pub s: Param,
}

impl Mixing {
    /// Mixing over `inputs` sequences: the non-contextual one plus each layer.
    pub fn new(inputs: usize) -> Self {
        Mixing {
            gamma: Param::new(Array2::ones((1, 1)), false),
            s: Param::zeros(1, inputs, false),
        }
    }

    pub fn weights(&self) -> MixingWeights {
        MixingWeights {
            gamma: self.gamma.value[[0, 0]],
            s: self.s.value.row(0).to_vec(),
        }
    }

    fn normalized(&self) -> Array1<f64> {
        softmax(self.s.value.row(0))
    }

    pub fn forward(&self, inputs: &[ArrayView2<f64>]) -> Array2<f64> {
        let w = self.normalized();
        let gamma = self.gamma.value[[0, 0]];
        let mut out = Array2::zeros(inputs[0].raw_dim());
        for (x, &wi) in inputs.iter().zip(&w) {
            out.scaled_add(gamma * wi, x);
        }
        out
    }

    /// Accumulates gradients of gamma and s; returns the gradient for each input.
    pub fn backward(&mut self, inputs: &[ArrayView2<f64>], d_out: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let w = self.normalized();
        let gamma = self.gamma.value[[0, 0]];
        let dots: Vec<f64> = inputs.iter().map(|x| (x * &d_out).sum()).collect();
        self.gamma.grad[[0, 0]] += w.iter().zip(&dots).map(|(wi, d)| wi * d).sum::<f64>();
        let dw: Vec<f64> = dots.iter().map(|d| gamma * d).collect();
        let avg: f64 = w.iter().zip(&dw).map(|(wi, d)| wi * d).sum();
        for (j, (&wj, &dwj)) in w.iter().zip(&dw).enumerate() {
            self.s.grad[[0, j]] += wj * (dwj - avg);
        }
        w.iter().map(|&wi| d_out.mapv(|v| v * gamma * wi)).collect()
    }
}

impl Params for Mixing {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "s"), &self.s);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "s"), &mut self.s);
    }
}

/// Word vectors read from a `word v1 v2 ...` text file.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    /// Reads the file; an optional leading `count dim` header line is skipped.
    /// Words are lowercased to match tokenization; the first occurrence wins.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let values: std::result::Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
            let values = values.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if i == 0 && values.len() == 1 && word.parse::<usize>().is_ok() {
                continue;
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: format!("expected {d} values, got {}", values.len()),
                    })
                }
                _ => {}
            }
            vectors.entry(word.to_lowercase()).or_insert(values);
        }
        let dim = dim.ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            line: 1,
            message: "no vectors found".into(),
        })?;
        Ok(WordVectors { dim, vectors })
    }

    /// `V x dim` table in vocabulary order; missing words get zeros.
    pub fn table(&self, vocab: &Vocabulary) -> Array2<f64> {
        let mut table = Array2::zeros((vocab.len(), self.dim));
        for (i, w) in vocab.words().iter().enumerate() {
            if let Some(v) = self.vectors.get(w) {
                table.row_mut(i).assign(&ArrayView1::from(v));
            }
        }
        table
    }
}
