use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::{join, Param, Params};

/// Character inventory with padding, unknown and word-boundary symbols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl From<Vec<char>> for CharVocab {
    fn from(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + CharVocab::NUM_SPECIALS))
            .collect();
        CharVocab { chars, index }
    }
}

impl From<CharVocab> for Vec<char> {
    fn from(v: CharVocab) -> Self {
        v.chars
    }
}

impl CharVocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const BOW: usize = 2;
    pub const EOW: usize = 3;
    pub const NUM_SPECIALS: usize = 4;
    pub const MAX_WORD_CHARS: usize = 48;

    /// Every character that occurs in `words`, sorted.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut chars: Vec<char> = words.into_iter().flat_map(str::chars).collect();
        chars.sort_unstable();
        chars.dedup();
        CharVocab::from(chars)
    }

    pub fn len(&self) -> usize {
        self.chars.len() + Self::NUM_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Character ids framed by word-boundary symbols and right-padded so a
    /// filter of width `min_len` has at least one full window.
    pub fn encode(&self, word: &str, min_len: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(word.len() + 2);
        ids.push(Self::BOW);
        ids.extend(
            word.chars()
                .take(Self::MAX_WORD_CHARS)
                .map(|c| self.index.get(&c).copied().unwrap_or(Self::UNK)),
        );
        ids.push(Self::EOW);
        while ids.len() < min_len {
            ids.push(Self::PAD);
        }
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub width: usize,
    /// `(width * char_dim) x channels`.
    pub weight: Param,
    pub bias: Param,
}

/// Character convolutions of several widths, each max-pooled over positions
/// and passed through `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct CharCnn {
    pub char_emb: Param,
    pub filters: Vec<Conv>,
}

#[derive(Debug, Clone)]
pub struct CharCnnCache {
    ids: Vec<usize>,
    /// Per filter: unfolded windows and the argmax window per channel.
    windows: Vec<(Array2<f64>, Vec<usize>)>,
    pub output: Array1<f64>,
}

impl CharCnn {
    pub fn new<R: Rng>(num_chars: usize, char_dim: usize, spec: &[(usize, usize)], rng: &mut R) -> Self {
        let mut char_emb = Param::glorot(num_chars, char_dim, rng);
        char_emb.value.row_mut(CharVocab::PAD).fill(0.0);
        let filters = spec
            .iter()
            .map(|&(width, channels)| Conv {
                width,
                weight: Param::glorot(width * char_dim, channels, rng),
                bias: Param::bias(channels),
            })
            .collect();
        CharCnn { char_emb, filters }
    }

    pub fn char_dim(&self) -> usize {
        self.char_emb.value.ncols()
    }

    pub fn max_width(&self) -> usize {
        self.filters.iter().map(|f| f.width).max().unwrap_or(1)
    }

    pub fn output_dim(&self) -> usize {
        self.filters.iter().map(|f| f.weight.value.ncols()).sum()
    }

    pub fn forward(&self, ids: &[usize]) -> CharCnnCache {
        let d = self.char_dim();
        let mut output = Array1::zeros(self.output_dim());
        let mut windows = Vec::with_capacity(self.filters.len());
        let mut offset = 0;
        for conv in &self.filters {
            let positions = ids.len() + 1 - conv.width;
            let mut unfolded = Array2::zeros((positions, conv.width * d));
            for p in 0..positions {
                for k in 0..conv.width {
                    unfolded
                        .row_mut(p)
                        .slice_mut(ndarray::s![k * d..(k + 1) * d])
                        .assign(&self.char_emb.value.row(ids[p + k]));
                }
            }
            let scores = unfolded.dot(&conv.weight.value);
            let channels = scores.ncols();
            let mut argmax = Vec::with_capacity(channels);
            for c in 0..channels {
                let col = scores.column(c);
                let mut best = 0;
                for p in 1..positions {
                    if col[p] > col[best] {
                        best = p;
                    }
                }
                argmax.push(best);
                output[offset + c] = (col[best] + conv.bias.value[[0, c]]).tanh();
            }
            offset += channels;
            windows.push((unfolded, argmax));
        }
        CharCnnCache {
            ids: ids.to_vec(),
            windows,
            output,
        }
    }

    pub fn backward(&mut self, cache: &CharCnnCache, d_out: &Array1<f64>) {
        let d = self.char_dim();
        let mut offset = 0;
        for (conv, (unfolded, argmax)) in self.filters.iter_mut().zip(&cache.windows) {
            let channels = argmax.len();
            for (c, &p) in argmax.iter().enumerate() {
                let y = cache.output[offset + c];
                let dpre = d_out[offset + c] * (1.0 - y * y);
                if dpre == 0.0 {
                    continue;
                }
                conv.bias.grad[[0, c]] += dpre;
                conv.weight
                    .grad
                    .column_mut(c)
                    .scaled_add(dpre, &unfolded.row(p));
                let w_col = conv.weight.value.column(c);
                for k in 0..conv.width {
                    let ch = cache.ids[p + k];
                    self.char_emb
                        .grad
                        .row_mut(ch)
                        .scaled_add(dpre, &w_col.slice(ndarray::s![k * d..(k + 1) * d]));
                }
            }
            offset += channels;
        }
        // Padding embedding stays at zero.
        self.char_emb.grad.row_mut(CharVocab::PAD).fill(0.0);
    }

    /// Output for each word of `words` stacked into a lookup table.
    pub fn table<'a>(&self, chars: &CharVocab, words: impl IntoIterator<Item = &'a str>) -> Array2<f64> {
        let rows: Vec<Array1<f64>> = words
            .into_iter()
            .map(|w| self.forward(&chars.encode(w, self.max_width())).output)
            .collect();
        let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
        if views.is_empty() {
            return Array2::zeros((0, self.output_dim()));
        }
        ndarray::concatenate(Axis(0), &views).expect("rows share the output width")
    }
}

impl Params for CharCnn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "char_emb"), &self.char_emb);
        for (i, conv) in self.filters.iter().enumerate() {
            f(&join(prefix, &format!("conv{i}.weight")), &conv.weight);
            f(&join(prefix, &format!("conv{i}.bias")), &conv.bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "char_emb"), &mut self.char_emb);
        for (i, conv) in self.filters.iter_mut().enumerate() {
            f(&join(prefix, &format!("conv{i}.weight")), &mut conv.weight);
            f(&join(prefix, &format!("conv{i}.bias")), &mut conv.bias);
        }
    }
}
