//! Forward/backward language models over unlabeled text.
//!
//! Each token's input is a trainable word vector concatenated with a
//! character-CNN vector. Forward and backward LSTM stacks run independently
//! (layer `i` of a direction only sees layer `i - 1` of the same direction)
//! and share one output softmax. Sentences are framed with `<s>` and `</s>`;
//! the forward stack predicts the next symbol and the backward stack the
//! previous one. The training loss is the mean of the two directions' mean
//! cross-entropies.

use std::collections::HashMap;
use std::path::Path;

use log::{info, warn};
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::corpus::{UnlabeledCorpus, Vocabulary};
use crate::embeddings::ELMOL_CHAR_CNN;
use crate::error::{Error, Result};
use crate::nn::lstm::{reverse_rows, LstmCache};
use crate::nn::param::join;
use crate::nn::{dropout, log_sum_exp, Adam, BiLstm, CharCnn, CharVocab, Linear, Param, Params};
use crate::train_util::clip_grad_norm;

pub const CHECKPOINT_KIND: &str = "bilm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub layers: usize,
    /// Hidden units per direction.
    pub hidden: usize,
    pub word_dim: usize,
    pub char_dim: usize,
    /// `(width, channels)` of each character filter.
    pub char_cnn: Vec<(usize, usize)>,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub clip_norm: f64,
    pub min_count: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig::elmol()
    }
}

impl LmConfig {
    /// Single bi-LSTM layer of 100 units per direction over a 100 + 100
    /// word/character input; its recurrent weights become the shared layer.
    pub fn elmol() -> Self {
        LmConfig {
            layers: 1,
            hidden: 100,
            word_dim: 100,
            char_dim: 16,
            char_cnn: ELMOL_CHAR_CNN.to_vec(),
            batch_size: 32,
            epochs: 50,
            lr: 0.001,
            dropout: 0.1,
            clip_norm: 5.0,
            min_count: 1,
            seed: 1,
        }
    }

    /// Two layers of 512 units per direction; input 512 word + 512 character dims.
    pub fn elmo_desk() -> Self {
        LmConfig {
            layers: 2,
            hidden: 512,
            word_dim: 512,
            char_dim: 16,
            char_cnn: vec![(1, 32), (2, 64), (3, 128), (4, 128), (5, 128), (6, 32)],
            batch_size: 32,
            epochs: 25,
            lr: 0.001,
            dropout: 0.1,
            clip_norm: 5.0,
            min_count: 1,
            seed: 1,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.word_dim + self.char_cnn.iter().map(|&(_, c)| c).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.layers == 0 {
            return bad("LM needs at least one layer".into());
        }
        if self.hidden == 0 || self.batch_size == 0 || self.char_cnn.is_empty() {
            return bad("LM hidden size, batch size and CNN filters must be non-empty".into());
        }
        if self.input_dim() != 2 * self.hidden {
            return bad(format!(
                "LM input width {} must equal the concatenated state width {} so the two can be mixed",
                self.input_dim(),
                2 * self.hidden
            ));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return bad("LM learning rate must be positive and dropout in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss; absent for the starting point.
    pub train_loss: Option<f64>,
    pub heldout_perplexity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LmMeta {
    /// Epochs trained so far, across resumptions.
    pub epochs: usize,
    /// Epoch whose parameters this checkpoint holds.
    pub best_epoch: usize,
    pub heldout_perplexity: Option<f64>,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub dataset: String,
    /// Predicted symbols per direction (words plus one boundary per sentence).
    pub token_count: usize,
    pub perplexity: f64,
    pub forward_perplexity: f64,
    pub backward_perplexity: f64,
}

/// Layer states over the framed sentence `<s> w_1 .. w_n </s>`.
#[derive(Debug, Clone)]
pub struct LayerStates {
    /// Non-contextual input, `(n + 2) x input_dim`.
    pub input: Array2<f64>,
    /// Per layer, forward ⊕ backward states, `(n + 2) x 2H`.
    pub layers: Vec<Array2<f64>>,
}

/// Everything the SLU shared layer takes from a one-layer LM.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedLayerBundle {
    pub bilstm: BiLstm,
    pub vocab: Vocabulary,
    pub word_emb: Array2<f64>,
    /// Frozen character-CNN output for every vocabulary entry.
    pub char_table: Array2<f64>,
}

impl SharedLayerBundle {
    pub fn output_dim(&self) -> usize {
        self.bilstm.output_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLm {
    pub config: LmConfig,
    pub vocab: Vocabulary,
    pub chars: CharVocab,
    pub word_emb: Param,
    pub char_cnn: CharCnn,
    pub layers: Vec<BiLstm>,
    pub output: Linear,
    pub meta: LmMeta,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: LmConfig,
    vocab: Vocabulary,
    chars: CharVocab,
    meta: LmMeta,
}

struct SentenceCache {
    ids: Vec<usize>,
    fwd: Vec<LstmCache>,
    bwd: Vec<LstmCache>,
    /// Dropout masks on each layer's output, `(forward, backward)`, the
    /// backward one in reversed time order.
    masks: Vec<(Array2<f64>, Array2<f64>)>,
}

impl BiLm {
    /// Fresh model. The output layer starts at zero so the untrained model
    /// predicts the uniform distribution over the vocabulary.
    pub fn new(config: LmConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let chars = CharVocab::build(vocab.words().iter().map(String::as_str));
        let word_emb = Param::new(
            Array2::from_shape_fn((vocab.len(), config.word_dim), |_| rng.gen_range(-0.1..0.1)),
            true,
        );
        let char_cnn = CharCnn::new(chars.len(), config.char_dim, &config.char_cnn, &mut rng);
        let layers = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.input_dim() } else { config.hidden };
                BiLstm::new(input, config.hidden, &mut rng)
            })
            .collect();
        let output = Linear::zeros(config.hidden, vocab.len());
        Ok(BiLm {
            config,
            vocab,
            chars,
            word_emb,
            char_cnn,
            layers,
            output,
            meta: LmMeta::default(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    fn encode_word(&self, id: usize) -> Vec<usize> {
        self.chars.encode(self.vocab.word(id), self.char_cnn.max_width())
    }

    /// Character-CNN output for every vocabulary entry, `V x channels`.
    pub fn char_table(&self) -> Array2<f64> {
        self.char_cnn
            .table(&self.chars, self.vocab.words().iter().map(String::as_str))
    }

    /// Input rows `[word ⊕ char]` for `ids`. With a precomputed table the
    /// character part is looked up, otherwise computed.
    fn embed(&self, ids: &[usize], table: Option<&Array2<f64>>) -> Array2<f64> {
        let d = self.config.input_dim();
        let wd = self.config.word_dim;
        let mut x = Array2::zeros((ids.len(), d));
        for (row, &id) in ids.iter().enumerate() {
            x.slice_mut(s![row, ..wd]).assign(&self.word_emb.value.row(id));
            match table {
                Some(t) => x.slice_mut(s![row, wd..]).assign(&t.row(id)),
                None => x
                    .slice_mut(s![row, wd..])
                    .assign(&self.char_cnn.forward(&self.encode_word(id)).output),
            }
        }
        x
    }

    /// Runs both stacks over already embedded inputs. Returns caches and
    /// the dropout masks used (all ones when `rng` is `None`).
    fn run_stacks(&self, input: ArrayView2<f64>, mut rng: Option<&mut ChaCha8Rng>) -> (Vec<LstmCache>, Vec<LstmCache>, Vec<(Array2<f64>, Array2<f64>)>) {
        let p = self.config.dropout;
        let mut fwd = Vec::with_capacity(self.layers.len());
        let mut bwd = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut xf = input.to_owned();
        let mut xb = reverse_rows(input);
        for layer in &self.layers {
            let cf = layer.fwd.forward(xf.view());
            let cb = layer.bwd.forward(xb.view());
            let shape = cf.hidden.raw_dim();
            let (mf, mb) = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => (dropout::mask(shape, p, r), dropout::mask(shape, p, r)),
                _ => (Array2::ones(shape), Array2::ones(shape)),
            };
            xf = &cf.hidden * &mf;
            xb = &cb.hidden * &mb;
            fwd.push(cf);
            bwd.push(cb);
            masks.push((mf, mb));
        }
        (fwd, bwd, masks)
    }

    /// All layer states over the framed sentence, without dropout.
    pub fn layer_states<S: AsRef<str>>(&self, tokens: &[S]) -> LayerStates {
        let ids = self.vocab.encode_framed(tokens);
        let input = self.embed(&ids, None);
        let (fwd, bwd, _) = self.run_stacks(input.view(), None);
        let layers = fwd
            .iter()
            .zip(&bwd)
            .map(|(f, b)| concatenate![Axis(1), f.hidden, reverse_rows(b.hidden.view())])
            .collect();
        LayerStates { input, layers }
    }

    /// Per layer, the `n x 2H` states of the actual tokens (boundaries dropped).
    pub fn contextual_states<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<Array2<f64>> {
        let n = tokens.len();
        self.layer_states(tokens)
            .layers
            .into_iter()
            .map(|h| h.slice(s![1..=n, ..]).to_owned())
            .collect()
    }

    /// Summed cross-entropy of both directions and the number of
    /// predictions per direction.
    fn sentence_loss(&self, ids: &[usize], table: &Array2<f64>) -> (f64, f64, usize) {
        let input = self.embed(ids, Some(table));
        let (fwd, bwd, _) = self.run_stacks(input.view(), None);
        let p = ids.len();
        let top_f = &fwd.last().unwrap().hidden;
        let top_b = reverse_rows(bwd.last().unwrap().hidden.view());
        let ce = |states: ArrayView2<f64>, targets: &[usize]| -> f64 {
            let logits = self.output.forward(states);
            logits
                .outer_iter()
                .zip(targets)
                .map(|(row, &t)| log_sum_exp(row) - row[t])
                .sum()
        };
        let lf = ce(top_f.slice(s![..p - 1, ..]), &ids[1..]);
        let lb = ce(top_b.slice(s![1.., ..]), &ids[..p - 1]);
        (lf, lb, p - 1)
    }

    /// Perplexity over `text`: the exponential of the mean per-symbol
    /// cross-entropy, pooled over both directions.
    pub fn perplexity(&self, text: &UnlabeledCorpus, name: &str) -> Result<PerplexityReport> {
        if text.is_empty() {
            return Err(Error::InvalidArgument("perplexity needs at least one sentence".into()));
        }
        let table = self.char_table();
        let (mut lf, mut lb, mut n) = (0.0, 0.0, 0usize);
        for sentence in &text.sentences {
            let ids = self.vocab.encode_framed(sentence);
            let (f, b, k) = self.sentence_loss(&ids, &table);
            lf += f;
            lb += b;
            n += k;
        }
        let nf = n as f64;
        Ok(PerplexityReport {
            dataset: name.to_string(),
            token_count: n,
            perplexity: ((lf + lb) / (2.0 * nf)).exp(),
            forward_perplexity: (lf / nf).exp(),
            backward_perplexity: (lb / nf).exp(),
        })
    }

    /// Forward pass with dropout, keeping everything backward needs.
    fn forward_train(&self, ids: &[usize], char_vecs: &HashMap<usize, Array1<f64>>, rng: &mut ChaCha8Rng) -> (Array2<f64>, SentenceCache) {
        let wd = self.config.word_dim;
        let mut input = Array2::zeros((ids.len(), self.config.input_dim()));
        for (row, id) in ids.iter().enumerate() {
            input.slice_mut(s![row, ..wd]).assign(&self.word_emb.value.row(*id));
            input.slice_mut(s![row, wd..]).assign(&char_vecs[id]);
        }
        let (fwd, bwd, masks) = self.run_stacks(input.view(), Some(rng));
        (
            input,
            SentenceCache {
                ids: ids.to_vec(),
                fwd,
                bwd,
                masks,
            },
        )
    }

    /// Backpropagates one sentence's loss (scaled by `scale`); returns the
    /// unscaled summed cross-entropy and the input gradient.
    fn backward_train(&mut self, cache: &SentenceCache, scale: f64) -> (f64, Array2<f64>) {
        let ids = &cache.ids;
        let p = ids.len();
        let h = self.config.hidden;
        let top = cache.fwd.len() - 1;
        let top_f = &cache.fwd[top].hidden * &cache.masks[top].0;
        let top_b = reverse_rows((&cache.bwd[top].hidden * &cache.masks[top].1).view());

        let mut loss = 0.0;
        let mut d_top_f = Array2::zeros((p, h));
        let mut d_top_b = Array2::zeros((p, h));
        for (states, targets, d_states, rows) in [
            (top_f.slice(s![..p - 1, ..]), &ids[1..], &mut d_top_f, 0..p - 1),
            (top_b.slice(s![1.., ..]), &ids[..p - 1], &mut d_top_b, 1..p),
        ] {
            let logits = self.output.forward(states);
            let mut d_logits = Array2::zeros(logits.raw_dim());
            for (i, (row, &t)) in logits.outer_iter().zip(targets).enumerate() {
                let lse = log_sum_exp(row);
                loss += lse - row[t];
                let mut d = d_logits.row_mut(i);
                d.assign(&row.mapv(|v| (v - lse).exp() * scale));
                d[t] -= scale;
            }
            let d_in = self.output.backward(states, d_logits.view());
            d_states.slice_mut(s![rows, ..]).assign(&d_in);
        }

        let mut df = d_top_f;
        let mut db = reverse_rows(d_top_b.view());
        for l in (0..self.layers.len()).rev() {
            let (mf, mb) = &cache.masks[l];
            df = self.layers[l].fwd.backward(&cache.fwd[l], (&df * mf).view());
            db = self.layers[l].bwd.backward(&cache.bwd[l], (&db * mb).view());
        }
        (loss, df + reverse_rows(db.view()))
    }

    /// Clears gradients, then accumulates the gradient of the mean loss
    /// over `batch` (framed id sequences). Returns that loss.
    pub fn accumulate_gradients(&mut self, batch: &[Vec<usize>], rng: &mut ChaCha8Rng) -> f64 {
        self.zero_grad();
        let mut unique: Vec<usize> = batch.iter().flatten().copied().collect();
        unique.sort_unstable();
        unique.dedup();
        let char_caches: HashMap<usize, _> = unique
            .iter()
            .map(|&id| (id, self.char_cnn.forward(&self.encode_word(id))))
            .collect();
        let char_vecs: HashMap<usize, Array1<f64>> =
            char_caches.iter().map(|(&id, c)| (id, c.output.clone())).collect();
        let mut d_chars: HashMap<usize, Array1<f64>> = HashMap::new();

        let predictions: usize = batch.iter().map(|ids| ids.len() - 1).sum();
        let scale = 1.0 / (2.0 * predictions as f64);
        let wd = self.config.word_dim;
        let mut total = 0.0;
        for ids in batch {
            let (_, cache) = self.forward_train(ids, &char_vecs, rng);
            let (loss, d_input) = self.backward_train(&cache, scale);
            total += loss;
            for (row, &id) in ids.iter().enumerate() {
                let mut g = self.word_emb.grad.row_mut(id);
                g += &d_input.slice(s![row, ..wd]);
                let dc = d_input.slice(s![row, wd..]);
                d_chars
                    .entry(id)
                    .and_modify(|acc| *acc += &dc)
                    .or_insert_with(|| dc.to_owned());
            }
        }
        for id in &unique {
            if let Some(d) = d_chars.get(id) {
                self.char_cnn.backward(&char_caches[id], d);
            }
        }
        total * scale
    }

    fn train_batch(&mut self, batch: &[Vec<usize>], rng: &mut ChaCha8Rng, adam: &mut Adam) -> f64 {
        let loss = self.accumulate_gradients(batch, rng);
        let clip = self.config.clip_norm;
        clip_grad_norm(self, clip);
        let lr = self.config.lr;
        self.visit_mut("", &mut |name, p| adam.step(name, p, lr));
        loss
    }

    /// Parameters of the recurrent layer plus the frozen character table,
    /// shaped for the SLU shared layer. Only one-layer models qualify.
    pub fn export_shared_layer(&self) -> Result<SharedLayerBundle> {
        if self.layers.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "only a one-layer LM can become the shared layer; this one has {} layers",
                self.layers.len()
            )));
        }
        Ok(SharedLayerBundle {
            bilstm: self.layers[0].clone(),
            vocab: self.vocab.clone(),
            word_emb: self.word_emb.value.clone(),
            char_table: self.char_table(),
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_KIND, self.embedded_meta()?);
        c.push_params("", self);
        Ok(c)
    }

    pub fn from_container(c: &Container, prefix: &str) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND).or_else(|e| if prefix.is_empty() { Err(e) } else { Ok(()) })?;
        let meta_value = if prefix.is_empty() {
            c.meta.clone()
        } else {
            c.meta.get("lm").cloned().ok_or_else(|| Error::Checkpoint("embedded LM metadata missing".into()))?
        };
        let meta: CheckpointMeta = serde_json::from_value(meta_value)?;
        let mut lm = BiLm::new(meta.config, meta.vocab)?;
        lm.chars = meta.chars;
        lm.char_cnn = CharCnn::new(lm.chars.len(), lm.config.char_dim, &lm.config.char_cnn, &mut ChaCha8Rng::seed_from_u64(0));
        lm.meta = meta.meta;
        c.fill_params(prefix, &mut lm)?;
        Ok(lm)
    }

    /// Metadata block used when an LM is embedded in another checkpoint.
    pub(crate) fn embedded_meta(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(CheckpointMeta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            chars: self.chars.clone(),
            meta: self.meta.clone(),
        })?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        BiLm::from_container(&Container::load(path)?, "")
    }
}

impl Params for BiLm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "word_emb"), &self.word_emb);
        self.char_cnn.visit(&join(prefix, "char_cnn"), f);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{i}")), f);
        }
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "word_emb"), &mut self.word_emb);
        self.char_cnn.visit_mut(&join(prefix, "char_cnn"), f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[derive(Debug, Clone)]
pub struct LmTrainOutcome {
    /// Parameters from the epoch with the lowest held-out perplexity.
    pub best: BiLm,
    pub history: Vec<EpochStats>,
}

/// Trains a bi-LM on `corpus`, selecting the epoch with the best held-out
/// perplexity (epoch 0 is the starting point). Passing `resume` continues
/// from an existing model, keeping its vocabulary and epoch count.
pub fn train_bilm(
    corpus: &UnlabeledCorpus,
    config: &LmConfig,
    heldout: &UnlabeledCorpus,
    resume: Option<BiLm>,
) -> Result<LmTrainOutcome> {
    config.validate()?;
    if corpus.is_empty() || heldout.is_empty() {
        return Err(Error::InvalidArgument("LM training needs non-empty training and held-out text".into()));
    }
    let overlap = {
        let train: std::collections::HashSet<&Vec<String>> = corpus.sentences.iter().collect();
        heldout.sentences.iter().filter(|s| train.contains(s)).count()
    };
    if overlap > 0 {
        warn!("{overlap} held-out sentences also occur in the training text");
    }

    let mut lm = match resume {
        Some(mut lm) => {
            lm.config.epochs = config.epochs;
            lm.config.lr = config.lr;
            lm.config.batch_size = config.batch_size;
            lm.config.dropout = config.dropout;
            lm
        }
        None => BiLm::new(config.clone(), Vocabulary::from_corpus(corpus, config.min_count))?,
    };
    let start_epoch = lm.meta.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(start_epoch as u64));
    let mut adam = Adam::new();
    let encoded: Vec<Vec<usize>> = corpus.sentences.iter().map(|s| lm.vocab.encode_framed(s)).collect();

    let mut history = lm.meta.history.clone();
    let initial = lm.perplexity(heldout, "heldout")?.perplexity;
    if history.is_empty() {
        history.push(EpochStats {
            epoch: 0,
            train_loss: None,
            heldout_perplexity: initial,
        });
    }
    let mut best = lm.clone();
    let mut best_ppl = lm.meta.heldout_perplexity.unwrap_or(initial).min(initial);
    best.meta.heldout_perplexity = Some(best_ppl);

    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut step = 0;
    for epoch in start_epoch + 1..=start_epoch + config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            let loss = lm.train_batch(&batch, &mut rng, &mut adam);
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            epoch_loss += loss;
            batches += 1;
        }
        let ppl = lm.perplexity(heldout, "heldout")?.perplexity;
        let stats = EpochStats {
            epoch,
            train_loss: Some(epoch_loss / batches as f64),
            heldout_perplexity: ppl,
        };
        info!(
            "lm epoch {epoch}: train loss {:.4}, held-out perplexity {:.3}",
            epoch_loss / batches as f64,
            ppl
        );
        history.push(stats);
        lm.meta.epochs = epoch;
        if ppl < best_ppl {
            best_ppl = ppl;
            best = lm.clone();
            best.meta.best_epoch = epoch;
            best.meta.heldout_perplexity = Some(ppl);
        }
    }
    best.meta.epochs = lm.meta.epochs;
    best.meta.history = history.clone();
    best.zero_grad();
    Ok(LmTrainOutcome { best, history })
}

/// Deterministically splits off roughly `fraction` of the sentences as a
/// held-out set (at least one sentence on each side when possible).
pub fn split_heldout(corpus: &UnlabeledCorpus, fraction: f64, seed: u64) -> (UnlabeledCorpus, UnlabeledCorpus) {
    let n = corpus.len();
    let k = ((n as f64 * fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1).max(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held: std::collections::HashSet<usize> = idx[..k].iter().copied().collect();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, s) in corpus.sentences.iter().enumerate() {
        if held.contains(&i) {
            b.push(s.clone());
        } else {
            a.push(s.clone());
        }
    }
    (UnlabeledCorpus::from_sentences(a), UnlabeledCorpus::from_sentences(b))
}
