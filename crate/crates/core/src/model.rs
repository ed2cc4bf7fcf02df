//! Multi-task SLU network.
//!
//! Tokens are framed with `<s>`/`</s>` and embedded; a shared bi-LSTM runs
//! over the framed sequence and its states at the real token positions feed
//! two heads: an entity-tagging bi-LSTM with a linear projection and a CRF,
//! and an intent bi-LSTM whose last forward and first backward states go
//! through a softmax layer. The loss is the unweighted sum of the intent
//! cross-entropy and the CRF negative log-likelihood.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::corpus::{repair_bio, LabelSpace, Utterance, Vocabulary};
use crate::crf::{self, TransitionView};
use crate::embeddings::{EmbeddingMode, Mixing, WordVectors};
use crate::error::{Error, Result};
use crate::lm::{BiLm, SharedLayerBundle};
use crate::nn::lstm::BiLstmCache;
use crate::nn::param::join;
use crate::nn::{dropout, log_sum_exp, softmax, BiLstm, Linear, Param, Params};

pub const CHECKPOINT_KIND: &str = "slu-model";

pub const EMBEDDING: &str = "embedding";
pub const MIXING: &str = "mixing";
pub const SHARED_BIRNN: &str = "shared_birnn";
pub const ET_BIRNN: &str = "et_birnn";
pub const ET_PROJECTION: &str = "et_projection";
pub const CRF: &str = "crf";
pub const IC_BIRNN: &str = "ic_birnn";
pub const INTENT_SOFTMAX: &str = "intent_softmax";

/// Every parameter group, bottom to top.
pub const GROUPS: [&str; 8] = [
    EMBEDDING,
    MIXING,
    SHARED_BIRNN,
    ET_BIRNN,
    ET_PROJECTION,
    CRF,
    IC_BIRNN,
    INTENT_SOFTMAX,
];

/// Groups that are re-initialized whenever the label space changes.
pub const LABEL_HEADS: [&str; 3] = [ET_PROJECTION, CRF, INTENT_SOFTMAX];

/// Group of a dotted parameter name.
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SluConfig {
    /// Units per direction in every bi-LSTM.
    pub hidden: usize,
    pub dropout: f64,
    /// L2 coefficient on all weight matrices.
    pub l2: f64,
    /// Trainable word-vector width for the no-pretraining condition.
    pub no_ut_dim: usize,
    /// Trainable word-vector width next to fixed pretrained vectors.
    pub pretrained_trainable_dim: usize,
}

impl Default for SluConfig {
    fn default() -> Self {
        SluConfig {
            hidden: 100,
            dropout: 0.5,
            l2: 0.0001,
            no_ut_dim: 400,
            pretrained_trainable_dim: 100,
        }
    }
}

/// Token input layer for each embedding mode.
#[derive(Debug, Clone, PartialEq)]
pub enum InputLayer {
    /// All dimensions trainable.
    Trainable { vocab: Vocabulary, table: Param },
    /// Trainable part followed by fixed pretrained vectors.
    Pretrained {
        vocab: Vocabulary,
        table: Param,
        fixed: Array2<f64>,
    },
    /// LM word vectors (trainable) followed by the LM's frozen character table.
    Elmol {
        vocab: Vocabulary,
        table: Param,
        chars: Array2<f64>,
    },
    /// Frozen bi-LM; its input and layer states are mixed.
    Elmo { lm: Arc<BiLm> },
}

fn uniform_table<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Param {
    Param::new(Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-0.1..0.1)), true)
}

impl InputLayer {
    pub fn mode(&self) -> EmbeddingMode {
        match self {
            InputLayer::Trainable { .. } => EmbeddingMode::NoUt,
            InputLayer::Pretrained { .. } => EmbeddingMode::Pretrained,
            InputLayer::Elmol { .. } => EmbeddingMode::Elmol,
            InputLayer::Elmo { .. } => EmbeddingMode::Elmo,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        match self {
            InputLayer::Trainable { vocab, .. }
            | InputLayer::Pretrained { vocab, .. }
            | InputLayer::Elmol { vocab, .. } => vocab,
            InputLayer::Elmo { lm } => &lm.vocab,
        }
    }

    /// Width of the vectors fed to the shared layer.
    pub fn output_dim(&self) -> usize {
        match self {
            InputLayer::Trainable { table, .. } => table.value.ncols(),
            InputLayer::Pretrained { table, fixed, .. } => table.value.ncols() + fixed.ncols(),
            InputLayer::Elmol { table, chars, .. } => table.value.ncols() + chars.ncols(),
            InputLayer::Elmo { lm } => lm.config.input_dim(),
        }
    }

    pub fn trainable<R: Rng>(vocab: Vocabulary, dim: usize, rng: &mut R) -> Self {
        let table = uniform_table(vocab.len(), dim, rng);
        InputLayer::Trainable { vocab, table }
    }

    pub fn pretrained<R: Rng>(vocab: Vocabulary, vectors: &WordVectors, trainable_dim: usize, rng: &mut R) -> Self {
        let fixed = vectors.table(&vocab);
        let table = uniform_table(vocab.len(), trainable_dim, rng);
        InputLayer::Pretrained { vocab, table, fixed }
    }

    /// Same layout with freshly drawn trainable values.
    fn reinitialized<R: Rng>(&self, rng: &mut R) -> Self {
        let mut out = self.clone();
        match &mut out {
            InputLayer::Trainable { table, .. }
            | InputLayer::Pretrained { table, .. }
            | InputLayer::Elmol { table, .. } => {
                *table = uniform_table(table.value.nrows(), table.value.ncols(), rng);
            }
            InputLayer::Elmo { .. } => {}
        }
        out
    }

    fn table(&self) -> Option<&Param> {
        match self {
            InputLayer::Trainable { table, .. }
            | InputLayer::Pretrained { table, .. }
            | InputLayer::Elmol { table, .. } => Some(table),
            InputLayer::Elmo { .. } => None,
        }
    }

    fn table_mut(&mut self) -> Option<&mut Param> {
        match self {
            InputLayer::Trainable { table, .. }
            | InputLayer::Pretrained { table, .. }
            | InputLayer::Elmol { table, .. } => Some(table),
            InputLayer::Elmo { .. } => None,
        }
    }

    /// Non-ELMo input rows for `ids`.
    fn lookup(&self, ids: &[usize]) -> Array2<f64> {
        let rows = |t: &Array2<f64>| t.select(Axis(0), ids);
        match self {
            InputLayer::Trainable { table, .. } => rows(&table.value),
            InputLayer::Pretrained { table, fixed, .. } => {
                concatenate![Axis(1), rows(&table.value), rows(fixed)]
            }
            InputLayer::Elmol { table, chars, .. } => concatenate![Axis(1), rows(&table.value), rows(chars)],
            InputLayer::Elmo { .. } => unreachable!("ELMo inputs come from the LM"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    pub trans: Param,
    pub start: Param,
    pub end: Param,
}

impl CrfParams {
    fn zeros(k: usize) -> Self {
        CrfParams {
            trans: Param::zeros(k, k, false),
            start: Param::zeros(1, k, false),
            end: Param::zeros(1, k, false),
        }
    }

    pub fn view(&self) -> TransitionView<'_> {
        TransitionView {
            trans: self.trans.value.view(),
            start: self.start.value.row(0),
            end: self.end.value.row(0),
        }
    }
}

impl Params for CrfParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "trans"), &self.trans);
        f(&join(prefix, "start"), &self.start);
        f(&join(prefix, "end"), &self.end);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "trans"), &mut self.trans);
        f(&join(prefix, "start"), &mut self.start);
        f(&join(prefix, "end"), &mut self.end);
    }
}

/// Evaluation-mode activations for one utterance.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Shared-layer states at the token positions, `n x 2H`.
    pub shared: Array2<f64>,
    /// Entity-head states `forward ⊕ backward`, `n x 2H`.
    pub entity: Array2<f64>,
    /// Intent-head states, `n x 2H`.
    pub intent_states: Array2<f64>,
    /// Last forward state followed by the first backward state.
    pub intent_repr: Array1<f64>,
    pub emissions: Array2<f64>,
    pub intent_logits: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub intent: f64,
    pub entity: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.intent + self.entity
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub intent: String,
    pub tags: Vec<String>,
    pub intent_probs: Vec<f64>,
}

struct Cache {
    ids: Vec<usize>,
    /// LM input and layer states, ELMo mode only.
    elmo_inputs: Vec<Array2<f64>>,
    emb_mask: Array2<f64>,
    e: Array2<f64>,
    shared: BiLstmCache,
    shared_mask: Array2<f64>,
    rc: Array2<f64>,
    et: BiLstmCache,
    et_mask: Array2<f64>,
    et_out: Array2<f64>,
    emissions: Array2<f64>,
    ic: BiLstmCache,
    ic_mask: Array2<f64>,
    ic_out: Array2<f64>,
    intent_repr: Array1<f64>,
    intent_logits: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SluModel {
    pub config: SluConfig,
    pub label_space: LabelSpace,
    pub input: InputLayer,
    pub mixing: Option<Mixing>,
    pub shared: BiLstm,
    pub et: BiLstm,
    pub et_proj: Linear,
    pub crf: CrfParams,
    pub ic: BiLstm,
    pub intent: Linear,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    mode: EmbeddingMode,
    config: SluConfig,
    label_space: LabelSpace,
    vocab: Option<Vocabulary>,
    lm: Option<serde_json::Value>,
}

impl SluModel {
    /// Model with a freshly initialized shared layer over `input`.
    pub fn new(label_space: LabelSpace, input: InputLayer, config: SluConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = BiLstm::new(input.output_dim(), config.hidden, &mut rng);
        let mixing = match &input {
            InputLayer::Elmo { lm } => Some(Mixing::new(lm.num_layers() + 1)),
            InputLayer::Elmol { .. } => {
                return Err(Error::InvalidArgument(
                    "the LM-initialized shared layer is built with SluModel::from_shared_layer".into(),
                ))
            }
            _ => None,
        };
        if let InputLayer::Elmo { lm } = &input {
            if lm.config.input_dim() != 2 * lm.hidden() {
                return Err(Error::Shape("ELMo mixing needs LM input width equal to its state width".into()));
            }
        }
        Ok(Self::assemble(label_space, input, mixing, shared, config, &mut rng))
    }

    /// Model whose shared layer and word vectors come from a one-layer LM.
    pub fn from_shared_layer(label_space: LabelSpace, bundle: &SharedLayerBundle, config: SluConfig, seed: u64) -> Result<Self> {
        if bundle.bilstm.fwd.hidden_dim() != config.hidden {
            return Err(Error::Shape(format!(
                "LM layer has {} units per direction, the model expects {}",
                bundle.bilstm.fwd.hidden_dim(),
                config.hidden
            )));
        }
        let input = InputLayer::Elmol {
            vocab: bundle.vocab.clone(),
            table: Param::new(bundle.word_emb.clone(), true),
            chars: bundle.char_table.clone(),
        };
        if input.output_dim() != bundle.bilstm.input_dim() || input.output_dim() != bundle.output_dim() {
            return Err(Error::Shape(format!(
                "shared-layer input width {} must match its input {} and output {} widths",
                input.output_dim(),
                bundle.bilstm.input_dim(),
                bundle.output_dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::assemble(
            label_space,
            input,
            Some(Mixing::new(2)),
            bundle.bilstm.clone(),
            config,
            &mut rng,
        ))
    }

    fn assemble<R: Rng>(
        label_space: LabelSpace,
        input: InputLayer,
        mixing: Option<Mixing>,
        shared: BiLstm,
        config: SluConfig,
        rng: &mut R,
    ) -> Self {
        let h2 = 2 * config.hidden;
        let et = BiLstm::new(h2, config.hidden, rng);
        let et_proj = Linear::new(h2, label_space.num_tags(), rng);
        let ic = BiLstm::new(h2, config.hidden, rng);
        let intent = Linear::new(h2, label_space.intents().len(), rng);
        let crf = CrfParams::zeros(label_space.num_tags());
        SluModel {
            config,
            label_space,
            input,
            mixing,
            shared,
            et,
            et_proj,
            crf,
            ic,
            intent,
        }
    }

    pub fn mode(&self) -> EmbeddingMode {
        self.input.mode()
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.input.vocab()
    }

    /// The frozen LM of ELMo mode.
    pub fn frozen_lm(&self) -> Option<&BiLm> {
        match &self.input {
            InputLayer::Elmo { lm } => Some(lm),
            _ => None,
        }
    }

    /// Groups that actually hold parameters in this model.
    pub fn groups(&self) -> Vec<&'static str> {
        GROUPS
            .iter()
            .copied()
            .filter(|g| match *g {
                EMBEDDING => self.input.table().is_some(),
                MIXING => self.mixing.is_some(),
                _ => true,
            })
            .collect()
    }

    fn run<R: Rng>(&self, tokens: &[String], mut rng: Option<&mut R>) -> Result<Cache> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("cannot run the model on an empty utterance".into()));
        }
        let n = tokens.len();
        let p = self.config.dropout;
        let mut mask = |shape: (usize, usize)| match rng.as_deref_mut() {
            Some(r) if p > 0.0 => dropout::mask(ndarray::Dim(shape), p, r),
            _ => Array2::ones(shape),
        };

        let (ids, x, elmo_inputs) = match &self.input {
            InputLayer::Elmo { lm } => {
                let states = lm.layer_states(tokens);
                let ids = lm.vocab.encode_framed(tokens);
                let mut inputs = vec![states.input];
                inputs.extend(states.layers);
                let views: Vec<ArrayView2<f64>> = inputs.iter().map(|a| a.view()).collect();
                let mixed = self.mixing.as_ref().expect("ELMo mode has mixing").forward(&views);
                (ids, mixed, inputs)
            }
            other => {
                let ids = other.vocab().encode_framed(tokens);
                let x = other.lookup(&ids);
                (ids, x, Vec::new())
            }
        };
        let emb_mask = mask(x.dim());
        let e = &x * &emb_mask;
        let shared = self.shared.forward(e.view());
        let shared_out = shared.output();
        let shared_mask = mask(shared_out.dim());
        let rc = &shared_out * &shared_mask;
        let u = match (&self.input, &self.mixing) {
            (InputLayer::Elmol { .. }, Some(mix)) => {
                mix.forward(&[e.slice(s![1..=n, ..]), rc.slice(s![1..=n, ..])])
            }
            _ => rc.slice(s![1..=n, ..]).to_owned(),
        };

        let et = self.et.forward(u.view());
        let et_raw = et.output();
        let et_mask = mask(et_raw.dim());
        let et_out = &et_raw * &et_mask;
        let emissions = self.et_proj.forward(et_out.view());

        let ic = self.ic.forward(u.view());
        let ic_raw = ic.output();
        let ic_mask = mask(ic_raw.dim());
        let ic_out = &ic_raw * &ic_mask;
        let h = self.config.hidden;
        let intent_repr = concatenate![Axis(0), ic_out.slice(s![n - 1, ..h]), ic_out.slice(s![0, h..])];
        let intent_logits = self
            .intent
            .forward(intent_repr.view().insert_axis(Axis(0)))
            .row(0)
            .to_owned();
        Ok(Cache {
            ids,
            elmo_inputs,
            emb_mask,
            e,
            shared,
            shared_mask,
            rc,
            et,
            et_mask,
            et_out,
            emissions,
            ic,
            ic_mask,
            ic_out,
            intent_repr,
            intent_logits,
        })
    }

    /// Evaluation-mode forward pass (no dropout).
    pub fn forward<S: AsRef<str>>(&self, tokens: &[S]) -> Result<ForwardTrace> {
        let tokens: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
        let c = self.run::<ChaCha8Rng>(&tokens, None)?;
        let n = tokens.len();
        Ok(ForwardTrace {
            shared: c.rc.slice(s![1..=n, ..]).to_owned(),
            entity: c.et_out,
            intent_states: c.ic_out,
            intent_repr: c.intent_repr,
            emissions: c.emissions,
            intent_logits: c.intent_logits,
        })
    }

    fn gold_indices(&self, intent: &str, tags: &[String], n: usize) -> Result<(usize, Vec<usize>)> {
        let gi = self
            .label_space
            .intent_index(intent)
            .ok_or_else(|| Error::InvalidArgument(format!("intent `{intent}` is not in the label space")))?;
        if tags.len() != n {
            return Err(Error::InvalidArgument(format!("{} tags for {n} tokens", tags.len())));
        }
        let gt = tags
            .iter()
            .map(|t| {
                self.label_space
                    .tag_index(t)
                    .ok_or_else(|| Error::InvalidArgument(format!("tag `{t}` is not in the label space")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((gi, gt))
    }

    /// Intent cross-entropy and CRF negative log-likelihood for a trace.
    pub fn joint_loss(&self, trace: &ForwardTrace, intent: &str, tags: &[String]) -> Result<LossParts> {
        let (gi, gt) = self.gold_indices(intent, tags, trace.emissions.nrows())?;
        let ic = log_sum_exp(trace.intent_logits.view()) - trace.intent_logits[gi];
        let et = crf::crf_nll(trace.emissions.view(), self.crf.view(), &gt)?;
        Ok(LossParts { intent: ic, entity: et })
    }

    /// `λ Σ ‖w‖²` over weight matrices.
    pub fn l2_penalty(&self) -> f64 {
        let mut sum = 0.0;
        self.visit("", &mut |_, p| {
            if p.decay {
                sum += p.value.iter().map(|v| v * v).sum::<f64>();
            }
        });
        self.config.l2 * sum
    }

    /// Adds the gradient of [`SluModel::l2_penalty`].
    pub fn add_l2_grad(&mut self) {
        let l2 = self.config.l2;
        if l2 == 0.0 {
            return;
        }
        self.visit_mut("", &mut |_, p| {
            if p.decay {
                p.grad.scaled_add(2.0 * l2, &p.value);
            }
        });
    }

    /// Accumulates `scale` times the gradient of the joint loss on `utt`.
    /// Dropout is active when `rng` is given.
    pub fn accumulate_gradients<R: Rng>(&mut self, utt: &Utterance, scale: f64, rng: Option<&mut R>) -> Result<LossParts> {
        let n = utt.tokens.len();
        let c = self.run(&utt.tokens, rng)?;
        let (gi, gt) = self.gold_indices(&utt.intent, &utt.bio_tags, n)?;
        let h = self.config.hidden;

        // Intent head.
        let probs = softmax(c.intent_logits.view());
        let ic_loss = -probs[gi].ln();
        let mut d_logits = probs * scale;
        d_logits[gi] -= scale;
        let d_repr = self.intent.backward(
            c.intent_repr.view().insert_axis(Axis(0)),
            d_logits.view().insert_axis(Axis(0)),
        );
        let mut d_ic = Array2::zeros(c.ic_out.dim());
        d_ic.slice_mut(s![n - 1, ..h]).assign(&d_repr.slice(s![0, ..h]));
        d_ic.slice_mut(s![0, h..]).assign(&d_repr.slice(s![0, h..]));
        let mut d_u = self.ic.backward(&c.ic, (d_ic * &c.ic_mask).view());

        // Entity head.
        let (et_loss, g) = crf::crf_nll_with_grad(c.emissions.view(), self.crf.view(), &gt)?;
        self.crf.trans.grad.scaled_add(scale, &g.trans);
        self.crf.start.grad.row_mut(0).scaled_add(scale, &g.start);
        self.crf.end.grad.row_mut(0).scaled_add(scale, &g.end);
        let d_et = self.et_proj.backward(c.et_out.view(), (g.emissions * scale).view());
        d_u += &self.et.backward(&c.et, (d_et * &c.et_mask).view());

        // Shared layer, with ELMoL mixing on top of it.
        let mut d_e = Array2::zeros(c.e.dim());
        let mut d_rc = Array2::zeros(c.rc.dim());
        match (&self.input, self.mixing.as_mut()) {
            (InputLayer::Elmol { .. }, Some(mix)) => {
                let grads = mix.backward(&[c.e.slice(s![1..=n, ..]), c.rc.slice(s![1..=n, ..])], d_u.view());
                d_e.slice_mut(s![1..=n, ..]).assign(&grads[0]);
                d_rc.slice_mut(s![1..=n, ..]).assign(&grads[1]);
            }
            _ => d_rc.slice_mut(s![1..=n, ..]).assign(&d_u),
        }
        d_e += &self.shared.backward(&c.shared, (d_rc * &c.shared_mask).view());
        let d_x = d_e * &c.emb_mask;

        // Input layer.
        if let (InputLayer::Elmo { .. }, Some(mix)) = (&self.input, self.mixing.as_mut()) {
            let views: Vec<ArrayView2<f64>> = c.elmo_inputs.iter().map(|a| a.view()).collect();
            mix.backward(&views, d_x.view());
        } else if let Some(table) = self.input.table_mut() {
            let w = table.value.ncols();
            for (row, &id) in c.ids.iter().enumerate() {
                let mut g = table.grad.row_mut(id);
                g += &d_x.slice(s![row, ..w]);
            }
        }
        Ok(LossParts {
            intent: ic_loss,
            entity: et_loss,
        })
    }

    pub fn predict<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Prediction> {
        let trace = self.forward(tokens)?;
        let probs = softmax(trace.intent_logits.view());
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        let path = crf::viterbi(trace.emissions.view(), self.crf.view())?;
        let mut tags: Vec<String> = path
            .tags
            .iter()
            .map(|&t| self.label_space.tag_name(t).expect("decoded tag within label space"))
            .collect();
        repair_bio(&mut tags);
        Ok(Prediction {
            intent: self.label_space.intents()[best].clone(),
            tags,
            intent_probs: probs.to_vec(),
        })
    }

    /// Copy of this architecture for `label_space` with every trainable
    /// parameter freshly initialized from `seed`. Fixed tables and a frozen
    /// LM are shared.
    pub fn fresh_like(&self, label_space: LabelSpace, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = self.input.reinitialized(&mut rng);
        let shared = BiLstm::new(self.shared.input_dim(), self.config.hidden, &mut rng);
        let mixing = self.mixing.as_ref().map(|m| Mixing::new(m.s.value.ncols()));
        Self::assemble(label_space, input, mixing, shared, self.config.clone(), &mut rng)
    }

    pub fn to_container(&self) -> Result<Container> {
        let vocab = match &self.input {
            InputLayer::Elmo { .. } => None,
            other => Some(other.vocab().clone()),
        };
        let lm_meta = self.frozen_lm().map(BiLm::embedded_meta).transpose()?;
        let meta = CheckpointMeta {
            mode: self.mode(),
            config: self.config.clone(),
            label_space: self.label_space.clone(),
            vocab,
            lm: lm_meta,
        };
        let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(meta)?);
        c.push_params("", self);
        match &self.input {
            InputLayer::Pretrained { fixed, .. } => c.push("fixed.vectors", fixed.clone()),
            InputLayer::Elmol { chars, .. } => c.push("fixed.chars", chars.clone()),
            InputLayer::Elmo { lm } => c.push_params("lm", lm.as_ref()),
            InputLayer::Trainable { .. } => {}
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
        let missing = |what: &str| Error::Checkpoint(format!("{what} missing from model checkpoint"));
        let table = || -> Result<Param> {
            let t = c.get("embedding.table").ok_or_else(|| missing("embedding table"))?;
            Ok(Param::new(t.clone(), true))
        };
        let vocab = || meta.vocab.clone().ok_or_else(|| missing("vocabulary"));
        let input = match meta.mode {
            EmbeddingMode::NoUt => InputLayer::Trainable {
                vocab: vocab()?,
                table: table()?,
            },
            EmbeddingMode::Pretrained => InputLayer::Pretrained {
                vocab: vocab()?,
                table: table()?,
                fixed: c.get("fixed.vectors").ok_or_else(|| missing("fixed vectors"))?.clone(),
            },
            EmbeddingMode::Elmol => InputLayer::Elmol {
                vocab: vocab()?,
                table: table()?,
                chars: c.get("fixed.chars").ok_or_else(|| missing("character table"))?.clone(),
            },
            EmbeddingMode::Elmo => {
                let lm_meta = meta.lm.clone().ok_or_else(|| missing("LM"))?;
                let mut wrapper = c.clone();
                wrapper.meta = serde_json::json!({ "lm": lm_meta });
                InputLayer::Elmo {
                    lm: Arc::new(BiLm::from_container(&wrapper, "lm")?),
                }
            }
        };
        let shared_in = input.output_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shared = BiLstm::new(shared_in, meta.config.hidden, &mut rng);
        let mixing = match &input {
            InputLayer::Elmo { lm } => Some(Mixing::new(lm.num_layers() + 1)),
            InputLayer::Elmol { .. } => Some(Mixing::new(2)),
            _ => None,
        };
        let mut model = Self::assemble(meta.label_space, input, mixing, shared, meta.config, &mut rng);
        c.fill_params("", &mut model)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        SluModel::from_container(&Container::load(path)?)
    }
}

/// Re-targets `model` to `new_space`: groups named in `keep` are copied
/// bit-exactly and everything else is freshly initialized from `seed`.
pub fn replace_heads(model: &SluModel, new_space: LabelSpace, keep: &[&str], seed: u64) -> Result<SluModel> {
    let keep: BTreeSet<&str> = keep.iter().copied().collect();
    if let Some(bad) = keep.iter().find(|g| !GROUPS.contains(g)) {
        return Err(Error::InvalidArgument(format!("unknown parameter group `{bad}`")));
    }
    if let Some(label) = keep.iter().find(|g| LABEL_HEADS.contains(g)) {
        return Err(Error::InvalidArgument(format!(
            "group `{label}` depends on the label space and cannot be kept"
        )));
    }
    let mut fresh = model.fresh_like(new_space, seed);
    let mut source = Vec::new();
    model.visit("", &mut |name, p| {
        if keep.contains(group_of(name)) {
            source.push((name.to_string(), p.value.clone()));
        }
    });
    let mut failure = None;
    fresh.visit_mut("", &mut |name, p| {
        if !keep.contains(group_of(name)) || failure.is_some() {
            return;
        }
        match source.iter().find(|(n, _)| n == name) {
            Some((_, v)) if v.dim() == p.value.dim() => p.value.assign(v),
            Some((_, v)) => {
                failure = Some(format!("`{name}`: {:?} cannot replace {:?}", v.dim(), p.value.dim()))
            }
            None => failure = Some(format!("`{name}` missing from the source model")),
        }
    });
    match failure {
        Some(m) => Err(Error::Shape(m)),
        None => Ok(fresh),
    }
}

impl Params for SluModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(t) = self.input.table() {
            f(&join(prefix, "embedding.table"), t);
        }
        if let Some(m) = &self.mixing {
            m.visit(&join(prefix, MIXING), f);
        }
        self.shared.visit(&join(prefix, SHARED_BIRNN), f);
        self.et.visit(&join(prefix, ET_BIRNN), f);
        self.et_proj.visit(&join(prefix, ET_PROJECTION), f);
        self.crf.visit(&join(prefix, CRF), f);
        self.ic.visit(&join(prefix, IC_BIRNN), f);
        self.intent.visit(&join(prefix, INTENT_SOFTMAX), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(t) = self.input.table_mut() {
            f(&join(prefix, "embedding.table"), t);
        }
        if let Some(m) = &mut self.mixing {
            m.visit_mut(&join(prefix, MIXING), f);
        }
        self.shared.visit_mut(&join(prefix, SHARED_BIRNN), f);
        self.et.visit_mut(&join(prefix, ET_BIRNN), f);
        self.et_proj.visit_mut(&join(prefix, ET_PROJECTION), f);
        self.crf.visit_mut(&join(prefix, CRF), f);
        self.ic.visit_mut(&join(prefix, IC_BIRNN), f);
        self.intent.visit_mut(&join(prefix, INTENT_SOFTMAX), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn space() -> LabelSpace {
        LabelSpace::new(["a", "b", "c"], ["city", "date"]).unwrap()
    }

    fn small_config() -> SluConfig {
        SluConfig {
            hidden: 4,
            dropout: 0.0,
            l2: 0.0,
            no_ut_dim: 6,
            pretrained_trainable_dim: 3,
        }
    }

    fn model() -> SluModel {
        let vocab = Vocabulary::from_words(tokenize("fly to boston on monday"));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = InputLayer::trainable(vocab, 6, &mut rng);
        SluModel::new(space(), input, small_config(), 2).unwrap()
    }

    #[test]
    fn trace_shapes() {
        let m = model();
        let t = m.forward(&["fly", "to", "boston"]).unwrap();
        assert_eq!(t.emissions.dim(), (3, 5));
        assert_eq!(t.intent_logits.len(), 3);
        assert_eq!(t.entity.dim(), (3, 8));
        assert_eq!(t.intent_repr.slice(s![..4]), t.intent_states.row(2).slice(s![..4]));
        assert_eq!(t.intent_repr.slice(s![4..]), t.intent_states.row(0).slice(s![4..]));
        assert!(m.forward::<&str>(&[]).is_err());
    }

    #[test]
    fn single_token_intent_representation() {
        let t = model().forward(&["boston"]).unwrap();
        assert_eq!(t.intent_repr, t.intent_states.row(0));
    }

    #[test]
    fn groups_partition_parameters() {
        let m = model();
        let mut seen = Vec::new();
        m.visit("", &mut |name, _| seen.push(name.to_string()));
        assert!(seen.iter().all(|n| GROUPS.contains(&group_of(n))));
        let mut dedup = seen.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), seen.len());
        assert_eq!(m.groups(), vec![EMBEDDING, SHARED_BIRNN, ET_BIRNN, ET_PROJECTION, CRF, IC_BIRNN, INTENT_SOFTMAX]);
    }

    #[test]
    fn replace_heads_resizes_and_keeps() {
        let m = model();
        let target = LabelSpace::new((0..26).map(|i| format!("i{i}")), ["x"]).unwrap();
        let keep = [EMBEDDING, SHARED_BIRNN, ET_BIRNN, IC_BIRNN];
        let r = replace_heads(&m, target.clone(), &keep, 9).unwrap();
        assert_eq!(r.intent.output_dim(), 26);
        assert_eq!(r.et_proj.output_dim(), 3);
        assert_eq!(r.shared, m.shared);
        assert_eq!(r.et, m.et);
        assert_eq!(r.ic, m.ic);
        assert_eq!(r.input, m.input);
        assert_eq!(replace_heads(&m, target.clone(), &[], 9).unwrap(), m.fresh_like(target.clone(), 9));
        assert!(replace_heads(&m, target.clone(), &["crf"], 9).is_err());
        assert!(replace_heads(&m, target, &["bogus"], 9).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model();
        let back = SluModel::from_container(&m.to_container().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn l2_penalty_difference() {
        let mut m = model();
        let utt = Utterance::new(tokenize("fly to boston"), vec!["O".into(), "O".into(), "B-city".into()], "a");
        let trace = m.forward(&utt.tokens).unwrap();
        let plain = m.joint_loss(&trace, &utt.intent, &utt.bio_tags).unwrap().total();
        m.config.l2 = 0.01;
        let mut sum = 0.0;
        m.visit("", &mut |_, p| {
            if p.decay {
                sum += p.value.iter().map(|v| v * v).sum::<f64>()
            }
        });
        let with = plain + m.l2_penalty();
        assert!((with - plain - 0.01 * sum).abs() < 1e-12);
        assert!(m.joint_loss(&trace, "zzz", &utt.bio_tags).is_err());
    }
}
