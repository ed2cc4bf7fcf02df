//! Labeled SLU datasets, unlabeled text pools, vocabularies and label spaces.
//!
//! Labeled data is read either from CoNLL-style TSV
//!
//! ```text
//! # intent: GetRecipe
//! how	O
//! to	O
//! make	O
//! kadhai	B-Dish
//! chicken	I-Dish
//! ```
//!
//! (utterances separated by blank lines) or from a JSON array of
//! `{"tokens": [...], "tags": [...], "intent": "..."}` objects. A dataset
//! directory holds one file per split: `train`, `dev` and `test` with the
//! `.tsv` or `.json` extension.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

/// Whitespace tokenization with lowercasing.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    #[serde(rename = "tags")]
    pub bio_tags: Vec<String>,
    pub intent: String,
}

impl Utterance {
    pub fn new(tokens: Vec<String>, bio_tags: Vec<String>, intent: impl Into<String>) -> Self {
        Utterance {
            tokens,
            bio_tags,
            intent: intent.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A parsed BIO tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bio<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

pub fn parse_tag(tag: &str) -> Option<Bio<'_>> {
    if tag == "O" {
        return Some(Bio::Outside);
    }
    let (prefix, ty) = tag.split_once('-')?;
    if ty.is_empty() {
        return None;
    }
    match prefix {
        "B" => Some(Bio::Begin(ty)),
        "I" => Some(Bio::Inside(ty)),
        _ => None,
    }
}

/// Checks the BIO constraints. Returns the position of the first offending
/// tag, if any.
pub fn validate_bio<S: AsRef<str>>(tags: &[S]) -> std::result::Result<(), usize> {
    let mut open: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        match parse_tag(tag.as_ref()).ok_or(i)? {
            Bio::Outside => open = None,
            Bio::Begin(ty) => open = Some(ty),
            Bio::Inside(ty) => {
                if open != Some(ty) {
                    return Err(i);
                }
            }
        }
    }
    Ok(())
}

/// Converts every orphan `I-X` (after `O`, at the start, or after a tag of a
/// different type) into `B-X`. Tags that do not parse are left untouched.
/// Returns the number of tags changed.
pub fn repair_bio(tags: &mut [String]) -> usize {
    let mut repaired = 0;
    let mut open: Option<String> = None;
    for tag in tags.iter_mut() {
        let replacement = match parse_tag(tag) {
            Some(Bio::Outside) | None => {
                open = None;
                None
            }
            Some(Bio::Begin(ty)) => {
                open = Some(ty.to_string());
                None
            }
            Some(Bio::Inside(ty)) => {
                if open.as_deref() == Some(ty) {
                    None
                } else {
                    open = Some(ty.to_string());
                    Some(format!("B-{ty}"))
                }
            }
        };
        if let Some(r) = replacement {
            *tag = r;
            repaired += 1;
        }
    }
    repaired
}

/// Intents and entity types, each sorted so indices are reproducible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    intents: Vec<String>,
    entity_types: Vec<String>,
}

impl LabelSpace {
    pub fn new<I, E>(intents: I, entity_types: E) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: Into<String>,
        E: IntoIterator,
        E::Item: Into<String>,
    {
        let intents: BTreeSet<String> = intents.into_iter().map(Into::into).collect();
        let entity_types: BTreeSet<String> = entity_types.into_iter().map(Into::into).collect();
        if intents.is_empty() {
            return Err(Error::Validation("label space has no intents".into()));
        }
        Ok(LabelSpace {
            intents: intents.into_iter().collect(),
            entity_types: entity_types.into_iter().collect(),
        })
    }

    /// Collects every intent and entity type seen in `utterances`.
    pub fn from_utterances<'a>(utterances: impl IntoIterator<Item = &'a Utterance>) -> Result<Self> {
        let mut intents = BTreeSet::new();
        let mut types = BTreeSet::new();
        for u in utterances {
            intents.insert(u.intent.clone());
            for tag in &u.bio_tags {
                if let Some(Bio::Begin(ty) | Bio::Inside(ty)) = parse_tag(tag) {
                    types.insert(ty.to_string());
                }
            }
        }
        LabelSpace::new(intents, types)
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn intent_index(&self, intent: &str) -> Option<usize> {
        self.intents.binary_search_by(|x| x.as_str().cmp(intent)).ok()
    }

    /// Number of BIO tags: `O` plus `B-`/`I-` per entity type.
    pub fn num_tags(&self) -> usize {
        1 + 2 * self.entity_types.len()
    }

    /// Tag strings in index order: `O`, then `B-X`, `I-X` for each type.
    pub fn tags(&self) -> Vec<String> {
        let mut tags = Vec::with_capacity(self.num_tags());
        tags.push("O".to_string());
        for ty in &self.entity_types {
            tags.push(format!("B-{ty}"));
            tags.push(format!("I-{ty}"));
        }
        tags
    }

    pub fn tag_index(&self, tag: &str) -> Option<usize> {
        let type_index = |ty: &str| self.entity_types.binary_search_by(|x| x.as_str().cmp(ty)).ok();
        match parse_tag(tag)? {
            Bio::Outside => Some(0),
            Bio::Begin(ty) => type_index(ty).map(|i| 1 + 2 * i),
            Bio::Inside(ty) => type_index(ty).map(|i| 2 + 2 * i),
        }
    }

    pub fn tag_name(&self, index: usize) -> Option<String> {
        if index == 0 {
            return Some("O".to_string());
        }
        let ty = self.entity_types.get((index - 1) / 2)?;
        Some(if index % 2 == 1 {
            format!("B-{ty}")
        } else {
            format!("I-{ty}")
        })
    }

    /// Checks that the utterance's intent and entity types belong to this space.
    pub fn check(&self, u: &Utterance) -> Result<()> {
        if self.intent_index(&u.intent).is_none() {
            return Err(Error::Validation(format!("intent `{}` is not in the label space", u.intent)));
        }
        for tag in &u.bio_tags {
            if self.tag_index(tag).is_none() {
                return Err(Error::Validation(format!("tag `{tag}` is not in the label space")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub label_space: LabelSpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &Utterance> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// Labels stripped; the raw token sequences of the training split.
    pub fn train_text(&self) -> Vec<Vec<String>> {
        self.train.iter().map(|u| u.tokens.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    ConllTsv,
    Json,
}

impl DataFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DataFormat::ConllTsv => "tsv",
            DataFormat::Json => "json",
        }
    }
}

/// A loaded dataset along with the number of BIO tags that were repaired.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    pub repairs: usize,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_conll(path: &Path, text: &str) -> Result<Vec<(Utterance, usize)>> {
    let mut out = Vec::new();
    let mut current: Option<(Utterance, usize)> = None;
    let format_err = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if let Some(u) = current.take() {
                out.push(u);
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(intent) = rest.strip_prefix("intent:") {
                if let Some(u) = current.take() {
                    out.push(u);
                }
                let intent = intent.trim();
                if intent.is_empty() {
                    return Err(format_err(lineno, "empty intent label".into()));
                }
                current = Some((Utterance::new(Vec::new(), Vec::new(), intent), lineno));
                continue;
            }
            return Err(format_err(lineno, format!("unknown header line `{line}`")));
        }
        let (utt, _) = current
            .as_mut()
            .ok_or_else(|| format_err(lineno, "token line before `# intent:` header".into()))?;
        let mut fields = line.split('\t');
        let (token, tag) = match (fields.next(), fields.next(), fields.next()) {
            (Some(tok), Some(tag), None) if !tok.trim().is_empty() && !tag.trim().is_empty() => {
                (tok.trim(), tag.trim())
            }
            _ => return Err(format_err(lineno, format!("expected `<token>\\t<tag>`, got `{line}`"))),
        };
        if parse_tag(tag).is_none() {
            return Err(format_err(lineno, format!("malformed BIO tag `{tag}`")));
        }
        utt.tokens.push(token.to_lowercase());
        utt.bio_tags.push(tag.to_string());
    }
    if let Some(u) = current.take() {
        out.push(u);
    }
    for (u, line) in &out {
        if u.is_empty() {
            return Err(format_err(*line, "utterance has no tokens".into()));
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct JsonUtterance {
    tokens: Vec<String>,
    tags: Vec<String>,
    intent: String,
}

fn parse_json(path: &Path, text: &str) -> Result<Vec<(Utterance, usize)>> {
    let items: Vec<JsonUtterance> = serde_json::from_str(text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.into_iter().enumerate() {
        // JSON records carry no line numbers of their own; report the 1-based record index.
        let err = |message: String| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if item.tokens.is_empty() {
            return Err(err("utterance has no tokens".into()));
        }
        if item.tokens.len() != item.tags.len() {
            return Err(err(format!(
                "{} tokens but {} tags",
                item.tokens.len(),
                item.tags.len()
            )));
        }
        if let Some(bad) = item.tags.iter().find(|t| parse_tag(t).is_none()) {
            return Err(err(format!("malformed BIO tag `{bad}`")));
        }
        let tokens = item.tokens.iter().map(|t| t.to_lowercase()).collect();
        out.push((Utterance::new(tokens, item.tags, item.intent), i + 1));
    }
    Ok(out)
}

/// Reads one split file. Orphan `I-X` tags are repaired to `B-X`; the
/// second element of the result is the number of repaired tags.
pub fn read_split(path: &Path, format: DataFormat) -> Result<(Vec<Utterance>, usize)> {
    let text = read_to_string(path)?;
    let parsed = match format {
        DataFormat::ConllTsv => parse_conll(path, &text)?,
        DataFormat::Json => parse_json(path, &text)?,
    };
    let mut repairs = 0;
    let utterances = parsed
        .into_iter()
        .map(|(mut u, _)| {
            repairs += repair_bio(&mut u.bio_tags);
            u
        })
        .collect();
    Ok((utterances, repairs))
}

pub fn split_path(dir: &Path, split: Split, format: DataFormat) -> PathBuf {
    dir.join(format!("{}.{}", split.name(), format.extension()))
}

/// Loads `train`, `dev` and `test` from a dataset directory.
///
/// When `label_space` is given every utterance is checked against it;
/// otherwise the space is collected from all three splits.
pub fn load_labeled(dir: &Path, format: DataFormat, label_space: Option<&LabelSpace>) -> Result<Loaded> {
    let mut repairs = 0;
    let mut read = |split| -> Result<Vec<Utterance>> {
        let (utts, r) = read_split(&split_path(dir, split, format), format)?;
        repairs += r;
        Ok(utts)
    };
    let train = read(Split::Train)?;
    let dev = read(Split::Dev)?;
    let test = read(Split::Test)?;
    let label_space = match label_space {
        Some(space) => space.clone(),
        None => LabelSpace::from_utterances(train.iter().chain(&dev).chain(&test))?,
    };
    for u in train.iter().chain(&dev).chain(&test) {
        label_space.check(u)?;
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(Loaded {
        dataset: Dataset {
            name,
            train,
            dev,
            test,
            label_space,
        },
        repairs,
    })
}

/// Writes utterances in the CoNLL-TSV layout.
pub fn write_conll<'a>(utterances: impl IntoIterator<Item = &'a Utterance>) -> String {
    let mut out = String::new();
    for u in utterances {
        out.push_str("# intent: ");
        out.push_str(&u.intent);
        out.push('\n');
        for (tok, tag) in u.tokens.iter().zip(&u.bio_tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn save_dataset(dataset: &Dataset, dir: &Path, format: DataFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in [Split::Train, Split::Dev, Split::Test] {
        let path = split_path(dir, split, format);
        let utts = dataset.split(split);
        let text = match format {
            DataFormat::ConllTsv => write_conll(utts),
            DataFormat::Json => serde_json::to_string_pretty(utts)?,
        };
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlabeledCorpus {
    pub sentences: Vec<Vec<String>>,
    pub token_count: usize,
}

impl UnlabeledCorpus {
    /// Pools sentences, dropping exact duplicates (first occurrence wins)
    /// and empty sentences.
    pub fn from_sentences(sentences: impl IntoIterator<Item = Vec<String>>) -> Self {
        let mut seen = HashSet::new();
        let mut kept = Vec::new();
        for s in sentences {
            if s.is_empty() {
                continue;
            }
            if seen.insert(s.join(" ")) {
                kept.push(s);
            }
        }
        let token_count = kept.iter().map(Vec::len).sum();
        UnlabeledCorpus {
            sentences: kept,
            token_count,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Reads plain-text files (one sentence per line) into a deduplicated pool.
pub fn load_unlabeled<P: AsRef<Path>>(paths: &[P]) -> Result<UnlabeledCorpus> {
    let mut sentences = Vec::new();
    for p in paths {
        let text = read_to_string(p.as_ref())?;
        sentences.extend(text.lines().map(tokenize));
    }
    let corpus = UnlabeledCorpus::from_sentences(sentences);
    if corpus.is_empty() {
        return Err(Error::Validation("unlabeled pool is empty".into()));
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        Vocabulary::from_words(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const BOS_ID: usize = 2;
    pub const EOS_ID: usize = 3;
    pub const NUM_SPECIALS: usize = 4;

    /// Words occurring at least `min_count` times, ordered by descending
    /// frequency and then lexicographically, after the special symbols.
    pub fn build<'a, I, S>(sentences: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let min_count = min_count.max(1);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for w in s.as_ref() {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let specials = [PAD, UNK, BOS, EOS];
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !specials.contains(w))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let words = specials
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Self::from_words(words)
    }

    pub fn from_dataset(dataset: &Dataset, min_count: usize) -> Self {
        let sentences: Vec<&[String]> = dataset.train.iter().map(|u| u.tokens.as_slice()).collect();
        Self::build(sentences, min_count)
    }

    pub fn from_corpus(corpus: &UnlabeledCorpus, min_count: usize) -> Self {
        Self::build(&corpus.sentences, min_count)
    }

    /// Rebuilds a vocabulary from its full word list (specials included).
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Entries that are not special symbols.
    pub fn num_regular(&self) -> usize {
        self.words.len() - Self::NUM_SPECIALS
    }

    pub fn get(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.get(t.as_ref())).collect()
    }

    /// Token ids framed by sentence-begin and sentence-end symbols.
    pub fn encode_framed<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(Self::BOS_ID);
        ids.extend(tokens.iter().map(|t| self.get(t.as_ref())));
        ids.push(Self::EOS_ID);
        ids
    }
}

/// Uniform sample of `size` training utterances without replacement.
/// Dev and test are left untouched; the selected utterances keep their
/// original relative order.
pub fn sample_low_resource(dataset: &Dataset, size: usize, seed: u64) -> Result<Dataset> {
    let n = dataset.train.len();
    if size > n {
        return Err(Error::InvalidArgument(format!(
            "requested {size} training samples but only {n} are available"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, size).into_vec();
    picked.sort_unstable();
    Ok(Dataset {
        name: format!("{}-{}-s{}", dataset.name, size, seed),
        train: picked.into_iter().map(|i| dataset.train[i].clone()).collect(),
        dev: dataset.dev.clone(),
        test: dataset.test.clone(),
        label_space: dataset.label_space.clone(),
    })
}
