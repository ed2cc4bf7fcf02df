//! End-to-end training pipelines for each transfer condition and the
//! low-resource sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_low_resource, Dataset, Vocabulary};
use crate::embeddings::WordVectors;
use crate::error::{Error, Result};
use crate::lm::BiLm;
use crate::metrics::{paired_significance, MetricReport, Significance};
use crate::model::{replace_heads, InputLayer, SluConfig, SluModel, LABEL_HEADS};
use crate::schedules::ScheduleConfig;
use crate::train::{evaluate_model, fit, EpochRecord, LrPoint, TrainOptions};
use crate::train_util::fingerprint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Condition {
    NoUt,
    Pretrained,
    Elmo,
    Elmol,
    NoUtSt,
    PretrainedSt,
    ElmoSt,
    ElmolSt,
}

impl Condition {
    pub const ALL: [Condition; 8] = [
        Condition::NoUt,
        Condition::Pretrained,
        Condition::Elmo,
        Condition::Elmol,
        Condition::NoUtSt,
        Condition::PretrainedSt,
        Condition::ElmoSt,
        Condition::ElmolSt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::NoUt => "no-ut",
            Condition::Pretrained => "pretrained",
            Condition::Elmo => "elmo",
            Condition::Elmol => "elmol",
            Condition::NoUtSt => "no-ut+st",
            Condition::PretrainedSt => "pretrained+st",
            Condition::ElmoSt => "elmo+st",
            Condition::ElmolSt => "elmol+st",
        }
    }

    /// The condition without supervised transfer.
    pub fn base(self) -> Condition {
        match self {
            Condition::NoUtSt => Condition::NoUt,
            Condition::PretrainedSt => Condition::Pretrained,
            Condition::ElmoSt => Condition::Elmo,
            Condition::ElmolSt => Condition::Elmol,
            c => c,
        }
    }

    pub fn is_st(self) -> bool {
        self.base() != self
    }

    pub fn needs_lm(self) -> bool {
        matches!(self.base(), Condition::Elmo | Condition::Elmol)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == norm || c.name().replace('-', "") == norm.replace('-', ""))
            .ok_or_else(|| Error::Validation(format!("unknown condition `{s}`")))
    }
}

impl TryFrom<String> for Condition {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Condition> for String {
    fn from(c: Condition) -> Self {
        c.name().to_string()
    }
}

/// Everything one training run needs.
#[derive(Debug, Clone)]
pub struct PipelineSpec {
    pub condition: Condition,
    pub target: Arc<Dataset>,
    pub source: Option<Arc<Dataset>>,
    pub lm: Option<Arc<BiLm>>,
    pub word_vectors: Option<Arc<WordVectors>>,
    pub slu: SluConfig,
    /// Schedule on the target data.
    pub schedule: ScheduleConfig,
    /// Schedule on the source data (supervised-transfer conditions only).
    pub source_schedule: ScheduleConfig,
    pub train: TrainOptions,
    /// Seeds initialization and batch order.
    pub seed: u64,
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.condition.needs_lm() && self.lm.is_none() {
            return Err(Error::Validation(format!("condition {} needs an LM checkpoint", self.condition)));
        }
        if self.condition.base() == Condition::Elmol {
            if let Some(lm) = &self.lm {
                if lm.num_layers() != 1 {
                    return Err(Error::Validation(format!(
                        "condition {} needs a one-layer LM, got {} layers",
                        self.condition,
                        lm.num_layers()
                    )));
                }
            }
        }
        if self.condition.base() == Condition::Pretrained && self.word_vectors.is_none() {
            return Err(Error::Validation(format!("condition {} needs word vectors", self.condition)));
        }
        if self.condition.is_st() && self.source.is_none() {
            return Err(Error::Validation(format!("condition {} needs a source dataset", self.condition)));
        }
        self.schedule.validate()?;
        self.source_schedule.validate()
    }
}

pub const STAGE_LM: &str = "lm-pretrain";
pub const STAGE_SOURCE: &str = "source-finetune";
pub const STAGE_TARGET: &str = "target-finetune";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub dataset: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub dev: Option<MetricReport>,
    pub lr_trace: Vec<LrPoint>,
    /// Fingerprint of the LM parameters at the end of the stage.
    pub lm_fingerprint: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub condition: Condition,
    pub dataset: String,
    pub source: Option<String>,
    pub seed: u64,
    pub train_size: usize,
    pub schedule: ScheduleConfig,
    pub stages: Vec<StageRecord>,
    /// Dev metrics of the selected epoch of the final stage.
    pub dev: MetricReport,
    pub test: MetricReport,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
}

impl RunRecord {
    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }
}

/// A trained model with its record.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: SluModel,
    pub record: RunRecord,
}

fn lm_stage(lm: &BiLm) -> StageRecord {
    StageRecord {
        name: STAGE_LM.into(),
        dataset: "unlabeled".into(),
        epochs: Vec::new(),
        best_epoch: Some(lm.meta.best_epoch),
        dev: None,
        lr_trace: Vec::new(),
        lm_fingerprint: Some(fingerprint(lm, &[])),
    }
}

/// Fresh model for `condition` over `vocab_source` training text.
fn build_model(spec: &PipelineSpec, data: &[&Dataset], label_dataset: &Dataset) -> Result<SluModel> {
    let space = label_dataset.label_space.clone();
    let seed = spec.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe3b);
    let vocab = || Vocabulary::build(data.iter().flat_map(|d| d.train.iter().map(|u| &u.tokens)), 1);
    match spec.condition.base() {
        Condition::NoUt => {
            let input = InputLayer::trainable(vocab(), spec.slu.no_ut_dim, &mut rng);
            SluModel::new(space, input, spec.slu.clone(), seed)
        }
        Condition::Pretrained => {
            let vectors = spec.word_vectors.as_ref().expect("validated");
            let input = InputLayer::pretrained(vocab(), vectors, spec.slu.pretrained_trainable_dim, &mut rng);
            SluModel::new(space, input, spec.slu.clone(), seed)
        }
        Condition::Elmo => {
            let lm = spec.lm.clone().expect("validated");
            SluModel::new(space, InputLayer::Elmo { lm }, spec.slu.clone(), seed)
        }
        Condition::Elmol => {
            let bundle = spec.lm.as_ref().expect("validated").export_shared_layer()?;
            SluModel::from_shared_layer(space, &bundle, spec.slu.clone(), seed)
        }
        _ => unreachable!("base conditions only"),
    }
}

fn run_stage(
    name: &str,
    model: SluModel,
    data: &Dataset,
    schedule: &ScheduleConfig,
    opts: &TrainOptions,
) -> Result<(SluModel, StageRecord)> {
    info!("stage {name} on {} ({} training utterances)", data.name, data.train.len());
    let out = fit(model, &data.train, &data.dev, schedule, opts)?;
    let dev = out.history[out.best_epoch].dev;
    let record = StageRecord {
        name: name.into(),
        dataset: data.name.clone(),
        epochs: out.history,
        best_epoch: Some(out.best_epoch),
        dev: Some(dev),
        lr_trace: out.lr_trace,
        lm_fingerprint: out.model.frozen_lm().map(|lm| fingerprint(lm, &[])),
    };
    Ok((out.model, record))
}

fn check_lm_frozen(stages: &[StageRecord]) -> Result<()> {
    let prints: Vec<u64> = stages.iter().filter_map(|s| s.lm_fingerprint).collect();
    if prints.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::FreezeViolation("LM parameters changed between stages".into()));
    }
    Ok(())
}

fn finish(spec: &PipelineSpec, model: SluModel, stages: Vec<StageRecord>, started: Instant) -> Result<RunOutput> {
    check_lm_frozen(&stages)?;
    let test = evaluate_model(&model, &spec.target.test)?;
    let dev = stages.last().and_then(|s| s.dev).expect("final stage evaluated on dev");
    info!("{} on {}: test {test}", spec.condition, spec.target.name);
    Ok(RunOutput {
        model,
        record: RunRecord {
            condition: spec.condition,
            dataset: spec.target.name.clone(),
            source: spec.source.as_ref().filter(|_| spec.condition.is_st()).map(|d| d.name.clone()),
            seed: spec.seed,
            train_size: spec.target.train.len(),
            schedule: spec.schedule.clone(),
            stages,
            dev,
            test,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            checkpoint: None,
        },
    })
}

fn stage_options(spec: &PipelineSpec, offset: u64) -> TrainOptions {
    TrainOptions {
        seed: spec.seed.wrapping_mul(1_000_003).wrapping_add(offset),
        ..spec.train.clone()
    }
}

/// Trains on the target data only, for the four unsupervised-transfer
/// conditions.
pub fn train_ut(spec: &PipelineSpec) -> Result<RunOutput> {
    spec.validate()?;
    if spec.condition.is_st() {
        return Err(Error::InvalidArgument(format!("{} is a supervised-transfer condition", spec.condition)));
    }
    let started = Instant::now();
    let model = build_model(spec, &[&spec.target], &spec.target)?;
    let mut stages = Vec::new();
    if let Some(lm) = spec.lm.as_deref().filter(|_| spec.condition.needs_lm()) {
        stages.push(lm_stage(lm));
    }
    let (model, stage) = run_stage(STAGE_TARGET, model, &spec.target, &spec.schedule, &stage_options(spec, 0))?;
    stages.push(stage);
    finish(spec, model, stages, started)
}

/// Source pretraining followed by target fine-tuning with new label heads.
/// The frozen LM (ELMo) must come out of both stages bit-identical.
pub fn train_st(spec: &PipelineSpec) -> Result<RunOutput> {
    spec.validate()?;
    if !spec.condition.is_st() {
        return Err(Error::InvalidArgument(format!("{} has no supervised-transfer stage", spec.condition)));
    }
    let started = Instant::now();
    let source = spec.source.as_deref().expect("validated");
    let mut stages = Vec::new();
    if let Some(lm) = spec.lm.as_deref().filter(|_| spec.condition.needs_lm()) {
        stages.push(lm_stage(lm));
    }
    let model = build_model(spec, &[source, &spec.target], source)?;
    let (model, stage) = run_stage(STAGE_SOURCE, model, source, &spec.source_schedule, &stage_options(spec, 1))?;
    stages.push(stage);
    check_lm_frozen(&stages)?;

    let keep: Vec<&str> = model.groups().into_iter().filter(|g| !LABEL_HEADS.contains(g)).collect();
    let model = replace_heads(&model, spec.target.label_space.clone(), &keep, spec.seed.wrapping_add(7))?;
    let (model, stage) = run_stage(STAGE_TARGET, model, &spec.target, &spec.schedule, &stage_options(spec, 2))?;
    stages.push(stage);
    finish(spec, model, stages, started)
}

/// ELMo+ST: the provided LM, source training and target fine-tuning with
/// the LM frozen throughout.
pub fn train_elmo_plus_st(spec: &PipelineSpec) -> Result<RunOutput> {
    if spec.condition != Condition::ElmoSt {
        return Err(Error::InvalidArgument(format!("expected elmo+st, got {}", spec.condition)));
    }
    train_st(spec)
}

/// ELMoL+ST: LM-initialized shared layer, source training, then target
/// fine-tuning. The `PipelineSpec` schedules control unfreezing, discriminative
/// and triangular rates of each stage.
pub fn train_elmol_plus_st(spec: &PipelineSpec) -> Result<RunOutput> {
    if spec.condition != Condition::ElmolSt {
        return Err(Error::InvalidArgument(format!("expected elmol+st, got {}", spec.condition)));
    }
    train_st(spec)
}

/// Dispatches on the condition of `spec`.
pub fn run(spec: &PipelineSpec) -> Result<RunOutput> {
    if spec.condition.is_st() {
        train_st(spec)
    } else {
        train_ut(spec)
    }
}

/// Aggregate over seeds for one condition and sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub condition: Condition,
    pub size: usize,
    pub runs: usize,
    pub mean_ser: f64,
    pub std_ser: f64,
    pub mean_ica: f64,
    pub mean_ef1: f64,
}

/// Paired test of test-set SER between two conditions at one size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeComparison {
    pub size: usize,
    pub a: Condition,
    pub b: Condition,
    pub ser: Significance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub condition: Condition,
    /// Whether mean SER never rises by more than one standard deviation as
    /// the size grows.
    pub non_increasing: bool,
    pub violations: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    pub curves: Vec<CurvePoint>,
    pub comparisons: Vec<SizeComparison>,
    pub trends: Vec<TrendCheck>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One run per (condition, size, seed); the seed draws the training sample
/// and drives initialization and batch order. Dev and test splits stay
/// fixed. Sizes larger than the training split are skipped.
pub fn low_resource_sweep(
    specs: &[PipelineSpec],
    sizes: &[usize],
    seeds: &[u64],
    parallelism: usize,
) -> Result<SweepResult> {
    if specs.is_empty() || sizes.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs conditions, sizes and seeds".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let mut jobs = Vec::new();
    for spec in specs {
        for &size in sizes {
            if size > spec.target.train.len() {
                warn!(
                    "skipping size {size}: {} has only {} training utterances",
                    spec.target.name,
                    spec.target.train.len()
                );
                continue;
            }
            for &seed in seeds {
                jobs.push((spec, size, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let records: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|(spec, size, seed)| {
                let sample = sample_low_resource(&spec.target, *size, *seed)?;
                let run_spec = PipelineSpec {
                    target: Arc::new(sample),
                    seed: *seed,
                    ..(*spec).clone()
                };
                Ok(run(&run_spec)?.record)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut result = summarize(records);
    result.trends.retain(|t| specs.iter().any(|s| s.condition == t.condition));
    Ok(result)
}

/// Curves, pairwise tests and trend checks for a set of run records.
pub fn summarize(records: Vec<RunRecord>) -> SweepResult {
    let mut groups: BTreeMap<(Condition, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry((r.condition, r.train_size)).or_default().push(r);
    }
    let curves: Vec<CurvePoint> = groups
        .iter()
        .map(|(&(condition, size), runs)| {
            let sers: Vec<f64> = runs.iter().map(|r| r.test.ser).collect();
            let (mean_ser, std_ser) = mean_std(&sers);
            let n = runs.len() as f64;
            CurvePoint {
                condition,
                size,
                runs: runs.len(),
                mean_ser,
                std_ser,
                mean_ica: runs.iter().map(|r| r.test.ica).sum::<f64>() / n,
                mean_ef1: runs.iter().map(|r| r.test.ef1).sum::<f64>() / n,
            }
        })
        .collect();

    let conditions: Vec<Condition> = {
        let mut c: Vec<Condition> = records.iter().map(|r| r.condition).collect();
        c.sort();
        c.dedup();
        c
    };
    let sizes: Vec<usize> = {
        let mut s: Vec<usize> = records.iter().map(|r| r.train_size).collect();
        s.sort();
        s.dedup();
        s
    };
    let mut comparisons = Vec::new();
    for &size in &sizes {
        for (i, &a) in conditions.iter().enumerate() {
            for &b in &conditions[i + 1..] {
                let by_seed = |c: Condition| -> BTreeMap<u64, f64> {
                    groups
                        .get(&(c, size))
                        .map(|rs| rs.iter().map(|r| (r.seed, r.test.ser)).collect())
                        .unwrap_or_default()
                };
                let (sa, sb) = (by_seed(a), by_seed(b));
                let shared: Vec<u64> = sa.keys().filter(|k| sb.contains_key(k)).copied().collect();
                let xa: Vec<f64> = shared.iter().map(|k| sa[k]).collect();
                let xb: Vec<f64> = shared.iter().map(|k| sb[k]).collect();
                if let Ok(ser) = paired_significance(&xa, &xb) {
                    comparisons.push(SizeComparison { size, a, b, ser });
                }
            }
        }
    }

    let trends = conditions
        .iter()
        .map(|&condition| {
            let pts: Vec<&CurvePoint> = curves.iter().filter(|p| p.condition == condition).collect();
            let violations: Vec<(usize, usize)> = pts
                .windows(2)
                .filter(|w| w[1].mean_ser > w[0].mean_ser + w[0].std_ser.max(w[1].std_ser))
                .map(|w| (w[0].size, w[1].size))
                .collect();
            if !violations.is_empty() {
                warn!("{condition}: mean SER rises with more data at {violations:?}");
            }
            TrendCheck {
                condition,
                non_increasing: violations.is_empty(),
                violations,
            }
        })
        .collect();
    SweepResult {
        records,
        curves,
        comparisons,
        trends,
    }
}
