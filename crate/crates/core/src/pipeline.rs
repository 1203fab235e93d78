//! Iterative self-training: base model on the labeled set, pseudo-labels for
//! the unlabeled set (filtered or not), a fresh model on the union, repeat.
//!
//! A run directory holds everything needed to resume or audit a run:
//!
//! ```text
//! run/plan.json          plan plus a fingerprint of the input corpora
//! run/iter_NN/model.ckpt
//! run/iter_NN/pool.jsonl pool manifest (features in pool.bin)
//! run/iter_NN/decisions.jsonl   DUST mode only
//! run/iter_NN/report.json
//! run/reports.csv
//! run/timing.json        wall-clock seconds per stage, kept apart so reports stay reproducible
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_manifest, save_manifest, Corpus, CorpusError};
use crate::decode::{DecodeConfig, Fusion};
use crate::dust::{
    dust_filter, pool_from_decisions, pseudo_label_all, read_decision_log, write_decision_log, DustConfig, DustError,
    NetTranscriber, PseudoLabelPool, Transcriber,
};
use crate::lm::NGramModel;
use crate::nnet::{load_checkpoint, save_checkpoint, train, DropoutMode, ModelConfig, NnetError, Params, TrainHyper};
use crate::seeding::{derive_seed, hash_str, mix64};
use crate::textdist::{corpus_error_rate, werr, MetricError};

/// Seed stream used for the topline; iterations use their index and the
/// baseline uses 0.
pub const TOPLINE_STREAM: u64 = 0x7090;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid plan: {0}")]
    Config(String),
    #[error("bad input data: {0}")]
    Data(String),
    #[error("run directory {dir} was created by a different plan or different data")]
    PlanMismatch { dir: PathBuf },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Dust(#[from] DustError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Keep only pseudo-labels that pass the dropout-agreement filter.
    #[default]
    Dust,
    /// Keep every pseudo-label.
    StAll,
}

/// Which language model a decode uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LmCondition {
    NoLm,
    #[default]
    SourceLm,
    SourceTargetLm,
}

impl LmCondition {
    pub const ALL: [LmCondition; 3] = [LmCondition::NoLm, LmCondition::SourceLm, LmCondition::SourceTargetLm];

    pub fn name(self) -> &'static str {
        match self {
            LmCondition::NoLm => "no_lm",
            LmCondition::SourceLm => "source_lm",
            LmCondition::SourceTargetLm => "source_target_lm",
        }
    }
}

/// Language models available to a run. Missing models make the matching
/// conditions unavailable.
#[derive(Debug, Clone, Default)]
pub struct LmSet {
    pub source: Option<Arc<NGramModel>>,
    pub source_target: Option<Arc<NGramModel>>,
}

impl LmSet {
    pub fn get(&self, cond: LmCondition) -> Option<&Arc<NGramModel>> {
        match cond {
            LmCondition::NoLm => None,
            LmCondition::SourceLm => self.source.as_ref(),
            LmCondition::SourceTargetLm => self.source_target.as_ref(),
        }
    }

    fn has(&self, cond: LmCondition) -> bool {
        cond == LmCondition::NoLm || self.get(cond).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSettings {
    pub beam: usize,
    pub lm_weight: f64,
    pub length_bonus: f64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self { beam: 8, lm_weight: 0.3, length_bonus: 0.0 }
    }
}

impl DecodeSettings {
    pub fn config(&self, lm: Option<&Arc<NGramModel>>) -> DecodeConfig {
        DecodeConfig {
            beam: self.beam,
            fusion: lm.map(|lm| Fusion { lm: Arc::clone(lm), weight: self.lm_weight, length_bonus: self.length_bonus }),
        }
    }

    fn validate(&self, what: &str) -> Result<(), PipelineError> {
        if self.beam == 0 {
            return Err(PipelineError::Config(format!("{what}.beam must be >= 1")));
        }
        if !self.lm_weight.is_finite() || !self.length_bonus.is_finite() {
            return Err(PipelineError::Config(format!("{what}: fusion weights must be finite")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelSettings {
    #[serde(flatten)]
    pub decode: DecodeSettings,
    /// Language model fused while generating pseudo-labels.
    pub lm: LmCondition,
}

impl Default for PseudoLabelSettings {
    fn default() -> Self {
        Self { decode: DecodeSettings::default(), lm: LmCondition::SourceLm }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    #[serde(flatten)]
    pub decode: DecodeSettings,
    /// Condition summarized in `reports.csv`.
    pub primary: LmCondition,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { decode: DecodeSettings::default(), primary: LmCondition::SourceLm }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub subsample_stride: usize,
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub dropout_p: f32,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::new(1, 2);
        Self {
            subsample_stride: c.subsample_stride,
            n_blocks: c.n_blocks,
            d_model: c.d_model,
            n_heads: c.n_heads,
            ff_dim: c.ff_dim,
            dropout_p: c.dropout_p,
        }
    }
}

impl ModelShape {
    pub fn config(&self, input_dim: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            subsample_stride: self.subsample_stride,
            n_blocks: self.n_blocks,
            d_model: self.d_model,
            n_heads: self.n_heads,
            ff_dim: self.ff_dim,
            dropout_p: self.dropout_p,
            vocab_size,
        }
    }
}

/// Everything that determines a self-training run besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterationPlan {
    pub n_iterations: usize,
    pub mode: Mode,
    /// Root of every training seed in the run.
    pub seed: u64,
    pub model: ModelShape,
    /// Training hyperparameters for every model; `train.seed` is replaced by
    /// a seed derived from `seed`.
    pub train: TrainHyper,
    pub dust: DustConfig,
    pub pseudo_label: PseudoLabelSettings,
    /// Per-iteration switch for fusion during pseudo-labelling. The last
    /// entry repeats for later iterations.
    pub lm_schedule: Vec<bool>,
    pub eval: EvalSettings,
}

impl Default for IterationPlan {
    fn default() -> Self {
        Self {
            n_iterations: 5,
            mode: Mode::Dust,
            seed: 7,
            model: ModelShape::default(),
            train: TrainHyper::default(),
            dust: DustConfig::default(),
            pseudo_label: PseudoLabelSettings::default(),
            lm_schedule: vec![true],
            eval: EvalSettings::default(),
        }
    }
}

impl IterationPlan {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n_iterations == 0 {
            return Err(PipelineError::Config("n_iterations must be >= 1".into()));
        }
        if self.lm_schedule.is_empty() {
            return Err(PipelineError::Config("lm_schedule needs at least one entry".into()));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(PipelineError::Config("train.epochs and train.batch_size must be >= 1".into()));
        }
        self.dust.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.pseudo_label.decode.validate("pseudo_label")?;
        self.eval.decode.validate("eval")?;
        Ok(())
    }

    /// Whether fusion is used to generate pseudo-labels in 1-based `iteration`.
    pub fn uses_lm(&self, iteration: usize) -> bool {
        let idx = iteration.saturating_sub(1).min(self.lm_schedule.len() - 1);
        self.lm_schedule[idx]
    }

    fn hyper(&self, stream: u64) -> TrainHyper {
        TrainHyper { seed: derive_seed(self.seed, stream), ..self.train.clone() }
    }
}

/// Input corpora of an experiment. `unlabeled` may carry ground truth; it is
/// stripped before pseudo-labelling and only used for pool LER and the
/// topline.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentData<'a> {
    pub labeled: &'a Corpus,
    pub valid: &'a Corpus,
    pub unlabeled: &'a Corpus,
    /// Named test sets; `source` and `target` feed the CSV summary.
    pub test_sets: &'a [(String, Corpus)],
}

impl ExperimentData<'_> {
    fn validate(&self) -> Result<(), PipelineError> {
        for (name, c) in [("labeled", self.labeled), ("valid", self.valid), ("unlabeled", self.unlabeled)] {
            if c.is_empty() {
                return Err(PipelineError::Data(format!("{name} corpus is empty")));
            }
            if let Some(u) = c.utterances.iter().find(|u| u.domain.is_empty()) {
                return Err(PipelineError::Data(format!("utterance {} has no domain tag", u.id)));
            }
        }
        if self.labeled.utterances.iter().any(|u| u.transcript.is_none()) {
            return Err(PipelineError::Data("labeled corpus has utterances without transcripts".into()));
        }
        if self.labeled.alphabet != self.unlabeled.alphabet {
            return Err(PipelineError::Data("labeled and unlabeled corpora use different alphabets".into()));
        }
        if self.labeled.dim() != self.unlabeled.dim() {
            return Err(PipelineError::Data("labeled and unlabeled features differ in dimension".into()));
        }
        Ok(())
    }

    fn model_config(&self, plan: &IterationPlan) -> ModelConfig {
        let dim = self.labeled.dim().expect("validated nonempty");
        plan.model.config(dim, self.labeled.alphabet.vocab_size())
    }

    /// Stable digest of ids, frame counts and transcripts of every corpus.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0u64;
        let mut feed = |c: &Corpus| {
            for u in &c.utterances {
                h = mix64(h ^ hash_str(&u.id));
                h = mix64(h ^ u.n_frames() as u64);
                for &t in u.transcript.as_ref().map(|t| t.as_slice()).unwrap_or(&[]) {
                    h = mix64(h ^ u64::from(t));
                }
            }
            h = mix64(h ^ 0xff);
        };
        feed(self.labeled);
        feed(self.valid);
        feed(self.unlabeled);
        for (_, c) in self.test_sets {
            feed(c);
        }
        h
    }
}

/// Corpus-level error rate (percent), keyed by test set then condition.
pub type WerTable = BTreeMap<String, BTreeMap<String, f64>>;
/// WERR (percent), keyed like [`WerTable`]; `None` where the baseline does
/// not exceed the topline.
pub type WerrTable = BTreeMap<String, BTreeMap<String, Option<f64>>>;

/// Corpus-level error rate of each transcriber on each test set, decoding
/// with dropout off.
pub fn evaluate(
    transcribers: &[(String, &dyn Transcriber)],
    test_sets: &[(String, Corpus)],
) -> Result<WerTable, PipelineError> {
    let mut table = WerTable::new();
    for (set_name, set) in test_sets {
        let truth = set.truth()?;
        let mut row = BTreeMap::new();
        for (cond, t) in transcribers {
            let hyps = set
                .utterances
                .par_iter()
                .map(|u| t.transcribe(u.features.view(), DropoutMode::Off))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| PipelineError::Data(format!("decoding {set_name}: {e}")))?;
            let pairs = set.utterances.iter().zip(&hyps).map(|(u, h)| (h, &truth[&u.id]));
            row.insert(cond.clone(), corpus_error_rate(pairs)?);
        }
        table.insert(set_name.clone(), row);
    }
    Ok(table)
}

/// Evaluate a network under every condition whose LM is available.
pub fn evaluate_model(
    params: &Params,
    test_sets: &[(String, Corpus)],
    settings: &EvalSettings,
    lms: &LmSet,
) -> Result<WerTable, PipelineError> {
    let transcribers: Vec<(String, NetTranscriber<'_>)> = LmCondition::ALL
        .into_iter()
        .filter(|c| lms.has(*c))
        .map(|c| (c.name().to_owned(), NetTranscriber { params, decode: settings.decode.config(lms.get(c)) }))
        .collect();
    let refs: Vec<(String, &dyn Transcriber)> =
        transcribers.iter().map(|(n, t)| (n.clone(), t as &dyn Transcriber)).collect();
    evaluate(&refs, test_sets)
}

/// WERR of `model` for every (set, condition) present in all three tables.
pub fn werr_table(baseline: &WerTable, topline: &WerTable, model: &WerTable) -> WerrTable {
    let mut out = WerrTable::new();
    for (set, row) in model {
        let (Some(b), Some(t)) = (baseline.get(set), topline.get(set)) else { continue };
        let mut werrs = BTreeMap::new();
        for (cond, &m) in row {
            if let (Some(&bv), Some(&tv)) = (b.get(cond), t.get(cond)) {
                werrs.insert(cond.clone(), werr(bv, tv, m).ok());
            }
        }
        out.insert(set.clone(), werrs);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Trained on the labeled set only.
    Baseline,
    /// Trained on the labeled set plus the unlabeled set with its ground truth.
    Topline,
}

impl ReferenceKind {
    pub fn name(self) -> &'static str {
        match self {
            ReferenceKind::Baseline => "baseline",
            ReferenceKind::Topline => "topline",
        }
    }

    fn stream(self) -> u64 {
        match self {
            ReferenceKind::Baseline => 0,
            ReferenceKind::Topline => TOPLINE_STREAM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReport {
    pub kind: ReferenceKind,
    pub train_size: usize,
    pub wer: WerTable,
    pub averaged_epochs: Vec<usize>,
}

/// Train the baseline or topline model and evaluate it.
pub fn train_reference(
    kind: ReferenceKind,
    data: &ExperimentData<'_>,
    plan: &IterationPlan,
    lms: &LmSet,
) -> Result<(Params, ReferenceReport), PipelineError> {
    plan.validate()?;
    data.validate()?;
    let train_set = match kind {
        ReferenceKind::Baseline => data.labeled.clone(),
        ReferenceKind::Topline => {
            if let Some(u) = data.unlabeled.utterances.iter().find(|u| u.transcript.is_none()) {
                return Err(PipelineError::Data(format!("topline needs ground truth; {} has none", u.id)));
            }
            data.labeled.concat(data.unlabeled)?
        }
    };
    let outcome = train(&data.model_config(plan), &train_set, data.valid, &plan.hyper(kind.stream()))?;
    let wer = evaluate_model(&outcome.averaged, data.test_sets, &plan.eval, lms)?;
    let report = ReferenceReport { kind, train_size: train_set.len(), wer, averaged_epochs: outcome.averaged_epochs };
    Ok((outcome.averaged, report))
}

/// Baseline and topline results every iteration is compared against.
#[derive(Debug, Clone)]
pub struct Anchors {
    pub base: Params,
    pub baseline_wer: WerTable,
    pub topline_wer: Option<WerTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub mode: Mode,
    pub pseudo_label_lm: bool,
    pub pool_size: usize,
    pub n_candidates: usize,
    /// Label error rate of the pool against ground truth, when known.
    pub pool_ler: Option<f64>,
    pub wer: WerTable,
    pub baseline_wer: WerTable,
    pub topline_wer: Option<WerTable>,
    pub werr: Option<WerrTable>,
    /// Relative to the run directory.
    pub checkpoint: String,
    pub averaged_epochs: Vec<usize>,
}

impl IterationReport {
    /// Every stored WERR equals the WERR recomputed from the stored WERs.
    pub fn werr_consistent(&self) -> bool {
        match (&self.topline_wer, &self.werr) {
            (None, None) => true,
            (Some(top), Some(stored)) => *stored == werr_table(&self.baseline_wer, top, &self.wer),
            _ => false,
        }
    }

    fn primary(&self, set: &str, cond: LmCondition) -> Option<f64> {
        self.wer.get(set)?.get(cond.name()).copied()
    }
}

fn iter_dir(run_dir: &Path, iteration: usize) -> PathBuf {
    run_dir.join(format!("iter_{iteration:02}"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|source| PipelineError::Json { path: path.to_owned(), source })?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json { path: path.to_owned(), source })
}

#[derive(Serialize, Deserialize, PartialEq)]
struct RunHeader {
    plan: IterationPlan,
    data_fingerprint: String,
}

/// Pseudo-label `unlabeled` with `teacher` according to the plan.
pub fn build_pool(
    teacher: &Params,
    unlabeled: &Corpus,
    plan: &IterationPlan,
    lms: &LmSet,
    iteration: usize,
) -> Result<(PseudoLabelPool, Option<Vec<crate::dust::FilterDecision>>), PipelineError> {
    let lm = if plan.uses_lm(iteration) { lms.get(plan.pseudo_label.lm) } else { None };
    let transcriber = NetTranscriber { params: teacher, decode: plan.pseudo_label.decode.config(lm) };
    let stripped = unlabeled.unlabeled();
    Ok(match plan.mode {
        Mode::Dust => {
            let (pool, decisions) = dust_filter(&transcriber, &stripped, &plan.dust)?;
            (pool, Some(decisions))
        }
        Mode::StAll => (pseudo_label_all(&transcriber, &stripped)?, None),
    })
}

/// Train the iteration-`iteration` student on the labeled set plus `pool`.
/// Depends only on its arguments, so a persisted pool reproduces the
/// persisted checkpoint.
pub fn train_student(
    data: &ExperimentData<'_>,
    pool: &Corpus,
    plan: &IterationPlan,
    iteration: usize,
) -> Result<crate::nnet::TrainOutcome, PipelineError> {
    let train_set = data.labeled.concat(pool)?;
    Ok(train(&data.model_config(plan), &train_set, data.valid, &plan.hyper(iteration as u64))?)
}

fn record_time(run_dir: &Path, stage: &str, seconds: f64) -> Result<(), PipelineError> {
    let path = run_dir.join("timing.json");
    let mut times: BTreeMap<String, f64> = if path.exists() { read_json(&path).unwrap_or_default() } else { BTreeMap::new() };
    times.insert(stage.to_owned(), seconds);
    write_json(&path, &times)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Cumulative summary: one row per iteration, primary eval condition.
pub fn reports_csv(reports: &[IterationReport], primary: LmCondition) -> String {
    let mut out = String::from("iteration,pool_size,pool_ler,wer_source,wer_target,werr_target\n");
    for r in reports {
        let werr_target = r.werr.as_ref().and_then(|w| w.get("target")?.get(primary.name()).copied().flatten());
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration,
            r.pool_size,
            fmt_opt(r.pool_ler),
            fmt_opt(r.primary("source", primary)),
            fmt_opt(r.primary("target", primary)),
            fmt_opt(werr_target),
        ));
    }
    out
}

/// Load every completed iteration report in `run_dir`, in order.
pub fn load_reports(run_dir: &Path) -> Result<Vec<IterationReport>, PipelineError> {
    let mut reports = Vec::new();
    for i in 1.. {
        let path = iter_dir(run_dir, i).join("report.json");
        if !path.exists() {
            break;
        }
        reports.push(read_json(&path)?);
    }
    Ok(reports)
}

/// Run (or resume) self-training in `run_dir`. Completed iterations found on
/// disk are reused; a run directory written under a different plan or data is
/// refused. On error, reports of completed iterations stay on disk.
pub fn run_self_training(
    run_dir: &Path,
    data: &ExperimentData<'_>,
    anchors: &Anchors,
    lms: &LmSet,
    plan: &IterationPlan,
) -> Result<Vec<IterationReport>, PipelineError> {
    plan.validate()?;
    data.validate()?;
    fs::create_dir_all(run_dir)?;
    let header = RunHeader { plan: plan.clone(), data_fingerprint: format!("{:016x}", data.fingerprint()) };
    let header_path = run_dir.join("plan.json");
    if header_path.exists() {
        let stored: RunHeader = read_json(&header_path)?;
        if stored != header {
            return Err(PipelineError::PlanMismatch { dir: run_dir.to_owned() });
        }
    } else {
        write_json(&header_path, &header)?;
    }
    let truth = data.unlabeled.truth().ok();

    let mut reports = Vec::with_capacity(plan.n_iterations);
    let mut teacher = anchors.base.clone();
    for iteration in 1..=plan.n_iterations {
        let dir = iter_dir(run_dir, iteration);
        let ckpt = dir.join("model.ckpt");
        let report_path = dir.join("report.json");
        if report_path.exists() && ckpt.exists() {
            log::info!("iteration {iteration}: already complete, reusing");
            reports.push(read_json(&report_path)?);
            teacher = load_checkpoint(&ckpt)?;
            continue;
        }
        fs::create_dir_all(&dir)?;
        let started = Instant::now();

        let (pool, decisions) = build_pool(&teacher, data.unlabeled, plan, lms, iteration)?;
        if let Some(decisions) = &decisions {
            write_decision_log(&dir.join("decisions.jsonl"), decisions, &data.unlabeled.alphabet)?;
        }
        save_manifest(&pool.corpus, &dir.join("pool.jsonl"))?;
        let pool_ler = match &truth {
            Some(t) if !pool.is_empty() => Some(pool.ler(t)?),
            _ => None,
        };
        log::info!(
            "iteration {iteration}: pool {}/{} pseudo-labels, LER {}",
            pool.len(),
            pool.n_candidates,
            fmt_opt(pool_ler)
        );

        let outcome = train_student(data, &pool.corpus, plan, iteration)?;
        let wer = evaluate_model(&outcome.averaged, data.test_sets, &plan.eval, lms)?;
        save_checkpoint(&outcome.averaged, &ckpt)?;
        let werr = anchors.topline_wer.as_ref().map(|top| werr_table(&anchors.baseline_wer, top, &wer));
        let report = IterationReport {
            iteration,
            mode: plan.mode,
            pseudo_label_lm: plan.uses_lm(iteration),
            pool_size: pool.len(),
            n_candidates: pool.n_candidates,
            pool_ler,
            wer,
            baseline_wer: anchors.baseline_wer.clone(),
            topline_wer: anchors.topline_wer.clone(),
            werr,
            checkpoint: format!("iter_{iteration:02}/model.ckpt"),
            averaged_epochs: outcome.averaged_epochs,
        };
        write_json(&report_path, &report)?;
        reports.push(report);
        fs::write(run_dir.join("reports.csv"), reports_csv(&reports, plan.eval.primary))?;
        record_time(run_dir, &format!("iter_{iteration:02}"), started.elapsed().as_secs_f64())?;
        teacher = outcome.averaged;
    }
    fs::write(run_dir.join("reports.csv"), reports_csv(&reports, plan.eval.primary))?;
    Ok(reports)
}

/// Rebuild the pool persisted for `iteration`, replaying the decision log if
/// one exists.
pub fn load_pool(run_dir: &Path, iteration: usize, unlabeled: &Corpus) -> Result<Corpus, PipelineError> {
    let dir = iter_dir(run_dir, iteration);
    let log = dir.join("decisions.jsonl");
    if log.exists() {
        let decisions = read_decision_log(&log, &unlabeled.alphabet)?;
        return Ok(pool_from_decisions(&unlabeled.unlabeled(), &decisions)?.corpus);
    }
    Ok(load_manifest(&dir.join("pool.jsonl"))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, Preset, Utterance};
    use crate::dust::TranscribeError;
    use crate::textdist::{edit_distance, TokenSeq};
    use ndarray::{Array2, ArrayView2};

    fn toy_set(transcripts: &[&[u32]]) -> Corpus {
        let alphabet = crate::corpus::Alphabet::new("abc").unwrap();
        let utterances = transcripts
            .iter()
            .enumerate()
            .map(|(i, t)| Utterance {
                id: format!("u{i}"),
                features: Array2::from_elem((4, 2), i as f32),
                transcript: Some(TokenSeq::new(t.to_vec()).unwrap()),
                domain: "toy".into(),
            })
            .collect();
        Corpus::new(alphabet, utterances)
    }

    /// Returns a fixed hypothesis per utterance, keyed by the feature value.
    struct Table(Vec<Vec<u32>>);
    impl Transcriber for Table {
        fn transcribe(&self, f: ArrayView2<f32>, _: DropoutMode) -> Result<TokenSeq, TranscribeError> {
            Ok(TokenSeq::new(self.0[f[[0, 0]] as usize].clone()).unwrap())
        }
    }

    struct Silent;
    impl Transcriber for Silent {
        fn transcribe(&self, _: ArrayView2<f32>, _: DropoutMode) -> Result<TokenSeq, TranscribeError> {
            Ok(TokenSeq::empty())
        }
    }

    #[test]
    fn evaluate_perfect_empty_and_hand_built() {
        let refs: [&[u32]; 3] = [&[1, 2, 3], &[2, 2], &[3, 1, 1, 2]];
        let sets = vec![("toy".to_owned(), toy_set(&refs))];
        let perfect = Table(refs.iter().map(|r| r.to_vec()).collect());
        let hand = Table(vec![vec![1, 3], vec![2, 2, 1], vec![3, 1, 2, 2, 1]]);
        let table = evaluate(
            &[("perfect".into(), &perfect), ("silent".into(), &Silent), ("hand".into(), &hand)],
            &sets,
        )
        .unwrap();
        assert_eq!(table["toy"]["perfect"], 0.0);
        assert_eq!(table["toy"]["silent"], 100.0);
        // edits 1 + 1 + 2 over 9 reference labels
        let oracle: usize = refs.iter().zip(&hand.0).map(|(r, h)| edit_distance(h, r)).sum();
        assert_eq!(oracle, 4);
        assert!((table["toy"]["hand"] - 400.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_requires_transcripts() {
        let sets = vec![("toy".to_owned(), toy_set(&[&[1]]).unlabeled())];
        assert!(matches!(evaluate(&[("s".into(), &Silent)], &sets), Err(PipelineError::Corpus(_))));
    }

    #[test]
    fn werr_table_matches_formula() {
        let t = |v: f64| -> WerTable { [("target".to_owned(), [("no_lm".to_owned(), v)].into())].into() };
        let w = werr_table(&t(6.8), &t(4.6), &t(6.1));
        assert!((w["target"]["no_lm"].unwrap() - 31.818).abs() < 1e-3);
        let w = werr_table(&t(4.0), &t(4.0), &t(3.0));
        assert_eq!(w["target"]["no_lm"], None);
    }

    #[test]
    fn plan_defaults_and_validation() {
        let plan: IterationPlan = serde_json::from_str("{}").unwrap();
        assert_eq!(plan, IterationPlan::default());
        plan.validate().unwrap();
        let bad = IterationPlan { n_iterations: 0, ..IterationPlan::default() };
        assert!(matches!(bad.validate(), Err(PipelineError::Config(_))));
        let sched = IterationPlan { lm_schedule: vec![true, true, true, false], ..IterationPlan::default() };
        assert_eq!((1..=6).map(|i| sched.uses_lm(i)).collect::<Vec<_>>(), [true, true, true, false, false, false]);
    }

    fn tiny_plan(mode: Mode, n_iterations: usize) -> IterationPlan {
        IterationPlan {
            n_iterations,
            mode,
            seed: 3,
            model: ModelShape { n_blocks: 1, d_model: 16, n_heads: 2, ff_dim: 32, ..ModelShape::default() },
            train: TrainHyper { epochs: 2, batch_size: 8, average_best: 1, ..TrainHyper::default() },
            eval: EvalSettings { decode: DecodeSettings { beam: 2, ..DecodeSettings::default() }, ..EvalSettings::default() },
            ..IterationPlan::default()
        }
    }

    struct Tiny {
        labeled: Corpus,
        valid: Corpus,
        unlabeled: Corpus,
        tests: Vec<(String, Corpus)>,
    }

    fn tiny_data() -> Tiny {
        let src = Preset::Source.spec();
        let tgt = Preset::TargetMild.spec();
        Tiny {
            labeled: synth_corpus(&src, 24, (3, 5), 1).unwrap(),
            valid: synth_corpus(&src, 6, (3, 5), 2).unwrap(),
            unlabeled: synth_corpus(&tgt, 12, (3, 5), 3).unwrap(),
            tests: vec![("target".into(), synth_corpus(&tgt, 6, (3, 5), 4).unwrap())],
        }
    }

    impl Tiny {
        fn data(&self) -> ExperimentData<'_> {
            ExperimentData { labeled: &self.labeled, valid: &self.valid, unlabeled: &self.unlabeled, test_sets: &self.tests }
        }
    }

    #[test]
    fn st_all_pools_every_utterance_and_resumes() {
        let tiny = tiny_data();
        let data = tiny.data();
        let plan = tiny_plan(Mode::StAll, 1);
        let lms = LmSet::default();
        let (base, base_report) = train_reference(ReferenceKind::Baseline, &data, &plan, &lms).unwrap();
        let anchors = Anchors { base, baseline_wer: base_report.wer, topline_wer: None };
        let dir = tempfile::tempdir().unwrap();
        let reports = run_self_training(dir.path(), &data, &anchors, &lms, &plan).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].pool_size, tiny.unlabeled.len());
        assert!(reports[0].pool_ler.is_some());
        assert!(reports[0].werr_consistent());

        let report_bytes = fs::read(dir.path().join("iter_01/report.json")).unwrap();
        let again = run_self_training(dir.path(), &data, &anchors, &lms, &plan).unwrap();
        assert_eq!(again, reports);
        assert_eq!(fs::read(dir.path().join("iter_01/report.json")).unwrap(), report_bytes);

        let other = IterationPlan { seed: 4, ..plan };
        assert!(matches!(
            run_self_training(dir.path(), &data, &anchors, &lms, &other),
            Err(PipelineError::PlanMismatch { .. })
        ));
    }

    #[test]
    fn dust_pool_retrains_to_identical_checkpoint() {
        let tiny = tiny_data();
        let data = tiny.data();
        let plan = IterationPlan { dust: DustConfig { tau: 0.9, ..DustConfig::default() }, ..tiny_plan(Mode::Dust, 1) };
        let lms = LmSet::default();
        let (base, base_wer) = train_reference(ReferenceKind::Baseline, &data, &plan, &lms).unwrap();
        let (_, top) = train_reference(ReferenceKind::Topline, &data, &plan, &lms).unwrap();
        assert_eq!(top.train_size, tiny.labeled.len() + tiny.unlabeled.len());
        let anchors = Anchors { base, baseline_wer: base_wer.wer, topline_wer: Some(top.wer) };
        let dir = tempfile::tempdir().unwrap();
        let reports = run_self_training(dir.path(), &data, &anchors, &lms, &plan).unwrap();
        assert!(reports[0].werr.is_some() && reports[0].werr_consistent());

        let pool = load_pool(dir.path(), 1, &tiny.unlabeled).unwrap();
        assert_eq!(pool.len(), reports[0].pool_size);
        let retrained = train_student(&data, &pool, &plan, 1).unwrap().averaged;
        let stored = fs::read(dir.path().join(&reports[0].checkpoint)).unwrap();
        assert_eq!(crate::nnet::checkpoint_bytes(&retrained), stored);

        let csv = fs::read_to_string(dir.path().join("reports.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("iteration,pool_size,pool_ler,wer_source,wer_target,werr_target\n"));
    }

    #[test]
    fn rejects_untagged_or_empty_inputs() {
        let mut tiny = tiny_data();
        tiny.unlabeled.utterances[0].domain.clear();
        let plan = tiny_plan(Mode::Dust, 1);
        let err = train_reference(ReferenceKind::Baseline, &tiny.data(), &plan, &LmSet::default()).unwrap_err();
        assert!(matches!(err, PipelineError::Data(_)));
    }
}
