mod exit;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dust_core::corpus::{load_manifest, save_manifest, synth_corpus, Corpus, Preset};
use dust_core::dust::{
    dust_filter, pool_from_decisions, pseudo_label_all, read_decision_log, replay, uncertainty_profile,
    write_decision_log, NetTranscriber,
};
use dust_core::lm::{fit_ngram, NGramModel};
use dust_core::nnet::{load_checkpoint, save_checkpoint};
use dust_core::pipeline::{
    evaluate_model, load_reports, read_json, reports_csv, run_self_training, train_reference, write_json, Anchors,
    ExperimentData, IterationPlan, LmSet, Mode, ReferenceKind, ReferenceReport,
};
use dust_core::textdist::TokenSeq;

use exit::config_err;

#[derive(Parser)]
#[command(name = "dust", version, about = "Dropout-filtered self-training on synthetic speech corpora")]
struct Cli {
    /// Worker threads for filtering, evaluation and per-batch gradients.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus manifest.
    GenData(GenData),
    /// Train the baseline model on the labeled set.
    TrainBase(TrainArgs),
    /// Train the topline model on the labeled set plus the transcribed target set.
    TrainTopline(TrainTopline),
    /// Fit a character n-gram LM on the transcripts of one or more manifests.
    FitLm(FitLm),
    /// Pseudo-label an unlabeled corpus and filter it by dropout agreement.
    Filter(Filter),
    /// Run or resume self-training iterations.
    Iterate(Iterate),
    /// Error rates of a checkpoint on test sets.
    Evaluate(Evaluate),
    /// Merge iteration reports and write plot-ready tables.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    /// source, target-mild or target-severe.
    #[arg(long)]
    preset: String,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct LmArgs {
    /// LM fitted on source-domain text.
    #[arg(long)]
    source_lm: Option<PathBuf>,
    /// LM fitted on source and target text.
    #[arg(long)]
    source_target_lm: Option<PathBuf>,
}

impl LmArgs {
    fn load(&self) -> Result<LmSet> {
        let load = |p: &Option<PathBuf>| -> Result<Option<Arc<NGramModel>>> {
            p.as_ref()
                .map(|p| NGramModel::load(p).map(Arc::new).with_context(|| format!("loading LM {}", p.display())))
                .transpose()
        };
        Ok(LmSet { source: load(&self.source_lm)?, source_target: load(&self.source_target_lm)? })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Plan file (TOML or JSON); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    labeled: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// Test set as NAME=MANIFEST; repeatable.
    #[arg(long = "test", value_parser = parse_named)]
    tests: Vec<(String, PathBuf)>,
    #[command(flatten)]
    lms: LmArgs,
    /// Overrides the plan seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path; the report is written next to it with a .json extension.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainTopline {
    #[command(flatten)]
    train: TrainArgs,
    /// Target-domain corpus with ground-truth transcripts.
    #[arg(long)]
    unlabeled: PathBuf,
}

#[derive(Args)]
struct FitLm {
    /// Manifest whose transcripts are used; repeatable.
    #[arg(long = "text", required = true)]
    texts: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    order: usize,
    #[arg(long, default_value_t = 0.5)]
    discount: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Filter {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    unlabeled: PathBuf,
    /// Plan file supplying the filter and pseudo-label settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    /// Comma-separated dropout seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    dropout_p: Option<f32>,
    /// Keep every pseudo-label instead of filtering.
    #[arg(long)]
    all: bool,
    /// Decode without the LM even if one is given.
    #[arg(long)]
    no_lm: bool,
    #[command(flatten)]
    lms: LmArgs,
    /// Receives decisions.jsonl and pool.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Iterate {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    labeled: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// Target-domain corpus; transcripts, if present, are only used for pool LER.
    #[arg(long)]
    unlabeled: PathBuf,
    #[arg(long = "test", value_parser = parse_named)]
    tests: Vec<(String, PathBuf)>,
    #[command(flatten)]
    lms: LmArgs,
    /// Baseline checkpoint written by train-base.
    #[arg(long)]
    base: PathBuf,
    /// Topline checkpoint written by train-topline; enables WERR.
    #[arg(long)]
    topline: Option<PathBuf>,
    #[arg(long)]
    run_dir: PathBuf,
    /// Discard an existing run directory instead of resuming it.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "test", value_parser = parse_named, required = true)]
    tests: Vec<(String, PathBuf)>,
    /// Plan file supplying the eval decode settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    lms: LmArgs,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Report {
    #[arg(long)]
    run_dir: PathBuf,
    /// Corpus with ground truth, for the pool-LER-vs-threshold table.
    #[arg(long)]
    unlabeled: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    taus: Vec<f64>,
    /// Checkpoint to profile for per-utterance uncertainty.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Corpora to profile, as NAME=MANIFEST.
    #[arg(long = "profile", value_parser = parse_named)]
    profiles: Vec<(String, PathBuf)>,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    lms: LmArgs,
    /// Defaults to the run directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_owned(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=PATH, got {s:?}")),
    }
}

fn refuse_existing(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    if let Some(p) = paths.iter().find(|p| p.exists()) {
        return Err(config_err(format!("{} already exists; pass --force to overwrite", p.display())));
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_tests(tests: &[(String, PathBuf)]) -> Result<Vec<(String, Corpus)>> {
    tests.iter().map(|(n, p)| Ok((n.clone(), load_corpus(p)?))).collect()
}

fn load_plan(path: Option<&Path>) -> Result<IterationPlan> {
    let plan = match path {
        None => IterationPlan::default(),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
            } else {
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
        }
    };
    plan.validate()?;
    Ok(plan)
}

fn report_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen_data(a: GenData) -> Result<()> {
    let preset = Preset::parse(&a.preset).ok_or_else(|| {
        let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
        config_err(format!("unknown preset {:?}; expected one of {}", a.preset, names.join(", ")))
    })?;
    refuse_existing(&[a.out.clone(), a.out.with_extension("bin")], a.force)?;
    let corpus = synth_corpus(&preset.spec(), a.n, (a.min_len, a.max_len), a.seed)?;
    create_parent(&a.out)?;
    save_manifest(&corpus, &a.out)?;
    log::info!("wrote {} {} utterances to {}", corpus.len(), preset.name(), a.out.display());
    Ok(())
}

fn train_ref(a: &TrainArgs, kind: ReferenceKind, unlabeled: Option<&Path>) -> Result<()> {
    let mut plan = load_plan(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        plan.seed = seed;
    }
    let report_out = report_path(&a.out);
    refuse_existing(&[a.out.clone(), report_out.clone()], a.force)?;
    let labeled = load_corpus(&a.labeled)?;
    let valid = load_corpus(&a.valid)?;
    // the baseline never looks at target data; its slot is filled with the labeled set
    let unlabeled = match unlabeled {
        Some(p) => load_corpus(p)?,
        None => labeled.clone(),
    };
    let tests = load_tests(&a.tests)?;
    let lms = a.lms.load()?;
    let data = ExperimentData { labeled: &labeled, valid: &valid, unlabeled: &unlabeled, test_sets: &tests };
    let (params, report) = train_reference(kind, &data, &plan, &lms)?;
    create_parent(&a.out)?;
    save_checkpoint(&params, &a.out)?;
    write_json(&report_out, &report)?;
    print_json(&report.wer)
}

fn fit_lm(a: FitLm) -> Result<()> {
    refuse_existing(&[a.out.clone()], a.force)?;
    let mut texts: Vec<TokenSeq> = Vec::new();
    let mut alphabet = None;
    for path in &a.texts {
        let corpus = load_corpus(path)?;
        match &alphabet {
            None => alphabet = Some(corpus.alphabet.clone()),
            Some(al) if *al != corpus.alphabet => {
                anyhow::bail!(config_err(format!("{} uses a different alphabet", path.display())))
            }
            Some(_) => {}
        }
        let before = texts.len();
        texts.extend(corpus.utterances.into_iter().filter_map(|u| u.transcript));
        if texts.len() == before {
            log::warn!("{} has no transcripts", path.display());
        }
    }
    let alphabet = alphabet.expect("at least one manifest");
    let lm = fit_ngram(&texts, &alphabet, a.order, a.discount)?;
    create_parent(&a.out)?;
    lm.save(&a.out)?;
    log::info!("fitted order-{} LM on {} transcripts", a.order, texts.len());
    Ok(())
}

#[derive(Serialize)]
struct FilterSummary {
    pool_size: usize,
    n_candidates: usize,
    acceptance_rate: f64,
    pool_ler: Option<f64>,
}

fn filter(a: Filter) -> Result<()> {
    let mut plan = load_plan(a.config.as_deref())?;
    if let Some(tau) = a.tau {
        plan.dust.tau = tau;
    }
    if let Some(seeds) = a.seeds {
        plan.dust.seeds = seeds;
    }
    if let Some(p) = a.dropout_p {
        plan.dust.dropout_p = p;
    }
    plan.validate()?;
    let decisions_path = a.out_dir.join("decisions.jsonl");
    let pool_path = a.out_dir.join("pool.jsonl");
    refuse_existing(&[decisions_path.clone(), pool_path.clone(), pool_path.with_extension("bin")], a.force)?;

    let params = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let corpus = load_corpus(&a.unlabeled)?;
    let lms = a.lms.load()?;
    let lm = if a.no_lm { None } else { lms.get(plan.pseudo_label.lm) };
    let transcriber = NetTranscriber { params: &params, decode: plan.pseudo_label.decode.config(lm) };
    let stripped = corpus.unlabeled();
    fs::create_dir_all(&a.out_dir)?;
    let pool = if a.all {
        pseudo_label_all(&transcriber, &stripped)?
    } else {
        let (pool, decisions) = dust_filter(&transcriber, &stripped, &plan.dust)?;
        write_decision_log(&decisions_path, &decisions, &corpus.alphabet)?;
        pool
    };
    save_manifest(&pool.corpus, &pool_path)?;
    let pool_ler = match corpus.truth() {
        Ok(truth) if !pool.is_empty() => Some(pool.ler(&truth)?),
        _ => None,
    };
    print_json(&FilterSummary {
        pool_size: pool.len(),
        n_candidates: pool.n_candidates,
        acceptance_rate: pool.acceptance_rate(),
        pool_ler,
    })
}

fn load_reference(ckpt: &Path, kind: ReferenceKind) -> Result<ReferenceReport> {
    let path = report_path(ckpt);
    let report: ReferenceReport = read_json(&path).with_context(|| format!("loading {} report", kind.name()))?;
    if report.kind != kind {
        return Err(config_err(format!("{} is a {} report, expected {}", path.display(), report.kind.name(), kind.name())));
    }
    Ok(report)
}

fn iterate(a: Iterate) -> Result<()> {
    let plan = load_plan(a.config.as_deref())?;
    if a.force && a.run_dir.exists() {
        fs::remove_dir_all(&a.run_dir).with_context(|| format!("removing {}", a.run_dir.display()))?;
    }
    let labeled = load_corpus(&a.labeled)?;
    let valid = load_corpus(&a.valid)?;
    let unlabeled = load_corpus(&a.unlabeled)?;
    let tests = load_tests(&a.tests)?;
    let lms = a.lms.load()?;
    let base = load_checkpoint(&a.base).with_context(|| format!("loading {}", a.base.display()))?;
    let baseline = load_reference(&a.base, ReferenceKind::Baseline)?;
    let topline = a.topline.as_deref().map(|p| load_reference(p, ReferenceKind::Topline)).transpose()?;
    let anchors = Anchors { base, baseline_wer: baseline.wer, topline_wer: topline.map(|t| t.wer) };
    let data = ExperimentData { labeled: &labeled, valid: &valid, unlabeled: &unlabeled, test_sets: &tests };
    let reports = run_self_training(&a.run_dir, &data, &anchors, &lms, &plan)?;
    print!("{}", reports_csv(&reports, plan.eval.primary));
    Ok(())
}

fn evaluate(a: Evaluate) -> Result<()> {
    let plan = load_plan(a.config.as_deref())?;
    if let Some(out) = &a.out {
        refuse_existing(&[out.clone()], a.force)?;
    }
    let params = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let tests = load_tests(&a.tests)?;
    let table = evaluate_model(&params, &tests, &plan.eval, &a.lms.load()?)?;
    match &a.out {
        Some(out) => {
            create_parent(out)?;
            write_json(out, &table)?;
        }
        None => print_json(&table)?,
    }
    Ok(())
}

fn report(a: Report) -> Result<()> {
    let plan = load_plan(a.config.as_deref())?;
    let out_dir = a.out_dir.clone().unwrap_or_else(|| a.run_dir.clone());
    fs::create_dir_all(&out_dir)?;
    let reports = load_reports(&a.run_dir)?;
    if reports.is_empty() {
        anyhow::bail!("no iteration reports in {}", a.run_dir.display());
    }
    for r in reports.iter().filter(|r| !r.werr_consistent()) {
        log::warn!("iteration {}: stored WERR does not match stored WERs", r.iteration);
    }
    fs::write(out_dir.join("reports.csv"), reports_csv(&reports, plan.eval.primary))?;

    if let Some(path) = &a.unlabeled {
        let corpus = load_corpus(path)?;
        let truth = corpus.truth()?;
        let stripped = corpus.unlabeled();
        let mut csv = String::from("iteration,tau,pool_size,pool_ler\n");
        for r in reports.iter().filter(|r| r.mode == Mode::Dust) {
            let log_path = a.run_dir.join(format!("iter_{:02}", r.iteration)).join("decisions.jsonl");
            let decisions = read_decision_log(&log_path, &corpus.alphabet)?;
            for &tau in &a.taus {
                let pool = pool_from_decisions(&stripped, &replay(&decisions, tau, plan.dust.empty_ref_policy))?;
                let ler = if pool.is_empty() { String::new() } else { format!("{:.4}", pool.ler(&truth)?) };
                csv.push_str(&format!("{},{tau},{},{ler}\n", r.iteration, pool.len()));
            }
        }
        fs::write(out_dir.join("tau_sweep.csv"), csv)?;
    }

    if let Some(model) = &a.model {
        if a.profiles.is_empty() {
            return Err(config_err("--model needs at least one --profile NAME=MANIFEST"));
        }
        let params = load_checkpoint(model).with_context(|| format!("loading {}", model.display()))?;
        let lms = a.lms.load()?;
        let transcriber =
            NetTranscriber { params: &params, decode: plan.pseudo_label.decode.config(lms.get(plan.pseudo_label.lm)) };
        let mut csv = String::from("set,id,domain,ref_len,variance\n");
        let mut summary = std::collections::BTreeMap::new();
        for (name, corpus) in load_tests(&a.profiles)? {
            let profile = uncertainty_profile(&transcriber, &corpus.unlabeled(), a.samples, &plan.dust)?;
            for u in &profile.utterances {
                let var = u.variance.map(|v| format!("{v:.6}")).unwrap_or_default();
                csv.push_str(&format!("{name},{},{},{},{var}\n", u.id, u.domain, u.ref_len));
            }
            summary.insert(name, profile.per_domain);
        }
        fs::write(out_dir.join("uncertainty.csv"), csv)?;
        write_json(&out_dir.join("uncertainty_summary.json"), &summary)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(config_err("--jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().context("configuring worker threads")?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainBase(a) => train_ref(&a, ReferenceKind::Baseline, None),
        Command::TrainTopline(a) => train_ref(&a.train, ReferenceKind::Topline, Some(&a.unlabeled)),
        Command::FitLm(a) => fit_lm(a),
        Command::Filter(a) => filter(a),
        Command::Iterate(a) => iterate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit::exit_code(&err);
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", exit::kind(code));
            ExitCode::from(code as u8)
        }
    }
}
