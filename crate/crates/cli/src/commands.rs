//! Subcommand implementations. Every command writes its outputs and a
//! resolved `config.toml` into the output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qajudge_core::encoder::init_tiny_encoder;
use qajudge_core::evaluators::{self, assemble, EvaluatorConfig, PairSpec};
use qajudge_core::harness::{self, CalibrationResult, Comparison, Judge, OracleJudge, ReferenceRecord, ReferenceSet, RunRecord, SystemEvaluation, SystemRun};
use qajudge_core::records::{read_records, write_records};
use qajudge_core::synthetic::{self, OverlapTask};
use qajudge_core::{corpus, lexical, EncoderConfig, EvalTuple, EvaluatorModel, Family, LinearModel, MetricName, MrDocument, TrainConfig, Vocab};

use crate::config::{Alpha, JudgeKind, RunConfig, SyntheticKind};

/// Systems in a synthetic benchmark.
const BENCHMARK_SYSTEMS: usize = 6;
/// Candidates per question in a synthetic benchmark.
const BENCHMARK_CANDIDATES: usize = 5;

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()?).context("writing config.toml")?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| anyhow!("missing required input: --{flag}"))
}

/// Appends one timestamped line per command to `run.log`. Failures to log
/// are reported but do not change the command's outcome.
pub fn log_run(out: &Path, command: &str, result: &Result<()>) {
    if result.is_err() && !out.exists() {
        return;
    }
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let status = match result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("error: {e:#}"),
    };
    let line = format!("{secs} {command} {status}\n");
    let appended = fs::OpenOptions::new().create(true).append(true).open(out.join("run.log")).and_then(|mut f| f.write_all(line.as_bytes()));
    if let Err(e) = appended {
        log::warn!("could not append to run.log: {e}");
    }
}

pub fn build_data(cfg: &RunConfig) -> Result<()> {
    let docs: Vec<MrDocument> = match (&cfg.data.corpus, cfg.data.synthetic) {
        (Some(path), _) => read_records(path)?,
        (None, Some(SyntheticKind::Corpus)) => synthetic::mr_corpus(cfg.data.size, cfg.seed),
        (None, Some(SyntheticKind::Overlap)) => return build_overlap(cfg),
        (None, Some(SyntheticKind::Benchmark)) => return build_benchmark(cfg),
        (None, None) => bail!("build-data needs --corpus or --synthetic"),
    };
    let as2 = corpus::derive_as2(&docs)?;
    let sets = corpus::filter_multi_answer(&corpus::candidate_sets_from_documents(&docs)?);
    let tuples = corpus::build_ava_pairs(&sets);
    let stats = corpus::dataset_stats(&sets, &tuples);

    let out = prepare_out(cfg)?;
    if cfg.data.synthetic.is_some() {
        write_records(&out.join("corpus.jsonl"), &docs)?;
    }
    write_records(&out.join("as2.jsonl"), &as2)?;
    write_records(&out.join("tuples.jsonl"), &tuples)?;
    write_json(&out.join("stats.json"), &stats)?;
    info!(
        "{} documents, {} questions, {} positive and {} negative tuples",
        docs.len(),
        stats.num_questions,
        stats.num_positive_tuples,
        stats.num_negative_tuples
    );
    Ok(())
}

fn build_overlap(cfg: &RunConfig) -> Result<()> {
    let task = OverlapTask { questions: cfg.data.size, ..Default::default() };
    let dev_q = (cfg.data.size / 4).max(1);
    let train = task.generate(cfg.seed, "tr");
    let dev = OverlapTask { questions: dev_q, ..task.clone() }.generate(cfg.seed.wrapping_add(1), "dv");
    let test = OverlapTask { questions: dev_q, ..task }.generate(cfg.seed.wrapping_add(2), "te");
    let out = prepare_out(cfg)?;
    write_records(&out.join("train.jsonl"), &train)?;
    write_records(&out.join("dev.jsonl"), &dev)?;
    write_records(&out.join("test.jsonl"), &test)?;
    info!("{} train, {} dev, {} test tuples", train.len(), dev.len(), test.len());
    Ok(())
}

fn build_benchmark(cfg: &RunConfig) -> Result<()> {
    let bench = synthetic::benchmark(BENCHMARK_SYSTEMS, cfg.data.size, BENCHMARK_CANDIDATES, cfg.seed);
    let runs: Vec<RunRecord> = bench.runs.iter().flat_map(SystemRun::to_records).collect();
    let out = prepare_out(cfg)?;
    write_records(&out.join("runs.jsonl"), &runs)?;
    write_records(&out.join("references.jsonl"), &bench.references.to_records())?;
    info!("{} systems over {} questions", bench.runs.len(), bench.references.len());
    Ok(())
}

fn evaluator_config(cfg: &RunConfig) -> Result<EvaluatorConfig> {
    let family: Family = cfg.model.family.parse()?;
    let pairs = cfg.model.pairs.iter().map(|p| p.parse::<PairSpec>()).collect::<Result<Vec<_>, _>>()?;
    Ok(EvaluatorConfig::new(family, pairs)?)
}

/// SHA-256 over every file of a bundle, visited in sorted path order; each
/// file contributes its relative path and its bytes.
pub fn bundle_digest(root: &Path) -> Result<String> {
    fn collect(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                collect(&path, files)?;
            } else {
                files.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    if root.is_dir() {
        collect(root, &mut files)?;
    } else {
        files.push(root.to_path_buf());
    }
    files.sort();
    let mut hasher = Sha256::new();
    for f in &files {
        let rel = f.strip_prefix(root).unwrap_or(f);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(fs::read(f).with_context(|| format!("reading {}", f.display()))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let encoder_config = match cfg.model.judge {
        JudgeKind::Oracle => bail!("the oracle judge has nothing to train"),
        JudgeKind::Model => Some(evaluator_config(cfg)?),
        JudgeKind::Linear => None,
    };
    let train: Vec<EvalTuple> = read_records(required(&cfg.train.train, "train")?)?;
    let dev: Vec<EvalTuple> = read_records(required(&cfg.train.dev, "dev")?)?;
    let out = prepare_out(cfg)?;

    let bundle = match encoder_config {
        None => {
            let model = lexical::train_linear(&train, &dev)?;
            let path = out.join("linear.txt");
            model.save(&path)?;
            let pw = harness::pointwise_report(&model, &dev)?;
            write_json(&out.join("history.json"), &pw.metrics)?;
            info!("linear judge: dev F1 {:.4} at alpha {:.2}", pw.metrics.f1, model.alpha);
            path
        }
        Some(config) => {
            let vocab = Vocab::build(train.iter().chain(&dev).flat_map(|t| [t.question.as_str(), t.reference.as_str(), t.candidate.as_str()]));
            let seed = cfg.seed;
            let model = assemble(config, |i| init_tiny_encoder(EncoderConfig::tiny(), vocab.clone(), seed.wrapping_mul(31).wrapping_add(i as u64)), seed)?;
            let tc = TrainConfig {
                learning_rate: cfg.train.learning_rate,
                weight_decay: cfg.train.weight_decay,
                epochs: cfg.train.epochs,
                batch_size: cfg.train.batch_size,
                seed,
            };
            let (model, history) = evaluators::train(model, &train, &dev, &tc)?;
            let path = out.join("model");
            model.save(&path)?;
            write_json(&out.join("history.json"), &history)?;
            info!("{}: best epoch {} with dev F1 {:.4}", model.config(), history.best_epoch, history.best().dev.f1);
            path
        }
    };
    let digest = bundle_digest(&bundle)?;
    write_text(&out.join("digest.txt"), &format!("{digest}\n"))?;
    println!("{digest}");
    Ok(())
}

/// A judge loaded from the configured kind and path.
enum LoadedJudge {
    Oracle(OracleJudge),
    Model(Box<EvaluatorModel>),
    Linear(LinearModel),
}

impl LoadedJudge {
    fn load(cfg: &RunConfig, oracle: impl FnOnce() -> OracleJudge) -> Result<Self> {
        Ok(match cfg.model.judge {
            JudgeKind::Oracle => LoadedJudge::Oracle(oracle()),
            JudgeKind::Model => LoadedJudge::Model(Box::new(EvaluatorModel::load(required(&cfg.model.path, "model")?)?)),
            JudgeKind::Linear => LoadedJudge::Linear(LinearModel::load(required(&cfg.model.path, "model")?)?),
        })
    }

    fn judge(&self) -> &dyn Judge {
        match self {
            LoadedJudge::Oracle(j) => j,
            LoadedJudge::Model(j) => j.as_ref(),
            LoadedJudge::Linear(j) => j,
        }
    }
}

pub fn eval_pointwise(cfg: &RunConfig) -> Result<()> {
    let tuples: Vec<EvalTuple> = read_records(required(&cfg.eval.tuples, "tuples")?)?;
    let judge = LoadedJudge::load(cfg, || OracleJudge::from_tuples(&tuples))?;
    let report = harness::pointwise_report(judge.judge(), &tuples)?;
    let out = prepare_out(cfg)?;
    write_json(&out.join("pointwise.json"), &report)?;
    let text = report.text();
    write_text(&out.join("pointwise.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Contents of `system.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SystemReport {
    pub judge: JudgeKind,
    /// Present when the threshold was tuned on a dev split.
    pub calibration: Option<CalibrationResult>,
    pub dev_questions: Vec<String>,
    pub test_questions: usize,
    pub evaluation: SystemEvaluation,
}

impl SystemReport {
    fn text(&self) -> String {
        let mut out = String::new();
        match &self.calibration {
            Some(c) => out.push_str(&format!(
                "alpha = {:.2} (tuned on {} dev questions, dev rmse {:.4}); {} test questions\n",
                c.alpha,
                self.dev_questions.len(),
                c.dev_rmse,
                self.test_questions
            )),
            None => out.push_str(&format!("alpha = {:.2}; {} questions\n", self.evaluation.alpha, self.test_questions)),
        }
        for cmp in comparisons(&self.evaluation) {
            out.push('\n');
            out.push_str(&cmp.table());
        }
        out
    }
}

fn comparisons(eval: &SystemEvaluation) -> Vec<&Comparison> {
    match &eval.ranking {
        Some(r) => r.iter().collect(),
        None => vec![&eval.accuracy],
    }
}

pub fn eval_system(cfg: &RunConfig) -> Result<()> {
    let run_records: Vec<RunRecord> = read_records(required(&cfg.eval.runs, "runs")?)?;
    let ref_records: Vec<ReferenceRecord> = read_records(required(&cfg.eval.references, "references")?)?;
    let refs = ReferenceSet::from_records(ref_records)?;
    let runs = SystemRun::from_records(&run_records)?;
    let loaded = LoadedJudge::load(cfg, || OracleJudge::from_references(&refs))?;
    let judge = loaded.judge();

    let report = match cfg.eval.alpha {
        Alpha::Fixed(alpha) => {
            let evaluation = harness::evaluate_systems(judge, &runs, &refs, alpha)?;
            SystemReport { judge: cfg.model.judge, calibration: None, dev_questions: Vec::new(), test_questions: refs.len(), evaluation }
        }
        Alpha::Tune => {
            if !(0.0..1.0).contains(&cfg.eval.dev_fraction) {
                bail!("dev_fraction must lie in [0, 1), got {}", cfg.eval.dev_fraction);
            }
            let qids: Vec<String> = refs.qids().map(str::to_string).collect();
            let (dev, test) = harness::split_questions(&qids, cfg.eval.dev_fraction, cfg.seed);
            if dev.is_empty() || test.is_empty() {
                bail!("too few questions ({}) to split for threshold tuning", qids.len());
            }
            let dev_runs: Vec<SystemRun> = runs.iter().map(|r| r.subset(&dev)).collect();
            let test_runs: Vec<SystemRun> = runs.iter().map(|r| r.subset(&test)).collect();
            let calibration = harness::tune_threshold(judge, &dev_runs, &refs.subset(&dev))?;
            let evaluation = harness::evaluate_systems(judge, &test_runs, &refs.subset(&test), calibration.alpha)?;
            SystemReport { judge: cfg.model.judge, calibration: Some(calibration), dev_questions: dev, test_questions: test.len(), evaluation }
        }
    };
    let out = prepare_out(cfg)?;
    write_json(&out.join("system.json"), &report)?;
    let text = report.text();
    write_text(&out.join("system.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// One line of a per-system values file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ValueRow {
    system_id: String,
    judged: f64,
    gold: f64,
}

pub fn report(cfg: &RunConfig, input: &Path) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let rendered = if let Ok(sys) = serde_json::from_str::<SystemReport>(&text) {
        sys.text()
    } else if let Ok(pw) = serde_json::from_str::<harness::PointwiseReport>(&text) {
        pw.text()
    } else {
        let rows: Vec<ValueRow> = read_records(input)?;
        let judged: Vec<(String, f64)> = rows.iter().map(|r| (r.system_id.clone(), r.judged)).collect();
        let gold: Vec<(String, f64)> = rows.iter().map(|r| (r.system_id.clone(), r.gold)).collect();
        let cmp = harness::compare_systems(MetricName::PAt1, &judged, &gold)?;
        write_json(&prepare_out(cfg)?.join("report.json"), &cmp)?;
        cmp.table()
    };
    let out = prepare_out(cfg)?;
    write_text(&out.join("report.txt"), &rendered)?;
    print!("{rendered}");
    Ok(())
}
