//! Point-wise and system-wise evaluation pipelines.
//!
//! A [`Judge`] scores one `(q, r, s?, t)` input. Scores against several
//! references are averaged before thresholding. System-level estimates
//! threshold the averaged score of each answer and aggregate per question;
//! gold counterparts use the reference set's labels instead.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EvalTuple;
use crate::evaluators::{EvaluatorModel, DECISION_THRESHOLD};
use crate::lexical::LinearModel;
use crate::metrics::{self, KendallResult, MetricName, MetricsError, PrecisionRecallF1, RankedList};

/// Number of intervals in the threshold grid `{0, 0.01, ..., 1}`.
pub const THRESHOLD_STEPS: usize = 100;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("question {0} has no reference answers")]
    EmptyReferences(String),
    #[error("question {qid} in run {system_id} is missing from the reference set")]
    MissingReference { system_id: String, qid: String },
    #[error("question {0} appears twice in the reference set")]
    DuplicateReference(String),
    #[error("no gold label for candidate {candidate:?} of question {qid}")]
    MissingGold { qid: String, candidate: String },
    #[error("run {system_id}, question {qid}: {message}")]
    InvalidRun { system_id: String, qid: String, message: String },
    #[error("no runs to evaluate")]
    NoRuns,
    #[error("judged and gold results cover different systems")]
    SystemMismatch,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// One line of a system-run file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub system_id: String,
    pub qid: String,
    pub answer: String,
    /// Present for ranking runs; absent when the run gives one chosen answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// One line of a reference file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub qid: String,
    /// Question text passed to judges; empty when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    pub references: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_labels: Option<BTreeMap<String, u8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceEntry {
    pub question: String,
    pub references: Vec<String>,
    pub gold_labels: BTreeMap<String, u8>,
}

impl ReferenceEntry {
    /// True when the gold labels include at least one correct and one
    /// incorrect candidate. Only such questions enter ranking metrics.
    pub fn has_both_classes(&self) -> bool {
        self.gold_labels.values().any(|&l| l == 1) && self.gold_labels.values().any(|&l| l == 0)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReferenceSet {
    entries: BTreeMap<String, ReferenceEntry>,
}

impl ReferenceSet {
    pub fn from_records(records: Vec<ReferenceRecord>) -> Result<Self, HarnessError> {
        let mut entries = BTreeMap::new();
        for rec in records {
            if rec.references.is_empty() {
                return Err(HarnessError::EmptyReferences(rec.qid));
            }
            let entry = ReferenceEntry {
                question: rec.question.unwrap_or_default(),
                references: rec.references,
                gold_labels: rec.gold_labels.unwrap_or_default(),
            };
            if entries.insert(rec.qid.clone(), entry).is_some() {
                return Err(HarnessError::DuplicateReference(rec.qid));
            }
        }
        Ok(Self { entries })
    }

    pub fn to_records(&self) -> Vec<ReferenceRecord> {
        self.entries
            .iter()
            .map(|(qid, e)| ReferenceRecord {
                qid: qid.clone(),
                question: (!e.question.is_empty()).then(|| e.question.clone()),
                references: e.references.clone(),
                gold_labels: (!e.gold_labels.is_empty()).then(|| e.gold_labels.clone()),
            })
            .collect()
    }

    pub fn get(&self, qid: &str) -> Option<&ReferenceEntry> {
        self.entries.get(qid)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn qids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn gold_label(&self, qid: &str, candidate: &str) -> Result<u8, HarnessError> {
        self.entries
            .get(qid)
            .and_then(|e| e.gold_labels.get(candidate).copied())
            .ok_or_else(|| HarnessError::MissingGold { qid: qid.to_string(), candidate: candidate.to_string() })
    }

    /// Keeps only the listed questions.
    pub fn subset(&self, qids: &[String]) -> Self {
        Self { entries: qids.iter().filter_map(|q| self.entries.get(q).map(|e| (q.clone(), e.clone()))).collect() }
    }
}

/// One system's output. Each question holds its answers in ranked order; a
/// single-answer run has exactly one answer per question.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemRun {
    pub system_id: String,
    pub questions: BTreeMap<String, Vec<String>>,
}

impl SystemRun {
    /// Groups records by system. Scored answers are ranked by descending
    /// score (file order breaks ties); unscored questions must have exactly
    /// one answer. Output is ordered by system id.
    pub fn from_records(records: &[RunRecord]) -> Result<Vec<SystemRun>, HarnessError> {
        let mut grouped: BTreeMap<&str, BTreeMap<&str, Vec<&RunRecord>>> = BTreeMap::new();
        for rec in records {
            grouped.entry(&rec.system_id).or_default().entry(&rec.qid).or_default().push(rec);
        }
        grouped
            .into_iter()
            .map(|(system_id, questions)| {
                let questions = questions
                    .into_iter()
                    .map(|(qid, mut recs)| {
                        let invalid = |message: &str| HarnessError::InvalidRun {
                            system_id: system_id.to_string(),
                            qid: qid.to_string(),
                            message: message.to_string(),
                        };
                        let scored = recs.iter().filter(|r| r.score.is_some()).count();
                        if scored == 0 && recs.len() > 1 {
                            return Err(invalid("several unscored answers; give scores to define a ranking"));
                        }
                        if scored != 0 && scored != recs.len() {
                            return Err(invalid("mixes scored and unscored answers"));
                        }
                        if recs.iter().any(|r| r.score.is_some_and(f64::is_nan)) {
                            return Err(invalid("score is NaN"));
                        }
                        recs.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("no NaN"));
                        Ok((qid.to_string(), recs.into_iter().map(|r| r.answer.clone()).collect()))
                    })
                    .collect::<Result<_, _>>()?;
                Ok(SystemRun { system_id: system_id.to_string(), questions })
            })
            .collect()
    }

    pub fn to_records(&self) -> Vec<RunRecord> {
        let mut out = Vec::new();
        for (qid, answers) in &self.questions {
            let ranked = answers.len() > 1;
            for (i, answer) in answers.iter().enumerate() {
                out.push(RunRecord {
                    system_id: self.system_id.clone(),
                    qid: qid.clone(),
                    answer: answer.clone(),
                    score: ranked.then(|| (answers.len() - i) as f64),
                });
            }
        }
        out
    }

    /// The same run restricted to the listed questions.
    pub fn subset(&self, qids: &[String]) -> Self {
        Self {
            system_id: self.system_id.clone(),
            questions: qids.iter().filter_map(|q| self.questions.get(q).map(|a| (q.clone(), a.clone()))).collect(),
        }
    }

    fn check_against(&self, refs: &ReferenceSet) -> Result<(), HarnessError> {
        for (qid, answers) in &self.questions {
            if refs.get(qid).is_none() {
                return Err(HarnessError::MissingReference { system_id: self.system_id.clone(), qid: qid.clone() });
            }
            if answers.is_empty() {
                return Err(HarnessError::InvalidRun { system_id: self.system_id.clone(), qid: qid.clone(), message: "no answers".into() });
            }
        }
        Ok(())
    }
}

/// Everything a judge may look at for one decision.
#[derive(Clone, Copy, Debug)]
pub struct JudgeInput<'a> {
    pub qid: &'a str,
    pub question: &'a str,
    pub reference: &'a str,
    pub short_answer: Option<&'a str>,
    pub candidate: &'a str,
}

impl<'a> JudgeInput<'a> {
    pub fn from_tuple(t: &'a EvalTuple) -> Self {
        Self { qid: &t.qid, question: &t.question, reference: &t.reference, short_answer: t.short_answer.as_deref(), candidate: &t.candidate }
    }
}

/// A point-wise answer-correctness function.
pub trait Judge: Sync {
    /// Score in `[0, 1]`; higher means more likely correct.
    fn score(&self, input: &JudgeInput<'_>) -> f64;

    /// Point-wise decision rule: correct iff `score > threshold`.
    fn threshold(&self) -> f64 {
        DECISION_THRESHOLD
    }
}

impl Judge for EvaluatorModel {
    fn score(&self, input: &JudgeInput<'_>) -> f64 {
        self.forward(input.question, input.reference, input.candidate)
    }
}

impl Judge for LinearModel {
    fn score(&self, input: &JudgeInput<'_>) -> f64 {
        self.predict(input.question, input.reference, input.short_answer, input.candidate).0
    }

    fn threshold(&self) -> f64 {
        self.alpha
    }
}

impl<F: Fn(&JudgeInput<'_>) -> f64 + Sync> Judge for F {
    fn score(&self, input: &JudgeInput<'_>) -> f64 {
        self(input)
    }
}

/// Returns the gold label of the candidate, ignoring the reference. Unknown
/// candidates score 0.
#[derive(Clone, Debug, Default)]
pub struct OracleJudge {
    labels: BTreeMap<(String, String), u8>,
}

impl OracleJudge {
    pub fn from_references(refs: &ReferenceSet) -> Self {
        let labels = refs
            .entries
            .iter()
            .flat_map(|(qid, e)| e.gold_labels.iter().map(move |(c, &l)| ((qid.clone(), c.clone()), l)))
            .collect();
        Self { labels }
    }

    pub fn from_tuples(tuples: &[EvalTuple]) -> Self {
        Self { labels: tuples.iter().map(|t| ((t.qid.clone(), t.candidate.clone()), t.label)).collect() }
    }
}

impl Judge for OracleJudge {
    fn score(&self, input: &JudgeInput<'_>) -> f64 {
        f64::from(self.labels.get(&(input.qid.to_string(), input.candidate.to_string())).copied().unwrap_or(0))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConstantJudge(pub f64);

impl Judge for ConstantJudge {
    fn score(&self, _: &JudgeInput<'_>) -> f64 {
        self.0
    }
}

/// Mean judge score of `candidate` over all references of the question.
pub fn score_multi_ref(judge: &dyn Judge, qid: &str, question: &str, references: &[String], candidate: &str) -> Result<f64, HarnessError> {
    if references.is_empty() {
        return Err(HarnessError::EmptyReferences(qid.to_string()));
    }
    let total: f64 = references
        .iter()
        .map(|r| judge.score(&JudgeInput { qid, question, reference: r, short_answer: None, candidate }))
        .sum();
    Ok(total / references.len() as f64)
}

/// Multi-reference scores of every answer, per question in qid order.
fn run_scores(judge: &dyn Judge, run: &SystemRun, refs: &ReferenceSet) -> Result<Vec<(String, Vec<f64>)>, HarnessError> {
    run.check_against(refs)?;
    let questions: Vec<(&String, &Vec<String>)> = run.questions.iter().collect();
    questions
        .par_iter()
        .map(|(qid, answers)| {
            let entry = refs.get(qid).expect("checked above");
            let scores = answers
                .iter()
                .map(|a| score_multi_ref(judge, qid, &entry.question, &entry.references, a))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(((*qid).clone(), scores))
        })
        .collect()
}

fn fraction_above(top_scores: &[f64], alpha: f64) -> f64 {
    if top_scores.is_empty() {
        return 0.0;
    }
    top_scores.iter().filter(|&&s| s > alpha).count() as f64 / top_scores.len() as f64
}

/// Estimated accuracy (P@1): fraction of questions whose top answer scores
/// above `alpha`.
pub fn estimate_system_accuracy(judge: &dyn Judge, run: &SystemRun, refs: &ReferenceSet, alpha: f64) -> Result<f64, HarnessError> {
    let tops: Vec<f64> = run_scores(judge, run, refs)?.into_iter().map(|(_, s)| s[0]).collect();
    Ok(fraction_above(&tops, alpha))
}

/// Gold accuracy (P@1) of the run's top answers.
pub fn gold_system_accuracy(run: &SystemRun, refs: &ReferenceSet) -> Result<f64, HarnessError> {
    run.check_against(refs)?;
    if run.questions.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (qid, answers) in &run.questions {
        correct += usize::from(refs.gold_label(qid, &answers[0])?);
    }
    Ok(correct as f64 / run.questions.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub p_at_1: f64,
    pub map: f64,
    pub mrr: f64,
    /// Questions that entered the averages.
    pub questions: usize,
}

impl RankingMetrics {
    pub fn get(&self, name: MetricName) -> Option<f64> {
        match name {
            MetricName::PAt1 => Some(self.p_at_1),
            MetricName::Map => Some(self.map),
            MetricName::Mrr => Some(self.mrr),
            _ => None,
        }
    }
}

fn ranking_metrics(lists: &[RankedList]) -> RankingMetrics {
    RankingMetrics {
        p_at_1: metrics::mean_p_at_1(lists).value,
        map: metrics::mean_average_precision(lists).value,
        mrr: metrics::mean_reciprocal_rank(lists).value,
        questions: lists.len(),
    }
}

/// Questions of the run that enter ranking metrics: those whose gold labels
/// contain both classes. Questions with no gold labels at all are kept.
fn ranked_questions<'a>(run: &'a SystemRun, refs: &ReferenceSet) -> Vec<&'a String> {
    run.questions
        .keys()
        .filter(|qid| refs.get(qid).is_some_and(|e| e.gold_labels.is_empty() || e.has_both_classes()))
        .collect()
}

/// P@1, MAP and MRR of the run's rankings with relevance given by the
/// thresholded multi-reference judge score.
pub fn estimate_ranking_metrics(judge: &dyn Judge, run: &SystemRun, refs: &ReferenceSet, alpha: f64) -> Result<RankingMetrics, HarnessError> {
    run.check_against(refs)?;
    let kept = run.subset(&ranked_questions(run, refs).into_iter().cloned().collect::<Vec<_>>());
    let lists = run_scores(judge, &kept, refs)?
        .into_iter()
        .map(|(qid, scores)| RankedList::new(qid, scores.iter().map(|&s| u8::from(s > alpha)).collect()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ranking_metrics(&lists))
}

/// Gold P@1, MAP and MRR under the same question filter as
/// [`estimate_ranking_metrics`].
pub fn gold_ranking_metrics(run: &SystemRun, refs: &ReferenceSet) -> Result<RankingMetrics, HarnessError> {
    run.check_against(refs)?;
    let lists = ranked_questions(run, refs)
        .into_iter()
        .map(|qid| {
            let relevance = run.questions[qid].iter().map(|a| refs.gold_label(qid, a)).collect::<Result<Vec<_>, _>>()?;
            Ok(RankedList::new(qid.clone(), relevance)?)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(ranking_metrics(&lists))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    pub dev_rmse: f64,
    /// `(alpha, rmse)` for every grid point, ascending in alpha.
    pub grid: Vec<(f64, f64)>,
}

/// Grid point `k` of the threshold grid.
pub fn grid_alpha(k: usize) -> f64 {
    k as f64 / THRESHOLD_STEPS as f64
}

/// Picks the threshold whose estimated P@1 across the dev runs has the
/// lowest RMSE against gold P@1. All 101 grid points are evaluated; the
/// choice is restricted to the interior `(0, 1)`, smallest alpha on ties.
pub fn tune_threshold(judge: &dyn Judge, dev_runs: &[SystemRun], refs: &ReferenceSet) -> Result<CalibrationResult, HarnessError> {
    if dev_runs.is_empty() {
        return Err(HarnessError::NoRuns);
    }
    let gold: Vec<f64> = dev_runs.iter().map(|r| gold_system_accuracy(r, refs)).collect::<Result<_, _>>()?;
    let tops: Vec<Vec<f64>> = dev_runs
        .iter()
        .map(|run| Ok(run_scores(judge, run, refs)?.into_iter().map(|(_, s)| s[0]).collect()))
        .collect::<Result<_, HarnessError>>()?;

    let mut grid = Vec::with_capacity(THRESHOLD_STEPS + 1);
    for k in 0..=THRESHOLD_STEPS {
        let alpha = grid_alpha(k);
        let estimated: Vec<f64> = tops.iter().map(|t| fraction_above(t, alpha)).collect();
        grid.push((alpha, metrics::rmse(&estimated, &gold)?.rmse));
    }
    let (alpha, dev_rmse) = grid[1..THRESHOLD_STEPS]
        .iter()
        .copied()
        .fold(None, |best: Option<(f64, f64)>, (a, e)| match best {
            Some((_, be)) if be <= e => best,
            _ => Some((a, e)),
        })
        .expect("interior grid is non-empty");
    Ok(CalibrationResult { alpha, dev_rmse, grid })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub system_id: String,
    pub judged: f64,
    pub gold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: MetricName,
    pub rows: Vec<ComparisonRow>,
    /// `None` when either ordering is fully tied or fewer than two systems.
    pub kendall: Option<KendallResult>,
    pub rmse: f64,
    pub sigma: f64,
}

impl Comparison {
    /// Aligned text table followed by the correlation and error summary.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.system_id.len()).max().unwrap_or(6).max(6);
        let label = self.metric.label();
        let mut out = format!("{:<width$}  {:>9}  {:>9}  {:>9}\n", "system", format!("judged {label}"), format!("gold {label}"), "|diff|");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}", r.system_id, r.judged, r.gold, (r.judged - r.gold).abs());
        }
        match &self.kendall {
            Some(k) => {
                let _ = writeln!(out, "kendall tau-b = {:.4}  p = {:.4} ({:?})", k.tau, k.p_value, k.method);
            }
            None => out.push_str("kendall tau-b = undefined (tied ordering)\n"),
        }
        let _ = writeln!(out, "rmse = {:.4} ± {:.4}", self.rmse, self.sigma);
        out
    }
}

/// Correlation and error between judged and gold per-system values. Both
/// slices must list the same systems in the same order.
pub fn compare_systems(metric: MetricName, judged: &[(String, f64)], gold: &[(String, f64)]) -> Result<Comparison, HarnessError> {
    if judged.is_empty() {
        return Err(HarnessError::NoRuns);
    }
    if judged.len() != gold.len() || judged.iter().zip(gold).any(|(a, b)| a.0 != b.0) {
        return Err(HarnessError::SystemMismatch);
    }
    let a: Vec<f64> = judged.iter().map(|x| x.1).collect();
    let h: Vec<f64> = gold.iter().map(|x| x.1).collect();
    let kendall = match metrics::kendall_tau_b(&a, &h) {
        Ok(k) => Some(k),
        Err(MetricsError::AllTied | MetricsError::TooFew { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let err = metrics::rmse(&a, &h)?;
    let rows = judged.iter().zip(gold).map(|(j, g)| ComparisonRow { system_id: j.0.clone(), judged: j.1, gold: g.1 }).collect();
    Ok(Comparison { metric, rows, kendall, rmse: err.rmse, sigma: err.sigma })
}

/// Judged and gold metrics of every run, and their comparisons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemEvaluation {
    pub alpha: f64,
    pub judged: Vec<(String, RankingMetrics)>,
    pub gold: Vec<(String, RankingMetrics)>,
    pub accuracy: Comparison,
    /// Present when every run is a ranking run.
    pub ranking: Option<[Comparison; 3]>,
}

/// Evaluates all runs at threshold `alpha` against gold labels. Accuracy is
/// P@1 over all questions; ranking metrics, when every run has full
/// rankings, follow the both-classes question filter.
pub fn evaluate_systems(judge: &dyn Judge, runs: &[SystemRun], refs: &ReferenceSet, alpha: f64) -> Result<SystemEvaluation, HarnessError> {
    if runs.is_empty() {
        return Err(HarnessError::NoRuns);
    }
    let ranking_runs = runs.iter().all(|r| r.questions.values().any(|a| a.len() > 1));
    let mut judged = Vec::new();
    let mut gold = Vec::new();
    let mut judged_acc = Vec::new();
    let mut gold_acc = Vec::new();
    for run in runs {
        let id = run.system_id.clone();
        judged_acc.push((id.clone(), estimate_system_accuracy(judge, run, refs, alpha)?));
        gold_acc.push((id.clone(), gold_system_accuracy(run, refs)?));
        if ranking_runs {
            judged.push((id.clone(), estimate_ranking_metrics(judge, run, refs, alpha)?));
            gold.push((id, gold_ranking_metrics(run, refs)?));
        }
    }
    let accuracy = compare_systems(MetricName::PAt1, &judged_acc, &gold_acc)?;
    let ranking = if ranking_runs {
        let pick = |v: &[(String, RankingMetrics)], m: MetricName| -> Vec<(String, f64)> {
            v.iter().map(|(id, r)| (id.clone(), r.get(m).expect("ranking metric"))).collect()
        };
        let cmp = |m| compare_systems(m, &pick(&judged, m), &pick(&gold, m));
        Some([cmp(MetricName::PAt1)?, cmp(MetricName::Map)?, cmp(MetricName::Mrr)?])
    } else {
        for (id, acc) in &judged_acc {
            let g = gold_acc.iter().find(|(g, _)| g == id).map(|x| x.1).expect("same systems");
            judged.push((id.clone(), RankingMetrics { p_at_1: *acc, map: *acc, mrr: *acc, questions: 0 }));
            gold.push((id.clone(), RankingMetrics { p_at_1: g, map: g, mrr: g, questions: 0 }));
        }
        None
    };
    Ok(SystemEvaluation { alpha, judged, gold, accuracy, ranking })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointwiseReport {
    pub metrics: PrecisionRecallF1,
    pub n: usize,
    pub threshold: f64,
    pub scores: Vec<f64>,
    pub decisions: Vec<u8>,
}

impl PointwiseReport {
    pub fn text(&self) -> String {
        let m = &self.metrics;
        format!(
            "n = {}  threshold = {:.4}\nP  = {:.4}\nR  = {:.4}\nF1 = {:.4}\ntp = {}  fp = {}  fn = {}\n",
            self.n, self.threshold, m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_
        )
    }
}

/// Scores every tuple, decides with the judge's threshold, and computes
/// P/R/F1 against the tuple labels.
pub fn pointwise_report(judge: &dyn Judge, tuples: &[EvalTuple]) -> Result<PointwiseReport, HarnessError> {
    let threshold = judge.threshold();
    let scores: Vec<f64> = tuples.par_iter().map(|t| judge.score(&JudgeInput::from_tuple(t))).collect();
    let decisions: Vec<u8> = scores.iter().map(|&s| u8::from(s > threshold)).collect();
    let labels: Vec<u8> = tuples.iter().map(|t| t.label).collect();
    let metrics = metrics::precision_recall_f1(&decisions, &labels)?;
    Ok(PointwiseReport { metrics, n: tuples.len(), threshold, scores, decisions })
}

/// Seeded split of question ids into `(dev, test)` with `round(n * dev_fraction)`
/// dev questions. Both halves are returned sorted.
pub fn split_questions(qids: &[String], dev_fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut ids: Vec<String> = qids.to_vec();
    ids.sort();
    ids.dedup();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_dev = ((ids.len() as f64) * dev_fraction).round() as usize;
    let mut test = ids.split_off(n_dev.min(ids.len()));
    ids.sort();
    test.sort();
    (ids, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn refs_fixture() -> ReferenceSet {
        let recs = (0..10)
            .map(|i| ReferenceRecord {
                qid: format!("q{i}"),
                question: Some(format!("question {i}")),
                references: vec![format!("ref {i}")],
                gold_labels: Some([(format!("good {i}"), 1), (format!("bad {i}"), 0)].into_iter().collect()),
            })
            .collect();
        ReferenceSet::from_records(recs).unwrap()
    }

    fn run(id: &str, good: &[bool]) -> SystemRun {
        let questions = good
            .iter()
            .enumerate()
            .map(|(i, &g)| (format!("q{i}"), vec![if g { format!("good {i}") } else { format!("bad {i}") }]))
            .collect();
        SystemRun { system_id: id.into(), questions }
    }

    #[test]
    fn multi_ref_is_the_mean() {
        let refs = vec!["a".to_string(), "b".to_string()];
        let judge = |x: &JudgeInput<'_>| if x.reference == "a" { 0.2 } else { 0.8 };
        assert!((score_multi_ref(&judge, "q", "", &refs, "t").unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(score_multi_ref(&judge, "q", "", &refs[..1], "t").unwrap(), 0.2);
        assert!(matches!(score_multi_ref(&judge, "q", "", &[], "t"), Err(HarnessError::EmptyReferences(_))));
    }

    #[test]
    fn oracle_multi_ref_is_gold_label() {
        let mut recs = refs_fixture().to_records();
        recs[0].references = vec!["x".into(), "y".into(), "z".into()];
        let refs = ReferenceSet::from_records(recs).unwrap();
        let oracle = OracleJudge::from_references(&refs);
        let e = refs.get("q0").unwrap();
        assert_eq!(score_multi_ref(&oracle, "q0", "", &e.references, "good 0").unwrap(), 1.0);
        assert_eq!(score_multi_ref(&oracle, "q0", "", &e.references, "bad 0").unwrap(), 0.0);
    }

    #[test]
    fn oracle_accuracy_equals_gold() {
        let refs = refs_fixture();
        let r = run("s", &[true, false, true, true, false, false, true, false, true, true]);
        let oracle = OracleJudge::from_references(&refs);
        assert_eq!(estimate_system_accuracy(&oracle, &r, &refs, 0.5).unwrap(), gold_system_accuracy(&r, &refs).unwrap());
        assert_eq!(gold_system_accuracy(&r, &refs).unwrap(), 0.6);
        assert_eq!(estimate_system_accuracy(&ConstantJudge(0.0), &r, &refs, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_matches_enumeration_on_fixed_scores() {
        let refs = refs_fixture();
        let r = run("s", &[true; 10]);
        let fixed = [0.1, 0.9, 0.5, 0.51, 0.49, 0.7, 0.3, 1.0, 0.0, 0.6];
        let judge = move |x: &JudgeInput<'_>| fixed[x.qid[1..].parse::<usize>().unwrap()];
        let expected = fixed.iter().filter(|&&s| s > 0.5).count() as f64 / 10.0;
        assert_eq!(estimate_system_accuracy(&judge, &r, &refs, 0.5).unwrap(), expected);
        assert_eq!(expected, 0.5);
    }

    #[test]
    fn missing_reference_is_an_error() {
        let refs = refs_fixture();
        let mut r = run("s", &[true]);
        r.questions.insert("nope".into(), vec!["x".into()]);
        assert!(matches!(estimate_system_accuracy(&ConstantJudge(1.0), &r, &refs, 0.5), Err(HarnessError::MissingReference { .. })));
    }

    #[test]
    fn oracle_threshold_is_smallest_interior_point() {
        let refs = refs_fixture();
        let runs = vec![run("a", &[true, false, true]), run("b", &[false, false, true]), run("c", &[true; 3])];
        let cal = tune_threshold(&OracleJudge::from_references(&refs), &runs, &refs).unwrap();
        assert_eq!(cal.alpha, 0.01);
        assert_eq!(cal.dev_rmse, 0.0);
        assert_eq!(cal.grid.len(), 101);
        assert!(cal.grid[1..100].iter().all(|&(_, e)| e == 0.0));
        assert!(cal.grid[100].1 > 0.0);
    }

    #[test]
    fn constant_one_threshold_rmse_is_closed_form() {
        let refs = refs_fixture();
        let runs = vec![run("a", &[true, false, true, false]), run("b", &[false, false, false, true])];
        let cal = tune_threshold(&ConstantJudge(1.0), &runs, &refs).unwrap();
        let expected = ((0.5f64.powi(2) + 0.75f64.powi(2)) / 2.0).sqrt();
        assert!(cal.grid[..100].iter().all(|&(_, e)| (e - expected).abs() < 1e-15));
        assert_eq!(cal.alpha, 0.01);
        assert!(matches!(tune_threshold(&ConstantJudge(1.0), &[], &refs), Err(HarnessError::NoRuns)));
    }

    #[test]
    fn ranking_metrics_oracle_and_constant() {
        let recs = vec![
            ReferenceRecord {
                qid: "a".into(),
                question: None,
                references: vec!["r".into()],
                gold_labels: Some([("x".to_string(), 0), ("y".to_string(), 1), ("z".to_string(), 0)].into_iter().collect()),
            },
            ReferenceRecord {
                qid: "b".into(),
                question: None,
                references: vec!["r".into()],
                gold_labels: Some([("x".to_string(), 1), ("y".to_string(), 1)].into_iter().collect()),
            },
        ];
        let refs = ReferenceSet::from_records(recs).unwrap();
        let run = SystemRun {
            system_id: "s".into(),
            questions: [("a".to_string(), vec!["x".into(), "y".into(), "z".into()]), ("b".to_string(), vec!["x".into(), "y".into()])]
                .into_iter()
                .collect(),
        };
        let gold = gold_ranking_metrics(&run, &refs).unwrap();
        assert_eq!(gold, RankingMetrics { p_at_1: 0.0, map: 0.5, mrr: 0.5, questions: 1 });
        let oracle = estimate_ranking_metrics(&OracleJudge::from_references(&refs), &run, &refs, 0.5).unwrap();
        assert_eq!(oracle, gold);
        let ones = estimate_ranking_metrics(&ConstantJudge(1.0), &run, &refs, 0.5).unwrap();
        assert_eq!((ones.p_at_1, ones.map, ones.mrr), (1.0, 1.0, 1.0));
    }

    #[test]
    fn run_records_group_and_rank() {
        let recs = vec![
            RunRecord { system_id: "b".into(), qid: "q1".into(), answer: "low".into(), score: Some(0.1) },
            RunRecord { system_id: "b".into(), qid: "q1".into(), answer: "high".into(), score: Some(0.9) },
            RunRecord { system_id: "a".into(), qid: "q1".into(), answer: "only".into(), score: None },
        ];
        let runs = SystemRun::from_records(&recs).unwrap();
        assert_eq!(runs[0].system_id, "a");
        assert_eq!(runs[1].questions["q1"], vec!["high".to_string(), "low".to_string()]);
        assert_eq!(SystemRun::from_records(&runs[1].to_records()).unwrap()[0], runs[1]);

        let mixed = vec![recs[0].clone(), RunRecord { score: None, ..recs[1].clone() }];
        assert!(SystemRun::from_records(&mixed).is_err());
        let dup = vec![recs[2].clone(), recs[2].clone()];
        assert!(SystemRun::from_records(&dup).is_err());
    }

    #[test]
    fn comparison_identity_reversal_and_published_values() {
        let ids: Vec<String> = (0..8).map(|i| format!("s{i}")).collect();
        let with = |v: &[f64]| ids.iter().cloned().zip(v.iter().copied()).collect::<Vec<_>>();
        let gold = [0.218, 0.282, 0.234, 0.379, 0.309, 0.315, 0.261, 0.319];
        let judged = [0.215, 0.278, 0.220, 0.369, 0.285, 0.294, 0.283, 0.355];

        let same = compare_systems(MetricName::PAt1, &with(&gold), &with(&gold)).unwrap();
        assert_eq!((same.kendall.unwrap().tau, same.rmse), (1.0, 0.0));

        let reversed: Vec<f64> = gold.iter().map(|g| -g).collect();
        let rev = compare_systems(MetricName::PAt1, &with(&reversed), &with(&gold)).unwrap();
        assert_eq!(rev.kendall.unwrap().tau, -1.0);

        let t8 = compare_systems(MetricName::PAt1, &with(&judged), &with(&gold)).unwrap();
        assert!((t8.rmse - 0.0198).abs() < 5e-4);
        assert!((t8.kendall.as_ref().unwrap().tau - 0.929).abs() < 0.01);
        assert!(t8.table().contains("rmse = 0.0197"));

        let tied = compare_systems(MetricName::PAt1, &with(&[0.5; 8]), &with(&gold)).unwrap();
        assert!(tied.kendall.is_none());
        assert!(compare_systems(MetricName::PAt1, &with(&gold)[..3], &with(&gold)).is_err());
    }

    #[test]
    fn pointwise_oracle_is_perfect() {
        let tuples: Vec<EvalTuple> = (0..6)
            .map(|i| EvalTuple { qid: format!("q{}", i / 2), question: "q".into(), reference: "r".into(), short_answer: None, candidate: format!("c{i}"), label: (i % 2) as u8 })
            .collect();
        let rep = pointwise_report(&OracleJudge::from_tuples(&tuples), &tuples).unwrap();
        assert_eq!(rep.metrics.f1, 1.0);
        let recomputed = metrics::precision_recall_f1(&rep.decisions, &tuples.iter().map(|t| t.label).collect::<Vec<_>>()).unwrap();
        assert_eq!(recomputed, rep.metrics);
    }

    #[test]
    fn split_is_seeded_and_proportional() {
        let qids: Vec<String> = (0..50).map(|i| format!("q{i:02}")).collect();
        let (dev, test) = split_questions(&qids, 0.2, 7);
        assert_eq!((dev.len(), test.len()), (10, 40));
        assert_eq!(split_questions(&qids, 0.2, 7), (dev.clone(), test.clone()));
        assert_ne!(split_questions(&qids, 0.2, 8).0, dev);
        assert!(dev.iter().all(|q| !test.contains(q)));
    }

    proptest! {
        #[test]
        fn multi_ref_is_order_invariant(n in 1usize..6, seed in any::<u64>()) {
            let refs: Vec<String> = (0..n).map(|i| format!("ref{i}")).collect();
            let judge = move |x: &JudgeInput<'_>| {
                let h = x.reference.bytes().fold(seed, |a, b| a.wrapping_mul(31).wrapping_add(u64::from(b)));
                (h % 1000) as f64 / 1000.0
            };
            let mut shuffled = refs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = score_multi_ref(&judge, "q", "", &refs, "t").unwrap();
            let b = score_multi_ref(&judge, "q", "", &shuffled, "t").unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn accuracy_is_non_increasing_in_alpha(scores in proptest::collection::vec(0.0f64..=1.0, 10), a1 in 0.0f64..=1.0, a2 in 0.0f64..=1.0) {
            let refs = refs_fixture();
            let r = run("s", &[true; 10]);
            let judge = move |x: &JudgeInput<'_>| scores[x.qid[1..].parse::<usize>().unwrap()];
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            prop_assert!(estimate_system_accuracy(&judge, &r, &refs, lo).unwrap() >= estimate_system_accuracy(&judge, &r, &refs, hi).unwrap());
        }
    }
}
