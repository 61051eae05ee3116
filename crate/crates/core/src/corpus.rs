//! Annotated QA corpora, answer-sentence-selection labelling and the
//! cross-product construction of judge training tuples.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("document {qid}: sentence list is empty")]
    EmptyDocument { qid: String },
    #[error("document {qid}: long answer index {index} out of range for {len} sentences")]
    SpanOutOfRange { qid: String, index: usize, len: usize },
}

/// A machine-reading document: a question, its pre-split document
/// sentences, the sentence indices of the long answer paragraph(s), and the
/// annotated short answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrDocument {
    pub qid: String,
    pub question: String,
    pub sentences: Vec<String>,
    pub long_answer_idx: Vec<usize>,
    #[serde(default)]
    pub short_answers: Vec<String>,
}

impl MrDocument {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.sentences.is_empty() {
            return Err(CorpusError::EmptyDocument { qid: self.qid.clone() });
        }
        if let Some(&index) = self.long_answer_idx.iter().find(|&&i| i >= self.sentences.len()) {
            return Err(CorpusError::SpanOutOfRange { qid: self.qid.clone(), index, len: self.sentences.len() });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum As2Label {
    /// In the long answer and contains a short answer.
    Positive,
    /// In the long answer, no short answer.
    NegInLong,
    /// Outside the long answer but contains a short answer.
    NegShortElsewhere,
    NegOther,
}

impl As2Label {
    pub fn is_positive(self) -> bool {
        self == As2Label::Positive
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct As2Record {
    pub qid: String,
    pub question: String,
    pub sentence: String,
    pub label: As2Label,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub qid: String,
    pub question: String,
    pub correct: Vec<String>,
    pub incorrect: Vec<String>,
    /// Carried through to tuples for the lexical judge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub short_answer: Option<String>,
}

impl CandidateSet {
    pub fn num_candidates(&self) -> usize {
        self.correct.len() + self.incorrect.len()
    }
}

/// One judge input `(q, r, s?, t)` with its binary label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTuple {
    pub qid: String,
    pub question: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub short_answer: Option<String>,
    pub candidate: String,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_questions: usize,
    pub num_correct_answers: usize,
    pub num_wrong_answers: usize,
    pub num_positive_tuples: usize,
    pub num_negative_tuples: usize,
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Case-insensitive, whitespace-normalised substring match against any of
/// the (already normalised) short answers.
fn contains_short_answer(sentence: &str, normalized_answers: &[String]) -> bool {
    let s = normalize(sentence);
    normalized_answers.iter().any(|a| !a.is_empty() && s.contains(a.as_str()))
}

/// Labels every sentence of every document. Output order is document order,
/// then sentence order.
pub fn derive_as2(docs: &[MrDocument]) -> Result<Vec<As2Record>, CorpusError> {
    let mut out = Vec::new();
    for doc in docs {
        doc.validate()?;
        let span: HashSet<usize> = doc.long_answer_idx.iter().copied().collect();
        let answers: Vec<String> = doc.short_answers.iter().map(|a| normalize(a)).collect();
        for (i, sentence) in doc.sentences.iter().enumerate() {
            let label = match (span.contains(&i), contains_short_answer(sentence, &answers)) {
                (true, true) => As2Label::Positive,
                (true, false) => As2Label::NegInLong,
                (false, true) => As2Label::NegShortElsewhere,
                (false, false) => As2Label::NegOther,
            };
            out.push(As2Record { qid: doc.qid.clone(), question: doc.question.clone(), sentence: sentence.clone(), label });
        }
    }
    Ok(out)
}

/// Groups AS2 records into candidate sets, collapsing the four labels to
/// correct/incorrect. Duplicate sentence texts are kept once; a text seen as
/// correct anywhere in the question is never also listed as incorrect.
pub fn candidate_sets(records: &[As2Record]) -> Vec<CandidateSet> {
    let mut order: Vec<String> = Vec::new();
    let mut by_qid: HashMap<String, CandidateSet> = HashMap::new();
    for rec in records {
        let set = by_qid.entry(rec.qid.clone()).or_insert_with(|| {
            order.push(rec.qid.clone());
            CandidateSet { qid: rec.qid.clone(), question: rec.question.clone(), ..Default::default() }
        });
        let list = if rec.label.is_positive() { &mut set.correct } else { &mut set.incorrect };
        if !list.contains(&rec.sentence) {
            list.push(rec.sentence.clone());
        }
    }
    order
        .into_iter()
        .map(|qid| {
            let mut set = by_qid.remove(&qid).expect("qid recorded on insert");
            let correct: HashSet<&String> = set.correct.iter().collect();
            let incorrect = set.incorrect.iter().filter(|s| !correct.contains(s)).cloned().collect();
            set.incorrect = incorrect;
            set
        })
        .collect()
}

/// Candidate sets built from documents, with the first short answer of each
/// document attached.
pub fn candidate_sets_from_documents(docs: &[MrDocument]) -> Result<Vec<CandidateSet>, CorpusError> {
    let records = derive_as2(docs)?;
    let mut sets = candidate_sets(&records);
    let short: HashMap<&str, &String> = docs.iter().filter_map(|d| d.short_answers.first().map(|s| (d.qid.as_str(), s))).collect();
    for set in &mut sets {
        set.short_answer = short.get(set.qid.as_str()).map(|s| (*s).clone());
    }
    Ok(sets)
}

/// Keeps the questions with at least two correct answers, in order.
pub fn filter_multi_answer(sets: &[CandidateSet]) -> Vec<CandidateSet> {
    sets.iter().filter(|s| s.correct.len() >= 2).cloned().collect()
}

/// Cross-product tuples: for each question, every ordered pair of distinct
/// correct answers is a positive and every (correct, incorrect) pair is a
/// negative. Order is question order, then reference index, then candidate
/// index, positives before negatives.
pub fn build_ava_pairs(sets: &[CandidateSet]) -> Vec<EvalTuple> {
    let mut out = Vec::new();
    for set in sets.iter().filter(|s| s.correct.len() >= 2) {
        let tuple = |r: &String, t: &String, label: u8| EvalTuple {
            qid: set.qid.clone(),
            question: set.question.clone(),
            reference: r.clone(),
            short_answer: set.short_answer.clone(),
            candidate: t.clone(),
            label,
        };
        for (i, r) in set.correct.iter().enumerate() {
            for (j, t) in set.correct.iter().enumerate() {
                if i != j && r != t {
                    out.push(tuple(r, t, 1));
                }
            }
        }
        for r in &set.correct {
            for t in &set.incorrect {
                out.push(tuple(r, t, 0));
            }
        }
    }
    out
}

/// Answer counts from the candidate sets, tuple counts from the tuples.
pub fn dataset_stats(sets: &[CandidateSet], tuples: &[EvalTuple]) -> DatasetStats {
    let mut stats = DatasetStats { num_questions: sets.len(), ..Default::default() };
    for s in sets {
        stats.num_correct_answers += s.correct.len();
        stats.num_wrong_answers += s.incorrect.len();
    }
    for t in tuples {
        if t.label == 1 {
            stats.num_positive_tuples += 1;
        } else {
            stats.num_negative_tuples += 1;
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(qid: &str, correct: usize, incorrect: usize) -> CandidateSet {
        CandidateSet {
            qid: qid.into(),
            question: format!("question {qid}"),
            correct: (0..correct).map(|i| format!("{qid} correct {i}")).collect(),
            incorrect: (0..incorrect).map(|i| format!("{qid} wrong {i}")).collect(),
            short_answer: None,
        }
    }

    #[test]
    fn five_sentence_fixture() {
        let doc = MrDocument {
            qid: "d1".into(),
            question: "When was the prize first awarded?".into(),
            sentences: vec![
                "The prize is awarded annually.".into(),
                "It was first awarded in 1901.".into(),
                "The ceremony takes place in Stockholm.".into(),
                "Nominations close in January.".into(),
                "A museum exhibit recalls 1901 as well.".into(),
            ],
            long_answer_idx: vec![1, 2],
            short_answers: vec!["1901".into()],
        };
        let labels: Vec<As2Label> = derive_as2(&[doc]).unwrap().into_iter().map(|r| r.label).collect();
        assert_eq!(labels, vec![As2Label::NegOther, As2Label::Positive, As2Label::NegInLong, As2Label::NegOther, As2Label::NegShortElsewhere]);
    }

    #[test]
    fn short_answer_match_ignores_case_and_spacing() {
        let doc = MrDocument {
            qid: "d".into(),
            question: "q".into(),
            sentences: vec!["Population: 39   MILLION people".into()],
            long_answer_idx: vec![0],
            short_answers: vec!["39 million".into()],
        };
        assert_eq!(derive_as2(&[doc]).unwrap()[0].label, As2Label::Positive);
    }

    #[test]
    fn invalid_documents_are_rejected_with_id() {
        let empty = MrDocument { qid: "bad".into(), question: "q".into(), sentences: vec![], long_answer_idx: vec![], short_answers: vec![] };
        assert_eq!(derive_as2(&[empty]), Err(CorpusError::EmptyDocument { qid: "bad".into() }));
        let oob = MrDocument { qid: "oob".into(), question: "q".into(), sentences: vec!["a".into()], long_answer_idx: vec![3], short_answers: vec![] };
        assert!(matches!(derive_as2(&[oob]), Err(CorpusError::SpanOutOfRange { index: 3, .. })));
    }

    #[test]
    fn filter_keeps_multi_answer_questions_in_order() {
        assert!(filter_multi_answer(&[set("a", 1, 3)]).is_empty());
        assert_eq!(filter_multi_answer(&[set("a", 2, 0)]).len(), 1);
        let correct_counts = [0, 2, 1, 3, 1, 5, 0, 1, 2, 1];
        let sets: Vec<CandidateSet> = correct_counts.iter().enumerate().map(|(i, &c)| set(&format!("q{i}"), c, 2)).collect();
        let kept = filter_multi_answer(&sets);
        assert_eq!(kept.len(), 4);
        let ids: Vec<&str> = kept.iter().map(|s| s.qid.as_str()).collect();
        assert_eq!(ids, vec!["q1", "q3", "q5", "q8"]);
    }

    #[test]
    fn pair_counts_small_fixtures() {
        let t = build_ava_pairs(&[set("a", 2, 0)]);
        assert_eq!(t.iter().filter(|t| t.label == 1).count(), 2);
        assert_eq!(t.iter().filter(|t| t.label == 0).count(), 0);

        let sets = vec![set("b", 3, 4)];
        let tuples = build_ava_pairs(&sets);
        let stats = dataset_stats(&sets, &tuples);
        assert_eq!((stats.num_positive_tuples, stats.num_negative_tuples), (6, 12));
        assert_eq!((stats.num_correct_answers, stats.num_wrong_answers), (3, 4));
        assert_eq!(dataset_stats(&[], &[]), DatasetStats::default());
    }

    #[test]
    fn build_ignores_single_answer_questions() {
        assert!(build_ava_pairs(&[set("a", 1, 5)]).is_empty());
    }

    #[test]
    fn candidate_sets_collapse_labels_and_dedupe() {
        let rec = |s: &str, label| As2Record { qid: "q".into(), question: "Q".into(), sentence: s.into(), label };
        let records = vec![
            rec("a", As2Label::Positive),
            rec("b", As2Label::NegInLong),
            rec("a", As2Label::NegOther),
            rec("c", As2Label::NegShortElsewhere),
            rec("b", As2Label::NegOther),
            rec("d", As2Label::Positive),
        ];
        let sets = candidate_sets(&records);
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].correct, vec!["a", "d"]);
        assert_eq!(sets[0].incorrect, vec!["b", "c"]);
    }

    proptest! {
        /// Counts and membership checked against direct enumeration of
        /// index pairs.
        #[test]
        fn cross_product_cardinality(nc in 0usize..6, ni in 0usize..4) {
            let s = set("p", nc, ni);
            let tuples = build_ava_pairs(std::slice::from_ref(&s));
            let mut expected = Vec::new();
            if nc >= 2 {
                for i in 0..nc { for j in 0..nc { if i != j { expected.push((s.correct[i].clone(), s.correct[j].clone(), 1u8)); } } }
                for i in 0..nc { for j in 0..ni { expected.push((s.correct[i].clone(), s.incorrect[j].clone(), 0u8)); } }
            }
            let got: Vec<(String, String, u8)> = tuples.iter().map(|t| (t.reference.clone(), t.candidate.clone(), t.label)).collect();
            prop_assert_eq!(got, expected);
            prop_assert!(tuples.iter().all(|t| t.label == 0 || t.reference != t.candidate));
        }
    }
}
