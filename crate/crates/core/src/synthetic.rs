//! Seeded generators for synthetic corpora, judge tuples and system runs.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{EvalTuple, MrDocument};
use crate::harness::{ReferenceRecord, ReferenceSet, SystemRun};

const SYLLABLES: [&str; 16] = ["ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "ba", "de", "fi", "go", "hu", "ja", "pe", "zu"];

/// `n` distinct two-syllable-or-longer lowercase words.
pub fn word_list(n: usize) -> Vec<String> {
    (0..n)
        .map(|mut i| {
            let mut w = String::new();
            loop {
                w.push_str(SYLLABLES[i % SYLLABLES.len()]);
                i /= SYLLABLES.len();
                if i == 0 {
                    break;
                }
            }
            if w.len() < 4 {
                w.push_str("ro");
            }
            w
        })
        .collect()
}

/// Tuples whose label is decided by lexical overlap between reference and
/// candidate: a positive candidate takes at least `min_overlap` of its
/// tokens from the reference, a negative shares no token with it. Every
/// `(q, r)` group holds the same number of positives and negatives, so the
/// label is unpredictable from `q` and `r` alone. Questions draw from their
/// own word pool, so the only shared tokens are between `r` and `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlapTask {
    pub questions: usize,
    pub positives_per_question: usize,
    pub negatives_per_question: usize,
    /// Words available to references and candidates.
    pub vocabulary: usize,
    pub question_vocabulary: usize,
    pub question_len: usize,
    pub reference_len: usize,
    pub candidate_len: usize,
    pub min_overlap: f64,
}

impl Default for OverlapTask {
    fn default() -> Self {
        Self {
            questions: 1200,
            positives_per_question: 3,
            negatives_per_question: 2,
            vocabulary: 16,
            question_vocabulary: 8,
            question_len: 3,
            reference_len: 6,
            candidate_len: 5,
            min_overlap: 0.6,
        }
    }
}

impl OverlapTask {
    pub fn positive_rate(&self) -> f64 {
        self.positives_per_question as f64 / (self.positives_per_question + self.negatives_per_question) as f64
    }

    /// F1 of predicting every tuple positive.
    pub fn always_positive_f1(&self) -> f64 {
        let p = self.positive_rate();
        2.0 * p / (1.0 + p)
    }

    pub fn generate(&self, seed: u64, qid_prefix: &str) -> Vec<EvalTuple> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words = word_list(self.vocabulary + self.question_vocabulary);
        let question_words = words.split_off(self.vocabulary);
        let min_shared = ((self.min_overlap * self.candidate_len as f64).ceil() as usize).min(self.candidate_len);
        let mut out = Vec::new();
        for qi in 0..self.questions {
            let mut pool: Vec<&String> = words.iter().collect();
            pool.shuffle(&mut rng);
            let (reference_words, others) = pool.split_at(self.reference_len);
            let question = question_words.choose_multiple(&mut rng, self.question_len).map(|s| s.as_str()).collect::<Vec<_>>().join(" ");
            let reference = reference_words.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ");
            let qid = format!("{qid_prefix}{qi:04}");
            let mut group = Vec::new();
            for _ in 0..self.positives_per_question {
                let shared = rng.random_range(min_shared..=self.candidate_len.min(self.reference_len));
                let mut toks: Vec<&str> = reference_words.choose_multiple(&mut rng, shared).map(|s| s.as_str()).collect();
                toks.extend(others.choose_multiple(&mut rng, self.candidate_len - shared).map(|s| s.as_str()));
                toks.shuffle(&mut rng);
                group.push((toks.join(" "), 1u8));
            }
            for _ in 0..self.negatives_per_question {
                let toks: Vec<&str> = others.choose_multiple(&mut rng, self.candidate_len).map(|s| s.as_str()).collect();
                group.push((toks.join(" "), 0u8));
            }
            group.shuffle(&mut rng);
            for (candidate, label) in group {
                out.push(EvalTuple { qid: qid.clone(), question: question.clone(), reference: reference.clone(), short_answer: None, candidate, label });
            }
        }
        out
    }
}

/// Machine-reading documents with multi-sentence long answers and short
/// answers placed both inside and outside the long answer, with varied case
/// and spacing. Every sentence is unique within its document.
pub fn mr_corpus(questions: usize, seed: u64) -> Vec<MrDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = word_list(200);
    let filler = |rng: &mut ChaCha8Rng, n: usize| words.choose_multiple(rng, n).map(|s| s.as_str()).collect::<Vec<_>>().join(" ");
    (0..questions)
        .map(|qi| {
            let n = rng.random_range(4..=10);
            let short = format!("answer{qi} value{qi}");
            let long_len = rng.random_range(1..=3.min(n));
            let long_start = rng.random_range(0..=n - long_len);
            let sentences = (0..n)
                .map(|si| {
                    let mut s = format!("{} sentence{si}", filler(&mut rng, 5));
                    if rng.random_bool(0.5) {
                        let variant = match rng.random_range(0..3) {
                            0 => short.clone(),
                            1 => short.to_uppercase(),
                            _ => short.replace(' ', "   "),
                        };
                        s = format!("{s} {variant} {}", filler(&mut rng, 2));
                    }
                    s
                })
                .collect();
            MrDocument {
                qid: format!("doc{qi:04}"),
                question: format!("what is {} ?", filler(&mut rng, 3)),
                sentences,
                long_answer_idx: (long_start..long_start + long_len).collect(),
                short_answers: if rng.random_bool(0.9) { vec![short] } else { Vec::new() },
            }
        })
        .collect()
}

/// A synthetic system-wise benchmark: references with gold labels for every
/// candidate, and ranking runs of systems of graded quality.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub references: ReferenceSet,
    pub runs: Vec<SystemRun>,
}

pub fn benchmark(systems: usize, questions: usize, candidates: usize, seed: u64) -> Benchmark {
    assert!(candidates >= 2, "need room for a correct and an incorrect candidate");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = word_list(120);
    let text = |rng: &mut ChaCha8Rng, n: usize| words.choose_multiple(rng, n).map(|s| s.as_str()).collect::<Vec<_>>().join(" ");

    let mut records = Vec::new();
    let mut pools: Vec<(String, Vec<(String, u8)>)> = Vec::new();
    for qi in 0..questions {
        let qid = format!("b{qi:03}");
        let n_correct = rng.random_range(1..candidates);
        let pool: Vec<(String, u8)> = (0..candidates).map(|ci| (format!("{} cand{ci}", text(&mut rng, 4)), u8::from(ci < n_correct))).collect();
        let refs = (0..rng.random_range(1..=3)).map(|_| text(&mut rng, 6)).collect();
        let gold: BTreeMap<String, u8> = pool.iter().cloned().collect();
        records.push(ReferenceRecord { qid: qid.clone(), question: Some(format!("{} ?", text(&mut rng, 4))), references: refs, gold_labels: Some(gold) });
        pools.push((qid, pool));
    }

    let runs = (0..systems)
        .map(|si| {
            let skill = 0.2 + 0.6 * si as f64 / systems.max(2).saturating_sub(1) as f64;
            let questions = pools
                .iter()
                .map(|(qid, pool)| {
                    let mut scored: Vec<(f64, &String)> = pool
                        .iter()
                        .map(|(c, label)| {
                            let boost = if *label == 1 { skill } else { 0.0 };
                            (rng.random::<f64>() + boost, c)
                        })
                        .collect();
                    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
                    (qid.clone(), scored.into_iter().map(|(_, c)| c.clone()).collect())
                })
                .collect();
            SystemRun { system_id: format!("system{si}"), questions }
        })
        .collect();
    Benchmark { references: ReferenceSet::from_records(records).expect("generated references are valid"), runs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexical::{sim_text, tokenize};
    use std::collections::HashSet;

    #[test]
    fn words_are_distinct() {
        let w = word_list(300);
        assert_eq!(w.iter().collect::<HashSet<_>>().len(), 300);
        assert!(w.iter().all(|x| tokenize(x) == vec![x.clone()]));
    }

    #[test]
    fn overlap_task_labels_follow_overlap() {
        let task = OverlapTask::default();
        let tuples = task.generate(1, "q");
        assert_eq!(tuples.len(), task.questions * 5);
        for t in &tuples {
            let r: HashSet<String> = tokenize(&t.reference).into_iter().collect();
            let toks = tokenize(&t.candidate);
            let shared = toks.iter().filter(|x| r.contains(*x)).count();
            if t.label == 1 {
                assert!(shared as f64 >= 0.6 * toks.len() as f64);
                assert!(sim_text(&t.reference, &t.candidate) > 0.0);
            } else {
                assert_eq!(shared, 0);
            }
        }
        assert_eq!(task.generate(1, "q"), tuples);
        assert!((task.always_positive_f1() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn benchmark_shape() {
        let b = benchmark(6, 50, 6, 0);
        assert_eq!(b.runs.len(), 6);
        assert_eq!(b.references.len(), 50);
        assert!(b.runs.iter().all(|r| r.questions.len() == 50 && r.questions.values().all(|a| a.len() == 6)));
    }
}
