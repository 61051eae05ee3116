use qajudge_core::harness::{self, JudgeInput, SystemRun};
use qajudge_core::metrics::{self, RankedList};
use qajudge_core::synthetic;

/// Deterministic pseudo-random score of a candidate.
fn hashed(seed: u64) -> impl Fn(&JudgeInput<'_>) -> f64 + Sync {
    move |x| {
        let h = x.candidate.bytes().chain(x.reference.bytes()).fold(seed, |a, b| a.wrapping_mul(1_000_003).wrapping_add(u64::from(b)));
        (h % 10_007) as f64 / 10_007.0
    }
}

#[test]
fn ranking_estimates_match_independent_recomputation() {
    let bench = synthetic::benchmark(4, 30, 5, 11);
    let refs = &bench.references;
    for seed in 0..5 {
        let judge = hashed(seed);
        for run in &bench.runs {
            let got = harness::estimate_ranking_metrics(&judge, run, refs, 0.5).unwrap();
            let mut lists = Vec::new();
            for (qid, answers) in &run.questions {
                let entry = refs.get(qid).unwrap();
                let labels = entry.gold_labels.values();
                if !(labels.clone().any(|&l| l == 1) && labels.clone().any(|&l| l == 0)) {
                    continue;
                }
                let rel: Vec<u8> = answers
                    .iter()
                    .map(|a| {
                        let mut total = 0.0;
                        for r in &entry.references {
                            total += judge(&JudgeInput { qid, question: &entry.question, reference: r, short_answer: None, candidate: a });
                        }
                        u8::from(total / entry.references.len() as f64 > 0.5)
                    })
                    .collect();
                lists.push(RankedList::new(qid.clone(), rel).unwrap());
            }
            assert_eq!(got.questions, lists.len());
            assert_eq!(got.p_at_1, metrics::mean_p_at_1(&lists).value);
            assert_eq!(got.map, metrics::mean_average_precision(&lists).value);
            assert_eq!(got.mrr, metrics::mean_reciprocal_rank(&lists).value);
        }
    }
}

#[test]
fn questions_without_both_classes_are_excluded() {
    let mut bench = synthetic::benchmark(2, 10, 4, 3);
    let mut records = bench.references.to_records();
    for label in records[0].gold_labels.as_mut().unwrap().values_mut() {
        *label = 1;
    }
    for label in records[1].gold_labels.as_mut().unwrap().values_mut() {
        *label = 0;
    }
    bench.references = harness::ReferenceSet::from_records(records).unwrap();
    let gold = harness::gold_ranking_metrics(&bench.runs[0], &bench.references).unwrap();
    assert_eq!(gold.questions, 8);
    let est = harness::estimate_ranking_metrics(&harness::ConstantJudge(1.0), &bench.runs[0], &bench.references, 0.5).unwrap();
    assert_eq!(est.questions, 8);
}

#[test]
fn runs_round_trip_through_records() {
    let bench = synthetic::benchmark(3, 5, 4, 1);
    let records: Vec<_> = bench.runs.iter().flat_map(SystemRun::to_records).collect();
    assert_eq!(SystemRun::from_records(&records).unwrap(), bench.runs);
}
