mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use sar_core::corpus::{ArticleRecord, Dataset, Query, QueryRecord, SplitName, SplitRecord};
use sar_core::error::Result;
use sar_core::eval::{average_precision, evaluate, r_precision, recall_at_k, Retriever};
use sar_core::par::Exec;

fn ranking_case() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, usize)> {
    (2usize..40).prop_flat_map(|n| {
        (
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            prop::collection::btree_set(0..n, 1..=n.min(6)),
            1..=n + 2,
            0..=n,
        )
            .prop_map(|(ranked, rel, k, cut)| {
                // A truncated ranking leaves some relevant items unranked.
                (ranked[..cut.max(1)].to_vec(), rel.into_iter().collect(), k)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_match_set_counting((ranked, relevant, k) in ranking_case()) {
        let (r, ap, rp) = metric_oracle(&ranked, &relevant, k);
        prop_assert!((recall_at_k(&ranked, &relevant, k) - r).abs() < 1e-12);
        prop_assert!((average_precision(&ranked, &relevant) - ap).abs() < 1e-12);
        prop_assert!((r_precision(&ranked, &relevant) - rp).abs() < 1e-12);
        for v in [r, ap, rp] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn perfect_only_when_relevant_lead((mut ranked, relevant, _k) in ranking_case(), promote: bool) {
        if promote {
            ranked.sort_by_key(|d| !relevant.contains(d));
        }
        let r = relevant.len();
        let lead = ranked.len() >= r && ranked[..r].iter().all(|d| relevant.contains(d));
        prop_assert_eq!(average_precision(&ranked, &relevant) == 1.0, lead);
        prop_assert_eq!(r_precision(&ranked, &relevant) == 1.0, lead);
    }

    #[test]
    fn recall_is_monotone_in_k((ranked, relevant, k) in ranking_case()) {
        prop_assert!(recall_at_k(&ranked, &relevant, k) <= recall_at_k(&ranked, &relevant, k + 1));
    }
}

#[test]
fn hand_enumeration() {
    let ranked = ["a", "x", "b"];
    let relevant = ["a", "b"];
    assert_eq!(recall_at_k(&ranked, &relevant, 2), 0.5);
    assert!((average_precision(&ranked, &relevant) - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(r_precision(&ranked, &relevant), 0.5);
}

#[test]
fn random_rankings_average_k_over_n() {
    let n = 20;
    let k = 5;
    let relevant = [3usize, 8, 15];
    let samples: Vec<f64> = (0..200)
        .map(|seed| {
            let mut ranked: Vec<usize> = (0..n).collect();
            ranked.shuffle(&mut rng(seed));
            recall_at_k(&ranked, &relevant, k)
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
    let se = (var / samples.len() as f64).sqrt();
    assert!((mean - k as f64 / n as f64).abs() <= 3.0 * se, "mean {mean}, se {se}");
}

struct Reversed(usize);

impl Retriever for Reversed {
    fn rank(&self, _: &Query) -> Result<Vec<usize>> {
        Ok((0..self.0).rev().collect())
    }
}

#[test]
fn reversed_retriever_report() {
    let articles = (0..10)
        .map(|i| ArticleRecord {
            id: format!("a{i}"),
            text: format!("word{i}"),
            book: None,
            title: None,
            chapter: None,
            section: None,
        })
        .collect();
    let queries = vec![QueryRecord {
        id: "q".into(),
        text: "word0".into(),
        article_ids: vec!["a0".into(), "a1".into()],
    }];
    let split = SplitRecord {
        test: vec!["q".into()],
        ..SplitRecord::default()
    };
    let ds = Dataset::from_records(articles, queries, &split).unwrap();
    let report = evaluate("bm25", &Reversed(10), &ds, SplitName::Test, &[5, 9, 10], Exec::Sequential).unwrap();
    // a1 sits at rank 9 and a0 at rank 10.
    assert_eq!(report.recall, vec![0.0, 0.5, 1.0]);
    assert!((report.map - (1.0 / 9.0 + 2.0 / 10.0) / 2.0).abs() < 1e-15);
    assert_eq!(report.mrp, 0.0);
}
