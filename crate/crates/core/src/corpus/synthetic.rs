//! Topic-planted statute corpora for desk-scale experiments.
//!
//! Each topic is one book with `fanout` titles, `fanout` chapters per title
//! and `fanout` sections per chapter. Every section owns a set of technical
//! terms, each paired with a lay synonym; articles are written with the
//! technical form while queries mix in lay forms, so exact term matching
//! only partially works and a learned encoder has something to gain.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ArticleRecord, Dataset, QueryRecord, SplitRecord};
use crate::error::{Error, Result};

const FUNCTION_WORDS: usize = 30;
const GENERIC_PER_TOPIC: usize = 20;
const FOCUS_TERMS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub articles_per_topic: usize,
    /// Children per node at each of the title, chapter and section levels.
    pub fanout: usize,
    pub train_queries: usize,
    pub validation_queries: usize,
    pub test_queries: usize,
    pub relevant_min: usize,
    pub relevant_max: usize,
    pub vocab_size: usize,
    /// Fraction of tokens replaced by uniformly random words.
    pub noise_rate: f64,
    /// Probability that a query expresses a technical term by its lay synonym.
    pub lay_rate: f64,
    pub article_len: (usize, usize),
    pub query_len: (usize, usize),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            topics: 4,
            articles_per_topic: 50,
            fanout: 2,
            train_queries: 100,
            validation_queries: 20,
            test_queries: 30,
            relevant_min: 1,
            relevant_max: 5,
            vocab_size: 640,
            noise_rate: 0.1,
            lay_rate: 0.8,
            article_len: (24, 96),
            query_len: (6, 12),
        }
    }
}

impl SyntheticSpec {
    fn sections_per_topic(&self) -> usize {
        self.fanout.pow(3)
    }

    fn terms_per_section(&self) -> usize {
        let reserved = FUNCTION_WORDS + self.topics * GENERIC_PER_TOPIC;
        let sections = self.topics * self.sections_per_topic();
        if sections == 0 || self.vocab_size <= reserved {
            return 0;
        }
        (self.vocab_size - reserved) / (2 * sections)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("infeasible synthetic spec: {m}")));
        if self.topics == 0 || self.articles_per_topic == 0 || self.fanout == 0 {
            return fail("topics, articles per topic and fanout must be positive".into());
        }
        if self.relevant_min == 0 || self.relevant_min > self.relevant_max {
            return fail(format!(
                "relevant range {}..={} is empty or starts at zero",
                self.relevant_min, self.relevant_max
            ));
        }
        if self.relevant_max > self.articles_per_topic {
            return fail(format!(
                "up to {} relevant articles requested but topics hold only {}",
                self.relevant_max, self.articles_per_topic
            ));
        }
        if self.terms_per_section() < FOCUS_TERMS {
            return fail(format!(
                "vocabulary of {} is too small for {} topics with {} sections each",
                self.vocab_size,
                self.topics,
                self.sections_per_topic()
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) || !(0.0..=1.0).contains(&self.lay_rate) {
            return fail("rates must lie in [0, 1]".into());
        }
        for (name, (lo, hi)) in [("article", self.article_len), ("query", self.query_len)] {
            if lo == 0 || lo > hi {
                return fail(format!("{name} length range {lo}..={hi} is invalid"));
            }
        }
        Ok(())
    }
}

/// Ground truth kept by the generator, for tests.
#[derive(Clone, Debug, Default)]
pub struct SyntheticTruth {
    pub article_topic: Vec<usize>,
    pub article_section: Vec<usize>,
    pub query_topic: Vec<usize>,
    /// Words owned by each topic (generic, technical and lay forms).
    pub topic_words: Vec<BTreeSet<String>>,
    /// Words shared by every topic.
    pub function_words: BTreeSet<String>,
}

/// Deterministic pronounceable word for an index.
fn pseudo_word(mut i: usize) -> String {
    const SYL: [&str; 20] = [
        "ba", "ke", "li", "mo", "nu", "ra", "se", "ti", "vo", "za", "dra", "fle", "gri", "plo",
        "tru", "cha", "qui", "sto", "bre", "vin",
    ];
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(SYL[i % SYL.len()]);
        i /= SYL.len();
    }
    while i > 0 {
        w.push_str(SYL[i % SYL.len()]);
        i /= SYL.len();
    }
    w
}

struct Section {
    topic: usize,
    path: [usize; 3],
    technical: Vec<String>,
    lay: Vec<String>,
    articles: Vec<usize>,
}

struct ArticlePlan {
    section: usize,
    focus: Vec<usize>,
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, SyntheticTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut next_word = 0usize;
    let mut fresh = |n: usize| -> Vec<String> {
        let out = (next_word..next_word + n).map(pseudo_word).collect();
        next_word += n;
        out
    };
    let function_words = fresh(FUNCTION_WORDS);
    let generic: Vec<Vec<String>> = (0..spec.topics).map(|_| fresh(GENERIC_PER_TOPIC)).collect();
    let k = spec.terms_per_section();
    let per_topic = spec.sections_per_topic();
    let f = spec.fanout;
    let mut sections = Vec::new();
    for topic in 0..spec.topics {
        for s in 0..per_topic {
            sections.push(Section {
                topic,
                path: [s / (f * f), (s / f) % f, s % f],
                technical: fresh(k),
                lay: fresh(k),
                articles: Vec::new(),
            });
        }
    }
    let all_words: Vec<String> = (0..next_word).map(pseudo_word).collect();

    let mut truth = SyntheticTruth {
        function_words: function_words.iter().cloned().collect(),
        ..SyntheticTruth::default()
    };
    for (topic, generic_words) in generic.iter().enumerate().take(spec.topics) {
        let mut words: BTreeSet<String> = generic_words.iter().cloned().collect();
        for s in sections.iter().filter(|s| s.topic == topic) {
            words.extend(s.technical.iter().cloned());
            words.extend(s.lay.iter().cloned());
        }
        truth.topic_words.push(words);
    }

    // Articles: contiguous blocks per section.
    let mut plans = Vec::new();
    let mut articles = Vec::new();
    for topic in 0..spec.topics {
        for a in 0..spec.articles_per_topic {
            let sec = topic * per_topic + a * per_topic / spec.articles_per_topic;
            let idx = plans.len();
            sections[sec].articles.push(idx);
            let mut terms: Vec<usize> = (0..k).collect();
            terms.shuffle(&mut rng);
            terms.truncate(FOCUS_TERMS);
            plans.push(ArticlePlan {
                section: sec,
                focus: terms,
            });
            truth.article_topic.push(topic);
            truth.article_section.push(sec);
        }
    }
    for (idx, plan) in plans.iter().enumerate() {
        let sec = &sections[plan.section];
        let len = rng.random_range(spec.article_len.0..=spec.article_len.1);
        let words: Vec<&str> = (0..len)
            .map(|_| {
                if rng.random::<f64>() < spec.noise_rate {
                    return all_words.choose(&mut rng).unwrap().as_str();
                }
                let r: f64 = rng.random();
                if r < 0.2 {
                    function_words.choose(&mut rng).unwrap().as_str()
                } else if r < 0.35 {
                    generic[sec.topic].choose(&mut rng).unwrap().as_str()
                } else if r < 0.7 {
                    sec.technical[*plan.focus.choose(&mut rng).unwrap()].as_str()
                } else {
                    sec.technical.choose(&mut rng).unwrap().as_str()
                }
            })
            .collect();
        let [t, c, s] = sec.path;
        let topic = sec.topic + 1;
        articles.push(ArticleRecord {
            id: format!("a{idx:04}"),
            text: words.join(" "),
            book: Some(format!("Livre {topic} {}", generic[sec.topic][0])),
            title: Some(format!("Titre {topic}.{} {}", t + 1, generic[sec.topic][1 + t % 19])),
            chapter: Some(format!("Chapitre {topic}.{}.{}", t + 1, c + 1)),
            section: Some(format!(
                "Section {topic}.{}.{}.{} {} {}",
                t + 1,
                c + 1,
                s + 1,
                sec.technical[0],
                sec.technical[1]
            )),
        });
    }

    let total = spec.train_queries + spec.validation_queries + spec.test_queries;
    let mut queries = Vec::with_capacity(total);
    for qi in 0..total {
        let topic = qi % spec.topics;
        let sec_idx = topic * per_topic + rng.random_range(0..per_topic);
        let n = rng.random_range(spec.relevant_min..=spec.relevant_max);
        let relevant = pick_relevant(&sections, sec_idx, n, &mut rng);
        let len = rng.random_range(spec.query_len.0..=spec.query_len.1);
        let words: Vec<&str> = (0..len)
            .map(|_| {
                if rng.random::<f64>() < spec.noise_rate {
                    return all_words.choose(&mut rng).unwrap().as_str();
                }
                let r: f64 = rng.random();
                if r < 0.15 {
                    return function_words.choose(&mut rng).unwrap().as_str();
                }
                if r < 0.25 {
                    return generic[topic].choose(&mut rng).unwrap().as_str();
                }
                let art = &plans[*relevant.choose(&mut rng).unwrap()];
                let home = &sections[art.section];
                let term = if rng.random::<f64>() < 0.6 {
                    *art.focus.choose(&mut rng).unwrap()
                } else {
                    rng.random_range(0..k)
                };
                if rng.random::<f64>() < spec.lay_rate {
                    home.lay[term].as_str()
                } else {
                    home.technical[term].as_str()
                }
            })
            .collect();
        truth.query_topic.push(topic);
        queries.push(QueryRecord {
            id: format!("q{qi:04}"),
            text: words.join(" "),
            article_ids: relevant.iter().map(|&a| format!("a{a:04}")).collect(),
        });
    }

    let ids: Vec<String> = queries.iter().map(|q| q.id.clone()).collect();
    let (train, rest) = ids.split_at(spec.train_queries);
    let (validation, test) = rest.split_at(spec.validation_queries);
    let split = SplitRecord {
        train: train.to_vec(),
        validation: validation.to_vec(),
        test: test.to_vec(),
    };
    let dataset = Dataset::from_records(articles, queries, &split)?;
    Ok((dataset, truth))
}

/// `n` articles from the section, topped up from sibling sections of the
/// same chapter and then the rest of the topic.
fn pick_relevant(sections: &[Section], sec_idx: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let sec = &sections[sec_idx];
    let mut pool: Vec<usize> = sec.articles.clone();
    pool.shuffle(rng);
    let same_topic = |s: &&Section| s.topic == sec.topic && !std::ptr::eq(*s, sec);
    let mut siblings: Vec<usize> = sections
        .iter()
        .filter(same_topic)
        .filter(|s| s.path[..2] == sec.path[..2])
        .flat_map(|s| s.articles.iter().copied())
        .collect();
    siblings.shuffle(rng);
    let mut others: Vec<usize> = sections
        .iter()
        .filter(same_topic)
        .filter(|s| s.path[..2] != sec.path[..2])
        .flat_map(|s| s.articles.iter().copied())
        .collect();
    others.shuffle(rng);
    let mut picked: Vec<usize> = pool.into_iter().chain(siblings).chain(others).take(n).collect();
    picked.sort_unstable();
    picked
}
