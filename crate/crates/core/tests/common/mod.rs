//! Synthetic session logs shared by the integration tests.
#![allow(dead_code)]

use hred::corpus::TextSession;
use hred::numerics::Prng;

/// Sessions `[topic_i, filler, goal_σ(i)]`: the last query depends only on
/// the first, and the filler is drawn from a small topic-dependent set.
/// Frequent navigational queries fill sessions of their own and are
/// sometimes slipped into topic sessions ahead of the filler.
#[derive(Debug, Clone)]
pub struct SyntheticLog {
    pub topics: usize,
    pub fillers: usize,
    pub fillers_per_topic: usize,
    pub navigational: usize,
    pub nav_insert_rate: f64,
    /// Exponent of the Zipf law over topic popularity.
    pub skew: f64,
}

impl Default for SyntheticLog {
    fn default() -> Self {
        SyntheticLog {
            topics: 60,
            fillers: 6,
            fillers_per_topic: 2,
            navigational: 30,
            nav_insert_rate: 0.5,
            skew: 1.3,
        }
    }
}

pub fn topic(i: usize) -> String {
    format!("topic{i:03}")
}

pub fn goal(i: usize) -> String {
    format!("goal{i:03} page")
}

pub fn filler(j: usize) -> String {
    format!("misc{j:02}")
}

pub fn nav(k: usize) -> String {
    format!("nav{k:02}")
}

fn zipf(n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|i| ((i + 1) as f64).powf(-s)).collect()
}

impl SyntheticLog {
    pub fn goal_of(&self, topic: usize) -> usize {
        (7 * topic + 3) % self.topics
    }

    pub fn topic_session(&self, prng: &mut Prng) -> Vec<String> {
        let t = prng.weighted_index(&zipf(self.topics, self.skew));
        let f = (t + prng.below(self.fillers_per_topic)) % self.fillers;
        let mut qs = vec![topic(t), filler(f), goal(self.goal_of(t))];
        if prng.next_f64() < self.nav_insert_rate {
            let k = prng.weighted_index(&zipf(self.navigational, 1.0));
            let pos = prng.below(2);
            qs.insert(pos, nav(k));
        }
        qs
    }

    pub fn nav_session(&self, prng: &mut Prng) -> Vec<String> {
        let len = 2 + prng.below(2);
        (0..len)
            .map(|_| nav(prng.weighted_index(&zipf(self.navigational, 1.0))))
            .collect()
    }

    /// `topical` topic sessions shuffled together with `navigational` nav sessions.
    pub fn sessions(&self, topical: usize, navigational: usize, prng: &mut Prng) -> Vec<TextSession> {
        let mut raw: Vec<Vec<String>> = (0..topical).map(|_| self.topic_session(prng)).collect();
        raw.extend((0..navigational).map(|_| self.nav_session(prng)));
        prng.shuffle(&mut raw);
        raw.into_iter()
            .enumerate()
            .map(|(n, queries)| TextSession {
                user_id: format!("user{n}"),
                times: (0..queries.len() as i64).map(|i| 1000 * n as i64 + 60 * i).collect(),
                queries,
            })
            .collect()
    }
}
