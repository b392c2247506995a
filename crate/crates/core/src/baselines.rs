//! Count-based suggestion models (ADJ co-occurrence, QVMM with back-off), the
//! string features used for reranking, and a pairwise logistic ranker.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::binio::{ByteReader, ByteWriter};
use crate::corpus::TextSession;
use crate::error::{Error, Result};
use crate::numerics::Prng;

/// Successor counts between consecutive queries of background sessions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdjIndex {
    successors: BTreeMap<String, BTreeMap<String, u64>>,
    frequency: BTreeMap<String, u64>,
}

pub fn build_adj(background: &[TextSession]) -> AdjIndex {
    let mut idx = AdjIndex::default();
    for s in background {
        for q in &s.queries {
            *idx.frequency.entry(q.clone()).or_default() += 1;
        }
        for pair in s.queries.windows(2) {
            *idx
                .successors
                .entry(pair[0].clone())
                .or_default()
                .entry(pair[1].clone())
                .or_default() += 1;
        }
    }
    idx
}

impl AdjIndex {
    pub fn follow_count(&self, anchor: &str, candidate: &str) -> u64 {
        self.successors
            .get(anchor)
            .and_then(|m| m.get(candidate))
            .copied()
            .unwrap_or(0)
    }

    pub fn frequency(&self, query: &str) -> u64 {
        self.frequency.get(query).copied().unwrap_or(0)
    }

    pub fn contains(&self, query: &str) -> bool {
        self.frequency.contains_key(query)
    }

    pub fn distinct_queries(&self) -> usize {
        self.frequency.len()
    }

    pub fn frequencies(&self) -> &BTreeMap<String, u64> {
        &self.frequency
    }

    pub fn successors(&self, anchor: &str) -> Option<&BTreeMap<String, u64>> {
        self.successors.get(anchor)
    }

    pub fn total_pairs(&self) -> u64 {
        self.successors.values().flat_map(|m| m.values()).sum()
    }

    /// The `n` most frequent queries, ties broken lexicographically.
    pub fn most_frequent(&self, n: usize) -> Vec<(String, u64)> {
        let mut all: Vec<(String, u64)> = self.frequency.iter().map(|(q, &c)| (q.clone(), c)).collect();
        all.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(n);
        all
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(ADJ_MAGIC);
        w.u32(INDEX_VERSION);
        write_counts(&mut w, &self.frequency);
        w.u64(self.successors.len() as u64);
        for (anchor, succ) in &self.successors {
            w.string(anchor);
            write_counts(&mut w, succ);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "adjacency index");
        check_header(&mut r, ADJ_MAGIC, "adjacency index")?;
        let frequency = read_counts(&mut r)?;
        let n = r.usize()?;
        let mut successors = BTreeMap::new();
        for _ in 0..n {
            let anchor = r.string()?;
            successors.insert(anchor, read_counts(&mut r)?);
        }
        if r.remaining() != 0 {
            return Err(Error::format("adjacency index", "trailing bytes"));
        }
        Ok(AdjIndex { successors, frequency })
    }

    pub fn manifest(&self, bytes: &[u8]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format = hred-adjacency");
        let _ = writeln!(s, "version = {INDEX_VERSION}");
        let _ = writeln!(s, "distinct_queries = {}", self.distinct_queries());
        let _ = writeln!(s, "anchors = {}", self.successors.len());
        let _ = writeln!(s, "total_pairs = {}", self.total_pairs());
        let _ = writeln!(s, "file_sha256 = {}", hex::encode(Sha256::digest(bytes)));
        s
    }
}

/// Successors of `anchor` by count (descending, ties lexicographic), at most `n`.
pub fn adj_candidates(index: &AdjIndex, anchor: &str, n: usize) -> Vec<(String, u64)> {
    let Some(succ) = index.successors.get(anchor) else {
        return Vec::new();
    };
    let mut list: Vec<(String, u64)> = succ.iter().map(|(q, &c)| (q.clone(), c)).collect();
    list.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    list.truncate(n);
    list
}

const ADJ_MAGIC: &[u8; 8] = b"HREDADJI";
const QVMM_MAGIC: &[u8; 8] = b"HREDQVMM";
const INDEX_VERSION: u32 = 1;

fn check_header(r: &mut ByteReader<'_>, magic: &[u8; 8], what: &'static str) -> Result<()> {
    if r.take(8)? != magic {
        return Err(Error::format(what, "bad magic bytes"));
    }
    let v = r.u32()?;
    if v != INDEX_VERSION {
        return Err(Error::Version {
            what,
            found: v,
            expected: INDEX_VERSION,
        });
    }
    Ok(())
}

fn write_counts(w: &mut ByteWriter, m: &BTreeMap<String, u64>) {
    w.u64(m.len() as u64);
    for (k, &v) in m {
        w.string(k);
        w.u64(v);
    }
}

fn read_counts(r: &mut ByteReader<'_>) -> Result<BTreeMap<String, u64>> {
    let n = r.usize()?;
    let mut m = BTreeMap::new();
    for _ in 0..n {
        let k = r.string()?;
        m.insert(k, r.u64()?);
    }
    Ok(m)
}

/// Successor counts for one context.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QvmmNode {
    pub total: u64,
    pub successors: BTreeMap<String, u64>,
}

/// Variable-memory Markov model over queries. Contexts are keyed
/// most-recent-first, so each key's prefixes are its shorter suffix contexts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QvmmTree {
    order: usize,
    nodes: BTreeMap<Vec<String>, QvmmNode>,
    distinct_queries: usize,
}

pub fn build_qvmm(background: &[TextSession], order: usize) -> Result<QvmmTree> {
    if order == 0 {
        return Err(Error::InvalidArgument("QVMM order must be >= 1".into()));
    }
    let mut nodes: BTreeMap<Vec<String>, QvmmNode> = BTreeMap::new();
    let mut distinct = BTreeSet::new();
    for s in background {
        distinct.extend(s.queries.iter().map(String::as_str));
        for i in 1..s.queries.len() {
            let target = &s.queries[i];
            let mut key: Vec<String> = Vec::new();
            for len in 0..=order.min(i) {
                if len > 0 {
                    key.push(s.queries[i - len].clone());
                }
                let node = nodes.entry(key.clone()).or_default();
                node.total += 1;
                *node.successors.entry(target.clone()).or_default() += 1;
            }
        }
    }
    Ok(QvmmTree {
        order,
        nodes,
        distinct_queries: distinct.len(),
    })
}

impl QvmmTree {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn distinct_queries(&self) -> usize {
        self.distinct_queries
    }

    /// Node for a context given oldest-first.
    pub fn node(&self, context: &[String]) -> Option<&QvmmNode> {
        let key: Vec<String> = context.iter().rev().cloned().collect();
        self.nodes.get(&key)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&Vec<String>, &QvmmNode)> {
        self.nodes.iter()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(QVMM_MAGIC);
        w.u32(INDEX_VERSION);
        w.u64(self.order as u64);
        w.u64(self.distinct_queries as u64);
        w.u64(self.nodes.len() as u64);
        for (key, node) in &self.nodes {
            w.u32(key.len() as u32);
            key.iter().for_each(|q| w.string(q));
            w.u64(node.total);
            write_counts(&mut w, &node.successors);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "qvmm tree");
        check_header(&mut r, QVMM_MAGIC, "qvmm tree")?;
        let order = r.usize()?;
        let distinct_queries = r.usize()?;
        let n = r.usize()?;
        let mut nodes = BTreeMap::new();
        for _ in 0..n {
            let klen = r.u32()? as usize;
            let key = (0..klen).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
            let total = r.u64()?;
            let successors = read_counts(&mut r)?;
            if successors.values().sum::<u64>() != total {
                return Err(Error::format("qvmm tree", "node total differs from its successor counts"));
            }
            nodes.insert(key, QvmmNode { total, successors });
        }
        if r.remaining() != 0 {
            return Err(Error::format("qvmm tree", "trailing bytes"));
        }
        Ok(QvmmTree {
            order,
            nodes,
            distinct_queries,
        })
    }

    pub fn manifest(&self, bytes: &[u8]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format = hred-qvmm");
        let _ = writeln!(s, "version = {INDEX_VERSION}");
        let _ = writeln!(s, "order = {}", self.order);
        let _ = writeln!(s, "distinct_queries = {}", self.distinct_queries);
        let _ = writeln!(s, "nodes = {}", self.nodes.len());
        let _ = writeln!(s, "file_sha256 = {}", hex::encode(Sha256::digest(bytes)));
        s
    }
}

/// `log P(candidate | context)` under the QVMM.
///
/// Starting from the longest context suffix (at most `order` queries) known
/// to the tree, backs off to shorter suffixes until one has observed the
/// candidate as a successor, and returns the empirical conditional there.
/// A candidate never observed as a successor scores `log(1 / distinct queries)`.
pub fn qvmm_log_prob(tree: &QvmmTree, context: &[String], candidate: &str) -> f64 {
    let max_len = tree.order.min(context.len());
    let mut key: Vec<String> = context.iter().rev().take(max_len).cloned().collect();
    loop {
        if let Some(node) = tree.nodes.get(&key) {
            if let Some(&c) = node.successors.get(candidate) {
                return (c as f64 / node.total as f64).ln();
            }
        }
        if key.pop().is_none() {
            break;
        }
    }
    (1.0 / tree.distinct_queries.max(1) as f64).ln()
}

/// Unit-cost edit distance over characters.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn trigrams(s: &str) -> BTreeSet<[char; 3]> {
    if s.is_empty() {
        return BTreeSet::new();
    }
    let padded: Vec<char> = std::iter::once('^').chain(s.chars()).chain(std::iter::once('$')).collect();
    padded.windows(3).map(|w| [w[0], w[1], w[2]]).collect()
}

/// Jaccard similarity of boundary-padded character trigram sets.
pub fn char_ngram_similarity(a: &str, b: &str) -> f64 {
    let ta = trigrams(a);
    let tb = trigrams(b);
    let union = ta.union(&tb).count();
    if union == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

pub const BASE_FEATURES: usize = 18;
pub const CONTEXT_SIMILARITY_SLOTS: usize = 10;

pub const FEATURE_NAMES: [&str; BASE_FEATURES + 1] = [
    "follow_count",
    "anchor_frequency",
    "anchor_levenshtein",
    "candidate_chars",
    "candidate_words",
    "candidate_frequency",
    "context_sim_1",
    "context_sim_2",
    "context_sim_3",
    "context_sim_4",
    "context_sim_5",
    "context_sim_6",
    "context_sim_7",
    "context_sim_8",
    "context_sim_9",
    "context_sim_10",
    "context_mean_levenshtein",
    "qvmm_log_prob",
    "hred_log_prob",
];

/// Untransformed counts behind the `log(1 + count)` frequency features.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RawCounts {
    pub follow: u64,
    pub anchor_frequency: u64,
    pub candidate_frequency: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub raw: RawCounts,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Features of `candidate` given `context` (oldest first). `anchor` keys the
/// pairwise counts; it is the last context query except in the long-tail
/// scenario, where a shortened form of it is used.
pub fn extract_features(
    context: &[String],
    anchor: &str,
    candidate: &str,
    adj: &AdjIndex,
    qvmm: &QvmmTree,
    hred: Option<f64>,
) -> Result<FeatureVector> {
    if context.is_empty() {
        return Err(Error::InvalidArgument("extract_features: empty context".into()));
    }
    let raw = RawCounts {
        follow: adj.follow_count(anchor, candidate),
        anchor_frequency: adj.frequency(anchor),
        candidate_frequency: adj.frequency(candidate),
    };
    let log1p = |c: u64| (c as f64).ln_1p();
    let mut values = Vec::with_capacity(BASE_FEATURES + 1);
    values.push(log1p(raw.follow));
    values.push(log1p(raw.anchor_frequency));
    values.push(levenshtein(anchor, candidate) as f64);
    values.push(candidate.chars().count() as f64);
    values.push(candidate.split_whitespace().count() as f64);
    values.push(log1p(raw.candidate_frequency));
    let recent = context.iter().rev().take(CONTEXT_SIMILARITY_SLOTS);
    let mut sims: Vec<f64> = recent.map(|q| char_ngram_similarity(candidate, q)).collect();
    sims.resize(CONTEXT_SIMILARITY_SLOTS, 0.0);
    values.extend(sims);
    let mean_lev = context
        .iter()
        .map(|q| levenshtein(candidate, q) as f64)
        .sum::<f64>()
        / context.len() as f64;
    values.push(mean_lev);
    values.push(qvmm_log_prob(qvmm, context, candidate));
    if let Some(h) = hred {
        values.push(h);
    }
    Ok(FeatureVector { values, raw })
}

/// One list of candidates to rank: features per candidate and the relevant slot.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingInstance {
    pub candidates: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub relevant: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankerConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            iterations: 300,
            learning_rate: 0.5,
            l2: 1e-4,
            seed: 1234,
        }
    }
}

/// Linear scorer over standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct RankerModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub iterations: usize,
    pub pairs: usize,
    pub final_objective: f64,
}

impl RankerModel {
    pub fn zero(dim: usize) -> Self {
        RankerModel {
            weights: vec![0.0; dim],
            bias: 0.0,
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            iterations: 0,
            pairs: 0,
            final_objective: 0.0,
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.bias
            + x.iter()
                .zip(&self.weights)
                .zip(self.mean.iter().zip(&self.scale))
                .map(|((v, w), (m, s))| w * (v - m) / s)
                .sum::<f64>()
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::numerics::sigmoid(x)
}

/// Pairwise logistic regression: maximizes `Σ log σ(w·(x_rel − x_other))`
/// over every (relevant, non-relevant) pair, minus an L2 penalty, by full-batch
/// gradient ascent from a seeded start.
pub fn train_ranker(instances: &[RankingInstance], config: &RankerConfig) -> Result<RankerModel> {
    let first = instances
        .first()
        .ok_or_else(|| Error::InvalidArgument("train_ranker: no instances".into()))?;
    let dim = first.features.first().map_or(0, Vec::len);
    for inst in instances {
        if inst.features.len() != 20 || inst.candidates.len() != 20 || inst.relevant >= 20 {
            return Err(Error::InvalidArgument(
                "ranking instances need 20 candidates with exactly one relevant".into(),
            ));
        }
        if inst.features.iter().any(|f| f.len() != dim) {
            return Err(Error::InvalidArgument("inconsistent feature arity".into()));
        }
    }

    let rows = instances.iter().flat_map(|i| i.features.iter());
    let count = (instances.len() * 20) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows.clone() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / count;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / count;
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| if *v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    let informative: Vec<bool> = var.iter().map(|v| *v > 1e-24).collect();

    // pairwise differences in standardized space
    let mut diffs: Vec<Vec<f64>> = Vec::with_capacity(instances.len() * 19);
    for inst in instances {
        let rel = &inst.features[inst.relevant];
        for (j, other) in inst.features.iter().enumerate() {
            if j == inst.relevant {
                continue;
            }
            diffs.push(
                rel.iter()
                    .zip(other)
                    .zip(&scale)
                    .map(|((a, b), s)| (a - b) / s)
                    .collect(),
            );
        }
    }
    if diffs.iter().all(|d| d.iter().all(|&x| x == 0.0)) {
        log::warn!("ranker features are degenerate; returning a zero-weight model");
        let mut m = RankerModel::zero(dim);
        m.mean = mean;
        m.scale = scale;
        return Ok(m);
    }

    let mut prng = Prng::new(config.seed);
    let mut w: Vec<f64> = (0..dim)
        .map(|k| if informative[k] { prng.uniform(-0.01, 0.01) } else { 0.0 })
        .collect();
    let n = diffs.len() as f64;
    let mut objective = 0.0;
    for _ in 0..config.iterations {
        let mut grad: Vec<f64> = w.iter().map(|wk| -config.l2 * wk).collect();
        objective = -0.5 * config.l2 * w.iter().map(|x| x * x).sum::<f64>();
        for d in &diffs {
            let z: f64 = d.iter().zip(&w).map(|(a, b)| a * b).sum();
            let s = sigmoid(z);
            objective += s.max(1e-300).ln() / n;
            let coeff = (1.0 - s) / n;
            for (g, x) in grad.iter_mut().zip(d) {
                *g += coeff * x;
            }
        }
        for (wk, g) in w.iter_mut().zip(&grad) {
            *wk += config.learning_rate * g;
        }
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("ranker training diverged".into()));
    }
    Ok(RankerModel {
        weights: w,
        bias: 0.0,
        mean,
        scale,
        iterations: config.iterations,
        pairs: diffs.len(),
        final_objective: objective,
    })
}

/// Candidate indices ordered by descending score; equal scores fall back to
/// lexicographic candidate text.
pub fn rank_by_scores(scores: &[f64], candidates: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| candidates[a].cmp(&candidates[b]))
    });
    order
}

pub fn rank_candidates(model: &RankerModel, instance: &RankingInstance) -> Vec<usize> {
    let scores: Vec<f64> = instance.features.iter().map(|f| model.score(f)).collect();
    rank_by_scores(&scores, &instance.candidates)
}

pub fn save_adj(index: &AdjIndex, path: &Path) -> Result<()> {
    let bytes = index.to_bytes();
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let m = crate::training::manifest_path(path);
    fs::write(&m, index.manifest(&bytes)).map_err(|e| Error::io(m, e))
}

pub fn load_adj(path: &Path) -> Result<AdjIndex> {
    AdjIndex::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_qvmm(tree: &QvmmTree, path: &Path) -> Result<()> {
    let bytes = tree.to_bytes();
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let m = crate::training::manifest_path(path);
    fs::write(&m, tree.manifest(&bytes)).map_err(|e| Error::io(m, e))
}

pub fn load_qvmm(path: &Path) -> Result<QvmmTree> {
    QvmmTree::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
