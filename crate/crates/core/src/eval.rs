//! Next-query, robust and long-tail scenarios, MRR, and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::baselines::{
    adj_candidates, extract_features, rank_by_scores, rank_candidates, train_ranker, AdjIndex, QvmmTree,
    RankerConfig, RankerModel, RankingInstance,
};
use crate::corpus::{TextSession, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{encode_session, query_log_prob, ModelParams};
use crate::numerics::Prng;

pub const CANDIDATES: usize = 20;
pub const NOISY_POOL: usize = 100;
const FIELD_SEPARATOR: &str = "|||";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioInstance {
    pub context: Vec<String>,
    pub target: String,
    pub candidates: Vec<String>,
    pub relevant: usize,
    /// Query the candidates were looked up with, when it differs from the anchor.
    pub adj_key: Option<String>,
}

impl ScenarioInstance {
    pub fn anchor(&self) -> &str {
        self.context.last().map(String::as_str).unwrap_or("")
    }

    /// Query used for candidate extraction and pairwise counts.
    pub fn key(&self) -> &str {
        self.adj_key.as_deref().unwrap_or_else(|| self.anchor())
    }

    /// Context plus the target.
    pub fn session_length(&self) -> usize {
        self.context.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() {
            return Err(Error::format("scenario instance", "empty context"));
        }
        if self.candidates.len() != CANDIDATES {
            return Err(Error::format(
                "scenario instance",
                format!("{} candidates, expected {CANDIDATES}", self.candidates.len()),
            ));
        }
        let hits: Vec<usize> = (0..CANDIDATES).filter(|&i| self.candidates[i] == self.target).collect();
        if hits != [self.relevant] {
            return Err(Error::format(
                "scenario instance",
                format!("target {:?} must appear exactly once, at slot {}", self.target, self.relevant),
            ));
        }
        Ok(())
    }
}

fn instance_from(context: Vec<String>, target: &str, adj: &AdjIndex, key: &str) -> Option<ScenarioInstance> {
    let cands = adj_candidates(adj, key, CANDIDATES);
    if cands.len() < CANDIDATES {
        return None;
    }
    let relevant = cands.iter().position(|(q, _)| q == target)?;
    Some(ScenarioInstance {
        context,
        target: target.to_string(),
        candidates: cands.into_iter().map(|(q, _)| q).collect(),
        relevant,
        adj_key: None,
    })
}

/// One instance per session of at least two queries whose anchor has 20 or
/// more background successors including the target.
pub fn build_next_query_scenario(sessions: &[TextSession], adj: &AdjIndex) -> Vec<ScenarioInstance> {
    sessions
        .iter()
        .filter(|s| s.len() >= 2)
        .filter_map(|s| {
            let (target, context) = s.queries.split_last()?;
            instance_from(context.to_vec(), target, adj, context.last()?)
        })
        .collect()
}

/// The most frequent background queries, drawn in proportion to frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySampler {
    pub queries: Vec<String>,
    pub weights: Vec<f64>,
}

impl NoisySampler {
    pub fn from_background(adj: &AdjIndex, pool: usize) -> Result<Self> {
        let top = adj.most_frequent(pool);
        if top.is_empty() {
            return Err(Error::InvalidArgument("no background queries to sample noise from".into()));
        }
        Ok(NoisySampler {
            queries: top.iter().map(|(q, _)| q.clone()).collect(),
            weights: top.iter().map(|&(_, c)| c as f64).collect(),
        })
    }

    /// Target distribution over `queries`.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    pub fn sample(&self, prng: &mut Prng) -> usize {
        prng.weighted_index(&self.weights)
    }
}

/// Index of the noisy query and the position it was inserted at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Corruption {
    pub noise: usize,
    pub position: usize,
}

/// Inserts one sampled noisy query at a uniform position in `0..=len`.
pub fn corrupt_context(context: &mut Vec<String>, sampler: &NoisySampler, prng: &mut Prng) -> Corruption {
    let noise = sampler.sample(prng);
    let position = prng.below(context.len() + 1);
    context.insert(position, sampler.queries[noise].clone());
    Corruption { noise, position }
}

pub fn build_robust_scenario(instances: &[ScenarioInstance], adj: &AdjIndex, prng: &mut Prng) -> Result<Vec<ScenarioInstance>> {
    Ok(build_robust_scenario_traced(instances, adj, prng)?.0)
}

/// [`build_robust_scenario`] that also reports every corruption drawn.
pub fn build_robust_scenario_traced(
    instances: &[ScenarioInstance],
    adj: &AdjIndex,
    prng: &mut Prng,
) -> Result<(Vec<ScenarioInstance>, Vec<Corruption>)> {
    let sampler = NoisySampler::from_background(adj, NOISY_POOL)?;
    let mut out = Vec::with_capacity(instances.len());
    let mut log = Vec::with_capacity(instances.len());
    for inst in instances {
        let mut corrupted = inst.clone();
        log.push(corrupt_context(&mut corrupted.context, &sampler, prng));
        out.push(corrupted);
    }
    Ok((out, log))
}

/// Longest prefix of `query` (dropping words from the right) seen in the background.
pub fn longest_known_prefix(query: &str, adj: &AdjIndex) -> Option<String> {
    let words: Vec<&str> = query.split(' ').collect();
    (1..words.len())
        .rev()
        .map(|n| words[..n].join(" "))
        .find(|p| adj.contains(p))
}

/// Sessions whose anchor never occurs in the background; candidates come
/// from the longest background-known prefix of the anchor.
pub fn build_longtail_scenario(sessions: &[TextSession], adj: &AdjIndex) -> Vec<ScenarioInstance> {
    sessions
        .iter()
        .filter(|s| s.len() >= 2)
        .filter_map(|s| {
            let (target, context) = s.queries.split_last()?;
            let anchor = context.last()?;
            if adj.contains(anchor) {
                return None;
            }
            let key = longest_known_prefix(anchor, adj)?;
            let mut inst = instance_from(context.to_vec(), target, adj, &key)?;
            inst.adj_key = Some(key);
            Some(inst)
        })
        .collect()
}

/// `1 / rank` of `relevant` in `ranking` (candidate indices, best first).
pub fn reciprocal_rank(ranking: &[usize], relevant: usize) -> Result<f64> {
    ranking
        .iter()
        .position(|&i| i == relevant)
        .map(|p| 1.0 / (p + 1) as f64)
        .ok_or_else(|| Error::InvalidArgument(format!("relevant candidate {relevant} missing from ranking")))
}

pub fn mrr(rankings: &[Vec<usize>], relevant: &[usize]) -> Result<f64> {
    if rankings.len() != relevant.len() {
        return Err(Error::Dimension {
            op: "mrr",
            detail: format!("{} rankings, {} relevance labels", rankings.len(), relevant.len()),
        });
    }
    if rankings.is_empty() {
        return Err(Error::InvalidArgument("mrr of no instances".into()));
    }
    let mut total = 0.0;
    for (r, &rel) in rankings.iter().zip(relevant) {
        total += reciprocal_rank(r, rel)?;
    }
    Ok(total / rankings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Bucket {
    Short,
    Medium,
    Long,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Short, Bucket::Medium, Bucket::Long];

    /// Bucket of a session of `len` queries (context plus target).
    pub fn of(len: usize) -> Bucket {
        match len {
            0..=2 => Bucket::Short,
            3 | 4 => Bucket::Medium,
            _ => Bucket::Long,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Short => "short",
            Bucket::Medium => "medium",
            Bucket::Long => "long",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketStats {
    pub mrr: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: f64,
    pub count: usize,
    /// Absent buckets have no entry.
    pub buckets: BTreeMap<Bucket, BucketStats>,
    pub config: Vec<(String, String)>,
}

impl EvalReport {
    /// `key = value` lines in a fixed order.
    pub fn to_text(&self, prefix: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{prefix}.mrr = {:.6}", self.overall);
        let _ = writeln!(s, "{prefix}.count = {}", self.count);
        for b in Bucket::ALL {
            match self.buckets.get(&b) {
                Some(st) => {
                    let _ = writeln!(s, "{prefix}.{}.mrr = {:.6}", b.name(), st.mrr);
                    let _ = writeln!(s, "{prefix}.{}.count = {}", b.name(), st.count);
                }
                None => {
                    let _ = writeln!(s, "{prefix}.{}.mrr = absent", b.name());
                    let _ = writeln!(s, "{prefix}.{}.count = 0", b.name());
                }
            }
        }
        s
    }
}

pub fn bucketed_report(instances: &[ScenarioInstance], rankings: &[Vec<usize>], config: Vec<(String, String)>) -> Result<EvalReport> {
    if instances.len() != rankings.len() {
        return Err(Error::Dimension {
            op: "bucketed_report",
            detail: format!("{} instances, {} rankings", instances.len(), rankings.len()),
        });
    }
    let relevant: Vec<usize> = instances.iter().map(|i| i.relevant).collect();
    let overall = mrr(rankings, &relevant)?;
    let mut sums: BTreeMap<Bucket, (f64, usize)> = BTreeMap::new();
    for (inst, r) in instances.iter().zip(rankings) {
        let e = sums.entry(Bucket::of(inst.session_length())).or_default();
        e.0 += reciprocal_rank(r, inst.relevant)?;
        e.1 += 1;
    }
    let buckets = sums
        .into_iter()
        .map(|(b, (sum, count))| {
            (
                b,
                BucketStats {
                    mrr: sum / count as f64,
                    count,
                },
            )
        })
        .collect();
    Ok(EvalReport {
        overall,
        count: instances.len(),
        buckets,
        config,
    })
}

/// Ranking by background follow counts (the order candidates were extracted in).
pub fn rank_adj(inst: &ScenarioInstance, adj: &AdjIndex) -> Vec<usize> {
    let scores: Vec<f64> = inst
        .candidates
        .iter()
        .map(|c| adj.follow_count(inst.key(), c) as f64)
        .collect();
    rank_by_scores(&scores, &inst.candidates)
}

/// HRED log-likelihood of every candidate given the last `depth` context
/// queries (`None` uses the whole context).
pub fn hred_scores(params: &ModelParams, vocab: &Vocabulary, inst: &ScenarioInstance, depth: Option<usize>) -> Result<Vec<f64>> {
    let take = depth.map_or(inst.context.len(), |d| d.min(inst.context.len()));
    let context: Vec<Vec<usize>> = inst.context[inst.context.len() - take..]
        .iter()
        .map(|q| vocab.encode_query(q))
        .filter(|q| !q.is_empty())
        .collect();
    if context.is_empty() {
        return Err(Error::InvalidArgument("scenario context encodes to nothing".into()));
    }
    let states = encode_session(params, &context)?;
    let s_last = states.last().expect("non-empty context");
    inst.candidates
        .iter()
        .map(|c| query_log_prob(params, s_last, &vocab.encode_query(c)))
        .collect()
}

pub fn hred_scores_all(
    params: &ModelParams,
    vocab: &Vocabulary,
    instances: &[ScenarioInstance],
    depth: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    instances
        .par_iter()
        .map(|inst| hred_scores(params, vocab, inst, depth))
        .collect()
}

pub fn rank_hred(params: &ModelParams, vocab: &Vocabulary, instances: &[ScenarioInstance], depth: Option<usize>) -> Result<Vec<Vec<usize>>> {
    let scores = hred_scores_all(params, vocab, instances, depth)?;
    Ok(instances
        .iter()
        .zip(&scores)
        .map(|(inst, s)| rank_by_scores(s, &inst.candidates))
        .collect())
}

/// HRED rescoring MRR when only the most recent `depth` context queries are used.
pub fn context_truncation_curve(
    instances: &[ScenarioInstance],
    params: &ModelParams,
    vocab: &Vocabulary,
    depths: &[Option<usize>],
) -> Result<Vec<(Option<usize>, f64)>> {
    let relevant: Vec<usize> = instances.iter().map(|i| i.relevant).collect();
    depths
        .iter()
        .map(|&d| Ok((d, mrr(&rank_hred(params, vocab, instances, d)?, &relevant)?)))
        .collect()
}

/// Ranker inputs for a scenario, with the HRED feature appended when scores are given.
pub fn ranking_instances(
    instances: &[ScenarioInstance],
    adj: &AdjIndex,
    qvmm: &QvmmTree,
    hred: Option<&[Vec<f64>]>,
) -> Result<Vec<RankingInstance>> {
    instances
        .iter()
        .enumerate()
        .map(|(n, inst)| {
            let features = inst
                .candidates
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let h = hred.map(|s| s[n][j]);
                    extract_features(&inst.context, inst.key(), c, adj, qvmm, h).map(|f| f.values)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RankingInstance {
                candidates: inst.candidates.clone(),
                features,
                relevant: inst.relevant,
            })
        })
        .collect()
}

pub fn rank_with(model: &RankerModel, instances: &[RankingInstance]) -> Vec<Vec<usize>> {
    instances.iter().map(|i| rank_candidates(model, i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Next,
    Robust,
    Longtail,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Next => "next",
            Scenario::Robust => "robust",
            Scenario::Longtail => "longtail",
        }
    }

    pub fn parse(s: &str) -> Result<Scenario> {
        match s {
            "next" => Ok(Scenario::Next),
            "robust" => Ok(Scenario::Robust),
            "longtail" => Ok(Scenario::Longtail),
            _ => Err(Error::InvalidArgument(format!("unknown scenario {s:?} (next|robust|longtail)"))),
        }
    }
}

/// Builds a scenario from evaluation sessions. Robust corruption draws from `prng`.
pub fn build_scenario(scenario: Scenario, sessions: &[TextSession], adj: &AdjIndex, prng: &mut Prng) -> Result<Vec<ScenarioInstance>> {
    match scenario {
        Scenario::Next => Ok(build_next_query_scenario(sessions, adj)),
        Scenario::Robust => build_robust_scenario(&build_next_query_scenario(sessions, adj), adj, prng),
        Scenario::Longtail => Ok(build_longtail_scenario(sessions, adj)),
    }
}

/// Reports for every ranker on one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub scenario: Scenario,
    pub train_instances: usize,
    pub adj: EvalReport,
    pub hred: Option<EvalReport>,
    pub ranker: Option<EvalReport>,
    pub ranker_hred: Option<EvalReport>,
    pub config: Vec<(String, String)>,
}

impl EvalSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario = {}", self.scenario.name());
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k} = {v}");
        }
        let _ = writeln!(s, "ranker.train_instances = {}", self.train_instances);
        let _ = writeln!(s, "ranker.algorithm = pairwise-logistic");
        s.push_str(&self.adj.to_text("adj"));
        for (name, rep) in [("hred", &self.hred), ("features", &self.ranker), ("features_hred", &self.ranker_hred)] {
            match rep {
                Some(r) => s.push_str(&r.to_text(name)),
                None => {
                    let _ = writeln!(s, "{name}.mrr = absent");
                }
            }
        }
        s
    }
}

pub struct EvalInputs<'a> {
    pub scenario: Scenario,
    /// Sessions the ranker is fitted on.
    pub train: &'a [TextSession],
    /// Sessions MRR is reported on.
    pub test: &'a [TextSession],
    pub adj: &'a AdjIndex,
    pub qvmm: &'a QvmmTree,
    pub model: Option<(&'a ModelParams, &'a Vocabulary)>,
    pub ranker: RankerConfig,
    pub seed: u64,
    pub config: Vec<(String, String)>,
}

/// ADJ, HRED rescoring, and the feature ranker with and without the HRED feature.
pub fn run_evaluation(inputs: &EvalInputs<'_>) -> Result<EvalSummary> {
    let mut prng = Prng::new(inputs.seed);
    let train = build_scenario(inputs.scenario, inputs.train, inputs.adj, &mut prng)?;
    let test = build_scenario(inputs.scenario, inputs.test, inputs.adj, &mut prng)?;
    if test.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no {} scenario instances in the test sessions",
            inputs.scenario.name()
        )));
    }
    let adj_rank: Vec<Vec<usize>> = test.iter().map(|i| rank_adj(i, inputs.adj)).collect();
    let adj = bucketed_report(&test, &adj_rank, inputs.config.clone())?;

    let (test_hred, train_hred) = match inputs.model {
        Some((p, v)) => (
            Some(hred_scores_all(p, v, &test, None)?),
            Some(hred_scores_all(p, v, &train, None)?),
        ),
        None => (None, None),
    };
    let hred = match &test_hred {
        Some(scores) => {
            let ranks = test
                .iter()
                .zip(scores)
                .map(|(i, s)| rank_by_scores(s, &i.candidates))
                .collect::<Vec<_>>();
            Some(bucketed_report(&test, &ranks, inputs.config.clone())?)
        }
        None => None,
    };

    let mut ranker = None;
    let mut ranker_hred = None;
    if !train.is_empty() {
        let fit_and_report = |tr: Option<&[Vec<f64>]>, te: Option<&[Vec<f64>]>| -> Result<EvalReport> {
            let tr_inst = ranking_instances(&train, inputs.adj, inputs.qvmm, tr)?;
            let te_inst = ranking_instances(&test, inputs.adj, inputs.qvmm, te)?;
            let model = train_ranker(&tr_inst, &inputs.ranker)?;
            bucketed_report(&test, &rank_with(&model, &te_inst), inputs.config.clone())
        };
        ranker = Some(fit_and_report(None, None)?);
        if let (Some(tr), Some(te)) = (&train_hred, &test_hred) {
            ranker_hred = Some(fit_and_report(Some(tr), Some(te))?);
        }
    } else {
        log::warn!("no ranker training instances; feature rankers skipped");
    }

    Ok(EvalSummary {
        scenario: inputs.scenario,
        train_instances: train.len(),
        adj,
        hred,
        ranker,
        ranker_hred,
        config: inputs.config.clone(),
    })
}

pub fn instance_to_line(inst: &ScenarioInstance) -> String {
    let mut fields: Vec<&str> = inst.context.iter().map(String::as_str).collect();
    fields.push(FIELD_SEPARATOR);
    fields.push(&inst.target);
    fields.push(FIELD_SEPARATOR);
    fields.extend(inst.candidates.iter().map(String::as_str));
    if let Some(k) = &inst.adj_key {
        fields.push(FIELD_SEPARATOR);
        fields.push(k);
    }
    fields.join("\t")
}

pub fn instance_from_line(line: &str) -> Result<ScenarioInstance> {
    let fields: Vec<&str> = line.split('\t').collect();
    let parts: Vec<&[&str]> = fields.split(|f| *f == FIELD_SEPARATOR).collect();
    let bad = |d: &str| Error::format("instance line", d.to_string());
    let (context, target, candidates, adj_key) = match parts.as_slice() {
        [c, t, cands] => (c, t, cands, None),
        [c, t, cands, [k]] => (c, t, cands, Some(k.to_string())),
        _ => return Err(bad("expected context ||| target ||| candidates [||| key]")),
    };
    let [target] = target else {
        return Err(bad("expected exactly one target"));
    };
    let relevant = candidates
        .iter()
        .position(|c| c == target)
        .ok_or_else(|| bad("target is not among the candidates"))?;
    let inst = ScenarioInstance {
        context: context.iter().map(|s| s.to_string()).collect(),
        target: target.to_string(),
        candidates: candidates.iter().map(|s| s.to_string()).collect(),
        relevant,
        adj_key,
    };
    inst.validate()?;
    Ok(inst)
}

pub fn write_instances(path: &Path, instances: &[ScenarioInstance]) -> Result<()> {
    let mut s = String::new();
    for inst in instances {
        s.push_str(&instance_to_line(inst));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_instances(path: &Path) -> Result<Vec<ScenarioInstance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.is_empty()).map(instance_from_line).collect()
}
