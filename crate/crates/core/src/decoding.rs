//! Beam-search generation and likelihood rescoring of suggestions.

use std::cmp::Ordering;

use crate::corpus::{Vocabulary, EOQ_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::model::{decoder_init, encode_session, next_word_log_distribution, query_log_prob, GruInput, ModelParams};
use crate::numerics::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamConfig {
    pub width: usize,
    /// Maximum number of words; a prefix at this length can only be closed.
    pub max_length: usize,
    /// Never emit the unknown token.
    pub forbid_unknown: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: 50,
            max_length: 12,
            forbid_unknown: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Words so far, without the end-of-query token.
    pub tokens: Vec<usize>,
    /// Cumulative log-probability, end-of-query included once complete.
    pub log_prob: f64,
    pub state: Vector,
    pub complete: bool,
    /// Decoding step at which the end-of-query token was emitted.
    pub completed_at: usize,
}

fn cmp_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Approximate `argmax_Q P(Q | context)` with a width-`k` beam.
///
/// Each live prefix proposes its `k` best next tokens; the best
/// `k − |completed|` proposals survive, and those ending in end-of-query
/// move to the completed pool. Search stops once `k` queries are complete
/// or no live prefix remains. Scores are unnormalized model log-probabilities
/// (the unknown token is skipped, not renormalized away), so they agree with
/// [`rescore`].
pub fn beam_search(params: &ModelParams, context: &[Vec<usize>], cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if cfg.width == 0 || cfg.max_length == 0 {
        return Err(Error::InvalidArgument("beam width and max_length must be >= 1".into()));
    }
    let states = encode_session(params, context)?;
    let s_last = states.last().expect("context is non-empty");
    let k = cfg.width;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: decoder_init(params, s_last),
        complete: false,
        completed_at: 0,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    let mut step = 0;

    while pool.len() < k && !live.is_empty() {
        step += 1;
        // (score, parent, token)
        let mut proposals: Vec<(f64, usize, usize)> = Vec::new();
        for (pi, hyp) in live.iter().enumerate() {
            let logp = next_word_log_distribution(params, &hyp.state, hyp.tokens.last().copied());
            let mut allowed: Vec<usize> = if hyp.tokens.len() >= cfg.max_length {
                vec![EOQ_ID]
            } else {
                (0..logp.len())
                    .filter(|&t| !(cfg.forbid_unknown && t == UNK_ID))
                    .collect()
            };
            allowed.sort_by(|&a, &b| cmp_desc(logp[a], logp[b]).then(a.cmp(&b)));
            allowed.truncate(k);
            proposals.extend(allowed.into_iter().map(|t| (hyp.log_prob + logp[t], pi, t)));
        }
        proposals.sort_by(|a, b| {
            cmp_desc(a.0, b.0).then_with(|| {
                live[a.1]
                    .tokens
                    .iter()
                    .chain([&a.2])
                    .cmp(live[b.1].tokens.iter().chain([&b.2]))
            })
        });
        proposals.truncate(k - pool.len());

        let mut next_live = Vec::with_capacity(proposals.len());
        for (score, pi, t) in proposals {
            let parent = &live[pi];
            if t == EOQ_ID {
                pool.push(Hypothesis {
                    tokens: parent.tokens.clone(),
                    log_prob: score,
                    state: parent.state.clone(),
                    complete: true,
                    completed_at: step,
                });
            } else {
                let mut tokens = parent.tokens.clone();
                tokens.push(t);
                let state = params.gru_dec.step(&parent.state, GruInput::Token(t)).h;
                next_live.push(Hypothesis {
                    tokens,
                    log_prob: score,
                    state,
                    complete: false,
                    completed_at: 0,
                });
            }
        }
        live = next_live;
    }

    pool.sort_by(|a, b| {
        cmp_desc(a.log_prob, b.log_prob)
            .then(a.completed_at.cmp(&b.completed_at))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    pool.truncate(k);
    Ok(pool)
}

/// `log P(candidate | context)`; unknown tokens are scored like any other word.
pub fn rescore(params: &ModelParams, context: &[Vec<usize>], candidate: &[usize]) -> Result<f64> {
    let states = encode_session(params, context)?;
    let s_last = states.last().expect("context is non-empty");
    query_log_prob(params, s_last, candidate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suggestion {
    pub text: String,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

/// Beam search from a textual context; returns at most `cfg.width` distinct,
/// non-empty suggestions, best first.
pub fn suggest(params: &ModelParams, vocab: &Vocabulary, context: &[String], cfg: &BeamConfig) -> Result<Vec<Suggestion>> {
    let encoded: Vec<Vec<usize>> = context
        .iter()
        .map(|q| vocab.encode_query(q))
        .filter(|q| !q.is_empty())
        .collect();
    if encoded.is_empty() {
        return Err(Error::InvalidArgument("suggest: empty context".into()));
    }
    let hyps = beam_search(params, &encoded, cfg)?;
    let mut out: Vec<Suggestion> = Vec::with_capacity(hyps.len());
    for h in hyps {
        if h.tokens.is_empty() {
            continue;
        }
        let text = vocab.decode_query(&h.tokens);
        if out.iter().any(|s| s.text == text) {
            continue;
        }
        out.push(Suggestion {
            text,
            tokens: h.tokens,
            log_prob: h.log_prob,
        });
    }
    Ok(out)
}
