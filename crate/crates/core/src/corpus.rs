//! Query-log ingestion: normalization, session segmentation, vocabulary
//! construction, token encoding and time-based splits.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Idle gap (seconds) that closes a session.
pub const SESSION_GAP_SECS: i64 = 30 * 60;

pub const UNK_ID: usize = 0;
pub const EOQ_ID: usize = 1;
pub const UNK_TOKEN: &str = "<unk>";
pub const EOQ_TOKEN: &str = "</q>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawLogRecord {
    pub user_id: String,
    pub query_text: String,
    pub timestamp: i64,
}

/// A session before vocabulary encoding. `times[i]` is the submission time
/// of `queries[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSession {
    pub user_id: String,
    pub queries: Vec<String>,
    pub times: Vec<i64>,
}

impl TextSession {
    pub fn start_time(&self) -> i64 {
        self.times.first().copied().unwrap_or(0)
    }

    pub fn end_time(&self) -> i64 {
        self.times.last().copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// A session of token ids. The end-of-query id is never stored here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub queries: Vec<Vec<usize>>,
    pub start_time: i64,
    pub end_time: i64,
}

impl Session {
    pub fn new(queries: Vec<Vec<usize>>) -> Self {
        Session {
            queries,
            start_time: 0,
            end_time: 0,
        }
    }

    pub fn token_count(&self) -> usize {
        self.queries.iter().map(|q| q.len() + 1).sum()
    }
}

/// Lowercase, map every character outside `[a-z0-9]` to a space, collapse
/// runs of spaces and trim.
pub fn normalize_query(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_ascii_lowercase() || ch.is_ascii_digit() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(ch);
        } else {
            pending_space = true;
        }
    }
    out
}

/// Parses `user_id \t query \t epoch-seconds`. Returns `None` for malformed lines.
pub fn parse_log_line(line: &str) -> Option<RawLogRecord> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let mut fields = line.split('\t');
    let user = fields.next()?;
    let query = fields.next()?;
    let ts = fields.next()?;
    if fields.next().is_some() || user.is_empty() {
        return None;
    }
    let timestamp: i64 = ts.trim().parse().ok()?;
    if timestamp < 0 {
        return None;
    }
    Some(RawLogRecord {
        user_id: user.to_string(),
        query_text: query.to_string(),
        timestamp,
    })
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct LogStats {
    pub lines: usize,
    pub malformed: usize,
    pub empty_after_normalization: usize,
}

/// Reads a raw log, normalizing query text and dropping records that end up empty.
pub fn read_log(path: &Path) -> Result<(Vec<RawLogRecord>, LogStats)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut stats = LogStats::default();
    let mut records = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        match parse_log_line(line) {
            None => stats.malformed += 1,
            Some(mut rec) => {
                rec.query_text = normalize_query(&rec.query_text);
                if rec.query_text.is_empty() {
                    stats.empty_after_normalization += 1;
                } else {
                    records.push(rec);
                }
            }
        }
    }
    Ok((records, stats))
}

/// Groups records by user, orders each user's queries by time and cuts a new
/// session whenever the idle gap exceeds [`SESSION_GAP_SECS`]. Output is
/// sorted by `(start_time, user_id)`.
pub fn segment_sessions(records: &[RawLogRecord]) -> Vec<TextSession> {
    let mut by_user: HashMap<&str, Vec<&RawLogRecord>> = HashMap::new();
    for rec in records {
        by_user.entry(rec.user_id.as_str()).or_default().push(rec);
    }
    let mut sessions = Vec::new();
    for (user, mut recs) in by_user {
        recs.sort_by_key(|r| r.timestamp);
        let mut current: Option<TextSession> = None;
        for rec in recs {
            let split = match &current {
                Some(s) => rec.timestamp - s.end_time() > SESSION_GAP_SECS,
                None => true,
            };
            if split {
                sessions.extend(current.take());
                current = Some(TextSession {
                    user_id: user.to_string(),
                    queries: Vec::new(),
                    times: Vec::new(),
                });
            }
            let s = current.as_mut().expect("session opened above");
            s.queries.push(rec.query_text.clone());
            s.times.push(rec.timestamp);
        }
        sessions.extend(current);
    }
    sessions.sort_by(|a, b| {
        (a.start_time(), &a.user_id, &a.times, &a.queries).cmp(&(
            b.start_time(),
            &b.user_id,
            &b.times,
            &b.queries,
        ))
    });
    sessions
}

/// Word ↔ id table. Ids 0 and 1 are the unknown and end-of-query tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a table from content words in rank order.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![UNK_TOKEN.to_string(), EOQ_TOKEN.to_string()];
        let mut index = HashMap::new();
        index.insert(UNK_TOKEN.to_string(), UNK_ID);
        index.insert(EOQ_TOKEN.to_string(), EOQ_ID);
        for w in words {
            let w: String = w.into();
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::format("vocabulary", format!("invalid word {w:?}")));
            }
            if index.insert(w.clone(), all.len()).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate word {w:?}")));
            }
            all.push(w);
        }
        Ok(Vocabulary { words: all, index })
    }

    /// Total size including the two reserved ids.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 2
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.get(word).is_some_and(|&i| i > EOQ_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(UNK_TOKEN, String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode_query(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode_query(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// File form: content words, one per line, in id order.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for w in &self.words[2..] {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        Vocabulary::from_words(text.lines().filter(|l| !l.is_empty()))
    }

    /// Hex SHA-256 of the vocabulary file bytes.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_file_string(&text)
    }
}

/// Keeps the `max_size` most frequent words, ties broken lexicographically.
pub fn build_vocabulary(sessions: &[TextSession], max_size: usize) -> Result<Vocabulary> {
    if max_size == 0 {
        return Err(Error::InvalidArgument("vocabulary max_size must be >= 1".into()));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in sessions {
        for q in &s.queries {
            for w in q.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size);
    Vocabulary::from_words(ranked.into_iter().map(|(w, _)| w))
}

/// Maps words to ids (unknown id for out-of-vocabulary words) and drops
/// queries left empty.
pub fn encode_session(session: &TextSession, vocab: &Vocabulary) -> Session {
    let queries: Vec<Vec<usize>> = session
        .queries
        .iter()
        .map(|q| vocab.encode_query(q))
        .filter(|q| !q.is_empty())
        .collect();
    Session {
        queries,
        start_time: session.start_time(),
        end_time: session.end_time(),
    }
}

/// Encodes and keeps only sessions with at least two queries.
pub fn encode_for_training(sessions: &[TextSession], vocab: &Vocabulary) -> Vec<Session> {
    sessions
        .iter()
        .map(|s| encode_session(s, vocab))
        .filter(|s| s.queries.len() >= 2)
        .collect()
}

pub fn decode_session(session: &Session, vocab: &Vocabulary) -> Vec<String> {
    session.queries.iter().map(|q| vocab.decode_query(q)).collect()
}

/// Checks the training-use invariants of an encoded session.
pub fn validate_session(session: &Session, vocab_size: usize) -> Result<()> {
    if session.queries.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "session has {} queries, need at least 2",
            session.queries.len()
        )));
    }
    if session.end_time < session.start_time {
        return Err(Error::InvalidArgument("session ends before it starts".into()));
    }
    for q in &session.queries {
        if q.is_empty() {
            return Err(Error::InvalidArgument("session contains an empty query".into()));
        }
        if let Some(&bad) = q.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of size {vocab_size}"
            )));
        }
    }
    Ok(())
}

/// Checks the text-form invariants: chronological order and bounded gaps.
pub fn validate_text_session(session: &TextSession) -> Result<()> {
    if session.queries.len() != session.times.len() {
        return Err(Error::InvalidArgument("queries and times differ in length".into()));
    }
    for w in session.times.windows(2) {
        if w[1] < w[0] {
            return Err(Error::InvalidArgument("queries out of chronological order".into()));
        }
        if w[1] - w[0] > SESSION_GAP_SECS {
            return Err(Error::InvalidArgument(format!(
                "gap of {}s exceeds the session window",
                w[1] - w[0]
            )));
        }
    }
    if session.queries.iter().any(|q| q.is_empty()) {
        return Err(Error::InvalidArgument("empty query".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplits {
    pub background: Vec<TextSession>,
    pub training: Vec<TextSession>,
    pub validation: Vec<TextSession>,
    pub test: Vec<TextSession>,
    pub cutoffs: [i64; 3],
}

impl DatasetSplits {
    pub fn counts(&self) -> [usize; 4] {
        [
            self.background.len(),
            self.training.len(),
            self.validation.len(),
            self.test.len(),
        ]
    }

    pub fn named(&self) -> [(&'static str, &[TextSession]); 4] {
        [
            ("background", &self.background),
            ("train", &self.training),
            ("valid", &self.validation),
            ("test", &self.test),
        ]
    }
}

/// Assigns sessions to background / training / validation / test by start
/// time. A start time equal to a cutoff belongs to the later split.
/// Sessions shorter than two queries only stay in the background split.
pub fn split_by_time(sessions: &[TextSession], cutoffs: [i64; 3]) -> Result<DatasetSplits> {
    if !(cutoffs[0] < cutoffs[1] && cutoffs[1] < cutoffs[2]) {
        return Err(Error::InvalidArgument(format!(
            "cutoffs must be strictly increasing, got {cutoffs:?}"
        )));
    }
    let mut splits = DatasetSplits {
        cutoffs,
        ..Default::default()
    };
    for s in sessions {
        let t = s.start_time();
        let bucket = cutoffs.iter().filter(|&&c| t >= c).count();
        if bucket > 0 && s.len() < 2 {
            continue;
        }
        let dst = match bucket {
            0 => &mut splits.background,
            1 => &mut splits.training,
            2 => &mut splits.validation,
            _ => &mut splits.test,
        };
        dst.push(s.clone());
    }
    for (name, list) in splits.named() {
        if list.is_empty() {
            log::warn!("split {name} is empty");
        }
    }
    Ok(splits)
}

/// `start_time \t q1 \t q2 ...` per line.
pub fn sessions_to_string(sessions: &[TextSession]) -> String {
    let mut out = String::new();
    for s in sessions {
        let _ = write!(out, "{}", s.start_time());
        for q in &s.queries {
            out.push('\t');
            out.push_str(q);
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`sessions_to_string`]. Only the start time survives the file
/// form, so every query is stamped with it.
pub fn sessions_from_string(text: &str) -> Result<Vec<TextSession>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let start: i64 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::format("session file", format!("line {}: bad start time", lineno + 1)))?;
        let queries: Vec<String> = fields.map(str::to_string).collect();
        if queries.is_empty() || queries.iter().any(|q| q.is_empty()) {
            return Err(Error::format(
                "session file",
                format!("line {}: empty session or query", lineno + 1),
            ));
        }
        out.push(TextSession {
            user_id: String::new(),
            times: vec![start; queries.len()],
            queries,
        });
    }
    Ok(out)
}

pub fn write_sessions(path: &Path, sessions: &[TextSession]) -> Result<()> {
    fs::write(path, sessions_to_string(sessions)).map_err(|e| Error::io(path, e))
}

pub fn read_sessions(path: &Path) -> Result<Vec<TextSession>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    sessions_from_string(&text)
}

pub const SPLIT_FILES: [&str; 4] = [
    "background.sessions",
    "train.sessions",
    "valid.sessions",
    "test.sessions",
];

pub fn write_splits(dir: &Path, splits: &DatasetSplits) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for ((_, list), file) in splits.named().into_iter().zip(SPLIT_FILES) {
        write_sessions(&dir.join(file), list)?;
    }
    Ok(())
}

pub fn read_splits(dir: &Path) -> Result<DatasetSplits> {
    let mut lists = Vec::with_capacity(4);
    for file in SPLIT_FILES {
        lists.push(read_sessions(&dir.join(file))?);
    }
    let test = lists.pop().unwrap_or_default();
    let validation = lists.pop().unwrap_or_default();
    let training = lists.pop().unwrap_or_default();
    let background = lists.pop().unwrap_or_default();
    Ok(DatasetSplits {
        background,
        training,
        validation,
        test,
        cutoffs: [0; 3],
    })
}
