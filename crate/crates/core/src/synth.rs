//! Synthetic key/value lookup corpus.
//!
//! A context is a run of filler tokens with `key value` facts embedded in
//! it. The query names one key; the answer is the value stored next to it.
//! Keys and values are drawn fresh for every record, so the answer cannot
//! be guessed without reading the context.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store;
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARecord {
    pub contexts: Vec<Vec<usize>>,
    pub query: Vec<usize>,
    pub answers: Vec<Vec<usize>>,
    pub answerable: bool,
}

impl QARecord {
    pub fn context_tokens(&self) -> usize {
        self.contexts.iter().map(Vec::len).sum()
    }

    /// All contexts joined in order.
    pub fn joined_context(&self) -> Vec<usize> {
        self.contexts.concat()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeedlePosition {
    Begin,
    Middle,
    End,
    BothEnds,
    Random,
}

impl NeedlePosition {
    pub const SENSITIVITY: [NeedlePosition; 4] = [Self::Begin, Self::Middle, Self::End, Self::BothEnds];
}

impl fmt::Display for NeedlePosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Begin => "begin",
            Self::Middle => "middle",
            Self::End => "end",
            Self::BothEnds => "both_ends",
            Self::Random => "random",
        })
    }
}

impl FromStr for NeedlePosition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "begin" => Self::Begin,
            "middle" => Self::Middle,
            "end" => Self::End,
            "both_ends" | "both-ends" => Self::BothEnds,
            "random" => Self::Random,
            _ => return Err(Error::Config(format!("unknown needle position {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_records: usize,
    /// Tokens per context.
    pub context_len: usize,
    pub n_contexts: usize,
    pub n_distractor_facts: usize,
    pub needle_position: NeedlePosition,
    pub unanswerable_rate: f64,
    /// Probability that an answerable record carries a second reference.
    pub synonym_rate: f64,
    pub vocab: Vocab,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_records: 1000,
            context_len: 64,
            n_contexts: 1,
            n_distractor_facts: 7,
            needle_position: NeedlePosition::Random,
            unanswerable_rate: 0.0,
            synonym_rate: 0.0,
            vocab: Vocab::default(),
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.context_len < 2 || self.n_contexts == 0 {
            return bad(format!(
                "need at least one context of two tokens, got {} x {}",
                self.n_contexts, self.context_len
            ));
        }
        for (name, r) in [("unanswerable_rate", self.unanswerable_rate), ("synonym_rate", self.synonym_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0, 1]"));
            }
        }
        let facts = self.n_distractor_facts + 1;
        if facts > self.vocab.n_keys || facts > self.vocab.n_values {
            return bad(format!(
                "{facts} facts need as many distinct keys and values (have {} and {})",
                self.vocab.n_keys, self.vocab.n_values
            ));
        }
        let copies = if self.needle_position == NeedlePosition::BothEnds { 2 } else { 1 };
        let needed = 2 * (self.n_distractor_facts + copies);
        if needed > self.context_len * self.n_contexts {
            return bad(format!(
                "{needed} fact tokens do not fit in {} context tokens",
                self.context_len * self.n_contexts
            ));
        }
        if self.vocab.n_filler == 0 && needed < self.context_len * self.n_contexts {
            return bad("filler vocabulary is empty".into());
        }
        Ok(())
    }
}

/// Candidate start offsets of the needle span within `n` tokens.
fn needle_range(pos: NeedlePosition, n: usize) -> (usize, usize) {
    let tenth = (n as f64 * 0.1).ceil() as usize;
    let last = n - 2;
    match pos {
        NeedlePosition::Begin => (0, tenth.max(1) - 1),
        NeedlePosition::End => {
            let lo = ((n as f64 * 0.9).ceil() as usize).min(last);
            (lo, last)
        }
        NeedlePosition::Middle => {
            let lo = (n as f64 * 0.45).floor() as usize;
            let hi = ((n as f64 * 0.55).ceil() as usize).saturating_sub(2);
            if lo <= hi.min(last) {
                (lo, hi.min(last))
            } else {
                (n / 2 - 1, n / 2 - 1)
            }
        }
        NeedlePosition::Random => (0, last),
        NeedlePosition::BothEnds => needle_range(NeedlePosition::Begin, n),
    }
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate(cfg: &GenConfig) -> Result<Vec<QARecord>> {
    cfg.validate()?;
    (0..cfg.n_records).map(|i| generate_one(cfg, &mut record_rng(cfg.seed, i))).collect()
}

/// One record drawn from `rng`. The config is not re-validated.
pub fn generate_one(cfg: &GenConfig, rng: &mut impl Rng) -> Result<QARecord> {
    let v = &cfg.vocab;
    let n = cfg.context_len * cfg.n_contexts;
    let clen = cfg.context_len;
    let facts = cfg.n_distractor_facts + 1;
    let keys: Vec<usize> = index::sample(rng, v.n_keys, facts).into_iter().map(|i| v.key(i)).collect();
    let values: Vec<usize> = index::sample(rng, v.n_values, facts).into_iter().map(|i| v.value(i)).collect();
    let answerable = !rng.gen_bool(cfg.unanswerable_rate);

    // A span may not straddle two contexts.
    let fits = |s: usize| s + 1 < n && !(s + 1).is_multiple_of(clen);
    let mut used = vec![false; n];
    let mut seq = vec![usize::MAX; n];
    let mut place = |s: usize, k: usize, val: usize, used: &mut Vec<bool>| {
        used[s] = true;
        used[s + 1] = true;
        seq[s] = k;
        seq[s + 1] = val;
    };
    let pick = |lo: usize, hi: usize, used: &[bool], rng: &mut dyn rand::RngCore| -> Result<usize> {
        let cands: Vec<usize> = (lo..=hi).filter(|s| fits(*s) && !used[*s] && !used[*s + 1]).collect();
        cands
            .choose(rng)
            .copied()
            .ok_or_else(|| Error::Config(format!("no room for a fact in [{lo}, {hi}] of {n} tokens")))
    };

    if answerable {
        let first = match cfg.needle_position {
            NeedlePosition::BothEnds => NeedlePosition::Begin,
            p => p,
        };
        let (lo, hi) = needle_range(first, n);
        let s = pick(lo, hi, &used, rng)?;
        place(s, keys[0], values[0], &mut used);
        if cfg.needle_position == NeedlePosition::BothEnds {
            let (lo, hi) = needle_range(NeedlePosition::End, n);
            let s = pick(lo, hi, &used, rng)?;
            place(s, keys[0], values[0], &mut used);
        }
    }
    for f in 1..facts {
        let s = pick(0, n - 2, &used, rng)?;
        place(s, keys[f], values[f], &mut used);
    }
    let free: Vec<usize> = (0..n).filter(|i| !used[*i]).collect();
    let filler: Vec<usize> = if free.len() <= v.n_filler {
        index::sample(rng, v.n_filler, free.len()).into_iter().map(|i| v.filler(i)).collect()
    } else {
        (0..free.len()).map(|_| v.filler(rng.gen_range(0..v.n_filler))).collect()
    };
    for (i, f) in free.into_iter().zip(filler) {
        seq[i] = f;
    }

    let answers = if answerable {
        let mut a = vec![vec![values[0]]];
        if rng.gen_bool(cfg.synonym_rate) {
            let idx = values[0] - v.value(0);
            a.push(vec![v.value((idx + v.n_values / 2) % v.n_values)]);
        }
        a
    } else {
        vec![v.reserved().unanswerable_answer()]
    };
    Ok(QARecord {
        contexts: seq.chunks(clen).map(<[usize]>::to_vec).collect(),
        query: vec![keys[0]],
        answers,
        answerable,
    })
}

/// Drops records whose total context is longer than `max_context_tokens`.
pub fn pool_and_filter(records: Vec<QARecord>, max_context_tokens: usize) -> Vec<QARecord> {
    records.into_iter().filter(|r| r.context_tokens() <= max_context_tokens).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<QARecord>,
    pub valid: Vec<QARecord>,
}

/// Holds out `round(fraction · N)` randomly chosen records. Both parts keep
/// the input order.
pub fn split(records: Vec<QARecord>, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("holdout fraction {fraction} outside (0, 1)")));
    }
    let n = records.len();
    let k = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![false; n];
    for i in index::sample(&mut rng, n, k) {
        held[i] = true;
    }
    let (mut train, mut valid) = (Vec::with_capacity(n - k), Vec::with_capacity(k));
    for (r, h) in records.into_iter().zip(held) {
        if h {
            valid.push(r);
        } else {
            train.push(r);
        }
    }
    Ok(Split { train, valid })
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    contexts: Vec<String>,
    query: String,
    answers: Vec<String>,
    answerable: bool,
}

pub fn record_to_json(r: &QARecord, vocab: &Vocab) -> Result<String> {
    let j = JsonRecord {
        contexts: r.contexts.iter().map(|c| vocab.render(c)).collect::<Result<_>>()?,
        query: vocab.render(&r.query)?,
        answers: r.answers.iter().map(|a| vocab.render(a)).collect::<Result<_>>()?,
        answerable: r.answerable,
    };
    serde_json::to_string(&j).map_err(|e| Error::Format(e.to_string()))
}

pub fn record_from_json(line: &str, vocab: &Vocab, line_no: usize) -> Result<QARecord> {
    let err = |msg: String| Error::Parse { line: line_no, msg };
    let j: JsonRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    if j.answers.is_empty() {
        return Err(err("field `answers` is empty".into()));
    }
    let tok = |s: &str| vocab.parse(s).map_err(|e| err(e.to_string()));
    Ok(QARecord {
        contexts: j.contexts.iter().map(|c| tok(c)).collect::<Result<_>>()?,
        query: tok(&j.query)?,
        answers: j.answers.iter().map(|a| tok(a)).collect::<Result<_>>()?,
        answerable: j.answerable,
    })
}

pub fn to_jsonl(records: &[QARecord], vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&record_to_json(r, vocab)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn from_jsonl<R: BufRead>(reader: R, vocab: &Vocab) -> Result<Vec<QARecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(record_from_json(&line, vocab, i + 1)?);
    }
    Ok(out)
}

pub fn write_jsonl(records: &[QARecord], vocab: &Vocab, path: &Path) -> Result<()> {
    store::write_atomic(path, to_jsonl(records, vocab)?.as_bytes())
}

pub fn read_jsonl(path: &Path, vocab: &Vocab) -> Result<Vec<QARecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    from_jsonl(BufReader::new(f), vocab)
}

/// Writes records to any sink, one per line.
pub fn write_jsonl_to(records: &[QARecord], vocab: &Vocab, mut w: impl Write) -> Result<()> {
    w.write_all(to_jsonl(records, vocab)?.as_bytes())
        .map_err(|e| Error::io("<writer>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn needle_ranges_at_64() {
        assert_eq!(needle_range(NeedlePosition::Begin, 64), (0, 6));
        assert_eq!(needle_range(NeedlePosition::End, 64), (58, 62));
        assert_eq!(needle_range(NeedlePosition::Middle, 64), (28, 34));
    }

    #[test]
    fn unanswerable_key_absent() {
        let cfg = GenConfig {
            n_records: 50,
            unanswerable_rate: 1.0,
            ..GenConfig::default()
        };
        for r in generate(&cfg).unwrap() {
            assert!(!r.answerable);
            assert!(!r.joined_context().contains(&r.query[0]));
        }
    }

    #[test]
    fn jsonl_missing_field_named() {
        let v = Vocab::default();
        let line = r#"{"contexts":["w1 k2 v3"],"query":"k2","answerable":true}"#;
        let e = from_jsonl(line.as_bytes(), &v).unwrap_err();
        match e {
            Error::Parse { line, msg } => {
                assert_eq!(line, 1);
                assert!(msg.contains("answers"), "{msg}");
            }
            e => panic!("{e}"),
        }
        assert!(from_jsonl("".as_bytes(), &v).unwrap().is_empty());
    }

    #[test]
    fn split_sizes() {
        let recs = generate(&GenConfig {
            n_records: 10,
            ..GenConfig::default()
        })
        .unwrap();
        let s = split(recs, 0.1, 4).unwrap();
        assert_eq!((s.train.len(), s.valid.len()), (9, 1));
    }
}
