//! Exact match and token-overlap precision/recall/F1, maximized over
//! reference answers.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderOutput;
use crate::error::{Error, Result};
use crate::synth::{generate, GenConfig, NeedlePosition, QARecord};
use crate::vocab::ReservedTokens;
use crate::xc::XCModel;

/// Lowercases, drops ASCII punctuation and the articles "a", "an", "the",
/// and collapses whitespace.
pub fn normalize(text: &str) -> String {
    let lower = text.to_lowercase();
    let stripped: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Normalized whitespace tokens of `text`.
pub fn text_tokens(text: &str) -> Vec<String> {
    normalize(text).split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Multiset overlap scores. Two empty sequences score 1; one empty side
/// scores 0.
pub fn token_prf<T: Eq + Hash>(prediction: &[T], gold: &[T]) -> Prf {
    if prediction.is_empty() || gold.is_empty() {
        let v = if prediction.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
        return Prf {
            precision: v,
            recall: v,
            f1: v,
        };
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_default() += 1;
    }
    let mut overlap = 0usize;
    for p in prediction {
        if let Some(c) = counts.get_mut(p) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return Prf {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let precision = overlap as f64 / prediction.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    Prf {
        precision,
        recall,
        f1: 2.0 * precision * recall / (precision + recall),
    }
}

pub fn exact_match<T: PartialEq>(prediction: &[T], gold: &[T]) -> f64 {
    if prediction == gold {
        1.0
    } else {
        0.0
    }
}

pub fn best_over_references<T, F>(prediction: &[T], references: &[Vec<T>], metric: F) -> Result<f64>
where
    F: Fn(&[T], &[T]) -> f64,
{
    if references.is_empty() {
        return Err(Error::Contract("no reference answers".into()));
    }
    Ok(references
        .iter()
        .map(|r| metric(prediction, r))
        .fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    WithContext,
    NoContext,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::WithContext => "with_context",
            EvalMode::NoContext => "no_context",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "with_context" => Ok(EvalMode::WithContext),
            "no_context" => Ok(EvalMode::NoContext),
            _ => Err(Error::Config(format!("unknown eval mode {s:?}"))),
        }
    }
}

/// Scores of one group of records, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub mode: EvalMode,
    pub count: usize,
    pub em: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "dataset,mode,count,em,precision,recall,f1";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.2},{:.2},{:.2},{:.2}\n",
                r.dataset, r.mode, r.count, r.em, r.precision, r.recall, r.f1
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.dataset.len()).max().unwrap_or(0).max(7);
        let mut out = format!(
            "{:<name_w$}  {:<12}  {:>6}  {:>6}  {:>9}  {:>6}  {:>6}\n",
            "dataset", "mode", "count", "EM", "Precision", "Recall", "F1"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<name_w$}  {:<12}  {:>6}  {:>6.2}  {:>9.2}  {:>6.2}  {:>6.2}\n",
                r.dataset,
                r.mode.to_string(),
                r.count,
                r.em,
                r.precision,
                r.recall,
                r.f1
            ));
        }
        out
    }

    pub fn row(&self, dataset: &str, mode: EvalMode) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.dataset == dataset && r.mode == mode)
    }
}

/// Scores predictions against the records' references.
pub fn score(dataset: &str, mode: EvalMode, predictions: &[Vec<usize>], records: &[QARecord]) -> Result<EvalRow> {
    if predictions.len() != records.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} records",
            predictions.len(),
            records.len()
        )));
    }
    let mut sums = [0.0f64; 4];
    for (p, r) in predictions.iter().zip(records) {
        let refs = &r.answers;
        sums[0] += best_over_references(p, refs, exact_match)?;
        sums[1] += best_over_references(p, refs, |a, b| token_prf(a, b).precision)?;
        sums[2] += best_over_references(p, refs, |a, b| token_prf(a, b).recall)?;
        sums[3] += best_over_references(p, refs, |a, b| token_prf(a, b).f1)?;
    }
    let n = records.len();
    let pct = |s: f64| if n == 0 { 0.0 } else { 100.0 * s / n as f64 };
    Ok(EvalRow {
        dataset: dataset.to_string(),
        mode,
        count: n,
        em: pct(sums[0]),
        precision: pct(sums[1]),
        recall: pct(sums[2]),
        f1: pct(sums[3]),
    })
}

/// Greedy answer for each record. `encodings`, when given, supplies the
/// with-context encodings instead of running the encoder.
pub fn predict(
    model: &XCModel,
    records: &[QARecord],
    mode: EvalMode,
    encodings: Option<&[EncoderOutput]>,
    max_new: usize,
) -> Result<Vec<Vec<usize>>> {
    let reserved = ReservedTokens::standard();
    if let Some(e) = encodings {
        if e.len() != records.len() {
            return Err(Error::Contract(format!("{} encodings for {} records", e.len(), records.len())));
        }
    }
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let enc = match (mode, encodings) {
                (EvalMode::NoContext, _) => EncoderOutput::empty(model.d_enc(), model.encoder_kind()),
                (EvalMode::WithContext, Some(e)) => e[i].clone(),
                (EvalMode::WithContext, None) => model.encode_contexts(&r.contexts)?,
            };
            let mut prompt = r.query.clone();
            prompt.push(reserved.answer);
            let mut out = model.generate(&prompt, &enc, max_new, reserved.eos)?;
            if out.last() == Some(&reserved.eos) {
                out.pop();
            }
            Ok(out)
        })
        .collect()
}

pub fn evaluate(model: &XCModel, dataset: &str, records: &[QARecord], mode: EvalMode) -> Result<EvalRow> {
    let max_new = records
        .iter()
        .flat_map(|r| r.answers.iter().map(Vec::len))
        .max()
        .unwrap_or(1)
        + 1;
    let preds = predict(model, records, mode, None, max_new)?;
    score(dataset, mode, &preds, records)
}

/// Per-needle-position scores on freshly generated records.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityReport {
    pub rows: Vec<(NeedlePosition, EvalRow)>,
}

impl SensitivityReport {
    /// Max minus min F1 over positions, in points.
    pub fn f1_spread(&self) -> f64 {
        let f1 = self.rows.iter().map(|(_, r)| r.f1);
        f1.clone().fold(f64::NEG_INFINITY, f64::max) - f1.fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("needle,count,em,f1\n");
        for (p, r) in &self.rows {
            out.push_str(&format!("{p},{},{:.2},{:.2}\n", r.count, r.em, r.f1));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10}  {:>6}  {:>6}  {:>6}\n", "needle", "count", "EM", "F1");
        for (p, r) in &self.rows {
            out.push_str(&format!("{:<10}  {:>6}  {:>6.2}  {:>6.2}\n", p.to_string(), r.count, r.em, r.f1));
        }
        out.push_str(&format!("F1 spread (max - min): {:.2}\n", self.f1_spread()));
        out
    }
}

/// Scores `model` with context on `base` records regenerated once per
/// needle position.
pub fn sensitivity(model: &XCModel, base: &GenConfig) -> Result<SensitivityReport> {
    let rows = NeedlePosition::SENSITIVITY
        .iter()
        .map(|&p| {
            let cfg = GenConfig {
                needle_position: p,
                ..base.clone()
            };
            let records = generate(&cfg)?;
            Ok((p, evaluate(model, &p.to_string(), &records, EvalMode::WithContext)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        text_tokens(s)
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize("The Eiffel Tower."), "eiffel tower");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("A  cat"), "cat");
    }

    #[test]
    fn prf_examples() {
        let p = token_prf(&toks("b c"), &toks("b c d"));
        assert_eq!(p.precision, 1.0);
        assert!((p.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.f1 - 0.8).abs() < 1e-12);
        let e: [u8; 0] = [];
        assert_eq!(token_prf(&e, &e).f1, 1.0);
        assert_eq!(token_prf(&e, &[1u8]).f1, 0.0);
    }

    #[test]
    fn em_examples() {
        assert_eq!(exact_match(&toks("paris"), &toks("Paris.")), 1.0);
        assert_eq!(exact_match(&toks("paris france"), &toks("paris")), 0.0);
        assert_eq!(exact_match(&toks(""), &toks("")), 1.0);
    }

    #[test]
    fn best_reference_example() {
        let refs = [toks("a b"), toks("b c d")];
        // "a" is an article, so normalize the references by hand here
        let refs_raw: Vec<Vec<&str>> = vec![vec!["a", "b"], vec!["b", "c", "d"]];
        let f = best_over_references(&["b"], &refs_raw, |p, g| token_prf(p, g).f1).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(refs[0], vec!["b".to_string()]);
        let none: Vec<Vec<&str>> = vec![];
        assert!(best_over_references(&["b"], &none, exact_match).is_err());
    }

    #[test]
    fn mode_parse() {
        assert_eq!("no-context".parse::<EvalMode>().unwrap(), EvalMode::NoContext);
        assert!("context".parse::<EvalMode>().is_err());
    }
}
