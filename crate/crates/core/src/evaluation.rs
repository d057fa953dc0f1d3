//! Exact-match triplet precision, recall and F1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Polarity, Triplet};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{predicted} predicted sentences but {gold} gold sentences")]
    IdMismatch { predicted: usize, gold: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub matched: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.matched as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            0.0
        } else {
            self.matched as f64 / self.gold as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, other: Counts) {
        self.gold += other.gold;
        self.predicted += other.predicted;
        self.matched += other.matched;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub counts: Counts,
}

impl From<Counts> for Scores {
    fn from(counts: Counts) -> Self {
        Scores {
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: Scores,
    /// Keyed by polarity tag (POS, NEU, NEG).
    pub per_polarity: BTreeMap<String, Scores>,
}

impl EvalReport {
    pub fn precision(&self) -> f64 {
        self.overall.precision
    }

    pub fn recall(&self) -> f64 {
        self.overall.recall
    }

    pub fn f1(&self) -> f64 {
        self.overall.f1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Counts for one sentence. Duplicate predictions count once; each gold
/// triplet (a multiset) absorbs at most one prediction.
pub fn sentence_counts(predicted: &[Triplet], gold: &[Triplet]) -> Counts {
    let predicted: BTreeSet<&Triplet> = predicted.iter().collect();
    let mut remaining: BTreeMap<&Triplet, usize> = BTreeMap::new();
    for g in gold {
        *remaining.entry(g).or_default() += 1;
    }
    let matched = predicted
        .iter()
        .filter(|t| match remaining.get_mut(**t) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        })
        .count();
    Counts {
        gold: gold.len(),
        predicted: predicted.len(),
        matched,
    }
}

/// Scores sentence-aligned predictions against gold.
pub fn score(predicted: &[Vec<Triplet>], gold: &[Vec<Triplet>]) -> Result<EvalReport, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::IdMismatch {
            predicted: predicted.len(),
            gold: gold.len(),
        });
    }
    let mut overall = Counts::default();
    let mut by_pol: BTreeMap<Polarity, Counts> = Polarity::ALL.iter().map(|p| (*p, Counts::default())).collect();
    for (p, g) in predicted.iter().zip(gold) {
        overall.add(sentence_counts(p, g));
        for pol in Polarity::ALL {
            let keep = |ts: &[Triplet]| -> Vec<Triplet> {
                ts.iter().filter(|t| t.polarity == pol).copied().collect()
            };
            by_pol.get_mut(&pol).unwrap().add(sentence_counts(&keep(p), &keep(g)));
        }
    }
    Ok(EvalReport {
        overall: overall.into(),
        per_polarity: by_pol
            .into_iter()
            .map(|(p, c)| (p.tag().to_owned(), c.into()))
            .collect(),
    })
}

/// Aligned plain-text table with P, R and F1 as percentages.
pub fn render_table(rows: &[(String, &EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}", "", "P", "R", "F1");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.2}  {:>6.2}  {:>6.2}",
            name,
            100.0 * r.precision(),
            100.0 * r.recall(),
            100.0 * r.f1()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Span;

    fn t(a: usize, o: usize, p: Polarity) -> Triplet {
        Triplet {
            aspect: Span::new(a, a),
            opinion: Span::new(o, o),
            polarity: p,
        }
    }

    #[test]
    fn perfect_half_and_empty() {
        let gold = vec![vec![t(0, 1, Polarity::Positive), t(2, 3, Polarity::Negative)]];
        let r = score(&gold, &gold).unwrap();
        assert_eq!((r.precision(), r.recall(), r.f1()), (1.0, 1.0, 1.0));

        let pred = vec![vec![t(0, 1, Polarity::Positive), t(2, 3, Polarity::Neutral)]];
        let r = score(&pred, &gold).unwrap();
        assert_eq!((r.precision(), r.recall(), r.f1()), (0.5, 0.5, 0.5));

        let r = score(&[vec![]], &gold).unwrap();
        assert_eq!((r.precision(), r.recall(), r.f1()), (0.0, 0.0, 0.0));
        assert!(!r.f1().is_nan());
    }

    #[test]
    fn duplicates_count_once() {
        let gold = vec![vec![t(0, 1, Polarity::Positive)]];
        let pred = vec![vec![t(0, 1, Polarity::Positive); 3]];
        let r = score(&pred, &gold).unwrap();
        assert_eq!(r.overall.counts, Counts { gold: 1, predicted: 1, matched: 1 });
    }

    #[test]
    fn per_polarity_breakdown() {
        let gold = vec![vec![t(0, 1, Polarity::Positive), t(2, 3, Polarity::Negative)]];
        let pred = vec![vec![t(0, 1, Polarity::Positive), t(2, 3, Polarity::Neutral)]];
        let r = score(&pred, &gold).unwrap();
        assert_eq!(r.per_polarity["POS"].f1, 1.0);
        assert_eq!(r.per_polarity["NEG"].counts, Counts { gold: 1, predicted: 0, matched: 0 });
        assert_eq!(r.per_polarity["NEU"].counts, Counts { gold: 0, predicted: 1, matched: 0 });
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(
            score(&[vec![]], &[]),
            Err(EvalError::IdMismatch { predicted: 1, gold: 0 })
        );
    }

    #[test]
    fn table_and_json() {
        let gold = vec![vec![t(0, 1, Polarity::Positive)]];
        let r = score(&gold, &gold).unwrap();
        let table = render_table(&[("14lap".into(), &r)]);
        assert!(table.lines().next().unwrap().trim_end().ends_with("F1"));
        assert!(table.contains("100.00"));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["f1"], 1.0);
        assert_eq!(v["per_polarity"]["POS"]["matched"], 1);
    }
}
