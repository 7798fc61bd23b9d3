//! Set-level evaluation: graph and token EM/F1 for triple sets, EM/F1 for
//! valid-action sets, and size-weighted aggregation across games.
//!
//! EM is exact-match recall: the fraction of gold items matched exactly.
//! When prediction and gold are both empty every metric is 100.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::kg::Triple;
use crate::text::normalize_action;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no games to aggregate")]
    Empty,
    #[error("game `{0}` has zero samples")]
    ZeroCount(String),
    #[error("game `{game}` reports metrics {found:?}, expected {expected:?}")]
    MetricMismatch {
        game: String,
        expected: Vec<String>,
        found: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetMatchCounts {
    pub tp: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SetMatchCounts {
    pub fn precision(&self) -> f64 {
        match (self.predicted, self.gold) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            (p, _) => self.tp as f64 / p as f64,
        }
    }

    pub fn recall(&self) -> f64 {
        match (self.predicted, self.gold) {
            (0, 0) => 1.0,
            (_, 0) => 0.0,
            (_, g) => self.tp as f64 / g as f64,
        }
    }

    /// Harmonic mean of precision and recall, as a percentage. Computed as
    /// `2·tp / (predicted + gold)` so it is exactly symmetric.
    pub fn f1(&self) -> f64 {
        match (self.predicted, self.gold) {
            (0, 0) => 100.0,
            (p, g) => 100.0 * (2 * self.tp) as f64 / (p + g) as f64,
        }
    }

    /// Exact-match recall, as a percentage.
    pub fn em(&self) -> f64 {
        100.0 * self.recall()
    }

    pub fn pair(&self) -> MetricPair {
        MetricPair {
            em: self.em(),
            f1: self.f1(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphScore {
    pub graph_em: f64,
    pub graph_f1: f64,
    pub token_em: f64,
    pub token_f1: f64,
}

pub type ActionScore = MetricPair;

pub fn graph_counts(pred: &BTreeSet<Triple>, gold: &BTreeSet<Triple>) -> SetMatchCounts {
    SetMatchCounts {
        tp: pred.intersection(gold).count(),
        predicted: pred.len(),
        gold: gold.len(),
    }
}

pub fn graph_em_f1(pred: &BTreeSet<Triple>, gold: &BTreeSet<Triple>) -> (MetricPair, SetMatchCounts) {
    let c = graph_counts(pred, gold);
    (c.pair(), c)
}

fn component_bag(ts: &BTreeSet<Triple>) -> HashMap<&str, usize> {
    let mut bag = HashMap::new();
    for t in ts {
        for c in t.components() {
            *bag.entry(c).or_insert(0) += 1;
        }
    }
    bag
}

/// Unigram overlap: both sides flattened to multisets of components.
pub fn token_counts(pred: &BTreeSet<Triple>, gold: &BTreeSet<Triple>) -> SetMatchCounts {
    let pb = component_bag(pred);
    let gb = component_bag(gold);
    let tp = pb
        .iter()
        .map(|(tok, &n)| n.min(gb.get(tok).copied().unwrap_or(0)))
        .sum();
    SetMatchCounts {
        tp,
        predicted: 3 * pred.len(),
        gold: 3 * gold.len(),
    }
}

pub fn token_em_f1(pred: &BTreeSet<Triple>, gold: &BTreeSet<Triple>) -> (MetricPair, SetMatchCounts) {
    let c = token_counts(pred, gold);
    (c.pair(), c)
}

pub fn graph_score(pred: &BTreeSet<Triple>, gold: &BTreeSet<Triple>) -> GraphScore {
    let g = graph_counts(pred, gold);
    let t = token_counts(pred, gold);
    GraphScore {
        graph_em: g.em(),
        graph_f1: g.f1(),
        token_em: t.em(),
        token_f1: t.f1(),
    }
}

pub fn action_counts<'a, P, G>(pred: P, gold: G) -> SetMatchCounts
where
    P: IntoIterator<Item = &'a String>,
    G: IntoIterator<Item = &'a String>,
{
    let norm = |it: &mut dyn Iterator<Item = &'a String>| -> BTreeSet<String> {
        it.map(|a| normalize_action(a)).filter(|a| !a.is_empty()).collect()
    };
    let p = norm(&mut pred.into_iter());
    let g = norm(&mut gold.into_iter());
    SetMatchCounts {
        tp: p.intersection(&g).count(),
        predicted: p.len(),
        gold: g.len(),
    }
}

/// Whole-action exact match after whitespace normalization; duplicates in
/// `pred` are collapsed first.
pub fn action_em_f1<'a, P, G>(pred: P, gold: G) -> ActionScore
where
    P: IntoIterator<Item = &'a String>,
    G: IntoIterator<Item = &'a String>,
{
    action_counts(pred, gold).pair()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameRow {
    pub game: String,
    pub samples: usize,
    pub values: Vec<f64>,
}

/// Per-game rows plus a size-weighted overall row, metric columns in a fixed
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metrics: Vec<String>,
    pub games: Vec<GameRow>,
    pub overall: GameRow,
}

/// Each overall metric is `Σ count·value / Σ count`.
pub fn aggregate_weighted(
    per_game: &[(String, usize, Vec<(String, f64)>)],
) -> Result<ScoreReport, MetricsError> {
    let first = per_game.first().ok_or(MetricsError::Empty)?;
    let metrics: Vec<String> = first.2.iter().map(|(m, _)| m.clone()).collect();
    let mut games = Vec::with_capacity(per_game.len());
    let mut sums = vec![0.0; metrics.len()];
    let mut total = 0usize;
    for (game, count, scores) in per_game {
        if *count == 0 {
            return Err(MetricsError::ZeroCount(game.clone()));
        }
        let names: Vec<String> = scores.iter().map(|(m, _)| m.clone()).collect();
        if names != metrics {
            return Err(MetricsError::MetricMismatch {
                game: game.clone(),
                expected: metrics.clone(),
                found: names,
            });
        }
        for (s, (_, v)) in sums.iter_mut().zip(scores) {
            *s += *count as f64 * v;
        }
        total += count;
        games.push(GameRow {
            game: game.clone(),
            samples: *count,
            values: scores.iter().map(|(_, v)| *v).collect(),
        });
    }
    let overall = GameRow {
        game: "overall".into(),
        samples: total,
        values: sums.iter().map(|s| s / total as f64).collect(),
    };
    Ok(ScoreReport {
        metrics,
        games,
        overall,
    })
}

impl ScoreReport {
    pub fn value(&self, game: &str, metric: &str) -> Option<f64> {
        let col = self.metrics.iter().position(|m| m == metric)?;
        let row = if game == "overall" {
            &self.overall
        } else {
            self.games.iter().find(|g| g.game == game)?
        };
        row.values.get(col).copied()
    }

    pub fn overall_value(&self, metric: &str) -> Option<f64> {
        self.value("overall", metric)
    }

    /// Games as columns, metrics as rows, a leading size row and a trailing
    /// overall column.
    pub fn render_table(&self) -> String {
        let mut header = vec!["metric".to_string()];
        header.extend(self.games.iter().map(|g| g.game.clone()));
        header.push("overall".into());

        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut size = vec!["size".to_string()];
        size.extend(self.games.iter().map(|g| g.samples.to_string()));
        size.push(self.overall.samples.to_string());
        rows.push(size);
        for (i, m) in self.metrics.iter().enumerate() {
            let mut r = vec![m.clone()];
            r.extend(self.games.iter().map(|g| format!("{:.2}", g.values[i])));
            r.push(format!("{:.2}", self.overall.values[i]));
            rows.push(r);
        }

        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                std::iter::once(&header)
                    .chain(&rows)
                    .map(|r| r[c].len())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| -> String {
            let mut s = String::new();
            for (c, cell) in cells.iter().enumerate() {
                if c == 0 {
                    let _ = write!(s, "{:<w$}", cell, w = widths[c]);
                } else {
                    let _ = write!(s, " | {:>w$}", cell, w = widths[c]);
                }
            }
            s.push('\n');
            s
        };
        let mut out = line(&header);
        let rule: usize = widths.iter().sum::<usize>() + 3 * (widths.len() - 1);
        out.push_str(&"-".repeat(rule));
        out.push('\n');
        for r in &rows {
            out.push_str(&line(r));
        }
        out
    }

    pub fn to_json(&self) -> Value {
        let record = |row: &GameRow| {
            let scores: serde_json::Map<String, Value> = self
                .metrics
                .iter()
                .zip(&row.values)
                .map(|(m, v)| (m.clone(), json!(v)))
                .collect();
            json!({ "game": row.game, "samples": row.samples, "scores": scores })
        };
        json!({
            "format_version": REPORT_FORMAT_VERSION,
            "kind": "worldkit-score-report",
            "metrics": self.metrics,
            "games": self.games.iter().map(record).collect::<Vec<_>>(),
            "overall": record(&self.overall),
        })
    }
}

/// Running per-game sums of per-sample metric values, in first-seen metric
/// order.
#[derive(Debug, Clone, Default)]
pub struct ScoreAccumulator {
    metrics: Vec<String>,
    games: BTreeMap<String, (usize, Vec<f64>)>,
}

impl ScoreAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, game: &str, scores: &[(&str, f64)]) {
        if self.metrics.is_empty() {
            self.metrics = scores.iter().map(|(m, _)| m.to_string()).collect();
        }
        debug_assert_eq!(scores.len(), self.metrics.len());
        let entry = self
            .games
            .entry(game.to_string())
            .or_insert_with(|| (0, vec![0.0; scores.len()]));
        entry.0 += 1;
        for (s, (_, v)) in entry.1.iter_mut().zip(scores) {
            *s += v;
        }
    }

    pub fn merge(&mut self, other: ScoreAccumulator) {
        if self.metrics.is_empty() {
            self.metrics = other.metrics.clone();
        }
        for (game, (n, sums)) in other.games {
            let entry = self
                .games
                .entry(game)
                .or_insert_with(|| (0, vec![0.0; sums.len()]));
            entry.0 += n;
            for (a, b) in entry.1.iter_mut().zip(sums) {
                *a += b;
            }
        }
    }

    pub fn report(&self) -> Result<ScoreReport, MetricsError> {
        let per_game: Vec<(String, usize, Vec<(String, f64)>)> = self
            .games
            .iter()
            .map(|(g, (n, sums))| {
                let vals = self
                    .metrics
                    .iter()
                    .zip(sums)
                    .map(|(m, s)| (m.clone(), s / *n as f64))
                    .collect();
                (g.clone(), *n, vals)
            })
            .collect();
        aggregate_weighted(&per_game)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str, r: &str, o: &str) -> Triple {
        Triple::new(s, r, o).unwrap()
    }

    fn set(ts: &[Triple]) -> BTreeSet<Triple> {
        ts.iter().cloned().collect()
    }

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    // Count-everything oracle: nested loops, greedy unit matching.
    fn oracle(pred: &[String], gold: &[String]) -> (f64, f64) {
        let mut used = vec![false; gold.len()];
        let mut tp = 0;
        for p in pred {
            if let Some(i) = (0..gold.len()).find(|&i| !used[i] && &gold[i] == p) {
                used[i] = true;
                tp += 1;
            }
        }
        let (np, ng) = (pred.len() as f64, gold.len() as f64);
        if np == 0.0 && ng == 0.0 {
            return (100.0, 100.0);
        }
        let r = if ng == 0.0 { 0.0 } else { tp as f64 / ng };
        let f = 200.0 * tp as f64 / (np + ng);
        (100.0 * r, f)
    }

    fn canon(ts: &BTreeSet<Triple>) -> Vec<String> {
        ts.iter().map(Triple::canonical).collect()
    }

    fn flat(ts: &BTreeSet<Triple>) -> Vec<String> {
        ts.iter()
            .flat_map(|t| t.components().iter().map(|c| c.to_string()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn identity_scores_100() {
        let g = set(&[t("you", "in", "hall")]);
        assert_eq!(graph_score(&g, &g), GraphScore { graph_em: 100.0, graph_f1: 100.0, token_em: 100.0, token_f1: 100.0 });
    }

    #[test]
    fn half_overlap() {
        let (t1, t2, t3) = (t("a", "in", "x"), t("b", "in", "x"), t("c", "in", "x"));
        let (m, c) = graph_em_f1(&set(&[t1, t2.clone()]), &set(&[t2, t3]));
        assert_eq!(c, SetMatchCounts { tp: 1, predicted: 2, gold: 2 });
        assert_eq!((c.precision(), c.recall()), (0.5, 0.5));
        assert_eq!((m.em, m.f1), (50.0, 50.0));
    }

    #[test]
    fn empty_prediction_and_both_empty() {
        let g = set(&[t("a", "in", "x")]);
        let e = BTreeSet::new();
        assert_eq!(graph_em_f1(&e, &g).0, MetricPair { em: 0.0, f1: 0.0 });
        assert_eq!(graph_em_f1(&g, &e).0, MetricPair { em: 0.0, f1: 0.0 });
        assert_eq!(graph_em_f1(&e, &e).0, MetricPair { em: 100.0, f1: 100.0 });
        assert_eq!(token_em_f1(&e, &e).0, MetricPair { em: 100.0, f1: 100.0 });
    }

    #[test]
    fn token_partial_credit() {
        let (m, c) = token_em_f1(&set(&[t("you", "in", "hall")]), &set(&[t("you", "in", "armory")]));
        assert_eq!(c.tp, 2);
        assert!((m.f1 - 200.0 / 3.0).abs() < 1e-12);
        assert!((m.em - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn action_scores() {
        let s = action_em_f1(&strings(&["east"]), &strings(&["east", "west"]));
        assert_eq!(s.em, 50.0);
        assert!((s.f1 - 200.0 / 3.0).abs() < 1e-12);
        let dup = action_em_f1(&strings(&["east", "East ", " east"]), &strings(&["east"]));
        assert_eq!((dup.em, dup.f1), (100.0, 100.0));
    }

    #[test]
    fn em_is_not_symmetric() {
        let a = set(&[t("a", "in", "x")]);
        let b = set(&[t("a", "in", "x"), t("b", "in", "x")]);
        assert_ne!(graph_em_f1(&a, &b).0.em, graph_em_f1(&b, &a).0.em);
        assert_eq!(graph_em_f1(&a, &b).0.f1, graph_em_f1(&b, &a).0.f1);
    }

    #[test]
    fn weighted_aggregation() {
        let one = aggregate_weighted(&[("g".into(), 4, vec![("em".into(), 37.5)])]).unwrap();
        assert_eq!(one.overall_value("em"), Some(37.5));
        let two = aggregate_weighted(&[
            ("a".into(), 1, vec![("em".into(), 0.0)]),
            ("b".into(), 3, vec![("em".into(), 100.0)]),
        ])
        .unwrap();
        assert_eq!(two.overall_value("em"), Some(75.0));
        assert_eq!(aggregate_weighted(&[]), Err(MetricsError::Empty));
        assert!(matches!(
            aggregate_weighted(&[("a".into(), 0, vec![])]),
            Err(MetricsError::ZeroCount(_))
        ));
    }

    #[test]
    fn table_one_graph_row() {
        let games = ["zork1", "lib.", "det.", "bal.", "pent.", "ztuu", "ludi.", "deep.", "temp."];
        let sizes = [886, 654, 434, 990, 276, 462, 2210, 630, 1294];
        let em = [21.62, 34.39, 41.05, 50.41, 30.00, 41.56, 40.10, 41.87, 42.43];
        let f1 = [24.44, 34.39, 44.53, 52.43, 34.30, 42.20, 41.65, 42.74, 45.17];
        let rows: Vec<_> = (0..9)
            .map(|i| {
                (
                    games[i].to_string(),
                    sizes[i],
                    vec![("graph EM".to_string(), em[i]), ("graph F1".to_string(), f1[i])],
                )
            })
            .collect();
        let r = aggregate_weighted(&rows).unwrap();
        assert_eq!(r.overall.samples, 7836);
        assert!((r.overall_value("graph EM").unwrap() - 39.15).abs() <= 0.05);
        assert!((r.overall_value("graph F1").unwrap() - 41.06).abs() <= 0.05);
        let table = r.render_table();
        assert!(table.contains("39.15") && table.contains("41.06"), "{table}");
        assert_eq!(table.lines().count(), 2 + 3);
        let j = r.to_json();
        assert_eq!(j["format_version"], 1);
        assert_eq!(j["games"].as_array().unwrap().len(), 9);
        assert_eq!(j["overall"]["samples"], 7836);
    }

    #[test]
    fn accumulator_means_then_weights() {
        let mut acc = ScoreAccumulator::new();
        acc.add("a", &[("em", 0.0)]);
        acc.add("b", &[("em", 100.0)]);
        acc.add("b", &[("em", 50.0)]);
        acc.add("b", &[("em", 100.0)]);
        let r = acc.report().unwrap();
        assert!((r.value("b", "em").unwrap() - 250.0 / 3.0).abs() < 1e-12);
        assert!((r.overall_value("em").unwrap() - 250.0 / 4.0).abs() < 1e-12);
    }

    fn arb_triples() -> impl Strategy<Value = BTreeSet<Triple>> {
        prop::collection::btree_set(("[a-c]", "[ij]", "[x-z]"), 0..6)
            .prop_map(|s| s.into_iter().map(|(a, b, c)| t(&a, &b, &c)).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn matches_counting_oracle(pred in arb_triples(), gold in arb_triples()) {
            let (g, _) = graph_em_f1(&pred, &gold);
            prop_assert_eq!((g.em, g.f1), oracle(&canon(&pred), &canon(&gold)));
            let (k, _) = token_em_f1(&pred, &gold);
            prop_assert_eq!((k.em, k.f1), oracle(&flat(&pred), &flat(&gold)));
            let (pa, ga): (Vec<String>, Vec<String>) = (canon(&pred), canon(&gold));
            let a = action_em_f1(&pa, &ga);
            let o = oracle(&pa, &ga);
            prop_assert_eq!((a.em, a.f1), o);
        }

        #[test]
        fn f1_symmetric_and_bounded(pred in arb_triples(), gold in arb_triples()) {
            let s = graph_score(&pred, &gold);
            let r = graph_score(&gold, &pred);
            prop_assert_eq!(s.graph_f1, r.graph_f1);
            prop_assert_eq!(s.token_f1, r.token_f1);
            for v in [s.graph_em, s.graph_f1, s.token_em, s.token_f1] {
                prop_assert!((0.0..=100.0).contains(&v));
            }
            prop_assert_eq!(s.graph_f1 == 100.0, pred == gold);
        }

        #[test]
        fn monotone_in_correct_and_incorrect_additions(pred in arb_triples(), gold in arb_triples()) {
            let base = graph_score(&pred, &gold);
            for extra in gold.difference(&pred) {
                let mut p = pred.clone();
                p.insert(extra.clone());
                let s = graph_score(&p, &gold);
                prop_assert!(s.graph_em >= base.graph_em && s.graph_f1 >= base.graph_f1);
            }
            let wrong = t("zz", "qq", "ww");
            let mut p = pred.clone();
            p.insert(wrong);
            prop_assert!(graph_score(&p, &gold).graph_f1 <= base.graph_f1);
        }

        #[test]
        fn token_f1_dominates_graph_f1_for_equal_sizes(pred in arb_triples(), gold in arb_triples()) {
            let n = pred.len().min(gold.len());
            let pred: BTreeSet<Triple> = pred.into_iter().take(n).collect();
            let gold: BTreeSet<Triple> = gold.into_iter().take(n).collect();
            let s = graph_score(&pred, &gold);
            prop_assert!(s.token_f1 + 1e-9 >= s.graph_f1);
        }
    }
}
