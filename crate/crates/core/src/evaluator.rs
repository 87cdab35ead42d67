//! Trajectory metrics and the residual error taxonomy.
//!
//! Corpus aggregates are built from integer counts and divided once at the
//! end, so results do not depend on pair order.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::validate_path;
use crate::lattice::{LatticeCoord, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorClass {
    #[serde(rename = "E1_tail_truncation")]
    TailTruncation,
    #[serde(rename = "E2_adjacent_swap")]
    AdjacentSwap,
    #[serde(rename = "E3_boundary_nudge")]
    BoundaryNudge,
    #[serde(rename = "L1_illegal_jump")]
    IllegalJump,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 4] = [
        ErrorClass::TailTruncation,
        ErrorClass::AdjacentSwap,
        ErrorClass::BoundaryNudge,
        ErrorClass::IllegalJump,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ErrorClass::TailTruncation => "E1_tail_truncation",
            ErrorClass::AdjacentSwap => "E2_adjacent_swap",
            ErrorClass::BoundaryNudge => "E3_boundary_nudge",
            ErrorClass::IllegalJump => "L1_illegal_jump",
        }
    }
}

/// Matches over `max(len(pred), len(gold))`, position by position.
pub fn stepwise_accuracy(pred: &[LatticeCoord], gold: &[LatticeCoord]) -> f64 {
    let (hits, denom) = stepwise_counts(pred, gold);
    if denom == 0 {
        return 0.0;
    }
    hits as f64 / denom as f64
}

fn stepwise_counts(pred: &[LatticeCoord], gold: &[LatticeCoord]) -> (usize, usize) {
    let hits = pred.iter().zip(gold).filter(|(a, b)| a == b).count();
    (hits, pred.len().max(gold.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct SetCounts {
    overlap: usize,
    pred: usize,
    gold: usize,
}

fn set_counts(pred: &[LatticeCoord], gold: &[LatticeCoord]) -> SetCounts {
    let p: BTreeSet<_> = pred.iter().collect();
    let g: BTreeSet<_> = gold.iter().collect();
    SetCounts {
        overlap: p.intersection(&g).count(),
        pred: p.len(),
        gold: g.len(),
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Harmonic mean, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Set-overlap precision, recall and F1 (duplicates collapse).
pub fn coordinate_prf(pred: &[LatticeCoord], gold: &[LatticeCoord]) -> (f64, f64, f64) {
    let c = set_counts(pred, gold);
    let p = ratio(c.overlap, c.pred);
    let r = ratio(c.overlap, c.gold);
    (p, r, f1_score(p, r))
}

pub fn valid_path_percent<'a, I>(preds: I, w: &Workspace) -> f64
where
    I: IntoIterator<Item = &'a [LatticeCoord]>,
{
    let mut n = 0;
    let mut ok = 0;
    for p in preds {
        n += 1;
        ok += validate_path(p, w).valid as usize;
    }
    ratio(ok, n)
}

fn is_single_adjacent_swap(pred: &[LatticeCoord], gold: &[LatticeCoord]) -> bool {
    if pred.len() != gold.len() {
        return false;
    }
    let diff: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] != gold[i]).collect();
    diff.len() == 2 && diff[1] == diff[0] + 1 && pred[diff[0]] == gold[diff[1]] && pred[diff[1]] == gold[diff[0]]
}

/// Labels for one (pred, gold) pair; empty when they agree.
pub fn classify_errors(pred: &[LatticeCoord], gold: &[LatticeCoord], w: &Workspace) -> BTreeSet<ErrorClass> {
    let mut out = BTreeSet::new();
    let legal = validate_path(pred, w).valid;
    if !legal {
        out.insert(ErrorClass::IllegalJump);
    }
    if pred.len() < gold.len() && gold.starts_with(pred) {
        out.insert(ErrorClass::TailTruncation);
    }
    if is_single_adjacent_swap(pred, gold) {
        out.insert(ErrorClass::AdjacentSwap);
    }
    if legal && pred.len() == gold.len() && pred != gold {
        let b = w.bounds();
        let only_boundary = pred
            .iter()
            .zip(gold)
            .filter(|(p, g)| p != g)
            .all(|(p, g)| b.on_boundary(*p) && b.on_boundary(*g));
        if only_boundary {
            out.insert(ErrorClass::BoundaryNudge);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stepwise_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub valid_path_percent: f64,
    pub error_counts: BTreeMap<ErrorClass, usize>,
    pub n_pairs: usize,
}

/// Integer accumulator behind [`EvalReport`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EvalAccumulator {
    step_hits: usize,
    step_denom: usize,
    overlap: usize,
    pred_cells: usize,
    gold_cells: usize,
    valid: usize,
    errors: BTreeMap<ErrorClass, usize>,
    n: usize,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &[LatticeCoord], gold: &[LatticeCoord], w: &Workspace) {
        let (h, d) = stepwise_counts(pred, gold);
        self.step_hits += h;
        self.step_denom += d;
        let c = set_counts(pred, gold);
        self.overlap += c.overlap;
        self.pred_cells += c.pred;
        self.gold_cells += c.gold;
        self.valid += validate_path(pred, w).valid as usize;
        for e in classify_errors(pred, gold, w) {
            *self.errors.entry(e).or_insert(0) += 1;
        }
        self.n += 1;
    }

    pub fn merge(&mut self, other: &EvalAccumulator) {
        self.step_hits += other.step_hits;
        self.step_denom += other.step_denom;
        self.overlap += other.overlap;
        self.pred_cells += other.pred_cells;
        self.gold_cells += other.gold_cells;
        self.valid += other.valid;
        for (k, v) in &other.errors {
            *self.errors.entry(*k).or_insert(0) += v;
        }
        self.n += other.n;
    }

    pub fn report(&self) -> EvalReport {
        let precision = ratio(self.overlap, self.pred_cells);
        let recall = ratio(self.overlap, self.gold_cells);
        let mut error_counts: BTreeMap<ErrorClass, usize> = ErrorClass::ALL.iter().map(|e| (*e, 0)).collect();
        for (k, v) in &self.errors {
            error_counts.insert(*k, *v);
        }
        EvalReport {
            stepwise_accuracy: ratio(self.step_hits, self.step_denom),
            precision,
            recall,
            f1: f1_score(precision, recall),
            valid_path_percent: ratio(self.valid, self.n),
            error_counts,
            n_pairs: self.n,
        }
    }
}

/// Micro-averaged report over `(pred, gold, workspace)` triples.
pub fn evaluate<'a, I>(pairs: I) -> EvalReport
where
    I: IntoIterator<Item = (&'a [LatticeCoord], &'a [LatticeCoord], &'a Workspace)>,
{
    let mut acc = EvalAccumulator::new();
    for (p, g, w) in pairs {
        acc.add(p, g, w);
    }
    acc.report()
}
