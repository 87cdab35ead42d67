//! Composite training loss.
//!
//! For one gold trajectory `p_0..p_{T-1}` the model is run teacher-forced over
//! all `T` points. The target at position `i < T-1` is the move `p_i -> p_{i+1}`
//! and the target at `T-1` is STOP. With `q_i` the masked probabilities and
//! `r_i` the unmasked ones:
//!
//! - `seq   = -mean_i log q_i[gold_i]`
//! - `valid = mean_i sum_{illegal j} r_i[j]`
//! - `cov   = -log q_{T-1}[STOP] + mean_{i<T-1} q_i[STOP]`
//! - `coord = 1 - (2 TP + 1) / (N_pred + N_gold + 1)` where `N_pred` is the
//!   total non-STOP mass, `TP` the mass (over steps `i < T-1`) that lands on a
//!   gold successor cell, and `N_gold = T-1`
//! - `len   = |E - T| / T`, `E = 1 + sum_k prod_{i<=k} (1 - q_i[STOP])`
//!
//! Batch values are means over trajectories.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ModelError, PathModel};
use crate::autodiff::{Tape, Var};
use crate::lattice::{move_mask, LatticeCoord, Move, Workspace, MOVE_VOCAB, STOP_INDEX};
use crate::taskgrid::TaskContext;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_coord: f64,
    pub lambda_valid: f64,
    pub lambda_cov: f64,
    pub lambda_len: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_coord: 0.5,
            lambda_valid: 0.5,
            lambda_cov: 1.0,
            lambda_len: 0.1,
        }
    }
}

impl LossConfig {
    pub fn only_seq() -> Self {
        Self {
            lambda_coord: 0.0,
            lambda_valid: 0.0,
            lambda_cov: 0.0,
            lambda_len: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let l = [self.lambda_coord, self.lambda_valid, self.lambda_cov, self.lambda_len];
        if l.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ModelError::InvalidConfig("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seq: f64,
    pub coord: f64,
    pub valid: f64,
    pub cov: f64,
    pub len: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn term(&self, t: LossTerm) -> f64 {
        match t {
            LossTerm::Seq => self.seq,
            LossTerm::Coord => self.coord,
            LossTerm::Valid => self.valid,
            LossTerm::Cov => self.cov,
            LossTerm::Len => self.len,
        }
    }

    fn check_finite(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("seq", self.seq),
            ("coord", self.coord),
            ("valid", self.valid),
            ("cov", self.cov),
            ("len", self.len),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(ModelError::NonFiniteLoss(name));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, other: &LossBreakdown, w: f64) {
        self.seq += w * other.seq;
        self.coord += w * other.coord;
        self.valid += w * other.valid;
        self.cov += w * other.cov;
        self.len += w * other.len;
        self.total += w * other.total;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossTerm {
    Seq,
    Coord,
    Valid,
    Cov,
    Len,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [LossTerm::Seq, LossTerm::Coord, LossTerm::Valid, LossTerm::Cov, LossTerm::Len];
}

/// What the gradient is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTarget {
    Total,
    Term(LossTerm),
}

/// One gold trajectory with its workspace and task context.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub workspace: &'a Workspace,
    pub context: &'a TaskContext,
    pub points: &'a [LatticeCoord],
}

struct TermVars {
    seq: Var,
    coord: Var,
    valid: Var,
    cov: Var,
    len: Var,
    total: Var,
}

fn gold_indices(points: &[LatticeCoord]) -> Result<Vec<usize>, ModelError> {
    let t = points.len();
    let mut g = Vec::with_capacity(t);
    for i in 0..t - 1 {
        let m = Move::between(points[i], points[i + 1]).ok_or(ModelError::IllegalGold(i + 1))?;
        g.push(m.index());
    }
    g.push(STOP_INDEX);
    Ok(g)
}

fn build_terms(model: &PathModel, tape: &mut Tape<'_>, ex: &Example<'_>, cfg: &LossConfig) -> Result<TermVars, ModelError> {
    let pts = ex.points;
    model.check_example(pts, ex.context, ex.workspace)?;
    let t = pts.len();
    let tf = t as f64;
    let gold = gold_indices(pts)?;
    let masks: Vec<[bool; MOVE_VOCAB]> = pts.iter().map(|&p| move_mask(p, ex.workspace)).collect();
    for (i, &g) in gold.iter().enumerate() {
        if !masks[i][g] {
            return Err(ModelError::IllegalGold(i + 1));
        }
    }

    let logits = model.forward_tape(tape, pts, ex.context);
    let flat_mask: Vec<bool> = masks.iter().flatten().copied().collect();
    let logq = tape.log_softmax_masked(logits, flat_mask);
    let q = tape.exp(logq);
    let r = tape.softmax(logits);

    let seq = tape.weighted_sum(logq, gold.iter().enumerate().map(|(i, &g)| (i * MOVE_VOCAB + g, -1.0 / tf)).collect());

    let illegal: Vec<(usize, f64)> = masks
        .iter()
        .enumerate()
        .flat_map(|(i, m)| (0..MOVE_VOCAB).filter(move |&j| !m[j]).map(move |j| (i * MOVE_VOCAB + j, 1.0 / tf)))
        .collect();
    let valid = tape.weighted_sum(r, illegal);

    let stop_final = tape.weighted_sum(logq, vec![((t - 1) * MOVE_VOCAB + STOP_INDEX, -1.0)]);
    let cov = if t > 1 {
        let early = tape.weighted_sum(q, (0..t - 1).map(|i| (i * MOVE_VOCAB + STOP_INDEX, 1.0 / (tf - 1.0))).collect());
        tape.add(stop_final, early)
    } else {
        stop_final
    };

    let gold_cells: BTreeSet<LatticeCoord> = pts[1..].iter().copied().collect();
    let mut pred_terms = Vec::new();
    let mut tp_terms = Vec::new();
    for (i, (&p, m)) in pts.iter().zip(&masks).enumerate() {
        for mv in Move::STEPS {
            let j = mv.index();
            if !m[j] {
                continue;
            }
            pred_terms.push((i * MOVE_VOCAB + j, 1.0));
            if i + 1 < t && gold_cells.contains(&mv.apply(p)) {
                tp_terms.push((i * MOVE_VOCAB + j, 1.0));
            }
        }
    }
    let n_pred = tape.weighted_sum(q, pred_terms);
    let tp = tape.weighted_sum(q, tp_terms);
    let num = tape.affine(tp, 2.0, 1.0);
    let den = tape.affine(n_pred, 1.0, tf);
    let ratio = tape.div(num, den);
    let coord = tape.affine(ratio, -1.0, 1.0);

    let stops = tape.gather_elems(q, (0..t).map(|i| i * MOVE_VOCAB + STOP_INDEX).collect());
    let cont = tape.affine(stops, -1.0, 1.0);
    let surv = tape.cumprod(cont);
    let s = tape.sum(surv);
    let diff = tape.affine(s, 1.0 / tf, (1.0 - tf) / tf);
    let len = tape.abs(diff);

    let mut total = seq;
    for (v, w) in [
        (coord, cfg.lambda_coord),
        (valid, cfg.lambda_valid),
        (cov, cfg.lambda_cov),
        (len, cfg.lambda_len),
    ] {
        if w != 0.0 {
            let scaled = tape.affine(v, w, 0.0);
            total = tape.add(total, scaled);
        }
    }
    Ok(TermVars {
        seq,
        coord,
        valid,
        cov,
        len,
        total,
    })
}

fn breakdown(tape: &Tape<'_>, v: &TermVars) -> LossBreakdown {
    LossBreakdown {
        seq: tape.scalar(v.seq),
        coord: tape.scalar(v.coord),
        valid: tape.scalar(v.valid),
        cov: tape.scalar(v.cov),
        len: tape.scalar(v.len),
        total: tape.scalar(v.total),
    }
}

/// Loss of one example and the gradient of `target` with respect to every
/// parameter tensor (declared order, flat row-major).
pub fn example_gradients(
    model: &PathModel,
    ex: &Example<'_>,
    cfg: &LossConfig,
    target: LossTarget,
) -> Result<(LossBreakdown, Vec<Vec<f64>>), ModelError> {
    let mut tape = Tape::new(model.params());
    let vars = build_terms(model, &mut tape, ex, cfg)?;
    let b = breakdown(&tape, &vars);
    b.check_finite()?;
    let root = match target {
        LossTarget::Total => vars.total,
        LossTarget::Term(LossTerm::Seq) => vars.seq,
        LossTarget::Term(LossTerm::Coord) => vars.coord,
        LossTarget::Term(LossTerm::Valid) => vars.valid,
        LossTarget::Term(LossTerm::Cov) => vars.cov,
        LossTarget::Term(LossTerm::Len) => vars.len,
    };
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|t| vec![0.0; t.len()]).collect();
    tape.backward(root, &mut grads);
    Ok((b, grads))
}

/// Mean loss over a batch, without gradients.
pub fn composite_loss(model: &PathModel, batch: &[Example<'_>], cfg: &LossConfig) -> Result<LossBreakdown, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    cfg.validate()?;
    let w = 1.0 / batch.len() as f64;
    let mut out = LossBreakdown::default();
    for ex in batch {
        let mut tape = Tape::new(model.params());
        let vars = build_terms(model, &mut tape, ex, cfg)?;
        let b = breakdown(&tape, &vars);
        b.check_finite()?;
        out.accumulate(&b, w);
    }
    Ok(out)
}

/// Mean of per-example breakdowns and gradients, reduced in input order.
pub(crate) fn reduce(parts: Vec<(LossBreakdown, Vec<Vec<f64>>)>) -> Result<(LossBreakdown, Vec<Vec<f64>>), ModelError> {
    let n = parts.len();
    if n == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let w = 1.0 / n as f64;
    let mut it = parts.into_iter();
    let (b0, mut grads) = it.next().expect("non-empty");
    let mut loss = LossBreakdown::default();
    loss.accumulate(&b0, w);
    for g in grads.iter_mut().flatten() {
        *g *= w;
    }
    for (b, gs) in it {
        loss.accumulate(&b, w);
        for (acc, g) in grads.iter_mut().zip(gs) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += w * v;
            }
        }
    }
    loss.check_finite()?;
    Ok((loss, grads))
}
