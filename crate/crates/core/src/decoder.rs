//! Legality-masked greedy and beam decoding.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Trajectory;
use crate::lattice::{in_bounds, manhattan, LatticeCoord, Move, Workspace, MOVE_VOCAB, STOP_INDEX};
use crate::model::{masked_log_softmax, ModelError, PathModel};
use crate::taskgrid::TaskContext;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("start cell {0} is outside the workspace or blocked")]
    StartNotFree(LatticeCoord),
    #[error("invalid decode config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub max_steps: usize,
    pub beam_width: usize,
    pub coverage_penalty_weight: f64,
    pub mode: DecodeMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_steps: 32,
            beam_width: 5,
            coverage_penalty_weight: 1.0,
            mode: DecodeMode::Beam,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_steps: usize) -> Self {
        Self {
            max_steps,
            beam_width: 1,
            coverage_penalty_weight: 0.0,
            mode: DecodeMode::Greedy,
        }
    }

    pub fn beam(max_steps: usize, beam_width: usize, coverage_penalty_weight: f64) -> Self {
        Self {
            max_steps,
            beam_width,
            coverage_penalty_weight,
            mode: DecodeMode::Beam,
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_width == 0 {
            return Err(DecodeError::InvalidConfig("beam_width must be at least 1"));
        }
        if !self.coverage_penalty_weight.is_finite() || self.coverage_penalty_weight < 0.0 {
            return Err(DecodeError::InvalidConfig("coverage_penalty_weight must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    StopToken,
    MaxSteps,
    SelfLoop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedPath {
    pub trajectory: Trajectory,
    /// Sum of chosen log-probabilities (STOP included when taken) minus the
    /// weighted remaining distance to the context target.
    pub score: f64,
    pub terminated_by: Termination,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathValidity {
    pub valid: bool,
    pub first_violation: Option<usize>,
}

/// Adjacency and bounds check; reports the first offending index.
pub fn validate_path(points: &[LatticeCoord], w: &Workspace) -> PathValidity {
    if points.is_empty() {
        return PathValidity {
            valid: false,
            first_violation: Some(0),
        };
    }
    for (i, &p) in points.iter().enumerate() {
        if !in_bounds(p, w) || (i > 0 && manhattan(points[i - 1], p) != 1) {
            return PathValidity {
                valid: false,
                first_violation: Some(i),
            };
        }
    }
    PathValidity {
        valid: true,
        first_violation: None,
    }
}

fn penalty(end: LatticeCoord, ctx: &TaskContext, weight: f64) -> f64 {
    match ctx.target {
        Some(t) if weight > 0.0 => weight * manhattan(end, t) as f64,
        _ => 0.0,
    }
}

fn point_cap(model: &PathModel, cfg: &DecodeConfig) -> usize {
    cfg.max_steps.saturating_add(1).min(model.config().max_seq_len)
}

fn check_start(start: LatticeCoord, w: &Workspace) -> Result<(), DecodeError> {
    if !in_bounds(start, w) {
        return Err(DecodeError::StartNotFree(start));
    }
    Ok(())
}

fn argmax(lp: &[f64; MOVE_VOCAB]) -> usize {
    let mut best = 0;
    for i in 1..MOVE_VOCAB {
        if lp[i] > lp[best] {
            best = i;
        }
    }
    best
}

/// Dispatch on `cfg.mode`.
pub fn decode(
    model: &PathModel,
    start: LatticeCoord,
    ctx: &TaskContext,
    w: &Workspace,
    cfg: &DecodeConfig,
) -> Result<DecodedPath, DecodeError> {
    match cfg.mode {
        DecodeMode::Greedy => decode_greedy(model, start, ctx, w, cfg),
        DecodeMode::Beam => decode_beam(model, start, ctx, w, cfg),
    }
}

/// Forward, mask, argmax (ties to the earlier move), append; stop on STOP,
/// on the step limit, or on a repeated cell.
pub fn decode_greedy(
    model: &PathModel,
    start: LatticeCoord,
    ctx: &TaskContext,
    w: &Workspace,
    cfg: &DecodeConfig,
) -> Result<DecodedPath, DecodeError> {
    cfg.validate()?;
    check_start(start, w)?;
    let cap = point_cap(model, cfg);
    let mut points = vec![start];
    let mut logp = 0.0;
    let terminated_by = loop {
        if points.len() >= cap {
            break Termination::MaxSteps;
        }
        let lp = masked_log_softmax(&model.forward(&points, ctx, w)?)?;
        let best = argmax(&lp);
        logp += lp[best];
        if best == STOP_INDEX {
            break Termination::StopToken;
        }
        let cur = *points.last().expect("non-empty");
        let next = Move::ALL[best].apply(cur);
        if next == cur {
            break Termination::SelfLoop;
        }
        points.push(next);
    };
    let end = *points.last().expect("non-empty");
    Ok(DecodedPath {
        score: logp - penalty(end, ctx, cfg.coverage_penalty_weight),
        trajectory: Trajectory::new(points).expect("non-empty"),
        terminated_by,
    })
}

#[derive(Debug, Clone)]
struct Hyp {
    points: Vec<LatticeCoord>,
    moves: Vec<u8>,
    logp: f64,
    score: f64,
    done: Option<Termination>,
}

fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.moves.cmp(&b.moves))
}

/// Beam search over legal moves. The final pool also holds the greedy
/// decode, so the returned score is never below the greedy score.
pub fn decode_beam(
    model: &PathModel,
    start: LatticeCoord,
    ctx: &TaskContext,
    w: &Workspace,
    cfg: &DecodeConfig,
) -> Result<DecodedPath, DecodeError> {
    cfg.validate()?;
    check_start(start, w)?;
    if cfg.beam_width == 1 {
        return decode_greedy(model, start, ctx, w, cfg);
    }
    let cap = point_cap(model, cfg);
    let weight = cfg.coverage_penalty_weight;
    let mut beam = vec![Hyp {
        points: vec![start],
        moves: Vec::new(),
        logp: 0.0,
        score: -penalty(start, ctx, weight),
        done: None,
    }];

    while beam.iter().any(|h| h.done.is_none()) {
        let mut pool = Vec::new();
        for h in beam {
            if h.done.is_some() {
                pool.push(h);
                continue;
            }
            if h.points.len() >= cap {
                pool.push(Hyp {
                    done: Some(Termination::MaxSteps),
                    ..h
                });
                continue;
            }
            let lp = masked_log_softmax(&model.forward(&h.points, ctx, w)?)?;
            let cur = *h.points.last().expect("non-empty");
            for (j, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut moves = h.moves.clone();
                moves.push(j as u8);
                let logp = h.logp + l;
                if j == STOP_INDEX {
                    pool.push(Hyp {
                        points: h.points.clone(),
                        moves,
                        logp,
                        score: logp - penalty(cur, ctx, weight),
                        done: Some(Termination::StopToken),
                    });
                    continue;
                }
                let next = Move::ALL[j].apply(cur);
                let mut points = h.points.clone();
                points.push(next);
                pool.push(Hyp {
                    points,
                    moves,
                    logp,
                    score: logp - penalty(next, ctx, weight),
                    done: None,
                });
            }
        }
        pool.sort_by(rank);
        pool.truncate(cfg.beam_width);
        beam = pool;
    }

    let greedy = decode_greedy(model, start, ctx, w, cfg)?;
    let best = beam.into_iter().min_by(rank).expect("beam is never empty");
    let beam_path = DecodedPath {
        score: best.score,
        trajectory: Trajectory::new(best.points).expect("non-empty"),
        terminated_by: best.done.expect("all finished"),
    };
    Ok(if greedy.score > beam_path.score { greedy } else { beam_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{CellBox, LatticeCoord as C};
    use crate::model::{masked_softmax, ModelConfig};
    use crate::taskgrid::{build_context, TaskGraph};

    fn ctx(target: Option<C>) -> TaskContext {
        let c = build_context(&TaskGraph::reach_only(), 0, &[], 3, 24).unwrap();
        match target {
            Some(t) => c.with_target(t),
            None => c,
        }
    }

    fn model(seed: u64) -> PathModel {
        PathModel::new(ModelConfig::new(8, 1, 2, 16, CellBox::centered(5, 5, 3).unwrap()), seed).unwrap()
    }

    fn constant_model(bias: [f64; 7]) -> PathModel {
        let mut m = model(0);
        let n = m.params().len();
        for p in m.params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        m.params_mut()[n - 1].data.copy_from_slice(&bias);
        m
    }

    #[test]
    fn zero_steps_returns_start() {
        let w = Workspace::desk(5, 5, 3).unwrap();
        let d = decode_greedy(&model(1), C::new(0, 0, 1), &ctx(None), &w, &DecodeConfig::greedy(0)).unwrap();
        assert_eq!(d.trajectory.points(), &[C::new(0, 0, 1)]);
        assert_eq!(d.terminated_by, Termination::MaxSteps);
        assert_eq!(d.score, 0.0);
    }

    #[test]
    fn enclosed_start_stops_immediately() {
        let s = C::new(0, 0, 1);
        let walls: Vec<C> = Move::STEPS.iter().map(|m| m.apply(s)).collect();
        let w = Workspace::desk(5, 5, 3).unwrap().with_obstacles(walls).unwrap();
        for cfg in [DecodeConfig::greedy(10), DecodeConfig::beam(10, 5, 0.0)] {
            let d = decode(&model(2), s, &ctx(None), &w, &cfg).unwrap();
            assert_eq!(d.trajectory.points(), &[s]);
            assert_eq!(d.terminated_by, Termination::StopToken);
            assert_eq!(d.score, 0.0);
        }
    }

    #[test]
    fn greedy_ties_follow_canonical_order() {
        let m = constant_model([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
        let w = Workspace::desk(5, 5, 3).unwrap();
        let d = decode_greedy(&m, C::new(0, 0, 0), &ctx(None), &w, &DecodeConfig::greedy(3)).unwrap();
        // +x wins every tie until the wall at x = 2, then -x is first legal.
        assert_eq!(d.trajectory.points(), &[C::new(0, 0, 0), C::new(1, 0, 0), C::new(2, 0, 0), C::new(1, 0, 0)]);
        assert_eq!(d.terminated_by, Termination::MaxSteps);
    }

    #[test]
    fn start_outside_workspace_is_an_error() {
        let w = Workspace::desk(5, 5, 3).unwrap();
        let err = decode_greedy(&model(1), C::new(7, 0, 0), &ctx(None), &w, &DecodeConfig::greedy(4)).unwrap_err();
        assert_eq!(err, DecodeError::StartNotFree(C::new(7, 0, 0)));
    }

    #[test]
    fn beam_width_one_is_greedy() {
        let w = Workspace::desk(5, 5, 3).unwrap();
        for seed in 0..5 {
            let m = model(seed);
            let c = ctx(Some(C::new(2, 2, 2)));
            let g = decode_greedy(&m, C::new(-2, 0, 0), &c, &w, &DecodeConfig::greedy(8)).unwrap();
            let b = decode_beam(&m, C::new(-2, 0, 0), &c, &w, &DecodeConfig::beam(8, 1, 0.0)).unwrap();
            assert_eq!(g, b);
        }
    }

    /// Two equally likely two-step routes to the goal: +x+y and +y+x.
    #[test]
    fn equal_routes_resolve_lexicographically() {
        let m = constant_model([3.0, -3.0, 3.0, -3.0, -3.0, -3.0, -3.0]);
        let w = Workspace::desk(5, 5, 3).unwrap();
        let goal = C::new(1, 1, 0);
        let d = decode_beam(&m, C::new(0, 0, 0), &ctx(Some(goal)), &w, &DecodeConfig::beam(2, 5, 1.0)).unwrap();
        assert_eq!(d.trajectory.points(), &[C::new(0, 0, 0), C::new(1, 0, 0), goal]);
        assert_eq!(d.terminated_by, Termination::MaxSteps);
        // z = 0 is the floor, so -z is illegal at every cell on the route.
        let e3 = 3f64.exp();
        let em3 = (-3f64).exp();
        let q = e3 / (2.0 * e3 + 4.0 * em3);
        assert!((d.score - 2.0 * q.ln()).abs() < 1e-12);
    }

    #[test]
    fn beam_never_scores_below_greedy() {
        let w = Workspace::desk(5, 5, 3).unwrap();
        for seed in 0..8 {
            let m = model(100 + seed);
            let c = ctx(Some(C::new(2, -2, 2)));
            let mut cfg = DecodeConfig::beam(10, 5, 0.5);
            let b = decode_beam(&m, C::new(-2, 2, 0), &c, &w, &cfg).unwrap();
            cfg.mode = DecodeMode::Greedy;
            let g = decode_greedy(&m, C::new(-2, 2, 0), &c, &w, &cfg).unwrap();
            assert!(b.score >= g.score);
        }
    }

    #[test]
    fn greedy_score_is_sum_of_chosen_log_probs() {
        let w = Workspace::desk(5, 5, 3).unwrap();
        let m = model(77);
        let c = ctx(None);
        let d = decode_greedy(&m, C::new(0, 0, 0), &c, &w, &DecodeConfig::greedy(5)).unwrap();
        let pts = d.trajectory.points();
        let mut total = 0.0;
        for i in 1..pts.len() {
            let p = masked_softmax(&m.forward(&pts[..i], &c, &w).unwrap()).unwrap();
            total += p[Move::between(pts[i - 1], pts[i]).unwrap().index()].ln();
        }
        if d.terminated_by == Termination::StopToken {
            let p = masked_softmax(&m.forward(pts, &c, &w).unwrap()).unwrap();
            total += p[STOP_INDEX].ln();
        }
        assert!((d.score - total).abs() < 1e-9);
    }

    #[test]
    fn validate_path_examples() {
        let w = Workspace::desk(5, 5, 3).unwrap();
        assert!(validate_path(&[C::new(0, 0, 0)], &w).valid);
        let v = validate_path(&[C::new(0, 0, 0), C::new(1, 1, 0)], &w);
        assert_eq!(v, PathValidity { valid: false, first_violation: Some(1) });
        let v = validate_path(&[C::new(2, 0, 0), C::new(3, 0, 0)], &w);
        assert_eq!(v.first_violation, Some(1));
        assert_eq!(validate_path(&[], &w).first_violation, Some(0));
    }

    #[test]
    fn length_is_capped_by_model_window() {
        let m = constant_model([5.0, -5.0, 0.0, 0.0, 0.0, 0.0, -9.0]);
        let w = Workspace::desk(41, 5, 3).unwrap();
        let cfg = DecodeConfig::greedy(100);
        let d = decode_greedy(&m, C::new(-20, 0, 0), &ctx(None), &w, &cfg);
        // Start lies outside the model's 5x5x3 coordinate box.
        assert!(matches!(d, Err(DecodeError::Model(ModelError::OutsideModelBox(_)))));
        let w = Workspace::desk(5, 5, 3).unwrap();
        let d = decode_greedy(&m, C::new(-2, 0, 0), &ctx(None), &w, &cfg).unwrap();
        assert_eq!(d.trajectory.len(), 16);
        assert_eq!(d.terminated_by, Termination::MaxSteps);
    }
}
