//! Synthetic trajectory corpus.
//!
//! Ground truth comes from a breadth-first search over the free lattice:
//! expansion and parent selection follow the canonical move order, so the
//! oracle is a pure function of `(start, goal, workspace)`. Records are
//! generated independently from per-record seeds derived from the corpus
//! seed, then tagged train/validation by ranking a hash of each record seed.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{in_bounds, manhattan, CellBox, LatticeCoord, LatticeError, Move, Workspace};
use crate::rng::{derive_seed, rng_from_seed, splitmix64};
use crate::taskgrid::{build_context, TaskContext, TaskGraph, TaskGraphError, NodeId};

/// Highest obstacle density accepted by [`GenerationConfig::validate`].
pub const MAX_OBSTACLE_DENSITY: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("no obstacle-free path from {start} to {goal}")]
    Unreachable { start: LatticeCoord, goal: LatticeCoord },
    #[error("endpoint {0} is outside the workspace or blocked")]
    EndpointNotFree(LatticeCoord),
    #[error("trajectory must contain at least one point")]
    EmptyTrajectory,
    #[error("invalid generation config: {0}")]
    InvalidConfig(&'static str),
    #[error("record {index}: no feasible start/goal pair after {attempts} attempts")]
    Infeasible { index: usize, attempts: u32 },
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    TaskGraph(#[from] TaskGraphError),
}

/// Ordered lattice path. The first point is the start cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory(Vec<LatticeCoord>);

impl Trajectory {
    pub fn new(points: Vec<LatticeCoord>) -> Result<Self, CorpusError> {
        if points.is_empty() {
            return Err(CorpusError::EmptyTrajectory);
        }
        Ok(Self(points))
    }

    pub fn single(p: LatticeCoord) -> Self {
        Self(vec![p])
    }

    pub fn points(&self) -> &[LatticeCoord] {
        &self.0
    }

    pub fn into_points(self) -> Vec<LatticeCoord> {
        self.0
    }

    pub fn start(&self) -> LatticeCoord {
        self.0[0]
    }

    pub fn end(&self) -> LatticeCoord {
        *self.0.last().expect("non-empty")
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Unit moves between consecutive points; `None` where a pair is not adjacent.
    pub fn moves(&self) -> Vec<Option<Move>> {
        self.0.windows(2).map(|w| Move::between(w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub workspace: Workspace,
    pub task_graph: TaskGraph,
    pub context: TaskContext,
    #[serde(rename = "points")]
    pub trajectory: Trajectory,
    pub seed: u64,
    pub split_tag: SplitTag,
}

/// Shortest obstacle-avoiding path by breadth-first search, endpoints included.
pub fn oracle_path(start: LatticeCoord, goal: LatticeCoord, w: &Workspace) -> Result<Trajectory, CorpusError> {
    for p in [start, goal] {
        if !in_bounds(p, w) {
            return Err(CorpusError::EndpointNotFree(p));
        }
    }
    if start == goal {
        return Ok(Trajectory::single(start));
    }
    let bounds = *w.bounds();
    const UNSEEN: u32 = u32::MAX;
    let mut parent = vec![UNSEEN; bounds.volume()];
    let cells: Vec<LatticeCoord> = bounds.cells().collect();
    let start_idx = bounds.linear_index(start).expect("in bounds");
    let goal_idx = bounds.linear_index(goal).expect("in bounds");
    parent[start_idx] = start_idx as u32;
    let mut queue = VecDeque::from([start_idx]);
    'search: while let Some(i) = queue.pop_front() {
        let p = cells[i];
        for m in Move::STEPS {
            let u = m.apply(p);
            if !in_bounds(u, w) {
                continue;
            }
            let j = bounds.linear_index(u).expect("in bounds");
            if parent[j] == UNSEEN {
                parent[j] = i as u32;
                if j == goal_idx {
                    break 'search;
                }
                queue.push_back(j);
            }
        }
    }
    if parent[goal_idx] == UNSEEN {
        return Err(CorpusError::Unreachable { start, goal });
    }
    let mut path = vec![goal];
    let mut i = goal_idx;
    while i != start_idx {
        i = parent[i] as usize;
        path.push(cells[i]);
    }
    path.reverse();
    Ok(Trajectory(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub bounds: CellBox,
    pub resolution_mm: f64,
    /// Per-cell obstacle probability, at most [`MAX_OBSTACLE_DENSITY`].
    pub obstacle_density: f64,
    pub count: usize,
    /// Upper bound on path length in points.
    pub max_path_len: u32,
    pub train_fraction: f64,
    /// Resample budget per record before giving up.
    pub max_attempts: u32,
    /// Share of records carrying the reach-grasp-lift-place chain instead of
    /// the reach-only template.
    pub pick_and_place_fraction: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            bounds: CellBox::centered(7, 7, 5).expect("static"),
            resolution_mm: crate::lattice::DEFAULT_RESOLUTION_MM,
            obstacle_density: 0.0,
            count: 1000,
            max_path_len: 24,
            train_fraction: 0.8,
            max_attempts: 256,
            pick_and_place_fraction: 0.5,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(0.0..=MAX_OBSTACLE_DENSITY).contains(&self.obstacle_density) {
            return Err(CorpusError::InvalidConfig("obstacle_density must lie in [0, 0.2]"));
        }
        if self.max_path_len == 0 {
            return Err(CorpusError::InvalidConfig("max_path_len must be positive"));
        }
        if self.max_attempts == 0 {
            return Err(CorpusError::InvalidConfig("max_attempts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pick_and_place_fraction) {
            return Err(CorpusError::InvalidConfig("pick_and_place_fraction must lie in [0, 1]"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CorpusError::InvalidFraction(self.train_fraction));
        }
        Workspace::new(self.bounds, self.resolution_mm)?;
        Ok(())
    }
}

/// Seed of record `index` in a corpus generated with `corpus_seed`.
pub fn record_seed(corpus_seed: u64, index: usize) -> u64 {
    derive_seed(corpus_seed, index as u64)
}

/// Generate one record. The split tag is provisional (`Train`); [`split`]
/// assigns the real one over the whole corpus.
pub fn generate_record(cfg: &GenerationConfig, corpus_seed: u64, index: usize) -> Result<CorpusRecord, CorpusError> {
    let seed = record_seed(corpus_seed, index);
    let mut rng = rng_from_seed(seed);
    let base = Workspace::new(cfg.bounds, cfg.resolution_mm)?;
    let cells: Vec<LatticeCoord> = cfg.bounds.cells().collect();

    for _ in 0..cfg.max_attempts {
        let mut w = base.clone();
        if cfg.obstacle_density > 0.0 {
            for &c in &cells {
                if rng.random::<f64>() < cfg.obstacle_density {
                    w.add_obstacle(c)?;
                }
            }
        }
        let free: Vec<LatticeCoord> = cells.iter().copied().filter(|c| in_bounds(*c, &w)).collect();
        if free.len() < 2 {
            continue;
        }
        let si = rng.random_range(0..free.len());
        let mut gi = rng.random_range(0..free.len() - 1);
        if gi >= si {
            gi += 1;
        }
        let (start, goal) = (free[si], free[gi]);
        let path = match oracle_path(start, goal, &w) {
            Ok(p) if p.len() <= cfg.max_path_len as usize => p,
            _ => continue,
        };

        let (graph, active, done): (TaskGraph, NodeId, Vec<NodeId>) =
            if rng.random::<f64>() < cfg.pick_and_place_fraction {
                let g = TaskGraph::pick_and_place();
                let active = rng.random_range(0..g.nodes.len()) as NodeId;
                (g, active, (0..active).collect())
            } else {
                (TaskGraph::reach_only(), 0, Vec::new())
            };
        let hint = manhattan(start, goal) + 1;
        let context = build_context(&graph, active, &done, hint, cfg.max_path_len)?.with_target(goal);
        return Ok(CorpusRecord {
            workspace: w,
            task_graph: graph,
            context,
            trajectory: path,
            seed,
            split_tag: SplitTag::Train,
        });
    }
    Err(CorpusError::Infeasible {
        index,
        attempts: cfg.max_attempts,
    })
}

/// Generate and split a full corpus. Pure function of `(cfg, seed)`.
pub fn generate_corpus(cfg: &GenerationConfig, seed: u64) -> Result<Vec<CorpusRecord>, CorpusError> {
    cfg.validate()?;
    let records = (0..cfg.count)
        .map(|i| generate_record(cfg, seed, i))
        .collect::<Result<Vec<_>, _>>()?;
    split(records, cfg.train_fraction)
}

/// Tag records train/validation.
///
/// Records are ranked by a hash of their seed and the first
/// `round(train_fraction * n)` become `Train`; the tags depend only on the
/// multiset of seeds, never on input order.
pub fn split(mut records: Vec<CorpusRecord>, train_fraction: f64) -> Result<Vec<CorpusRecord>, CorpusError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::InvalidFraction(train_fraction));
    }
    let n_train = libm::round(train_fraction * records.len() as f64) as usize;
    let mut rank: Vec<usize> = (0..records.len()).collect();
    rank.sort_by_key(|&i| (splitmix64(records[i].seed), records[i].seed));
    for (pos, &i) in rank.iter().enumerate() {
        records[i].split_tag = if pos < n_train { SplitTag::Train } else { SplitTag::Validation };
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{neighbors, CellBox};

    fn c(x: i32, y: i32, z: i32) -> LatticeCoord {
        LatticeCoord::new(x, y, z)
    }

    fn free_box() -> Workspace {
        Workspace::new(CellBox::new(c(-2, -2, 0), c(2, 2, 2)).unwrap(), 20.0).unwrap()
    }

    fn is_legal(t: &Trajectory, w: &Workspace) -> bool {
        t.points().iter().all(|p| in_bounds(*p, w)) && t.points().windows(2).all(|p| manhattan(p[0], p[1]) == 1)
    }

    #[test]
    fn oracle_examples() {
        let w = free_box();
        assert_eq!(oracle_path(c(0, 0, 0), c(0, 0, 0), &w).unwrap().points(), &[c(0, 0, 0)]);
        assert_eq!(
            oracle_path(c(0, 0, 0), c(2, 0, 0), &w).unwrap().points(),
            &[c(0, 0, 0), c(1, 0, 0), c(2, 0, 0)]
        );
        let blocked = w.clone().with_obstacles([c(1, 0, 0)]).unwrap();
        let detour = oracle_path(c(0, 0, 0), c(2, 0, 0), &blocked).unwrap();
        assert_eq!(detour.len(), 5);
        assert_eq!(detour.len() as u32 - 1, manhattan(c(0, 0, 0), c(2, 0, 0)) + 2);
        assert!(is_legal(&detour, &blocked));
        assert_eq!(detour.start(), c(0, 0, 0));
        assert_eq!(detour.end(), c(2, 0, 0));
    }

    #[test]
    fn oracle_follows_canonical_axis_order() {
        let w = free_box();
        let p = oracle_path(c(-1, -1, 0), c(1, 1, 1), &w).unwrap();
        assert_eq!(
            p.points(),
            &[c(-1, -1, 0), c(0, -1, 0), c(1, -1, 0), c(1, 0, 0), c(1, 1, 0), c(1, 1, 1)]
        );
    }

    #[test]
    fn oracle_reports_unreachable() {
        let w = free_box();
        let goal = c(0, 0, 0);
        let walls = neighbors(goal, &w).unwrap();
        let walled = w.with_obstacles(walls).unwrap();
        assert_eq!(
            oracle_path(c(2, 2, 2), goal, &walled),
            Err(CorpusError::Unreachable { start: c(2, 2, 2), goal })
        );
        assert_eq!(oracle_path(c(9, 0, 0), goal, &walled), Err(CorpusError::EndpointNotFree(c(9, 0, 0))));
    }

    #[test]
    fn oracle_is_optimal_on_free_box() {
        let w = Workspace::new(CellBox::new(c(0, 0, 0), c(4, 4, 2)).unwrap(), 20.0).unwrap();
        let cells: Vec<_> = w.bounds().cells().collect();
        for &a in &cells {
            for &b in &cells {
                let p = oracle_path(a, b, &w).unwrap();
                assert_eq!(p.len() as u32 - 1, manhattan(a, b));
            }
        }
    }

    #[test]
    fn corpus_is_deterministic_and_legal() {
        let cfg = GenerationConfig {
            count: 10,
            obstacle_density: 0.1,
            ..Default::default()
        };
        let a = generate_corpus(&cfg, 7).unwrap();
        let b = generate_corpus(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_corpus(&cfg, 8).unwrap());
        for r in &a {
            assert!(is_legal(&r.trajectory, &r.workspace));
            assert_eq!(r.context.target, Some(r.trajectory.end()));
            assert!(r.trajectory.len() <= cfg.max_path_len as usize);
        }
    }

    #[test]
    fn free_corpus_paths_are_shortest() {
        let cfg = GenerationConfig {
            count: 200,
            ..Default::default()
        };
        for r in generate_corpus(&cfg, 3).unwrap() {
            let t = &r.trajectory;
            assert_eq!(t.len() as u32, manhattan(t.start(), t.end()) + 1);
        }
    }

    #[test]
    fn split_counts_and_order_independence() {
        let cfg = GenerationConfig {
            count: 1000,
            ..Default::default()
        };
        let recs = generate_corpus(&cfg, 11).unwrap();
        let train = recs.iter().filter(|r| r.split_tag == SplitTag::Train).count();
        assert_eq!((train, recs.len() - train), (800, 200));

        let ten = split(recs[..10].to_vec(), 0.8).unwrap();
        assert_eq!(ten.iter().filter(|r| r.split_tag == SplitTag::Train).count(), 8);
        let mut shuffled = ten.clone();
        shuffled.reverse();
        shuffled.swap(2, 7);
        let reshuffled = split(shuffled, 0.8).unwrap();
        for r in &reshuffled {
            let orig = ten.iter().find(|o| o.seed == r.seed).unwrap();
            assert_eq!(orig.split_tag, r.split_tag);
        }
        assert!(split(Vec::new(), 0.8).unwrap().is_empty());
        assert!(matches!(split(Vec::new(), 1.0), Err(CorpusError::InvalidFraction(_))));
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let dense = GenerationConfig {
            obstacle_density: 0.9,
            ..Default::default()
        };
        assert!(matches!(generate_corpus(&dense, 1), Err(CorpusError::InvalidConfig(_))));
        // A 1x1x1 box never has two distinct free cells.
        let tiny = GenerationConfig {
            bounds: CellBox::new(c(0, 0, 0), c(0, 0, 0)).unwrap(),
            count: 1,
            max_attempts: 5,
            ..Default::default()
        };
        assert_eq!(generate_corpus(&tiny, 1), Err(CorpusError::Infeasible { index: 0, attempts: 5 }));
    }
}
