//! Lattice episode simulator.
//!
//! A scene holds a workspace, the end-effector cell, the object (target) cell
//! and an optional container. An episode plans an approach to the target,
//! grasps in place, transports to the container drop cell and releases there,
//! advancing one lattice move per tick. Scripted events fire at the start of
//! their tick and are handled locally: a slipped target is re-grounded from
//! the current end-effector cell, and a cell blocked ahead of the effector is
//! bypassed by a short detour that rejoins the planned route.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{oracle_path, Trajectory};
use crate::decoder::{decode, DecodeConfig};
use crate::lattice::{in_bounds, manhattan, CellBox, LatticeCoord, Move, Workspace};
use crate::model::PathModel;
use crate::rng::rng_from_seed;
use crate::taskgrid::{build_context, TaskGraph};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    InvalidScene(&'static str),
    #[error("phases do not join at waypoint {0}")]
    Discontinuity(usize),
    #[error("event at step {step} names cell {cell} outside the workspace box")]
    EventOutOfBounds { step: u32, cell: LatticeCoord },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Container {
    pub region: CellBox,
    /// Cell the object is carried to; must lie in `region`.
    pub drop: LatticeCoord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub workspace: Workspace,
    pub end_effector: LatticeCoord,
    pub target: LatticeCoord,
    #[serde(default)]
    pub container: Option<Container>,
    /// `(cell, activation tick)` pairs, merged with the event script.
    #[serde(default)]
    pub dynamic_obstacles: Vec<(LatticeCoord, u32)>,
}

impl Scene {
    pub fn validate(&self) -> Result<(), SimError> {
        let w = &self.workspace;
        if !in_bounds(self.end_effector, w) {
            return Err(SimError::InvalidScene("end effector is outside the workspace or blocked"));
        }
        if !in_bounds(self.target, w) {
            return Err(SimError::InvalidScene("target is outside the workspace or blocked"));
        }
        if self.dynamic_obstacles.iter().any(|&(c, s)| s == 0 && c == self.target) {
            return Err(SimError::InvalidScene("target is covered by an obstacle active at tick 0"));
        }
        if let Some(c) = &self.container {
            if !c.region.contains(c.drop) {
                return Err(SimError::InvalidScene("container drop cell lies outside its region"));
            }
            if !in_bounds(c.drop, w) {
                return Err(SimError::InvalidScene("container drop cell is outside the workspace or blocked"));
            }
        }
        for &(cell, step) in &self.dynamic_obstacles {
            if !w.bounds().contains(cell) {
                return Err(SimError::EventOutOfBounds { step, cell });
            }
        }
        Ok(())
    }

    /// Where the object is released.
    pub fn drop_cell(&self) -> LatticeCoord {
        self.container.map_or(self.target, |c| c.drop)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Approach,
    Engage,
    Transport,
    Release,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitivePlan {
    pub phases: Vec<(PhaseKind, Trajectory)>,
}

impl PrimitivePlan {
    /// All phase waypoints with repeated junction cells collapsed.
    pub fn waypoints(&self) -> Vec<LatticeCoord> {
        let mut out: Vec<LatticeCoord> = Vec::new();
        for (_, t) in &self.phases {
            for &p in t.points() {
                if out.last() != Some(&p) {
                    out.push(p);
                }
            }
        }
        out
    }
}

/// approach = `to_target`, engage = [target], transport = `to_container`,
/// release = [last cell].
pub fn compile_primitives(to_target: &Trajectory, to_container: &Trajectory) -> Result<PrimitivePlan, SimError> {
    let target = to_target.end();
    if to_container.start() != target {
        return Err(SimError::Discontinuity(to_target.len()));
    }
    let plan = PrimitivePlan {
        phases: vec![
            (PhaseKind::Approach, to_target.clone()),
            (PhaseKind::Engage, Trajectory::single(target)),
            (PhaseKind::Transport, to_container.clone()),
            (PhaseKind::Release, Trajectory::single(to_container.end())),
        ],
    };
    let wp = plan.waypoints();
    for i in 1..wp.len() {
        if manhattan(wp[i - 1], wp[i]) != 1 {
            return Err(SimError::Discontinuity(i));
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    NoState,
    OcclusionCluster,
    NestedBlock,
    MisId,
    MechanicalSlip,
    /// The planner produced a route that does not reach its goal, or the tick
    /// budget ran out.
    PlannerMiss,
}

impl FailureMode {
    pub const ALL: [FailureMode; 6] = [
        FailureMode::NoState,
        FailureMode::OcclusionCluster,
        FailureMode::NestedBlock,
        FailureMode::MisId,
        FailureMode::MechanicalSlip,
        FailureMode::PlannerMiss,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// The object moved; re-ground the approach.
    Slip { new_target: LatticeCoord },
    DynamicObstacle { cell: LatticeCoord },
    /// State sync lost; the target cannot be observed.
    NoState,
    /// The object is blocked in by others and cannot be grasped.
    GraspBlocked,
    /// Perception picked the wrong object.
    MisIdentified,
    /// The object slips out of the gripper.
    GripperSlip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub step: u32,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    /// Fall back to a full re-plan when no local detour exists.
    pub allow_global_replan: bool,
    pub max_ticks: u32,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            allow_global_replan: false,
            max_ticks: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub failure_mode: Option<FailureMode>,
    pub regrounds: u32,
    pub detours: u32,
    pub replanned_globally: bool,
    pub grasped: bool,
    pub placed: bool,
    pub ticks: u32,
    /// Every cell the end effector occupied, in order, without repeats.
    pub executed: Vec<LatticeCoord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanFailure {
    Unreachable,
    Missed,
}

/// Source of point-to-point routes.
pub trait Planner {
    fn plan(&self, from: LatticeCoord, to: LatticeCoord, w: &Workspace, phase: PhaseKind) -> Result<Vec<LatticeCoord>, PlanFailure>;
}

/// Breadth-first shortest paths.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePlanner;

impl Planner for OraclePlanner {
    fn plan(&self, from: LatticeCoord, to: LatticeCoord, w: &Workspace, _phase: PhaseKind) -> Result<Vec<LatticeCoord>, PlanFailure> {
        match oracle_path(from, to, w) {
            Ok(t) => Ok(t.into_points()),
            Err(_) => Err(PlanFailure::Unreachable),
        }
    }
}

/// Routes decoded by a trained model; a decode that does not end on the goal
/// is a miss.
#[derive(Debug, Clone)]
pub struct ModelPlanner<'m> {
    pub model: &'m PathModel,
    pub decode: DecodeConfig,
    /// Normaliser for the context length hint.
    pub max_len: u32,
}

impl Planner for ModelPlanner<'_> {
    fn plan(&self, from: LatticeCoord, to: LatticeCoord, w: &Workspace, phase: PhaseKind) -> Result<Vec<LatticeCoord>, PlanFailure> {
        if oracle_path(from, to, w).is_err() {
            return Err(PlanFailure::Unreachable);
        }
        let g = TaskGraph::pick_and_place();
        let (active, done): (u32, &[u32]) = match phase {
            PhaseKind::Approach | PhaseKind::Engage => (0, &[]),
            PhaseKind::Transport | PhaseKind::Release => (3, &[0, 1, 2]),
        };
        let ctx = build_context(&g, active, done, manhattan(from, to) + 1, self.max_len)
            .map_err(|_| PlanFailure::Missed)?
            .with_target(to);
        match decode(self.model, from, &ctx, w, &self.decode) {
            Ok(d) if d.trajectory.end() == to => Ok(d.trajectory.into_points()),
            _ => Err(PlanFailure::Missed),
        }
    }
}

fn plan_failure(f: PlanFailure) -> FailureMode {
    match f {
        PlanFailure::Unreachable => FailureMode::OcclusionCluster,
        PlanFailure::Missed => FailureMode::PlannerMiss,
    }
}

/// BFS distances and parents from `from` over free cells.
fn bfs_tree(from: LatticeCoord, w: &Workspace) -> BTreeMap<LatticeCoord, (u32, LatticeCoord)> {
    let mut seen = BTreeMap::new();
    seen.insert(from, (0, from));
    let mut q = VecDeque::from([from]);
    while let Some(p) = q.pop_front() {
        let d = seen[&p].0;
        for m in Move::STEPS {
            let u = m.apply(p);
            if in_bounds(u, w) && !seen.contains_key(&u) {
                seen.insert(u, (d + 1, p));
                q.push_back(u);
            }
        }
    }
    seen
}

/// Replace the first blocked cell of `route` (index >= 1) with the shortest
/// bypass from the cell before it, rejoining at the earliest later cell whose
/// bypass costs at most two extra moves. `None` if no such bypass exists.
pub fn local_detour(route: &[LatticeCoord], w: &Workspace) -> Option<Vec<LatticeCoord>> {
    let j = (1..route.len()).find(|&i| !in_bounds(route[i], w))?;
    let from = route[j - 1];
    let tree = bfs_tree(from, w);
    for m in j + 1..route.len() {
        let Some(&(d, _)) = tree.get(&route[m]) else { continue };
        if d as usize <= (m - (j - 1)) + 2 {
            let mut bypass = vec![route[m]];
            let mut c = route[m];
            while c != from {
                c = tree[&c].1;
                bypass.push(c);
            }
            bypass.reverse();
            let mut out = route[..j - 1].to_vec();
            out.extend(bypass);
            out.extend_from_slice(&route[m + 1..]);
            return Some(out);
        }
    }
    None
}

struct Episode<'a, P: Planner> {
    planner: &'a P,
    cfg: EpisodeConfig,
    w: Workspace,
    pos: LatticeCoord,
    target: LatticeCoord,
    drop: LatticeCoord,
    container: Option<Container>,
    phase: PhaseKind,
    /// Planned cells ahead of `pos`, `route[0] == pos`.
    route: Vec<LatticeCoord>,
    out: EpisodeOutcome,
}

impl<P: Planner> Episode<'_, P> {
    fn fail(&mut self, mode: FailureMode) {
        self.out.failure_mode = Some(mode);
    }

    fn goal(&self) -> LatticeCoord {
        match self.phase {
            PhaseKind::Approach | PhaseKind::Engage => self.target,
            PhaseKind::Transport | PhaseKind::Release => self.drop,
        }
    }

    fn replan(&mut self) -> bool {
        match self.planner.plan(self.pos, self.goal(), &self.w, self.phase) {
            Ok(r) => {
                self.route = r;
                true
            }
            Err(f) => {
                self.fail(plan_failure(f));
                false
            }
        }
    }

    fn apply(&mut self, ev: &EventKind) {
        match *ev {
            EventKind::NoState => self.fail(FailureMode::NoState),
            EventKind::GraspBlocked => self.fail(FailureMode::NestedBlock),
            EventKind::MisIdentified => self.fail(FailureMode::MisId),
            EventKind::GripperSlip => self.fail(FailureMode::MechanicalSlip),
            EventKind::Slip { new_target } => {
                // Out-of-box slips are rejected; once grasped the object
                // travels with the gripper.
                if !self.w.bounds().contains(new_target) || self.out.grasped {
                    return;
                }
                self.target = new_target;
                if self.container.is_none() {
                    self.drop = new_target;
                }
                if !in_bounds(new_target, &self.w) {
                    self.fail(FailureMode::OcclusionCluster);
                    return;
                }
                if self.replan() {
                    self.out.regrounds += 1;
                }
            }
            EventKind::DynamicObstacle { cell } => {
                if self.w.add_obstacle(cell).is_err() {
                    return;
                }
                if cell == self.pos || cell == self.goal() {
                    self.fail(FailureMode::OcclusionCluster);
                    return;
                }
                while self.route.iter().any(|c| !in_bounds(*c, &self.w)) {
                    if let Some(r) = local_detour(&self.route, &self.w) {
                        self.route = r;
                        self.out.detours += 1;
                    } else if self.cfg.allow_global_replan {
                        if !self.replan() {
                            return;
                        }
                        self.out.replanned_globally = true;
                    } else {
                        self.fail(FailureMode::OcclusionCluster);
                        return;
                    }
                }
            }
        }
    }

    fn visit(&mut self, p: LatticeCoord) {
        if self.out.executed.last() != Some(&p) {
            self.out.executed.push(p);
        }
    }

    /// One tick of motion or an in-place action. Returns true when finished.
    fn advance(&mut self) -> bool {
        if self.route.len() > 1 {
            let next = self.route[1];
            if manhattan(self.pos, next) != 1 || !in_bounds(next, &self.w) {
                self.fail(FailureMode::PlannerMiss);
                return true;
            }
            self.pos = next;
            self.route.remove(0);
            self.visit(next);
            return false;
        }
        match self.phase {
            PhaseKind::Approach | PhaseKind::Engage => {
                self.out.grasped = true;
                self.phase = PhaseKind::Transport;
                !self.replan()
            }
            PhaseKind::Transport | PhaseKind::Release => {
                self.phase = PhaseKind::Release;
                self.out.placed = match self.container {
                    Some(c) => c.region.contains(self.pos),
                    None => self.pos == self.target,
                };
                if self.out.placed {
                    self.out.success = true;
                } else {
                    self.fail(FailureMode::PlannerMiss);
                }
                true
            }
        }
    }
}

/// Run one episode. Deterministic in all inputs; failures are outcomes.
pub fn run_episode<P: Planner>(scene: &Scene, planner: &P, events: &[Event], cfg: &EpisodeConfig) -> Result<EpisodeOutcome, SimError> {
    scene.validate()?;
    for e in events {
        let cell = match e.kind {
            EventKind::Slip { .. } => None,
            EventKind::DynamicObstacle { cell } => Some(cell),
            _ => None,
        };
        if let Some(cell) = cell {
            if !scene.workspace.bounds().contains(cell) {
                return Err(SimError::EventOutOfBounds { step: e.step, cell });
            }
        }
    }
    let mut script: Vec<Event> = scene
        .dynamic_obstacles
        .iter()
        .map(|&(cell, step)| Event {
            step,
            kind: EventKind::DynamicObstacle { cell },
        })
        .collect();
    script.extend_from_slice(events);
    // Stable: same-tick events keep scene-then-script order.
    script.sort_by_key(|e| e.step);

    let mut ep = Episode {
        planner,
        cfg: *cfg,
        w: scene.workspace.clone(),
        pos: scene.end_effector,
        target: scene.target,
        drop: scene.drop_cell(),
        container: scene.container,
        phase: PhaseKind::Approach,
        route: Vec::new(),
        out: EpisodeOutcome {
            success: false,
            failure_mode: None,
            regrounds: 0,
            detours: 0,
            replanned_globally: false,
            grasped: false,
            placed: false,
            ticks: 0,
            executed: vec![scene.end_effector],
        },
    };
    if !ep.replan() {
        return Ok(ep.out);
    }
    let mut next_event = 0;
    for tick in 0..cfg.max_ticks {
        ep.out.ticks = tick;
        while next_event < script.len() && script[next_event].step <= tick {
            ep.apply(&script[next_event].kind);
            next_event += 1;
            if ep.out.failure_mode.is_some() {
                return Ok(ep.out);
            }
        }
        if ep.advance() {
            ep.out.ticks = tick + 1;
            return Ok(ep.out);
        }
    }
    ep.out.ticks = cfg.max_ticks;
    ep.fail(FailureMode::PlannerMiss);
    Ok(ep.out)
}

/// A scripted trial with an optional expected result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub scene: Scene,
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default)]
    pub expected: Option<ExpectedOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedOutcome {
    pub success: bool,
    #[serde(default)]
    pub failure_mode: Option<FailureMode>,
    #[serde(default)]
    pub regrounds: Option<u32>,
    #[serde(default)]
    pub detours: Option<u32>,
}

impl ExpectedOutcome {
    pub fn matches(&self, o: &EpisodeOutcome) -> bool {
        self.success == o.success
            && self.failure_mode == o.failure_mode
            && self.regrounds.is_none_or(|r| r == o.regrounds)
            && self.detours.is_none_or(|d| d == o.detours)
    }
}

/// Counts over a batch of episodes; rates are over all trials.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutcomeTable {
    pub trials: usize,
    pub successes: usize,
    pub grasps: usize,
    pub placements: usize,
    pub regrounds: u64,
    pub detours: u64,
    pub global_replans: usize,
    pub failures: BTreeMap<FailureMode, usize>,
}

impl OutcomeTable {
    pub fn add(&mut self, o: &EpisodeOutcome) {
        self.trials += 1;
        self.successes += o.success as usize;
        self.grasps += o.grasped as usize;
        self.placements += o.placed as usize;
        self.regrounds += o.regrounds as u64;
        self.detours += o.detours as u64;
        self.global_replans += o.replanned_globally as usize;
        if let Some(f) = o.failure_mode {
            *self.failures.entry(f).or_insert(0) += 1;
        }
    }

    fn pct(&self, n: usize) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            100.0 * n as f64 / self.trials as f64
        }
    }

    pub fn success_pct(&self) -> f64 {
        self.pct(self.successes)
    }

    pub fn grasp_pct(&self) -> f64 {
        self.pct(self.grasps)
    }

    pub fn placement_pct(&self) -> f64 {
        self.pct(self.placements)
    }
}

/// Knobs for [`random_events`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRates {
    pub slip: f64,
    pub obstacle: f64,
    /// Largest per-axis slip offset in cells.
    pub max_slip: i32,
    /// Events fire in ticks `0..horizon`.
    pub horizon: u32,
}

impl Default for EventRates {
    fn default() -> Self {
        Self {
            slip: 0.2,
            obstacle: 0.3,
            max_slip: 2,
            horizon: 8,
        }
    }
}

/// Seeded slip/obstacle script for `scene`; events always name cells inside
/// the workspace box.
pub fn random_events(scene: &Scene, rates: &EventRates, seed: u64) -> Vec<Event> {
    let mut rng = rng_from_seed(seed);
    let b = *scene.workspace.bounds();
    let clamp = |v: i32, lo: i32, hi: i32| v.max(lo).min(hi);
    let horizon = rates.horizon.max(1);
    let mut out = Vec::new();
    if rng.random::<f64>() < rates.slip {
        let s = rates.max_slip.max(0);
        let t = scene.target;
        let nt = LatticeCoord::new(
            clamp(t.x + rng.random_range(-s..=s), b.min.x, b.max.x),
            clamp(t.y + rng.random_range(-s..=s), b.min.y, b.max.y),
            t.z,
        );
        out.push(Event {
            step: rng.random_range(0..horizon),
            kind: EventKind::Slip { new_target: nt },
        });
    }
    if rng.random::<f64>() < rates.obstacle {
        let cells: Vec<LatticeCoord> = b.cells().collect();
        let cell = cells[rng.random_range(0..cells.len())];
        out.push(Event {
            step: rng.random_range(0..horizon),
            kind: EventKind::DynamicObstacle { cell },
        });
    }
    out.sort_by_key(|e| e.step);
    out
}
