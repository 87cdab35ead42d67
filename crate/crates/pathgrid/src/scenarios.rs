//! The shipped scenario pack and helpers to run scenario files.
//!
//! `pack()` builds the pack in code; `scenarios/pack.json` is its serialized
//! form and a unit test keeps the two in sync.

use std::path::Path;

use pathgrid_core::lattice::{CellBox, LatticeCoord as C, Workspace};
use pathgrid_core::twinsim::{
    run_episode, Container, EpisodeConfig, EpisodeOutcome, Event, EventKind, ExpectedOutcome, FailureMode,
    OutcomeTable, Planner, Scenario, Scene,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Path of the pack relative to this crate's root.
pub const PACK_FILE: &str = "scenarios/pack.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub scenarios: Vec<Scenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub name: String,
    pub outcome: EpisodeOutcome,
    /// `None` when the scenario carries no expectation.
    pub as_expected: Option<bool>,
}

fn desk() -> Workspace {
    Workspace::desk(5, 5, 3).expect("static")
}

fn scene(ee: C, target: C) -> Scene {
    Scene {
        workspace: desk(),
        end_effector: ee,
        target,
        container: None,
        dynamic_obstacles: Vec::new(),
    }
}

fn with_bin(mut s: Scene) -> Scene {
    s.container = Some(Container {
        region: CellBox::new(C::new(1, -2, 0), C::new(2, -1, 0)).expect("static"),
        drop: C::new(2, -2, 0),
    });
    s
}

fn ev(step: u32, kind: EventKind) -> Event {
    Event { step, kind }
}

fn ok(regrounds: u32, detours: u32) -> Option<ExpectedOutcome> {
    Some(ExpectedOutcome {
        success: true,
        failure_mode: None,
        regrounds: Some(regrounds),
        detours: Some(detours),
    })
}

fn fails(mode: FailureMode) -> Option<ExpectedOutcome> {
    Some(ExpectedOutcome {
        success: false,
        failure_mode: Some(mode),
        regrounds: None,
        detours: None,
    })
}

fn sc(name: &str, scene: Scene, events: Vec<Event>, expected: Option<ExpectedOutcome>) -> Scenario {
    Scenario {
        name: name.into(),
        scene,
        events,
        expected,
    }
}

/// The shipped pack. Names start with their category.
pub fn pack() -> Vec<Scenario> {
    let mut v = Vec::new();

    // Unperturbed.
    for (i, (a, b)) in [
        (C::new(-2, -2, 0), C::new(2, 2, 2)),
        (C::new(0, 0, 0), C::new(0, 0, 2)),
        (C::new(2, 2, 2), C::new(-2, -2, 0)),
        (C::new(-1, 2, 1), C::new(1, -2, 1)),
        (C::new(0, 0, 1), C::new(0, 0, 1)),
    ]
    .into_iter()
    .enumerate()
    {
        v.push(sc(&format!("unperturbed_{i}"), scene(a, b), vec![], ok(0, 0)));
    }
    v.push(sc(
        "unperturbed_bin_0",
        with_bin(scene(C::new(-2, 2, 0), C::new(-1, 1, 1))),
        vec![],
        ok(0, 0),
    ));
    v.push(sc(
        "unperturbed_bin_1",
        with_bin(scene(C::new(0, 2, 2), C::new(0, 0, 0))),
        vec![],
        ok(0, 0),
    ));
    let mut walled = scene(C::new(-2, 0, 0), C::new(2, 0, 0));
    walled.workspace = desk()
        .with_obstacles([C::new(0, -1, 0), C::new(0, 0, 0), C::new(0, 1, 0), C::new(0, 0, 1)])
        .expect("static");
    v.push(sc("unperturbed_static_wall", walled, vec![], ok(0, 0)));

    // Target slips during the approach.
    let slips = [
        (C::new(-2, 0, 0), C::new(2, 0, 0), 2, C::new(2, 2, 0)),
        (C::new(-2, 0, 0), C::new(2, 0, 0), 0, C::new(0, 0, 0)),
        (C::new(-2, -2, 1), C::new(2, 2, 1), 3, C::new(-1, 2, 1)),
        (C::new(0, -2, 0), C::new(0, 2, 2), 4, C::new(1, 1, 0)),
        (C::new(2, 2, 0), C::new(-2, -2, 0), 1, C::new(-2, 2, 2)),
    ];
    for (i, (a, b, step, nt)) in slips.into_iter().enumerate() {
        v.push(sc(
            &format!("slip_{i}"),
            scene(a, b),
            vec![ev(step, EventKind::Slip { new_target: nt })],
            ok(1, 0),
        ));
    }
    v.push(sc(
        "slip_bin",
        with_bin(scene(C::new(-2, 2, 0), C::new(0, 2, 0))),
        vec![ev(1, EventKind::Slip { new_target: C::new(-1, 0, 1) })],
        ok(1, 0),
    ));
    // Ignored: the object is already in the gripper.
    v.push(sc(
        "slip_after_grasp",
        with_bin(scene(C::new(-1, 2, 0), C::new(0, 2, 0))),
        vec![ev(3, EventKind::Slip { new_target: C::new(-2, -2, 0) })],
        ok(0, 0),
    ));
    // Rejected: the new cell lies outside the box.
    v.push(sc(
        "slip_out_of_box",
        scene(C::new(-2, 0, 0), C::new(2, 0, 0)),
        vec![ev(1, EventKind::Slip { new_target: C::new(3, 0, 0) })],
        ok(0, 0),
    ));
    let mut onto_wall = scene(C::new(-2, 0, 0), C::new(2, 0, 0));
    onto_wall.workspace = desk().with_obstacles([C::new(2, 2, 0)]).expect("static");
    v.push(sc(
        "slip_onto_obstacle",
        onto_wall,
        vec![ev(1, EventKind::Slip { new_target: C::new(2, 2, 0) })],
        fails(FailureMode::OcclusionCluster),
    ));

    // A cell on the route is blocked ahead of the effector.
    let detours = [
        (-2, 0, 1, 0, 1),
        (-2, 2, 0, 1, 2),
        (-2, -2, 2, 0, 0),
        (-2, 1, 1, 1, 1),
    ];
    for (i, (x0, y, z, xb, step)) in detours.into_iter().enumerate() {
        v.push(sc(
            &format!("detour_{i}"),
            scene(C::new(x0, y, z), C::new(2, y, z)),
            vec![ev(step, EventKind::DynamicObstacle { cell: C::new(xb, y, z) })],
            ok(0, 1),
        ));
    }
    let mut scheduled = scene(C::new(0, -2, 1), C::new(0, 2, 1));
    scheduled.dynamic_obstacles = vec![(C::new(0, 1, 1), 2)];
    v.push(sc("detour_scene_obstacle", scheduled, vec![], ok(0, 1)));
    v.push(sc(
        "detour_transport",
        with_bin(scene(C::new(2, 2, 0), C::new(2, 1, 0))),
        vec![ev(2, EventKind::DynamicObstacle { cell: C::new(2, 0, 0) })],
        ok(0, 1),
    ));
    v.push(sc(
        "detour_off_route",
        scene(C::new(-2, 0, 1), C::new(2, 0, 1)),
        vec![ev(1, EventKind::DynamicObstacle { cell: C::new(0, 2, 2) })],
        ok(0, 0),
    ));
    v.push(sc(
        "detour_after_slip",
        scene(C::new(-2, 0, 1), C::new(2, 1, 1)),
        vec![
            ev(1, EventKind::Slip { new_target: C::new(2, 0, 1) }),
            ev(2, EventKind::DynamicObstacle { cell: C::new(1, 0, 1) }),
        ],
        ok(1, 1),
    ));
    // The only way into the corner cell is cut; no local bypass exists.
    let mut pocket = scene(C::new(-2, -2, 0), C::new(2, 2, 0));
    pocket.workspace = desk().with_obstacles([C::new(2, 2, 1), C::new(1, 2, 0)]).expect("static");
    pocket.dynamic_obstacles = vec![(C::new(2, 1, 0), 3)];
    v.push(sc("detour_impossible", pocket, vec![], fails(FailureMode::OcclusionCluster)));

    // Scripted perception and manipulation failures.
    let scripted = [
        ("no_state", EventKind::NoState, FailureMode::NoState),
        ("nested_block", EventKind::GraspBlocked, FailureMode::NestedBlock),
        ("mis_id", EventKind::MisIdentified, FailureMode::MisId),
        ("mechanical_slip", EventKind::GripperSlip, FailureMode::MechanicalSlip),
    ];
    for (name, kind, mode) in scripted {
        v.push(sc(
            &format!("{name}_0"),
            scene(C::new(-2, 0, 0), C::new(2, 0, 0)),
            vec![ev(0, kind)],
            fails(mode),
        ));
        v.push(sc(
            &format!("{name}_1"),
            with_bin(scene(C::new(-2, 2, 2), C::new(0, 0, 0))),
            vec![ev(8, kind)],
            fails(mode),
        ));
    }
    v
}

pub fn load(path: &Path) -> Result<Vec<Scenario>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: ScenarioFile = serde_json::from_str(&text).map_err(|e| Error::Record {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    Ok(f.scenarios)
}

pub fn to_json(scenarios: &[Scenario]) -> String {
    let mut s = serde_json::to_string_pretty(&ScenarioFile {
        scenarios: scenarios.to_vec(),
    })
    .expect("scenarios serialize");
    s.push('\n');
    s
}

/// Run every scenario and tally the outcomes.
pub fn run_pack<P: Planner>(
    scenarios: &[Scenario],
    planner: &P,
    cfg: &EpisodeConfig,
) -> Result<(Vec<ScenarioResult>, OutcomeTable)> {
    let mut table = OutcomeTable::default();
    let mut results = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        let outcome = run_episode(&s.scene, planner, &s.events, cfg)?;
        table.add(&outcome);
        results.push(ScenarioResult {
            name: s.name.clone(),
            as_expected: s.expected.as_ref().map(|e| e.matches(&outcome)),
            outcome,
        });
    }
    Ok((results, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use pathgrid_core::decoder::validate_path;
    use pathgrid_core::twinsim::OraclePlanner;

    fn pack_path() -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join(PACK_FILE)
    }

    #[test]
    fn shipped_file_matches_builder() {
        let on_disk = std::fs::read_to_string(pack_path()).unwrap();
        assert_eq!(on_disk, to_json(&pack()), "regenerate scenarios/pack.json from scenarios::pack()");
        assert_eq!(load(&pack_path()).unwrap(), pack());
    }

    #[test]
    fn pack_covers_every_category() {
        let p = pack();
        assert!(p.len() >= 30);
        for prefix in ["unperturbed", "slip", "detour", "no_state", "nested_block", "mis_id", "mechanical_slip"] {
            assert!(p.iter().any(|s| s.name.starts_with(prefix)), "{prefix}");
        }
        assert!(p.iter().all(|s| s.expected.is_some()));
        let names: std::collections::BTreeSet<_> = p.iter().map(|s| &s.name).collect();
        assert_eq!(names.len(), p.len());
    }

    #[test]
    fn oracle_meets_every_expectation() {
        let p = pack();
        let (results, table) = run_pack(&p, &OraclePlanner, &EpisodeConfig::default()).unwrap();
        for (s, r) in p.iter().zip(&results) {
            assert_eq!(r.as_expected, Some(true), "{}: {:?}", s.name, r.outcome);
            assert!(validate_path(&r.outcome.executed, &s.scene.workspace).valid, "{}", s.name);
            assert!(!r.outcome.replanned_globally);
        }
        assert_eq!(table.trials, p.len());
        assert_eq!(table.global_replans, 0);
    }
}
