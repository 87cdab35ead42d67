//! Task DAG and the context features it compiles to.
//!
//! A [`TaskGraph`] is a DAG over manipulation primitives with `pre -> post`
//! dependency edges. [`build_context`] turns one active node of the graph into
//! a fixed-width feature vector:
//!
//! ```text
//! [ one-hot(kind) x6 | depth / max_depth | unsatisfied predecessors | length hint / max_len ]
//! ```
//!
//! The temporal ("when") part of the representation is not a data structure
//! here: it is the position index and causal mask inside the model.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::LatticeCoord;

pub type NodeId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskGraphError {
    #[error("edge references missing node {0}")]
    DanglingEdge(NodeId),
    #[error("duplicate node id {0}")]
    DuplicateId(NodeId),
    #[error("task graph contains a directed cycle")]
    Cycle,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("max_len must be positive")]
    ZeroMaxLen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reach,
    Grasp,
    Lift,
    Transport,
    Place,
    Release,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Reach,
        TaskKind::Grasp,
        TaskKind::Lift,
        TaskKind::Transport,
        TaskKind::Place,
        TaskKind::Release,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Width of the vector produced by [`build_context`].
pub const CONTEXT_WIDTH: usize = TaskKind::ALL.len() + 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskNode {
    pub id: NodeId,
    pub kind: TaskKind,
    /// Free-form annotations (action labels, step indices, tags).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, f64>,
}

impl TaskNode {
    pub fn new(id: NodeId, kind: TaskKind) -> Self {
        Self {
            id,
            kind,
            attributes: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskGraph {
    pub nodes: Vec<TaskNode>,
    pub edges: Vec<(NodeId, NodeId)>,
}

impl TaskGraph {
    /// Linear chain over `kinds`, ids 0..n.
    pub fn chain(kinds: &[TaskKind]) -> Self {
        let nodes = kinds
            .iter()
            .enumerate()
            .map(|(i, k)| TaskNode::new(i as NodeId, *k))
            .collect();
        let edges = (1..kinds.len() as NodeId).map(|i| (i - 1, i)).collect();
        Self { nodes, edges }
    }

    pub fn reach_only() -> Self {
        Self::chain(&[TaskKind::Reach])
    }

    pub fn pick_and_place() -> Self {
        Self::chain(&[TaskKind::Reach, TaskKind::Grasp, TaskKind::Lift, TaskKind::Place])
    }

    pub fn node(&self, id: NodeId) -> Option<&TaskNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    fn check_structure(&self) -> Result<(), TaskGraphError> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                return Err(TaskGraphError::DuplicateId(n.id));
            }
        }
        for &(a, b) in &self.edges {
            for id in [a, b] {
                if !seen.contains(&id) {
                    return Err(TaskGraphError::DanglingEdge(id));
                }
            }
        }
        Ok(())
    }

    /// Kahn's algorithm, smallest ready id first. `None` if a cycle remains.
    fn kahn(&self) -> Option<Vec<NodeId>> {
        let mut indegree: BTreeMap<NodeId, usize> = self.nodes.iter().map(|n| (n.id, 0)).collect();
        let mut succ: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for &(a, b) in &self.edges {
            *indegree.get_mut(&b).expect("checked") += 1;
            succ.entry(a).or_default().push(b);
        }
        let mut ready: BTreeSet<NodeId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = ready.pop_first() {
            order.push(id);
            for s in succ.get(&id).into_iter().flatten() {
                let d = indegree.get_mut(s).expect("checked");
                *d -= 1;
                if *d == 0 {
                    ready.insert(*s);
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }

    /// Longest-path depth of every node, in edges from a root.
    fn depths(&self) -> Result<BTreeMap<NodeId, usize>, TaskGraphError> {
        let order = topological_order(self)?;
        let mut depth: BTreeMap<NodeId, usize> = order.iter().map(|id| (*id, 0)).collect();
        for id in order {
            let d = depth[&id];
            for &(a, b) in &self.edges {
                if a == id {
                    let e = depth.get_mut(&b).expect("checked");
                    *e = (*e).max(d + 1);
                }
            }
        }
        Ok(depth)
    }
}

/// `Ok(true)` iff the edge relation is acyclic.
pub fn validate_dag(g: &TaskGraph) -> Result<bool, TaskGraphError> {
    g.check_structure()?;
    Ok(g.kahn().is_some())
}

/// Topological order with ties broken by ascending id.
pub fn topological_order(g: &TaskGraph) -> Result<Vec<NodeId>, TaskGraphError> {
    g.check_structure()?;
    g.kahn().ok_or(TaskGraphError::Cycle)
}

/// Per-trajectory context consumed by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskContext {
    pub features: Vec<f64>,
    pub active_kind: TaskKind,
    pub sequence_length_hint: u32,
    /// Goal cell of the active sub-task, when known.
    #[serde(default)]
    pub target: Option<LatticeCoord>,
}

impl TaskContext {
    pub fn with_target(mut self, target: LatticeCoord) -> Self {
        self.target = Some(target);
        self
    }
}

/// Compile the active node of `g` into a [`TaskContext`].
///
/// `done` lists completed node ids; `length_hint` is the expected path length
/// in points and is normalised by `max_len`.
pub fn build_context(
    g: &TaskGraph,
    active_id: NodeId,
    done: &[NodeId],
    length_hint: u32,
    max_len: u32,
) -> Result<TaskContext, TaskGraphError> {
    if max_len == 0 {
        return Err(TaskGraphError::ZeroMaxLen);
    }
    let node = g.node(active_id).ok_or(TaskGraphError::UnknownNode(active_id))?;
    let depths = g.depths()?;
    let max_depth = depths.values().copied().max().unwrap_or(0);
    let depth = if max_depth == 0 {
        0.0
    } else {
        depths[&active_id] as f64 / max_depth as f64
    };
    let unsatisfied = g
        .edges
        .iter()
        .filter(|(a, b)| *b == active_id && !done.contains(a))
        .count();

    let mut features = vec![0.0; CONTEXT_WIDTH];
    features[node.kind.index()] = 1.0;
    features[6] = depth;
    features[7] = unsatisfied as f64;
    features[8] = length_hint as f64 / max_len as f64;
    Ok(TaskContext {
        features,
        active_kind: node.kind,
        sequence_length_hint: length_hint,
        target: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn diamond() -> TaskGraph {
        TaskGraph {
            nodes: (0..4).map(|i| TaskNode::new(i, TaskKind::Reach)).collect(),
            edges: vec![(0, 1), (0, 2), (1, 3), (2, 3)],
        }
    }

    fn grasp_lift_place() -> TaskGraph {
        TaskGraph::chain(&[TaskKind::Grasp, TaskKind::Lift, TaskKind::Place])
    }

    #[test]
    fn dag_validation() {
        assert_eq!(validate_dag(&grasp_lift_place()), Ok(true));
        assert_eq!(validate_dag(&TaskGraph::reach_only()), Ok(true));
        let mut cyc = TaskGraph::chain(&[TaskKind::Grasp, TaskKind::Lift]);
        cyc.edges.push((1, 0));
        assert_eq!(validate_dag(&cyc), Ok(false));
        let mut dangling = grasp_lift_place();
        dangling.edges.push((2, 9));
        assert_eq!(validate_dag(&dangling), Err(TaskGraphError::DanglingEdge(9)));
    }

    #[test]
    fn topo_examples() {
        assert_eq!(topological_order(&grasp_lift_place()).unwrap(), vec![0, 1, 2]);
        let two = TaskGraph {
            nodes: vec![TaskNode::new(3, TaskKind::Reach), TaskNode::new(1, TaskKind::Grasp)],
            edges: vec![],
        };
        assert_eq!(topological_order(&two).unwrap(), vec![1, 3]);
        assert_eq!(topological_order(&diamond()).unwrap(), vec![0, 1, 2, 3]);
        let mut cyc = diamond();
        cyc.edges.push((3, 0));
        assert_eq!(topological_order(&cyc), Err(TaskGraphError::Cycle));
    }

    #[test]
    fn context_examples() {
        let g = grasp_lift_place();
        let root = build_context(&g, 0, &[], 4, 16).unwrap();
        assert_eq!(&root.features[..6], &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(root.features[6], 0.0);
        assert_eq!(root.features[7], 0.0);
        assert_eq!(root.features[8], 0.25);

        let place = build_context(&g, 2, &[1, 0], 4, 16).unwrap();
        assert_eq!(place.active_kind, TaskKind::Place);
        assert_eq!(place.features[TaskKind::Place.index()], 1.0);
        assert_eq!(place.features[6], 1.0);
        assert_eq!(place.features[7], 0.0);

        let d = build_context(&diamond(), 3, &[1], 4, 16).unwrap();
        assert_eq!(d.features[7], 1.0);
        assert_eq!(d.features[6], 1.0);

        assert_eq!(build_context(&g, 7, &[], 4, 16), Err(TaskGraphError::UnknownNode(7)));
    }

    fn random_dag() -> impl Strategy<Value = TaskGraph> {
        (1usize..8, proptest::collection::vec((0usize..8, 0usize..8), 0..16)).prop_map(|(n, pairs)| {
            let nodes = (0..n).map(|i| TaskNode::new((i * 3 % 11) as NodeId, TaskKind::ALL[i % 6])).collect::<Vec<_>>();
            // Orient edges from lower to higher position so the graph stays acyclic.
            let edges = pairs
                .into_iter()
                .filter(|(a, b)| a < b && *b < n)
                .map(|(a, b)| (nodes[a].id, nodes[b].id))
                .collect();
            TaskGraph { nodes, edges }
        })
    }

    proptest! {
        #[test]
        fn topo_is_edge_respecting_permutation(g in random_dag()) {
            let order = topological_order(&g).unwrap();
            let mut sorted = order.clone();
            sorted.sort();
            let mut ids: Vec<_> = g.nodes.iter().map(|n| n.id).collect();
            ids.sort();
            prop_assert_eq!(sorted, ids);
            for (a, b) in &g.edges {
                let pa = order.iter().position(|x| x == a).unwrap();
                let pb = order.iter().position(|x| x == b).unwrap();
                prop_assert!(pa < pb);
            }
        }

        #[test]
        fn context_is_deterministic_and_fixed_width(g in random_dag(), pick in 0usize..8) {
            let id = g.nodes[pick % g.nodes.len()].id;
            let a = build_context(&g, id, &[], 3, 10).unwrap();
            let b = build_context(&g, id, &[], 3, 10).unwrap();
            prop_assert_eq!(a.features.len(), CONTEXT_WIDTH);
            prop_assert_eq!(a, b);
        }
    }
}
