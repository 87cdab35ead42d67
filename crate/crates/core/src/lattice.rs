//! Integer lattice geometry.
//!
//! Cells are addressed by signed integer triples. A [`Workspace`] is an
//! axis-aligned box of cells minus an explicit obstacle set, plus the physical
//! edge length of one cell. Two cells are adjacent iff their Manhattan
//! distance is exactly one; the six unit moves are always enumerated in the
//! canonical order `+x, -x, +y, -y, +z, -z`, and that order doubles as the
//! move vocabulary of the model (with `Stop` appended as index 6).

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LatticeError {
    #[error("cell {0} is outside the workspace or blocked")]
    OutOfBounds(LatticeCoord),
    #[error("invalid bounds: {0}")]
    InvalidBounds(&'static str),
    #[error("resolution must be a positive finite number of millimetres, got {0}")]
    InvalidResolution(f64),
    #[error("obstacle {0} lies outside the workspace bounds")]
    ObstacleOutOfBounds(LatticeCoord),
    #[error("non-finite coordinate in voxelization input")]
    NonFinite,
    #[error("coordinate {0} mm does not fit the integer lattice")]
    Overflow(f64),
}

/// One lattice cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(from = "[i32; 3]", into = "[i32; 3]")]
pub struct LatticeCoord {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl LatticeCoord {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    pub fn offset(self, d: [i32; 3]) -> Self {
        Self::new(self.x + d[0], self.y + d[1], self.z + d[2])
    }

    pub fn axis(self, axis: usize) -> i32 {
        match axis {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("axis index {axis} out of range"),
        }
    }
}

impl From<[i32; 3]> for LatticeCoord {
    fn from(a: [i32; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl From<LatticeCoord> for [i32; 3] {
    fn from(c: LatticeCoord) -> Self {
        [c.x, c.y, c.z]
    }
}

impl fmt::Display for LatticeCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// L1 distance between two cells.
pub fn manhattan(a: LatticeCoord, b: LatticeCoord) -> u32 {
    a.x.abs_diff(b.x) + a.y.abs_diff(b.y) + a.z.abs_diff(b.z)
}

/// Move vocabulary: six unit steps in canonical order, then `Stop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Move {
    PlusX,
    MinusX,
    PlusY,
    MinusY,
    PlusZ,
    MinusZ,
    Stop,
}

/// Size of the move vocabulary (six steps + STOP).
pub const MOVE_VOCAB: usize = 7;
/// Index of `Stop` in the vocabulary.
pub const STOP_INDEX: usize = 6;

impl Move {
    pub const ALL: [Move; MOVE_VOCAB] = [
        Move::PlusX,
        Move::MinusX,
        Move::PlusY,
        Move::MinusY,
        Move::PlusZ,
        Move::MinusZ,
        Move::Stop,
    ];

    pub const STEPS: [Move; 6] = [
        Move::PlusX,
        Move::MinusX,
        Move::PlusY,
        Move::MinusY,
        Move::PlusZ,
        Move::MinusZ,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Move> {
        Move::ALL.get(i).copied()
    }

    /// Unit offset of the move; `Stop` is the zero offset.
    pub fn delta(self) -> [i32; 3] {
        match self {
            Move::PlusX => [1, 0, 0],
            Move::MinusX => [-1, 0, 0],
            Move::PlusY => [0, 1, 0],
            Move::MinusY => [0, -1, 0],
            Move::PlusZ => [0, 0, 1],
            Move::MinusZ => [0, 0, -1],
            Move::Stop => [0, 0, 0],
        }
    }

    /// The unit move taking `from` to `to`, if they are adjacent.
    pub fn between(from: LatticeCoord, to: LatticeCoord) -> Option<Move> {
        let d = [to.x - from.x, to.y - from.y, to.z - from.z];
        Move::STEPS.into_iter().find(|m| m.delta() == d)
    }

    pub fn apply(self, p: LatticeCoord) -> LatticeCoord {
        p.offset(self.delta())
    }
}

/// Inclusive axis-aligned box of cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellBox {
    pub min: LatticeCoord,
    pub max: LatticeCoord,
}

impl CellBox {
    pub fn new(min: LatticeCoord, max: LatticeCoord) -> Result<Self, LatticeError> {
        if min.x > max.x || min.y > max.y || min.z > max.z {
            return Err(LatticeError::InvalidBounds("min exceeds max on some axis"));
        }
        Ok(Self { min, max })
    }

    /// Box of the given extents anchored so that x and y are centred on zero
    /// and z starts at zero, mirroring a base-centred arm frame.
    pub fn centered(nx: u32, ny: u32, nz: u32) -> Result<Self, LatticeError> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(LatticeError::InvalidBounds("extents must be positive"));
        }
        let lo = |n: u32| -((n as i32 - 1) / 2);
        let min = LatticeCoord::new(lo(nx), lo(ny), 0);
        let max = LatticeCoord::new(min.x + nx as i32 - 1, min.y + ny as i32 - 1, nz as i32 - 1);
        Self::new(min, max)
    }

    pub fn contains(&self, p: LatticeCoord) -> bool {
        (self.min.x..=self.max.x).contains(&p.x)
            && (self.min.y..=self.max.y).contains(&p.y)
            && (self.min.z..=self.max.z).contains(&p.z)
    }

    /// Number of cells along each axis.
    pub fn extents(&self) -> [usize; 3] {
        [
            (self.max.x - self.min.x) as usize + 1,
            (self.max.y - self.min.y) as usize + 1,
            (self.max.z - self.min.z) as usize + 1,
        ]
    }

    pub fn volume(&self) -> usize {
        let [a, b, c] = self.extents();
        a * b * c
    }

    /// Row-major (x outermost) index of an in-box cell.
    pub fn linear_index(&self, p: LatticeCoord) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let [_, ny, nz] = self.extents();
        let (x, y, z) = (
            (p.x - self.min.x) as usize,
            (p.y - self.min.y) as usize,
            (p.z - self.min.z) as usize,
        );
        Some((x * ny + y) * nz + z)
    }

    /// All cells, x outermost, z innermost.
    pub fn cells(&self) -> impl Iterator<Item = LatticeCoord> + '_ {
        (self.min.x..=self.max.x).flat_map(move |x| {
            (self.min.y..=self.max.y)
                .flat_map(move |y| (self.min.z..=self.max.z).map(move |z| LatticeCoord::new(x, y, z)))
        })
    }

    /// True when the cell lies on an outer face of the box.
    pub fn on_boundary(&self, p: LatticeCoord) -> bool {
        self.contains(p)
            && (p.x == self.min.x
                || p.x == self.max.x
                || p.y == self.min.y
                || p.y == self.max.y
                || p.z == self.min.z
                || p.z == self.max.z)
    }
}

/// Bounded legal region: a box of cells minus obstacles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorkspaceRepr", into = "WorkspaceRepr")]
pub struct Workspace {
    bounds: CellBox,
    obstacles: BTreeSet<LatticeCoord>,
    resolution_mm: f64,
}

/// Millimetres per cell used throughout.
pub const DEFAULT_RESOLUTION_MM: f64 = 20.0;

impl Workspace {
    pub fn new(bounds: CellBox, resolution_mm: f64) -> Result<Self, LatticeError> {
        if !(resolution_mm.is_finite() && resolution_mm > 0.0) {
            return Err(LatticeError::InvalidResolution(resolution_mm));
        }
        Ok(Self {
            bounds,
            obstacles: BTreeSet::new(),
            resolution_mm,
        })
    }

    /// Full reach envelope: x, y in [-22, 22] and z in [0, 34] at 20 mm.
    pub fn reach_envelope() -> Self {
        let bounds = CellBox {
            min: LatticeCoord::new(-22, -22, 0),
            max: LatticeCoord::new(22, 22, 34),
        };
        Self::new(bounds, DEFAULT_RESOLUTION_MM).expect("static bounds are valid")
    }

    /// Base-centred desk-scale sub-box, e.g. `desk(7, 7, 5)`.
    pub fn desk(nx: u32, ny: u32, nz: u32) -> Result<Self, LatticeError> {
        Self::new(CellBox::centered(nx, ny, nz)?, DEFAULT_RESOLUTION_MM)
    }

    pub fn with_obstacles<I>(mut self, cells: I) -> Result<Self, LatticeError>
    where
        I: IntoIterator<Item = LatticeCoord>,
    {
        for c in cells {
            self.add_obstacle(c)?;
        }
        Ok(self)
    }

    pub fn add_obstacle(&mut self, c: LatticeCoord) -> Result<(), LatticeError> {
        if !self.bounds.contains(c) {
            return Err(LatticeError::ObstacleOutOfBounds(c));
        }
        self.obstacles.insert(c);
        Ok(())
    }

    pub fn remove_obstacle(&mut self, c: LatticeCoord) -> bool {
        self.obstacles.remove(&c)
    }

    pub fn bounds(&self) -> &CellBox {
        &self.bounds
    }

    pub fn obstacles(&self) -> &BTreeSet<LatticeCoord> {
        &self.obstacles
    }

    pub fn is_obstacle(&self, c: LatticeCoord) -> bool {
        self.obstacles.contains(&c)
    }

    pub fn resolution_mm(&self) -> f64 {
        self.resolution_mm
    }

    /// Number of cells that are inside the box and not blocked.
    pub fn free_cell_count(&self) -> usize {
        self.bounds.volume() - self.obstacles.len()
    }
}

#[derive(Serialize, Deserialize)]
struct WorkspaceRepr {
    x_min: i32,
    x_max: i32,
    y_min: i32,
    y_max: i32,
    z_min: i32,
    z_max: i32,
    resolution_mm: f64,
    obstacles: Vec<LatticeCoord>,
}

impl TryFrom<WorkspaceRepr> for Workspace {
    type Error = LatticeError;

    fn try_from(r: WorkspaceRepr) -> Result<Self, Self::Error> {
        let bounds = CellBox::new(
            LatticeCoord::new(r.x_min, r.y_min, r.z_min),
            LatticeCoord::new(r.x_max, r.y_max, r.z_max),
        )?;
        Workspace::new(bounds, r.resolution_mm)?.with_obstacles(r.obstacles)
    }
}

impl From<Workspace> for WorkspaceRepr {
    fn from(w: Workspace) -> Self {
        let b = w.bounds;
        Self {
            x_min: b.min.x,
            x_max: b.max.x,
            y_min: b.min.y,
            y_max: b.max.y,
            z_min: b.min.z,
            z_max: b.max.z,
            resolution_mm: w.resolution_mm,
            obstacles: w.obstacles.into_iter().collect(),
        }
    }
}

/// Inside the axis ranges and not an obstacle.
pub fn in_bounds(p: LatticeCoord, w: &Workspace) -> bool {
    w.bounds.contains(p) && !w.obstacles.contains(&p)
}

/// Legal successors of `p` in canonical move order.
pub fn neighbors(p: LatticeCoord, w: &Workspace) -> Result<Vec<LatticeCoord>, LatticeError> {
    if !in_bounds(p, w) {
        return Err(LatticeError::OutOfBounds(p));
    }
    Ok(Move::STEPS
        .iter()
        .map(|m| m.apply(p))
        .filter(|u| in_bounds(*u, w))
        .collect())
}

/// Legality of each vocabulary entry at `p`; `Stop` is always legal.
///
/// Unlike [`neighbors`] this does not require `p` itself to be legal, which
/// lets callers build masks for arbitrary states.
pub fn move_mask(p: LatticeCoord, w: &Workspace) -> [bool; MOVE_VOCAB] {
    let mut mask = [false; MOVE_VOCAB];
    for m in Move::STEPS {
        mask[m.index()] = in_bounds(m.apply(p), w);
    }
    mask[STOP_INDEX] = true;
    mask
}

/// Map a point in millimetres onto its cell (floor per axis).
pub fn voxelize(point_mm: [f64; 3], w: &Workspace) -> Result<LatticeCoord, LatticeError> {
    let mut out = [0i32; 3];
    for (o, v) in out.iter_mut().zip(point_mm) {
        if !v.is_finite() {
            return Err(LatticeError::NonFinite);
        }
        let cell = libm::floor(v / w.resolution_mm);
        if cell < i32::MIN as f64 || cell > i32::MAX as f64 {
            return Err(LatticeError::Overflow(v));
        }
        *o = cell as i32;
    }
    Ok(out.into())
}

/// Centre of a cell in millimetres.
pub fn cell_center(c: LatticeCoord, w: &Workspace) -> [f64; 3] {
    let r = w.resolution_mm;
    [
        (c.x as f64 + 0.5) * r,
        (c.y as f64 + 0.5) * r,
        (c.z as f64 + 0.5) * r,
    ]
}
