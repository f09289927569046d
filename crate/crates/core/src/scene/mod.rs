//! Symbolic indoor scenes: grid, walls, objects, receptacles and navigation targets.
//!
//! A [`Scene`] is immutable once loaded and may be shared between workers.
//! Everything that changes during an episode (agent pose, the currently open
//! receptacle, counters) lives in [`EpisodeState`].

mod episode;
mod format;
mod generate;
mod search;
mod visibility;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

pub use episode::{
    start_candidates, Action, EpisodeConfig, EpisodeState, Outcome, StepInfo, StepResult, ARRIVAL_BONUS, STEP_PENALTY,
    SUCCESS_REWARD,
};
pub(crate) use episode::next_pose;
pub use format::{load_scene, save_scene};
pub use generate::{default_vocabulary, generate_scene, CategoryInfo, GeneratorConfig};
pub use search::{goal_distance_map, shortest_path_length};
pub use visibility::{observe, visible_instances, Direction, Observation, SeenInstance, VisibleEntry};

/// Visibility radius in meters.
pub const VISIBILITY_RADIUS_M: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("line {line}: field `{field}`: {msg}")]
    Parse { line: usize, field: String, msg: String },
    #[error("invalid scene: {0}")]
    Validation(String),
    #[error("infeasible generator parameters: {0}")]
    Infeasible(String),
    #[error("target index {index} out of range ({count} targets)")]
    BadTarget { index: usize, count: usize },
    #[error("no start pose is at least {min_distance} steps from the goal")]
    NoStartPose { min_distance: u32 },
    #[error("target is unreachable from the start pose")]
    Unreachable,
    #[error("episode already finished")]
    EpisodeFinished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Cell {
        Cell::new(self.x + dx, self.y + dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    /// Unit step in grid coordinates; y grows southwards.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Heading::N => (0, -1),
            Heading::E => (1, 0),
            Heading::S => (0, 1),
            Heading::W => (-1, 0),
        }
    }

    pub fn right(self) -> Heading {
        match self {
            Heading::N => Heading::E,
            Heading::E => Heading::S,
            Heading::S => Heading::W,
            Heading::W => Heading::N,
        }
    }

    pub fn left(self) -> Heading {
        self.right().right().right()
    }

    pub fn name(self) -> &'static str {
        match self {
            Heading::N => "N",
            Heading::E => "E",
            Heading::S => "S",
            Heading::W => "W",
        }
    }

    pub fn parse(s: &str) -> Option<Heading> {
        Heading::ALL.into_iter().find(|h| h.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pitch {
    Down,
    Level,
    Up,
}

impl Pitch {
    pub const ALL: [Pitch; 3] = [Pitch::Down, Pitch::Level, Pitch::Up];

    pub fn up(self) -> Pitch {
        match self {
            Pitch::Down => Pitch::Level,
            _ => Pitch::Up,
        }
    }

    pub fn down(self) -> Pitch {
        match self {
            Pitch::Up => Pitch::Level,
            _ => Pitch::Down,
        }
    }

    /// The height band the camera sees at this pitch.
    pub fn sees(self) -> HeightLevel {
        match self {
            Pitch::Down => HeightLevel::Floor,
            Pitch::Level => HeightLevel::Counter,
            Pitch::Up => HeightLevel::High,
        }
    }

    pub fn for_level(level: HeightLevel) -> Pitch {
        match level {
            HeightLevel::Floor => Pitch::Down,
            HeightLevel::Counter => Pitch::Level,
            HeightLevel::High => Pitch::Up,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pitch::Down => "down",
            Pitch::Level => "level",
            Pitch::Up => "up",
        }
    }

    pub fn parse(s: &str) -> Option<Pitch> {
        Pitch::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeightLevel {
    Floor,
    Counter,
    High,
}

impl HeightLevel {
    pub const ALL: [HeightLevel; 3] = [HeightLevel::Floor, HeightLevel::Counter, HeightLevel::High];

    pub fn name(self) -> &'static str {
        match self {
            HeightLevel::Floor => "floor",
            HeightLevel::Counter => "counter",
            HeightLevel::High => "high",
        }
    }

    pub fn parse(s: &str) -> Option<HeightLevel> {
        HeightLevel::ALL.into_iter().find(|h| h.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pose {
    pub cell: Cell,
    pub heading: Heading,
    pub pitch: Pitch,
}

impl Pose {
    pub fn new(x: i32, y: i32, heading: Heading, pitch: Pitch) -> Self {
        Pose { cell: Cell::new(x, y), heading, pitch }
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.cell.x, self.cell.y, self.heading.name(), self.pitch.name())
    }
}

/// Where an object sits: on its own cell or inside a receptacle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    At(Cell),
    Inside(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectInstance {
    pub id: usize,
    pub category: usize,
    pub placement: Placement,
    pub height_level: HeightLevel,
    pub openable: bool,
    pub pickupable: bool,
    pub blocks_movement: bool,
}

impl ObjectInstance {
    pub fn container_id(&self) -> Option<usize> {
        match self.placement {
            Placement::Inside(c) => Some(c),
            Placement::At(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetKind {
    Static,
    Actionable,
}

impl TargetKind {
    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Static => "static",
            TargetKind::Actionable => "actionable",
        }
    }
}

/// Whether a target is used for training or held out for unseen-target evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetRole {
    Train,
    Holdout,
}

impl TargetRole {
    pub fn name(self) -> &'static str {
        match self {
            TargetRole::Train => "train",
            TargetRole::Holdout => "holdout",
        }
    }

    pub fn parse(s: &str) -> Option<TargetRole> {
        match s {
            "train" => Some(TargetRole::Train),
            "holdout" => Some(TargetRole::Holdout),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub target_object_id: usize,
    pub kind: TargetKind,
    pub role: TargetRole,
    /// Every pose from which a stop counts as arriving (sorted).
    pub goal_poses: BTreeSet<Pose>,
    /// The pose where `target_observation` was recorded.
    pub view_pose: Pose,
    /// What the agent sees at `view_pose`; the "target image".
    pub target_observation: Observation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: i32,
    pub height: i32,
    pub grid_step: f64,
    pub seed: u64,
    pub walls: BTreeSet<Cell>,
    pub objects: Vec<ObjectInstance>,
    pub vocabulary: Vec<String>,
    pub targets: Vec<TargetSpec>,
}

/// Target declaration before goal poses are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetDecl {
    pub object_id: usize,
    pub role: TargetRole,
}

impl Scene {
    /// Validates the raw parts and derives goal poses and target observations.
    pub fn build(
        width: i32,
        height: i32,
        grid_step: f64,
        seed: u64,
        vocabulary: Vec<String>,
        walls: BTreeSet<Cell>,
        objects: Vec<ObjectInstance>,
        targets: &[TargetDecl],
    ) -> Result<Scene, SceneError> {
        let mut scene = Scene {
            width,
            height,
            grid_step,
            seed,
            walls,
            objects,
            vocabulary,
            targets: Vec::new(),
        };
        scene.validate_layout()?;
        let mut specs = Vec::with_capacity(targets.len());
        for decl in targets {
            specs.push(scene.derive_target(*decl)?);
        }
        scene.targets = specs;
        Ok(scene)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && c.x < self.width && c.y < self.height
    }

    pub fn object(&self, id: usize) -> Option<&ObjectInstance> {
        self.objects.get(id).filter(|o| o.id == id)
    }

    /// The cell an object occupies, following containment.
    pub fn object_cell(&self, id: usize) -> Option<Cell> {
        let mut current = self.object(id)?;
        // containment chains are rejected by validation, but bound the walk anyway
        for _ in 0..=self.objects.len() {
            match current.placement {
                Placement::At(c) => return Some(c),
                Placement::Inside(parent) => current = self.object(parent)?,
            }
        }
        None
    }

    /// A cell the agent may stand on.
    pub fn is_free(&self, c: Cell) -> bool {
        self.in_bounds(c)
            && !self.walls.contains(&c)
            && !self
                .objects
                .iter()
                .any(|o| o.blocks_movement && o.placement == Placement::At(c))
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x, y);
                if self.is_free(c) {
                    cells.push(c);
                }
            }
        }
        cells
    }

    /// All valid agent poses in a fixed order (y, x, heading, pitch).
    pub fn all_poses(&self) -> Vec<Pose> {
        let mut poses = Vec::new();
        for c in self.free_cells() {
            for h in Heading::ALL {
                for p in Pitch::ALL {
                    poses.push(Pose { cell: c, heading: h, pitch: p });
                }
            }
        }
        poses
    }

    pub fn is_valid_pose(&self, pose: &Pose) -> bool {
        self.is_free(pose.cell)
    }

    fn validate_layout(&self) -> Result<(), SceneError> {
        let fail = |m: String| Err(SceneError::Validation(m));
        if self.width < 1 || self.height < 1 {
            return fail(format!("grid must be at least 1x1, got {}x{}", self.width, self.height));
        }
        if !(self.grid_step.is_finite() && self.grid_step > 0.0) {
            return fail(format!("grid_step must be positive, got {}", self.grid_step));
        }
        if self.vocabulary.is_empty() {
            return fail("vocabulary is empty".into());
        }
        let mut names = BTreeSet::new();
        for name in &self.vocabulary {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return fail(format!("vocabulary entry {name:?} must be a non-empty token"));
            }
            if !names.insert(name) {
                return fail(format!("duplicate vocabulary entry {name}"));
            }
        }
        for w in &self.walls {
            if !self.in_bounds(*w) {
                return fail(format!("wall ({}, {}) is out of bounds", w.x, w.y));
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.id != i {
                return fail(format!("object ids must be 0..n in order; found id {} at position {i}", o.id));
            }
            if o.category >= self.vocabulary.len() {
                return fail(format!(
                    "object {} has vocabulary index {} but |V| = {}",
                    o.id,
                    o.category,
                    self.vocabulary.len()
                ));
            }
            match o.placement {
                Placement::At(c) => {
                    if !self.in_bounds(c) {
                        return fail(format!("object {} cell ({}, {}) is out of bounds", o.id, c.x, c.y));
                    }
                    if self.walls.contains(&c) {
                        return fail(format!("object {} sits on a wall at ({}, {})", o.id, c.x, c.y));
                    }
                }
                Placement::Inside(cid) => {
                    let Some(container) = self.objects.get(cid) else {
                        return fail(format!("object {} is inside unknown object {cid}", o.id));
                    };
                    if cid == o.id {
                        return fail(format!("object {} contains itself", o.id));
                    }
                    if !container.openable {
                        return fail(format!("object {} is inside object {cid}, which is not openable", o.id));
                    }
                    if container.container_id().is_some() {
                        return fail(format!("object {cid} is nested inside another receptacle"));
                    }
                    if container.height_level != o.height_level {
                        return fail(format!(
                            "object {} height level differs from its container {cid}",
                            o.id
                        ));
                    }
                    if o.openable {
                        return fail(format!("contained object {} cannot itself be openable", o.id));
                    }
                }
            }
        }
        if self.free_cells().is_empty() {
            return fail("scene has no free cell for the agent".into());
        }
        Ok(())
    }

    fn derive_target(&self, decl: TargetDecl) -> Result<TargetSpec, SceneError> {
        let Some(object) = self.object(decl.object_id) else {
            return Err(SceneError::Validation(format!("target references unknown object {}", decl.object_id)));
        };
        let kind = if object.container_id().is_some() { TargetKind::Actionable } else { TargetKind::Static };
        let goal_poses = visibility::compute_goal_poses(self, object);
        if goal_poses.is_empty() {
            return Err(SceneError::Validation(format!(
                "target object {} is not visible from any pose",
                decl.object_id
            )));
        }
        let target_cell = self.object_cell(decl.object_id).expect("validated placement");
        // designated view: closest, most centred goal pose, then pose order
        let view_pose = *goal_poses
            .iter()
            .min_by_key(|p| {
                let (dx, dy) = (target_cell.x - p.cell.x, target_cell.y - p.cell.y);
                let (hx, hy) = p.heading.delta();
                let lateral = (dx * hy - dy * hx).abs();
                (dx * dx + dy * dy, lateral, **p)
            })
            .expect("nonempty");
        let open = match kind {
            TargetKind::Actionable => object.container_id(),
            TargetKind::Static => None,
        };
        let target_observation = observe(self, &view_pose, open, false);
        Ok(TargetSpec {
            target_object_id: decl.object_id,
            kind,
            role: decl.role,
            goal_poses,
            view_pose,
            target_observation,
        })
    }
}
