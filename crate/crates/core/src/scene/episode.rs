use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::search::goal_distance_map;
use super::visibility::{object_visible, observe, open_candidate};
use super::{Observation, Pose, Scene, SceneError, TargetKind, TargetSpec};

pub const STEP_PENALTY: f64 = -0.01;
pub const ARRIVAL_BONUS: f64 = 0.01;
pub const SUCCESS_REWARD: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    MoveForward,
    MoveBack,
    MoveRight,
    MoveLeft,
    RotateRight,
    RotateLeft,
    LookUp,
    LookDown,
    Open,
    Stop,
}

impl Action {
    pub const COUNT: usize = 10;
    pub const ALL: [Action; Action::COUNT] = [
        Action::MoveForward,
        Action::MoveBack,
        Action::MoveRight,
        Action::MoveLeft,
        Action::RotateRight,
        Action::RotateLeft,
        Action::LookUp,
        Action::LookDown,
        Action::Open,
        Action::Stop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::MoveForward => "move_forward",
            Action::MoveBack => "move_back",
            Action::MoveRight => "move_right",
            Action::MoveLeft => "move_left",
            Action::RotateRight => "rotate_right",
            Action::RotateLeft => "rotate_left",
            Action::LookUp => "look_up",
            Action::LookDown => "look_down",
            Action::Open => "open",
            Action::Stop => "stop",
        }
    }

    pub fn parse(s: &str) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.name() == s)
    }

    /// The action undoing this one's pose change; `None` for open/stop.
    pub fn inverse(self) -> Option<Action> {
        Some(match self {
            Action::MoveForward => Action::MoveBack,
            Action::MoveBack => Action::MoveForward,
            Action::MoveRight => Action::MoveLeft,
            Action::MoveLeft => Action::MoveRight,
            Action::RotateRight => Action::RotateLeft,
            Action::RotateLeft => Action::RotateRight,
            Action::LookUp => Action::LookDown,
            Action::LookDown => Action::LookUp,
            Action::Open | Action::Stop => return None,
        })
    }

    pub fn is_move(self) -> bool {
        matches!(self, Action::MoveForward | Action::MoveBack | Action::MoveRight | Action::MoveLeft)
    }
}

/// Pose after a pose-changing action, or `None` when a move is blocked.
/// Open and stop leave the pose unchanged.
pub(crate) fn next_pose(scene: &Scene, pose: &Pose, action: Action) -> Option<Pose> {
    let (hx, hy) = pose.heading.delta();
    let shift = |dx: i32, dy: i32| {
        let cell = pose.cell.offset(dx, dy);
        scene.is_free(cell).then_some(Pose { cell, ..*pose })
    };
    match action {
        Action::MoveForward => shift(hx, hy),
        Action::MoveBack => shift(-hx, -hy),
        Action::MoveRight => shift(-hy, hx),
        Action::MoveLeft => shift(hy, -hx),
        Action::RotateRight => Some(Pose { heading: pose.heading.right(), ..*pose }),
        Action::RotateLeft => Some(Pose { heading: pose.heading.left(), ..*pose }),
        Action::LookUp => Some(Pose { pitch: pose.pitch.up(), ..*pose }),
        Action::LookDown => Some(Pose { pitch: pose.pitch.down(), ..*pose }),
        Action::Open | Action::Stop => Some(*pose),
    }
}

/// Outcome of a non-stop action on (pose, open receptacle), with auto-close applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Transition {
    pub pose: Pose,
    pub opened: Option<usize>,
    pub collided: bool,
    pub open_failed: bool,
}

pub(crate) fn transition(scene: &Scene, pose: &Pose, opened: Option<usize>, action: Action) -> Transition {
    // auto-close before anything but stop
    let opened = if action == Action::Stop { opened } else { None };
    match action {
        Action::Open => {
            let candidate = open_candidate(scene, pose);
            Transition { pose: *pose, opened: candidate, collided: false, open_failed: candidate.is_none() }
        }
        _ => match next_pose(scene, pose, action) {
            Some(p) => Transition { pose: p, opened, collided: false, open_failed: false },
            None => Transition { pose: *pose, opened, collided: true, open_failed: false },
        },
    }
}

/// Whether issuing stop at `pose` (with `opened` open) completes `target`.
pub(crate) fn stop_succeeds(scene: &Scene, target: &TargetSpec, pose: &Pose, opened: Option<usize>) -> bool {
    if !target.goal_poses.contains(pose) {
        return false;
    }
    match target.kind {
        TargetKind::Static => true,
        TargetKind::Actionable => {
            let container = scene.object(target.target_object_id).and_then(|o| o.container_id());
            opened.is_some()
                && opened == container
                && object_visible(scene, pose, target.target_object_id, opened)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Running,
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepInfo {
    pub collided: bool,
    pub open_failed: bool,
    pub first_arrival: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Episode limits shared by reset and step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeConfig {
    pub max_steps: u32,
    /// Minimum pose-graph distance between a start pose and every goal pose.
    pub min_start_distance: u32,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { max_steps: 5000, min_start_distance: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeState<'s> {
    scene: &'s Scene,
    target_index: usize,
    pub pose: Pose,
    pub steps: u32,
    pub max_steps: u32,
    pub opened_receptacle: Option<usize>,
    pub arrived: bool,
    pub collisions: u32,
    pub done: bool,
    pub outcome: Outcome,
}

impl<'s> EpisodeState<'s> {
    /// Starts an episode from an explicit pose; all receptacles closed.
    pub fn start_at(
        scene: &'s Scene,
        target_index: usize,
        pose: Pose,
        max_steps: u32,
    ) -> Result<(Self, Observation), SceneError> {
        if target_index >= scene.targets.len() {
            return Err(SceneError::BadTarget { index: target_index, count: scene.targets.len() });
        }
        if !scene.is_valid_pose(&pose) {
            return Err(SceneError::Validation(format!("start pose {pose} is not on a free cell")));
        }
        let state = EpisodeState {
            scene,
            target_index,
            pose,
            steps: 0,
            max_steps,
            opened_receptacle: None,
            arrived: false,
            collisions: 0,
            done: false,
            outcome: Outcome::Running,
        };
        let obs = observe(scene, &pose, None, false);
        Ok((state, obs))
    }

    /// Starts an episode at a pose drawn uniformly from those at least
    /// `config.min_start_distance` steps from every goal pose.
    pub fn reset(
        scene: &'s Scene,
        target_index: usize,
        rng_seed: u64,
        config: &EpisodeConfig,
    ) -> Result<(Self, Observation), SceneError> {
        let target = scene
            .targets
            .get(target_index)
            .ok_or(SceneError::BadTarget { index: target_index, count: scene.targets.len() })?;
        let candidates = start_candidates(scene, target, config.min_start_distance);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let pose = *candidates
            .choose(&mut rng)
            .ok_or(SceneError::NoStartPose { min_distance: config.min_start_distance })?;
        Self::start_at(scene, target_index, pose, config.max_steps)
    }

    pub fn scene(&self) -> &'s Scene {
        self.scene
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn target(&self) -> &'s TargetSpec {
        &self.scene.targets[self.target_index]
    }

    pub fn is_open(&self, object_id: usize) -> bool {
        self.opened_receptacle == Some(object_id)
    }

    pub fn observation(&self) -> Observation {
        observe(self.scene, &self.pose, self.opened_receptacle, false)
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, SceneError> {
        if self.done {
            return Err(SceneError::EpisodeFinished);
        }
        self.steps += 1;
        let mut reward = STEP_PENALTY;
        let t = transition(self.scene, &self.pose, self.opened_receptacle, action);
        self.pose = t.pose;
        self.opened_receptacle = t.opened;
        if t.collided {
            self.collisions += 1;
        }
        let target = self.target();
        let mut info = StepInfo { collided: t.collided, open_failed: t.open_failed, first_arrival: false };
        if !self.arrived && target.goal_poses.contains(&self.pose) {
            self.arrived = true;
            info.first_arrival = true;
            reward += ARRIVAL_BONUS;
        }
        if action == Action::Stop {
            self.done = true;
            if stop_succeeds(self.scene, target, &self.pose, self.opened_receptacle) {
                self.outcome = Outcome::Success;
                reward += SUCCESS_REWARD;
            } else {
                self.outcome = Outcome::Failure;
            }
        } else if self.steps >= self.max_steps {
            self.done = true;
            self.outcome = Outcome::Failure;
        }
        let observation = observe(self.scene, &self.pose, self.opened_receptacle, t.collided);
        Ok(StepResult { observation, reward, done: self.done, info })
    }
}

/// Poses from which a reset may start, in canonical pose order.
pub fn start_candidates(scene: &Scene, target: &TargetSpec, min_distance: u32) -> Vec<Pose> {
    let dist = goal_distance_map(scene, &target.goal_poses);
    let mut poses: Vec<Pose> = dist.into_iter().filter(|(_, d)| *d >= min_distance).map(|(p, _)| p).collect();
    poses.sort();
    poses
}
