//! Demonstrations built by walking away from a goal pose and reversing the walk.
//!
//! The reverse walk uses move_back, move_left and rotate_right in that order of
//! priority; with probability `epsilon` the order is shuffled for one step.
//! Revisited poses are cut out of the walk, and walks whose forward path is
//! longer than `max_length_ratio` times the shortest path are redrawn.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{
    shortest_path_length, Action, EpisodeState, Heading, Observation, Outcome, Pitch, Pose, Scene, SceneError,
    TargetKind,
};

const REVERSE_PRIORITY: [Action; 3] = [Action::MoveBack, Action::MoveLeft, Action::RotateRight];

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("no valid demonstration after {0} attempts")]
    Exhausted(usize),
    #[error("expert file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub min_walk: usize,
    pub max_walk: usize,
    pub epsilon: f64,
    pub max_attempts: usize,
    pub max_length_ratio: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig { min_walk: 10, max_walk: 40, epsilon: 0.3, max_attempts: 64, max_length_ratio: 2.0 }
    }
}

/// A start pose and the action list that leads from it to a successful stop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertTrajectory {
    pub target_index: usize,
    pub start: Pose,
    pub actions: Vec<Action>,
}

/// States visited while replaying an action list.
#[derive(Debug, Clone)]
pub struct Replay {
    /// Observation before each action.
    pub observations: Vec<Observation>,
    pub poses: Vec<Pose>,
    pub rewards: Vec<f64>,
    pub outcome: Outcome,
}

/// Replays `actions` from `start`, stopping early if the episode ends.
pub fn replay_actions(
    scene: &Scene,
    target_index: usize,
    start: Pose,
    actions: &[Action],
) -> Result<Replay, SceneError> {
    let (mut state, mut obs) = EpisodeState::start_at(scene, target_index, start, u32::MAX)?;
    let mut out = Replay { observations: Vec::new(), poses: Vec::new(), rewards: Vec::new(), outcome: Outcome::Running };
    for &a in actions {
        if state.done {
            break;
        }
        out.observations.push(obs);
        out.poses.push(state.pose);
        let r = state.step(a)?;
        out.rewards.push(r.reward);
        obs = r.observation;
    }
    out.outcome = state.outcome;
    Ok(out)
}

impl ExpertTrajectory {
    pub fn replay(&self, scene: &Scene) -> Result<Replay, SceneError> {
        replay_actions(scene, self.target_index, self.start, &self.actions)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

fn reverse_walk(scene: &Scene, goal: Pose, steps: usize, epsilon: f64, rng: &mut ChaCha8Rng) -> Vec<(Action, Pose)> {
    let mut walk: Vec<(Action, Pose)> = Vec::new();
    let mut pose = goal;
    let mut seen: HashMap<Pose, usize> = HashMap::from([(goal, 0)]);
    for _ in 0..steps {
        let mut order = REVERSE_PRIORITY;
        if rng.gen_bool(epsilon) {
            order.shuffle(rng);
        }
        // rotate_right always applies, so the walk can never be trapped
        let (action, next) = order
            .iter()
            .find_map(|&a| crate::scene::next_pose(scene, &pose, a).map(|p| (a, p)))
            .expect("rotation always succeeds");
        match seen.get(&next) {
            Some(&len) => {
                // cut the loop back to the earlier visit
                for (_, p) in walk.drain(len..) {
                    seen.remove(&p);
                }
                seen.insert(next, len);
            }
            None => {
                walk.push((action, next));
                seen.insert(next, walk.len());
            }
        }
        pose = next;
    }
    walk
}

fn forward_actions(scene: &Scene, target_index: usize, walk: &[(Action, Pose)]) -> Vec<Action> {
    let mut actions: Vec<Action> =
        walk.iter().rev().map(|(a, _)| a.inverse().expect("walk uses pose actions only")).collect();
    if scene.targets[target_index].kind == TargetKind::Actionable {
        actions.push(Action::Open);
    }
    actions.push(Action::Stop);
    actions
}

/// Generates one demonstration for `target_index`, deterministic in `seed`.
pub fn generate_expert(
    scene: &Scene,
    target_index: usize,
    seed: u64,
    config: &ExpertConfig,
) -> Result<ExpertTrajectory, ExpertError> {
    let target = scene
        .targets
        .get(target_index)
        .ok_or(SceneError::BadTarget { index: target_index, count: scene.targets.len() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, ExpertTrajectory)> = None;
    for _ in 0..config.max_attempts.max(1) {
        let goal = *target.goal_poses.iter().choose(&mut rng).ok_or(SceneError::Unreachable)?;
        let steps = rng.gen_range(config.min_walk..=config.max_walk.max(config.min_walk));
        let walk = reverse_walk(scene, goal, steps, config.epsilon, &mut rng);
        let start = walk.last().map_or(goal, |(_, p)| *p);
        let traj = ExpertTrajectory { target_index, start, actions: forward_actions(scene, target_index, &walk) };
        if traj.replay(scene)?.outcome != Outcome::Success {
            continue;
        }
        let shortest = shortest_path_length(scene, &start, target)?;
        let ratio = traj.len() as f64 / shortest as f64;
        if ratio <= config.max_length_ratio {
            return Ok(traj);
        }
        if best.as_ref().map_or(true, |(r, _)| ratio < *r) {
            best = Some((ratio, traj));
        }
    }
    best.map(|(_, t)| t).ok_or(ExpertError::Exhausted(config.max_attempts))
}

const MAGIC: &str = "kgnav-expert 1";

/// Text cache form: a header, the target and start pose, then one action per line.
pub fn format_expert(traj: &ExpertTrajectory) -> String {
    let mut out = format!("{MAGIC}\ntarget {}\nstart {}\n", traj.target_index, traj.start);
    for a in &traj.actions {
        let _ = writeln!(out, "{}", a.name());
    }
    out
}

pub fn parse_expert(text: &str) -> Result<ExpertTrajectory, ExpertError> {
    let err = |line: usize, msg: String| ExpertError::Parse { line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        _ => return Err(err(1, format!("expected `{MAGIC}`"))),
    }
    let (n, l) = lines.next().ok_or_else(|| err(2, "missing target line".into()))?;
    let target_index = l
        .strip_prefix("target ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| err(n, format!("expected `target <index>`, got {l:?}")))?;
    let (n, l) = lines.next().ok_or_else(|| err(3, "missing start line".into()))?;
    let toks: Vec<&str> = l.split_whitespace().collect();
    let start = match toks[..] {
        ["start", x, y, h, p] => {
            let x = x.parse().map_err(|_| err(n, format!("bad x {x:?}")))?;
            let y = y.parse().map_err(|_| err(n, format!("bad y {y:?}")))?;
            let h = Heading::parse(h).ok_or_else(|| err(n, format!("bad heading {h:?}")))?;
            let p = Pitch::parse(p).ok_or_else(|| err(n, format!("bad pitch {p:?}")))?;
            Pose::new(x, y, h, p)
        }
        _ => return Err(err(n, format!("expected `start x y heading pitch`, got {l:?}"))),
    };
    let mut actions = Vec::new();
    for (n, l) in lines {
        if l.is_empty() {
            continue;
        }
        actions.push(Action::parse(l).ok_or_else(|| err(n, format!("unknown action {l:?}")))?);
    }
    Ok(ExpertTrajectory { target_index, start, actions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{
        generate_scene, Cell, GeneratorConfig, HeightLevel, ObjectInstance, Placement, TargetDecl, TargetRole,
    };

    /// 7x1 corridor with an apple at the east end.
    fn corridor(walls: usize) -> Scene {
        Scene::build(
            7,
            1 + 2 * walls as i32,
            0.5,
            0,
            vec!["Apple".into()],
            Default::default(),
            vec![ObjectInstance {
                id: 0,
                category: 0,
                placement: Placement::At(Cell::new(6, walls as i32)),
                height_level: HeightLevel::Floor,
                openable: false,
                pickupable: true,
                blocks_movement: true,
            }],
            &[TargetDecl { object_id: 0, role: TargetRole::Train }],
        )
        .unwrap()
    }

    #[test]
    fn straight_corridor_walk() {
        let scene = corridor(0);
        let goal = Pose::new(3, 0, Heading::E, Pitch::Down);
        assert!(scene.targets[0].goal_poses.contains(&goal));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let walk = reverse_walk(&scene, goal, 3, 0.0, &mut rng);
        assert_eq!(walk.iter().map(|w| w.0).collect::<Vec<_>>(), vec![Action::MoveBack; 3]);
        let actions = forward_actions(&scene, 0, &walk);
        assert_eq!(actions, vec![Action::MoveForward, Action::MoveForward, Action::MoveForward, Action::Stop]);
        let replay = replay_actions(&scene, 0, walk[2].1, &actions).unwrap();
        assert_eq!(replay.outcome, Outcome::Success);
    }

    #[test]
    fn walks_never_revisit_a_pose() {
        let scene = corridor(1);
        let goal = *scene.targets[0].goal_poses.iter().next().unwrap();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let walk = reverse_walk(&scene, goal, 40, 0.3, &mut rng);
            let mut poses: Vec<Pose> = walk.iter().map(|w| w.1).collect();
            poses.push(goal);
            let n = poses.len();
            poses.sort();
            poses.dedup();
            assert_eq!(poses.len(), n);
        }
    }

    #[test]
    fn generated_experts_replay_and_round_trip() {
        let cfg = GeneratorConfig { width: 6, height: 6, vocab_size: 14, wall_cells: 8, object_count: 8, ..Default::default() };
        let scene = generate_scene(11, &cfg).unwrap();
        for t in 0..scene.targets.len() {
            let traj = generate_expert(&scene, t, 5, &ExpertConfig::default()).unwrap();
            let replay = traj.replay(&scene).unwrap();
            assert_eq!(replay.outcome, Outcome::Success);
            assert_eq!(replay.rewards.len(), traj.len());
            if scene.targets[t].kind == TargetKind::Actionable {
                assert_eq!(traj.actions[traj.len() - 2..], [Action::Open, Action::Stop]);
            }
            let shortest = shortest_path_length(&scene, &traj.start, &scene.targets[t]).unwrap();
            assert!(traj.len() as u32 <= 2 * shortest);
            assert_eq!(parse_expert(&format_expert(&traj)).unwrap(), traj);
            assert_eq!(generate_expert(&scene, t, 5, &ExpertConfig::default()).unwrap(), traj);
        }
    }

    #[test]
    fn parse_errors() {
        assert!(parse_expert("nope").is_err());
        assert!(matches!(
            parse_expert("kgnav-expert 1\ntarget 0\nstart 1 1 N level\nfly\n"),
            Err(ExpertError::Parse { line: 4, .. })
        ));
    }
}
