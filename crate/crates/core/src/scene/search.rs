use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use super::episode::{next_pose, stop_succeeds, transition, Action};
use super::{Pose, Scene, SceneError, TargetSpec};

const POSE_ACTIONS: [Action; 8] = [
    Action::MoveForward,
    Action::MoveBack,
    Action::MoveRight,
    Action::MoveLeft,
    Action::RotateRight,
    Action::RotateLeft,
    Action::LookUp,
    Action::LookDown,
];

/// Pose-graph distance (moves, rotations, pitch changes) from every reachable
/// pose to the nearest pose in `goals`. Unreachable poses are absent.
pub fn goal_distance_map(scene: &Scene, goals: &BTreeSet<Pose>) -> HashMap<Pose, u32> {
    let mut dist = HashMap::new();
    let mut queue = VecDeque::new();
    for g in goals {
        dist.insert(*g, 0);
        queue.push_back(*g);
    }
    while let Some(pose) = queue.pop_front() {
        let d = dist[&pose];
        // every pose edge has an inverse, so expanding forward from the goals
        // yields the distance towards them
        for action in POSE_ACTIONS {
            if let Some(next) = next_pose(scene, &pose, action) {
                dist.entry(next).or_insert_with(|| {
                    queue.push_back(next);
                    d + 1
                });
            }
        }
    }
    dist
}

/// Minimum number of actions from `start` to a successful stop, counting the
/// stop (and the open, for actionable targets).
pub fn shortest_path_length(scene: &Scene, start: &Pose, target: &TargetSpec) -> Result<u32, SceneError> {
    if !scene.is_valid_pose(start) {
        return Err(SceneError::Validation(format!("start pose {start} is not on a free cell")));
    }
    let mut seen: HashSet<(Pose, Option<usize>)> = HashSet::new();
    let mut queue = VecDeque::new();
    seen.insert((*start, None));
    queue.push_back((*start, None, 0u32));
    while let Some((pose, opened, d)) = queue.pop_front() {
        if stop_succeeds(scene, target, &pose, opened) {
            return Ok(d + 1);
        }
        for action in Action::ALL {
            if action == Action::Stop {
                continue;
            }
            let t = transition(scene, &pose, opened, action);
            if seen.insert((t.pose, t.opened)) {
                queue.push_back((t.pose, t.opened, d + 1));
            }
        }
    }
    Err(SceneError::Unreachable)
}
