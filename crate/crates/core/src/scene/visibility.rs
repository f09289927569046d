use std::collections::BTreeSet;

use super::{ObjectInstance, Placement, Pose, Scene, TargetKind, VISIBILITY_RADIUS_M};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Left,
    Center,
    Right,
}

impl Direction {
    pub fn index(self) -> usize {
        match self {
            Direction::Left => 0,
            Direction::Center => 1,
            Direction::Right => 2,
        }
    }
}

/// One visible category, described by its nearest visible instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisibleEntry {
    pub category: usize,
    /// Distance in cells, rounded up and clamped to 1..=3.
    pub depth_bin: u8,
    pub direction: Direction,
    pub open: bool,
}

/// Egocentric symbolic view. Never carries the agent pose.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    /// Binary visible-category vector of length |V|.
    pub visible: Vec<bool>,
    /// One entry per visible category, sorted by category.
    pub entries: Vec<VisibleEntry>,
    pub collision_last: bool,
}

impl Observation {
    pub fn empty(vocab_size: usize) -> Self {
        Observation { visible: vec![false; vocab_size], entries: Vec::new(), collision_last: false }
    }

    pub fn vocab_size(&self) -> usize {
        self.visible.len()
    }

    pub fn visible_count(&self) -> usize {
        self.entries.len()
    }

    pub fn sees(&self, category: usize) -> bool {
        self.visible.get(category).copied().unwrap_or(false)
    }

    pub fn entry(&self, category: usize) -> Option<&VisibleEntry> {
        self.entries.iter().find(|e| e.category == category)
    }

    /// Visible vector as 0/1 reals.
    pub fn visible_mask(&self) -> Vec<f64> {
        self.visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}

/// A visible object instance with its egocentric geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeenInstance {
    pub object_id: usize,
    /// Squared distance in cells.
    pub dist2: i32,
    /// Signed lateral offset in cells, positive to the agent's right.
    pub lateral: i32,
}

/// Geometry test shared by every visibility query: the cell must be ahead of
/// the agent inside a 90 degree cone and within the visibility radius.
fn in_view(scene: &Scene, pose: &Pose, dx: i32, dy: i32) -> Option<(i32, i32)> {
    let (hx, hy) = pose.heading.delta();
    let forward = dx * hx + dy * hy;
    // right of heading (hx, hy) is (-hy, hx) with y pointing south
    let lateral = -dx * hy + dy * hx;
    if forward <= 0 || lateral.abs() > forward {
        return None;
    }
    let dist2 = dx * dx + dy * dy;
    let meters = (dist2 as f64).sqrt() * scene.grid_step;
    if meters > VISIBILITY_RADIUS_M + 1e-9 {
        return None;
    }
    Some((dist2, lateral))
}

/// Object instances visible from `pose` given which receptacle (if any) is open.
pub fn visible_instances(scene: &Scene, pose: &Pose, open_receptacle: Option<usize>) -> Vec<SeenInstance> {
    let level = pose.pitch.sees();
    let mut seen = Vec::new();
    for o in &scene.objects {
        if o.height_level != level {
            continue;
        }
        let cell = match o.placement {
            Placement::At(c) => c,
            Placement::Inside(container) => {
                if open_receptacle != Some(container) {
                    continue;
                }
                match scene.object_cell(container) {
                    Some(c) => c,
                    None => continue,
                }
            }
        };
        if let Some((dist2, lateral)) = in_view(scene, pose, cell.x - pose.cell.x, cell.y - pose.cell.y) {
            seen.push(SeenInstance { object_id: o.id, dist2, lateral });
        }
    }
    seen
}

/// The receptacle an `open` action would act on: the nearest visible openable
/// object (ties broken by lowest id). Assumes every receptacle is closed.
pub(crate) fn open_candidate(scene: &Scene, pose: &Pose) -> Option<usize> {
    visible_instances(scene, pose, None)
        .into_iter()
        .filter(|s| scene.objects[s.object_id].openable)
        .min_by_key(|s| (s.dist2, s.object_id))
        .map(|s| s.object_id)
}

fn depth_bin(dist2: i32) -> u8 {
    match dist2 {
        d if d <= 1 => 1,
        d if d <= 4 => 2,
        _ => 3,
    }
}

/// Builds the observation seen from `pose`.
pub fn observe(scene: &Scene, pose: &Pose, open_receptacle: Option<usize>, collision_last: bool) -> Observation {
    let mut obs = Observation::empty(scene.vocab_size());
    obs.collision_last = collision_last;
    let mut best: Vec<Option<(SeenInstance, bool)>> = vec![None; scene.vocab_size()];
    for s in visible_instances(scene, pose, open_receptacle) {
        let o = &scene.objects[s.object_id];
        let is_open = o.openable && open_receptacle == Some(o.id);
        let slot = &mut best[o.category];
        match slot {
            Some((cur, any_open)) => {
                *any_open |= is_open;
                if (s.dist2, s.lateral.abs(), s.object_id) < (cur.dist2, cur.lateral.abs(), cur.object_id) {
                    *cur = s;
                }
            }
            None => *slot = Some((s, is_open)),
        }
    }
    for (category, slot) in best.into_iter().enumerate() {
        if let Some((s, open)) = slot {
            obs.visible[category] = true;
            let direction = match s.lateral {
                l if l < 0 => Direction::Left,
                0 => Direction::Center,
                _ => Direction::Right,
            };
            obs.entries.push(VisibleEntry { category, depth_bin: depth_bin(s.dist2), direction, open });
        }
    }
    obs
}

/// Whether `object` is visible from `pose` with `open_receptacle` open.
pub(crate) fn object_visible(scene: &Scene, pose: &Pose, object: usize, open_receptacle: Option<usize>) -> bool {
    visible_instances(scene, pose, open_receptacle).iter().any(|s| s.object_id == object)
}

/// Poses from which a stop can succeed for `object`.
///
/// Static: the object is visible. Actionable: `open` from the pose resolves to
/// the object's container and the object is visible once it is open.
pub(crate) fn compute_goal_poses(scene: &Scene, object: &ObjectInstance) -> BTreeSet<Pose> {
    let kind = if object.container_id().is_some() { TargetKind::Actionable } else { TargetKind::Static };
    scene
        .all_poses()
        .into_iter()
        .filter(|pose| match kind {
            TargetKind::Static => object_visible(scene, pose, object.id, None),
            TargetKind::Actionable => {
                let container = object.container_id();
                open_candidate(scene, pose) == container && object_visible(scene, pose, object.id, container)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Cell, Heading, HeightLevel, Pitch, TargetDecl, TargetRole};
    use std::collections::BTreeSet;

    fn obj(id: usize, category: usize, placement: Placement, level: HeightLevel) -> ObjectInstance {
        ObjectInstance {
            id,
            category,
            placement,
            height_level: level,
            openable: false,
            pickupable: true,
            blocks_movement: false,
        }
    }

    fn corridor(objects: Vec<ObjectInstance>) -> Scene {
        Scene::build(
            8,
            3,
            0.5,
            0,
            vec!["Fridge".into(), "Apple".into(), "Mug".into()],
            BTreeSet::new(),
            objects,
            &[],
        )
        .unwrap()
    }

    #[test]
    fn object_four_cells_ahead_is_out_of_range() {
        let scene = corridor(vec![obj(0, 1, Placement::At(Cell::new(5, 1)), HeightLevel::Floor)]);
        let pose = Pose::new(1, 1, Heading::E, Pitch::Down);
        assert!(!observe(&scene, &pose, None, false).sees(1));
        let closer = Pose::new(2, 1, Heading::E, Pitch::Down);
        let o = observe(&scene, &closer, None, false);
        assert!(o.sees(1));
        assert_eq!(o.entry(1).unwrap().depth_bin, 3);
        assert_eq!(o.entry(1).unwrap().direction, Direction::Center);
    }

    #[test]
    fn pitch_selects_height_band() {
        let scene = corridor(vec![obj(0, 1, Placement::At(Cell::new(3, 1)), HeightLevel::Counter)]);
        let level = Pose::new(2, 1, Heading::E, Pitch::Level);
        let down = Pose { pitch: Pitch::Down, ..level };
        assert!(observe(&scene, &level, None, false).sees(1));
        assert!(!observe(&scene, &down, None, false).sees(1));
    }

    #[test]
    fn cone_excludes_objects_behind_and_beside() {
        let scene = corridor(vec![obj(0, 1, Placement::At(Cell::new(3, 1)), HeightLevel::Floor)]);
        assert!(!observe(&scene, &Pose::new(4, 1, Heading::E, Pitch::Down), None, false).sees(1));
        assert!(!observe(&scene, &Pose::new(3, 0, Heading::E, Pitch::Down), None, false).sees(1));
        // diagonal sits on the cone edge and counts as visible
        let o = observe(&scene, &Pose::new(2, 0, Heading::E, Pitch::Down), None, false);
        assert!(o.sees(1));
        assert_eq!(o.entry(1).unwrap().direction, Direction::Right);
        assert_eq!(o.entry(1).unwrap().depth_bin, 2);
    }

    #[test]
    fn closed_receptacle_hides_contents() {
        let mut fridge = obj(0, 0, Placement::At(Cell::new(3, 1)), HeightLevel::Floor);
        fridge.openable = true;
        fridge.pickupable = false;
        fridge.blocks_movement = true;
        let apple = obj(1, 1, Placement::Inside(0), HeightLevel::Floor);
        let scene = Scene::build(
            8,
            3,
            0.5,
            0,
            vec!["Fridge".into(), "Apple".into()],
            BTreeSet::new(),
            vec![fridge, apple],
            &[TargetDecl { object_id: 1, role: TargetRole::Train }],
        )
        .unwrap();
        let pose = Pose::new(2, 1, Heading::E, Pitch::Down);
        let closed = observe(&scene, &pose, None, false);
        assert!(closed.sees(0) && !closed.sees(1));
        let open = observe(&scene, &pose, Some(0), false);
        assert!(open.sees(0) && open.sees(1));
        assert!(open.entry(0).unwrap().open);
        assert_eq!(scene.targets[0].kind, TargetKind::Actionable);
        assert!(scene.targets[0].target_observation.sees(1));
        assert!(scene.targets[0].goal_poses.contains(&pose));
    }

    #[test]
    fn empty_scene_sees_nothing() {
        let scene = corridor(vec![]);
        for pose in scene.all_poses() {
            let o = observe(&scene, &pose, None, false);
            assert!(o.visible.iter().all(|v| !v));
            assert!(o.entries.is_empty());
        }
    }
}
