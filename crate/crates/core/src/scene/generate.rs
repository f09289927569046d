//! Procedural room generator.

use std::collections::{BTreeSet, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::search::goal_distance_map;
use super::{Cell, HeightLevel, ObjectInstance, Placement, Scene, SceneError, TargetDecl, TargetRole};

/// Default properties of a vocabulary category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CategoryInfo {
    pub name: &'static str,
    pub level: HeightLevel,
    pub openable: bool,
    pub pickupable: bool,
    pub blocks: bool,
}

const fn cat(name: &'static str, level: HeightLevel, openable: bool, pickupable: bool, blocks: bool) -> CategoryInfo {
    CategoryInfo { name, level, openable, pickupable, blocks }
}

use HeightLevel::{Counter, Floor, High};

/// Household categories, interleaved so that any prefix mixes receptacles,
/// furniture and pickupable items.
const CATEGORIES: [CategoryInfo; 40] = [
    cat("Fridge", Floor, true, false, true),
    cat("Apple", Counter, false, true, false),
    cat("CounterTop", Counter, false, false, true),
    cat("Mug", Floor, false, true, false),
    cat("Cabinet", High, true, false, true),
    cat("Bowl", High, false, true, false),
    cat("Drawer", Counter, true, false, true),
    cat("Bread", Floor, false, true, false),
    cat("Chair", Floor, false, false, true),
    cat("Tomato", Counter, false, true, false),
    cat("Microwave", Counter, true, false, true),
    cat("Kettle", High, false, true, false),
    cat("Painting", High, false, false, false),
    cat("Potato", Floor, false, true, false),
    cat("Dishwasher", Floor, true, false, true),
    cat("Cup", Counter, false, true, false),
    cat("DiningTable", Counter, false, false, true),
    cat("Egg", High, false, true, false),
    cat("Shelf", High, false, false, true),
    cat("Knife", Counter, false, true, false),
    cat("Oven", Floor, true, false, true),
    cat("Spoon", Floor, false, true, false),
    cat("Stove", Counter, false, false, true),
    cat("Plate", High, false, true, false),
    cat("Safe", Floor, true, false, true),
    cat("Book", Counter, false, true, false),
    cat("Sink", Counter, false, false, true),
    cat("CellPhone", Floor, false, true, false),
    cat("Window", High, false, false, false),
    cat("Vase", High, false, true, false),
    cat("Sofa", Floor, false, false, true),
    cat("KeyChain", Counter, false, true, false),
    cat("Box", Floor, true, false, true),
    cat("Pot", Floor, false, true, false),
    cat("LightSwitch", High, false, false, false),
    cat("Pan", Counter, false, true, false),
    cat("GarbageCan", Floor, false, false, true),
    cat("Lettuce", High, false, true, false),
    cat("Television", High, false, false, false),
    cat("RemoteControl", Counter, false, true, false),
];

/// The first `size` categories of the built-in household vocabulary.
pub fn default_vocabulary(size: usize) -> Result<Vec<CategoryInfo>, SceneError> {
    if size == 0 || size > CATEGORIES.len() {
        return Err(SceneError::Infeasible(format!(
            "vocabulary size must be in 1..={}, got {size}",
            CATEGORIES.len()
        )));
    }
    Ok(CATEGORIES[..size].to_vec())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub width: i32,
    pub height: i32,
    pub grid_step: f64,
    pub vocab_size: usize,
    /// Interior wall cells.
    pub wall_cells: usize,
    /// Openable receptacles placed in the room.
    pub receptacle_count: usize,
    /// Objects standing on cells, receptacles included.
    pub object_count: usize,
    pub static_targets: usize,
    /// Targets hidden inside receptacles.
    pub actionable_targets: usize,
    /// Extra static targets marked as held out from training.
    pub holdout_targets: usize,
    /// Every target must admit a start pose at least this far from its goal
    /// poses (0 disables the check).
    pub min_start_distance: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            width: 8,
            height: 8,
            grid_step: 0.5,
            vocab_size: 40,
            wall_cells: 4,
            receptacle_count: 3,
            object_count: 12,
            static_targets: 2,
            actionable_targets: 1,
            holdout_targets: 1,
            min_start_distance: 10,
        }
    }
}

const MAX_ATTEMPTS: usize = 2000;

/// Deterministically generates a scene from `(seed, config)`.
pub fn generate_scene(seed: u64, config: &GeneratorConfig) -> Result<Scene, SceneError> {
    check_feasible(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_err = None;
    for _ in 0..MAX_ATTEMPTS {
        match try_generate(seed, config, &mut rng) {
            Ok(scene) => return Ok(scene),
            Err(e) => last_err = Some(e),
        }
    }
    Err(SceneError::Infeasible(format!(
        "no valid layout after {MAX_ATTEMPTS} attempts (last: {})",
        last_err.map(|e| e.to_string()).unwrap_or_default()
    )))
}

fn check_feasible(c: &GeneratorConfig) -> Result<(), SceneError> {
    let infeasible = |m: String| Err(SceneError::Infeasible(m));
    if c.width < 2 || c.height < 2 {
        return infeasible(format!("grid {}x{} is too small", c.width, c.height));
    }
    let vocab = default_vocabulary(c.vocab_size)?;
    let openable = vocab.iter().filter(|v| v.openable).count();
    let pickupable = vocab.iter().filter(|v| v.pickupable).count();
    let cells = (c.width * c.height) as usize;
    if c.receptacle_count > openable {
        return infeasible(format!("{} receptacles requested but the vocabulary has {openable}", c.receptacle_count));
    }
    if c.actionable_targets > 0 && c.receptacle_count == 0 {
        return infeasible("actionable targets need at least one receptacle".into());
    }
    if c.object_count < c.receptacle_count {
        return infeasible("object_count must include the receptacles".into());
    }
    let placed_pickups = c.object_count - c.receptacle_count;
    if c.static_targets + c.holdout_targets > placed_pickups {
        return infeasible("not enough free-standing objects for the static targets".into());
    }
    if c.static_targets + c.holdout_targets + c.actionable_targets > pickupable {
        return infeasible(format!("vocabulary has only {pickupable} pickupable categories for the targets"));
    }
    if c.object_count + c.actionable_targets > vocab.len() {
        return infeasible(format!(
            "{} objects need distinct categories but |V| = {}",
            c.object_count + c.actionable_targets,
            vocab.len()
        ));
    }
    if c.object_count + c.wall_cells + 1 > cells {
        return infeasible(format!(
            "{} objects and {} walls do not fit in {cells} cells",
            c.object_count, c.wall_cells
        ));
    }
    Ok(())
}

fn connected(width: i32, height: i32, blocked: &HashSet<Cell>) -> bool {
    let free: Vec<Cell> = (0..height)
        .flat_map(|y| (0..width).map(move |x| Cell::new(x, y)))
        .filter(|c| !blocked.contains(c))
        .collect();
    let Some(&first) = free.first() else { return false };
    let mut seen = HashSet::from([first]);
    let mut queue = VecDeque::from([first]);
    while let Some(c) = queue.pop_front() {
        for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
            let n = c.offset(dx, dy);
            if n.x >= 0 && n.y >= 0 && n.x < width && n.y < height && !blocked.contains(&n) && seen.insert(n) {
                queue.push_back(n);
            }
        }
    }
    seen.len() == free.len()
}

fn try_generate(seed: u64, c: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Scene, SceneError> {
    let vocab = default_vocabulary(c.vocab_size)?;
    let mut cells: Vec<Cell> = (0..c.height).flat_map(|y| (0..c.width).map(move |x| Cell::new(x, y))).collect();
    cells.shuffle(rng);

    // blocked cells for connectivity: walls plus blocking objects
    let mut blocked: HashSet<Cell> = HashSet::new();
    let mut occupied: HashSet<Cell> = HashSet::new();
    let mut walls = BTreeSet::new();
    for &cell in &cells {
        if walls.len() == c.wall_cells {
            break;
        }
        blocked.insert(cell);
        if connected(c.width, c.height, &blocked) {
            walls.insert(cell);
        } else {
            blocked.remove(&cell);
        }
    }
    let mut free_cells: Vec<Cell> = cells.into_iter().filter(|cell| !walls.contains(cell)).collect();
    free_cells.shuffle(rng);

    let mut openables: Vec<usize> = (0..vocab.len()).filter(|&i| vocab[i].openable).collect();
    let mut pickups: Vec<usize> = (0..vocab.len()).filter(|&i| vocab[i].pickupable).collect();
    let mut others: Vec<usize> = (0..vocab.len()).filter(|&i| !vocab[i].openable && !vocab[i].pickupable).collect();
    openables.shuffle(rng);
    pickups.shuffle(rng);
    others.shuffle(rng);

    let mut objects: Vec<ObjectInstance> = Vec::new();
    let mut place = |category: usize, blocks: bool, objects: &mut Vec<ObjectInstance>| -> Result<(), SceneError> {
        let info = vocab[category];
        let mut chosen = None;
        for (i, cell) in free_cells.iter().enumerate() {
            if occupied.contains(cell) {
                continue;
            }
            if blocks {
                blocked.insert(*cell);
                let ok = connected(c.width, c.height, &blocked);
                blocked.remove(cell);
                if !ok {
                    continue;
                }
            }
            chosen = Some(i);
            break;
        }
        let i = chosen.ok_or_else(|| SceneError::Infeasible("no cell left for an object".into()))?;
        let cell = free_cells.remove(i);
        occupied.insert(cell);
        if blocks {
            blocked.insert(cell);
        }
        objects.push(ObjectInstance {
            id: objects.len(),
            category,
            placement: Placement::At(cell),
            height_level: info.level,
            openable: info.openable,
            pickupable: info.pickupable,
            blocks_movement: blocks,
        });
        Ok(())
    };

    for &category in openables.iter().take(c.receptacle_count) {
        place(category, true, &mut objects)?;
    }
    let receptacles: Vec<usize> = objects.iter().map(|o| o.id).collect();

    // targets come first among the pickupable categories
    let n_static = c.static_targets + c.holdout_targets;
    let (target_cats, rest_pickups) = pickups.split_at(n_static + c.actionable_targets);
    let (static_cats, hidden_cats) = target_cats.split_at(n_static);
    let mut static_ids = Vec::new();
    for &category in static_cats {
        static_ids.push(objects.len());
        place(category, false, &mut objects)?;
    }
    let mut fillers: Vec<usize> = rest_pickups.iter().chain(others.iter()).copied().collect();
    fillers.shuffle(rng);
    let n_fill = c.object_count - c.receptacle_count - n_static;
    let mut fill_iter = fillers.into_iter();
    for _ in 0..n_fill {
        let category = fill_iter
            .next()
            .ok_or_else(|| SceneError::Infeasible("vocabulary exhausted by filler objects".into()))?;
        place(category, vocab[category].blocks, &mut objects)?;
    }

    let mut hidden_ids = Vec::new();
    for &category in hidden_cats {
        let container = receptacles[rng.gen_range(0..receptacles.len())];
        let info = vocab[category];
        hidden_ids.push(objects.len());
        objects.push(ObjectInstance {
            id: objects.len(),
            category,
            placement: Placement::Inside(container),
            height_level: objects[container].height_level,
            openable: false,
            pickupable: info.pickupable,
            blocks_movement: false,
        });
    }

    let mut targets = Vec::new();
    for (k, &id) in static_ids.iter().enumerate() {
        let role = if k < c.static_targets { TargetRole::Train } else { TargetRole::Holdout };
        targets.push(TargetDecl { object_id: id, role });
    }
    for &id in &hidden_ids {
        targets.push(TargetDecl { object_id: id, role: TargetRole::Train });
    }

    let names = vocab.iter().map(|v| v.name.to_string()).collect();
    let scene = Scene::build(c.width, c.height, c.grid_step, seed, names, walls, objects, &targets)?;
    let n_poses = scene.all_poses().len();
    for t in &scene.targets {
        let dist = goal_distance_map(&scene, &t.goal_poses);
        if dist.len() != n_poses {
            return Err(SceneError::Infeasible("a target is unreachable from some pose".into()));
        }
        if !dist.values().any(|&d| d >= c.min_start_distance) {
            return Err(SceneError::NoStartPose { min_distance: c.min_start_distance });
        }
    }
    Ok(scene)
}
