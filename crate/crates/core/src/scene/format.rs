//! Scene file reader and writer.
//!
//! ```text
//! kgnav-scene 1
//! width 6
//! height 6
//! grid_step 0.5
//! seed 42
//! vocab Fridge CounterTop Apple
//! wall 2 3
//! object 0 0 at 4 1 floor openable,blocks
//! object 1 2 in 0 floor pickupable
//! target 1 train
//! ```
//!
//! Object records are `object <id> <vocab index> at <x> <y> <level> <flags>` or
//! `object <id> <vocab index> in <container id> <level> <flags>`; flags are a
//! comma list drawn from `openable`, `pickupable`, `blocks`, or `-` for none.
//! Blank lines and lines starting with `#` are ignored on input. The writer
//! emits the canonical form above, so save → load → save is byte-identical.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use super::{Cell, HeightLevel, ObjectInstance, Placement, Scene, SceneError, TargetDecl, TargetRole};

const MAGIC: &str = "kgnav-scene";
const VERSION: u32 = 1;

fn parse_err(line: usize, field: &str, msg: impl Into<String>) -> SceneError {
    SceneError::Parse { line, field: field.to_string(), msg: msg.into() }
}

fn num<T: FromStr>(line: usize, field: &str, tok: Option<&str>) -> Result<T, SceneError> {
    let tok = tok.ok_or_else(|| parse_err(line, field, "missing value"))?;
    tok.parse().map_err(|_| parse_err(line, field, format!("cannot parse {tok:?}")))
}

fn flags_to_string(o: &ObjectInstance) -> String {
    let mut parts = Vec::new();
    if o.openable {
        parts.push("openable");
    }
    if o.pickupable {
        parts.push("pickupable");
    }
    if o.blocks_movement {
        parts.push("blocks");
    }
    if parts.is_empty() {
        "-".to_string()
    } else {
        parts.join(",")
    }
}

/// Parses and validates a scene file.
pub fn load_scene(text: &str) -> Result<Scene, SceneError> {
    let mut header_seen = false;
    let mut width = None;
    let mut height = None;
    let mut grid_step = None;
    let mut seed = None;
    let mut vocab: Option<Vec<String>> = None;
    let mut walls = BTreeSet::new();
    let mut objects = Vec::new();
    let mut targets = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut toks = trimmed.split_whitespace();
        let key = toks.next().expect("nonempty line");
        if !header_seen {
            if key != MAGIC {
                return Err(parse_err(line, "header", format!("expected `{MAGIC} {VERSION}`")));
            }
            let v: u32 = num(line, "version", toks.next())?;
            if v != VERSION {
                return Err(parse_err(line, "version", format!("unsupported version {v}")));
            }
            header_seen = true;
            continue;
        }
        match key {
            "width" => width = Some(num::<i32>(line, key, toks.next())?),
            "height" => height = Some(num::<i32>(line, key, toks.next())?),
            "grid_step" => grid_step = Some(num::<f64>(line, key, toks.next())?),
            "seed" => seed = Some(num::<u64>(line, key, toks.next())?),
            "vocab" => {
                let names: Vec<String> = toks.by_ref().map(str::to_string).collect();
                if names.is_empty() {
                    return Err(parse_err(line, key, "empty vocabulary"));
                }
                vocab = Some(names);
            }
            "wall" => {
                let x = num(line, "wall.x", toks.next())?;
                let y = num(line, "wall.y", toks.next())?;
                if !walls.insert(Cell::new(x, y)) {
                    return Err(parse_err(line, key, format!("duplicate wall ({x}, {y})")));
                }
            }
            "object" => {
                let id: usize = num(line, "object.id", toks.next())?;
                let category: usize = num(line, "object.category", toks.next())?;
                let placement = match toks.next() {
                    Some("at") => {
                        let x = num(line, "object.x", toks.next())?;
                        let y = num(line, "object.y", toks.next())?;
                        Placement::At(Cell::new(x, y))
                    }
                    Some("in") => Placement::Inside(num(line, "object.container", toks.next())?),
                    other => {
                        return Err(parse_err(line, "object.placement", format!("expected `at` or `in`, got {other:?}")))
                    }
                };
                let level_tok = toks.next().ok_or_else(|| parse_err(line, "object.level", "missing value"))?;
                let height_level = HeightLevel::parse(level_tok)
                    .ok_or_else(|| parse_err(line, "object.level", format!("unknown level {level_tok:?}")))?;
                let flag_tok = toks.next().ok_or_else(|| parse_err(line, "object.flags", "missing value"))?;
                let (mut openable, mut pickupable, mut blocks) = (false, false, false);
                if flag_tok != "-" {
                    for f in flag_tok.split(',') {
                        match f {
                            "openable" => openable = true,
                            "pickupable" => pickupable = true,
                            "blocks" => blocks = true,
                            _ => return Err(parse_err(line, "object.flags", format!("unknown flag {f:?}"))),
                        }
                    }
                }
                objects.push(ObjectInstance {
                    id,
                    category,
                    placement,
                    height_level,
                    openable,
                    pickupable,
                    blocks_movement: blocks,
                });
            }
            "target" => {
                let object_id = num(line, "target.object", toks.next())?;
                let role_tok = toks.next().unwrap_or("train");
                let role = TargetRole::parse(role_tok)
                    .ok_or_else(|| parse_err(line, "target.role", format!("unknown role {role_tok:?}")))?;
                targets.push(TargetDecl { object_id, role });
            }
            other => return Err(parse_err(line, other, "unknown record")),
        }
        if let Some(extra) = toks.next() {
            return Err(parse_err(line, key, format!("unexpected trailing token {extra:?}")));
        }
    }

    if !header_seen {
        return Err(parse_err(1, "header", "empty scene file"));
    }
    let missing = |f: &str| parse_err(0, f, "required field missing");
    Scene::build(
        width.ok_or_else(|| missing("width"))?,
        height.ok_or_else(|| missing("height"))?,
        grid_step.ok_or_else(|| missing("grid_step"))?,
        seed.unwrap_or(0),
        vocab.ok_or_else(|| missing("vocab"))?,
        walls,
        objects,
        &targets,
    )
}

/// Writes the canonical text form of a scene.
pub fn save_scene(scene: &Scene) -> String {
    let mut out = String::new();
    // writing into a String cannot fail
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "width {}", scene.width);
    let _ = writeln!(out, "height {}", scene.height);
    let _ = writeln!(out, "grid_step {}", scene.grid_step);
    let _ = writeln!(out, "seed {}", scene.seed);
    let _ = writeln!(out, "vocab {}", scene.vocabulary.join(" "));
    for w in &scene.walls {
        let _ = writeln!(out, "wall {} {}", w.x, w.y);
    }
    for o in &scene.objects {
        let place = match o.placement {
            Placement::At(c) => format!("at {} {}", c.x, c.y),
            Placement::Inside(c) => format!("in {c}"),
        };
        let _ = writeln!(
            out,
            "object {} {} {} {} {}",
            o.id,
            o.category,
            place,
            o.height_level.name(),
            flags_to_string(o)
        );
    }
    for t in &scene.targets {
        let _ = writeln!(out, "target {} {}", t.target_object_id, t.role.name());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "kgnav-scene 1\nwidth 3\nheight 3\ngrid_step 0.5\nvocab Apple\nobject 0 0 at 2 1 floor pickupable\ntarget 0\n";

    #[test]
    fn minimal_scene_loads() {
        let scene = load_scene(MINIMAL).unwrap();
        assert_eq!(scene.targets.len(), 1);
        assert!(!scene.targets[0].goal_poses.is_empty());
    }

    #[test]
    fn vocabulary_index_out_of_range() {
        let text = MINIMAL.replace("object 0 0", "object 0 1");
        let err = load_scene(&text).unwrap_err();
        assert!(matches!(err, SceneError::Validation(ref m) if m.contains("vocabulary index")), "{err}");
    }

    #[test]
    fn parse_errors_name_line_and_field() {
        let text = MINIMAL.replace("width 3", "width three");
        assert_eq!(
            load_scene(&text).unwrap_err(),
            SceneError::Parse { line: 2, field: "width".into(), msg: "cannot parse \"three\"".into() }
        );
        let text = MINIMAL.replace("floor pickupable", "floor shiny");
        assert!(matches!(load_scene(&text), Err(SceneError::Parse { line: 6, .. })));
        assert!(matches!(load_scene("nonsense"), Err(SceneError::Parse { line: 1, .. })));
    }

    #[test]
    fn contained_object_needs_openable_container() {
        let text = "kgnav-scene 1\nwidth 4\nheight 4\ngrid_step 0.5\nvocab Box Apple\n\
                    object 0 0 at 2 2 floor blocks\nobject 1 1 in 0 floor pickupable\ntarget 1\n";
        let err = load_scene(text).unwrap_err();
        assert!(matches!(err, SceneError::Validation(ref m) if m.contains("not openable")), "{err}");
    }

    #[test]
    fn canonical_output_is_stable() {
        let scene = load_scene(&format!("# comment\n{MINIMAL}")).unwrap();
        let text = save_scene(&scene);
        assert_eq!(
            text,
            "kgnav-scene 1\nwidth 3\nheight 3\ngrid_step 0.5\nseed 0\nvocab Apple\n\
             object 0 0 at 2 1 floor pickupable\ntarget 0 train\n"
        );
        assert_eq!(save_scene(&load_scene(&text).unwrap()), text);
    }
}
