//! Scene sets: a `manifest.txt` listing `<split> <file>` per line, paths
//! relative to the manifest.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use kgnav::scene::{load_scene, Scene};

use crate::invalid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test].into_iter().find(|x| x.name() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<(Split, String)>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = String::from("# kgnav scene manifest: <split> <file>\n");
        for (split, file) in &self.entries {
            out.push_str(&format!("{split} {file}\n"));
        }
        out
    }

    pub fn parse(dir: &Path, text: &str) -> Result<Manifest> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut toks = line.split_whitespace();
            let (Some(split), Some(file), None) = (toks.next(), toks.next(), toks.next()) else {
                return Err(invalid(format!("manifest line {}: expected `<split> <file>`", n + 1)));
            };
            let split = Split::parse(split)
                .ok_or_else(|| invalid(format!("manifest line {}: unknown split {split:?}", n + 1)))?;
            entries.push((split, file.to_string()));
        }
        Ok(Manifest { dir: dir.to_path_buf(), entries })
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Manifest::parse(path.parent().unwrap_or(Path::new(".")), &text)
    }

    pub fn scenes(&self, split: Split) -> Result<Vec<Scene>> {
        self.entries
            .iter()
            .filter(|(s, _)| *s == split)
            .map(|(_, file)| read_scene(&self.dir.join(file)))
            .collect()
    }
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    load_scene(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let m = Manifest { dir: PathBuf::from("x"), entries: vec![(Split::Train, "a.txt".into()), (Split::Test, "b.txt".into())] };
        assert_eq!(Manifest::parse(Path::new("x"), &m.render()).unwrap(), m);
        assert!(Manifest::parse(Path::new("x"), "holdout a.txt\n").is_err());
        assert!(Manifest::parse(Path::new("x"), "train\n").is_err());
    }
}
