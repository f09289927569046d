//! Success rate, SPL and collision statistics over greedy evaluation episodes.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::softmax_values;
use crate::policy::{Agent, ModelError};
use crate::scene::{shortest_path_length, Action, EpisodeConfig, EpisodeState, Outcome, Scene, SceneError, TargetKind};
use crate::trainer::ModelState;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no episodes to score")]
    Empty,
    #[error("episode has nonpositive shortest path length")]
    ShortestPath,
    #[error("checkpoint expects {expected} categories, scene has {got}")]
    Vocabulary { expected: usize, got: usize },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    /// Actions taken.
    pub path_length: u32,
    /// Fewest actions that reach a successful stop from the start pose.
    pub shortest: u32,
    pub collisions: u32,
    pub target_visible_at_end: bool,
    pub target: usize,
    pub scene: usize,
}

pub fn success_rate(results: &[EpisodeResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}

/// Mean of `S * L / max(P, L)`.
pub fn spl(results: &[EpisodeResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = 0.0;
    for r in results {
        if r.shortest == 0 {
            return Err(EvalError::ShortestPath);
        }
        if r.success {
            total += r.shortest as f64 / r.path_length.max(r.shortest) as f64;
        }
    }
    Ok(total / results.len() as f64)
}

/// How the evaluated policy picks actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Most probable action, ties to the lowest index.
    Greedy,
    /// Sample from the policy distribution.
    Sample,
    /// Uniform random actions.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes_per_target: usize,
    pub step_cap: u32,
    /// Seeds the start poses; shared by every evaluated model.
    pub seed: u64,
    pub min_start_distance: u32,
    pub selection: Selection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes_per_target: 100, step_cap: 100, seed: 0, min_start_distance: 10, selection: Selection::Greedy }
    }
}

/// Seed of the `episode`-th start for one target, independent of the model.
pub fn start_seed(base: u64, scene: usize, target: usize, episode: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(((scene as u64) << 32) | target as u64);
    rng.set_word_pos(episode as u128 * 16);
    rng.gen()
}

/// Action chooser for one episode.
pub trait Policy {
    fn choose(&mut self, obs: &crate::scene::Observation) -> Result<Action, EvalError>;
}

struct ModelPolicy<'a> {
    agent: Agent<'a>,
    selection: Selection,
    rng: ChaCha8Rng,
}

impl Policy for ModelPolicy<'_> {
    fn choose(&mut self, obs: &crate::scene::Observation) -> Result<Action, EvalError> {
        if self.selection == Selection::Random {
            return Ok(Action::ALL[self.rng.gen_range(0..Action::COUNT)]);
        }
        let out = self.agent.act(obs)?;
        if self.selection == Selection::Greedy {
            return Ok(out.greedy_action());
        }
        let probs = softmax_values(&out.logits, None).map_err(ModelError::from)?;
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(Action::ALL[i]);
            }
        }
        Ok(Action::Stop)
    }
}

/// Runs one episode from the seeded start and scores it.
pub fn run_episode(
    scene: &Scene,
    scene_index: usize,
    target_index: usize,
    reset_seed: u64,
    config: &EvalConfig,
    policy: &mut dyn Policy,
) -> Result<EpisodeResult, EvalError> {
    let episode = EpisodeConfig { max_steps: config.step_cap, min_start_distance: config.min_start_distance };
    let (mut env, mut obs) = EpisodeState::reset(scene, target_index, reset_seed, &episode)?;
    let shortest = shortest_path_length(scene, &env.pose, env.target())?;
    while !env.done {
        let action = policy.choose(&obs)?;
        obs = env.step(action)?.observation;
    }
    let category = scene.objects[env.target().target_object_id].category;
    Ok(EpisodeResult {
        success: env.outcome == Outcome::Success,
        path_length: env.steps,
        shortest,
        collisions: env.collisions,
        target_visible_at_end: obs.visible[category],
        target: target_index,
        scene: scene_index,
    })
}

/// Evaluates `targets` (scene index, target index) with the stored model; read-only.
pub fn run_eval(
    model: &ModelState,
    scenes: &[Scene],
    targets: &[(usize, usize)],
    config: &EvalConfig,
) -> Result<Vec<EpisodeResult>, EvalError> {
    let expected = model.config.model.vocab_size;
    let mut results = Vec::with_capacity(targets.len() * config.episodes_per_target);
    for &(s, t) in targets {
        let scene = &scenes[s];
        if scene.vocab_size() != expected {
            return Err(EvalError::Vocabulary { expected, got: scene.vocab_size() });
        }
        for k in 0..config.episodes_per_target {
            let seed = start_seed(config.seed, s, t, k);
            let target_obs = scene.targets[t].target_observation.clone();
            let agent = Agent::new(&model.config.model, &model.params, &model.graph, target_obs)?;
            let mut policy = ModelPolicy { agent, selection: config.selection, rng: ChaCha8Rng::seed_from_u64(seed) };
            results.push(run_episode(scene, s, t, seed, config, &mut policy)?);
        }
    }
    Ok(results)
}

/// Aggregate statistics of one group of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub regime: String,
    pub kind: String,
    pub episodes: usize,
    pub sr: f64,
    pub spl: f64,
    pub mean_collisions: f64,
    /// Share of episodes whose last frame shows the target.
    pub visible_at_end: f64,
}

pub fn summarize(regime: &str, kind: &str, results: &[EpisodeResult]) -> Result<Summary, EvalError> {
    let n = results.len();
    Ok(Summary {
        regime: regime.to_string(),
        kind: kind.to_string(),
        episodes: n,
        sr: success_rate(results)?,
        spl: spl(results)?,
        mean_collisions: results.iter().map(|r| r.collisions as f64).sum::<f64>() / n as f64,
        visible_at_end: results.iter().filter(|r| r.target_visible_at_end).count() as f64 / n as f64,
    })
}

/// Splits results by target kind.
pub fn by_kind(scenes: &[Scene], results: &[EpisodeResult]) -> [(TargetKind, Vec<EpisodeResult>); 2] {
    let pick = |kind| results.iter().filter(|r| scenes[r.scene].targets[r.target].kind == kind).cloned().collect();
    [(TargetKind::Static, pick(TargetKind::Static)), (TargetKind::Actionable, pick(TargetKind::Actionable))]
}

pub const TABLE_COLUMNS: [&str; 7] = ["regime", "kind", "episodes", "sr", "spl", "collisions", "visible_end"];

/// Fixed-column text table; rates in percent.
pub fn format_table(rows: &[Summary]) -> String {
    let mut out = format!(
        "{:<14} {:<10} {:>8} {:>7} {:>7} {:>10} {:>11}\n",
        TABLE_COLUMNS[0], TABLE_COLUMNS[1], TABLE_COLUMNS[2], TABLE_COLUMNS[3], TABLE_COLUMNS[4], TABLE_COLUMNS[5], TABLE_COLUMNS[6]
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<14} {:<10} {:>8} {:>7.2} {:>7.2} {:>10.2} {:>11.2}",
            r.regime,
            r.kind,
            r.episodes,
            100.0 * r.sr,
            100.0 * r.spl,
            r.mean_collisions,
            100.0 * r.visible_at_end
        );
    }
    out
}

pub fn summaries_to_jsonl(rows: &[Summary]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("summary serializes") + "\n").collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn result(success: bool, path_length: u32, shortest: u32) -> EpisodeResult {
        EpisodeResult { success, path_length, shortest, collisions: 0, target_visible_at_end: success, target: 0, scene: 0 }
    }

    #[test]
    fn rates() {
        assert!(matches!(success_rate(&[]), Err(EvalError::Empty)));
        assert!(matches!(spl(&[]), Err(EvalError::Empty)));
        assert!(matches!(spl(&[result(true, 3, 0)]), Err(EvalError::ShortestPath)));
        let mut v: Vec<_> = (0..100).map(|i| result(i < 44, 10, 10)).collect();
        assert_eq!(success_rate(&v).unwrap(), 0.44);
        v.truncate(1);
        assert_eq!(spl(&v).unwrap(), 1.0);
        assert_eq!(spl(&[result(true, 12, 10)]).unwrap(), 10.0 / 12.0);
        // shorter than the shortest path counts as optimal
        assert_eq!(spl(&[result(true, 5, 10)]).unwrap(), 1.0);
    }

    #[test]
    fn table_has_fixed_columns() {
        let s = summarize("seen", "static", &[result(true, 12, 10), result(false, 100, 8)]).unwrap();
        assert_eq!(s.sr, 0.5);
        let table = format_table(&[s.clone()]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split_whitespace().collect::<Vec<_>>(), TABLE_COLUMNS);
        let back: Summary = serde_json::from_str(summaries_to_jsonl(&[s.clone()]).trim()).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn spl_bounded_by_sr(rows in prop::collection::vec((any::<bool>(), 1u32..200, 1u32..100), 1..40)) {
            let rs: Vec<_> = rows.iter().map(|&(s, p, l)| result(s, p, l)).collect();
            let (sr, spl) = (success_rate(&rs).unwrap(), spl(&rs).unwrap());
            prop_assert!((0.0..=1.0).contains(&spl) && spl <= sr && sr <= 1.0);
            let optimal: Vec<_> = rows.iter().map(|&(s, _, l)| result(s, l, l)).collect();
            prop_assert_eq!(super::spl(&optimal).unwrap(), success_rate(&optimal).unwrap());
        }
    }
}
