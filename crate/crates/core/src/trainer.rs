//! Asynchronous advantage actor-critic over shared global parameters, with
//! sub-target relabeling of explored trajectories and online imitation of one
//! expert trajectory per training target.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::{generate_expert, ExpertConfig, ExpertError, ExpertTrajectory};
use crate::kg::{KgError, KnowledgeGraph, SharedGraph};
use crate::nn::{
    read_checkpoint, write_checkpoint, Checkpoint, Gradients, Matrix, NnError, OptimConfig, OptimizerKind,
    ParameterSet, SharedParams, Tape, Var,
};
use crate::policy::{LstmState, ModelConfig, ModelError, Network, StepVars, TargetContext};
use crate::scene::{
    Action, EpisodeConfig, EpisodeState, Observation, Outcome, Pose, Scene, SceneError, TargetRole, STEP_PENALTY,
    SUCCESS_REWARD,
};

/// Reward given to the final step of a relabeled sub-trajectory, composed like a real successful stop.
pub const RELABELED_REWARD: f64 = SUCCESS_REWARD + STEP_PENALTY;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] KgError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Named configurations reproducing the compared variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Uniform random actions, no learning.
    Random,
    /// Imitation only.
    Il,
    /// Plain recurrent actor-critic.
    LstmA3c,
    A3cIl,
    A3cTse,
    /// Actor-critic with imitation and sub-target relabeling.
    IlTse,
    /// Adds the graph branch with mean pooling instead of attention.
    Kg,
    /// Full model.
    KgAttention,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::Random,
        Ablation::Il,
        Ablation::LstmA3c,
        Ablation::A3cIl,
        Ablation::A3cTse,
        Ablation::IlTse,
        Ablation::Kg,
        Ablation::KgAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Random => "random",
            Ablation::Il => "il",
            Ablation::LstmA3c => "lstm_a3c",
            Ablation::A3cIl => "a3c_il",
            Ablation::A3cTse => "a3c_tse",
            Ablation::IlTse => "il_tse",
            Ablation::Kg => "kg",
            Ablation::KgAttention => "kg_attention",
        }
    }

    pub fn parse(s: &str) -> Option<Ablation> {
        Ablation::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// Which targets may serve as relabeled sub-targets besides novel objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubTargetScope {
    /// Training targets only; held-out targets never become sub-targets.
    Seen,
    /// Held-out targets may appear as novel sub-targets too.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub workers: usize,
    /// Frame budget: total environment steps across all workers.
    pub frames: u64,
    pub gamma: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub t_max: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    /// Global-norm clipping threshold; zero disables clipping.
    pub clip_norm: f64,
    pub max_episode_steps: u32,
    pub min_start_distance: u32,
    /// Actor-critic updates on collected rollouts.
    pub a3c: bool,
    pub il: bool,
    /// Imitation stops once this many frames were collected; defaults to a tenth of the budget.
    pub il_frames: Option<u64>,
    /// Segments between imitation updates.
    pub il_interval: usize,
    pub tse: bool,
    pub tse_samples: usize,
    pub tse_scope: SubTargetScope,
    /// Uniform random actions and no updates.
    pub random_policy: bool,
    /// Frames between periodic checkpoints; zero writes only the first and last.
    pub checkpoint_every: u64,
    pub model: ModelConfig,
    pub expert: ExpertConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut cfg = TrainConfig {
            seed: 0,
            workers: 1,
            frames: 100_000,
            gamma: 0.99,
            value_coef: 0.5,
            entropy_coef: 0.01,
            t_max: 32,
            optimizer: OptimizerKind::RmsProp,
            lr: 7e-4,
            rms_decay: 0.99,
            rms_eps: 1e-5,
            clip_norm: 40.0,
            max_episode_steps: 5000,
            min_start_distance: 10,
            a3c: true,
            il: true,
            il_frames: None,
            il_interval: 4,
            tse: true,
            tse_samples: 5,
            tse_scope: SubTargetScope::Seen,
            random_policy: false,
            checkpoint_every: 0,
            model: ModelConfig::default(),
            expert: ExpertConfig::default(),
        };
        cfg.apply_ablation(Ablation::KgAttention);
        cfg
    }
}

impl TrainConfig {
    pub fn apply_ablation(&mut self, ablation: Ablation) {
        let (a3c, il, tse, kg, att) = match ablation {
            Ablation::Random => (false, false, false, false, false),
            Ablation::Il => (false, true, false, false, false),
            Ablation::LstmA3c => (true, false, false, false, false),
            Ablation::A3cIl => (true, true, false, false, false),
            Ablation::A3cTse => (true, false, true, false, false),
            Ablation::IlTse => (true, true, true, false, false),
            Ablation::Kg => (true, true, true, true, false),
            Ablation::KgAttention => (true, true, true, true, true),
        };
        self.random_policy = ablation == Ablation::Random;
        self.a3c = a3c;
        self.il = il;
        self.tse = tse;
        self.model.use_kg = kg;
        self.model.use_attention = att;
    }

    pub fn il_horizon(&self) -> u64 {
        match self.il_frames {
            Some(f) => f,
            None if !self.a3c => self.frames,
            None => self.frames / 10,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            kind: self.optimizer,
            lr: self.lr,
            decay: self.rms_decay,
            eps: self.rms_eps,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            checked: true,
        }
    }

    pub fn episode(&self) -> EpisodeConfig {
        EpisodeConfig { max_steps: self.max_episode_steps, min_start_distance: self.min_start_distance }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if self.t_max == 0 {
            return bad("t_max must be at least 1");
        }
        if self.workers == 0 {
            return bad("at least one worker is required");
        }
        if self.il_interval == 0 {
            return bad("il_interval must be at least 1");
        }
        if self.max_episode_steps == 0 {
            return bad("max_episode_steps must be at least 1");
        }
        if !(self.lr > 0.0) || !(self.value_coef >= 0.0) || !(self.entropy_coef >= 0.0) {
            return bad("lr must be positive and loss coefficients nonnegative");
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// `R_t = r_t + gamma R_{t+1}`, seeded with `bootstrap`.
pub fn compute_returns(rewards: &[f64], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

/// `R_t - V_t` as constants.
pub fn advantages(tape: &Tape, values: &[Var], returns: &[f64]) -> Vec<f64> {
    values.iter().zip(returns).map(|(v, r)| r - tape.scalar(*v)).collect()
}

/// Coefficients of the actor-critic objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub value: f64,
    pub entropy: f64,
}

/// Loss handles; `total` is the scalar to differentiate.
pub struct LossTerms {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
}

/// `-sum adv log pi(a) + value_w sum (R - V)^2 - entropy_w sum H(pi)`.
///
/// `advantages` enter as constants, so the policy term sends no gradient into
/// the critic.
pub fn a3c_loss(
    tape: &mut Tape,
    steps: &[StepVars],
    actions: &[Action],
    returns: &[f64],
    advantages: &[f64],
    weights: LossWeights,
) -> Result<LossTerms, NnError> {
    if steps.is_empty() || steps.len() != actions.len() || actions.len() != returns.len() || returns.len() != advantages.len() {
        return Err(NnError::Shape(format!(
            "{} steps, {} actions, {} returns, {} advantages",
            steps.len(),
            actions.len(),
            returns.len(),
            advantages.len()
        )));
    }
    let mut policy_terms = Vec::new();
    let mut value_terms = Vec::new();
    let mut entropy_terms = Vec::new();
    for (((s, a), r), adv) in steps.iter().zip(actions).zip(returns).zip(advantages) {
        let logp = tape.log_softmax(s.logits)?;
        let picked = tape.pick(logp, a.index())?;
        policy_terms.push(tape.scale(picked, -adv));
        let target = tape.constant(Matrix::scalar(*r));
        let neg_v = tape.scale(s.value, -1.0);
        let diff = tape.add(target, neg_v)?;
        value_terms.push(tape.mul(diff, diff)?);
        let p = tape.softmax(s.logits, None)?;
        let plogp = tape.mul(p, logp)?;
        let neg_h = tape.sum(plogp);
        entropy_terms.push(tape.scale(neg_h, -1.0));
    }
    let policy = tape.add_n(&policy_terms)?;
    let value = tape.add_n(&value_terms)?;
    let entropy = tape.add_n(&entropy_terms)?;
    let wv = tape.scale(value, weights.value);
    let we = tape.scale(entropy, -weights.entropy);
    let total = tape.add_n(&[policy, wv, we])?;
    Ok(LossTerms { total, policy, value, entropy })
}

/// One collected step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Observation the action was chosen from.
    pub observation: Observation,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
    pub value: f64,
}

/// A full episode as explored by a worker.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub scene_index: usize,
    pub target_index: usize,
    pub start: Pose,
    pub target_observation: Observation,
    pub transitions: Vec<Transition>,
    /// Critic estimate after the last transition; zero when it ended the episode.
    pub bootstrap: f64,
}

/// A relabeled prefix of an explored trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SubTrajectory {
    /// Number of transitions kept from the original.
    pub length: usize,
    pub target_observation: Observation,
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
}

/// Categories that qualify an observation as a sub-target.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubTargetPool {
    /// Training targets handled by other workers.
    pub pooled_targets: BTreeSet<usize>,
    /// Pickupable categories that are not training targets.
    pub novel: BTreeSet<usize>,
}

impl SubTargetPool {
    pub fn qualifies(&self, obs: &Observation) -> bool {
        obs.entries.iter().any(|e| self.pooled_targets.contains(&e.category) || self.novel.contains(&e.category))
    }

    /// Pool for one worker's current target.
    pub fn for_target(scenes: &[Scene], scene_index: usize, target_index: usize, scope: SubTargetScope) -> Self {
        let category_of = |s: &Scene, t: usize| s.objects[s.targets[t].target_object_id].category;
        let own = category_of(&scenes[scene_index], target_index);
        let mut training = BTreeSet::new();
        let mut holdout = BTreeSet::new();
        for s in scenes {
            for (t, spec) in s.targets.iter().enumerate() {
                match spec.role {
                    TargetRole::Train => training.insert(category_of(s, t)),
                    TargetRole::Holdout => holdout.insert(category_of(s, t)),
                };
            }
        }
        let scene = &scenes[scene_index];
        let novel = scene
            .objects
            .iter()
            .filter(|o| o.pickupable)
            .map(|o| o.category)
            .filter(|c| !training.contains(c) && (scope == SubTargetScope::All || !holdout.contains(c)))
            .collect();
        let pooled_targets = training.into_iter().filter(|&c| c != own).collect();
        SubTargetPool { pooled_targets, novel }
    }
}

/// Splits a trajectory into relabeled prefixes ending at sampled sub-target observations.
pub fn tse_extract(
    trajectory: &Trajectory,
    pool: &SubTargetPool,
    sample_count: usize,
    rng: &mut impl Rng,
) -> Vec<SubTrajectory> {
    let candidates: Vec<usize> = trajectory
        .transitions
        .iter()
        .enumerate()
        .filter(|(_, t)| pool.qualifies(&t.observation))
        .map(|(i, _)| i + 1)
        .collect();
    let mut chosen: Vec<usize> = candidates.choose_multiple(rng, sample_count).copied().collect();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|j| {
            let prefix = &trajectory.transitions[..j];
            let mut actions: Vec<Action> = prefix.iter().map(|t| t.action).collect();
            let mut rewards: Vec<f64> = prefix.iter().map(|t| t.reward).collect();
            actions[j - 1] = Action::Stop;
            rewards[j - 1] = RELABELED_REWARD;
            SubTrajectory {
                length: j,
                target_observation: prefix[j - 1].observation.clone(),
                observations: prefix.iter().map(|t| t.observation.clone()).collect(),
                actions,
                rewards,
            }
        })
        .collect()
}

/// Gradients of the actor-critic loss over a complete, terminated step sequence,
/// processed in `t_max` chunks with the recurrent state carried between them.
pub fn replay_gradients(
    config: &TrainConfig,
    params: &ParameterSet,
    graph: &KnowledgeGraph,
    target_obs: &Observation,
    observations: &[Observation],
    actions: &[Action],
    rewards: &[f64],
) -> Result<Gradients, TrainError> {
    let returns = compute_returns(rewards, 0.0, config.gamma);
    let weights = LossWeights { value: config.value_coef, entropy: config.entropy_coef };
    let mut total = Gradients::zeros_like(params);
    let mut state = LstmState::zeros(config.model.lstm_hidden);
    for start in (0..observations.len()).step_by(config.t_max) {
        let end = (start + config.t_max).min(observations.len());
        let mut tape = Tape::new();
        let net = Network::bind(&mut tape, &config.model, params)?;
        let ctx = net.target_context(&mut tape, target_obs, graph)?;
        let (mut h, mut c) = net.state_vars(&mut tape, &state);
        let mut steps = Vec::with_capacity(end - start);
        for obs in &observations[start..end] {
            let s = net.step(&mut tape, &ctx, obs, h, c)?;
            h = s.h;
            c = s.c;
            steps.push(s);
        }
        state = LstmState { h: tape.value(h).data.clone(), c: tape.value(c).data.clone() };
        let values: Vec<Var> = steps.iter().map(|s| s.value).collect();
        let adv = advantages(&tape, &values, &returns[start..end]);
        let loss = a3c_loss(&mut tape, &steps, &actions[start..end], &returns[start..end], &adv, weights)?;
        let grads = tape.backward(loss.total);
        total.add_assign(&tape.param_gradients(&grads, params));
    }
    Ok(total)
}

/// Mean per-step cross-entropy between the policy and the expert's actions.
pub fn il_loss(
    tape: &mut Tape,
    net: &Network,
    ctx: &TargetContext,
    observations: &[Observation],
    actions: &[Action],
) -> Result<Var, TrainError> {
    if observations.is_empty() || observations.len() != actions.len() {
        return Err(TrainError::Config("expert trajectory must be nonempty and aligned".into()));
    }
    let zeros = LstmState::zeros(net.config().lstm_hidden);
    let (mut h, mut c) = net.state_vars(tape, &zeros);
    let mut terms = Vec::with_capacity(actions.len());
    for (obs, a) in observations.iter().zip(actions) {
        let s = net.step(tape, ctx, obs, h, c)?;
        h = s.h;
        c = s.c;
        terms.push(crate::nn::cross_entropy(tape, s.logits, a.index())?);
    }
    let sum = tape.add_n(&terms)?;
    Ok(tape.scale(sum, 1.0 / actions.len() as f64))
}

/// An expert trajectory with the observations seen while replaying it.
#[derive(Debug, Clone)]
pub struct Demonstration {
    pub trajectory: ExpertTrajectory,
    pub observations: Vec<Observation>,
}

impl Demonstration {
    pub fn new(scene: &Scene, trajectory: ExpertTrajectory) -> Result<Self, TrainError> {
        let replay = trajectory.replay(scene)?;
        if replay.outcome != Outcome::Success {
            return Err(TrainError::Config("expert trajectory does not replay to success".into()));
        }
        Ok(Demonstration { trajectory, observations: replay.observations })
    }
}

/// Imitation loss value and gradients for one demonstration.
pub fn il_update(
    config: &ModelConfig,
    params: &ParameterSet,
    graph: &KnowledgeGraph,
    target_obs: &Observation,
    demo: &Demonstration,
) -> Result<(f64, Gradients), TrainError> {
    let mut tape = Tape::new();
    let net = Network::bind(&mut tape, config, params)?;
    let ctx = net.target_context(&mut tape, target_obs, graph)?;
    let loss = il_loss(&mut tape, &net, &ctx, &demo.observations, &demo.trajectory.actions)?;
    let grads = tape.backward(loss);
    Ok((tape.scalar(loss), tape.param_gradients(&grads, params)))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub frame: u64,
    pub worker: usize,
    pub scene: usize,
    pub target: usize,
    pub episode_return: f64,
    pub episode_length: u32,
    pub success: bool,
    pub collisions: u32,
    /// Success rate over the last 100 logged episodes.
    pub sr_ma: f64,
}

const SR_WINDOW: usize = 100;

#[derive(Default)]
struct MetricsLog {
    records: Vec<EpisodeMetrics>,
    window: VecDeque<bool>,
}

impl MetricsLog {
    fn push(&mut self, mut m: EpisodeMetrics) {
        self.window.push_back(m.success);
        if self.window.len() > SR_WINDOW {
            self.window.pop_front();
        }
        m.sr_ma = self.window.iter().filter(|&&s| s).count() as f64 / self.window.len() as f64;
        self.records.push(m);
    }
}

pub fn metrics_to_jsonl(records: &[EpisodeMetrics]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

/// Model state stored in and restored from checkpoints.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: TrainConfig,
    pub params: ParameterSet,
    pub graph: KnowledgeGraph,
    pub frames: u64,
}

impl ModelState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint { frames: self.frames, meta: self.config.to_toml(), records: Vec::new() };
        ckpt.push_params(&self.params);
        ckpt.records.push(self.graph.to_record());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let config = TrainConfig::from_toml(&ckpt.meta)?;
        let mut params = config.model.init_params(0)?;
        ckpt.restore_params(&mut params)?;
        let graph = ckpt
            .record("kg.edge_counts")
            .and_then(KnowledgeGraph::from_record)
            .ok_or_else(|| TrainError::Checkpoint("missing or malformed knowledge graph".into()))?;
        if graph.size() != config.model.vocab_size {
            return Err(TrainError::Checkpoint("graph size differs from the model vocabulary".into()));
        }
        Ok(ModelState { config, params, graph, frames: ckpt.frames })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let ckpt = read_checkpoint(&bytes).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(&ckpt)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, TrainError> {
        let path = dir.join(format!("ckpt_{}.bin", self.frames));
        fs::write(&path, write_checkpoint(&self.to_checkpoint())).map_err(io_err(&path))?;
        Ok(path)
    }
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub metrics: Vec<EpisodeMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

/// Inputs of a training run. Output files go to `out_dir` when set.
pub struct TrainRun<'a> {
    pub config: &'a TrainConfig,
    pub scenes: &'a [Scene],
    pub out_dir: Option<&'a Path>,
    pub resume: Option<ModelState>,
}

/// The (scene, target) pairs trained on, in a fixed order.
pub fn training_targets(scenes: &[Scene]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (s, scene) in scenes.iter().enumerate() {
        for (t, spec) in scene.targets.iter().enumerate() {
            if spec.role == TargetRole::Train {
                out.push((s, t));
            }
        }
    }
    out
}

/// Targets handled by `worker`: round-robin, wrapping when workers outnumber targets.
pub fn worker_targets(worker: usize, workers: usize, targets: &[(usize, usize)]) -> Vec<(usize, usize)> {
    if workers >= targets.len() {
        vec![targets[worker % targets.len()]]
    } else {
        targets.iter().enumerate().filter(|(i, _)| i % workers == worker).map(|(_, t)| *t).collect()
    }
}

struct Shared<'a> {
    config: &'a TrainConfig,
    scenes: &'a [Scene],
    params: SharedParams,
    graph: SharedGraph,
    frames: AtomicU64,
    budget: u64,
    demos: Vec<Option<Demonstration>>,
    targets: Vec<(usize, usize)>,
    log: Mutex<MetricsLog>,
    next_checkpoint: Mutex<u64>,
    checkpoints: Mutex<Vec<PathBuf>>,
    out_dir: Option<&'a Path>,
}

impl Shared<'_> {
    /// Reserves one frame of the budget; false once the budget is spent.
    fn take_frame(&self) -> bool {
        self.frames.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |f| (f < self.budget).then_some(f + 1)).is_ok()
    }

    fn snapshot_state(&self) -> ModelState {
        ModelState {
            config: self.config.clone(),
            params: self.params.snapshot(),
            graph: self.graph.snapshot(),
            frames: self.frames.load(Ordering::SeqCst),
        }
    }

    fn maybe_checkpoint(&self) -> Result<(), TrainError> {
        let (Some(dir), every) = (self.out_dir, self.config.checkpoint_every) else { return Ok(()) };
        if every == 0 {
            return Ok(());
        }
        let mut next = self.next_checkpoint.lock().unwrap_or_else(|e| e.into_inner());
        let frames = self.frames.load(Ordering::SeqCst);
        if frames >= *next && frames < self.budget {
            let path = self.snapshot_state().save(dir)?;
            self.checkpoints.lock().unwrap_or_else(|e| e.into_inner()).push(path);
            *next = (frames / every + 1) * every;
        }
        Ok(())
    }

    fn demo_for(&self, scene: usize, target: usize) -> Option<&Demonstration> {
        let i = self.targets.iter().position(|&p| p == (scene, target))?;
        self.demos[i].as_ref()
    }
}

fn sample_action(probs: &[f64], rng: &mut ChaCha8Rng) -> Action {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Action::from_index(i).expect("one probability per action");
        }
    }
    Action::Stop
}

struct Worker<'s, 'a> {
    id: usize,
    shared: &'s Shared<'a>,
    rng: ChaCha8Rng,
    local: ParameterSet,
    segments: u64,
}

impl Worker<'_, '_> {
    fn run(&mut self) -> Result<(), TrainError> {
        let cfg = self.shared.config;
        let mine = worker_targets(self.id, cfg.workers, &self.shared.targets);
        let mut turn = 0usize;
        while self.shared.frames.load(Ordering::SeqCst) < self.shared.budget {
            let (scene_index, target_index) = mine[turn % mine.len()];
            turn += 1;
            if !self.episode(scene_index, target_index)? {
                break;
            }
        }
        Ok(())
    }

    /// Runs one episode; false when the frame budget ran out before it ended.
    fn episode(&mut self, scene_index: usize, target_index: usize) -> Result<bool, TrainError> {
        let shared = self.shared;
        let cfg = shared.config;
        let scene = &shared.scenes[scene_index];
        let reset_seed: u64 = self.rng.gen();
        let (mut env, mut obs) = EpisodeState::reset(scene, target_index, reset_seed, &cfg.episode())?;
        let start = env.pose;
        let target_obs = env.target().target_observation.clone();
        let mut trajectory = Trajectory {
            scene_index,
            target_index,
            start,
            target_observation: target_obs.clone(),
            transitions: Vec::new(),
            bootstrap: 0.0,
        };
        let mut state = LstmState::zeros(cfg.model.lstm_hidden);
        let mut episode_return = 0.0;
        shared.graph.update(&obs.visible)?;

        while !env.done {
            shared.params.sync_into(&mut self.local);
            let graph = shared.graph.snapshot();
            let mut tape = Tape::new();
            let net = Network::bind(&mut tape, &cfg.model, &self.local)?;
            let ctx = net.target_context(&mut tape, &target_obs, &graph)?;
            let (mut h, mut c) = net.state_vars(&mut tape, &state);
            let mut steps = Vec::new();
            let mut actions = Vec::new();
            let mut rewards = Vec::new();
            let mut out_of_frames = false;
            while steps.len() < cfg.t_max && !env.done {
                if !shared.take_frame() {
                    out_of_frames = true;
                    break;
                }
                let s = net.step(&mut tape, &ctx, &obs, h, c)?;
                let action = if cfg.random_policy {
                    Action::ALL[self.rng.gen_range(0..Action::COUNT)]
                } else {
                    let probs = crate::nn::softmax_values(&tape.value(s.logits).data, None)?;
                    sample_action(&probs, &mut self.rng)
                };
                let result = env.step(action)?;
                shared.graph.update(&result.observation.visible)?;
                episode_return += result.reward;
                trajectory.transitions.push(Transition {
                    observation: obs,
                    action,
                    reward: result.reward,
                    done: result.done,
                    value: tape.scalar(s.value),
                });
                obs = result.observation;
                h = s.h;
                c = s.c;
                actions.push(action);
                rewards.push(result.reward);
                steps.push(s);
            }
            if !steps.is_empty() && cfg.a3c && !cfg.random_policy {
                let bootstrap = if env.done {
                    0.0
                } else {
                    let next = net.step(&mut tape, &ctx, &obs, h, c)?;
                    tape.scalar(next.value)
                };
                let returns = compute_returns(&rewards, bootstrap, cfg.gamma);
                let values: Vec<Var> = steps.iter().map(|s| s.value).collect();
                let adv = advantages(&tape, &values, &returns);
                let weights = LossWeights { value: cfg.value_coef, entropy: cfg.entropy_coef };
                let loss = a3c_loss(&mut tape, &steps, &actions, &returns, &adv, weights)?;
                let grads = tape.backward(loss.total);
                shared.params.apply(&tape.param_gradients(&grads, &self.local), &cfg.optim())?;
            }
            state = LstmState { h: tape.value(h).data.clone(), c: tape.value(c).data.clone() };
            self.segments += 1;
            self.imitate(scene_index, target_index, &target_obs)?;
            shared.maybe_checkpoint()?;
            if out_of_frames {
                return Ok(false);
            }
        }

        let frame = shared.frames.load(Ordering::SeqCst);
        shared.log.lock().unwrap_or_else(|e| e.into_inner()).push(EpisodeMetrics {
            frame,
            worker: self.id,
            scene: scene_index,
            target: target_index,
            episode_return,
            episode_length: env.steps,
            success: env.outcome == Outcome::Success,
            collisions: env.collisions,
            sr_ma: 0.0,
        });
        if cfg.tse && !cfg.random_policy {
            self.relabel(scene_index, target_index, &trajectory)?;
        }
        Ok(true)
    }

    fn imitate(&mut self, scene_index: usize, target_index: usize, target_obs: &Observation) -> Result<(), TrainError> {
        let shared = self.shared;
        let cfg = shared.config;
        if !cfg.il || cfg.random_policy || self.segments % cfg.il_interval as u64 != 0 {
            return Ok(());
        }
        if shared.frames.load(Ordering::SeqCst) >= cfg.il_horizon() {
            return Ok(());
        }
        let Some(demo) = shared.demo_for(scene_index, target_index) else { return Ok(()) };
        shared.params.sync_into(&mut self.local);
        let graph = shared.graph.snapshot();
        let (_, grads) = il_update(&cfg.model, &self.local, &graph, target_obs, demo)?;
        shared.params.apply(&grads, &cfg.optim())?;
        Ok(())
    }

    fn relabel(&mut self, scene_index: usize, target_index: usize, trajectory: &Trajectory) -> Result<(), TrainError> {
        let shared = self.shared;
        let cfg = shared.config;
        let pool = SubTargetPool::for_target(shared.scenes, scene_index, target_index, cfg.tse_scope);
        for sub in tse_extract(trajectory, &pool, cfg.tse_samples, &mut self.rng) {
            // every sub-trajectory starts from the current global parameters
            shared.params.sync_into(&mut self.local);
            let graph = shared.graph.snapshot();
            let grads = replay_gradients(
                cfg,
                &self.local,
                &graph,
                &sub.target_observation,
                &sub.observations,
                &sub.actions,
                &sub.rewards,
            )?;
            shared.params.apply(&grads, &cfg.optim())?;
        }
        Ok(())
    }
}

/// Runs asynchronous training. A single worker is fully deterministic.
pub fn train(run: TrainRun) -> Result<TrainOutcome, TrainError> {
    let cfg = run.config;
    cfg.validate()?;
    if run.scenes.is_empty() {
        return Err(TrainError::Config("no scenes to train on".into()));
    }
    for s in run.scenes {
        if s.vocab_size() != cfg.model.vocab_size {
            return Err(TrainError::Config(format!(
                "scene vocabulary has {} categories, model expects {}",
                s.vocab_size(),
                cfg.model.vocab_size
            )));
        }
    }
    let targets = training_targets(run.scenes);
    if targets.is_empty() {
        return Err(TrainError::Config("scenes declare no training targets".into()));
    }
    let (params, graph, start_frames) = match run.resume {
        Some(state) => {
            cfg.model.check_params(&state.params)?;
            (state.params, state.graph, state.frames)
        }
        None => (cfg.model.init_params(cfg.seed)?, KnowledgeGraph::new(cfg.model.vocab_size), 0),
    };
    let demos = targets
        .iter()
        .enumerate()
        .map(|(i, &(s, t))| {
            if !cfg.il {
                return Ok(None);
            }
            let seed = cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64);
            let traj = generate_expert(&run.scenes[s], t, seed, &cfg.expert)?;
            Demonstration::new(&run.scenes[s], traj).map(Some)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    if let Some(dir) = run.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("config.toml");
        fs::write(&path, cfg.to_toml()).map_err(io_err(&path))?;
    }
    let every = cfg.checkpoint_every.max(1);
    let shared = Shared {
        config: cfg,
        scenes: run.scenes,
        params: SharedParams::new(params),
        graph: SharedGraph::new(graph),
        frames: AtomicU64::new(start_frames),
        budget: cfg.frames.max(start_frames),
        demos,
        targets,
        log: Mutex::new(MetricsLog::default()),
        next_checkpoint: Mutex::new((start_frames / every + 1) * every),
        checkpoints: Mutex::new(Vec::new()),
        out_dir: run.out_dir,
    };
    let mut checkpoints = Vec::new();
    if let Some(dir) = run.out_dir {
        checkpoints.push(shared.snapshot_state().save(dir)?);
    }

    let results: Vec<Result<(), TrainError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.workers)
            .map(|id| {
                let shared = &shared;
                scope.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ start_frames.rotate_left(17));
                    rng.set_stream(id as u64);
                    let mut worker = Worker { id, shared, rng, local: shared.params.snapshot(), segments: 0 };
                    worker.run()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
    });
    results.into_iter().collect::<Result<Vec<()>, _>>()?;

    let state = shared.snapshot_state();
    checkpoints.extend(shared.checkpoints.into_inner().unwrap_or_else(|e| e.into_inner()));
    let metrics = shared.log.into_inner().unwrap_or_else(|e| e.into_inner()).records;
    if let Some(dir) = run.out_dir {
        if state.frames > start_frames {
            checkpoints.push(state.save(dir)?);
        }
        let path = dir.join("metrics.jsonl");
        let mut file = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        file.write_all(metrics_to_jsonl(&metrics).as_bytes()).map_err(io_err(&path))?;
    }
    Ok(TrainOutcome { state, metrics, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::apply_gradients;
    use crate::nn::testutil::max_gradient_error_with_step;
    use crate::policy::Agent;
    use crate::scene::{generate_scene, Direction, GeneratorConfig, VisibleEntry};
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn small_model(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            visual_dim: 16,
            siamese_dim: 16,
            fusion_dim: 16,
            gcn_widths: [8, 8, 8],
            node_dim: 8,
            attention_hidden: 4,
            lstm_hidden: 16,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn tiny_scene(seed: u64) -> Scene {
        let cfg = GeneratorConfig {
            width: 6,
            height: 6,
            vocab_size: 14,
            wall_cells: 8,
            receptacle_count: 2,
            object_count: 8,
            static_targets: 2,
            actionable_targets: 1,
            holdout_targets: 0,
            ..Default::default()
        };
        generate_scene(seed, &cfg).unwrap()
    }

    #[test]
    fn imitation_overfits_one_demonstration() {
        let scene = tiny_scene(1);
        let model = small_model(14);
        let mut params = model.init_params(3).unwrap();
        let graph = KnowledgeGraph::new(14);
        let target = 0;
        let traj = generate_expert(&scene, target, 9, &ExpertConfig::default()).unwrap();
        let demo = Demonstration::new(&scene, traj).unwrap();
        let target_obs = scene.targets[target].target_observation.clone();
        let optim = OptimConfig { lr: 3e-3, ..OptimConfig::default() };
        let first = il_update(&model, &params, &graph, &target_obs, &demo).unwrap().0;
        let mut last = first;
        for _ in 0..200 {
            let (loss, grads) = il_update(&model, &params, &graph, &target_obs, &demo).unwrap();
            apply_gradients(&mut params, &grads, &optim).unwrap();
            last = loss;
        }
        assert!(last < first * 0.1, "loss {first} -> {last}");
        let mut agent = Agent::new(&model, &params, &graph, target_obs).unwrap();
        let hits = demo
            .observations
            .iter()
            .zip(&demo.trajectory.actions)
            .filter(|(o, a)| agent.act(o).unwrap().greedy_action() == **a)
            .count();
        assert_eq!(hits, demo.trajectory.len());
    }

    const TOY_TARGET: usize = 1;

    fn observations(scene: &Scene, actions: &[Action]) -> Vec<Observation> {
        let start = *scene.targets[TOY_TARGET].goal_poses.iter().next().unwrap();
        crate::expert::replay_actions(scene, TOY_TARGET, start, actions).unwrap().observations
    }

    #[test]
    fn returns_examples() {
        assert_eq!(compute_returns(&[1.0], 0.0, 0.9), vec![1.0]);
        let r = compute_returns(&[0.0, 0.0, 1.0], 0.0, 0.9);
        for (a, b) in r.iter().zip([0.81, 0.9, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(compute_returns(&[0.0], 2.0, 0.5), vec![1.0]);
    }

    proptest! {
        #[test]
        fn returns_match_direct_sum(
            rewards in prop::collection::vec(-1.0f64..10.0, 1..50),
            bootstrap in -5.0f64..5.0,
            gamma in 0.01f64..0.999,
        ) {
            let got = compute_returns(&rewards, bootstrap, gamma);
            let k = rewards.len();
            for t in 0..k {
                let direct: f64 = (t..k).map(|i| gamma.powi((i - t) as i32) * rewards[i]).sum::<f64>()
                    + gamma.powi((k - t) as i32) * bootstrap;
                prop_assert!((got[t] - direct).abs() <= 1e-12 * direct.abs().max(1.0));
            }
        }
    }

    struct Toy {
        scene: Scene,
        model: ModelConfig,
        params: ParameterSet,
        graph: KnowledgeGraph,
        obs: Vec<Observation>,
        actions: Vec<Action>,
    }

    fn toy(steps: usize) -> Toy {
        let scene = tiny_scene(1);
        let model = small_model(14);
        let mut params = model.init_params(5).unwrap();
        // zero biases put empty views exactly on ReLU kinks, where finite differences are meaningless
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..params.len() {
            params.param_mut(i).value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
        }
        let mut graph = KnowledgeGraph::new(14);
        let actions = [Action::RotateLeft, Action::MoveForward, Action::LookUp, Action::RotateRight][..steps].to_vec();
        let obs = observations(&scene, &actions);
        for o in &obs {
            graph.update(&o.visible).unwrap();
        }
        Toy { scene, model, params, graph, obs, actions }
    }

    fn toy_steps(tape: &mut Tape, t: &Toy, params: &ParameterSet) -> Vec<StepVars> {
        let net = Network::bind(tape, &t.model, params).unwrap();
        let ctx = net.target_context(tape, &t.scene.targets[TOY_TARGET].target_observation, &t.graph).unwrap();
        let (mut h, mut c) = net.state_vars(tape, &LstmState::zeros(t.model.lstm_hidden));
        let mut out = Vec::new();
        for o in &t.obs {
            let s = net.step(tape, &ctx, o, h, c).unwrap();
            h = s.h;
            c = s.c;
            out.push(s);
        }
        out
    }

    #[test]
    fn zero_advantage_leaves_policy_term_without_gradient() {
        let t = toy(3);
        let mut tape = Tape::new();
        let steps = toy_steps(&mut tape, &t, &t.params);
        let terms = a3c_loss(&mut tape, &steps, &t.actions, &[1.0, 2.0, 3.0], &[0.0; 3], LossWeights { value: 0.5, entropy: 0.01 })
            .unwrap();
        let grads = tape.backward(terms.policy);
        let g = tape.param_gradients(&grads, &t.params);
        assert_eq!(g.global_norm(), 0.0);
    }

    #[test]
    fn loss_collapses_to_policy_term() {
        let t = toy(1);
        let mut tape = Tape::new();
        let steps = toy_steps(&mut tape, &t, &t.params);
        let adv = 0.7;
        let terms = a3c_loss(&mut tape, &steps, &t.actions, &[1.3], &[adv], LossWeights { value: 0.0, entropy: 0.0 }).unwrap();
        let logits = tape.value(steps[0].logits).data.clone();
        let logp = crate::nn::softmax_values(&logits, None).unwrap()[t.actions[0].index()].ln();
        assert!((tape.scalar(terms.total) - (-adv * logp)).abs() < 1e-12);
    }

    #[test]
    fn full_loss_gradient_check() {
        let t = toy(3);
        let returns = compute_returns(&[-0.01, -0.01, 9.99], 0.0, 0.99);
        // advantages are constants of the loss, so they are frozen at the base point
        let mut tape = Tape::new();
        let steps = toy_steps(&mut tape, &t, &t.params);
        let values: Vec<Var> = steps.iter().map(|s| s.value).collect();
        let adv = advantages(&tape, &values, &returns);
        let weights = LossWeights { value: 0.5, entropy: 0.01 };
        // the loss is in the hundreds, so a wider step keeps round-off below the tolerance
        let err = max_gradient_error_with_step(&t.params, 1e-4, |tape, p| {
            let steps = toy_steps(tape, &t, p);
            a3c_loss(tape, &steps, &t.actions, &returns, &adv, weights).unwrap().total
        });
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn mismatched_loss_inputs_are_rejected() {
        let t = toy(2);
        let mut tape = Tape::new();
        let steps = toy_steps(&mut tape, &t, &t.params);
        assert!(a3c_loss(&mut tape, &steps, &t.actions, &[1.0], &[0.0], LossWeights { value: 0.5, entropy: 0.0 }).is_err());
    }

    fn entry(category: usize) -> VisibleEntry {
        VisibleEntry { category, depth_bin: 1, direction: Direction::Center, open: false }
    }

    fn synthetic(shown: &[Option<usize>]) -> Trajectory {
        let transitions = shown
            .iter()
            .map(|c| {
                let mut obs = Observation { visible: vec![false; 6], entries: vec![], collision_last: false };
                if let Some(c) = c {
                    obs.visible[*c] = true;
                    obs.entries.push(entry(*c));
                }
                Transition { observation: obs, action: Action::MoveForward, reward: STEP_PENALTY, done: false, value: 0.0 }
            })
            .collect();
        Trajectory {
            scene_index: 0,
            target_index: 0,
            start: Pose::new(0, 0, crate::scene::Heading::N, crate::scene::Pitch::Level),
            target_observation: Observation { visible: vec![false; 6], entries: vec![], collision_last: false },
            transitions,
            bootstrap: 0.0,
        }
    }

    #[test]
    fn sub_trajectory_construction() {
        let pool = SubTargetPool { pooled_targets: BTreeSet::from([2]), novel: BTreeSet::from([4]) };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(tse_extract(&synthetic(&[None, Some(1), Some(3), None]), &pool, 5, &mut rng).is_empty());

        let traj = synthetic(&[None, None, Some(4), None, None, Some(1), None]);
        let subs = tse_extract(&traj, &pool, 5, &mut rng);
        assert_eq!(subs.len(), 1);
        let sub = &subs[0];
        assert_eq!(sub.length, 3);
        assert_eq!(sub.rewards, vec![STEP_PENALTY, STEP_PENALTY, 9.99]);
        assert_eq!(sub.actions, vec![Action::MoveForward, Action::MoveForward, Action::Stop]);
        assert_eq!(sub.target_observation, traj.transitions[2].observation);

        let many = synthetic(&[Some(2); 9]);
        let subs = tse_extract(&many, &pool, 5, &mut rng);
        assert_eq!(subs.len(), 5);
        assert!(subs.windows(2).all(|w| w[0].length < w[1].length));
        assert!(tse_extract(&many, &pool, 0, &mut rng).is_empty());
    }

    #[test]
    fn pool_excludes_own_and_holdout_targets() {
        let cfg = GeneratorConfig { holdout_targets: 1, ..GeneratorConfig::default() };
        let scene = generate_scene(4, &cfg).unwrap();
        let cat = |t: usize| scene.objects[scene.targets[t].target_object_id].category;
        let holdout = scene.targets.iter().position(|t| t.role == TargetRole::Holdout).unwrap();
        let scenes = [scene.clone()];
        let seen = SubTargetPool::for_target(&scenes, 0, 0, SubTargetScope::Seen);
        assert!(!seen.pooled_targets.contains(&cat(0)));
        assert!(seen.pooled_targets.contains(&cat(1)));
        assert!(!seen.novel.contains(&cat(holdout)));
        let all = SubTargetPool::for_target(&scenes, 0, 0, SubTargetScope::All);
        assert!(all.novel.contains(&cat(holdout)));
    }

    #[test]
    fn uniform_policy_imitation_loss_is_ln_10() {
        let scene = tiny_scene(1);
        let model = small_model(14);
        let mut params = model.init_params(1).unwrap();
        for name in ["actor.w", "actor.b"] {
            let i = params.index_of(name).unwrap();
            params.param_mut(i).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let demo = Demonstration::new(&scene, generate_expert(&scene, 1, 2, &ExpertConfig::default()).unwrap()).unwrap();
        let graph = KnowledgeGraph::new(14);
        let (loss, _) = il_update(&model, &params, &graph, &scene.targets[1].target_observation, &demo).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    fn tiny_config(frames: u64) -> TrainConfig {
        TrainConfig { frames, max_episode_steps: 60, model: small_model(14), ..TrainConfig::default() }
    }

    #[test]
    fn empty_budget_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = [tiny_scene(1)];
        let cfg = tiny_config(0);
        let out = train(TrainRun { config: &cfg, scenes: &scenes, out_dir: Some(dir.path()), resume: None }).unwrap();
        assert_eq!(out.checkpoints, vec![dir.path().join("ckpt_0.bin")]);
        assert!(out.metrics.is_empty());
        assert_eq!(out.state.params, cfg.model.init_params(cfg.seed).unwrap());
        let loaded = ModelState::load(&out.checkpoints[0]).unwrap();
        assert_eq!(loaded.config, cfg);
        assert!(dir.path().join("config.toml").exists());
    }

    #[test]
    fn single_worker_runs_are_identical() {
        let scenes = [tiny_scene(1)];
        let cfg = tiny_config(1500);
        let run = || train(TrainRun { config: &cfg, scenes: &scenes, out_dir: None, resume: None }).unwrap();
        let (a, b) = (run(), run());
        assert!(!a.metrics.is_empty());
        assert_eq!(metrics_to_jsonl(&a.metrics), metrics_to_jsonl(&b.metrics));
        assert_eq!(a.state.params, b.state.params);
    }

    #[test]
    fn workers_spend_exactly_the_budget() {
        let scenes = [tiny_scene(1)];
        let cfg = TrainConfig { workers: 4, ..tiny_config(1200) };
        let out = train(TrainRun { config: &cfg, scenes: &scenes, out_dir: None, resume: None }).unwrap();
        assert_eq!(out.state.frames, 1200);
        let logged: u64 = out.metrics.iter().map(|m| m.episode_length as u64).sum();
        assert!(logged <= 1200);
        assert!(out.state.graph.edge_total() > 0);
    }

    #[test]
    fn resume_continues_the_frame_count() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = [tiny_scene(1)];
        let cfg = TrainConfig { checkpoint_every: 400, ..tiny_config(1000) };
        let first = train(TrainRun { config: &cfg, scenes: &scenes, out_dir: Some(dir.path()), resume: None }).unwrap();
        assert!(first.checkpoints.len() >= 3);
        assert_eq!(first.checkpoints.last().unwrap(), &dir.path().join("ckpt_1000.bin"));
        let state = ModelState::load(first.checkpoints.last().unwrap()).unwrap();
        // checkpoints hold single-precision values
        for (a, b) in state.params.tensors().zip(first.state.params.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 1e-6 * y.abs().max(1.0)));
        }
        let more = TrainConfig { frames: 1600, ..cfg.clone() };
        let second = train(TrainRun { config: &more, scenes: &scenes, out_dir: None, resume: Some(state) }).unwrap();
        assert_eq!(second.state.frames, 1600);
    }

    #[test]
    fn config_round_trip_and_ablations() {
        let mut cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        let partial = TrainConfig::from_toml("frames = 7\n[model]\nlstm_hidden = 9\n").unwrap();
        assert_eq!((partial.frames, partial.model.lstm_hidden, partial.gamma), (7, 9, 0.99));
        cfg.apply_ablation(Ablation::LstmA3c);
        assert!(cfg.a3c && !cfg.il && !cfg.tse && !cfg.model.use_kg && !cfg.model.use_attention);
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()), Some(a));
        }
        assert!(TrainConfig { gamma: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { t_max: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn targets_round_robin() {
        let targets = [(0, 0), (0, 1), (0, 2)];
        assert_eq!(worker_targets(4, 8, &targets), vec![(0, 1)]);
        assert_eq!(worker_targets(0, 2, &targets), vec![(0, 0), (0, 2)]);
        assert_eq!(worker_targets(1, 2, &targets), vec![(0, 1)]);
    }
}
