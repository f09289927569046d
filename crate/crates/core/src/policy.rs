//! Navigation network: symbolic featurizer, siamese fusion of the current and
//! target views, GCN features over the knowledge graph, masked attention, an
//! LSTM core and actor/critic heads.
//!
//! Everything runs on a [`Tape`], so the same code serves rollouts, loss
//! construction and gradient checks. Per-episode constants (graph features and
//! the target branch) are built once into a [`TargetContext`] and reused by
//! every [`Network::step`] on the same tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{node_feature_init, KnowledgeGraph};
use crate::nn::{dense, gcn_layer, lstm_step, LstmVars, Matrix, NnError, ParameterSet, Tape, Tensor, Var};
use crate::scene::{Action, Observation};

/// Encoding slots per category: visible, three depth bins, three directions, open.
pub const SLOTS_PER_CATEGORY: usize = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("observation has {got} categories, model expects {expected}")]
    Vocabulary { expected: usize, got: usize },
    #[error("no visible category in the observation or the target view; attention is undefined")]
    NothingToAttend,
    #[error("invalid model config: {0}")]
    Config(String),
}

/// What the graph branch feeds into the LSTM next to the fused visual features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// The attention distribution itself, one entry per category.
    Probabilities,
    /// Attention-weighted sum of the fused node features.
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub visual_dim: usize,
    pub siamese_dim: usize,
    pub fusion_dim: usize,
    pub gcn_widths: [usize; 3],
    pub node_dim: usize,
    pub attention_hidden: usize,
    pub lstm_hidden: usize,
    pub use_kg: bool,
    pub use_attention: bool,
    pub readout: Readout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 40,
            visual_dim: 128,
            siamese_dim: 128,
            fusion_dim: 128,
            gcn_widths: [64, 64, 64],
            node_dim: 64,
            attention_hidden: 32,
            lstm_hidden: 128,
            use_kg: true,
            use_attention: true,
            readout: Readout::Probabilities,
        }
    }
}

impl ModelConfig {
    pub fn encoding_len(&self) -> usize {
        SLOTS_PER_CATEGORY * self.vocab_size + 1
    }

    /// Width of the graph features appended to the LSTM input.
    pub fn graph_input_dim(&self) -> usize {
        match (self.use_kg, self.use_attention, self.readout) {
            (false, _, _) => 0,
            (true, true, Readout::Probabilities) => self.vocab_size,
            (true, _, _) => self.node_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.vocab_size,
            self.visual_dim,
            self.siamese_dim,
            self.fusion_dim,
            self.node_dim,
            self.attention_hidden,
            self.lstm_hidden,
        ];
        if dims.iter().chain(&self.gcn_widths).any(|&d| d == 0) {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let mut out = vec![
            ("feat.w", vec![self.encoding_len(), self.visual_dim]),
            ("feat.b", vec![self.visual_dim]),
            ("siamese.w", vec![self.visual_dim, self.siamese_dim]),
            ("siamese.b", vec![self.siamese_dim]),
            ("fusion.w", vec![2 * self.siamese_dim, self.fusion_dim]),
            ("fusion.b", vec![self.fusion_dim]),
        ];
        if self.use_kg {
            let [g0, g1, g2] = self.gcn_widths;
            out.extend([
                ("gcn.0.w", vec![self.vocab_size, g0]),
                ("gcn.1.w", vec![g0, g1]),
                ("gcn.2.w", vec![g1, g2]),
                ("sp_siamese.w", vec![g2, self.node_dim]),
                ("sp_fusion.w", vec![2 * self.node_dim, self.node_dim]),
            ]);
            if self.use_attention {
                out.extend([
                    ("att.fc1.w", vec![self.node_dim, self.attention_hidden]),
                    ("att.fc1.b", vec![self.attention_hidden]),
                    ("att.fc2.w", vec![self.attention_hidden, 1]),
                ]);
            }
        }
        let input = self.fusion_dim + self.graph_input_dim();
        let h = self.lstm_hidden;
        out.extend([
            ("lstm.wx", vec![input, 4 * h]),
            ("lstm.wh", vec![h, 4 * h]),
            ("lstm.b", vec![4 * h]),
            ("actor.w", vec![h, Action::COUNT]),
            ("actor.b", vec![Action::COUNT]),
            ("critic.w", vec![h, 1]),
            ("critic.b", vec![1]),
        ]);
        out
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init_params(&self, seed: u64) -> Result<ParameterSet, ModelError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for (name, shape) in self.parameter_shapes() {
            let t = match shape[..] {
                [r, c] => Tensor::glorot(r, c, &mut rng),
                _ => Tensor::zeros(shape),
            };
            params.insert(name, t)?;
        }
        Ok(params)
    }

    /// Checks that `params` has exactly this config's layout.
    pub fn check_params(&self, params: &ParameterSet) -> Result<(), ModelError> {
        let shapes = self.parameter_shapes();
        if shapes.len() != params.len() {
            return Err(ModelError::Config(format!("expected {} tensors, found {}", shapes.len(), params.len())));
        }
        for ((name, shape), (got_name, p)) in shapes.iter().zip(params.iter()) {
            if *name != got_name || shape[..] != *p.value.shape() {
                return Err(ModelError::Config(format!(
                    "tensor {got_name:?} {:?} does not match {name:?} {shape:?}",
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Fixed-length encoding of an observation before the learned projection.
pub fn encode_observation(obs: &Observation) -> Vec<f64> {
    let v = obs.vocab_size();
    let mut out = vec![0.0; SLOTS_PER_CATEGORY * v + 1];
    for e in &obs.entries {
        let c = e.category;
        out[c] = 1.0;
        out[v + 3 * c + (e.depth_bin.clamp(1, 3) as usize - 1)] = 1.0;
        out[4 * v + 3 * c + e.direction.index()] = 1.0;
        if e.open {
            out[7 * v + c] = 1.0;
        }
    }
    if obs.collision_last {
        out[8 * v] = 1.0;
    }
    out
}

/// Recurrent state carried between steps as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState { h: vec![0.0; hidden], c: vec![0.0; hidden] }
    }
}

/// Policy outputs of one step as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub value: f64,
    /// Attention over categories; `None` when the model has no attention.
    pub attention: Option<Vec<f64>>,
    pub lstm_state: LstmState,
}

impl PolicyOutput {
    pub fn probabilities(&self) -> Vec<f64> {
        crate::nn::softmax_values(&self.logits, None).expect("logits are never empty")
    }

    /// Greedy action with ties broken towards the lowest index.
    pub fn greedy_action(&self) -> Action {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        Action::from_index(best).expect("one logit per action")
    }
}

struct GraphVars {
    gcn: [Var; 3],
    sp_siamese: Var,
    sp_fusion: Var,
    attention: Option<(Var, Var, Var)>,
}

/// Parameters bound to one tape.
pub struct Network<'c> {
    config: &'c ModelConfig,
    feat: (Var, Var),
    siamese: (Var, Var),
    fusion: (Var, Var),
    graph: Option<GraphVars>,
    lstm: LstmVars,
    actor: (Var, Var),
    critic: (Var, Var),
}

/// Per-episode values shared by every step of one tape.
pub struct TargetContext {
    target_branch: Var,
    target_mask: Vec<bool>,
    nodes: Option<Var>,
    target_nodes: Option<Var>,
}

/// Tape handles produced by one step.
pub struct StepVars {
    pub logits: Var,
    pub value: Var,
    pub attention: Option<Var>,
    pub h: Var,
    pub c: Var,
}

impl<'c> Network<'c> {
    pub fn bind(tape: &mut Tape, config: &'c ModelConfig, params: &ParameterSet) -> Result<Self, ModelError> {
        config.check_params(params)?;
        let vars = tape.bind_all(params);
        let get = |name: &str| -> Result<Var, ModelError> { Ok(vars[params.index_of(name)?]) };
        let graph = if config.use_kg {
            Some(GraphVars {
                gcn: [get("gcn.0.w")?, get("gcn.1.w")?, get("gcn.2.w")?],
                sp_siamese: get("sp_siamese.w")?,
                sp_fusion: get("sp_fusion.w")?,
                attention: if config.use_attention {
                    Some((get("att.fc1.w")?, get("att.fc1.b")?, get("att.fc2.w")?))
                } else {
                    None
                },
            })
        } else {
            None
        };
        Ok(Network {
            config,
            feat: (get("feat.w")?, get("feat.b")?),
            siamese: (get("siamese.w")?, get("siamese.b")?),
            fusion: (get("fusion.w")?, get("fusion.b")?),
            graph,
            lstm: LstmVars { wx: get("lstm.wx")?, wh: get("lstm.wh")?, b: get("lstm.b")?, hidden: config.lstm_hidden },
            actor: (get("actor.w")?, get("actor.b")?),
            critic: (get("critic.w")?, get("critic.b")?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    fn check_vocab(&self, obs: &Observation) -> Result<(), ModelError> {
        if obs.vocab_size() != self.config.vocab_size {
            return Err(ModelError::Vocabulary { expected: self.config.vocab_size, got: obs.vocab_size() });
        }
        Ok(())
    }

    /// `ReLU(W x + b)` over the symbolic encoding.
    pub fn featurize(&self, tape: &mut Tape, obs: &Observation) -> Result<Var, ModelError> {
        self.check_vocab(obs)?;
        let x = tape.constant(Matrix::row_vector(encode_observation(obs)));
        let y = dense(tape, x, self.feat.0, Some(self.feat.1))?;
        Ok(tape.relu(y))
    }

    /// One siamese branch: `ReLU(W_s x + b_s)`. Both views go through these same weights.
    pub fn siamese_branch(&self, tape: &mut Tape, features: Var) -> Result<Var, ModelError> {
        let y = dense(tape, features, self.siamese.0, Some(self.siamese.1))?;
        Ok(tape.relu(y))
    }

    /// `ReLU(W_f [branch(x_t), branch(x_g)] + b_f)` from precomputed branch outputs.
    pub fn fuse_branches(&self, tape: &mut Tape, current: Var, target: Var) -> Result<Var, ModelError> {
        let cat = tape.concat(&[current, target])?;
        let y = dense(tape, cat, self.fusion.0, Some(self.fusion.1))?;
        Ok(tape.relu(y))
    }

    pub fn fuse_siamese(&self, tape: &mut Tape, x_current: Var, x_target: Var) -> Result<Var, ModelError> {
        let a = self.siamese_branch(tape, x_current)?;
        let b = self.siamese_branch(tape, x_target)?;
        self.fuse_branches(tape, a, b)
    }

    /// Third-layer GCN node features for a graph snapshot (`|V| x width`).
    pub fn node_features(&self, tape: &mut Tape, graph: &KnowledgeGraph) -> Result<Option<Var>, ModelError> {
        let Some(g) = &self.graph else { return Ok(None) };
        if graph.size() != self.config.vocab_size {
            return Err(ModelError::Vocabulary { expected: self.config.vocab_size, got: graph.size() });
        }
        let adj = tape.constant(graph.normalized_adjacency());
        let mut h = tape.constant(node_feature_init(graph.size()));
        for w in g.gcn {
            h = gcn_layer(tape, adj, h, w)?;
        }
        Ok(Some(h))
    }

    fn spatial_branch(&self, tape: &mut Tape, nodes: Var, mask: &[bool]) -> Result<Var, ModelError> {
        let g = self.graph.as_ref().expect("graph branch enabled");
        let masked = tape.mask_rows(nodes, mask)?;
        let y = tape.matmul(masked, g.sp_siamese)?;
        Ok(tape.relu(y))
    }

    /// Row-wise fused node features `Q` for the current and target visibility masks.
    pub fn spatial_features(
        &self,
        tape: &mut Tape,
        nodes: Var,
        current_mask: &[bool],
        target_mask: &[bool],
    ) -> Result<Var, ModelError> {
        let t = self.spatial_branch(tape, nodes, current_mask)?;
        let g = self.spatial_branch(tape, nodes, target_mask)?;
        self.fuse_spatial(tape, t, g)
    }

    fn fuse_spatial(&self, tape: &mut Tape, current: Var, target: Var) -> Result<Var, ModelError> {
        let g = self.graph.as_ref().expect("graph branch enabled");
        let cat = tape.concat(&[current, target])?;
        Ok(tape.matmul(cat, g.sp_fusion)?)
    }

    /// Masked softmax over per-category scores `fc2(ReLU(fc1(q_i)))`.
    pub fn attention(&self, tape: &mut Tape, q: Var, union_mask: &[bool]) -> Result<Var, ModelError> {
        let g = self.graph.as_ref().expect("graph branch enabled");
        let (fc1_w, fc1_b, fc2_w) = g.attention.ok_or_else(|| ModelError::Config("attention disabled".into()))?;
        if !union_mask.iter().any(|&m| m) {
            return Err(ModelError::NothingToAttend);
        }
        let hidden = dense(tape, q, fc1_w, Some(fc1_b))?;
        let hidden = tape.relu(hidden);
        let scores = tape.matmul(hidden, fc2_w)?;
        let scores = tape.reshape(scores, 1, self.config.vocab_size)?;
        Ok(tape.softmax(scores, Some(union_mask))?)
    }

    /// Builds the per-episode constants for a target view and graph snapshot.
    pub fn target_context(
        &self,
        tape: &mut Tape,
        target_obs: &Observation,
        graph: &KnowledgeGraph,
    ) -> Result<TargetContext, ModelError> {
        let x_g = self.featurize(tape, target_obs)?;
        let target_branch = self.siamese_branch(tape, x_g)?;
        let nodes = self.node_features(tape, graph)?;
        let target_nodes = match nodes {
            Some(n) => Some(self.spatial_branch(tape, n, &target_obs.visible)?),
            None => None,
        };
        Ok(TargetContext { target_branch, target_mask: target_obs.visible.clone(), nodes, target_nodes })
    }

    pub fn state_vars(&self, tape: &mut Tape, state: &LstmState) -> (Var, Var) {
        let h = tape.constant(Matrix::row_vector(state.h.clone()));
        let c = tape.constant(Matrix::row_vector(state.c.clone()));
        (h, c)
    }

    /// One policy step from the current observation.
    pub fn step(&self, tape: &mut Tape, ctx: &TargetContext, obs: &Observation, h: Var, c: Var) -> Result<StepVars, ModelError> {
        let x_t = self.featurize(tape, obs)?;
        let branch = self.siamese_branch(tape, x_t)?;
        let fused = self.fuse_branches(tape, branch, ctx.target_branch)?;
        let mut attention = None;
        let input = match (ctx.nodes, ctx.target_nodes) {
            (Some(nodes), Some(target_nodes)) => {
                let current = self.spatial_branch(tape, nodes, &obs.visible)?;
                let q = self.fuse_spatial(tape, current, target_nodes)?;
                let union: Vec<bool> = obs.visible.iter().zip(&ctx.target_mask).map(|(a, b)| *a || *b).collect();
                let extra = if self.config.use_attention {
                    let att = self.attention(tape, q, &union)?;
                    attention = Some(att);
                    match self.config.readout {
                        Readout::Probabilities => att,
                        Readout::Weighted => tape.matmul(att, q)?,
                    }
                } else {
                    // mean of q_i over the visible union, zero when nothing is visible
                    let count = union.iter().filter(|&&m| m).count();
                    let weights: Vec<f64> =
                        union.iter().map(|&m| if m { 1.0 / count as f64 } else { 0.0 }).collect();
                    let w = tape.constant(Matrix::row_vector(weights));
                    tape.matmul(w, q)?
                };
                tape.concat(&[fused, extra])?
            }
            _ => fused,
        };
        let (h, c) = lstm_step(tape, input, h, c, &self.lstm)?;
        let logits = dense(tape, h, self.actor.0, Some(self.actor.1))?;
        let value = dense(tape, h, self.critic.0, Some(self.critic.1))?;
        Ok(StepVars { logits, value, attention, h, c })
    }

    pub fn output(&self, tape: &Tape, step: &StepVars) -> PolicyOutput {
        PolicyOutput {
            logits: tape.value(step.logits).data.clone(),
            value: tape.scalar(step.value),
            attention: step.attention.map(|a| tape.value(a).data.clone()),
            lstm_state: LstmState { h: tape.value(step.h).data.clone(), c: tape.value(step.c).data.clone() },
        }
    }
}

/// Single forward pass on a fresh tape.
pub fn forward(
    config: &ModelConfig,
    params: &ParameterSet,
    obs: &Observation,
    target_obs: &Observation,
    graph: &KnowledgeGraph,
    state: &LstmState,
) -> Result<PolicyOutput, ModelError> {
    let mut tape = Tape::new();
    let net = Network::bind(&mut tape, config, params)?;
    let ctx = net.target_context(&mut tape, target_obs, graph)?;
    let (h, c) = net.state_vars(&mut tape, state);
    let step = net.step(&mut tape, &ctx, obs, h, c)?;
    Ok(net.output(&tape, &step))
}

/// Runs a policy over one episode, keeping graph and target features cached.
///
/// The tape is rebuilt every `refresh` steps so long episodes do not grow it
/// without bound; cached values are plain constants, so no gradients flow.
pub struct Agent<'a> {
    config: &'a ModelConfig,
    params: &'a ParameterSet,
    graph: &'a KnowledgeGraph,
    target_obs: Observation,
    state: LstmState,
    tape: Tape,
    cache: Option<(Network<'a>, TargetContext, usize)>,
}

const AGENT_TAPE_REFRESH: usize = 64;

impl<'a> Agent<'a> {
    pub fn new(
        config: &'a ModelConfig,
        params: &'a ParameterSet,
        graph: &'a KnowledgeGraph,
        target_obs: Observation,
    ) -> Result<Self, ModelError> {
        config.check_params(params)?;
        Ok(Agent {
            config,
            params,
            graph,
            target_obs,
            state: LstmState::zeros(config.lstm_hidden),
            tape: Tape::new(),
            cache: None,
        })
    }

    pub fn state(&self) -> &LstmState {
        &self.state
    }

    pub fn act(&mut self, obs: &Observation) -> Result<PolicyOutput, ModelError> {
        let stale = self.cache.as_ref().map_or(true, |(_, _, n)| *n >= AGENT_TAPE_REFRESH);
        if stale {
            self.tape = Tape::new();
            let net = Network::bind(&mut self.tape, self.config, self.params)?;
            let ctx = net.target_context(&mut self.tape, &self.target_obs, self.graph)?;
            self.cache = Some((net, ctx, 0));
        }
        let (net, ctx, used) = self.cache.as_mut().expect("cache filled above");
        *used += 1;
        let (h, c) = net.state_vars(&mut self.tape, &self.state);
        let step = net.step(&mut self.tape, ctx, obs, h, c)?;
        let out = net.output(&self.tape, &step);
        self.state = out.lstm_state.clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::max_gradient_error;
    use crate::scene::{Direction, VisibleEntry};
    use proptest::prelude::*;

    fn small(use_kg: bool, use_attention: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 5,
            visual_dim: 6,
            siamese_dim: 4,
            fusion_dim: 5,
            gcn_widths: [4, 3, 4],
            node_dim: 3,
            attention_hidden: 3,
            lstm_hidden: 4,
            use_kg,
            use_attention,
            readout: Readout::Probabilities,
        }
    }

    fn obs(visible: &[usize], collision: bool) -> Observation {
        let mut o = Observation::empty(5);
        for (k, &c) in visible.iter().enumerate() {
            o.visible[c] = true;
            let direction = [Direction::Left, Direction::Center, Direction::Right][k % 3];
            o.entries.push(VisibleEntry { category: c, depth_bin: (k % 3 + 1) as u8, direction, open: k == 1 });
        }
        o.collision_last = collision;
        o
    }

    fn graph() -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new(5);
        g.update(&[true, true, false, true, false]).unwrap();
        g.update(&[false, true, true, false, false]).unwrap();
        g
    }

    #[test]
    fn encoding_layout() {
        let o = obs(&[2, 4], true);
        let e = encode_observation(&o);
        assert_eq!(e.len(), 41);
        assert_eq!(e.iter().sum::<f64>(), 2.0 * 3.0 + 1.0 + 1.0);
        assert_eq!(e[2], 1.0);
        assert_eq!(e[5 + 3 * 2], 1.0); // depth bin 1 of category 2
        assert_eq!(e[20 + 3 * 4 + 1], 1.0); // centre direction of category 4
        assert_eq!(e[35 + 4], 1.0); // category 4 open
        assert_eq!(e[40], 1.0);
        assert_ne!(encode_observation(&obs(&[2], false)), encode_observation(&obs(&[3], false)));
    }

    #[test]
    fn empty_observation_projects_to_relu_bias() {
        let cfg = small(false, false);
        let mut params = cfg.init_params(1).unwrap();
        let bias: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        params.get_mut("feat.b").unwrap().data_mut().copy_from_slice(&bias);
        let mut tape = Tape::new();
        let net = Network::bind(&mut tape, &cfg, &params).unwrap();
        let x = net.featurize(&mut tape, &Observation::empty(5)).unwrap();
        let expected: Vec<f64> = bias.iter().map(|b| b.max(0.0)).collect();
        assert_eq!(tape.value(x).data, expected);
        let again = net.featurize(&mut tape, &Observation::empty(5)).unwrap();
        assert_eq!(tape.value(again), tape.value(x));
    }

    #[test]
    fn siamese_weights_are_shared() {
        let cfg = small(false, false);
        let params = cfg.init_params(2).unwrap();
        let mut tape = Tape::new();
        let net = Network::bind(&mut tape, &cfg, &params).unwrap();
        let xa = net.featurize(&mut tape, &obs(&[0, 1], false)).unwrap();
        let xb = net.featurize(&mut tape, &obs(&[3], true)).unwrap();
        let a = net.siamese_branch(&mut tape, xa).unwrap();
        let b = net.siamese_branch(&mut tape, xb).unwrap();
        let ab = tape.concat(&[a, b]).unwrap();
        let ba = tape.concat(&[b, a]).unwrap();
        let (ab, ba) = (tape.value(ab).data.clone(), tape.value(ba).data.clone());
        assert_eq!(&ab[..4], &ba[4..]);
        assert_eq!(&ab[4..], &ba[..4]);
        let same = net.siamese_branch(&mut tape, xa).unwrap();
        assert_eq!(tape.value(same), tape.value(a));

        // gradient of the shared matrix is the sum of both branch contributions
        let grad_of = |detach_current: bool, detach_target: bool| {
            let mut tape = Tape::new();
            let net = Network::bind(&mut tape, &cfg, &params).unwrap();
            let frozen = tape.constant(params.get("siamese.w").unwrap().to_matrix());
            let xa = net.featurize(&mut tape, &obs(&[0, 1], false)).unwrap();
            let xb = net.featurize(&mut tape, &obs(&[3], true)).unwrap();
            let branch = |tape: &mut Tape, x: Var, detach: bool| {
                let w = if detach { frozen } else { net.siamese.0 };
                let y = dense(tape, x, w, Some(net.siamese.1)).unwrap();
                tape.relu(y)
            };
            let a = branch(&mut tape, xa, detach_current);
            let b = branch(&mut tape, xb, detach_target);
            let fused = net.fuse_branches(&mut tape, a, b).unwrap();
            let loss = tape.sum(fused);
            let g = tape.param_gradients(&tape.backward(loss), &params);
            g.tensors[params.index_of("siamese.w").unwrap()].clone()
        };
        let both = grad_of(false, false);
        let current_only = grad_of(false, true);
        let target_only = grad_of(true, false);
        for ((x, y), z) in both.iter().zip(&current_only).zip(&target_only) {
            assert!((x - (y + z)).abs() < 1e-12);
        }
        assert!(current_only.iter().any(|v| *v != 0.0) && target_only.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn fusion_gradients() {
        let cfg = small(false, false);
        let params = cfg.init_params(3).unwrap();
        let err = max_gradient_error(&params, |tape, p| {
            let net = Network::bind(tape, &cfg, p).unwrap();
            let xa = net.featurize(tape, &obs(&[0, 1, 4], false)).unwrap();
            let xb = net.featurize(tape, &obs(&[2], false)).unwrap();
            let fused = net.fuse_siamese(tape, xa, xb).unwrap();
            let sq = tape.mul(fused, fused).unwrap();
            tape.sum(sq)
        });
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn spatial_features_masking_and_gradients() {
        let cfg = small(true, true);
        let params = cfg.init_params(4).unwrap();
        let mut tape = Tape::new();
        let net = Network::bind(&mut tape, &cfg, &params).unwrap();
        let nodes = net.node_features(&mut tape, &graph()).unwrap().unwrap();
        assert_eq!(tape.value(nodes).shape(), (5, 4));
        let all = [true; 5];
        let q_all = net.spatial_features(&mut tape, nodes, &all, &all).unwrap();
        // no mask: identical to fusing the unmasked branches by hand
        let g = net.graph.as_ref().unwrap();
        let s = tape.matmul(nodes, g.sp_siamese).unwrap();
        let s = tape.relu(s);
        let cat = tape.concat(&[s, s]).unwrap();
        let manual = tape.matmul(cat, g.sp_fusion).unwrap();
        assert_eq!(tape.value(manual), tape.value(q_all));

        let current = [true, false, false, true, false];
        let target = [false, false, true, false, false];
        let q = net.spatial_features(&mut tape, nodes, &current, &target).unwrap();
        let q = tape.value(q);
        assert_eq!(q.row(1), q.row(4));
        assert!(q.row(1).iter().all(|&v| v == 0.0));

        let err = max_gradient_error(&params, |tape, p| {
            let net = Network::bind(tape, &cfg, p).unwrap();
            let nodes = net.node_features(tape, &graph()).unwrap().unwrap();
            let q = net.spatial_features(tape, nodes, &current, &target).unwrap();
            let sq = tape.mul(q, q).unwrap();
            tape.sum(sq)
        });
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn attention_cases() {
        let cfg = small(true, true);
        let params = cfg.init_params(5).unwrap();
        let mut tape = Tape::new();
        let net = Network::bind(&mut tape, &cfg, &params).unwrap();
        let q = tape.constant(Matrix::from_vec(5, 3, (0..15).map(|i| (i as f64).sin()).collect()).unwrap());
        let one = net.attention(&mut tape, q, &[false, false, true, false, false]).unwrap();
        assert_eq!(tape.value(one).data, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let same = tape.constant(Matrix::from_vec(5, 3, [0.3, -0.1, 0.7].repeat(5)).unwrap());
        let uniform = net.attention(&mut tape, same, &[true, false, true, true, false]).unwrap();
        for (i, v) in tape.value(uniform).data.iter().enumerate() {
            let expected = if [0, 2, 3].contains(&i) { 1.0 / 3.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-15);
        }
        assert!(matches!(net.attention(&mut tape, q, &[false; 5]), Err(ModelError::NothingToAttend)));
    }

    #[test]
    fn forward_contract_for_every_variant() {
        for (kg, att, readout) in [
            (false, false, Readout::Probabilities),
            (true, false, Readout::Probabilities),
            (true, true, Readout::Probabilities),
            (true, true, Readout::Weighted),
        ] {
            let cfg = ModelConfig { readout, ..small(kg, att) };
            let params = cfg.init_params(6).unwrap();
            let state = LstmState::zeros(4);
            let a = forward(&cfg, &params, &obs(&[1], false), &obs(&[1, 3], false), &graph(), &state).unwrap();
            let b = forward(&cfg, &params, &obs(&[1], false), &obs(&[1, 3], false), &graph(), &state).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.logits.len(), Action::COUNT);
            assert!(a.value.is_finite());
            assert!((a.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            match a.attention {
                Some(h) => {
                    assert!(att);
                    assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(h[0] == 0.0 && h[2] == 0.0 && h[4] == 0.0);
                }
                None => assert!(!att),
            }
        }
        let cfg = small(true, true);
        let params = cfg.init_params(6).unwrap();
        let bad = Observation::empty(4);
        assert!(matches!(
            forward(&cfg, &params, &bad, &bad, &graph(), &LstmState::zeros(4)),
            Err(ModelError::Vocabulary { .. })
        ));
        assert!(small(false, false).check_params(&params).is_err());
    }

    #[test]
    fn agent_matches_fresh_forward_passes() {
        let cfg = small(true, true);
        let params = cfg.init_params(7).unwrap();
        let g = graph();
        let target = obs(&[3], false);
        let mut agent = Agent::new(&cfg, &params, &g, target.clone()).unwrap();
        let mut state = LstmState::zeros(4);
        for step in 0..150 {
            let o = obs(&[step % 5], step % 7 == 0);
            let a = agent.act(&o).unwrap();
            let b = forward(&cfg, &params, &o, &target, &g, &state).unwrap();
            assert_eq!(a, b);
            state = b.lstm_state;
        }
    }

    #[test]
    fn greedy_ties_pick_lowest_index() {
        let out = PolicyOutput {
            logits: vec![0.0, 2.0, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0],
            value: 0.0,
            attention: None,
            lstm_state: LstmState::zeros(1),
        };
        assert_eq!(out.greedy_action(), Action::MoveBack);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn attention_is_exactly_masked(seed in any::<u64>(), mask in prop::collection::vec(any::<bool>(), 5)) {
            prop_assume!(mask.iter().any(|&m| m));
            let cfg = small(true, true);
            let params = cfg.init_params(seed).unwrap();
            let mut tape = Tape::new();
            let net = Network::bind(&mut tape, &cfg, &params).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q: Vec<f64> = (0..15).map(|_| rand::Rng::gen_range(&mut rng, -3.0..3.0)).collect();
            let q = tape.constant(Matrix::from_vec(5, 3, q).unwrap());
            let h = net.attention(&mut tape, q, &mask).unwrap();
            let h = &tape.value(h).data;
            prop_assert!((h.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (v, m) in h.iter().zip(&mask) {
                let ok = if *m { *v > 0.0 } else { *v == 0.0 };
                prop_assert!(ok, "entry {} with mask {}", v, m);
            }
        }
    }
}
