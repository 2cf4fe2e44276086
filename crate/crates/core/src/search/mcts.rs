//! Guided Monte Carlo tree search over program states.
//!
//! Node values are returns-to-go (sum of future Perf increments). An edge is
//! scored by `r(s,a) + beta * mean(V) + (1 - beta) * max(V)` where `V` holds
//! the top-k returns backed up through the child.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::backup::ValueBackup;
use super::guidance::{masked_priors, GuidanceModel};
use super::SearchConfig;
use crate::env::{AlphaEnv, EnvError, EnvState};

#[derive(Clone, Copy, Debug)]
pub struct Edge {
    pub action: u32,
    pub prior: f64,
    pub child: Option<u32>,
}

#[derive(Clone, Debug)]
pub struct SearchNode {
    pub state: EnvState,
    /// Reward collected on the edge entering this node.
    pub reward: f64,
    /// Guidance value estimate for this state.
    pub value_estimate: f64,
    pub visits: u32,
    pub backup: ValueBackup,
    /// `None` until expanded.
    pub edges: Option<Vec<Edge>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expansion {
    Expanded,
    AlreadyExpanded,
    TerminalNode,
}

/// Blended mean/max value of a node as seen from its parent edge.
pub fn q_value(node: &SearchNode, beta: f64) -> f64 {
    let mean = node.backup.mean().unwrap_or(node.value_estimate);
    let max = node.backup.max().unwrap_or(node.value_estimate);
    node.reward + beta * mean + (1.0 - beta) * max
}

/// Result of one move of search at the root.
#[derive(Clone, Debug)]
pub struct MoveResult {
    pub action: usize,
    /// Visit distribution over root actions.
    pub policy: Vec<(usize, f64)>,
    pub root_visits: u32,
}

pub struct SearchTree {
    nodes: Vec<SearchNode>,
    root: u32,
    k: usize,
}

impl SearchTree {
    pub fn new(root: EnvState, k: usize) -> Self {
        let node = SearchNode {
            state: root,
            reward: 0.0,
            value_estimate: 0.0,
            visits: 0,
            backup: ValueBackup::new(k),
            edges: None,
        };
        SearchTree { nodes: vec![node], root: 0, k }
    }

    pub fn root(&self) -> &SearchNode {
        &self.nodes[self.root as usize]
    }

    pub fn root_id(&self) -> u32 {
        self.root
    }

    pub fn node(&self, id: u32) -> &SearchNode {
        &self.nodes[id as usize]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SearchNode> {
        self.nodes.iter()
    }

    /// Creates one edge per legal action with masked, renormalized priors
    /// and records the value estimate.
    pub fn expand(&mut self, id: u32, env: &AlphaEnv, guidance: &dyn GuidanceModel) -> Expansion {
        let node = &self.nodes[id as usize];
        if node.state.terminal {
            return Expansion::TerminalNode;
        }
        if node.edges.is_some() {
            return Expansion::AlreadyExpanded;
        }
        let pred = guidance.predict(&env.encode(&node.state));
        let legal = node.state.legal.clone();
        let priors = masked_priors(&pred.policy, &legal);
        let edges = legal
            .iter()
            .zip(priors)
            .map(|(&action, prior)| Edge { action, prior, child: None })
            .collect();
        let node = &mut self.nodes[id as usize];
        node.value_estimate = pred.value;
        node.edges = Some(edges);
        Expansion::Expanded
    }

    /// PUCT choice among the edges of an expanded node. Unvisited edges are
    /// valued at the node's own estimate; ties go to the earliest action.
    pub fn select(&self, id: u32, cfg: &SearchConfig) -> usize {
        let node = &self.nodes[id as usize];
        let edges = node.edges.as_ref().expect("select on an expanded node");
        let sqrt_n = (node.visits as f64).sqrt();
        let mut best = (0, f64::NEG_INFINITY);
        for (i, e) in edges.iter().enumerate() {
            let (q, n) = match e.child {
                Some(c) => {
                    let child = &self.nodes[c as usize];
                    (q_value(child, cfg.beta), child.visits as f64)
                }
                None => (node.value_estimate, 0.0),
            };
            let score = q + cfg.c_puct * e.prior * sqrt_n / (1.0 + n);
            if score > best.1 {
                best = (i, score);
            }
        }
        best.0
    }

    /// Mixes Dirichlet noise into the root priors.
    pub fn add_root_noise<R: Rng + ?Sized>(&mut self, rng: &mut R, alpha: f64, weight: f64) {
        let root = self.root as usize;
        let Some(edges) = self.nodes[root].edges.as_mut() else { return };
        if edges.len() < 2 || weight <= 0.0 {
            return;
        }
        let gamma = Gamma::new(alpha, 1.0).expect("positive dirichlet alpha");
        let mut noise: Vec<f64> = edges.iter().map(|_| gamma.sample(rng)).collect();
        let total: f64 = noise.iter().sum();
        if total <= 0.0 {
            return;
        }
        noise.iter_mut().for_each(|n| *n /= total);
        for (e, n) in edges.iter_mut().zip(noise) {
            e.prior = (1.0 - weight) * e.prior + weight * n;
        }
    }

    fn materialize(
        &mut self,
        parent: u32,
        edge: usize,
        env: &AlphaEnv,
        guidance: &dyn GuidanceModel,
    ) -> Result<u32, EnvError> {
        let action = self.nodes[parent as usize].edges.as_ref().expect("expanded")[edge].action;
        let (state, reward) = env.step_id(&self.nodes[parent as usize].state, action as usize)?;
        let id = self.nodes.len() as u32;
        self.nodes.push(SearchNode {
            state,
            reward,
            value_estimate: 0.0,
            visits: 0,
            backup: ValueBackup::new(self.k),
            edges: None,
        });
        self.nodes[parent as usize].edges.as_mut().expect("expanded")[edge].child = Some(id);
        self.expand(id, env, guidance);
        Ok(id)
    }

    /// One select / expand / evaluate / backup pass from the root.
    pub fn simulate_once(
        &mut self,
        env: &AlphaEnv,
        guidance: &dyn GuidanceModel,
        cfg: &SearchConfig,
    ) -> Result<(), EnvError> {
        if self.expand(self.root, env, guidance) == Expansion::TerminalNode {
            return Ok(());
        }
        let mut path = vec![self.root];
        let mut id = self.root;
        let leaf_value = loop {
            let node = &self.nodes[id as usize];
            if node.state.terminal {
                break 0.0;
            }
            let e = self.select(id, cfg);
            match node.edges.as_ref().expect("expanded")[e].child {
                Some(c) => {
                    id = c;
                    path.push(c);
                }
                None => {
                    let c = self.materialize(id, e, env, guidance)?;
                    path.push(c);
                    let child = &self.nodes[c as usize];
                    break if child.state.terminal { 0.0 } else { child.value_estimate };
                }
            }
        };
        let mut g = leaf_value;
        for &n in path.iter().rev() {
            let node = &mut self.nodes[n as usize];
            node.backup.insert(g);
            node.visits += 1;
            g += node.reward;
        }
        Ok(())
    }

    /// Runs the configured number of simulations and picks the most visited
    /// root action (ties broken by Q, then canonical order).
    pub fn search<R: Rng + ?Sized>(
        &mut self,
        env: &AlphaEnv,
        guidance: &dyn GuidanceModel,
        cfg: &SearchConfig,
        rng: &mut R,
    ) -> Result<Option<MoveResult>, EnvError> {
        if self.expand(self.root, env, guidance) == Expansion::TerminalNode {
            return Ok(None);
        }
        self.add_root_noise(rng, cfg.dirichlet_alpha, cfg.dirichlet_weight);
        for _ in 0..cfg.simulations.max(1) {
            self.simulate_once(env, guidance, cfg)?;
        }
        Ok(Some(self.root_result(cfg)))
    }

    fn root_result(&self, cfg: &SearchConfig) -> MoveResult {
        let root = &self.nodes[self.root as usize];
        let edges = root.edges.as_ref().expect("expanded");
        let stats: Vec<(usize, u32, f64)> = edges
            .iter()
            .map(|e| match e.child {
                Some(c) => {
                    let n = &self.nodes[c as usize];
                    (e.action as usize, n.visits, q_value(n, cfg.beta))
                }
                None => (e.action as usize, 0, f64::NEG_INFINITY),
            })
            .collect();
        let mut best = 0;
        for (i, s) in stats.iter().enumerate() {
            let b = &stats[best];
            if s.1 > b.1 || (s.1 == b.1 && s.2 > b.2) {
                best = i;
            }
        }
        let total: u32 = stats.iter().map(|s| s.1).sum();
        let policy = if total == 0 {
            vec![(stats[best].0, 1.0)]
        } else {
            stats.iter().filter(|s| s.1 > 0).map(|s| (s.0, s.1 as f64 / total as f64)).collect()
        };
        MoveResult { action: stats[best].0, policy, root_visits: root.visits }
    }

    /// Moves the root to the child reached by `action`, materializing it if
    /// needed. The rest of the tree stays allocated until the tree is dropped.
    pub fn advance(
        &mut self,
        action: usize,
        env: &AlphaEnv,
        guidance: &dyn GuidanceModel,
    ) -> Result<&EnvState, EnvError> {
        self.expand(self.root, env, guidance);
        let root = self.root;
        let edges = self.nodes[root as usize]
            .edges
            .as_ref()
            .ok_or_else(|| EnvError::IllegalAction(format!("action {action} from a terminal state")))?;
        let e = edges
            .iter()
            .position(|e| e.action as usize == action)
            .ok_or_else(|| EnvError::IllegalAction(env.instruction_set().actions()[action].to_string()))?;
        let child = match edges[e].child {
            Some(c) => c,
            None => self.materialize(root, e, env, guidance)?,
        };
        self.root = child;
        Ok(&self.nodes[child as usize].state)
    }
}
