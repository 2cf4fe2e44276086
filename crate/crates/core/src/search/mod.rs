//! Guided tree search over alpha programs and the outer mining loop.

pub mod backup;
pub mod guidance;
pub mod mcts;
pub mod mine;

use serde::{Deserialize, Serialize};

pub use backup::ValueBackup;
pub use guidance::{
    masked_priors, GuidanceModel, MlpGuidance, Prediction, TrainingExample, UniformGuidance,
    DEFAULT_HIDDEN,
};
pub use mcts::{q_value, Edge, Expansion, MoveResult, SearchNode, SearchTree};
pub use mine::{default_guidance, mine, EpisodeLog, MineOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Weight of the mean against the max in the blended Q value.
    pub beta: f64,
    /// Values kept per node backup.
    pub k: usize,
    pub simulations: usize,
    pub c_puct: f64,
    pub max_episodes: usize,
    pub alphas_to_mine: usize,
    pub ic_threshold: f64,
    pub seed: u64,
    pub dirichlet_alpha: f64,
    pub dirichlet_weight: f64,
    /// Gradient steps on the replay buffer after each episode.
    pub train_steps: usize,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub learning_rate: f64,
    /// Stop early once a mined alpha reaches this train IC.
    pub stop_at_ic: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beta: 0.5,
            k: 10,
            simulations: 200,
            c_puct: 1.0,
            max_episodes: 2000,
            alphas_to_mine: 20,
            ic_threshold: 0.02,
            seed: 0,
            dirichlet_alpha: 0.3,
            dirichlet_weight: 0.25,
            train_steps: 4,
            batch_size: 64,
            replay_capacity: 20_000,
            learning_rate: 0.01,
            stop_at_ic: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if self.k == 0 {
            return Err("k must be positive".into());
        }
        if self.simulations == 0 {
            return Err("simulations must be positive".into());
        }
        if !(self.c_puct >= 0.0) {
            return Err(format!("c_puct must be non-negative, got {}", self.c_puct));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err("dirichlet_alpha must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.dirichlet_weight) {
            return Err("dirichlet_weight must lie in [0, 1]".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        Ok(())
    }
}
