//! Episode loop: self-play a program per episode, keep the good ones, and
//! fit the guidance model on the visit statistics.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::guidance::{GuidanceModel, MlpGuidance, TrainingExample, DEFAULT_HIDDEN};
use super::mcts::SearchTree;
use super::SearchConfig;
use crate::env::{encoding_len, AlphaEnv, EnvError, MdpConfig};
use crate::evaluator::{fingerprint, EvalContext};
use crate::metrics::{AlphaRecord, MinedAlphaSet};
use crate::program::InstructionSet;

/// One JSON line per episode.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub program: String,
    pub expr: Option<String>,
    pub ended: bool,
    pub ic: Option<f64>,
    pub perf: f64,
    pub added: bool,
    pub mined: usize,
    pub best_ic: Option<f64>,
    pub tree_nodes: usize,
    /// Mean over root states of legal actions with the dimension filter
    /// divided by legal actions without it.
    pub action_reduction: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct MineOutcome {
    pub mined: MinedAlphaSet,
    pub episodes: usize,
    /// Highest train IC among all finished programs, mined or not.
    pub best_ic: f64,
}

pub fn default_guidance(iset: &InstructionSet, seed: u64) -> MlpGuidance {
    MlpGuidance::new(encoding_len(iset), DEFAULT_HIDDEN, iset.actions().len(), seed)
}

fn discounted(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for i in (0..rewards.len()).rev() {
        g = rewards[i] + gamma * g;
        out[i] = g;
    }
    out
}

/// Runs episodes until `alphas_to_mine` records are collected or
/// `max_episodes` is exhausted. `log` receives one JSON object per episode.
pub fn mine(
    ctx: &EvalContext,
    iset: &InstructionSet,
    mdp: &MdpConfig,
    cfg: &SearchConfig,
    guidance: &mut dyn GuidanceModel,
    mut log: Option<&mut dyn Write>,
) -> Result<MineOutcome, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mined = MinedAlphaSet::new();
    let mut replay: VecDeque<TrainingExample> = VecDeque::new();
    let mut best_ic = f64::NEG_INFINITY;
    let mut episodes = 0;

    let reached = |set: &MinedAlphaSet| {
        cfg.stop_at_ic.is_some_and(|t| set.records().iter().any(|r| r.ic >= t))
    };
    while episodes < cfg.max_episodes && mined.len() < cfg.alphas_to_mine && !reached(&mined) {
        episodes += 1;
        let frozen = mined.clone();
        let env = AlphaEnv::new(iset, ctx, &frozen, mdp.clone());
        let mut tree = SearchTree::new(env.reset(), cfg.k);
        let mut encodings = Vec::new();
        let mut policies = Vec::new();
        let mut rewards = Vec::new();
        let mut reduction = (0.0, 0usize);

        loop {
            let state = tree.root().state.clone();
            if state.terminal {
                break;
            }
            if mdp.dimension_check {
                let all = iset.enumerate_action_ids(&state.program, false).len();
                reduction.0 += state.legal.len() as f64 / all.max(1) as f64;
            } else {
                reduction.0 += 1.0;
            }
            reduction.1 += 1;
            let (action, policy) = if state.legal.len() == 1 {
                (state.legal[0] as usize, vec![(state.legal[0] as usize, 1.0)])
            } else {
                let mv = tree
                    .search(&env, &*guidance, cfg, &mut rng)?
                    .expect("non-terminal root");
                (mv.action, mv.policy)
            };
            encodings.push(env.encode(&state));
            policies.push(policy);
            tree.advance(action, &env, &*guidance)?;
            rewards.push(tree.root().reward);
        }

        let last = &tree.root().state;
        let ended = last.program.ended();
        let ic = last.ic;
        if ended && ic.is_finite() {
            best_ic = best_ic.max(ic);
        }
        let mut added = false;
        let mut expr = None;
        if let Some(slot) = last.program.result() {
            expr = Some(slot.tree.to_string());
            if ended && ic.is_finite() && ic >= cfg.ic_threshold {
                let fp = fingerprint(&slot.tree);
                if !mined.contains(fp) {
                    let values = ctx.evaluate(&slot.tree)?;
                    added = mined.add(AlphaRecord {
                        program: last.program.program.clone(),
                        tree: slot.tree.clone(),
                        fingerprint: fp,
                        values,
                        ic,
                        perf: last.perf,
                    });
                }
            }
        }

        for ((encoding, policy), value) in
            encodings.into_iter().zip(policies).zip(discounted(&rewards, mdp.gamma))
        {
            if replay.len() == cfg.replay_capacity.max(1) {
                replay.pop_front();
            }
            replay.push_back(TrainingExample { encoding, policy, value });
        }
        let mut loss = 0.0;
        if !replay.is_empty() {
            for _ in 0..cfg.train_steps {
                let batch: Vec<TrainingExample> = (0..cfg.batch_size.min(replay.len()))
                    .map(|_| replay[rng.random_range(0..replay.len())].clone())
                    .collect();
                loss = guidance.train(&batch);
            }
        }

        if let Some(w) = log.as_deref_mut() {
            let entry = EpisodeLog {
                episode: episodes,
                program: last.program.program.to_string().replace('\n', ";"),
                expr,
                ended,
                ic: ic.is_finite().then_some(ic),
                perf: last.perf,
                added,
                mined: mined.len(),
                best_ic: best_ic.is_finite().then_some(best_ic),
                tree_nodes: tree.len(),
                action_reduction: if reduction.1 == 0 { 1.0 } else { reduction.0 / reduction.1 as f64 },
                loss,
            };
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            // logging is best effort
            let _ = writeln!(w, "{line}");
        }
    }

    Ok(MineOutcome { mined, episodes, best_ic })
}
