//! Program construction as a deterministic decision process.
//!
//! A state is a partial program; an action appends one instruction; the
//! reward is the change in Perf of the alpha held in Reg0. Rewards telescope,
//! so the undiscounted return of an episode is the Perf of its final alpha.

use std::ops::Range;
use std::sync::Arc;

use thiserror::Error;

use crate::evaluator::{EvalContext, EvalError};
use crate::metrics::{self, MetricsError, MinedAlphaSet, PerfOptions};
use crate::program::{InstructionSet, Operator, ProgramState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("illegal action `{0}`")]
    IllegalAction(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug)]
pub struct MdpConfig {
    pub gamma: f64,
    /// Days over which Perf is measured (the training split).
    pub rows: Range<usize>,
    pub perf: PerfOptions,
    pub dimension_check: bool,
}

#[derive(Clone, Debug)]
pub struct EnvState {
    pub program: ProgramState,
    /// Legal action ids in canonical order.
    pub legal: Arc<[u32]>,
    pub terminal: bool,
    /// Perf of the Reg0 alpha, 0 when Reg0 is empty.
    pub perf: f64,
    /// IC of the Reg0 alpha over the evaluation rows (NaN when undefined).
    pub ic: f64,
}

pub struct AlphaEnv<'a> {
    iset: &'a InstructionSet,
    ctx: &'a EvalContext<'a>,
    mined: &'a MinedAlphaSet,
    config: MdpConfig,
}

impl<'a> AlphaEnv<'a> {
    pub fn new(
        iset: &'a InstructionSet,
        ctx: &'a EvalContext<'a>,
        mined: &'a MinedAlphaSet,
        config: MdpConfig,
    ) -> Self {
        assert!(config.gamma > 0.0 && config.gamma < 1.0, "gamma must lie in (0, 1)");
        AlphaEnv { iset, ctx, mined, config }
    }

    pub fn instruction_set(&self) -> &'a InstructionSet {
        self.iset
    }

    pub fn config(&self) -> &MdpConfig {
        &self.config
    }

    pub fn mined(&self) -> &'a MinedAlphaSet {
        self.mined
    }

    fn finish(&self, program: ProgramState, perf: f64, ic: f64) -> EnvState {
        let legal: Arc<[u32]> = self
            .iset
            .enumerate_action_ids(&program, self.config.dimension_check)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        let terminal = program.ended() || legal.is_empty();
        EnvState { program, legal, terminal, perf, ic }
    }

    /// The empty program.
    pub fn reset(&self) -> EnvState {
        self.finish(ProgramState::empty(self.iset.register_count()), 0.0, f64::NAN)
    }

    /// Perf and IC of whatever Reg0 currently holds.
    pub fn score(&self, program: &ProgramState) -> Result<(f64, f64), EnvError> {
        let Some(slot) = program.result() else {
            return Ok((0.0, f64::NAN));
        };
        let z = self.ctx.evaluate(&slot.tree)?;
        let mu = &self.ctx.dataset().target;
        let rows = self.config.rows.clone();
        let ic = metrics::ic(
            z.slice(ndarray::s![rows.clone(), ..]),
            mu.slice(ndarray::s![rows.clone(), ..]),
        )?;
        let perf = metrics::perf(z.view(), mu.view(), self.mined, rows, self.config.perf)?;
        Ok((perf, ic))
    }

    pub fn step_id(&self, state: &EnvState, action: usize) -> Result<(EnvState, f64), EnvError> {
        let ins = &self.iset.actions()[action];
        if state.terminal || !state.legal.contains(&(action as u32)) {
            return Err(EnvError::IllegalAction(ins.to_string()));
        }
        let next = self
            .iset
            .apply(&state.program, ins)
            .map_err(|_| EnvError::IllegalAction(ins.to_string()))?;
        let unchanged = match (state.program.result(), next.result()) {
            (Some(a), Some(b)) => Arc::ptr_eq(&a.tree, &b.tree),
            (None, None) => true,
            _ => false,
        };
        let (perf, ic) = if unchanged { (state.perf, state.ic) } else { self.score(&next)? };
        let reward = perf - state.perf;
        Ok((self.finish(next, perf, ic), reward))
    }

    pub fn step(
        &self,
        state: &EnvState,
        action: &crate::program::Instruction,
    ) -> Result<(EnvState, f64), EnvError> {
        let id = self
            .iset
            .action_id(action)
            .ok_or_else(|| EnvError::IllegalAction(action.to_string()))?;
        self.step_id(state, id)
    }

    pub fn encoding_len(&self) -> usize {
        encoding_len(self.iset)
    }

    pub fn encode(&self, state: &EnvState) -> Vec<f64> {
        encode(self.iset, &state.program)
    }
}

/// `max_len * (operators + 3 * operand vocabulary)`.
pub fn encoding_len(iset: &InstructionSet) -> usize {
    iset.max_len() * slot_width(iset)
}

fn slot_width(iset: &InstructionSet) -> usize {
    Operator::ALL.len() + 3 * iset.operand_vocab().len()
}

/// One-hot operator and operands per instruction slot, zero padded.
pub fn encode(iset: &InstructionSet, program: &ProgramState) -> Vec<f64> {
    let width = slot_width(iset);
    let vocab = iset.operand_vocab().len();
    let mut out = vec![0.0; encoding_len(iset)];
    for (j, ins) in program.program.instructions.iter().enumerate().take(iset.max_len()) {
        let base = j * width;
        out[base + ins.op.id()] = 1.0;
        for (k, o) in ins.operands.iter().enumerate() {
            let id = iset.operand_id(o).expect("operand in vocabulary");
            out[base + Operator::ALL.len() + k * vocab + id] = 1.0;
        }
    }
    out
}
