//! Alpha programs: a small register machine whose instructions are
//! `(operator, operand1, operand2, operand3)` tuples.
//!
//! Executing a program builds an expression tree bottom-up. Register
//! assignment is implicit:
//!
//! * an instruction that reads no register writes the first free register;
//! * an instruction that reads one register overwrites it;
//! * an instruction that reads two registers writes the lower one and
//!   empties the higher one.
//!
//! Occupied registers therefore always form a prefix `Reg0, Reg1, ...`.

use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use thiserror::Error;

use crate::dimensions::{DimRules, Dimension};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProgramError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("instruction {index} (`{instruction}`) is not valid in the current program state")]
    InvalidInstruction { index: usize, instruction: String },
    #[error("program never writes Reg0")]
    EmptyProgram,
    #[error("program does not end with End and leaves registers other than Reg0 occupied")]
    Unfinished,
}

/// Operator categories by the number of operands they engage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArityClass {
    Indicator,
    Unary,
    Binary,
    Ternary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operator {
    Start,
    End,
    Abs,
    Ln,
    Sign,
    CsRank,
    Add,
    Sub,
    Mul,
    Div,
    TsMean,
    TsStd,
    TsMax,
    TsMin,
    TsDelta,
    TsRank,
    TsCorr,
    TsCov,
}

impl Operator {
    pub const ALL: [Operator; 18] = [
        Operator::Start,
        Operator::End,
        Operator::Abs,
        Operator::Ln,
        Operator::Sign,
        Operator::CsRank,
        Operator::Add,
        Operator::Sub,
        Operator::Mul,
        Operator::Div,
        Operator::TsMean,
        Operator::TsStd,
        Operator::TsMax,
        Operator::TsMin,
        Operator::TsDelta,
        Operator::TsRank,
        Operator::TsCorr,
        Operator::TsCov,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn arity_class(self) -> ArityClass {
        use Operator::*;
        match self {
            Start | End => ArityClass::Indicator,
            Abs | Ln | Sign | CsRank => ArityClass::Unary,
            Add | Sub | Mul | Div | TsMean | TsStd | TsMax | TsMin | TsDelta | TsRank => {
                ArityClass::Binary
            }
            TsCorr | TsCov => ArityClass::Ternary,
        }
    }

    pub fn arity(self) -> usize {
        match self.arity_class() {
            ArityClass::Indicator => 0,
            ArityClass::Unary => 1,
            ArityClass::Binary => 2,
            ArityClass::Ternary => 3,
        }
    }

    /// Position of the look-back window operand, for time-series operators.
    pub fn window_slot(self) -> Option<usize> {
        use Operator::*;
        match self {
            TsMean | TsStd | TsMax | TsMin | TsDelta | TsRank => Some(1),
            TsCorr | TsCov => Some(2),
            _ => None,
        }
    }

    /// Smallest window for which the operator is not degenerate.
    pub fn min_window(self) -> usize {
        use Operator::*;
        match self {
            TsStd | TsRank | TsCorr | TsCov => 2,
            _ => 1,
        }
    }

    pub fn is_elementwise_binary(self) -> bool {
        matches!(self, Operator::Add | Operator::Sub | Operator::Mul | Operator::Div)
    }

    pub fn name(self) -> &'static str {
        use Operator::*;
        match self {
            Start => "Start",
            End => "End",
            Abs => "Abs",
            Ln => "Ln",
            Sign => "Sign",
            CsRank => "CS-Rank",
            Add => "Add",
            Sub => "Sub",
            Mul => "Mul",
            Div => "Div",
            TsMean => "TS-Mean",
            TsStd => "TS-Std",
            TsMax => "TS-Max",
            TsMin => "TS-Min",
            TsDelta => "TS-Delta",
            TsRank => "TS-Rank",
            TsCorr => "TS-Corr",
            TsCov => "TS-Cov",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Operator::ALL
            .iter()
            .copied()
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown operator `{s}`"))
    }
}

/// A real constant with bitwise equality, so it can key hash maps.
#[derive(Clone, Copy, Debug)]
pub struct Scalar(f64);

impl Scalar {
    pub fn new(value: f64) -> Self {
        // fold -0.0 into 0.0
        Scalar(if value == 0.0 { 0.0 } else { value })
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The value as a window length, if it is a positive integer.
    pub fn as_window(self) -> Option<usize> {
        let v = self.0;
        (v >= 1.0 && v.fract() == 0.0 && v < 1e6).then_some(v as usize)
    }
}

impl PartialEq for Scalar {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}

impl Eq for Scalar {}

impl Hash for Scalar {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Name of a raw market feature such as `close`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Feature(Arc<str>);

impl Feature {
    pub fn new(name: &str) -> Self {
        Feature(Arc::from(name))
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Null,
    Scalar(Scalar),
    Matrix(Feature),
    Register(u8),
}

impl Operand {
    pub fn is_series(&self) -> bool {
        matches!(self, Operand::Matrix(_) | Operand::Register(_))
    }

    pub fn register(&self) -> Option<usize> {
        match self {
            Operand::Register(r) => Some(*r as usize),
            _ => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Null => f.write_str("Null"),
            Operand::Scalar(s) => write!(f, "{s}"),
            Operand::Matrix(m) => write!(f, "{m}"),
            Operand::Register(r) => write!(f, "Reg{r}"),
        }
    }
}

impl FromStr for Operand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "Null" {
            return Ok(Operand::Null);
        }
        if let Some(idx) = s.strip_prefix("Reg") {
            return idx
                .parse::<u8>()
                .map(Operand::Register)
                .map_err(|_| format!("bad register `{s}`"));
        }
        if let Ok(v) = s.parse::<f64>() {
            if v.is_finite() {
                return Ok(Operand::Scalar(Scalar::new(v)));
            }
            return Err(format!("non-finite constant `{s}`"));
        }
        let ident = s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_')
            && s.chars().next().is_some_and(|c| c.is_ascii_alphabetic());
        if ident {
            Ok(Operand::Matrix(Feature::new(s)))
        } else {
            Err(format!("bad operand `{s}`"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub op: Operator,
    pub operands: [Operand; 3],
}

impl Instruction {
    pub fn new(op: Operator, a: Operand, b: Operand, c: Operand) -> Self {
        Instruction { op, operands: [a, b, c] }
    }

    pub fn start() -> Self {
        Instruction::new(Operator::Start, Operand::Null, Operand::Null, Operand::Null)
    }

    pub fn end() -> Self {
        Instruction::new(Operator::End, Operand::Null, Operand::Null, Operand::Null)
    }

    /// Distinct registers read, ascending.
    pub fn registers_read(&self) -> Vec<usize> {
        let mut regs: Vec<usize> = self.operands.iter().filter_map(Operand::register).collect();
        regs.sort_unstable();
        regs.dedup();
        regs
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = &self.operands;
        write!(f, "{},{a},{b},{c}", self.op)
    }
}

impl FromStr for Instruction {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let tokens: Vec<&str> = line.split(',').map(str::trim).collect();
        if tokens.len() != 4 {
            return Err(format!("expected 4 comma-separated tokens, found {}", tokens.len()));
        }
        let op = tokens[0].parse::<Operator>()?;
        Ok(Instruction::new(
            op,
            tokens[1].parse()?,
            tokens[2].parse()?,
            tokens[3].parse()?,
        ))
    }
}

/// Ordered list of instructions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct AlphaProgram {
    pub instructions: Vec<Instruction>,
}

impl AlphaProgram {
    pub fn new(instructions: Vec<Instruction>) -> Self {
        AlphaProgram { instructions }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// One instruction per line, e.g. `Sub,close,open,Null`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for ins in &self.instructions {
            out.push_str(&ins.to_string());
            out.push('\n');
        }
        out
    }

    /// Parses the line format produced by [`AlphaProgram::serialize`].
    /// Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, ProgramError> {
        let mut instructions = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let ins = line
                .parse::<Instruction>()
                .map_err(|message| ProgramError::Parse { line: i + 1, message })?;
            instructions.push(ins);
        }
        if instructions.is_empty() {
            return Err(ProgramError::Parse { line: 0, message: "no instructions".into() });
        }
        Ok(AlphaProgram { instructions })
    }
}

impl fmt::Display for AlphaProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

/// Computation tree equivalent to a program. Leaves are constants or features.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ExprTree {
    Scalar(Scalar),
    Feature(Feature),
    Node { op: Operator, children: Vec<Arc<ExprTree>> },
}

impl ExprTree {
    pub fn node(op: Operator, children: Vec<Arc<ExprTree>>) -> Arc<ExprTree> {
        Arc::new(ExprTree::Node { op, children })
    }

    pub fn feature(name: &str) -> Arc<ExprTree> {
        Arc::new(ExprTree::Feature(Feature::new(name)))
    }

    pub fn scalar(v: f64) -> Arc<ExprTree> {
        Arc::new(ExprTree::Scalar(Scalar::new(v)))
    }

    pub fn depth(&self) -> usize {
        match self {
            ExprTree::Node { children, .. } => {
                1 + children.iter().map(|c| c.depth()).max().unwrap_or(0)
            }
            _ => 0,
        }
    }

    pub fn size(&self) -> usize {
        match self {
            ExprTree::Node { children, .. } => 1 + children.iter().map(|c| c.size()).sum::<usize>(),
            _ => 1,
        }
    }

    /// Feature names referenced by the tree, deduplicated and sorted.
    pub fn features(&self) -> Vec<String> {
        fn walk(t: &ExprTree, out: &mut Vec<String>) {
            match t {
                ExprTree::Feature(f) => out.push(f.name().to_string()),
                ExprTree::Node { children, .. } => children.iter().for_each(|c| walk(c, out)),
                ExprTree::Scalar(_) => {}
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out.sort();
        out.dedup();
        out
    }
}

impl fmt::Display for ExprTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExprTree::Scalar(s) => write!(f, "{s}"),
            ExprTree::Feature(x) => write!(f, "{x}"),
            ExprTree::Node { op, children } => {
                write!(f, "{op}(")?;
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Contents of one occupied register.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub tree: Arc<ExprTree>,
    /// `None` when the subexpression is dimensionally inconsistent; only
    /// reachable when dimension filtering is switched off.
    pub dim: Option<Dimension>,
}

/// A partially or fully built program together with its register file.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgramState {
    pub program: AlphaProgram,
    pub registers: Vec<Option<Slot>>,
}

impl ProgramState {
    pub fn empty(register_count: usize) -> Self {
        ProgramState { program: AlphaProgram::default(), registers: vec![None; register_count] }
    }

    pub fn len(&self) -> usize {
        self.program.len()
    }

    pub fn is_empty(&self) -> bool {
        self.program.is_empty()
    }

    pub fn ended(&self) -> bool {
        self.program.instructions.last().is_some_and(|i| i.op == Operator::End)
    }

    pub fn occupied(&self, reg: usize) -> bool {
        self.registers.get(reg).is_some_and(Option::is_some)
    }

    pub fn occupied_count(&self) -> usize {
        self.registers.iter().filter(|r| r.is_some()).count()
    }

    pub fn first_free(&self) -> Option<usize> {
        self.registers.iter().position(Option::is_none)
    }

    pub fn result(&self) -> Option<&Slot> {
        self.registers.first().and_then(Option::as_ref)
    }
}

/// Configured vocabulary: features, constants, registers, program length and
/// dimension rules. Also owns the global action list in canonical order.
#[derive(Debug)]
pub struct InstructionSet {
    features: Vec<Feature>,
    constants: Vec<Scalar>,
    registers: usize,
    max_len: usize,
    rules: DimRules,
    operand_vocab: Vec<Operand>,
    operand_index: HashMap<Operand, usize>,
    actions: Vec<Instruction>,
    action_index: HashMap<Instruction, usize>,
}

pub const DEFAULT_FEATURES: [&str; 6] = ["open", "close", "high", "low", "volume", "vwap"];
pub const DEFAULT_CONSTANTS: [f64; 11] = [0.0, 0.1, 0.5, 1.0, 3.0, 5.0, 10.0, 15.0, 20.0, 30.0, 60.0];
pub const DEFAULT_REGISTERS: usize = 2;
pub const DEFAULT_MAX_LEN: usize = 16;

impl InstructionSet {
    pub fn new(
        features: &[String],
        constants: &[f64],
        registers: usize,
        max_len: usize,
        rules: DimRules,
    ) -> Self {
        assert!(registers >= 1 && registers <= u8::MAX as usize, "register count out of range");
        assert!(max_len >= 2, "max_len must leave room for Start and End");
        let features: Vec<Feature> = features.iter().map(|f| Feature::new(f)).collect();
        let mut consts: Vec<Scalar> = Vec::new();
        for &c in constants {
            let s = Scalar::new(c);
            if !consts.contains(&s) {
                consts.push(s);
            }
        }
        let mut operand_vocab = vec![Operand::Null];
        operand_vocab.extend((0..registers).map(|r| Operand::Register(r as u8)));
        operand_vocab.extend(features.iter().cloned().map(Operand::Matrix));
        operand_vocab.extend(consts.iter().copied().map(Operand::Scalar));
        let operand_index = operand_vocab.iter().cloned().enumerate().map(|(i, o)| (o, i)).collect();

        let mut set = InstructionSet {
            features,
            constants: consts,
            registers,
            max_len,
            rules,
            operand_vocab,
            operand_index,
            actions: Vec::new(),
            action_index: HashMap::new(),
        };
        let mut actions = Vec::new();
        for op in Operator::ALL {
            for a in &set.operand_vocab {
                for b in &set.operand_vocab {
                    for c in &set.operand_vocab {
                        let ins = Instruction::new(op, a.clone(), b.clone(), c.clone());
                        if set.well_formed(&ins) {
                            actions.push(ins);
                        }
                    }
                }
            }
        }
        set.action_index = actions.iter().cloned().enumerate().map(|(i, a)| (a, i)).collect();
        set.actions = actions;
        set
    }

    pub fn with_defaults() -> Self {
        let features: Vec<String> = DEFAULT_FEATURES.iter().map(|s| s.to_string()).collect();
        InstructionSet::new(
            &features,
            &DEFAULT_CONSTANTS,
            DEFAULT_REGISTERS,
            DEFAULT_MAX_LEN,
            DimRules::default(),
        )
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn constants(&self) -> &[Scalar] {
        &self.constants
    }

    pub fn register_count(&self) -> usize {
        self.registers
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn rules(&self) -> &DimRules {
        &self.rules
    }

    /// `Null`, registers, features, constants, in that order.
    pub fn operand_vocab(&self) -> &[Operand] {
        &self.operand_vocab
    }

    pub fn operand_id(&self, operand: &Operand) -> Option<usize> {
        self.operand_index.get(operand).copied()
    }

    /// Every well-formed instruction, ordered by operator id then operand ids.
    pub fn actions(&self) -> &[Instruction] {
        &self.actions
    }

    pub fn action_id(&self, ins: &Instruction) -> Option<usize> {
        self.action_index.get(ins).copied()
    }

    fn in_vocab(&self, o: &Operand) -> bool {
        self.operand_index.contains_key(o)
    }

    /// Arity, operand-kind and Null-alignment check, independent of state.
    pub fn well_formed(&self, ins: &Instruction) -> bool {
        let [a, b, c] = &ins.operands;
        if !ins.operands.iter().all(|o| self.in_vocab(o)) {
            return false;
        }
        let window_ok = |o: &Operand| match o {
            Operand::Scalar(s) => s.as_window().is_some_and(|w| w >= ins.op.min_window()),
            _ => false,
        };
        let value = |o: &Operand| !matches!(o, Operand::Null);
        match ins.op.arity_class() {
            ArityClass::Indicator => ins.operands.iter().all(|o| *o == Operand::Null),
            ArityClass::Unary => a.is_series() && *b == Operand::Null && *c == Operand::Null,
            ArityClass::Binary if ins.op.is_elementwise_binary() => {
                value(a) && value(b) && (a.is_series() || b.is_series()) && *c == Operand::Null
            }
            ArityClass::Binary => a.is_series() && window_ok(b) && *c == Operand::Null,
            ArityClass::Ternary => a.is_series() && b.is_series() && window_ok(c),
        }
    }

    /// Register discipline, Start/End placement and length budget.
    pub fn validate(&self, state: &ProgramState, ins: &Instruction) -> bool {
        if state.ended() || !self.well_formed(ins) {
            return false;
        }
        let len = state.len();
        match ins.op {
            Operator::Start => return len == 0,
            Operator::End => {
                return len >= 1
                    && len < self.max_len
                    && state.occupied(0)
                    && state.occupied_count() == 1;
            }
            _ => {}
        }
        if len == 0 || len + 2 > self.max_len {
            return false;
        }
        let regs = ins.registers_read();
        if !regs.iter().all(|&r| state.occupied(r)) {
            return false;
        }
        let occupied_after = match regs.as_slice() {
            [] if state.first_free().is_some() => state.occupied_count() + 1,
            [_] => state.occupied_count(),
            [_, hi] if state.registers.iter().rposition(Option::is_some) == Some(*hi) => {
                state.occupied_count() - 1
            }
            _ => return false,
        };
        // the program must still be finishable: one merge per extra
        // register, then End
        len + 1 + occupied_after <= self.max_len
    }

    /// Dimension of an operand in the given state; `None` when unknown or
    /// inconsistent.
    pub fn operand_dimension(&self, state: &ProgramState, o: &Operand) -> Option<Dimension> {
        match o {
            Operand::Null | Operand::Scalar(_) => Some(Dimension::NONE),
            Operand::Matrix(f) => self.rules.feature_dimension(f.name()).ok(),
            Operand::Register(r) => state.registers.get(*r as usize)?.as_ref()?.dim,
        }
    }

    /// Output dimension of `ins` if it is dimensionally legal in `state`.
    pub fn instruction_dimension(&self, state: &ProgramState, ins: &Instruction) -> Option<Dimension> {
        if ins.op.arity_class() == ArityClass::Indicator {
            return match ins.op {
                Operator::End => state.result().and_then(|s| s.dim),
                _ => Some(Dimension::NONE),
            };
        }
        let mut dims = Vec::with_capacity(3);
        for o in &ins.operands[..ins.op.arity()] {
            dims.push(self.operand_dimension(state, o)?);
        }
        self.rules.result_dimension(ins.op, &dims)
    }

    pub fn dimension_legal(&self, state: &ProgramState, ins: &Instruction) -> bool {
        self.instruction_dimension(state, ins).is_some()
    }

    /// Executes one instruction. The caller must have checked [`validate`].
    ///
    /// [`validate`]: InstructionSet::validate
    pub fn apply(&self, state: &ProgramState, ins: &Instruction) -> Result<ProgramState, ProgramError> {
        if !self.validate(state, ins) {
            return Err(ProgramError::InvalidInstruction {
                index: state.len(),
                instruction: ins.to_string(),
            });
        }
        let mut next = state.clone();
        next.program.instructions.push(ins.clone());
        if ins.op.arity_class() == ArityClass::Indicator {
            return Ok(next);
        }
        let children: Vec<Arc<ExprTree>> = ins.operands[..ins.op.arity()]
            .iter()
            .map(|o| match o {
                Operand::Scalar(s) => Arc::new(ExprTree::Scalar(*s)),
                Operand::Matrix(f) => Arc::new(ExprTree::Feature(f.clone())),
                Operand::Register(r) => state.registers[*r as usize]
                    .as_ref()
                    .expect("validated register read")
                    .tree
                    .clone(),
                Operand::Null => unreachable!("well-formed instructions have no Null inside arity"),
            })
            .collect();
        let slot = Slot {
            tree: ExprTree::node(ins.op, children),
            dim: self.instruction_dimension(state, ins),
        };
        let regs = ins.registers_read();
        match regs.as_slice() {
            [] => {
                let dst = state.first_free().expect("validated free register");
                next.registers[dst] = Some(slot);
            }
            [r] => next.registers[*r] = Some(slot),
            [lo, hi] => {
                next.registers[*lo] = Some(slot);
                next.registers[*hi] = None;
            }
            _ => unreachable!("at most two distinct registers are read"),
        }
        Ok(next)
    }

    /// Replays a program from the empty state.
    pub fn run(&self, program: &AlphaProgram) -> Result<ProgramState, ProgramError> {
        let mut state = ProgramState::empty(self.registers);
        for (index, ins) in program.instructions.iter().enumerate() {
            state = self.apply(&state, ins).map_err(|_| ProgramError::InvalidInstruction {
                index,
                instruction: ins.to_string(),
            })?;
        }
        Ok(state)
    }

    /// Expression tree held in Reg0 after running the program.
    pub fn compile(&self, program: &AlphaProgram) -> Result<Arc<ExprTree>, ProgramError> {
        let state = self.run(program)?;
        let slot = state.result().ok_or(ProgramError::EmptyProgram)?;
        if !state.ended() && state.occupied_count() != 1 {
            return Err(ProgramError::Unfinished);
        }
        Ok(slot.tree.clone())
    }

    /// Parses program text and checks it against this instruction set.
    pub fn parse_program(&self, text: &str) -> Result<AlphaProgram, ProgramError> {
        let program = AlphaProgram::parse(text)?;
        self.run(&program)?;
        Ok(program)
    }

    /// Legal next instructions in canonical order. With `dimension_check`
    /// the dimension rules prune the list before anything is evaluated.
    pub fn enumerate_actions(&self, state: &ProgramState, dimension_check: bool) -> Vec<Instruction> {
        self.enumerate_action_ids(state, dimension_check)
            .into_iter()
            .map(|i| self.actions[i].clone())
            .collect()
    }

    pub fn enumerate_action_ids(&self, state: &ProgramState, dimension_check: bool) -> Vec<usize> {
        if state.ended() {
            return Vec::new();
        }
        if state.is_empty() {
            return self.action_id(&Instruction::start()).into_iter().collect();
        }
        self.actions
            .iter()
            .enumerate()
            .filter(|(_, ins)| ins.op != Operator::Start)
            .filter(|(_, ins)| self.validate(state, ins))
            .filter(|(_, ins)| !dimension_check || self.dimension_legal(state, ins))
            .map(|(i, _)| i)
            .collect()
    }

    /// Random walk over legal actions, stopping at End or when stuck.
    /// Used to sample reachable states and valid programs.
    pub fn sample_program<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        max_steps: usize,
        dimension_check: bool,
    ) -> ProgramState {
        let mut state = ProgramState::empty(self.registers);
        for _ in 0..max_steps {
            let ids = self.enumerate_action_ids(&state, dimension_check);
            let Some(&id) = ids.choose(rng) else { break };
            state = self.apply(&state, &self.actions[id]).expect("enumerated action is valid");
            if state.ended() {
                break;
            }
        }
        state
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ins(text: &str) -> Instruction {
        text.parse().unwrap()
    }

    fn range_ratio() -> AlphaProgram {
        AlphaProgram::parse(
            "Start,Null,Null,Null\nSub,close,open,Null\nSub,high,low,Null\nDiv,Reg0,Reg1,Null\nEnd,Null,Null,Null\n",
        )
        .unwrap()
    }

    #[test]
    fn operator_arity_classes() {
        assert_eq!(Operator::Abs.arity(), 1);
        assert_eq!(Operator::CsRank.arity_class(), ArityClass::Unary);
        assert_eq!(Operator::TsMean.arity(), 2);
        assert_eq!(Operator::TsCov.arity(), 3);
        assert_eq!(Operator::End.arity(), 0);
        for op in Operator::ALL {
            assert_eq!(op.name().parse::<Operator>().unwrap(), op);
        }
    }

    #[test]
    fn validate_examples() {
        let set = InstructionSet::with_defaults();
        let started = set.apply(&ProgramState::empty(2), &Instruction::start()).unwrap();
        assert!(set.validate(&started, &ins("Sub,close,open,Null")));
        assert!(!set.validate(&ProgramState::empty(2), &Instruction::end()));

        let s = set.apply(&started, &ins("Sub,close,open,Null")).unwrap();
        assert!(!set.validate(&s, &ins("Div,Reg0,Reg1,Null")));
        assert!(set.validate(&s, &Instruction::end()));
        assert!(!set.validate(&s, &Instruction::start()));
    }

    #[test]
    fn misaligned_operands_rejected() {
        let set = InstructionSet::with_defaults();
        let started = set.apply(&ProgramState::empty(2), &Instruction::start()).unwrap();
        assert!(!set.validate(&started, &ins("Abs,close,open,Null")));
        assert!(!set.validate(&started, &ins("Sub,close,Null,Null")));
        assert!(!set.validate(&started, &ins("Add,3,5,Null")));
        assert!(!set.validate(&started, &ins("TS-Mean,close,0.5,Null")));
        assert!(!set.validate(&started, &ins("TS-Std,close,1,Null")));
        assert!(set.validate(&started, &ins("TS-Mean,close,1,Null")));
        assert!(!set.validate(&started, &ins("Abs,beta,Null,Null")));
    }

    #[test]
    fn register_assignment_of_range_ratio() {
        let set = InstructionSet::with_defaults();
        let mut s = ProgramState::empty(2);
        s = set.apply(&s, &Instruction::start()).unwrap();
        s = set.apply(&s, &ins("Sub,close,open,Null")).unwrap();
        assert_eq!(s.registers[0].as_ref().unwrap().tree.to_string(), "Sub(close,open)");
        s = set.apply(&s, &ins("Sub,high,low,Null")).unwrap();
        assert_eq!(s.registers[1].as_ref().unwrap().tree.to_string(), "Sub(high,low)");
        s = set.apply(&s, &ins("Div,Reg0,Reg1,Null")).unwrap();
        assert_eq!(
            s.registers[0].as_ref().unwrap().tree.to_string(),
            "Div(Sub(close,open),Sub(high,low))"
        );
        assert!(s.registers[1].is_none());
        assert_eq!(s.registers[0].as_ref().unwrap().dim, Some(Dimension::NONE));
    }

    #[test]
    fn single_register_overwrites_in_place() {
        let set = InstructionSet::with_defaults();
        let mut s = ProgramState::empty(2);
        for line in ["Start,Null,Null,Null", "Sub,close,open,Null", "Sub,high,low,Null"] {
            s = set.apply(&s, &ins(line)).unwrap();
        }
        let reg1 = s.registers[1].clone();
        s = set.apply(&s, &ins("Abs,Reg0,Null,Null")).unwrap();
        assert_eq!(s.registers[0].as_ref().unwrap().tree.to_string(), "Abs(Sub(close,open))");
        assert_eq!(s.registers[1], reg1);
    }

    #[test]
    fn no_free_register_rejects_fresh_value() {
        let set = InstructionSet::with_defaults();
        let mut s = ProgramState::empty(2);
        for line in ["Start,Null,Null,Null", "Sub,close,open,Null", "Sub,high,low,Null"] {
            s = set.apply(&s, &ins(line)).unwrap();
        }
        assert!(!set.validate(&s, &ins("Abs,close,Null,Null")));
        assert!(!set.validate(&s, &Instruction::end()));
        assert!(matches!(
            set.apply(&s, &ins("Abs,close,Null,Null")),
            Err(ProgramError::InvalidInstruction { .. })
        ));
    }

    #[test]
    fn compile_examples() {
        let set = InstructionSet::with_defaults();
        assert_eq!(set.compile(&range_ratio()).unwrap().to_string(), "Div(Sub(close,open),Sub(high,low))");
        let p = AlphaProgram::parse("Start,Null,Null,Null\nAbs,close,Null,Null\nEnd,Null,Null,Null").unwrap();
        assert_eq!(*set.compile(&p).unwrap(), *ExprTree::node(Operator::Abs, vec![ExprTree::feature("close")]));
        let only_start = AlphaProgram::parse("Start,Null,Null,Null").unwrap();
        assert_eq!(set.compile(&only_start), Err(ProgramError::EmptyProgram));
    }

    #[test]
    fn compile_mid_program_reads_reg0() {
        let set = InstructionSet::with_defaults();
        let p = AlphaProgram::parse("Start,Null,Null,Null\nSub,close,open,Null").unwrap();
        assert_eq!(set.compile(&p).unwrap().to_string(), "Sub(close,open)");
        let half = AlphaProgram::parse("Start,Null,Null,Null\nSub,close,open,Null\nSub,high,low,Null").unwrap();
        assert_eq!(set.compile(&half), Err(ProgramError::Unfinished));
    }

    #[test]
    fn serialize_parse_range_ratio() {
        let p = range_ratio();
        let text = p.serialize();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(text.lines().nth(1), Some("Sub,close,open,Null"));
        assert_eq!(AlphaProgram::parse(&text).unwrap(), p);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert!(matches!(AlphaProgram::parse(""), Err(ProgramError::Parse { .. })));
        match AlphaProgram::parse("Start,Null,Null,Null\nSub,close,open") {
            Err(ProgramError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match AlphaProgram::parse("Start,Null,Null,Null\n\nFoo,close,open,Null") {
            Err(ProgramError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let set = InstructionSet::with_defaults();
        assert!(matches!(
            set.parse_program("Start,Null,Null,Null\nDiv,Reg0,Reg1,Null"),
            Err(ProgramError::InvalidInstruction { index: 1, .. })
        ));
    }

    #[test]
    fn empty_state_offers_only_start() {
        let set = InstructionSet::with_defaults();
        let acts = set.enumerate_actions(&ProgramState::empty(2), true);
        assert_eq!(acts, vec![Instruction::start()]);
    }

    #[test]
    fn price_plus_volume_pruned() {
        let set = InstructionSet::with_defaults();
        let mut s = ProgramState::empty(2);
        for line in ["Start,Null,Null,Null", "Sub,close,open,Null"] {
            s = set.apply(&s, &ins(line)).unwrap();
        }
        let filtered = set.enumerate_actions(&s, true);
        assert!(filtered.contains(&ins("Add,Reg0,high,Null")));
        assert!(!filtered.contains(&ins("Add,Reg0,volume,Null")));
        let unfiltered = set.enumerate_actions(&s, false);
        assert!(unfiltered.contains(&ins("Add,Reg0,volume,Null")));
    }

    #[test]
    fn near_max_length_only_end() {
        let features: Vec<String> = DEFAULT_FEATURES.iter().map(|s| s.to_string()).collect();
        let set = InstructionSet::new(&features, &DEFAULT_CONSTANTS, 2, 3, DimRules::default());
        let mut s = ProgramState::empty(2);
        for line in ["Start,Null,Null,Null", "Sub,close,open,Null"] {
            s = set.apply(&s, &ins(line)).unwrap();
        }
        assert_eq!(set.enumerate_actions(&s, true), vec![Instruction::end()]);
    }

    #[test]
    fn action_order_is_canonical() {
        let set = InstructionSet::with_defaults();
        let acts = set.actions();
        assert_eq!(acts[0], Instruction::start());
        assert_eq!(acts[1], Instruction::end());
        for w in acts.windows(2) {
            assert!(w[0].op <= w[1].op);
        }
    }
}
