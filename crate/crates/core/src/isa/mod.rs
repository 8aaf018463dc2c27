//! Mini-SASS instruction set: opcodes, operands, kernels and the mapping of
//! opcodes onto the functional-unit classes that unit faults target.

mod text;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use text::{emit_text, parse_kernel};

/// Number of predicate registers per thread.
pub const NUM_PREDICATES: u8 = 8;

/// Highest general-purpose register index the ISA can name.
pub const MAX_REGISTER: u8 = 63;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IsaError {
    #[error("syntax error on line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unresolved label `{0}`")]
    UnresolvedLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Iadd,
    Isub,
    Imul,
    Imad,
    Shl,
    Shr,
    And,
    Or,
    Xor,
    Isetp,
    Fadd,
    Fmul,
    Ffma,
    Fmax,
    Fmin,
    Fsetp,
    Frcp,
    Frsq,
    Fexp2,
    Flog2,
    Ld,
    St,
    Bra,
    Exit,
    Mov,
    Movi,
    I2f,
    F2i,
}

impl Opcode {
    pub const ALL: [Opcode; 28] = [
        Opcode::Iadd,
        Opcode::Isub,
        Opcode::Imul,
        Opcode::Imad,
        Opcode::Shl,
        Opcode::Shr,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Isetp,
        Opcode::Fadd,
        Opcode::Fmul,
        Opcode::Ffma,
        Opcode::Fmax,
        Opcode::Fmin,
        Opcode::Fsetp,
        Opcode::Frcp,
        Opcode::Frsq,
        Opcode::Fexp2,
        Opcode::Flog2,
        Opcode::Ld,
        Opcode::St,
        Opcode::Bra,
        Opcode::Exit,
        Opcode::Mov,
        Opcode::Movi,
        Opcode::I2f,
        Opcode::F2i,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Iadd => "IADD",
            Opcode::Isub => "ISUB",
            Opcode::Imul => "IMUL",
            Opcode::Imad => "IMAD",
            Opcode::Shl => "SHL",
            Opcode::Shr => "SHR",
            Opcode::And => "AND",
            Opcode::Or => "OR",
            Opcode::Xor => "XOR",
            Opcode::Isetp => "ISETP",
            Opcode::Fadd => "FADD",
            Opcode::Fmul => "FMUL",
            Opcode::Ffma => "FFMA",
            Opcode::Fmax => "FMAX",
            Opcode::Fmin => "FMIN",
            Opcode::Fsetp => "FSETP",
            Opcode::Frcp => "FRCP",
            Opcode::Frsq => "FRSQ",
            Opcode::Fexp2 => "FEXP2",
            Opcode::Flog2 => "FLOG2",
            Opcode::Ld => "LD",
            Opcode::St => "ST",
            Opcode::Bra => "BRA",
            Opcode::Exit => "EXIT",
            Opcode::Mov => "MOV",
            Opcode::Movi => "MOVI",
            Opcode::I2f => "I2F",
            Opcode::F2i => "F2I",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Opcode::ALL.iter().copied().find(|op| op.mnemonic() == s)
    }

    /// Whether the opcode writes a general-purpose register.
    pub fn writes_register(self) -> bool {
        !matches!(
            self,
            Opcode::St | Opcode::Bra | Opcode::Exit | Opcode::Isetp | Opcode::Fsetp
        )
    }

    pub fn writes_predicate(self) -> bool {
        matches!(self, Opcode::Isetp | Opcode::Fsetp)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// Functional-unit class an opcode executes on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UnitClass {
    #[serde(rename = "INT_CORE")]
    IntCore,
    #[serde(rename = "FP_CORE")]
    FpCore,
    #[serde(rename = "SFU")]
    Sfu,
    #[serde(rename = "MEM")]
    Mem,
    #[serde(rename = "CTRL")]
    Ctrl,
}

impl UnitClass {
    pub fn name(self) -> &'static str {
        match self {
            UnitClass::IntCore => "INT_CORE",
            UnitClass::FpCore => "FP_CORE",
            UnitClass::Sfu => "SFU",
            UnitClass::Mem => "MEM",
            UnitClass::Ctrl => "CTRL",
        }
    }

    pub fn from_name(s: &str) -> Option<UnitClass> {
        match s.to_ascii_uppercase().as_str() {
            "INT_CORE" | "INT" => Some(UnitClass::IntCore),
            "FP_CORE" | "FP" => Some(UnitClass::FpCore),
            "SFU" => Some(UnitClass::Sfu),
            "MEM" => Some(UnitClass::Mem),
            "CTRL" => Some(UnitClass::Ctrl),
            _ => None,
        }
    }

    /// Unit classes that may carry a functional-unit fault.
    pub fn is_fault_target(self) -> bool {
        matches!(self, UnitClass::IntCore | UnitClass::FpCore | UnitClass::Sfu)
    }
}

impl fmt::Display for UnitClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn unit_class(op: Opcode) -> UnitClass {
    use Opcode::*;
    match op {
        Iadd | Isub | Imul | Imad | Shl | Shr | And | Or | Xor | Isetp | I2f | F2i | Mov
        | Movi => UnitClass::IntCore,
        Fadd | Fmul | Ffma | Fmax | Fmin | Fsetp => UnitClass::FpCore,
        Frcp | Frsq | Fexp2 | Flog2 => UnitClass::Sfu,
        Ld | St => UnitClass::Mem,
        Bra | Exit => UnitClass::Ctrl,
    }
}

/// General-purpose register index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegisterId(u8);

impl RegisterId {
    pub fn new(index: u8) -> Option<RegisterId> {
        (index <= MAX_REGISTER).then_some(RegisterId(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for RegisterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpecialReg {
    TidX,
    CtaidX,
    NtidX,
}

impl SpecialReg {
    pub fn name(self) -> &'static str {
        match self {
            SpecialReg::TidX => "%tid.x",
            SpecialReg::CtaidX => "%ctaid.x",
            SpecialReg::NtidX => "%ntid.x",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Register(RegisterId),
    Immediate(u32),
    Special(SpecialReg),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn suffix(self) -> &'static str {
        match self {
            CmpOp::Eq => "EQ",
            CmpOp::Ne => "NE",
            CmpOp::Lt => "LT",
            CmpOp::Le => "LE",
            CmpOp::Gt => "GT",
            CmpOp::Ge => "GE",
        }
    }

    fn from_suffix(s: &str) -> Option<CmpOp> {
        [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge]
            .into_iter()
            .find(|c| c.suffix() == s)
    }
}

/// Comparison carried by `ISETP`/`FSETP`. `unsigned` only applies to `ISETP`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Compare {
    pub op: CmpOp,
    pub unsigned: bool,
}

/// `@P<n>` or `@!P<n>` guard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Guard {
    pub pred: u8,
    pub negated: bool,
}

/// One decoded instruction.
///
/// Memory instructions keep their address as two leading sources: the base
/// register followed by an immediate byte offset. `ST` appends the stored
/// value as a third source.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub seq_no: usize,
    pub opcode: Opcode,
    pub compare: Option<Compare>,
    pub dst: Option<RegisterId>,
    pub pred_dst: Option<u8>,
    pub srcs: Vec<Operand>,
    pub guard: Option<Guard>,
    pub branch_target: Option<String>,
}

impl Instruction {
    pub fn new(opcode: Opcode) -> Instruction {
        Instruction {
            seq_no: 0,
            opcode,
            compare: None,
            dst: None,
            pred_dst: None,
            srcs: Vec::new(),
            guard: None,
            branch_target: None,
        }
    }

    pub fn unit(&self) -> UnitClass {
        unit_class(self.opcode)
    }

    /// Register sources, including memory base registers.
    pub fn src_registers(&self) -> impl Iterator<Item = RegisterId> + '_ {
        self.srcs.iter().filter_map(|op| match op {
            Operand::Register(r) => Some(*r),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Kernel {
    pub name: String,
    pub instructions: Vec<Instruction>,
    pub labels: BTreeMap<String, usize>,
}

impl Kernel {
    pub fn target_index(&self, label: &str) -> Option<usize> {
        self.labels.get(label).copied()
    }

    /// Highest register index referenced by any instruction.
    pub fn max_register(&self) -> Option<RegisterId> {
        self.instructions
            .iter()
            .flat_map(|i| i.dst.into_iter().chain(i.src_registers()))
            .max()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Kernel is empty or its last instruction is not `EXIT`.
    MissingExit,
    SeqNoGap { seq_no: usize, expected: usize },
    DestinationMismatch { seq_no: usize },
    PredicateDestinationMismatch { seq_no: usize },
    BadCompare { seq_no: usize },
    BadOperands { seq_no: usize, reason: String },
    MissingBranchTarget { seq_no: usize },
    UnexpectedBranchTarget { seq_no: usize },
    UnresolvedTarget { seq_no: usize, label: String },
    TargetOutOfBounds { seq_no: usize, label: String },
    PredicateOutOfRange { seq_no: usize },
}

fn operand_count(op: Opcode) -> usize {
    use Opcode::*;
    match op {
        Iadd | Isub | Imul | Shl | Shr | And | Or | Xor | Fadd | Fmul | Fmax | Fmin | Isetp
        | Fsetp | Ld => 2,
        Imad | Ffma | St => 3,
        Frcp | Frsq | Fexp2 | Flog2 | Mov | Movi | I2f | F2i => 1,
        Bra | Exit => 0,
    }
}

pub fn validate_kernel(k: &Kernel) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = k.instructions.len();
    for (i, instr) in k.instructions.iter().enumerate() {
        let s = instr.seq_no;
        if s != i {
            out.push(Violation::SeqNoGap { seq_no: s, expected: i });
        }
        let op = instr.opcode;
        if instr.dst.is_some() != op.writes_register() {
            out.push(Violation::DestinationMismatch { seq_no: s });
        }
        match instr.pred_dst {
            Some(p) if !op.writes_predicate() || p >= NUM_PREDICATES => {
                out.push(Violation::PredicateDestinationMismatch { seq_no: s })
            }
            None if op.writes_predicate() => {
                out.push(Violation::PredicateDestinationMismatch { seq_no: s })
            }
            _ => {}
        }
        let compare_ok = match (op, instr.compare) {
            (Opcode::Isetp, Some(_)) => true,
            (Opcode::Fsetp, Some(c)) => !c.unsigned,
            (_, None) => !op.writes_predicate(),
            _ => false,
        };
        if !compare_ok {
            out.push(Violation::BadCompare { seq_no: s });
        }
        if let Some(g) = instr.guard {
            if g.pred >= NUM_PREDICATES {
                out.push(Violation::PredicateOutOfRange { seq_no: s });
            }
        }
        if let Some(reason) = operand_problem(instr) {
            out.push(Violation::BadOperands { seq_no: s, reason });
        }
        match (op, &instr.branch_target) {
            (Opcode::Bra, None) => out.push(Violation::MissingBranchTarget { seq_no: s }),
            (Opcode::Bra, Some(label)) => match k.labels.get(label) {
                None => out.push(Violation::UnresolvedTarget {
                    seq_no: s,
                    label: label.clone(),
                }),
                Some(&t) if t >= n => out.push(Violation::TargetOutOfBounds {
                    seq_no: s,
                    label: label.clone(),
                }),
                Some(_) => {}
            },
            (_, Some(_)) => out.push(Violation::UnexpectedBranchTarget { seq_no: s }),
            (_, None) => {}
        }
    }
    if k.instructions.last().map(|i| i.opcode) != Some(Opcode::Exit) {
        out.push(Violation::MissingExit);
    }
    out
}

fn operand_problem(instr: &Instruction) -> Option<String> {
    let expected = operand_count(instr.opcode);
    if instr.srcs.len() != expected {
        return Some(format!(
            "{} takes {expected} source operand(s), found {}",
            instr.opcode,
            instr.srcs.len()
        ));
    }
    match instr.opcode {
        Opcode::Ld | Opcode::St => {
            if !matches!(instr.srcs[0], Operand::Register(_))
                || !matches!(instr.srcs[1], Operand::Immediate(_))
            {
                return Some("memory address must be [Rn+offset]".into());
            }
        }
        Opcode::Movi if !matches!(instr.srcs[0], Operand::Immediate(_)) => {
            return Some("MOVI takes an immediate".into());
        }
        _ => {}
    }
    None
}
