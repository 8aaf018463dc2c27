//! Fault models expressed as register-write hooks.
//!
//! A [`RegisterFault`] pins one bit of one general-purpose register of one
//! resident thread to a constant. A [`UnitFault`] corrupts one bit of every
//! result produced by a functional-unit class on an SM. A [`TransientFault`]
//! corrupts a single dynamic write once. All of them act on values as they
//! are written, after the producing instruction.

mod generate;
mod list;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::isa::{Instruction, RegisterId, UnitClass};
use crate::simt::{DeviceConfig, ResidentThreadCoord, WriteHook, WARP_SIZE};

pub use generate::{generate_fault_list, FaultConstraints, FaultGenError, FaultKind};
pub use list::{parse_json_line, read_fault_list, to_json_line, write_fault_list, FaultListError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitMode {
    Flip,
    #[serde(rename = "stuck_at_0")]
    StuckAt0,
    #[serde(rename = "stuck_at_1")]
    StuckAt1,
}

impl BitMode {
    pub fn stuck_at(v: u8) -> BitMode {
        if v == 0 {
            BitMode::StuckAt0
        } else {
            BitMode::StuckAt1
        }
    }
}

/// Applies `mode` to bit `bit` of `value`, leaving every other bit untouched.
pub fn corrupt_value(value: u32, bit: u8, mode: BitMode) -> u32 {
    debug_assert!(bit < 32);
    let mask = 1u32 << bit;
    match mode {
        BitMode::Flip => value ^ mask,
        BitMode::StuckAt0 => value & !mask,
        BitMode::StuckAt1 => value | mask,
    }
}

/// Permanent stuck-at fault in one register of one resident thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegisterFault {
    pub sm_id: usize,
    pub thread_id: usize,
    pub register: RegisterId,
    pub bit: u8,
    pub stuck_at: u8,
}

impl RegisterFault {
    pub fn mask(&self) -> u32 {
        1 << self.bit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LaneScope {
    AllLanes,
    Lane(u8),
}

impl fmt::Display for LaneScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LaneScope::AllLanes => f.write_str("all"),
            LaneScope::Lane(l) => write!(f, "{l}"),
        }
    }
}

/// Permanent fault in the output of a functional-unit class on one SM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitFault {
    pub sm_id: usize,
    pub lanes: LaneScope,
    pub unit: UnitClass,
    pub bit: u8,
    pub mode: BitMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransientModel {
    SingleBitFlip { bit: u8 },
    /// Flips `bit` and `bit + 1`.
    TwoAdjacentBitFlip { bit: u8 },
    RandomValue { value: u32 },
    AllZero,
}

impl TransientModel {
    pub fn apply(&self, v: u32) -> u32 {
        match *self {
            TransientModel::SingleBitFlip { bit } => v ^ (1 << bit),
            TransientModel::TwoAdjacentBitFlip { bit } => v ^ (0b11 << bit),
            TransientModel::RandomValue { value } => value,
            TransientModel::AllZero => 0,
        }
    }
}

/// One-shot corruption of the `occurrence`-th register write (0-based,
/// counted over the whole run) performed by one resident thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TransientFault {
    pub sm_id: usize,
    pub thread_id: usize,
    pub occurrence: u64,
    pub model: TransientModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultModel {
    Register(RegisterFault),
    Unit(UnitFault),
    Transient(TransientFault),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FaultSpec {
    pub id: String,
    pub model: FaultModel,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("fault {id}: {reason}")]
pub struct FaultValidationError {
    pub id: String,
    pub reason: String,
}

impl FaultSpec {
    /// Checks the fault's coordinates against the device it will run on.
    pub fn validate(&self, device: &DeviceConfig) -> Result<(), FaultValidationError> {
        let err = |reason: String| {
            Err(FaultValidationError {
                id: self.id.clone(),
                reason,
            })
        };
        let (sm, thread, bit) = match &self.model {
            FaultModel::Register(r) => {
                if r.register.index() >= device.regs_per_thread {
                    return err(format!(
                        "register {} beyond {} registers per thread",
                        r.register, device.regs_per_thread
                    ));
                }
                if r.stuck_at > 1 {
                    return err(format!("stuck_at must be 0 or 1, got {}", r.stuck_at));
                }
                (r.sm_id, Some(r.thread_id), r.bit)
            }
            FaultModel::Unit(u) => {
                if !u.unit.is_fault_target() {
                    return err(format!("unit {} cannot carry a fault", u.unit));
                }
                if let LaneScope::Lane(l) = u.lanes {
                    if l as usize >= WARP_SIZE {
                        return err(format!("lane {l} out of range"));
                    }
                }
                (u.sm_id, None, u.bit)
            }
            FaultModel::Transient(t) => {
                let bit = match t.model {
                    TransientModel::SingleBitFlip { bit } => bit,
                    TransientModel::TwoAdjacentBitFlip { bit } if bit >= 31 => {
                        return err("two-adjacent flip needs bit <= 30".into())
                    }
                    TransientModel::TwoAdjacentBitFlip { bit } => bit,
                    _ => 0,
                };
                (t.sm_id, Some(t.thread_id), bit)
            }
        };
        if sm >= device.num_sms {
            return err(format!("sm {sm} beyond {} SMs", device.num_sms));
        }
        if let Some(t) = thread {
            if t >= device.resident_threads_per_sm() {
                return err(format!(
                    "thread {t} beyond {} resident threads",
                    device.resident_threads_per_sm()
                ));
            }
        }
        if bit > 31 {
            return err(format!("bit {bit} out of range"));
        }
        Ok(())
    }
}

/// Whether `spec` targets the write `instr` performs for the thread at `coord`.
///
/// Transient faults match every write of their thread; the occurrence
/// counter lives in the hook.
pub fn matches(spec: &FaultSpec, coord: ResidentThreadCoord, instr: &Instruction) -> bool {
    match &spec.model {
        FaultModel::Register(r) => {
            coord.sm_id == r.sm_id
                && coord.resident_thread_id == r.thread_id
                && instr.dst == Some(r.register)
        }
        FaultModel::Unit(u) => {
            coord.sm_id == u.sm_id
                && match u.lanes {
                    LaneScope::AllLanes => true,
                    LaneScope::Lane(l) => coord.lane() == l as usize,
                }
                && instr.unit() == u.unit
                && instr.dst.is_some()
        }
        FaultModel::Transient(t) => {
            coord.sm_id == t.sm_id
                && coord.resident_thread_id == t.thread_id
                && instr.dst.is_some()
        }
    }
}

/// Write hook realizing one [`FaultSpec`].
#[derive(Debug, Clone)]
pub struct FaultHook {
    spec: FaultSpec,
    matched: u64,
    changed: u64,
    seen: u64,
    fired: bool,
}

impl FaultHook {
    pub fn spec(&self) -> &FaultSpec {
        &self.spec
    }

    /// Writes the injector was applied to.
    pub fn matched_writes(&self) -> u64 {
        self.matched
    }

    /// Writes whose value the injector actually altered.
    pub fn corrupted_writes(&self) -> u64 {
        self.changed
    }
}

pub fn make_hook(spec: &FaultSpec) -> FaultHook {
    FaultHook {
        spec: spec.clone(),
        matched: 0,
        changed: 0,
        seen: 0,
        fired: false,
    }
}

impl WriteHook for FaultHook {
    fn on_write(&mut self, coord: ResidentThreadCoord, instr: &Instruction, value: u32) -> u32 {
        if !matches(&self.spec, coord, instr) {
            return value;
        }
        let out = match &self.spec.model {
            FaultModel::Register(r) => corrupt_value(value, r.bit, BitMode::stuck_at(r.stuck_at)),
            FaultModel::Unit(u) => corrupt_value(value, u.bit, u.mode),
            FaultModel::Transient(t) => {
                let n = self.seen;
                self.seen += 1;
                if self.fired || n != t.occurrence {
                    return value;
                }
                self.fired = true;
                t.model.apply(value)
            }
        };
        self.matched += 1;
        if out != value {
            self.changed += 1;
        }
        out
    }
}
