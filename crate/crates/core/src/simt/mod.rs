//! Functional model of a multi-SM SIMT device.
//!
//! Blocks are placed on SMs round-robin and occupy resident warp slots; each
//! warp runs its lanes in lockstep with per-lane predication. Every register
//! write is routed through an optional [`WriteHook`] before it is committed,
//! which is where fault injectors attach.

mod exec;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::isa::Instruction;

pub use exec::{eval_instruction, execute_kernel, Effect, ThreadState};

pub const WARP_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub num_sms: usize,
    pub max_resident_warps_per_sm: usize,
    #[serde(default = "default_warp_size")]
    pub warp_size: usize,
    pub regs_per_thread: usize,
    pub global_mem_words: usize,
    pub instr_budget: u64,
}

fn default_warp_size() -> usize {
    WARP_SIZE
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: String| Err(SimError::Config(m));
        if self.num_sms == 0 {
            return fail("num_sms must be at least 1".into());
        }
        if self.max_resident_warps_per_sm == 0 {
            return fail("max_resident_warps_per_sm must be at least 1".into());
        }
        if self.warp_size != WARP_SIZE {
            return fail(format!("warp_size must be {WARP_SIZE}, got {}", self.warp_size));
        }
        if !(16..=64).contains(&self.regs_per_thread) {
            return fail(format!(
                "regs_per_thread must be in [16, 64], got {}",
                self.regs_per_thread
            ));
        }
        if self.instr_budget == 0 {
            return fail("instr_budget must be positive".into());
        }
        Ok(())
    }

    /// Resident threads per SM, i.e. the range of `ResidentThreadCoord::resident_thread_id`.
    pub fn resident_threads_per_sm(&self) -> usize {
        self.max_resident_warps_per_sm * WARP_SIZE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LaunchConfig {
    pub grid_blocks: usize,
    pub threads_per_block: usize,
}

impl LaunchConfig {
    pub fn warps_per_block(&self) -> usize {
        self.threads_per_block.div_ceil(WARP_SIZE)
    }

    pub fn total_threads(&self) -> usize {
        self.grid_blocks * self.threads_per_block
    }

    pub fn validate(&self, device: &DeviceConfig) -> Result<(), SimError> {
        if self.grid_blocks == 0 || self.threads_per_block == 0 {
            return Err(SimError::Config(
                "grid_blocks and threads_per_block must be at least 1".into(),
            ));
        }
        if self.warps_per_block() > device.max_resident_warps_per_sm {
            return Err(SimError::Config(format!(
                "block of {} threads needs {} warp slots, SM has {}",
                self.threads_per_block,
                self.warps_per_block(),
                device.max_resident_warps_per_sm
            )));
        }
        Ok(())
    }
}

/// Physical residency address of a thread: the SM and the flattened
/// `warp_slot * 32 + lane` position inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResidentThreadCoord {
    pub sm_id: usize,
    pub resident_thread_id: usize,
}

impl ResidentThreadCoord {
    pub fn lane(&self) -> usize {
        self.resident_thread_id % WARP_SIZE
    }

    pub fn warp_slot(&self) -> usize {
        self.resident_thread_id / WARP_SIZE
    }
}

impl fmt::Display for ResidentThreadCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sm{}:t{}", self.sm_id, self.resident_thread_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockPlacement {
    pub sm_id: usize,
    pub warp_slot_base: usize,
}

/// Places blocks on SMs round-robin; within an SM, blocks take consecutive
/// warp slots in arrival order, wrapping modulo the resident-slot count.
///
/// The returned vector is indexed by block id.
pub fn schedule_blocks(
    launch: &LaunchConfig,
    device: &DeviceConfig,
) -> Result<Vec<BlockPlacement>, SimError> {
    device.validate()?;
    launch.validate(device)?;
    let wpb = launch.warps_per_block();
    let slots = device.max_resident_warps_per_sm;
    let mut next_slot = vec![0usize; device.num_sms];
    Ok((0..launch.grid_blocks)
        .map(|b| {
            let sm_id = b % device.num_sms;
            let base = next_slot[sm_id];
            next_slot[sm_id] = (base + wpb) % slots;
            BlockPlacement {
                sm_id,
                warp_slot_base: base,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrapKind {
    OutOfBoundsAccess,
    MisalignedAccess,
    Timeout,
}

impl TrapKind {
    pub const ALL: [TrapKind; 3] = [
        TrapKind::OutOfBoundsAccess,
        TrapKind::MisalignedAccess,
        TrapKind::Timeout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrapKind::OutOfBoundsAccess => "OutOfBoundsAccess",
            TrapKind::MisalignedAccess => "MisalignedAccess",
            TrapKind::Timeout => "Timeout",
        }
    }

    pub fn from_name(s: &str) -> Option<TrapKind> {
        TrapKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for TrapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trap {
    pub kind: TrapKind,
    pub kernel_name: String,
    pub seq_no: usize,
    pub detail: String,
}

impl fmt::Display for Trap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} in kernel `{}` at instruction {}: {}",
            self.kind, self.kernel_name, self.seq_no, self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("trap: {0}")]
    Trap(Trap),
    /// A branch predicate disagreed across the active lanes of a warp.
    #[error("divergent branch in kernel `{kernel}` at instruction {seq_no}")]
    Divergence { kernel: String, seq_no: usize },
    #[error("configuration error: {0}")]
    Config(String),
}

impl SimError {
    pub fn trap(&self) -> Option<&Trap> {
        match self {
            SimError::Trap(t) => Some(t),
            _ => None,
        }
    }
}

/// Observer/transformer of every general-purpose register write.
///
/// Called after an instruction produced `value` for the thread at `coord` and
/// before the value is committed. Implementations may only transform the
/// value; predicate writes and stores do not pass through the hook.
pub trait WriteHook {
    fn on_write(&mut self, coord: ResidentThreadCoord, instr: &Instruction, value: u32) -> u32;
}

impl<F> WriteHook for F
where
    F: FnMut(ResidentThreadCoord, &Instruction, u32) -> u32,
{
    fn on_write(&mut self, coord: ResidentThreadCoord, instr: &Instruction, value: u32) -> u32 {
        self(coord, instr, value)
    }
}

/// Per-launch execution statistics.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelStats {
    /// Warp-level instructions issued.
    pub instructions_executed: u64,
    /// Committed thread-level writes per destination register.
    pub reg_write_counts: Vec<u64>,
    /// Writes whose value the hook changed.
    #[serde(default)]
    pub corrupted_writes: u64,
    /// Instructions issued by each warp, in execution order.
    #[serde(skip)]
    pub warp_instructions: Vec<u64>,
}

impl KernelStats {
    pub fn new(regs_per_thread: usize) -> KernelStats {
        KernelStats {
            reg_write_counts: vec![0; regs_per_thread],
            ..KernelStats::default()
        }
    }

    /// Folds another launch's statistics into this one.
    pub fn accumulate(&mut self, other: &KernelStats) {
        self.instructions_executed += other.instructions_executed;
        if self.reg_write_counts.len() < other.reg_write_counts.len() {
            self.reg_write_counts.resize(other.reg_write_counts.len(), 0);
        }
        for (a, b) in self.reg_write_counts.iter_mut().zip(&other.reg_write_counts) {
            *a += b;
        }
        self.corrupted_writes += other.corrupted_writes;
        self.warp_instructions
            .extend_from_slice(&other.warp_instructions);
    }

    pub fn total_register_writes(&self) -> u64 {
        self.reg_write_counts.iter().sum()
    }
}

/// Reads a memory image stored as raw little-endian 32-bit words.
pub fn read_memory_image(bytes: &[u8]) -> Result<Vec<u32>, SimError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(SimError::Config(format!(
            "memory image length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_memory_image(words: &[u32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn device(num_sms: usize, slots: usize) -> DeviceConfig {
        DeviceConfig {
            num_sms,
            max_resident_warps_per_sm: slots,
            warp_size: 32,
            regs_per_thread: 32,
            global_mem_words: 64,
            instr_budget: 1000,
        }
    }

    #[test]
    fn single_block() {
        let launch = LaunchConfig {
            grid_blocks: 1,
            threads_per_block: 32,
        };
        assert_eq!(
            schedule_blocks(&launch, &device(1, 4)).unwrap(),
            vec![BlockPlacement {
                sm_id: 0,
                warp_slot_base: 0
            }]
        );
    }

    #[test]
    fn round_robin_two_sms() {
        let launch = LaunchConfig {
            grid_blocks: 4,
            threads_per_block: 32,
        };
        let p = schedule_blocks(&launch, &device(2, 2)).unwrap();
        let pairs: Vec<_> = p.iter().map(|b| (b.sm_id, b.warp_slot_base)).collect();
        assert_eq!(pairs, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
    }

    #[test]
    fn slots_wrap_for_later_waves() {
        let launch = LaunchConfig {
            grid_blocks: 3,
            threads_per_block: 64,
        };
        let p = schedule_blocks(&launch, &device(1, 4)).unwrap();
        let bases: Vec<_> = p.iter().map(|b| b.warp_slot_base).collect();
        assert_eq!(bases, vec![0, 2, 0]);
    }

    #[test]
    fn oversized_block_is_config_error() {
        let launch = LaunchConfig {
            grid_blocks: 1,
            threads_per_block: 65,
        };
        assert!(matches!(
            schedule_blocks(&launch, &device(1, 2)),
            Err(SimError::Config(_))
        ));
    }

    #[test]
    fn device_validation() {
        assert!(device(1, 1).validate().is_ok());
        assert!(DeviceConfig {
            warp_size: 16,
            ..device(1, 1)
        }
        .validate()
        .is_err());
        assert!(DeviceConfig {
            regs_per_thread: 8,
            ..device(1, 1)
        }
        .validate()
        .is_err());
        assert!(DeviceConfig {
            instr_budget: 0,
            ..device(1, 1)
        }
        .validate()
        .is_err());
        assert!(device(0, 1).validate().is_err());
    }

    #[test]
    fn memory_image_roundtrip() {
        let words = vec![0, 1, 0xDEAD_BEEF, u32::MAX];
        let bytes = write_memory_image(&words);
        assert_eq!(&bytes[8..12], &[0xEF, 0xBE, 0xAD, 0xDE]);
        assert_eq!(read_memory_image(&bytes).unwrap(), words);
        assert!(read_memory_image(&bytes[..5]).is_err());
    }

    proptest! {
        #[test]
        fn every_block_placed_once(
            blocks in 1usize..200,
            tpb in 1usize..256,
            sms in 1usize..8,
            slots in 8usize..32,
        ) {
            let launch = LaunchConfig { grid_blocks: blocks, threads_per_block: tpb };
            let dev = device(sms, slots);
            let p = schedule_blocks(&launch, &dev).unwrap();
            prop_assert_eq!(p.len(), blocks);
            let mut per_sm = vec![0usize; sms];
            for (b, place) in p.iter().enumerate() {
                prop_assert_eq!(place.sm_id, b % sms);
                prop_assert!(place.warp_slot_base < slots);
                per_sm[place.sm_id] += tpb;
            }
            prop_assert_eq!(per_sm.iter().sum::<usize>(), launch.total_threads());
        }
    }
}
