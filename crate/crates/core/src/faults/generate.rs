use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BitMode, FaultModel, FaultSpec, LaneScope, RegisterFault, UnitFault};
use crate::isa::{RegisterId, UnitClass};
use crate::simt::{DeviceConfig, WARP_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    Register,
    Unit,
}

/// Candidate values for every sampled dimension. Each dimension is sampled
/// uniformly and independently.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultConstraints {
    pub sm_ids: Vec<usize>,
    pub thread_ids: Vec<usize>,
    pub registers: Vec<RegisterId>,
    pub stuck_at: Vec<u8>,
    pub units: Vec<UnitClass>,
    pub lanes: Vec<LaneScope>,
    pub modes: Vec<BitMode>,
    pub bits: Vec<u8>,
}

impl FaultConstraints {
    /// SM 0, every resident thread, R0..R9, all bits, both stuck-at values,
    /// the three fault-target units on all lanes with single-bit flips.
    pub fn for_device(device: &DeviceConfig) -> FaultConstraints {
        FaultConstraints {
            sm_ids: vec![0],
            thread_ids: (0..device.resident_threads_per_sm()).collect(),
            registers: (0..10u8.min(device.regs_per_thread as u8))
                .filter_map(RegisterId::new)
                .collect(),
            stuck_at: vec![0, 1],
            units: vec![UnitClass::IntCore, UnitClass::FpCore, UnitClass::Sfu],
            lanes: vec![LaneScope::AllLanes],
            modes: vec![BitMode::Flip],
            bits: (0..32).collect(),
        }
    }

    fn check(&self, kind: FaultKind, device: &DeviceConfig) -> Result<u128, FaultGenError> {
        let bad = |m: String| Err(FaultGenError::Constraint(m));
        let nonempty = |name: &str, len: usize| {
            if len == 0 {
                Err(FaultGenError::Constraint(format!("no candidate {name}")))
            } else {
                Ok(len as u128)
            }
        };
        if let Some(s) = self.sm_ids.iter().find(|s| **s >= device.num_sms) {
            return bad(format!("sm {s} beyond {} SMs", device.num_sms));
        }
        if let Some(b) = self.bits.iter().find(|b| **b > 31) {
            return bad(format!("bit {b} out of range"));
        }
        let mut space = nonempty("SMs", distinct(&self.sm_ids))?
            * nonempty("bits", distinct(&self.bits))?;
        match kind {
            FaultKind::Register => {
                let limit = device.resident_threads_per_sm();
                if let Some(t) = self.thread_ids.iter().find(|t| **t >= limit) {
                    return bad(format!("thread {t} beyond {limit} resident threads"));
                }
                if let Some(r) = self
                    .registers
                    .iter()
                    .find(|r| r.index() >= device.regs_per_thread)
                {
                    return bad(format!(
                        "register {r} beyond {} registers per thread",
                        device.regs_per_thread
                    ));
                }
                if self.stuck_at.iter().any(|s| *s > 1) {
                    return bad("stuck_at values must be 0 or 1".into());
                }
                space *= nonempty("threads", distinct(&self.thread_ids))?
                    * nonempty("registers", distinct(&self.registers))?
                    * nonempty("stuck-at values", distinct(&self.stuck_at))?;
            }
            FaultKind::Unit => {
                if let Some(u) = self.units.iter().find(|u| !u.is_fault_target()) {
                    return bad(format!("unit {u} cannot carry a fault"));
                }
                if self
                    .lanes
                    .iter()
                    .any(|l| matches!(l, LaneScope::Lane(n) if *n as usize >= WARP_SIZE))
                {
                    return bad("lane index out of range".into());
                }
                space *= nonempty("units", distinct(&self.units))?
                    * nonempty("lane scopes", distinct(&self.lanes))?
                    * nonempty("modes", distinct(&self.modes))?;
            }
        }
        Ok(space)
    }
}

fn distinct<T: Eq + std::hash::Hash>(v: &[T]) -> usize {
    v.iter().collect::<HashSet<_>>().len()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FaultGenError {
    #[error("invalid fault constraints: {0}")]
    Constraint(String),
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, v: &[T]) -> T {
    v[rng.gen_range(0..v.len())]
}

/// Samples `n` distinct faults. Identical arguments always produce the
/// identical list; ids run `F000001`, `F000002`, ...
pub fn generate_fault_list(
    seed: u64,
    n: usize,
    kind: FaultKind,
    constraints: &FaultConstraints,
    device: &DeviceConfig,
) -> Result<Vec<FaultSpec>, FaultGenError> {
    if n == 0 {
        return Err(FaultGenError::Constraint("n must be at least 1".into()));
    }
    let space = constraints.check(kind, device)?;
    if n as u128 > space {
        return Err(FaultGenError::Constraint(format!(
            "{n} distinct faults requested but the constraints only admit {space}"
        )));
    }
    let c = constraints;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let model = match kind {
            FaultKind::Register => FaultModel::Register(RegisterFault {
                sm_id: pick(&mut rng, &c.sm_ids),
                thread_id: pick(&mut rng, &c.thread_ids),
                register: pick(&mut rng, &c.registers),
                bit: pick(&mut rng, &c.bits),
                stuck_at: pick(&mut rng, &c.stuck_at),
            }),
            FaultKind::Unit => FaultModel::Unit(UnitFault {
                sm_id: pick(&mut rng, &c.sm_ids),
                lanes: pick(&mut rng, &c.lanes),
                unit: pick(&mut rng, &c.units),
                bit: pick(&mut rng, &c.bits),
                mode: pick(&mut rng, &c.modes),
            }),
        };
        if seen.insert(model) {
            out.push(FaultSpec {
                id: format!("F{:06}", out.len() + 1),
                model,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn device() -> DeviceConfig {
        DeviceConfig {
            num_sms: 2,
            max_resident_warps_per_sm: 16,
            warp_size: 32,
            regs_per_thread: 32,
            global_mem_words: 1024,
            instr_budget: 1000,
        }
    }

    #[test]
    fn register_faults_respect_r0_to_r9() {
        let dev = device();
        let c = FaultConstraints::for_device(&dev);
        let list = generate_fault_list(1, 10, FaultKind::Register, &c, &dev).unwrap();
        assert_eq!(list.len(), 10);
        assert_eq!(list[0].id, "F000001");
        assert_eq!(list[9].id, "F000010");
        let distinct: HashSet<_> = list.iter().map(|f| f.model).collect();
        assert_eq!(distinct.len(), 10);
        for f in &list {
            match f.model {
                FaultModel::Register(r) => {
                    assert!(r.register.index() <= 9);
                    assert_eq!(r.sm_id, 0);
                }
                _ => panic!("wrong kind"),
            }
            f.validate(&dev).unwrap();
        }
        let again = generate_fault_list(1, 10, FaultKind::Register, &c, &dev).unwrap();
        assert_eq!(list, again);
        let other = generate_fault_list(2, 10, FaultKind::Register, &c, &dev).unwrap();
        assert_ne!(list, other);
    }

    #[test]
    fn bit_histogram_is_roughly_uniform() {
        // 31 degrees of freedom: a chi-square statistic above 61.1 has p < 0.001.
        // Single-lane scopes widen the space so 100 distinct FP_CORE faults exist.
        let dev = device();
        let mut c = FaultConstraints::for_device(&dev);
        c.units = vec![UnitClass::FpCore];
        assert!(generate_fault_list(7, 100, FaultKind::Unit, &c, &dev).is_err());
        let mut hist = [0u32; 32];
        let n = 100;
        let mut c2 = c.clone();
        c2.lanes = (0..32).map(LaneScope::Lane).collect();
        for f in generate_fault_list(7, n, FaultKind::Unit, &c2, &dev).unwrap() {
            if let FaultModel::Unit(u) = f.model {
                assert_eq!(u.unit, UnitClass::FpCore);
                assert_eq!(u.mode, BitMode::Flip);
                hist[u.bit as usize] += 1;
            }
        }
        let expected = n as f64 / 32.0;
        let chi2: f64 = hist
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 61.1, "chi2 = {chi2}, hist = {hist:?}");
    }

    #[test]
    fn exhausting_the_space() {
        let dev = device();
        let mut c = FaultConstraints::for_device(&dev);
        c.units = vec![UnitClass::Sfu];
        // 32 bits x 1 unit x 1 lane scope x 1 mode x 1 sm
        assert_eq!(
            generate_fault_list(0, 32, FaultKind::Unit, &c, &dev)
                .unwrap()
                .len(),
            32
        );
        assert!(generate_fault_list(0, 33, FaultKind::Unit, &c, &dev).is_err());
    }

    #[test]
    fn constraint_errors() {
        let dev = device();
        let base = FaultConstraints::for_device(&dev);
        let gen = |c: &FaultConstraints, k| generate_fault_list(1, 1, k, c, &dev);
        assert!(gen(&base, FaultKind::Register).is_ok());
        assert!(generate_fault_list(1, 0, FaultKind::Register, &base, &dev).is_err());
        let mut c = base.clone();
        c.registers.clear();
        assert!(gen(&c, FaultKind::Register).is_err());
        assert!(gen(&c, FaultKind::Unit).is_ok());
        let mut c = base.clone();
        c.sm_ids = vec![2];
        assert!(gen(&c, FaultKind::Unit).is_err());
        let mut c = base.clone();
        c.units = vec![UnitClass::Mem];
        assert!(gen(&c, FaultKind::Unit).is_err());
        let mut c = base.clone();
        c.registers = vec![RegisterId::new(40).unwrap()];
        assert!(gen(&c, FaultKind::Register).is_err());
        let mut c = base;
        c.bits = vec![32];
        assert!(gen(&c, FaultKind::Register).is_err());
    }
}
