use crate::isa::{validate_kernel, CmpOp, Compare, Kernel, Opcode, Operand, RegisterId, SpecialReg};
use crate::isa::Instruction;

use super::{
    schedule_blocks, DeviceConfig, KernelStats, LaunchConfig, ResidentThreadCoord, SimError,
    Trap, TrapKind, WriteHook, WARP_SIZE,
};

/// Architectural state of one thread.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadState {
    pub regs: Vec<u32>,
    /// Bit `p` holds predicate register `P<p>`.
    pub preds: u8,
    pub active: bool,
    pub global_tid: u32,
    pub tid_x: u32,
    pub ctaid_x: u32,
    pub ntid_x: u32,
}

impl ThreadState {
    pub fn new(regs_per_thread: usize) -> ThreadState {
        ThreadState {
            regs: vec![0; regs_per_thread],
            preds: 0,
            active: false,
            global_tid: 0,
            tid_x: 0,
            ctaid_x: 0,
            ntid_x: 0,
        }
    }

    pub fn pred(&self, p: u8) -> bool {
        self.preds & (1 << p) != 0
    }

    fn reset(&mut self) {
        self.regs.fill(0);
        self.preds = 0;
        self.active = false;
    }

    fn read(&self, op: &Operand) -> u32 {
        match *op {
            Operand::Register(r) => self.regs[r.index()],
            Operand::Immediate(v) => v,
            Operand::Special(SpecialReg::TidX) => self.tid_x,
            Operand::Special(SpecialReg::CtaidX) => self.ctaid_x,
            Operand::Special(SpecialReg::NtidX) => self.ntid_x,
        }
    }
}

/// Result of evaluating one instruction for one thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Effect {
    Reg(RegisterId, u32),
    Pred(u8, bool),
    Store { word: usize, value: u32 },
    Branch,
    Exit,
}

fn f(bits: u32) -> f32 {
    f32::from_bits(bits)
}

fn compare(c: Compare, is_float: bool, a: u32, b: u32) -> bool {
    if is_float {
        let (x, y) = (f(a), f(b));
        match c.op {
            CmpOp::Eq => x == y,
            CmpOp::Ne => x != y,
            CmpOp::Lt => x < y,
            CmpOp::Le => x <= y,
            CmpOp::Gt => x > y,
            CmpOp::Ge => x >= y,
        }
    } else if c.unsigned {
        cmp_ord(c.op, a.cmp(&b))
    } else {
        cmp_ord(c.op, (a as i32).cmp(&(b as i32)))
    }
}

fn cmp_ord(op: CmpOp, o: std::cmp::Ordering) -> bool {
    use std::cmp::Ordering::*;
    match op {
        CmpOp::Eq => o == Equal,
        CmpOp::Ne => o != Equal,
        CmpOp::Lt => o == Less,
        CmpOp::Le => o != Greater,
        CmpOp::Gt => o == Greater,
        CmpOp::Ge => o != Less,
    }
}

fn shift(v: u32, by: u32, left: bool) -> u32 {
    let r = if left { v.checked_shl(by) } else { v.checked_shr(by) };
    r.unwrap_or(0)
}

/// Evaluates `instr` for a single thread whose guard already passed.
///
/// Integer ops wrap (two's complement); float ops are IEEE-754 binary32 with
/// round-to-nearest-even and `FFMA` fused; SFU ops are computed in binary64
/// and rounded once to binary32. Memory faults are returned as
/// `(kind, detail)` for the caller to wrap into a [`Trap`].
pub fn eval_instruction(
    instr: &Instruction,
    thread: &ThreadState,
    memory: &[u32],
) -> Result<Effect, (TrapKind, String)> {
    let src = |i: usize| thread.read(&instr.srcs[i]);
    let dst = || instr.dst.expect("validated kernel: opcode writes a register");
    let reg = |v: u32| Ok(Effect::Reg(dst(), v));
    let fbits = |x: f32| Ok(Effect::Reg(dst(), x.to_bits()));
    let sfu = |g: fn(f64) -> f64| Ok(Effect::Reg(dst(), (g(f(src(0)) as f64) as f32).to_bits()));

    match instr.opcode {
        Opcode::Iadd => reg(src(0).wrapping_add(src(1))),
        Opcode::Isub => reg(src(0).wrapping_sub(src(1))),
        Opcode::Imul => reg(src(0).wrapping_mul(src(1))),
        Opcode::Imad => reg(src(0).wrapping_mul(src(1)).wrapping_add(src(2))),
        Opcode::Shl => reg(shift(src(0), src(1), true)),
        Opcode::Shr => reg(shift(src(0), src(1), false)),
        Opcode::And => reg(src(0) & src(1)),
        Opcode::Or => reg(src(0) | src(1)),
        Opcode::Xor => reg(src(0) ^ src(1)),
        Opcode::Isetp | Opcode::Fsetp => {
            let c = instr.compare.expect("validated kernel: SETP has a comparison");
            let p = instr.pred_dst.expect("validated kernel: SETP has a predicate");
            Ok(Effect::Pred(
                p,
                compare(c, instr.opcode == Opcode::Fsetp, src(0), src(1)),
            ))
        }
        Opcode::Fadd => fbits(f(src(0)) + f(src(1))),
        Opcode::Fmul => fbits(f(src(0)) * f(src(1))),
        Opcode::Ffma => fbits(f(src(0)).mul_add(f(src(1)), f(src(2)))),
        Opcode::Fmax => fbits(f(src(0)).max(f(src(1)))),
        Opcode::Fmin => fbits(f(src(0)).min(f(src(1)))),
        Opcode::Frcp => sfu(|x| 1.0 / x),
        Opcode::Frsq => sfu(|x| 1.0 / x.sqrt()),
        Opcode::Fexp2 => sfu(f64::exp2),
        Opcode::Flog2 => sfu(f64::log2),
        Opcode::Mov | Opcode::Movi => reg(src(0)),
        Opcode::I2f => fbits(src(0) as i32 as f32),
        Opcode::F2i => reg(f(src(0)) as i32 as u32),
        Opcode::Ld => {
            let word = resolve_address(src(0), src(1), memory.len())?;
            reg(memory[word])
        }
        Opcode::St => {
            let word = resolve_address(src(0), src(1), memory.len())?;
            Ok(Effect::Store {
                word,
                value: src(2),
            })
        }
        Opcode::Bra => Ok(Effect::Branch),
        Opcode::Exit => Ok(Effect::Exit),
    }
}

fn resolve_address(base: u32, offset: u32, words: usize) -> Result<usize, (TrapKind, String)> {
    let addr = base.wrapping_add(offset);
    if addr as u64 >= words as u64 * 4 {
        return Err((
            TrapKind::OutOfBoundsAccess,
            format!("address 0x{addr:08X} beyond {words} words"),
        ));
    }
    if !addr.is_multiple_of(4) {
        return Err((
            TrapKind::MisalignedAccess,
            format!("address 0x{addr:08X} is not word aligned"),
        ));
    }
    Ok(addr as usize / 4)
}

/// Runs one kernel launch to completion.
///
/// Blocks execute in ascending id, warps within a block in ascending index,
/// and lanes within a warp in ascending order for every instruction. The
/// instruction budget counts warp-level issues across the whole launch.
pub fn execute_kernel(
    kernel: &Kernel,
    launch: &LaunchConfig,
    device: &DeviceConfig,
    memory: &mut [u32],
    mut hook: Option<&mut dyn WriteHook>,
) -> Result<KernelStats, SimError> {
    let placements = schedule_blocks(launch, device)?;
    if memory.len() != device.global_mem_words {
        return Err(SimError::Config(format!(
            "memory image has {} words, device expects {}",
            memory.len(),
            device.global_mem_words
        )));
    }
    let violations = validate_kernel(kernel);
    if !violations.is_empty() {
        return Err(SimError::Config(format!(
            "kernel `{}` is invalid: {violations:?}",
            kernel.name
        )));
    }
    if let Some(r) = kernel.max_register() {
        if r.index() >= device.regs_per_thread {
            return Err(SimError::Config(format!(
                "kernel `{}` uses {r} but threads have {} registers",
                kernel.name, device.regs_per_thread
            )));
        }
    }
    // resolve branch targets once
    let targets: Vec<usize> = kernel
        .instructions
        .iter()
        .map(|i| {
            i.branch_target
                .as_deref()
                .and_then(|l| kernel.target_index(l))
                .unwrap_or(usize::MAX)
        })
        .collect();

    let mut stats = KernelStats::new(device.regs_per_thread);
    let mut lanes: Vec<ThreadState> = (0..WARP_SIZE)
        .map(|_| ThreadState::new(device.regs_per_thread))
        .collect();
    let tpb = launch.threads_per_block;

    for (block, place) in placements.iter().enumerate() {
        for warp in 0..launch.warps_per_block() {
            let slot = (place.warp_slot_base + warp) % device.max_resident_warps_per_sm;
            for (lane, t) in lanes.iter_mut().enumerate() {
                t.reset();
                let tid = warp * WARP_SIZE + lane;
                t.active = tid < tpb;
                t.tid_x = tid as u32;
                t.ctaid_x = block as u32;
                t.ntid_x = tpb as u32;
                t.global_tid = (block * tpb + tid) as u32;
            }
            let before = stats.instructions_executed;
            let result = run_warp(
                kernel,
                &targets,
                device,
                place.sm_id,
                slot,
                &mut lanes,
                memory,
                &mut hook,
                &mut stats,
            );
            stats
                .warp_instructions
                .push(stats.instructions_executed - before);
            result?;
        }
    }
    Ok(stats)
}

#[allow(clippy::too_many_arguments)]
fn run_warp(
    kernel: &Kernel,
    targets: &[usize],
    device: &DeviceConfig,
    sm_id: usize,
    slot: usize,
    lanes: &mut [ThreadState],
    memory: &mut [u32],
    hook: &mut Option<&mut dyn WriteHook>,
    stats: &mut KernelStats,
) -> Result<(), SimError> {
    let trap = |kind, seq_no, detail| {
        SimError::Trap(Trap {
            kind,
            kernel_name: kernel.name.clone(),
            seq_no,
            detail,
        })
    };
    let mut pc = 0usize;
    while lanes.iter().any(|t| t.active) {
        let instr = &kernel.instructions[pc];
        stats.instructions_executed += 1;
        if stats.instructions_executed > device.instr_budget {
            return Err(trap(
                TrapKind::Timeout,
                instr.seq_no,
                format!("instruction budget {} exhausted", device.instr_budget),
            ));
        }
        let enabled = |t: &ThreadState| {
            t.active
                && instr
                    .guard
                    .is_none_or(|g| t.pred(g.pred) != g.negated)
        };
        match instr.opcode {
            Opcode::Bra => {
                let active = lanes.iter().filter(|t| t.active).count();
                let taken = lanes.iter().filter(|t| enabled(t)).count();
                if taken == active {
                    pc = targets[pc];
                } else if taken == 0 {
                    pc += 1;
                } else {
                    return Err(SimError::Divergence {
                        kernel: kernel.name.clone(),
                        seq_no: instr.seq_no,
                    });
                }
                continue;
            }
            Opcode::Exit => {
                for t in lanes.iter_mut() {
                    if enabled(t) {
                        t.active = false;
                    }
                }
            }
            _ => {
                for (lane, t) in lanes.iter_mut().enumerate() {
                    if !enabled(t) {
                        continue;
                    }
                    let effect = eval_instruction(instr, t, memory)
                        .map_err(|(kind, detail)| trap(kind, instr.seq_no, detail))?;
                    match effect {
                        Effect::Reg(r, mut v) => {
                            if let Some(h) = hook.as_deref_mut() {
                                let coord = ResidentThreadCoord {
                                    sm_id,
                                    resident_thread_id: slot * WARP_SIZE + lane,
                                };
                                let out = h.on_write(coord, instr, v);
                                if out != v {
                                    stats.corrupted_writes += 1;
                                }
                                v = out;
                            }
                            t.regs[r.index()] = v;
                            stats.reg_write_counts[r.index()] += 1;
                        }
                        Effect::Pred(p, b) => {
                            if b {
                                t.preds |= 1 << p;
                            } else {
                                t.preds &= !(1 << p);
                            }
                        }
                        Effect::Store { word, value } => memory[word] = value,
                        Effect::Branch | Effect::Exit => unreachable!("handled per warp"),
                    }
                }
            }
        }
        pc += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::parse_kernel;

    fn device(words: usize) -> DeviceConfig {
        DeviceConfig {
            num_sms: 2,
            max_resident_warps_per_sm: 4,
            warp_size: 32,
            regs_per_thread: 16,
            global_mem_words: words,
            instr_budget: 10_000,
        }
    }

    fn one_thread() -> LaunchConfig {
        LaunchConfig {
            grid_blocks: 1,
            threads_per_block: 1,
        }
    }

    fn run(src: &str, mem: &mut [u32]) -> Result<KernelStats, SimError> {
        let k = parse_kernel(src).unwrap();
        execute_kernel(&k, &one_thread(), &device(mem.len()), mem, None)
    }

    fn eval1(src: &str, regs: &[(usize, u32)]) -> Effect {
        let k = parse_kernel(&format!("{src}\nEXIT")).unwrap();
        let mut t = ThreadState::new(16);
        for &(r, v) in regs {
            t.regs[r] = v;
        }
        eval_instruction(&k.instructions[0], &t, &[]).unwrap()
    }

    fn reg(n: u8) -> RegisterId {
        RegisterId::new(n).unwrap()
    }

    #[test]
    fn store_immediate() {
        let mut mem = vec![0u32; 4];
        run("MOVI R0, 7\nST [R1], R0\nEXIT", &mut mem).unwrap();
        assert_eq!(mem[0], 7);
    }

    #[test]
    fn out_of_bounds_load_traps() {
        let mut mem = vec![0u32; 4];
        let err = run("MOVI R1, 16\nLD R0, [R1]\nEXIT", &mut mem).unwrap_err();
        let t = err.trap().unwrap();
        assert_eq!(t.kind, TrapKind::OutOfBoundsAccess);
        assert_eq!(t.seq_no, 1);
        assert!(run("MOVI R1, 12\nLD R0, [R1]\nEXIT", &mut mem).is_ok());
    }

    #[test]
    fn misaligned_access_traps() {
        let mut mem = vec![0u32; 4];
        let err = run("MOVI R1, 2\nST [R1], R0\nEXIT", &mut mem).unwrap_err();
        assert_eq!(err.trap().unwrap().kind, TrapKind::MisalignedAccess);
    }

    #[test]
    fn timeout_is_exactly_budget_plus_one() {
        let src = "loop: IADD R0, R0, 1\nISETP.LT P0, R0, 5\n@P0 BRA loop\nEXIT";
        // 5 iterations x 3 + EXIT
        let k = parse_kernel(src).unwrap();
        let mut mem = vec![0u32; 1];
        let mut dev = device(1);
        dev.instr_budget = 16;
        let s = execute_kernel(&k, &one_thread(), &dev, &mut mem, None).unwrap();
        assert_eq!(s.instructions_executed, 16);
        dev.instr_budget = 15;
        let err = execute_kernel(&k, &one_thread(), &dev, &mut mem, None).unwrap_err();
        assert_eq!(err.trap().unwrap().kind, TrapKind::Timeout);
    }

    #[test]
    fn integer_semantics() {
        assert_eq!(
            eval1("IADD R2, R0, R1", &[(0, 0x7FFF_FFFF), (1, 1)]),
            Effect::Reg(reg(2), 0x8000_0000)
        );
        assert_eq!(
            eval1("ISUB R2, R0, R1", &[(0, 0), (1, 1)]),
            Effect::Reg(reg(2), u32::MAX)
        );
        assert_eq!(
            eval1("IMAD R3, R0, R1, R2", &[(0, 3), (1, 4), (2, 5)]),
            Effect::Reg(reg(3), 17)
        );
        assert_eq!(eval1("SHL R1, R0, 40", &[(0, 1)]), Effect::Reg(reg(1), 0));
        assert_eq!(
            eval1("SHR R1, R0, 4", &[(0, 0x8000_0000)]),
            Effect::Reg(reg(1), 0x0800_0000)
        );
        assert_eq!(
            eval1("ISETP.LT P2, R0, 0", &[(0, u32::MAX)]),
            Effect::Pred(2, true)
        );
        assert_eq!(
            eval1("ISETP.LT.U32 P2, R0, 0", &[(0, u32::MAX)]),
            Effect::Pred(2, false)
        );
        assert_eq!(
            eval1("F2I R1, R0", &[(0, (-2.75f32).to_bits())]),
            Effect::Reg(reg(1), (-2i32) as u32)
        );
        assert_eq!(
            eval1("I2F R1, R0", &[(0, (-3i32) as u32)]),
            Effect::Reg(reg(1), (-3.0f32).to_bits())
        );
    }

    #[test]
    fn float_semantics() {
        let bits = |x: f32| x.to_bits();
        assert_eq!(
            eval1("FADD R2, R0, R1", &[(0, bits(1.5)), (1, bits(2.5))]),
            Effect::Reg(reg(2), bits(4.0))
        );
        assert_eq!(
            eval1("FEXP2 R1, R0", &[(0, bits(1.0))]),
            Effect::Reg(reg(1), bits(2.0))
        );
        assert_eq!(
            eval1("FLOG2 R1, R0", &[(0, bits(8.0))]),
            Effect::Reg(reg(1), bits(3.0))
        );
        assert_eq!(
            eval1("FRCP R1, R0", &[(0, bits(4.0))]),
            Effect::Reg(reg(1), bits(0.25))
        );
        assert_eq!(
            eval1("FRSQ R1, R0", &[(0, bits(16.0))]),
            Effect::Reg(reg(1), bits(0.25))
        );
        assert_eq!(
            eval1("FSETP.GE P0, R0, R1", &[(0, bits(1.0)), (1, bits(1.0))]),
            Effect::Pred(0, true)
        );
        // fused: a*b+c with a single rounding differs from the two-step result
        let a = 1.0f32 + f32::EPSILON;
        let c = -(1.0f32 + 2.0 * f32::EPSILON);
        let fused = a.mul_add(a, c);
        assert_ne!(fused, a * a + c);
        assert_eq!(
            eval1("FFMA R3, R0, R1, R2", &[(0, bits(a)), (1, bits(a)), (2, bits(c))]),
            Effect::Reg(reg(3), bits(fused))
        );
    }

    #[test]
    fn predication_masks_lanes() {
        let src = "
            MOV R0, %tid.x
            ISETP.GE P0, R0, 4
            @P0 EXIT
            SHL R1, R0, 2
            @!P0 ST [R1], R0
            EXIT";
        let k = parse_kernel(src).unwrap();
        let mut mem = vec![0xFFu32; 8];
        let launch = LaunchConfig {
            grid_blocks: 1,
            threads_per_block: 32,
        };
        execute_kernel(&k, &launch, &device(8), &mut mem, None).unwrap();
        assert_eq!(mem, vec![0, 1, 2, 3, 0xFF, 0xFF, 0xFF, 0xFF]);
    }

    #[test]
    fn divergent_branch_is_reported() {
        let src = "
            MOV R0, %tid.x
            ISETP.LT P0, R0, 3
            @P0 BRA skip
            MOVI R1, 1
            skip: EXIT";
        let k = parse_kernel(src).unwrap();
        let mut mem = vec![0u32; 1];
        let launch = LaunchConfig {
            grid_blocks: 1,
            threads_per_block: 8,
        };
        let err = execute_kernel(&k, &launch, &device(1), &mut mem, None).unwrap_err();
        assert_eq!(
            err,
            SimError::Divergence {
                kernel: "kernel".into(),
                seq_no: 2
            }
        );
        // uniform branch across the active lanes is fine
        let launch = LaunchConfig {
            grid_blocks: 1,
            threads_per_block: 3,
        };
        execute_kernel(&k, &launch, &device(1), &mut mem, None).unwrap();
    }

    #[test]
    fn special_registers_and_residency() {
        let src = "
            IMAD R0, %ctaid.x, %ntid.x, %tid.x
            SHL R1, R0, 2
            ST [R1], R0
            EXIT";
        let k = parse_kernel(src).unwrap();
        let launch = LaunchConfig {
            grid_blocks: 3,
            threads_per_block: 40,
        };
        let mut mem = vec![0u32; 120];
        let mut seen = Vec::new();
        let mut hook = |c: ResidentThreadCoord, i: &Instruction, v: u32| {
            if i.seq_no == 0 {
                seen.push((c, v));
            }
            v
        };
        let stats =
            execute_kernel(&k, &launch, &device(120), &mut mem, Some(&mut hook)).unwrap();
        assert_eq!(mem, (0..120).collect::<Vec<u32>>());
        assert_eq!(seen.len(), 120);
        // block 2 is the second block on SM 0: slots 2..4
        let (c, v) = seen[80];
        assert_eq!(v, 80);
        assert_eq!((c.sm_id, c.resident_thread_id), (0, 64));
        // block 1 on SM 1, second warp lane 7 => tid 39
        let (c, v) = seen[79];
        assert_eq!(v, 79);
        assert_eq!((c.sm_id, c.warp_slot(), c.lane()), (1, 1, 7));
        // 3 blocks x 2 warps, 4 instructions each
        assert_eq!(stats.warp_instructions, vec![4; 6]);
        assert_eq!(stats.instructions_executed, 24);
        assert_eq!(stats.reg_write_counts[0], 120);
        assert_eq!(stats.reg_write_counts[1], 120);
    }

    #[test]
    fn hook_identity_is_neutral_and_deterministic() {
        let src = "
            IMAD R0, %ctaid.x, %ntid.x, %tid.x
            I2F R2, R0
            FMUL R3, R2, f:0.5
            SHL R1, R0, 2
            ST [R1], R3
            EXIT";
        let k = parse_kernel(src).unwrap();
        let launch = LaunchConfig {
            grid_blocks: 2,
            threads_per_block: 50,
        };
        let dev = device(100);
        let mut a = vec![0u32; 100];
        let sa = execute_kernel(&k, &launch, &dev, &mut a, None).unwrap();
        let mut b = vec![0u32; 100];
        let mut id = |_: ResidentThreadCoord, _: &Instruction, v: u32| v;
        let sb = execute_kernel(&k, &launch, &dev, &mut b, Some(&mut id)).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(sb.corrupted_writes, 0);
        assert_eq!(f32::from_bits(a[7]), 3.5);
    }

    #[test]
    fn register_beyond_device_is_config_error() {
        let mut mem = vec![0u32; 1];
        let err = run("MOVI R20, 1\nEXIT", &mut mem).unwrap_err();
        assert!(matches!(err, SimError::Config(_)));
        let err = run("MOVI R1, 1", &mut mem).unwrap_err();
        assert!(matches!(err, SimError::Config(_)));
    }
}
