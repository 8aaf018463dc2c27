//! Line-oriented assembly front-end and its inverse.
//!
//! ```text
//! .kernel relu            # optional, names the kernel
//! loop:                   # labels may stand alone or prefix an instruction
//!   @!P0 IADD R1, R1, 0x4
//!   ISETP.LT.U32 P1, R2, 16
//!   LD R3, [R1+0x40]
//!   ST [R1-4], R3
//!   MOVI R4, f:1.5
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{
    CmpOp, Compare, Guard, Instruction, IsaError, Kernel, Opcode, Operand, RegisterId, SpecialReg,
    NUM_PREDICATES,
};

const DEFAULT_KERNEL_NAME: &str = "kernel";

pub fn parse_kernel(source: &str) -> Result<Kernel, IsaError> {
    let mut name = DEFAULT_KERNEL_NAME.to_string();
    let mut instructions = Vec::new();
    let mut labels = BTreeMap::new();

    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let err = |reason: String| IsaError::Syntax {
            line: line_no,
            reason,
        };
        let mut line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(".kernel") {
            let n = rest.trim();
            if n.is_empty() || !is_ident(n) {
                return Err(err(format!("bad kernel name `{n}`")));
            }
            name = n.to_string();
            continue;
        }
        while let Some((head, tail)) = line.split_once(':') {
            let head = head.trim();
            // `f:1.5` immediates also contain ':'; only a leading identifier is a label
            if !is_ident(head) {
                break;
            }
            if labels.insert(head.to_string(), instructions.len()).is_some() {
                return Err(IsaError::DuplicateLabel(head.to_string()));
            }
            line = tail.trim();
        }
        if line.is_empty() {
            continue;
        }
        let mut instr = parse_instruction(line).map_err(err)?;
        instr.seq_no = instructions.len();
        instructions.push(instr);
    }

    for instr in &instructions {
        if let Some(target) = &instr.branch_target {
            if !labels.contains_key(target) {
                return Err(IsaError::UnresolvedLabel(target.clone()));
            }
        }
    }

    Ok(Kernel {
        name,
        instructions,
        labels,
    })
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_instruction(line: &str) -> Result<Instruction, String> {
    let mut rest = line;
    let mut guard = None;
    if let Some(g) = rest.strip_prefix('@') {
        let (tok, tail) = split_token(g);
        let (negated, p) = match tok.strip_prefix('!') {
            Some(p) => (true, p),
            None => (false, tok),
        };
        guard = Some(Guard {
            pred: parse_predicate(p)?,
            negated,
        });
        rest = tail;
    }

    let (mnemonic, operand_text) = split_token(rest);
    let mut parts = mnemonic.split('.');
    let base = parts.next().unwrap_or_default();
    let opcode =
        Opcode::from_mnemonic(base).ok_or_else(|| format!("unknown mnemonic `{base}`"))?;
    let modifiers: Vec<&str> = parts.collect();

    let mut instr = Instruction::new(opcode);
    instr.guard = guard;

    if opcode.writes_predicate() {
        let (op, unsigned) = match modifiers.as_slice() {
            [c] => (*c, false),
            [c, "U32"] if opcode == Opcode::Isetp => (*c, true),
            _ => return Err(format!("{base} needs a comparison modifier, e.g. {base}.LT")),
        };
        let op = CmpOp::from_suffix(op).ok_or_else(|| format!("unknown comparison `{op}`"))?;
        instr.compare = Some(Compare { op, unsigned });
    } else if !modifiers.is_empty() {
        return Err(format!("{base} takes no modifiers"));
    }

    let ops: Vec<&str> = if operand_text.trim().is_empty() {
        Vec::new()
    } else {
        operand_text.split(',').map(str::trim).collect()
    };
    let arity = |n: usize| -> Result<(), String> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(format!("{base} expects {n} operand(s), found {}", ops.len()))
        }
    };

    match opcode {
        Opcode::Exit => arity(0)?,
        Opcode::Bra => {
            arity(1)?;
            if !is_ident(ops[0]) {
                return Err(format!("bad branch target `{}`", ops[0]));
            }
            instr.branch_target = Some(ops[0].to_string());
        }
        Opcode::Isetp | Opcode::Fsetp => {
            arity(3)?;
            instr.pred_dst = Some(parse_predicate(ops[0])?);
            instr.srcs = vec![parse_operand(ops[1])?, parse_operand(ops[2])?];
        }
        Opcode::Ld => {
            arity(2)?;
            instr.dst = Some(parse_register(ops[0])?);
            instr.srcs = parse_address(ops[1])?.to_vec();
        }
        Opcode::St => {
            arity(2)?;
            let [base, off] = parse_address(ops[0])?;
            instr.srcs = vec![base, off, parse_operand(ops[1])?];
        }
        Opcode::Movi => {
            arity(2)?;
            instr.dst = Some(parse_register(ops[0])?);
            let imm = parse_operand(ops[1])?;
            if !matches!(imm, Operand::Immediate(_)) {
                return Err("MOVI takes an immediate".into());
            }
            instr.srcs = vec![imm];
        }
        _ => {
            let n = match opcode {
                Opcode::Imad | Opcode::Ffma => 3,
                Opcode::Frcp
                | Opcode::Frsq
                | Opcode::Fexp2
                | Opcode::Flog2
                | Opcode::Mov
                | Opcode::I2f
                | Opcode::F2i => 1,
                _ => 2,
            };
            arity(n + 1)?;
            instr.dst = Some(parse_register(ops[0])?);
            instr.srcs = ops[1..]
                .iter()
                .map(|s| parse_operand(s))
                .collect::<Result<_, _>>()?;
        }
    }
    Ok(instr)
}

fn split_token(s: &str) -> (&str, &str) {
    let s = s.trim_start();
    match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], s[i..].trim()),
        None => (s, ""),
    }
}

fn parse_predicate(s: &str) -> Result<u8, String> {
    s.strip_prefix('P')
        .and_then(|n| n.parse::<u8>().ok())
        .filter(|p| *p < NUM_PREDICATES)
        .ok_or_else(|| format!("bad predicate register `{s}`"))
}

fn parse_register(s: &str) -> Result<RegisterId, String> {
    s.strip_prefix('R')
        .and_then(|n| n.parse::<u8>().ok())
        .and_then(RegisterId::new)
        .ok_or_else(|| format!("bad register `{s}`"))
}

fn parse_immediate(s: &str) -> Result<u32, String> {
    let bad = || format!("bad immediate `{s}`");
    if let Some(f) = s.strip_prefix("f:") {
        return f.parse::<f32>().map(f32::to_bits).map_err(|_| bad());
    }
    let (neg, digits) = match s.strip_prefix('-') {
        Some(d) => (true, d),
        None => (false, s),
    };
    let magnitude = match digits
        .strip_prefix("0x")
        .or_else(|| digits.strip_prefix("0X"))
    {
        Some(hex) => u32::from_str_radix(hex, 16).map_err(|_| bad())?,
        None => digits.parse::<u32>().map_err(|_| bad())?,
    };
    Ok(if neg {
        magnitude.wrapping_neg()
    } else {
        magnitude
    })
}

fn parse_operand(s: &str) -> Result<Operand, String> {
    if s.starts_with('R') {
        return parse_register(s).map(Operand::Register);
    }
    if s.starts_with('%') {
        let sr = match s {
            "%tid.x" => SpecialReg::TidX,
            "%ctaid.x" => SpecialReg::CtaidX,
            "%ntid.x" => SpecialReg::NtidX,
            _ => return Err(format!("unknown special register `{s}`")),
        };
        return Ok(Operand::Special(sr));
    }
    parse_immediate(s).map(Operand::Immediate)
}

fn parse_address(s: &str) -> Result<[Operand; 2], String> {
    let inner = s
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| format!("expected memory operand `[Rn+offset]`, found `{s}`"))?
        .trim();
    let (base, offset) = match inner.find(['+', '-']) {
        Some(i) => {
            let off = inner[i + 1..].trim();
            let mut v = parse_immediate(off)?;
            if inner.as_bytes()[i] == b'-' {
                v = v.wrapping_neg();
            }
            (inner[..i].trim(), v)
        }
        None => (inner, 0),
    };
    Ok([
        Operand::Register(parse_register(base)?),
        Operand::Immediate(offset),
    ])
}

fn fmt_operand(op: &Operand) -> String {
    match op {
        Operand::Register(r) => r.to_string(),
        Operand::Immediate(v) => format!("0x{v:X}"),
        Operand::Special(s) => s.name().to_string(),
    }
}

fn fmt_address(base: &Operand, offset: &Operand) -> String {
    match offset {
        Operand::Immediate(0) => format!("[{}]", fmt_operand(base)),
        Operand::Immediate(v) if (*v as i32) < 0 => {
            format!("[{}-0x{:X}]", fmt_operand(base), v.wrapping_neg())
        }
        other => format!("[{}+{}]", fmt_operand(base), fmt_operand(other)),
    }
}

/// Renders a kernel in the grammar accepted by [`parse_kernel`].
pub fn emit_text(k: &Kernel) -> String {
    let mut by_index: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (label, idx) in &k.labels {
        by_index.entry(*idx).or_default().push(label);
    }
    let mut out = String::new();
    let _ = writeln!(out, ".kernel {}", k.name);
    for (i, instr) in k.instructions.iter().enumerate() {
        for label in by_index.get(&i).into_iter().flatten() {
            let _ = writeln!(out, "{label}:");
        }
        let _ = writeln!(out, "    {}", fmt_instruction(instr));
    }
    for label in by_index.range(k.instructions.len()..).flat_map(|(_, v)| v) {
        let _ = writeln!(out, "{label}:");
    }
    out
}

pub(crate) fn fmt_instruction(instr: &Instruction) -> String {
    let mut s = String::new();
    if let Some(g) = instr.guard {
        let _ = write!(s, "@{}P{} ", if g.negated { "!" } else { "" }, g.pred);
    }
    s.push_str(instr.opcode.mnemonic());
    if let Some(c) = instr.compare {
        let _ = write!(s, ".{}", c.op.suffix());
        if c.unsigned {
            s.push_str(".U32");
        }
    }
    let mut ops: Vec<String> = Vec::new();
    match instr.opcode {
        Opcode::Bra => ops.extend(instr.branch_target.clone()),
        Opcode::Ld if instr.srcs.len() == 2 => {
            ops.extend(instr.dst.map(|d| d.to_string()));
            ops.push(fmt_address(&instr.srcs[0], &instr.srcs[1]));
        }
        Opcode::St if instr.srcs.len() == 3 => {
            ops.push(fmt_address(&instr.srcs[0], &instr.srcs[1]));
            ops.push(fmt_operand(&instr.srcs[2]));
        }
        _ => {
            ops.extend(instr.dst.map(|d| d.to_string()));
            ops.extend(instr.pred_dst.map(|p| format!("P{p}")));
            ops.extend(instr.srcs.iter().map(fmt_operand));
        }
    }
    if !ops.is_empty() {
        s.push(' ');
        s.push_str(&ops.join(", "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program() {
        let k = parse_kernel("MOV R0, 0x0\nEXIT").unwrap();
        assert_eq!(k.instructions.len(), 2);
        assert_eq!(k.instructions[0].dst, RegisterId::new(0));
        assert_eq!(k.instructions[0].srcs, vec![Operand::Immediate(0)]);
        assert_eq!(k.instructions[1].seq_no, 1);
        assert_eq!(k.name, "kernel");
    }

    #[test]
    fn unresolved_label() {
        assert_eq!(
            parse_kernel("BRA done\nEXIT"),
            Err(IsaError::UnresolvedLabel("done".into()))
        );
    }

    #[test]
    fn duplicate_label() {
        assert_eq!(
            parse_kernel("a: EXIT\na: EXIT"),
            Err(IsaError::DuplicateLabel("a".into()))
        );
    }

    #[test]
    fn syntax_errors_carry_line() {
        let e = parse_kernel("EXIT\nFOO R1, R2").unwrap_err();
        assert!(matches!(e, IsaError::Syntax { line: 2, .. }), "{e:?}");
        let e = parse_kernel("IADD R1, R2").unwrap_err();
        assert!(matches!(e, IsaError::Syntax { line: 1, .. }));
        assert!(parse_kernel("ISETP P0, R1, R2").is_err());
        assert!(parse_kernel("FSETP.LT.U32 P0, R1, R2").is_err());
        assert!(parse_kernel("MOV R64, R1").is_err());
        assert!(parse_kernel("@P8 EXIT").is_err());
        assert!(parse_kernel("LD R1, R2").is_err());
        assert!(parse_kernel("MOVI R1, R2").is_err());
    }

    #[test]
    fn operand_forms() {
        let src = "
            .kernel demo   # name
            top: @!P3 ISETP.GE.U32 P1, R2, 16
            MOVI R4, f:1.5
            MOV R5, %ctaid.x
            LD R6, [R1-16]
            ST [R1+0x40], R6
            IADD R7, R7, -1
            @P1 BRA top
            EXIT
        ";
        let k = parse_kernel(src).unwrap();
        assert_eq!(k.name, "demo");
        assert_eq!(k.labels["top"], 0);
        let i0 = &k.instructions[0];
        assert_eq!(
            i0.guard,
            Some(Guard {
                pred: 3,
                negated: true
            })
        );
        assert_eq!(
            i0.compare,
            Some(Compare {
                op: CmpOp::Ge,
                unsigned: true
            })
        );
        assert_eq!(i0.pred_dst, Some(1));
        assert_eq!(k.instructions[1].srcs, vec![Operand::Immediate(0x3FC0_0000)]);
        assert_eq!(
            k.instructions[2].srcs,
            vec![Operand::Special(SpecialReg::CtaidX)]
        );
        assert_eq!(k.instructions[3].srcs[1], Operand::Immediate((-16i32) as u32));
        assert_eq!(k.instructions[4].srcs[1], Operand::Immediate(0x40));
        assert_eq!(k.instructions[5].srcs[1], Operand::Immediate(u32::MAX));
        assert_eq!(k.instructions[6].branch_target.as_deref(), Some("top"));
        assert_eq!(parse_kernel(&emit_text(&k)).unwrap(), k);
    }

    #[test]
    fn emit_roundtrip_keeps_trailing_label() {
        let k = parse_kernel("BRA end\nEXIT\nend:").unwrap();
        assert_eq!(parse_kernel(&emit_text(&k)).unwrap(), k);
    }
}
