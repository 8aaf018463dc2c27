//! Fault-list files: one JSON object per line.
//!
//! ```text
//! {"id":"F000001","kind":"register","sm":0,"thread":5,"reg":3,"bit":12,"stuck_at":1}
//! {"id":"F000002","kind":"unit","sm":0,"lane":"all","unit":"FP_CORE","bit":31,"mode":"flip"}
//! ```

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{
    BitMode, FaultModel, FaultSpec, LaneScope, RegisterFault, TransientFault, TransientModel,
    UnitFault,
};
use crate::isa::{RegisterId, UnitClass};

#[derive(Debug, thiserror::Error)]
pub enum FaultListError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("duplicate fault id `{0}`")]
    DuplicateId(String),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LaneRepr {
    Word(String),
    Lane(u8),
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TransientRepr {
    SingleBitFlip,
    TwoAdjacentBitFlip,
    RandomValue,
    AllZero,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Register {
        id: String,
        sm: usize,
        thread: usize,
        reg: u8,
        bit: u8,
        stuck_at: u8,
    },
    Unit {
        id: String,
        sm: usize,
        lane: LaneRepr,
        unit: UnitClass,
        bit: u8,
        mode: BitMode,
    },
    Transient {
        id: String,
        sm: usize,
        thread: usize,
        occurrence: u64,
        model: TransientRepr,
        #[serde(default)]
        bit: Option<u8>,
        #[serde(default)]
        value: Option<u32>,
    },
}

#[derive(Serialize)]
struct RegisterLine<'a> {
    id: &'a str,
    kind: &'static str,
    sm: usize,
    thread: usize,
    reg: usize,
    bit: u8,
    stuck_at: u8,
}

#[derive(Serialize)]
struct UnitLine<'a> {
    id: &'a str,
    kind: &'static str,
    sm: usize,
    lane: LaneRepr,
    unit: UnitClass,
    bit: u8,
    mode: BitMode,
}

#[derive(Serialize)]
struct TransientLine<'a> {
    id: &'a str,
    kind: &'static str,
    sm: usize,
    thread: usize,
    occurrence: u64,
    model: TransientRepr,
    #[serde(skip_serializing_if = "Option::is_none")]
    bit: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<u32>,
}

/// Renders one fault as its single-line JSON form.
pub fn to_json_line(spec: &FaultSpec) -> String {
    let id = spec.id.as_str();
    let json = match spec.model {
        FaultModel::Register(r) => serde_json::to_string(&RegisterLine {
            id,
            kind: "register",
            sm: r.sm_id,
            thread: r.thread_id,
            reg: r.register.index(),
            bit: r.bit,
            stuck_at: r.stuck_at,
        }),
        FaultModel::Unit(u) => serde_json::to_string(&UnitLine {
            id,
            kind: "unit",
            sm: u.sm_id,
            lane: match u.lanes {
                LaneScope::AllLanes => LaneRepr::Word("all".into()),
                LaneScope::Lane(l) => LaneRepr::Lane(l),
            },
            unit: u.unit,
            bit: u.bit,
            mode: u.mode,
        }),
        FaultModel::Transient(t) => {
            let (model, bit, value) = match t.model {
                TransientModel::SingleBitFlip { bit } => (TransientRepr::SingleBitFlip, Some(bit), None),
                TransientModel::TwoAdjacentBitFlip { bit } => {
                    (TransientRepr::TwoAdjacentBitFlip, Some(bit), None)
                }
                TransientModel::RandomValue { value } => {
                    (TransientRepr::RandomValue, None, Some(value))
                }
                TransientModel::AllZero => (TransientRepr::AllZero, None, None),
            };
            serde_json::to_string(&TransientLine {
                id,
                kind: "transient",
                sm: t.sm_id,
                thread: t.thread_id,
                occurrence: t.occurrence,
                model,
                bit,
                value,
            })
        }
    };
    json.expect("fault records serialize infallibly")
}

fn from_record(rec: Record) -> Result<FaultSpec, String> {
    let (id, model) = match rec {
        Record::Register {
            id,
            sm,
            thread,
            reg,
            bit,
            stuck_at,
        } => {
            let register = RegisterId::new(reg).ok_or_else(|| format!("bad register {reg}"))?;
            (
                id,
                FaultModel::Register(RegisterFault {
                    sm_id: sm,
                    thread_id: thread,
                    register,
                    bit,
                    stuck_at,
                }),
            )
        }
        Record::Unit {
            id,
            sm,
            lane,
            unit,
            bit,
            mode,
        } => {
            let lanes = match lane {
                LaneRepr::Word(w) if w == "all" => LaneScope::AllLanes,
                LaneRepr::Word(w) => return Err(format!("bad lane scope `{w}`")),
                LaneRepr::Lane(l) => LaneScope::Lane(l),
            };
            (
                id,
                FaultModel::Unit(UnitFault {
                    sm_id: sm,
                    lanes,
                    unit,
                    bit,
                    mode,
                }),
            )
        }
        Record::Transient {
            id,
            sm,
            thread,
            occurrence,
            model,
            bit,
            value,
        } => {
            let need_bit = || bit.ok_or_else(|| "transient model needs `bit`".to_string());
            let model = match model {
                TransientRepr::SingleBitFlip => TransientModel::SingleBitFlip { bit: need_bit()? },
                TransientRepr::TwoAdjacentBitFlip => {
                    TransientModel::TwoAdjacentBitFlip { bit: need_bit()? }
                }
                TransientRepr::RandomValue => TransientModel::RandomValue {
                    value: value.ok_or("random_value needs `value`")?,
                },
                TransientRepr::AllZero => TransientModel::AllZero,
            };
            (
                id,
                FaultModel::Transient(TransientFault {
                    sm_id: sm,
                    thread_id: thread,
                    occurrence,
                    model,
                }),
            )
        }
    };
    Ok(FaultSpec { id, model })
}

pub fn parse_json_line(line: &str) -> Result<FaultSpec, String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    from_record(rec)
}

/// Reads a fault list, skipping blank lines. Ids must be unique.
pub fn read_fault_list(reader: impl BufRead) -> Result<Vec<FaultSpec>, FaultListError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let spec = parse_json_line(&line).map_err(|reason| FaultListError::Format {
            line: i + 1,
            reason,
        })?;
        if !ids.insert(spec.id.clone()) {
            return Err(FaultListError::DuplicateId(spec.id));
        }
        out.push(spec);
    }
    Ok(out)
}

pub fn write_fault_list(mut writer: impl Write, faults: &[FaultSpec]) -> std::io::Result<()> {
    for f in faults {
        writeln!(writer, "{}", to_json_line(f))?;
    }
    writer.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn documented_line_shapes() {
        let reg = r#"{"id":"F000001","kind":"register","sm":0,"thread":5,"reg":3,"bit":12,"stuck_at":1}"#;
        let unit = r#"{"id":"F000002","kind":"unit","sm":0,"lane":"all","unit":"FP_CORE","bit":31,"mode":"flip"}"#;
        for line in [reg, unit] {
            assert_eq!(to_json_line(&parse_json_line(line).unwrap()), line);
        }
        let spec = parse_json_line(reg).unwrap();
        assert_eq!(
            spec.model,
            FaultModel::Register(RegisterFault {
                sm_id: 0,
                thread_id: 5,
                register: RegisterId::new(3).unwrap(),
                bit: 12,
                stuck_at: 1
            })
        );
    }

    #[test]
    fn bad_lines() {
        assert!(parse_json_line(r#"{"id":"x","kind":"unit","sm":0,"lane":"some","unit":"SFU","bit":1,"mode":"flip"}"#).is_err());
        assert!(parse_json_line(r#"{"id":"x","kind":"register","sm":0}"#).is_err());
        assert!(parse_json_line(r#"{"id":"x","kind":"unit","sm":0,"lane":3,"unit":"GPU","bit":1,"mode":"flip"}"#).is_err());
        let dup = "{\"id\":\"a\",\"kind\":\"transient\",\"sm\":0,\"thread\":1,\"occurrence\":0,\"model\":\"all_zero\"}\n";
        let text = format!("{dup}\n{dup}");
        assert!(matches!(
            read_fault_list(text.as_bytes()),
            Err(FaultListError::DuplicateId(_))
        ));
    }

    fn arb_model() -> impl Strategy<Value = FaultModel> {
        let reg = (0usize..4, 0usize..2048, 0u8..64, 0u8..32, 0u8..2).prop_map(
            |(sm, t, r, bit, s)| {
                FaultModel::Register(RegisterFault {
                    sm_id: sm,
                    thread_id: t,
                    register: RegisterId::new(r).unwrap(),
                    bit,
                    stuck_at: s,
                })
            },
        );
        let unit = (
            0usize..4,
            prop_oneof![Just(LaneScope::AllLanes), (0u8..32).prop_map(LaneScope::Lane)],
            prop_oneof![
                Just(UnitClass::IntCore),
                Just(UnitClass::FpCore),
                Just(UnitClass::Sfu)
            ],
            0u8..32,
            prop_oneof![Just(BitMode::Flip), Just(BitMode::StuckAt0), Just(BitMode::StuckAt1)],
        )
            .prop_map(|(sm, lanes, unit, bit, mode)| {
                FaultModel::Unit(UnitFault {
                    sm_id: sm,
                    lanes,
                    unit,
                    bit,
                    mode,
                })
            });
        let transient = (
            0usize..4,
            0usize..2048,
            any::<u64>(),
            prop_oneof![
                (0u8..32).prop_map(|bit| TransientModel::SingleBitFlip { bit }),
                (0u8..31).prop_map(|bit| TransientModel::TwoAdjacentBitFlip { bit }),
                any::<u32>().prop_map(|value| TransientModel::RandomValue { value }),
                Just(TransientModel::AllZero),
            ],
        )
            .prop_map(|(sm, t, occurrence, model)| {
                FaultModel::Transient(TransientFault {
                    sm_id: sm,
                    thread_id: t,
                    occurrence,
                    model,
                })
            });
        prop_oneof![reg, unit, transient]
    }

    proptest! {
        #[test]
        fn file_roundtrip(models in proptest::collection::vec(arb_model(), 1..20)) {
            let faults: Vec<FaultSpec> = models
                .into_iter()
                .enumerate()
                .map(|(i, model)| FaultSpec { id: format!("F{:06}", i + 1), model })
                .collect();
            let mut buf = Vec::new();
            write_fault_list(&mut buf, &faults).unwrap();
            prop_assert_eq!(read_fault_list(buf.as_slice()).unwrap(), faults);
        }
    }
}
