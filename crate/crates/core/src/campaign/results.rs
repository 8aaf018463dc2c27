//! Per-run results CSV.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{CampaignError, FaultResult, Outcome, RunOutcome};
use crate::simt::TrapKind;

/// One (fault, image) row:
/// `fault_id,image_index,outcome,trap_kind,corrupted_writes,golden_top1,faulty_top1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultRow {
    pub fault_id: String,
    pub image_index: usize,
    pub outcome: String,
    pub trap_kind: Option<String>,
    pub corrupted_writes: u64,
    pub golden_top1: usize,
    pub faulty_top1: Option<usize>,
}

impl ResultRow {
    pub fn run_outcome(&self) -> Result<RunOutcome, CampaignError> {
        let bad = || {
            CampaignError::Results(format!(
                "fault {} image {}: bad outcome `{}` / trap kind `{}`",
                self.fault_id,
                self.image_index,
                self.outcome,
                self.trap_kind.as_deref().unwrap_or("")
            ))
        };
        let o = match self.outcome.as_str() {
            "MASKED" => Outcome::Masked,
            "SDC_SAFE" => Outcome::SdcSafe,
            "SDC_CRITICAL" => Outcome::SdcCritical,
            "DUE" => Outcome::Due(
                self.trap_kind
                    .as_deref()
                    .and_then(TrapKind::from_name)
                    .ok_or_else(bad)?,
            ),
            "TOOL_ERROR" => return Ok(RunOutcome::ToolError),
            _ => return Err(bad()),
        };
        Ok(RunOutcome::Classified(o))
    }
}

pub fn write_results(writer: impl Write, rows: &[ResultRow]) -> Result<(), CampaignError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)
            .map_err(|e| CampaignError::Results(e.to_string()))?;
    }
    w.flush()
        .map_err(|e| CampaignError::Results(e.to_string()))
}

pub fn read_results(reader: impl Read) -> Result<Vec<ResultRow>, CampaignError> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(|e: csv::Error| CampaignError::Results(e.to_string())))
        .collect()
}

/// Groups rows into per-fault results, in order of first appearance, with
/// images sorted by index.
pub fn group_rows(rows: &[ResultRow]) -> Result<Vec<FaultResult>, CampaignError> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_fault: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let entry = by_fault.entry(&r.fault_id).or_default();
        if entry.is_empty() {
            order.push(&r.fault_id);
        }
        entry.push(r);
    }
    order
        .into_iter()
        .map(|id| {
            let mut runs = by_fault.remove(id).unwrap_or_default();
            runs.sort_by_key(|r| r.image_index);
            Ok(FaultResult {
                fault_id: id.to_string(),
                outcomes: runs
                    .iter()
                    .map(|r| r.run_outcome())
                    .collect::<Result<_, _>>()?,
                corrupted_writes: runs.iter().map(|r| r.corrupted_writes).sum(),
                vectors: Vec::new(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_with_empty_cells() {
        let rows = vec![
            ResultRow {
                fault_id: "F000001".into(),
                image_index: 0,
                outcome: "DUE".into(),
                trap_kind: Some("OutOfBoundsAccess".into()),
                corrupted_writes: 3,
                golden_top1: 4,
                faulty_top1: None,
            },
            ResultRow {
                fault_id: "F000001".into(),
                image_index: 1,
                outcome: "MASKED".into(),
                trap_kind: None,
                corrupted_writes: 0,
                golden_top1: 2,
                faulty_top1: Some(2),
            },
        ];
        let mut buf = Vec::new();
        write_results(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "fault_id,image_index,outcome,trap_kind,corrupted_writes,golden_top1,faulty_top1\n"
        ));
        assert!(text.contains("F000001,1,MASKED,,0,2,2\n"));
        assert_eq!(read_results(&buf[..]).unwrap(), rows);
        let grouped = group_rows(&rows).unwrap();
        assert_eq!(grouped.len(), 1);
        assert_eq!(
            grouped[0].collapsed(),
            RunOutcome::Classified(Outcome::Due(TrapKind::OutOfBoundsAccess))
        );
        assert_eq!(grouped[0].corrupted_writes, 3);
    }

    #[test]
    fn bad_outcome_is_rejected() {
        let mut r = ResultRow {
            fault_id: "F".into(),
            image_index: 0,
            outcome: "DUE".into(),
            trap_kind: None,
            corrupted_writes: 0,
            golden_top1: 0,
            faulty_top1: None,
        };
        assert!(r.run_outcome().is_err());
        r.outcome = "WHATEVER".into();
        assert!(r.run_outcome().is_err());
    }
}
