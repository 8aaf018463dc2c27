//! Fault-injection campaigns: golden runs, one faulty inference per
//! (fault, image), outcome classification and aggregate reports.

mod config;
mod report;
mod results;
mod run;

use std::fmt;
use std::path::PathBuf;

use crate::cnn::{argmax, CnnError};
use crate::faults::FaultListError;
use crate::simt::{Trap, TrapKind};

pub use config::{CampaignConfig, DeviceSettings};
pub use report::{aggregate, CampaignReport, CategoryStat, Metadata, OutcomeTable, ReportFormat};
pub use results::{group_rows, read_results, write_results, ResultRow};
pub use run::{
    profile_registers, run_campaign, run_fault, run_golden, Golden, ProfileRow, RunOptions,
};

/// The four outcome categories, ordered by severity (`Masked` least).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Outcome {
    Masked,
    SdcSafe,
    SdcCritical,
    Due(TrapKind),
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Masked => "MASKED",
            Outcome::SdcSafe => "SDC_SAFE",
            Outcome::SdcCritical => "SDC_CRITICAL",
            Outcome::Due(_) => "DUE",
        }
    }

    pub fn trap_kind(self) -> Option<TrapKind> {
        match self {
            Outcome::Due(k) => Some(k),
            _ => None,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Due(k) => write!(f, "DUE({k})"),
            o => f.write_str(o.name()),
        }
    }
}

/// Result of one (fault, image) run: a classified outcome, or a simulator
/// limitation that keeps the run out of the four categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RunOutcome {
    Classified(Outcome),
    ToolError,
}

impl RunOutcome {
    pub fn name(self) -> &'static str {
        match self {
            RunOutcome::Classified(o) => o.name(),
            RunOutcome::ToolError => "TOOL_ERROR",
        }
    }
}

/// Per-fault view: the outcome on each selected image and the
/// severity-collapsed outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultResult {
    pub fault_id: String,
    pub outcomes: Vec<RunOutcome>,
    pub corrupted_writes: u64,
    /// Faulty output vectors, when the run kept them (`None` for trapped runs).
    pub vectors: Vec<Option<Vec<f32>>>,
}

impl FaultResult {
    /// Most severe outcome across images; `ToolError` if any run hit one.
    pub fn collapsed(&self) -> RunOutcome {
        if self.outcomes.contains(&RunOutcome::ToolError) {
            return RunOutcome::ToolError;
        }
        self.outcomes
            .iter()
            .copied()
            .max()
            .unwrap_or(RunOutcome::ToolError)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error("fault list: {0}")]
    FaultList(#[from] FaultListError),
    #[error("invalid fault: {0}")]
    InvalidFault(String),
    #[error("golden run trapped on image {image}: {trap}")]
    GoldenTrap { image: usize, trap: Trap },
    #[error("golden run on image {image} differs from the reference implementation")]
    GoldenMismatch { image: usize },
    #[error("vector length mismatch: golden {golden}, faulty {faulty}")]
    LengthMismatch { golden: usize, faulty: usize },
    #[error("no results to aggregate")]
    EmptyResults,
    #[error("results file: {0}")]
    Results(String),
}

impl CampaignError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> CampaignError {
        CampaignError::Io {
            path: path.into(),
            source,
        }
    }

    /// Failures of the campaign itself rather than of its inputs.
    pub fn is_campaign_failure(&self) -> bool {
        matches!(
            self,
            CampaignError::GoldenTrap { .. } | CampaignError::GoldenMismatch { .. }
        )
    }
}

/// Classifies a faulty run against the golden vector.
///
/// A trap is a DUE; a bit-identical vector is MASKED; otherwise the run is
/// an SDC, critical when the top-1 class moved (ties go to the lowest index).
pub fn classify(golden: &[f32], faulty: Result<&[f32], TrapKind>) -> Result<Outcome, CampaignError> {
    let faulty = match faulty {
        Err(kind) => return Ok(Outcome::Due(kind)),
        Ok(v) => v,
    };
    if golden.len() != faulty.len() {
        return Err(CampaignError::LengthMismatch {
            golden: golden.len(),
            faulty: faulty.len(),
        });
    }
    if golden
        .iter()
        .zip(faulty)
        .all(|(g, f)| g.to_bits() == f.to_bits())
    {
        Ok(Outcome::Masked)
    } else if argmax(golden) == argmax(faulty) {
        Ok(Outcome::SdcSafe)
    } else {
        Ok(Outcome::SdcCritical)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_table() {
        let g = [0.1f32, 0.7, 0.2];
        assert_eq!(classify(&g, Ok(&g)).unwrap(), Outcome::Masked);
        assert_eq!(
            classify(&g, Ok(&[0.2, 0.6, 0.2])).unwrap(),
            Outcome::SdcSafe
        );
        assert_eq!(
            classify(&g, Ok(&[0.7, 0.1, 0.2])).unwrap(),
            Outcome::SdcCritical
        );
        for k in TrapKind::ALL {
            assert_eq!(classify(&g, Err(k)).unwrap(), Outcome::Due(k));
        }
        assert!(matches!(
            classify(&g, Ok(&[0.1, 0.9])),
            Err(CampaignError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn masked_means_bit_identical() {
        // -0.0 == 0.0 numerically but not bitwise
        let g = [0.0f32, 1.0];
        assert_eq!(
            classify(&g, Ok(&[-0.0, 1.0])).unwrap(),
            Outcome::SdcSafe
        );
        let nan = [f32::NAN, 1.0];
        assert_eq!(classify(&nan, Ok(&nan)).unwrap(), Outcome::Masked);
    }

    #[test]
    fn argmax_ties_resolve_low() {
        let g = [0.5f32, 0.5];
        assert_eq!(classify(&g, Ok(&[0.4, 0.4])).unwrap(), Outcome::SdcSafe);
        assert_eq!(
            classify(&g, Ok(&[0.4, 0.6])).unwrap(),
            Outcome::SdcCritical
        );
    }

    #[test]
    fn severity_order_and_collapse() {
        assert!(Outcome::Due(TrapKind::Timeout) > Outcome::SdcCritical);
        assert!(Outcome::SdcCritical > Outcome::SdcSafe);
        assert!(Outcome::SdcSafe > Outcome::Masked);
        let r = FaultResult {
            fault_id: "F1".into(),
            outcomes: vec![
                RunOutcome::Classified(Outcome::Masked),
                RunOutcome::Classified(Outcome::SdcCritical),
                RunOutcome::Classified(Outcome::SdcSafe),
            ],
            corrupted_writes: 0,
            vectors: vec![],
        };
        assert_eq!(r.collapsed(), RunOutcome::Classified(Outcome::SdcCritical));
        let mut t = r.clone();
        t.outcomes.push(RunOutcome::ToolError);
        assert_eq!(t.collapsed(), RunOutcome::ToolError);
    }
}
