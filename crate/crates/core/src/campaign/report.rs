//! Aggregation into Table I/II-shaped reports and their renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{CampaignError, FaultResult, Outcome, RunOutcome};
use crate::simt::{DeviceConfig, TrapKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CategoryStat {
    pub count: u64,
    pub percent: f64,
}

/// Category counts at one granularity. Percentages are over classified
/// runs; tool errors are counted separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTable {
    pub total: u64,
    #[serde(rename = "DUE")]
    pub due: CategoryStat,
    #[serde(rename = "SDC_SAFE")]
    pub sdc_safe: CategoryStat,
    #[serde(rename = "SDC_CRITICAL")]
    pub sdc_critical: CategoryStat,
    #[serde(rename = "MASKED")]
    pub masked: CategoryStat,
    /// DUE split by trap kind; percentages relative to `total`.
    pub due_by_trap: BTreeMap<String, CategoryStat>,
    pub tool_errors: u64,
}

impl OutcomeTable {
    fn from_outcomes(outcomes: impl IntoIterator<Item = RunOutcome>) -> OutcomeTable {
        let mut counts: BTreeMap<Outcome, u64> = BTreeMap::new();
        let mut tool_errors = 0;
        for o in outcomes {
            match o {
                RunOutcome::Classified(o) => *counts.entry(o).or_default() += 1,
                RunOutcome::ToolError => tool_errors += 1,
            }
        }
        let total: u64 = counts.values().sum();
        let stat = |count: u64| CategoryStat {
            count,
            percent: if total == 0 {
                0.0
            } else {
                100.0 * count as f64 / total as f64
            },
        };
        let get = |o: Outcome| counts.get(&o).copied().unwrap_or(0);
        let due_by_trap: BTreeMap<String, CategoryStat> = TrapKind::ALL
            .iter()
            .map(|k| (k.name().to_string(), stat(get(Outcome::Due(*k)))))
            .collect();
        OutcomeTable {
            total,
            due: stat(due_by_trap.values().map(|s| s.count).sum()),
            sdc_safe: stat(get(Outcome::SdcSafe)),
            sdc_critical: stat(get(Outcome::SdcCritical)),
            masked: stat(get(Outcome::Masked)),
            due_by_trap,
            tool_errors,
        }
    }

    /// `(name, stat)` in the paper's column order.
    pub fn categories(&self) -> [(&'static str, CategoryStat); 4] {
        [
            ("DUE", self.due),
            ("SDC_SAFE", self.sdc_safe),
            ("SDC_CRITICAL", self.sdc_critical),
            ("MASKED", self.masked),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub model: String,
    pub device: DeviceConfig,
    pub image_count: usize,
    pub fault_count: usize,
    /// SHA-256 of the fault-list file, hex encoded.
    pub fault_list_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    /// One entry per (fault, image) run.
    pub per_run: OutcomeTable,
    /// One entry per fault, severity-collapsed over its images.
    pub per_fault: OutcomeTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<Metadata>,
}

pub fn aggregate(results: &[FaultResult]) -> Result<CampaignReport, CampaignError> {
    if results.is_empty() {
        return Err(CampaignError::EmptyResults);
    }
    Ok(CampaignReport {
        per_run: OutcomeTable::from_outcomes(
            results.iter().flat_map(|r| r.outcomes.iter().copied()),
        ),
        per_fault: OutcomeTable::from_outcomes(results.iter().map(FaultResult::collapsed)),
        metadata: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
    Csv,
}

impl CampaignReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Table => self.to_table(),
        }
    }

    fn tables(&self) -> [(&'static str, &OutcomeTable); 2] {
        [("per_run", &self.per_run), ("per_fault", &self.per_fault)]
    }

    /// `granularity,category,count,percent`, DUE sub-kinds as `DUE:<kind>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("granularity,category,count,percent\n");
        for (g, t) in self.tables() {
            for (name, c) in t.categories() {
                let _ = writeln!(s, "{g},{name},{},{}", c.count, c.percent);
            }
            for (kind, c) in &t.due_by_trap {
                let _ = writeln!(s, "{g},DUE:{kind},{},{}", c.count, c.percent);
            }
            let _ = writeln!(s, "{g},TOOL_ERROR,{},", t.tool_errors);
        }
        s
    }

    /// Human-readable table in the paper's column layout.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>8} {:>12} {:>16} {:>10} {:>11}",
            "", "runs", "DUE (%)", "SDC safe (%)", "SDC critical (%)", "Masked (%)", "tool errors"
        );
        for (g, t) in self.tables() {
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>8.2} {:>12.2} {:>16.2} {:>10.2} {:>11}",
                g,
                t.total,
                t.due.percent,
                t.sdc_safe.percent,
                t.sdc_critical.percent,
                t.masked.percent,
                t.tool_errors
            );
        }
        for (g, t) in self.tables() {
            let kinds: Vec<String> = t
                .due_by_trap
                .iter()
                .filter(|(_, c)| c.count > 0)
                .map(|(k, c)| format!("{k} {} ({:.2}%)", c.count, c.percent))
                .collect();
            if !kinds.is_empty() {
                let _ = writeln!(s, "DUE by trap ({g}): {}", kinds.join(", "));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn result(id: &str, outcomes: Vec<RunOutcome>) -> FaultResult {
        FaultResult {
            fault_id: id.into(),
            outcomes,
            corrupted_writes: 0,
            vectors: vec![],
        }
    }

    fn c(o: Outcome) -> RunOutcome {
        RunOutcome::Classified(o)
    }

    #[test]
    fn one_of_each_is_a_quarter() {
        let rs = vec![
            result("a", vec![c(Outcome::Masked)]),
            result("b", vec![c(Outcome::SdcSafe)]),
            result("c", vec![c(Outcome::SdcCritical)]),
            result("d", vec![c(Outcome::Due(TrapKind::Timeout))]),
        ];
        let r = aggregate(&rs).unwrap();
        for t in [&r.per_run, &r.per_fault] {
            for (_, s) in t.categories() {
                assert_eq!(s.percent, 25.0);
            }
            assert_eq!(t.due_by_trap["Timeout"].count, 1);
        }
    }

    #[test]
    fn all_masked_and_empty() {
        let r = aggregate(&[result("a", vec![c(Outcome::Masked); 3])]).unwrap();
        assert_eq!(r.per_run.masked.percent, 100.0);
        assert_eq!(r.per_run.total, 3);
        assert_eq!(r.per_fault.total, 1);
        assert!(r.to_table().contains("100.00"));
        assert!(matches!(aggregate(&[]), Err(CampaignError::EmptyResults)));
    }

    #[test]
    fn tool_errors_are_excluded() {
        let r = aggregate(&[
            result("a", vec![c(Outcome::Masked), RunOutcome::ToolError]),
            result("b", vec![c(Outcome::SdcSafe), c(Outcome::Masked)]),
        ])
        .unwrap();
        assert_eq!(r.per_run.total, 3);
        assert_eq!(r.per_run.tool_errors, 1);
        assert_eq!(r.per_fault.total, 1);
        assert_eq!(r.per_fault.tool_errors, 1);
        assert_eq!(r.per_fault.sdc_safe.percent, 100.0);
    }

    #[test]
    fn json_and_csv_agree() {
        let r = aggregate(&[
            result("a", vec![c(Outcome::Masked), c(Outcome::SdcSafe)]),
            result("b", vec![c(Outcome::Due(TrapKind::MisalignedAccess))]),
            result("c", vec![c(Outcome::Masked)]),
        ])
        .unwrap();
        let json: CampaignReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json, r);
        for line in r.to_csv().lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let t = if f[0] == "per_run" { &json.per_run } else { &json.per_fault };
            let stat = match f[1] {
                "TOOL_ERROR" => {
                    assert_eq!(f[2].parse::<u64>().unwrap(), t.tool_errors);
                    continue;
                }
                k if k.starts_with("DUE:") => t.due_by_trap[&k[4..]],
                k => t.categories().iter().find(|(n, _)| *n == k).unwrap().1,
            };
            assert_eq!(f[2].parse::<u64>().unwrap(), stat.count);
            assert_eq!(f[3].parse::<f64>().unwrap(), stat.percent);
        }
    }

    fn outcome_strategy() -> impl Strategy<Value = RunOutcome> {
        prop_oneof![
            Just(c(Outcome::Masked)),
            Just(c(Outcome::SdcSafe)),
            Just(c(Outcome::SdcCritical)),
            Just(c(Outcome::Due(TrapKind::OutOfBoundsAccess))),
            Just(c(Outcome::Due(TrapKind::MisalignedAccess))),
            Just(c(Outcome::Due(TrapKind::Timeout))),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn percentages_sum_to_100(
            faults in prop::collection::vec(prop::collection::vec(outcome_strategy(), 1..6), 1..60)
        ) {
            let rs: Vec<FaultResult> = faults
                .into_iter()
                .enumerate()
                .map(|(i, o)| result(&i.to_string(), o))
                .collect();
            let r = aggregate(&rs).unwrap();
            for t in [&r.per_run, &r.per_fault] {
                let sum: f64 = t.categories().iter().map(|(_, s)| s.percent).sum();
                prop_assert!((sum - 100.0).abs() <= 0.01, "sum = {}", sum);
                let due: u64 = t.due_by_trap.values().map(|s| s.count).sum();
                prop_assert_eq!(due, t.due.count);
            }
            prop_assert_eq!(r.per_fault.total as usize, rs.len());
        }

        #[test]
        fn adding_an_image_never_lowers_severity(
            runs in prop::collection::vec(outcome_strategy(), 1..6),
            extra in outcome_strategy()
        ) {
            let before = result("f", runs.clone()).collapsed();
            let mut more = runs;
            more.push(extra);
            prop_assert!(result("f", more).collapsed() >= before);
        }
    }
}
