// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::accounting::{EnergyReport, Method};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub label: String,
    pub method: Method,
    pub joules: f64,
    /// Percent of the reference report's total.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub workflow_id: String,
    pub reference: String,
    pub rows: Vec<CoverageRow>,
}

impl CoverageTable {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let mut s = format!("workflow {}\n", self.workflow_id);
        s.push_str(&format!(
            "{:<width$}  {:<16} {:>16} {:>8}\n",
            "label", "method", "joules", "percent"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<width$}  {:<16} {:>16.2} {:>8.2}\n",
                r.label,
                r.method.as_str(),
                r.joules,
                r.percent
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }
}

/// Totals of every report relative to the first one.
pub fn compare_reports(reports: &[(String, EnergyReport)]) -> Result<CoverageTable, OrchestratorError> {
    let Some((ref_label, reference)) = reports.first() else {
        return Err(OrchestratorError::Config("nothing to compare".into()));
    };
    if !(reference.total_joules > 0.0) {
        return Err(crate::accounting::AccountingError::DivisionByZeroEnergy.into());
    }
    let mut rows = Vec::new();
    for (label, r) in reports {
        if r.workflow_id != reference.workflow_id {
            return Err(OrchestratorError::WorkflowMismatch {
                expected: reference.workflow_id.clone(),
                found: r.workflow_id.clone(),
            });
        }
        rows.push(CoverageRow {
            label: label.clone(),
            method: r.method,
            joules: r.total_joules,
            percent: 100.0 * r.total_joules / reference.total_joules,
        });
    }
    Ok(CoverageTable {
        workflow_id: reference.workflow_id.clone(),
        reference: ref_label.clone(),
        rows,
    })
}
