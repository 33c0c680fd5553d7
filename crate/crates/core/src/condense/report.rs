use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_match: f64,
    pub l_bip: f64,
    pub l_cond: f64,
    /// Total soft weight on user-user and item-item pairs.
    pub intra_mass: f64,
}

/// Loss trajectories of one condensation run, one record per outer epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    records: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub epochs: usize,
    pub first_match: f64,
    pub final_match: f64,
    pub match_reduction: f64,
    pub final_bip: f64,
    pub final_cond: f64,
    pub final_intra_mass: f64,
}

impl MatchReport {
    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Relative drop of the matching loss from the first to the last epoch.
    pub fn match_reduction(&self) -> Option<f64> {
        let first = self.records.first()?.l_match;
        let last = self.records.last()?.l_match;
        (first > 0.0).then(|| (first - last) / first)
    }

    pub fn summary(&self) -> Option<ReportSummary> {
        let first = self.records.first()?;
        let last = self.records.last()?;
        Some(ReportSummary {
            epochs: self.records.len(),
            first_match: first.l_match,
            final_match: last.l_match,
            match_reduction: self.match_reduction().unwrap_or(0.0),
            final_bip: last.l_bip,
            final_cond: last.l_cond,
            final_intra_mass: last.intra_mass,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,L_match,L_bip,L_cond,intra_mass\n");
        for r in &self.records {
            writeln!(out, "{},{:e},{:e},{:e},{:e}", r.epoch, r.l_match, r.l_bip, r.l_cond, r.intra_mass).expect("string write");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "summary": self.summary(),
            "records": self.records,
        })
        .to_string()
    }
}
