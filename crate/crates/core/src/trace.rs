//! Per-step trace reports as aligned text or JSON lines.

use std::fmt::Write;

use serde::Serialize;

use crate::backend::{BackendKind, OpCounters};
use crate::network::{CostReport, InferencePlan};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub layer: String,
    pub input: String,
    pub representation: String,
    pub operation: String,
    pub output: String,
    pub counters: OpCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceReport {
    pub plan: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendKind>,
    pub n: usize,
    pub primes: Vec<u64>,
    pub rows: Vec<TraceRow>,
    pub totals: OpCounters,
    pub depth: u32,
    pub peak_messages: u64,
}

fn total(rows: &[TraceRow]) -> OpCounters {
    rows.iter().fold(OpCounters::default(), |acc, r| acc.merged(&r.counters))
}

impl TraceReport {
    /// Predicted counters for every step of `plan`.
    pub fn from_plan(plan: &InferencePlan) -> Self {
        let rows: Vec<TraceRow> = plan
            .steps
            .iter()
            .enumerate()
            .map(|(step, s)| TraceRow {
                step,
                layer: s.layer.clone(),
                input: s.size_label(),
                representation: s.input.rep_label().to_string(),
                operation: s.description.clone(),
                output: s.output.to_string(),
                counters: s.predicted.without_peak(),
            })
            .collect();
        let mut totals = total(&rows);
        totals.live_messages_peak = plan.peak_messages() as u64;
        Self {
            plan: plan.name.clone(),
            backend: None,
            n: plan.n,
            primes: plan.primes.clone(),
            rows,
            totals,
            depth: plan.depth(),
            peak_messages: plan.peak_messages() as u64,
        }
    }

    /// Measured counters of an execution.
    pub fn from_cost(report: &CostReport) -> Self {
        let rows: Vec<TraceRow> = report
            .steps
            .iter()
            .map(|s| TraceRow {
                step: s.index,
                layer: s.layer.clone(),
                input: s.input.clone(),
                representation: s.representation.clone(),
                operation: s.operation.clone(),
                output: s.output.clone(),
                counters: s.measured.without_peak(),
            })
            .collect();
        let mut totals = total(&rows);
        totals.live_messages_peak = report.peak_messages;
        Self {
            plan: report.plan.clone(),
            backend: Some(report.backend),
            n: report.n,
            primes: report.primes.clone(),
            rows,
            totals,
            depth: report.depth,
            peak_messages: report.peak_messages,
        }
    }

    pub fn to_text(&self) -> String {
        const HEAD: [&str; 13] = [
            "step", "layer", "input", "representation", "operation", "ct*ct", "ct*pt", "scalar", "add", "pt+",
            "rot", "prim", "mask",
        ];
        let counts = |c: &OpCounters| {
            [
                c.ct_ct_mul,
                c.ct_plain_mul,
                c.scalar_mul,
                c.add,
                c.plain_add,
                c.rot_calls,
                c.rotations(),
                c.mask_mul,
            ]
            .map(|v| v.to_string())
        };
        let mut table: Vec<Vec<String>> = vec![HEAD.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            let mut line = vec![
                r.step.to_string(),
                r.layer.clone(),
                r.input.clone(),
                r.representation.clone(),
                r.operation.clone(),
            ];
            line.extend(counts(&r.counters));
            table.push(line);
        }
        let mut foot = vec![String::new(), "total".into(), String::new(), String::new(), String::new()];
        foot.extend(counts(&self.totals));
        table.push(foot);

        let mut widths = vec![0; HEAD.len()];
        for line in &table {
            for (w, cell) in widths.iter_mut().zip(line) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let backend = self.backend.map(|b| format!("  backend={b}")).unwrap_or_default();
        writeln!(out, "plan {}  n={}  primes={:?}{backend}", self.plan, self.n, self.primes).unwrap();
        for line in &table {
            let mut row = String::new();
            for (k, (cell, &w)) in line.iter().zip(&widths).enumerate() {
                let pad = w - cell.chars().count();
                // text columns align left, numbers right
                if (1..5).contains(&k) {
                    row.push_str(cell);
                    row.push_str(&" ".repeat(pad));
                } else {
                    row.push_str(&" ".repeat(pad));
                    row.push_str(cell);
                }
                row.push_str("  ");
            }
            out.push_str(row.trim_end());
            out.push('\n');
        }
        writeln!(out, "depth {}  peak messages {}", self.depth, self.peak_messages).unwrap();
        out
    }

    /// One JSON object per step, then a summary object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let mut v = serde_json::to_value(r).expect("plain data");
            v["record"] = "step".into();
            v["plan"] = self.plan.clone().into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let summary = serde_json::json!({
            "record": "summary",
            "plan": self.plan,
            "backend": self.backend,
            "n": self.n,
            "primes": self.primes,
            "totals": self.totals,
            "depth": self.depth,
            "peak_messages": self.peak_messages,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}
