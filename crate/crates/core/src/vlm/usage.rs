//! Token, latency and cost accounting per pipeline phase.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    RegionDetection,
    RoiSelection,
    StateComparison,
    ActionInference,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::RegionDetection,
        Phase::RoiSelection,
        Phase::StateComparison,
        Phase::ActionInference,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::RegionDetection => "region_detection",
            Phase::RoiSelection => "roi_selection",
            Phase::StateComparison => "state_comparison",
            Phase::ActionInference => "action_inference",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Prices per million tokens; `decimals` is the currency precision costs are
/// rounded to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceTable {
    pub input_per_million: f64,
    pub output_per_million: f64,
    pub decimals: u32,
}

impl Default for PriceTable {
    fn default() -> Self {
        PriceTable {
            input_per_million: 2.5,
            output_per_million: 10.0,
            decimals: 6,
        }
    }
}

impl PriceTable {
    pub fn cost(&self, input_tokens: u64, output_tokens: u64) -> f64 {
        let raw = input_tokens as f64 * self.input_per_million / 1e6
            + output_tokens as f64 * self.output_per_million / 1e6;
        round_to(raw, self.decimals)
    }
}

pub fn round_to(value: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (value * scale).round() / scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub phase: Phase,
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Seconds.
    pub latency: f64,
    pub cost: f64,
}

impl UsageRecord {
    pub fn new(phase: Phase, input_tokens: u64, output_tokens: u64, latency: f64, prices: &PriceTable) -> Self {
        UsageRecord {
            phase,
            input_tokens,
            output_tokens,
            latency,
            cost: prices.cost(input_tokens, output_tokens),
        }
    }

    pub fn zero(phase: Phase) -> Self {
        UsageRecord {
            phase,
            input_tokens: 0,
            output_tokens: 0,
            latency: 0.0,
            cost: 0.0,
        }
    }
}

/// Exact sums for one phase. Latency is kept in microseconds and cost in
/// billionths of a currency unit so that merging reports is associative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseTotals {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency_us: u64,
    pub cost_nano: u64,
}

impl PhaseTotals {
    fn add_record(&mut self, r: &UsageRecord) {
        self.calls += 1;
        self.input_tokens += r.input_tokens;
        self.output_tokens += r.output_tokens;
        self.latency_us += (r.latency.max(0.0) * 1e6).round() as u64;
        self.cost_nano += (r.cost.max(0.0) * 1e9).round() as u64;
    }

    fn merge(&self, other: &PhaseTotals) -> PhaseTotals {
        PhaseTotals {
            calls: self.calls + other.calls,
            input_tokens: self.input_tokens + other.input_tokens,
            output_tokens: self.output_tokens + other.output_tokens,
            latency_us: self.latency_us + other.latency_us,
            cost_nano: self.cost_nano + other.cost_nano,
        }
    }

    pub fn total_latency(&self) -> f64 {
        self.latency_us as f64 / 1e6
    }

    pub fn total_cost(&self) -> f64 {
        self.cost_nano as f64 / 1e9
    }

    fn mean(&self, total: f64) -> f64 {
        if self.calls == 0 {
            0.0
        } else {
            total / self.calls as f64
        }
    }

    pub fn mean_latency(&self) -> f64 {
        self.mean(self.total_latency())
    }

    pub fn mean_input_tokens(&self) -> f64 {
        self.mean(self.input_tokens as f64)
    }

    pub fn mean_output_tokens(&self) -> f64 {
        self.mean(self.output_tokens as f64)
    }

    pub fn mean_cost(&self) -> f64 {
        self.mean(self.total_cost())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UsageReport {
    pub phases: BTreeMap<Phase, PhaseTotals>,
}

/// Aggregates a usage stream by phase.
pub fn account<'a>(records: impl IntoIterator<Item = &'a UsageRecord>) -> UsageReport {
    let mut report = UsageReport::default();
    for r in records {
        report.phases.entry(r.phase).or_default().add_record(r);
    }
    report
}

impl UsageReport {
    pub fn merge(&self, other: &UsageReport) -> UsageReport {
        let mut phases = self.phases.clone();
        for (phase, totals) in &other.phases {
            let entry = phases.entry(*phase).or_default();
            *entry = entry.merge(totals);
        }
        UsageReport { phases }
    }

    pub fn phase(&self, phase: Phase) -> PhaseTotals {
        self.phases.get(&phase).copied().unwrap_or_default()
    }

    pub fn total(&self) -> PhaseTotals {
        self.phases
            .values()
            .fold(PhaseTotals::default(), |acc, t| acc.merge(t))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let phase_json = |t: &PhaseTotals| {
            serde_json::json!({
                "calls": t.calls,
                "input_tokens": t.input_tokens,
                "output_tokens": t.output_tokens,
                "total_latency": t.total_latency(),
                "total_cost": t.total_cost(),
                "mean_latency": t.mean_latency(),
                "mean_input_tokens": t.mean_input_tokens(),
                "mean_output_tokens": t.mean_output_tokens(),
                "mean_cost": t.mean_cost(),
            })
        };
        let mut phases = serde_json::Map::new();
        for (p, t) in &self.phases {
            phases.insert(p.as_str().to_string(), phase_json(t));
        }
        serde_json::json!({ "phases": phases, "total": phase_json(&self.total()) })
    }

    /// Plain-text table with one row per phase: mean time, mean tokens and mean cost.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<18} {:>6} {:>10} {:>24} {:>10}\n",
            "Phase", "Calls", "Time (s)", "Tokens (Input / Output)", "Cost"
        );
        for p in Phase::ALL {
            let Some(t) = self.phases.get(&p) else { continue };
            let tokens = if t.input_tokens + t.output_tokens == 0 {
                "-".to_string()
            } else {
                format!(
                    "{:.0} ({:.0} / {:.0})",
                    t.mean_input_tokens() + t.mean_output_tokens(),
                    t.mean_input_tokens(),
                    t.mean_output_tokens()
                )
            };
            out.push_str(&format!(
                "{:<18} {:>6} {:>10.2} {:>24} {:>10.6}\n",
                p.as_str(),
                t.calls,
                t.mean_latency(),
                tokens,
                t.mean_cost()
            ));
        }
        out
    }
}
