//! Hand-computed metric cases from `fixtures/metric_cases.json`.

use serde_json::Value;

use scenereplay::eval::{action_accuracy, comparison_eval, match_boundaries, reproducibility};
use scenereplay::replay::{ReplayTrace, TraceStatus, UsageTotals};
use scenereplay::segmentation::{ActionType, SceneRecord};

pub const EPS: f64 = 1e-9;

pub fn cases() -> Value {
    serde_json::from_str(include_str!("../fixtures/metric_cases.json")).expect("metric cases parse")
}

fn list<'a>(v: &'a Value, key: &str) -> &'a Vec<Value> {
    v[key].as_array().unwrap_or_else(|| panic!("{key} is not a list"))
}

fn indices(v: &Value) -> Vec<usize> {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).collect()
}

fn bools(v: &Value) -> Vec<bool> {
    v.as_array().unwrap().iter().map(|x| x.as_bool().unwrap()).collect()
}

fn close(name: &str, what: &str, got: f64, want: &Value) -> Result<(), String> {
    let want = want.as_f64().ok_or_else(|| format!("{name}: {what} missing"))?;
    if (got - want).abs() <= EPS {
        Ok(())
    } else {
        Err(format!("{name}: {what} = {got}, expected {want}"))
    }
}

fn action_type(s: &str) -> ActionType {
    ActionType::ALL
        .into_iter()
        .find(|t| t.as_str() == s)
        .unwrap_or_else(|| panic!("unknown action type {s}"))
}

fn scenes(v: &Value) -> Vec<SceneRecord> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|s| SceneRecord {
            start: s[0].as_u64().unwrap() as usize,
            end: s[1].as_u64().unwrap() as usize,
            action_type: action_type(s[2].as_str().unwrap()),
            keyboard_frames: Vec::new(),
        })
        .collect()
}

/// Number of cases checked, or the first mismatch.
pub fn check_match_boundaries() -> Result<usize, String> {
    let all = cases();
    let cases = list(&all, "match_boundaries");
    for c in cases {
        let name = c["name"].as_str().unwrap();
        let e = match_boundaries(&indices(&c["predicted"]), &indices(&c["truth"]), c["tolerance"].as_u64().unwrap() as usize);
        if e.matches.len() as u64 != c["matches"].as_u64().unwrap() {
            return Err(format!("{name}: {} matches, expected {}", e.matches.len(), c["matches"]));
        }
        close(name, "precision", e.precision, &c["precision"])?;
        close(name, "recall", e.recall, &c["recall"])?;
        close(name, "f1", e.f1, &c["f1"])?;
    }
    Ok(cases.len())
}

pub fn check_action_accuracy() -> Result<usize, String> {
    let all = cases();
    let cases = list(&all, "action_accuracy");
    for c in cases {
        let name = c["name"].as_str().unwrap();
        let acc = action_accuracy(&scenes(&c["predicted"]), &scenes(&c["truth"]), c["tolerance"].as_u64().unwrap() as usize);
        let expected = c["expected"].as_object().unwrap();
        for t in ActionType::ALL {
            match (acc.get(t), expected.get(t.as_str())) {
                (Some(got), Some(want)) => close(name, t.as_str(), got, want)?,
                (None, None) => {}
                (got, want) => return Err(format!("{name}: {} accuracy {got:?}, expected {want:?}", t.as_str())),
            }
        }
    }
    Ok(cases.len())
}

pub fn check_comparison_eval() -> Result<usize, String> {
    let all = cases();
    let cases = list(&all, "comparison_eval");
    for c in cases {
        let name = c["name"].as_str().unwrap();
        let result = comparison_eval(&bools(&c["predictions"]), &bools(&c["truth"]), c["positive"].as_bool().unwrap());
        if c["error"].as_bool() == Some(true) {
            if result.is_ok() {
                return Err(format!("{name}: expected an error"));
            }
            continue;
        }
        let e = result.map_err(|e| format!("{name}: {e}"))?;
        close(name, "precision", e.precision, &c["precision"])?;
        close(name, "recall", e.recall, &c["recall"])?;
        close(name, "f1", e.f1, &c["f1"])?;
    }
    Ok(cases.len())
}

pub fn trace(status: TraceStatus, wall_time: f64) -> ReplayTrace {
    ReplayTrace {
        status,
        scenes: 0,
        steps: Vec::new(),
        totals: UsageTotals::default(),
        calls: Vec::new(),
        bug_reached: None,
        wall_time,
        error: None,
    }
}

fn status(s: &str) -> TraceStatus {
    match s {
        "reproduced" => TraceStatus::Reproduced,
        "budget_exhausted" => TraceStatus::BudgetExhausted,
        "error" => TraceStatus::Error,
        other => panic!("unknown status {other}"),
    }
}

pub fn check_reproducibility() -> Result<usize, String> {
    let all = cases();
    let cases = list(&all, "reproducibility");
    for c in cases {
        let name = c["name"].as_str().unwrap();
        let rows = c["traces"].as_array().unwrap();
        let traces: Vec<ReplayTrace> = rows
            .iter()
            .map(|r| trace(status(r[0].as_str().unwrap()), r[1].as_f64().unwrap()))
            .collect();
        let bugs: Vec<bool> = match c.get("bug_reached_override") {
            Some(v) => bools(v),
            None => rows.iter().map(|r| r[2].as_bool().unwrap()).collect(),
        };
        let result = reproducibility(&traces, &bugs);
        if c["error"].as_bool() == Some(true) {
            if result.is_ok() {
                return Err(format!("{name}: expected an error"));
            }
            continue;
        }
        let r = result.map_err(|e| format!("{name}: {e}"))?;
        close(name, "rate", r.rate, &c["rate"])?;
        close(name, "mean_wall_time", r.mean_wall_time, &c["mean_wall_time"])?;
    }
    Ok(cases.len())
}
