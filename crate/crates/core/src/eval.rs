//! Evaluation metrics: boundary matching under a frame tolerance, action-type
//! accuracy, binary comparison scores and reproducibility.
//!
//! Empty-set conventions: precision is 1 when nothing was predicted and
//! recall is 1 when there was nothing to find. F1 is `2PR/(P+R)`, or 0 when
//! `P + R = 0`.
//!
//! Reference values reported for the original system on real recordings with
//! a hosted model (not reproducible without that model and dataset):
//! segmentation P/R/F1 0.87/0.85/0.86 with type accuracy tap 0.88, scroll 0.93,
//! input 1.00; state comparison P/R/F1 0.86/0.88/0.87; reproducibility 72.0%
//! at a mean 302.6 s per recording.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::{ReplayTrace, TraceStatus};
use crate::segmentation::{ActionType, SceneList, SceneRecord};

pub const DEFAULT_TOLERANCE: usize = 5;

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryEval {
    pub tolerance: usize,
    /// `(predicted, truth)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub predicted: usize,
    pub truth: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl BoundaryEval {
    fn from_counts(tolerance: usize, matches: Vec<(usize, usize)>, predicted: usize, truth: usize) -> Self {
        let precision = ratio(matches.len(), predicted);
        let recall = ratio(matches.len(), truth);
        BoundaryEval {
            tolerance,
            predicted,
            truth,
            precision,
            recall,
            f1: f1_score(precision, recall),
            matches,
        }
    }
}

/// Greedy nearest-first one-to-one matching: the globally closest unmatched
/// pair within `tolerance` is taken first; ties go to the smaller predicted,
/// then smaller truth index.
pub fn greedy_match(predicted: &[usize], truth: &[usize], tolerance: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &p) in predicted.iter().enumerate() {
        for (j, &t) in truth.iter().enumerate() {
            let d = p.abs_diff(t);
            if d <= tolerance {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_unstable();
    let mut used_p = vec![false; predicted.len()];
    let mut used_t = vec![false; truth.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

pub fn match_boundaries(predicted: &[usize], truth: &[usize], tolerance: usize) -> BoundaryEval {
    let matches = greedy_match(predicted, truth, tolerance)
        .into_iter()
        .map(|(i, j)| (predicted[i], truth[j]))
        .collect();
    BoundaryEval::from_counts(tolerance, matches, predicted.len(), truth.len())
}

/// Scene pairs `(predicted index, truth index)` whose start and end frames
/// both lie within `tolerance`, matched greedily by summed endpoint distance.
pub fn match_scenes(predicted: &[SceneRecord], truth: &[SceneRecord], tolerance: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, p) in predicted.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let (ds, de) = (p.start.abs_diff(t.start), p.end.abs_diff(t.end));
            if ds <= tolerance && de <= tolerance {
                pairs.push((ds + de, i, j));
            }
        }
    }
    pairs.sort_unstable();
    let mut used_p = vec![false; predicted.len()];
    let mut used_t = vec![false; truth.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl TypeAccuracy {
    fn new(correct: usize, total: usize) -> Self {
        TypeAccuracy {
            correct,
            total,
            accuracy: ratio(correct, total),
        }
    }
}

/// Per-type accuracy keyed by truth type; types absent from the truth are
/// omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionAccuracy {
    pub per_type: BTreeMap<ActionType, TypeAccuracy>,
}

impl ActionAccuracy {
    pub fn get(&self, t: ActionType) -> Option<f64> {
        self.per_type.get(&t).map(|a| a.accuracy)
    }

    pub fn overall(&self) -> TypeAccuracy {
        let correct = self.per_type.values().map(|a| a.correct).sum();
        let total = self.per_type.values().map(|a| a.total).sum();
        TypeAccuracy::new(correct, total)
    }

    fn merge(&mut self, other: &ActionAccuracy) {
        for (t, a) in &other.per_type {
            let e = self.per_type.entry(*t).or_insert(TypeAccuracy::new(0, 0));
            *e = TypeAccuracy::new(e.correct + a.correct, e.total + a.total);
        }
    }
}

/// For each type `t`: correctly labelled matched scenes of truth type `t`
/// divided by all truth scenes of type `t`. Unmatched truth scenes count as
/// wrong.
pub fn action_accuracy(predicted: &[SceneRecord], truth: &[SceneRecord], tolerance: usize) -> ActionAccuracy {
    let matches = match_scenes(predicted, truth, tolerance);
    let mut correct: BTreeMap<ActionType, usize> = BTreeMap::new();
    for &(i, j) in &matches {
        if predicted[i].action_type == truth[j].action_type {
            *correct.entry(truth[j].action_type).or_default() += 1;
        }
    }
    let mut per_type = BTreeMap::new();
    for t in ActionType::ALL {
        let total = truth.iter().filter(|s| s.action_type == t).count();
        if total > 0 {
            per_type.insert(t, TypeAccuracy::new(correct.get(&t).copied().unwrap_or(0), total));
        }
    }
    ActionAccuracy { per_type }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelEval {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl LabelEval {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        LabelEval {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }
}

/// Precision, recall and F1 of binary predictions with `positive` as the
/// positive class (`true` = consistent).
pub fn comparison_eval(predictions: &[bool], truth: &[bool], positive: bool) -> Result<LabelEval> {
    if predictions.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} truth labels",
            predictions.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in predictions.iter().zip(truth) {
        match (p == positive, t == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(LabelEval::from_counts(tp, fp, fn_, tn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reproducibility {
    pub total: usize,
    pub reproduced: usize,
    pub rate: f64,
    /// Seconds, over all traces.
    pub mean_wall_time: f64,
}

/// Share of traces that reproduced and reached the bug state.
pub fn reproducibility(traces: &[ReplayTrace], bug_reached: &[bool]) -> Result<Reproducibility> {
    if traces.len() != bug_reached.len() {
        return Err(Error::Input(format!(
            "{} traces for {} bug flags",
            traces.len(),
            bug_reached.len()
        )));
    }
    let reproduced = traces
        .iter()
        .zip(bug_reached)
        .filter(|(t, &b)| t.status == TraceStatus::Reproduced && b)
        .count();
    let total = traces.len();
    let mean_wall_time = if total == 0 {
        0.0
    } else {
        traces.iter().map(|t| t.wall_time).sum::<f64>() / total as f64
    };
    Ok(Reproducibility {
        total,
        reproduced,
        rate: if total == 0 { 0.0 } else { reproduced as f64 / total as f64 },
        mean_wall_time,
    })
}

/// Ground-truth file: `{"boundaries": [...], "scenes": [{"start", "end", "type"}]}`.
pub type GroundTruth = SceneList;

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// One entry of a comparison truth or prediction list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonLabel {
    pub scene: usize,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationEval {
    pub boundaries: BoundaryEval,
    /// Scene-level scores: a scene counts when both endpoints match.
    pub scenes: BoundaryEval,
    pub actions: ActionAccuracy,
}

/// Boundary, scene and type scores of one recording. Predicted boundaries
/// default to the scene starts when the file lists none.
pub fn evaluate_segmentation(predicted: &SceneList, truth: &GroundTruth, tolerance: usize) -> SegmentationEval {
    let pred_bounds = if predicted.boundaries.is_empty() {
        predicted.scenes.iter().map(|s| s.start).collect()
    } else {
        predicted.boundaries.clone()
    };
    let truth_bounds = if truth.boundaries.is_empty() {
        truth.scenes.iter().map(|s| s.start).collect()
    } else {
        truth.boundaries.clone()
    };
    let scene_matches = match_scenes(&predicted.scenes, &truth.scenes, tolerance)
        .into_iter()
        .map(|(i, j)| (predicted.scenes[i].start, truth.scenes[j].start))
        .collect();
    SegmentationEval {
        boundaries: match_boundaries(&pred_bounds, &truth_bounds, tolerance),
        scenes: BoundaryEval::from_counts(tolerance, scene_matches, predicted.scenes.len(), truth.scenes.len()),
        actions: action_accuracy(&predicted.scenes, &truth.scenes, tolerance),
    }
}

/// Pools per-recording results (micro average).
pub fn pool_segmentation<'a>(evals: impl IntoIterator<Item = &'a SegmentationEval>, tolerance: usize) -> SegmentationEval {
    let mut b = (Vec::new(), 0, 0);
    let mut s = (Vec::new(), 0, 0);
    let mut actions = ActionAccuracy::default();
    for e in evals {
        b.0.extend_from_slice(&e.boundaries.matches);
        b.1 += e.boundaries.predicted;
        b.2 += e.boundaries.truth;
        s.0.extend_from_slice(&e.scenes.matches);
        s.1 += e.scenes.predicted;
        s.2 += e.scenes.truth;
        actions.merge(&e.actions);
    }
    SegmentationEval {
        boundaries: BoundaryEval::from_counts(tolerance, b.0, b.1, b.2),
        scenes: BoundaryEval::from_counts(tolerance, s.0, s.1, s.2),
        actions,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// Plain-text table: one row per recording and a pooled row.
pub fn segmentation_table(rows: &[(String, SegmentationEval)], pooled: &SegmentationEval) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(9);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$}  {:>9}  {:>6}  {:>5}  {:>5}  {:>6}  {:>5}",
        "recording", "precision", "recall", "f1", "tap", "scroll", "input"
    );
    let mut line = |name: &str, e: &SegmentationEval| {
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>9.2}  {:>6.2}  {:>5.2}  {:>5}  {:>6}  {:>5}",
            name,
            e.scenes.precision,
            e.scenes.recall,
            e.scenes.f1,
            cell(e.actions.get(ActionType::Tap)),
            cell(e.actions.get(ActionType::Scroll)),
            cell(e.actions.get(ActionType::Input)),
        );
    };
    for (name, e) in rows {
        line(name, e);
    }
    line("all", pooled);
    out
}
