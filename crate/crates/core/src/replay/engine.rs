use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::action::{parse_action, ReplayAction, TapTarget};
use crate::comparison::{compare_state, emphasize_roi, select_roi, CompareOptions, ConsistencyVerdict, RoiSelection};
use crate::device::{DeviceAdapter, ScreenCapture};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::perception::{annotate_marks, extract_elements, AnnotatedScreen, DetectionParams, RegionDetector};
use crate::recording::{prepare, EmbeddingBackend, Recording};
use crate::segmentation::{segment, ActionScene, OcrBackend, SegmentationParams};
use crate::vlm::{build_action_prompt, round_to, ActionPromptMode, Parsed, Phase, PriceTable, UsageRecord, VlmClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayBudget {
    pub max_explore_per_scene: usize,
    pub max_total_steps: usize,
}

impl Default for ReplayBudget {
    fn default() -> Self {
        ReplayBudget {
            max_explore_per_scene: 5,
            max_total_steps: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Reproduced,
    BudgetExhausted,
    Error,
}

impl TraceStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TraceStatus::Reproduced => "reproduced",
            TraceStatus::BudgetExhausted => "budget_exhausted",
            TraceStatus::Error => "error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Replay,
    Explore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepVerdict {
    pub consistent: bool,
    pub confidence: f64,
}

impl From<&ConsistencyVerdict> for StepVerdict {
    fn from(v: &ConsistencyVerdict) -> Self {
        StepVerdict {
            consistent: v.consistent,
            confidence: v.confidence,
        }
    }
}

/// Summed usage of a group of calls. Cost is recomputed from the summed
/// token counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency: f64,
    pub cost: f64,
}

impl UsageTotals {
    pub fn of(records: &[UsageRecord], prices: &PriceTable) -> Self {
        let input_tokens = records.iter().map(|r| r.input_tokens).sum();
        let output_tokens = records.iter().map(|r| r.output_tokens).sum();
        let micros: i64 = records.iter().map(|r| (r.latency * 1e6).round() as i64).sum();
        UsageTotals {
            calls: records.len(),
            input_tokens,
            output_tokens,
            latency: round_to(micros as f64 / 1e6, 6),
            cost: prices.cost(input_tokens, output_tokens),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStep {
    /// Index of the scene being replayed; equals the scene count for the
    /// closing `[end]` turn.
    pub scene: usize,
    pub mode: StepMode,
    pub verdict: StepVerdict,
    pub action: ReplayAction,
    pub screen_before: String,
    pub screen_after: String,
    pub usage: UsageTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayTrace {
    pub status: TraceStatus,
    pub scenes: usize,
    pub steps: Vec<ReplayStep>,
    pub totals: UsageTotals,
    /// Every model and detector call, in order.
    pub calls: Vec<UsageRecord>,
    /// Whether the device reached a bug state; `None` when it cannot tell.
    pub bug_reached: Option<bool>,
    /// Seconds; zero in deterministic mode.
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReplayTrace {
    pub fn explore_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.mode == StepMode::Explore).count()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// The backends a replay run talks to.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub embedding: &'a dyn EmbeddingBackend,
    pub ocr: &'a dyn OcrBackend,
    pub detector: &'a dyn RegionDetector,
    pub vlm: &'a VlmClient,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayOptions {
    pub budget: ReplayBudget,
    pub segmentation: SegmentationParams,
    pub detection: DetectionParams,
    pub compare: CompareOptions,
    /// Report zero wall time so traces are byte-stable.
    pub deterministic: bool,
}

fn annotate(capture: &ScreenCapture) -> Result<AnnotatedScreen> {
    let elements = extract_elements(&capture.hierarchy)?;
    annotate_marks(capture.pixels.clone(), elements)
}

/// Asks the model for the next action on `current`.
///
/// The answer must name a mark present on `current`; `[end]` is accepted only
/// in completion mode. Violations are fed back to the model and retried.
pub fn infer_action(
    scene: &ActionScene,
    roi: &RoiSelection,
    current: &AnnotatedScreen,
    client: &VlmClient,
    mode: ActionPromptMode,
) -> Result<(ReplayAction, UsageRecord)> {
    let marks: Vec<u32> = current.elements.iter().map(|e| e.mark_id).collect();
    let images = match mode {
        ActionPromptMode::Consistent | ActionPromptMode::Completion => vec![
            Arc::new(emphasize_roi(&scene.first_frame.pixels, roi.region.rect)),
            scene.last_frame.pixels.clone(),
            current.pixels.clone(),
        ],
        ActionPromptMode::Inconsistent => vec![scene.first_frame.pixels.clone(), current.pixels.clone()],
    };
    let hint = (mode == ActionPromptMode::Consistent).then_some(scene.action_type);
    let request = build_action_prompt(mode, images, hint, &marks)?;

    let valid = marks.clone();
    let check = move |p: &Parsed| {
        let Parsed::Action(action) = p else {
            return Err(format!("expected an action, got {p:?}"));
        };
        if *action == ReplayAction::End && mode != ActionPromptMode::Completion {
            return Err("[end] is only valid once every recorded action has been replayed".into());
        }
        match action.mark() {
            Some(m) if !valid.contains(&m) => Err(format!(
                "mark {m} does not exist on the current screen; valid marks are {:?}",
                valid
            )),
            _ => Ok(()),
        }
    };
    let response = client.invoke_validated(&request, &check).map_err(|e| match e {
        Error::Invocation { attempts, last_error } => {
            let missing = attempts
                .last()
                .and_then(|t| parse_action(t).ok())
                .and_then(|a| a.mark())
                .filter(|m| !marks.contains(m));
            match missing {
                Some(mark) => Error::Grounding { mark },
                None => Error::Inference(format!("{last_error} (answers: {attempts:?})")),
            }
        }
        other => other,
    })?;
    match response.parsed {
        Some(Parsed::Action(action)) => Ok((action, response.usage)),
        _ => Err(Error::Inference("response has no action".into())),
    }
}

/// Performs `action` on the device and returns the post-action capture.
/// `[end]` has no device effect.
pub fn execute(action: &ReplayAction, device: &mut dyn DeviceAdapter, current: &AnnotatedScreen) -> Result<ScreenCapture> {
    let element_rect = |mark: u32| {
        current
            .element(mark)
            .map(|e| e.rect)
            .ok_or(Error::Grounding { mark })
    };
    match action {
        ReplayAction::End => return device.capture(),
        ReplayAction::Tap(TapTarget::Back) => device.act(action, None)?,
        ReplayAction::Tap(TapTarget::Element(m)) => device.act(action, Some(element_rect(*m)?))?,
        ReplayAction::Input { target, .. } => device.act(action, Some(element_rect(*target)?))?,
        ReplayAction::Scroll(_) => {
            let viewport = current
                .elements
                .iter()
                .find(|e| e.scrollable)
                .map(|e| e.rect)
                .unwrap_or_else(|| Rect::new(0, 0, current.raw_pixels.width(), current.raw_pixels.height()));
            device.act(action, Some(viewport))?
        }
    }
    device.capture()
}

struct Run<'a, 'd> {
    device: &'d mut dyn DeviceAdapter,
    backends: Backends<'a>,
    options: &'a ReplayOptions,
    ledger_start: usize,
    step_start: usize,
    steps: Vec<ReplayStep>,
}

impl Run<'_, '_> {
    fn push_step(
        &mut self,
        scene: usize,
        mode: StepMode,
        verdict: StepVerdict,
        action: ReplayAction,
        before: &ScreenCapture,
        after: &ScreenCapture,
    ) {
        let log = self.backends.vlm.usage_log();
        let usage = UsageTotals::of(&log[self.step_start..], &self.backends.vlm.prices);
        self.step_start = log.len();
        self.steps.push(ReplayStep {
            scene,
            mode,
            verdict,
            action,
            screen_before: before.capture_id.clone(),
            screen_after: after.capture_id.clone(),
            usage,
        });
    }

    /// Replays every scene. Returns whether some scene ran out of exploration.
    fn scenes(&mut self, scenes: &[ActionScene]) -> Result<(bool, Option<StepVerdict>)> {
        let client = self.backends.vlm;
        let budget = self.options.budget;
        let mut exhausted = false;
        let mut last_verdict = None;
        let mut current = self.device.capture()?;
        let mut last_roi = None;

        'scenes: for (i, scene) in scenes.iter().enumerate() {
            let (roi, usage) = select_roi(scene, i, self.backends.detector, client, &self.options.detection)?;
            for record in usage.into_iter().filter(|r| r.phase == Phase::RegionDetection) {
                client.log_external(record);
            }
            let mut explored = 0;
            last_roi = Some(roi.clone());
            loop {
                if self.steps.len() >= budget.max_total_steps {
                    exhausted = true;
                    break 'scenes;
                }
                let (verdict, _) = compare_state(
                    scene,
                    &roi,
                    current.pixels.clone(),
                    &current.capture_id,
                    client,
                    &self.options.compare,
                )?;
                if !verdict.consistent && explored == budget.max_explore_per_scene {
                    log::info!("scene {i}: exploration budget exhausted");
                    exhausted = true;
                    continue 'scenes;
                }
                let annotated = annotate(&current)?;
                let (mode, prompt_mode) = if verdict.consistent {
                    (StepMode::Replay, ActionPromptMode::Consistent)
                } else {
                    (StepMode::Explore, ActionPromptMode::Inconsistent)
                };
                let (action, _) = infer_action(scene, &roi, &annotated, client, prompt_mode)?;
                let after = execute(&action, self.device, &annotated)?;
                log::info!("scene {i}: {mode:?} {action} ({} -> {})", current.capture_id, after.capture_id);
                self.push_step(i, mode, StepVerdict::from(&verdict), action, &current, &after);
                current = after;
                if verdict.consistent {
                    last_verdict = Some(StepVerdict::from(&verdict));
                    break;
                }
                explored += 1;
            }
        }
        if exhausted || self.steps.len() >= budget.max_total_steps {
            return Ok((true, last_verdict));
        }

        // closing turn on the last scene, expected to answer [end]
        let (Some(scene), Some(roi)) = (scenes.last(), last_roi) else {
            return Ok((false, last_verdict));
        };
        let annotated = annotate(&current)?;
        let (action, _) = infer_action(scene, &roi, &annotated, client, ActionPromptMode::Completion)?;
        let verdict = last_verdict.unwrap_or(StepVerdict {
            consistent: true,
            confidence: 1.0,
        });
        self.push_step(scenes.len(), StepMode::Replay, verdict, action, &current, &current);
        Ok((false, last_verdict))
    }
}

/// Replays already segmented scenes on `device`. Never fails: errors end the
/// run with an error-status trace holding every step taken so far.
pub fn reproduce_scenes(
    scenes: &[ActionScene],
    device: &mut dyn DeviceAdapter,
    backends: Backends,
    options: &ReplayOptions,
) -> ReplayTrace {
    let started = Instant::now();
    let ledger_start = backends.vlm.usage_log().len();
    let mut run = Run {
        device,
        backends,
        options,
        ledger_start,
        step_start: ledger_start,
        steps: Vec::new(),
    };
    let outcome = if scenes.is_empty() {
        Err(Error::Input("no action scenes were detected in the recording".into()))
    } else {
        run.scenes(scenes)
    };
    finish(run, outcome, scenes.len(), started)
}

fn finish(run: Run, outcome: Result<(bool, Option<StepVerdict>)>, scenes: usize, started: Instant) -> ReplayTrace {
    let log = run.backends.vlm.usage_log();
    let calls = log[run.ledger_start.min(log.len())..].to_vec();
    let totals = UsageTotals::of(&calls, &run.backends.vlm.prices);
    let (status, error) = match outcome {
        Ok((true, _)) => (TraceStatus::BudgetExhausted, None),
        Ok((false, _)) => match run.steps.last() {
            Some(s) if s.action == ReplayAction::End => (TraceStatus::Reproduced, None),
            _ => (TraceStatus::BudgetExhausted, None),
        },
        Err(e) => {
            log::warn!("replay stopped: {e}");
            (TraceStatus::Error, Some(e.to_string()))
        }
    };
    ReplayTrace {
        status,
        scenes,
        steps: run.steps,
        totals,
        calls,
        bug_reached: run.device.bug_reached(),
        wall_time: if run.options.deterministic {
            0.0
        } else {
            round_to(started.elapsed().as_secs_f64(), 3)
        },
        error,
    }
}

/// Segments `recording` and replays it on `device`.
pub fn reproduce(
    recording: &Recording,
    device: &mut dyn DeviceAdapter,
    backends: Backends,
    options: &ReplayOptions,
) -> ReplayTrace {
    let started = Instant::now();
    let segmented = prepare(recording, backends.embedding)
        .and_then(|embedded| segment(&embedded, backends.ocr, &options.segmentation));
    let mut trace = match segmented {
        Ok(seg) => reproduce_scenes(&seg.scenes, device, backends, options),
        Err(e) => {
            let ledger_start = backends.vlm.usage_log().len();
            let run = Run {
                device,
                backends,
                options,
                ledger_start,
                step_start: ledger_start,
                steps: Vec::new(),
            };
            finish(run, Err(e), 0, started)
        }
    };
    if !options.deterministic {
        trace.wall_time = round_to(started.elapsed().as_secs_f64(), 3);
    }
    trace
}
