//! Property checks run through an explicit proptest runner so callers get a
//! pass/fail result instead of a panic.

use std::sync::Arc;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use serde_json::json;

use scenereplay::device::{DeviceAdapter, ScreenCapture, SimApp, SimDevice};
use scenereplay::image::{Rgb, RgbImage};
use scenereplay::perception::{annotate_marks, extract_elements, AnnotatedScreen, Detection, ScriptedDetector};
use scenereplay::recording::{prepare, splitmix64, Frame, Recording, StubEmbedding};
use scenereplay::replay::{
    execute, parse_action, render_action, reproduce_scenes, Backends, Direction, ReplayAction, ReplayBudget,
    ReplayOptions, StepMode, TapTarget, TraceStatus,
};
use scenereplay::segmentation::{
    detect_boundaries, group_scenes, is_keyboard_frame, similarity, ActionScene, ActionType, OcrResult, OcrToken,
    ScriptedOcr, SegmentationParams, SimilaritySeries,
};
use scenereplay::vlm::{PriceTable, RetryPolicy, ScriptRule, ScriptedVlm, VlmClient};
use scenereplay::Rect;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn outcome<T: std::fmt::Debug>(r: Result<(), proptest::test_runner::TestError<T>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

// ---- keyboard predicate ----

const VOCAB: &[&str] = &[
    "q", "w", "e", "r", "t", "qwe", "rt", "QWERT", "qwErT", "asd", "fg", "ASDFG", "zx", "cvb", "zxcvb", "a", "s",
    "1", "2", "3", "12", "456", "78", "9", "0", " ", "  ", ",", "-", ".", "é", "ß", "İ", "Settings", "OK", "\t",
];

fn ocr_tokens() -> impl Strategy<Value = Vec<String>> {
    let chunked = prop::collection::vec(
        prop::collection::vec(prop::sample::select(VOCAB), 0..8).prop_map(|parts| parts.concat()),
        0..4,
    );
    let random = prop::collection::vec("[a-zA-Z0-9 .,!?éßİ]{0,24}", 0..4);
    prop_oneof![chunked, random]
}

/// Independent reading of the rule: the letters of all tokens, lowercased,
/// contain a QWERTY row fragment, or the digits contain a keypad run.
/// Whitespace survives in both streams; other characters vanish.
pub fn keyboard_oracle(tokens: &[String]) -> bool {
    let mut letters: Vec<char> = Vec::new();
    let mut digits: Vec<char> = Vec::new();
    for token in tokens {
        for c in token.chars() {
            if c.is_alphabetic() {
                letters.extend(c.to_lowercase());
            } else if c.is_ascii_digit() {
                digits.push(c);
            } else if c.is_whitespace() {
                letters.push(' ');
                digits.push(' ');
            }
        }
    }
    let occurs = |hay: &[char], needle: &str| {
        let needle: Vec<char> = needle.chars().collect();
        hay.windows(needle.len()).any(|w| w == needle.as_slice())
    };
    ["qwert", "asdfg", "zxcvb"].iter().any(|p| occurs(&letters, p))
        || ["123", "456", "789"].iter().any(|p| occurs(&digits, p))
}

/// Returns the number of positive cases seen, to show both classes occur.
pub fn keyboard_predicate_matches_oracle(cases: u32) -> Result<usize, String> {
    let positives = std::cell::Cell::new(0usize);
    outcome(runner(cases).run(&ocr_tokens(), |tokens| {
        let ocr = OcrResult::from_tokens(
            tokens
                .iter()
                .map(|t| OcrToken {
                    text: t.clone(),
                    rect: Rect::new(0, 0, 10, 10),
                })
                .collect(),
        );
        let want = keyboard_oracle(&tokens);
        prop_assert_eq!(is_keyboard_frame(&ocr), want, "tokens {:?}", tokens);
        if want {
            positives.set(positives.get() + 1);
        }
        Ok(())
    }))?;
    Ok(positives.get())
}

// ---- action grammar ----

pub fn replay_action() -> impl Strategy<Value = ReplayAction> {
    prop_oneof![
        (1u32..10_000).prop_map(|m| ReplayAction::Tap(TapTarget::Element(m))),
        Just(ReplayAction::Tap(TapTarget::Back)),
        prop_oneof![Just(Direction::Up), Just(Direction::Down)].prop_map(ReplayAction::Scroll),
        (1u32..10_000, "[^\\[\\]\\n\\r]{0,30}").prop_map(|(target, value)| ReplayAction::Input { target, value }),
        Just(ReplayAction::End),
    ]
}

pub fn action_round_trip(cases: u32) -> Result<(), String> {
    outcome(runner(cases).run(&replay_action(), |a| {
        let text = render_action(&a).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let back = parse_action(&text).map_err(|e| TestCaseError::fail(format!("{text:?}: {e}")))?;
        prop_assert_eq!(back, a);
        Ok(())
    }))
}

pub const MALFORMED_ACTIONS: [&str; 12] = [
    "",
    "tap 5",
    "[tap]",
    "[tap] [0]",
    "[tap] [-1]",
    "[scroll] [left]",
    "[input] [2]",
    "[input] [x] [hello]",
    "[swipe] [up]",
    "[end] [now]",
    "[tap] [5",
    "[tap]\n[1]",
];

pub fn malformed_actions_rejected() -> Result<usize, String> {
    for s in MALFORMED_ACTIONS {
        if let Ok(a) = parse_action(s) {
            return Err(format!("{s:?} parsed as {a:?}"));
        }
    }
    Ok(MALFORMED_ACTIONS.len())
}

// ---- embeddings and similarity ----

fn raster(seed: u64, w: u32, h: u32, flat: bool) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let k = if flat { 0 } else { (y * w + x) as u64 };
        let v = splitmix64(seed ^ k.wrapping_mul(0x9e37));
        Rgb([v as u8, (v >> 8) as u8, (v >> 16) as u8])
    })
}

pub fn embedding_unit_norm(cases: u32) -> Result<(), String> {
    let backend = StubEmbedding::default();
    let strategy = (any::<u64>(), 2u32..48, 2u32..48, any::<bool>());
    outcome(runner(cases).run(&strategy, |(seed, w, h, flat)| {
        let frames = vec![
            Frame::new(0, 0.0, raster(seed, w, h, flat)),
            Frame::new(1, 0.1, raster(seed.wrapping_add(1), w, h, false)),
        ];
        let rec = Recording::new(frames, 10.0, "prop").map_err(|e| TestCaseError::fail(e.to_string()))?;
        let rec = prepare(&rec, &backend).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for f in &rec.frames {
            let e = f.embedding.as_ref().expect("embedded");
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9, "norm {}", norm);
            prop_assert!(e.iter().all(|v| v.is_finite()));
        }
        Ok(())
    }))
}

pub fn similarity_self_and_symmetry(cases: u32) -> Result<(), String> {
    let vectors = (1usize..64).prop_flat_map(|n| {
        (
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-1.0f64..1.0, n),
        )
    });
    outcome(runner(cases).run(&vectors, |(mut a, b)| {
        a[0] += 2.0;
        prop_assert_eq!(similarity(&a, &a), 1.0);
        let (ab, ba) = (similarity(&a, &b), similarity(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        Ok(())
    }))
}

// ---- scene grouping ----

/// A noisy flat series with planted dips.
fn planted_series() -> impl Strategy<Value = Vec<f64>> {
    (20usize..160, any::<u64>(), prop::collection::vec((0.0f64..1.0, 0.15f64..0.7, 1usize..6), 0..10)).prop_map(
        |(n, seed, dips)| {
            let mut v: Vec<f64> = (0..n)
                .map(|i| 1.0 - (splitmix64(seed ^ i as u64) % 1000) as f64 / 1000.0 * 0.03)
                .collect();
            for (at, depth, width) in dips {
                let start = ((at * n as f64) as usize).min(n - 1);
                for k in 0..width {
                    if let Some(x) = v.get_mut(start + k) {
                        *x = (1.0 - depth * (1.0 - k as f64 / width as f64)).clamp(0.0, 1.0);
                    }
                }
            }
            v
        },
    )
}

pub fn scenes_do_not_overlap(cases: u32) -> Result<(), String> {
    let params = SegmentationParams::default();
    let ocr = ScriptedOcr::default();
    outcome(runner(cases).run(&planted_series(), |values| {
        let n = values.len();
        let frames = (0..=n)
            .map(|i| Frame::new(i, i as f64 / 10.0, RgbImage::from_pixel(2, 2, Rgb([i as u8, 0, 0]))))
            .collect();
        let rec = Recording::new(frames, 10.0, "prop").map_err(|e| TestCaseError::fail(e.to_string()))?;
        let mut series = SimilaritySeries::new(values);
        let boundaries = detect_boundaries(&mut series, &params);
        prop_assert!(boundaries.windows(2).all(|w| w[0] < w[1]));
        let scenes = group_scenes(&rec, &series, &boundaries, &ocr, &params)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(scenes.len(), boundaries.len());
        for s in &scenes {
            prop_assert!(s.start_frame <= s.boundary && s.boundary < s.end_frame && s.end_frame <= n);
        }
        for w in scenes.windows(2) {
            prop_assert!(w[0].end_frame <= w[1].start_frame, "{:?} overlaps {:?}",
                (w[0].start_frame, w[0].end_frame), (w[1].start_frame, w[1].end_frame));
        }
        Ok(())
    }))
}

// ---- simulator apps ----

/// A ring of screens, each with 1-3 buttons. Button 1 leads to the next
/// screen; button 2 (when present) jumps to `jumps[i]`.
pub fn ring_app(buttons: &[usize], jumps: &[usize], with_field: bool) -> SimApp {
    let n = buttons.len();
    let mut screens = serde_json::Map::new();
    let mut transitions = Vec::new();
    for (i, &b) in buttons.iter().enumerate() {
        let mut elements: Vec<_> = (0..b)
            .map(|k| json!({"id": k + 1, "text": format!("B{k}"), "rect": [20, 40 + 60 * k, 200, 40], "clickable": true}))
            .collect();
        if with_field {
            elements.push(json!({"id": 9, "text": "FIELD", "rect": [20, 260, 200, 30], "editable": true}));
            transitions.push(json!({"from": format!("s{i}"), "action": "input", "match": {"id": 9, "value": "*"},
                                    "to": format!("s{}", (i + 1) % n)}));
        }
        screens.insert(format!("s{i}"), json!({"elements": elements}));
        transitions.push(json!({"from": format!("s{i}"), "action": "tap", "match": {"id": 1}, "to": format!("s{}", (i + 1) % n)}));
        if b >= 2 {
            transitions.push(json!({"from": format!("s{i}"), "action": "tap", "match": {"id": 2}, "to": format!("s{}", jumps[i] % n)}));
        }
        if i % 2 == 0 {
            transitions.push(json!({"from": format!("s{i}"), "action": "scroll", "match": {"direction": "down"},
                                    "to": format!("s{}", (i + 2) % n)}));
        }
    }
    let app = json!({"initial": "s0", "bug_screens": [format!("s{}", n - 1)], "screens": screens, "transitions": transitions});
    SimApp::from_json(&app.to_string()).expect("generated app is valid")
}

fn app_shape() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (3usize..7).prop_flat_map(|n| (prop::collection::vec(1usize..4, n), prop::collection::vec(0usize..7, n)))
}

fn annotate(capture: &ScreenCapture) -> Result<AnnotatedScreen, TestCaseError> {
    let elements = extract_elements(&capture.hierarchy).map_err(|e| TestCaseError::fail(e.to_string()))?;
    annotate_marks(capture.pixels.clone(), elements).map_err(|e| TestCaseError::fail(e.to_string()))
}

#[derive(Debug, Clone)]
enum Move {
    Tap(u32),
    Back,
    Scroll(bool),
    Type(String),
}

fn moves() -> impl Strategy<Value = Vec<Move>> {
    prop::collection::vec(
        prop_oneof![
            3 => (1u32..4).prop_map(Move::Tap),
            2 => Just(Move::Back),
            1 => any::<bool>().prop_map(Move::Scroll),
            1 => "[a-z]{1,6}".prop_map(Move::Type),
        ],
        0..30,
    )
}

/// Resolves a move against the marks on the current screen; marks that do not
/// exist fall back to mark 1.
fn to_action(m: &Move, screen: &AnnotatedScreen) -> ReplayAction {
    match m {
        Move::Tap(k) => {
            let mark = screen.element(*k).filter(|e| !e.editable).map_or(1, |e| e.mark_id);
            ReplayAction::Tap(TapTarget::Element(mark))
        }
        Move::Back => ReplayAction::Tap(TapTarget::Back),
        Move::Scroll(down) => ReplayAction::Scroll(if *down { Direction::Down } else { Direction::Up }),
        Move::Type(v) => {
            let target = screen.elements.iter().find(|e| e.editable).map_or(1, |e| e.mark_id);
            ReplayAction::Input {
                target,
                value: v.clone(),
            }
        }
    }
}

type Observation = (String, String, String);

fn walk(device: &mut SimDevice, moves: &[Move]) -> Result<Vec<Observation>, TestCaseError> {
    let mut seen = Vec::new();
    let mut current = device.capture().map_err(|e| TestCaseError::fail(e.to_string()))?;
    for m in moves {
        let annotated = annotate(&current)?;
        let action = to_action(m, &annotated);
        current = execute(&action, device, &annotated).map_err(|e| TestCaseError::fail(format!("{action}: {e}")))?;
        seen.push((
            current.capture_id.clone(),
            device.current_screen().to_string(),
            scenereplay::recording::fingerprint(&current.pixels),
        ));
    }
    Ok(seen)
}

pub fn sim_is_deterministic(cases: u32) -> Result<(), String> {
    let strategy = (app_shape(), moves());
    outcome(runner(cases).run(&strategy, |((buttons, jumps), moves)| {
        let app = ring_app(&buttons, &jumps, true);
        let mut a = SimDevice::new(app.clone()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let mut b = SimDevice::new(app).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let first = walk(&mut a, &moves)?;
        prop_assert_eq!(&first, &walk(&mut b, &moves)?);
        prop_assert_eq!(a.bug_reached(), b.bug_reached());
        a.reset();
        prop_assert_eq!(&first, &walk(&mut a, &moves)?);
        Ok(())
    }))
}

/// Without explicit back transitions, back returns to the screen left by the
/// most recent unreturned forward move, or stays put on an empty stack.
pub fn sim_back_stack_is_sound(cases: u32) -> Result<(), String> {
    let strategy = (app_shape(), moves());
    outcome(runner(cases).run(&strategy, |((buttons, jumps), moves)| {
        let app = ring_app(&buttons, &jumps, false);
        let mut device = SimDevice::new(app).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let mut stack: Vec<String> = Vec::new();
        let mut current = device.capture().map_err(|e| TestCaseError::fail(e.to_string()))?;
        for m in moves.iter().filter(|m| !matches!(m, Move::Type(_))) {
            let before = device.current_screen().to_string();
            let annotated = annotate(&current)?;
            let action = to_action(m, &annotated);
            current = execute(&action, &mut device, &annotated).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let after = device.current_screen().to_string();
            if action == ReplayAction::Tap(TapTarget::Back) {
                let expected = stack.pop().unwrap_or(before);
                prop_assert_eq!(&after, &expected);
            } else if after != before {
                stack.push(before);
            }
        }
        Ok(())
    }))
}

// ---- replay traces ----

#[derive(Debug, Clone)]
pub struct TraceCase {
    buttons: Vec<usize>,
    jumps: Vec<usize>,
    scenes: usize,
    verdicts: Vec<bool>,
    fallback_yes: bool,
    explores: Vec<&'static str>,
    budget: ReplayBudget,
}

fn trace_case() -> impl Strategy<Value = TraceCase> {
    (
        app_shape(),
        1usize..5,
        prop::collection::vec(any::<bool>(), 0..24),
        any::<bool>(),
        prop::collection::vec(prop::sample::select(&["[tap] [back]", "[tap] [1]", "[scroll] [down]"][..]), 0..8),
        0usize..4,
        1usize..20,
    )
        .prop_map(|((buttons, jumps), scenes, verdicts, fallback_yes, explores, e, t)| TraceCase {
            buttons,
            jumps,
            scenes,
            verdicts,
            fallback_yes,
            explores,
            budget: ReplayBudget {
                max_explore_per_scene: e,
                max_total_steps: t,
            },
        })
}

/// `count` tap scenes walking the ring from `s0`: scene `j` goes from screen
/// `j` to screen `j + 1`.
pub fn ring_scenes(app: &SimApp, count: usize) -> Vec<ActionScene> {
    let n = app.screens.len();
    let frame = |i: usize, k: usize| {
        let px = app.raster(&format!("s{}", k % n)).expect("screen renders");
        Frame::new(i, i as f64 / 10.0, px)
    };
    (0..count)
        .map(|j| ActionScene {
            start_frame: 10 * j,
            end_frame: 10 * j + 5,
            boundary: 10 * j + 2,
            action_type: ActionType::Tap,
            first_frame: frame(10 * j, j),
            last_frame: frame(10 * j + 5, j + 1),
            keyboard_frames: Vec::new(),
        })
        .collect()
}

fn script(c: &TraceCase) -> Vec<ScriptRule> {
    let mut rules = vec![ScriptRule::new("Task: region-selection", "Region 1").tokens(2324, 38).repeat()];
    for &v in &c.verdicts {
        rules.push(ScriptRule::new("Task: state-comparison", if v { "YES" } else { "NO" }).tokens(1600, 2));
    }
    rules.push(ScriptRule::new("Task: state-comparison", if c.fallback_yes { "YES" } else { "NO" }).tokens(1600, 2).repeat());
    for &x in &c.explores {
        rules.push(ScriptRule::new("Task: explore-action", x).tokens(1900, 9));
    }
    rules.push(ScriptRule::new("Task: explore-action", "[tap] [back]").tokens(1900, 9).repeat());
    rules.push(ScriptRule::new("Task: replay-action", "[tap] [1]").tokens(2400, 9).repeat());
    rules.push(ScriptRule::new("Task: completion-check", "[end]").tokens(2400, 4).repeat());
    rules
}

/// Returns how many runs reproduced and how many ran out of budget.
pub fn trace_bounds_hold(cases: u32) -> Result<(usize, usize), String> {
    let outcomes = std::cell::Cell::new((0usize, 0usize));
    let embedding = StubEmbedding::default();
    let ocr = ScriptedOcr::default();
    let detector = ScriptedDetector::with_default(vec![Detection {
        rect: Rect::new(20, 40, 200, 40),
        score: 0.9,
        phrase: "button".into(),
    }]);
    outcome(runner(cases).run(&trace_case(), |c| {
        let app = ring_app(&c.buttons, &c.jumps, false);
        let scenes = ring_scenes(&app, c.scenes);
        let rules = script(&c);
        let client = VlmClient::new(Arc::new(ScriptedVlm::new(rules)), RetryPolicy::no_backoff(2), PriceTable::default());
        let mut device = SimDevice::new(app.clone()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let backends = Backends {
            embedding: &embedding,
            ocr: &ocr,
            detector: &detector,
            vlm: &client,
        };
        let options = ReplayOptions {
            budget: c.budget,
            deterministic: true,
            ..ReplayOptions::default()
        };
        let trace = reproduce_scenes(&scenes, &mut device, backends, &options);

        prop_assert!(trace.status != TraceStatus::Error, "error: {:?}", trace.error);
        prop_assert!(trace.steps.len() <= c.budget.max_total_steps);
        for w in trace.steps.windows(2) {
            prop_assert!(w[0].scene <= w[1].scene);
            prop_assert_eq!(&w[0].screen_after, &w[1].screen_before);
        }
        for s in 0..c.scenes {
            let explored = trace.steps.iter().filter(|st| st.scene == s && st.mode == StepMode::Explore).count();
            prop_assert!(explored <= c.budget.max_explore_per_scene);
            let replayed = trace.steps.iter().filter(|st| st.scene == s && st.mode == StepMode::Replay).count();
            prop_assert!(replayed <= 1);
        }
        let ends = trace.steps.iter().filter(|s| s.action == ReplayAction::End).count();
        let (r, b) = outcomes.get();
        outcomes.set(if trace.status == TraceStatus::Reproduced { (r + 1, b) } else { (r, b + 1) });
        match trace.status {
            TraceStatus::Reproduced => {
                let last = trace.steps.last().expect("reproduced trace has steps");
                prop_assert_eq!(&last.action, &ReplayAction::End);
                prop_assert_eq!(last.scene, c.scenes);
                prop_assert_eq!(ends, 1);
                let replayed = trace.steps.iter().filter(|s| s.mode == StepMode::Replay).count();
                prop_assert_eq!(replayed, c.scenes + 1);
            }
            _ => prop_assert_eq!(ends, 0),
        }
        prop_assert_eq!(trace.totals.calls, trace.calls.len());
        let input: u64 = trace.calls.iter().map(|r| r.input_tokens).sum();
        let output: u64 = trace.calls.iter().map(|r| r.output_tokens).sum();
        prop_assert_eq!(trace.totals.input_tokens, input);
        prop_assert_eq!(trace.totals.output_tokens, output);
        let step_calls: usize = trace.steps.iter().map(|s| s.usage.calls).sum();
        prop_assert!(step_calls <= trace.totals.calls);
        Ok(())
    }))?;
    Ok(outcomes.get())
}
