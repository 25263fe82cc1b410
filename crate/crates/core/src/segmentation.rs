//! Similarity series, action boundaries, scene grouping and action typing.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::recording::{self, Frame, Recording};

/// Similarity of consecutive frames: `values[i]` compares frame `i` with `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySeries {
    pub values: Vec<f64>,
    pub smoothed: Option<Vec<f64>>,
}

impl SimilaritySeries {
    pub fn new(values: Vec<f64>) -> Self {
        SimilaritySeries {
            values,
            smoothed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// CSV with `index,similarity,smoothed` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,similarity,smoothed\n");
        for (i, v) in self.values.iter().enumerate() {
            let s = self.smoothed.as_ref().map(|s| s[i]);
            match s {
                Some(s) => out.push_str(&format!("{i},{v:.6},{s:.6}\n")),
                None => out.push_str(&format!("{i},{v:.6},\n")),
            }
        }
        out
    }
}

/// Cosine similarity mapped affinely onto `[0, 1]`.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.5;
    }
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    ((cos + 1.0) / 2.0).clamp(0.0, 1.0)
}

pub fn similarity_series(recording: &Recording) -> Result<SimilaritySeries> {
    let embeddings = recording
        .frames
        .iter()
        .map(|f| {
            f.embedding
                .as_deref()
                .ok_or_else(|| Error::State(format!("frame {} has no embedding", f.index)))
        })
        .collect::<Result<Vec<_>>>()?;
    let values = embeddings
        .par_windows(2)
        .map(|w| similarity(w[0], w[1]))
        .collect();
    Ok(SimilaritySeries::new(values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationParams {
    /// Centered moving-average window applied before looking for dips.
    pub smoothing_window: usize,
    /// Minimum depth of a dip below its local baseline.
    pub drop_threshold: f64,
    /// Half-width of the window the local baseline is taken over.
    pub baseline_window: usize,
    /// Dips closer than this many frames belong to the same action.
    pub min_scene_len: usize,
    /// Similarity at or above which a step counts as stable.
    pub stable_threshold: f64,
    /// Consecutive stable steps required around a scene's key frames.
    pub stable_steps: usize,
    /// Shortest post-dip recovery classified as a scroll.
    pub scroll_min_frames: usize,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            smoothing_window: 3,
            drop_threshold: 0.15,
            baseline_window: 10,
            min_scene_len: 3,
            stable_threshold: 0.98,
            stable_steps: 2,
            scroll_min_frames: 4,
        }
    }
}

/// Centered moving average; windows are truncated at the ends.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window.max(1) / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(values.len() - 1);
            let slice = &values[lo..=hi];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Indices `b` (frame `b` is the last frame before the change) where a new
/// user action begins.
///
/// Local minima of the smoothed series locate candidate dips; the onset is the
/// lowest raw value next to each minimum. A candidate is kept when the raw
/// value there sits more than `drop_threshold` below the local baseline (the
/// smoothed maximum within `baseline_window`). Candidates closer than
/// `min_scene_len` collapse onto the earliest.
pub fn detect_boundaries(series: &mut SimilaritySeries, params: &SegmentationParams) -> Vec<usize> {
    let values = &series.values;
    let n = values.len();
    if n == 0 {
        series.smoothed = Some(Vec::new());
        return Vec::new();
    }
    let sm = moving_average(values, params.smoothing_window);
    let half = params.smoothing_window.max(1) / 2;

    let mut onsets = BTreeSet::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sm[j + 1] == sm[i] {
            j += 1;
        }
        let left_higher = i == 0 || sm[i - 1] > sm[i];
        let right_higher = j == n - 1 || sm[j + 1] > sm[i];
        if left_higher && right_higher {
            let lo = i.saturating_sub(half);
            let hi = (j + half).min(n - 1);
            let onset = lo + argmin(&values[lo..=hi]);
            let b_lo = onset.saturating_sub(params.baseline_window);
            let b_hi = (onset + params.baseline_window).min(n - 1);
            let baseline = sm[b_lo..=b_hi].iter().cloned().fold(f64::MIN, f64::max);
            if baseline - values[onset] > params.drop_threshold {
                onsets.insert(onset);
            }
        }
        i = j + 1;
    }

    let mut kept: Vec<usize> = Vec::new();
    for b in onsets {
        match kept.last() {
            Some(&last) if b - last < params.min_scene_len => {}
            _ => kept.push(b),
        }
    }
    series.smoothed = Some(sm);
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionType {
    Tap,
    Scroll,
    Input,
}

impl ActionType {
    pub const ALL: [ActionType; 3] = [ActionType::Tap, ActionType::Scroll, ActionType::Input];

    pub fn as_str(&self) -> &'static str {
        match self {
            ActionType::Tap => "tap",
            ActionType::Scroll => "scroll",
            ActionType::Input => "input",
        }
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tap" => Ok(ActionType::Tap),
            "scroll" => Ok(ActionType::Scroll),
            "input" => Ok(ActionType::Input),
            other => Err(Error::Parse(format!("unknown action type {other:?}"))),
        }
    }
}

fn ls_slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = values.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in values.iter().enumerate() {
        let dx = i as f64 - mean_x;
        num += dx * (y - mean_y);
        den += dx * dx;
    }
    num / den
}

/// Labels one scene window of the series.
///
/// Any keyboard-flagged frame makes it an input. Otherwise the window is a
/// scroll when the run from its lowest value up to the first stable value
/// spans at least `scroll_min_frames` samples with a positive least-squares
/// slope, and a tap in every other case.
pub fn classify_action(
    values: &[f64],
    window: Range<usize>,
    keyboard_flags: &[bool],
    params: &SegmentationParams,
) -> ActionType {
    if keyboard_flags.iter().any(|&k| k) {
        return ActionType::Input;
    }
    let end = window.end.min(values.len());
    let start = window.start.min(end);
    let w = &values[start..end];
    if w.is_empty() {
        return ActionType::Tap;
    }
    let m = argmin(w);
    let mut run_end = m;
    while run_end + 1 < w.len() && w[run_end + 1] < params.stable_threshold {
        run_end += 1;
    }
    let run = &w[m..=run_end];
    if run.len() >= params.scroll_min_frames && ls_slope(run) > 0.0 {
        ActionType::Scroll
    } else {
        ActionType::Tap
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrToken {
    pub text: String,
    pub rect: Rect,
}

/// Text recognized on one frame, split into alphabetic and numeric streams.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OcrResult {
    pub tokens: Vec<OcrToken>,
    pub ocr_text: String,
    pub ocr_num: String,
}

impl OcrResult {
    /// Concatenates token contents in order. Letters go to `ocr_text` and
    /// digits to `ocr_num`; whitespace inside a token is kept in both as a
    /// separator; everything else is dropped.
    pub fn from_tokens(tokens: Vec<OcrToken>) -> Self {
        let mut ocr_text = String::new();
        let mut ocr_num = String::new();
        for token in &tokens {
            for c in token.text.chars() {
                if c.is_alphabetic() {
                    ocr_text.push(c);
                } else if c.is_ascii_digit() {
                    ocr_num.push(c);
                } else if c.is_whitespace() {
                    ocr_text.push(' ');
                    ocr_num.push(' ');
                }
            }
        }
        OcrResult {
            tokens,
            ocr_text,
            ocr_num,
        }
    }

    pub fn from_text(text: &str) -> Self {
        OcrResult::from_tokens(vec![OcrToken {
            text: text.to_string(),
            rect: Rect::new(0, 0, 0, 0),
        }])
    }
}

pub const KEYBOARD_LETTER_ROWS: [&str; 3] = ["qwert", "asdfg", "zxcvb"];
pub const KEYBOARD_DIGIT_RUNS: [&str; 3] = ["123", "456", "789"];

/// Virtual-keyboard test on OCR output: a QWERTY row fragment in the
/// lowercased letters, or a keypad run in the digits.
pub fn is_keyboard_frame(ocr: &OcrResult) -> bool {
    let text = ocr.ocr_text.to_lowercase();
    KEYBOARD_LETTER_ROWS.iter().any(|p| text.contains(p))
        || KEYBOARD_DIGIT_RUNS.iter().any(|p| ocr.ocr_num.contains(p))
}

pub trait OcrBackend: Send + Sync {
    fn recognize(&self, pixels: &RgbImage) -> Result<OcrResult>;
}

/// Fixture OCR keyed by raster fingerprint ([`recording::fingerprint`]).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScriptedOcr {
    #[serde(default)]
    pub default: Vec<OcrToken>,
    #[serde(default)]
    pub frames: HashMap<String, Vec<OcrToken>>,
}

impl ScriptedOcr {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn insert(&mut self, pixels: &RgbImage, tokens: Vec<OcrToken>) {
        self.frames.insert(recording::fingerprint(pixels), tokens);
    }
}

impl OcrBackend for ScriptedOcr {
    fn recognize(&self, pixels: &RgbImage) -> Result<OcrResult> {
        let key = recording::fingerprint(pixels);
        let tokens = self.frames.get(&key).unwrap_or(&self.default);
        Ok(OcrResult::from_tokens(tokens.clone()))
    }
}

/// Client for a text-recognition service.
///
/// `POST {endpoint}` with `{"image": "<base64 PNG>"}`; the service answers
/// `{"tokens": [{"text": str, "rect": [x, y, w, h]}]}`.
#[derive(Debug, Clone)]
pub struct HttpOcr {
    pub endpoint: String,
    pub api_key: Option<String>,
}

#[derive(Deserialize)]
struct OcrReply {
    tokens: Vec<OcrToken>,
}

impl OcrBackend for HttpOcr {
    fn recognize(&self, pixels: &RgbImage) -> Result<OcrResult> {
        let image = recording::encode_png_base64(pixels);
        let mut req = ureq::post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let reply: OcrReply = req
            .send_json(serde_json::json!({ "image": image }))
            .map_err(|e| Error::backend("http-ocr", e))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::backend("http-ocr", e))?;
        Ok(OcrResult::from_tokens(reply.tokens))
    }
}

/// One user action: the frames from the last stable frame before the
/// transition to the first stable frame after it.
#[derive(Debug, Clone)]
pub struct ActionScene {
    pub start_frame: usize,
    pub end_frame: usize,
    /// Series index of the transition onset.
    pub boundary: usize,
    pub action_type: ActionType,
    pub first_frame: Frame,
    pub last_frame: Frame,
    pub keyboard_frames: Vec<usize>,
}

fn stable_before(values: &[f64], b: usize, params: &SegmentationParams) -> usize {
    let steps = params.stable_steps;
    (steps..=b)
        .rev()
        .find(|&j| (1..=steps).all(|k| values[j - k] >= params.stable_threshold))
        .unwrap_or(0)
}

fn stable_after(values: &[f64], b: usize, params: &SegmentationParams) -> usize {
    let n = values.len();
    (b + 1..=n)
        .find(|&j| {
            let avail = params.stable_steps.min(n - j);
            (0..avail).all(|k| values[j + k] >= params.stable_threshold)
        })
        .unwrap_or(n)
}

/// Turns each boundary into a scene and labels it.
///
/// OCR runs only on frames after the onset up to the scene's last frame, so a
/// keyboard left open by a previous input does not relabel the next action.
pub fn group_scenes(
    recording: &Recording,
    series: &SimilaritySeries,
    boundaries: &[usize],
    ocr: &dyn OcrBackend,
    params: &SegmentationParams,
) -> Result<Vec<ActionScene>> {
    let values = &series.values;
    if values.len() + 1 != recording.len() {
        return Err(Error::Input(format!(
            "series has {} values for {} frames",
            values.len(),
            recording.len()
        )));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input("boundaries must be strictly increasing".into()));
    }
    if let Some(&b) = boundaries.last() {
        if b >= values.len() {
            return Err(Error::Input(format!("boundary {b} outside series of {}", values.len())));
        }
    }

    let mut windows = Vec::with_capacity(boundaries.len());
    let mut prev_end = 0;
    for (k, &b) in boundaries.iter().enumerate() {
        let start = stable_before(values, b, params).max(prev_end);
        let mut end = stable_after(values, b, params);
        if let Some(&next) = boundaries.get(k + 1) {
            end = end.min(next);
        }
        windows.push((b, start, end));
        prev_end = end;
    }

    windows
        .into_par_iter()
        .map(|(b, start, end)| {
            let flagged = (b + 1..=end)
                .map(|i| {
                    ocr.recognize(&recording.frames[i].pixels)
                        .map(|r| is_keyboard_frame(&r).then_some(i))
                })
                .collect::<Result<Vec<_>>>()?;
            let keyboard_frames: Vec<usize> = flagged.into_iter().flatten().collect();
            let flags = vec![true; keyboard_frames.len()];
            let action_type = classify_action(values, start..end, &flags, params);
            Ok(ActionScene {
                start_frame: start,
                end_frame: end,
                boundary: b,
                action_type,
                first_frame: recording.frames[start].clone(),
                last_frame: recording.frames[end].clone(),
                keyboard_frames,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub series: SimilaritySeries,
    pub boundaries: Vec<usize>,
    pub scenes: Vec<ActionScene>,
}

/// Full segmentation of an embedded recording.
pub fn segment(
    recording: &Recording,
    ocr: &dyn OcrBackend,
    params: &SegmentationParams,
) -> Result<Segmentation> {
    let mut series = similarity_series(recording)?;
    let boundaries = detect_boundaries(&mut series, params);
    let scenes = group_scenes(recording, &series, &boundaries, ocr, params)?;
    Ok(Segmentation {
        series,
        boundaries,
        scenes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub action_type: ActionType,
    #[serde(default)]
    pub keyboard_frames: Vec<usize>,
}

/// `{"boundaries": [...], "scenes": [...]}` as written by the `segment`
/// command; same layout as a ground-truth file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneList {
    #[serde(default)]
    pub boundaries: Vec<usize>,
    pub scenes: Vec<SceneRecord>,
}

impl SceneList {
    pub fn from_scenes(scenes: &[ActionScene]) -> Self {
        SceneList {
            boundaries: scenes.iter().map(|s| s.boundary).collect(),
            scenes: scenes
                .iter()
                .map(|s| SceneRecord {
                    start: s.start_frame,
                    end: s.end_frame,
                    action_type: s.action_type,
                    keyboard_frames: s.keyboard_frames.clone(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SegmentationParams {
        SegmentationParams::default()
    }

    #[test]
    fn orthogonal_vectors_score_one_half() {
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.5);
        assert_eq!(similarity(&[1.0, 0.0], &[-1.0, 0.0]), 0.0);
        assert_eq!(similarity(&[0.6, 0.8], &[0.6, 0.8]), 1.0);
    }

    #[test]
    fn flat_series_has_no_boundaries() {
        let mut s = SimilaritySeries::new(vec![1.0; 30]);
        assert!(detect_boundaries(&mut s, &params()).is_empty());
        assert_eq!(s.smoothed.unwrap(), vec![1.0; 30]);
    }

    #[test]
    fn empty_series_has_no_boundaries() {
        let mut s = SimilaritySeries::new(vec![]);
        assert!(detect_boundaries(&mut s, &params()).is_empty());
    }

    #[test]
    fn two_deep_dips_twenty_apart() {
        let mut v = vec![1.0; 45];
        v[10] = 0.5;
        v[30] = 0.45;
        let mut s = SimilaritySeries::new(v);
        assert_eq!(detect_boundaries(&mut s, &params()), vec![10, 30]);
    }

    #[test]
    fn shallow_dip_is_ignored() {
        // depth 0.1 against a flat baseline of 1.0
        let mut v = vec![1.0; 30];
        v[12] = 0.9;
        let mut s = SimilaritySeries::new(v);
        assert!(detect_boundaries(&mut s, &params()).is_empty());
    }

    #[test]
    fn close_dips_merge_to_the_first() {
        let mut v = vec![1.0; 30];
        v[10] = 0.5;
        v[15] = 0.4;
        let mut s = SimilaritySeries::new(v.clone());
        assert_eq!(detect_boundaries(&mut s, &params()), vec![10, 15]);
        let wide = SegmentationParams {
            min_scene_len: 6,
            ..params()
        };
        let mut s = SimilaritySeries::new(v);
        assert_eq!(detect_boundaries(&mut s, &wide), vec![10]);
    }

    #[test]
    fn scroll_onset_is_the_initial_drop() {
        let mut v = vec![1.0; 30];
        v[10..16].copy_from_slice(&[0.62, 0.75, 0.84, 0.91, 0.95, 0.97]);
        let mut s = SimilaritySeries::new(v);
        assert_eq!(detect_boundaries(&mut s, &params()), vec![10]);
    }

    #[test]
    fn classify_examples() {
        let p = params();
        let tap = [0.99, 0.45, 0.98];
        assert_eq!(classify_action(&tap, 0..3, &[false; 3], &p), ActionType::Tap);
        let scroll = [0.99, 0.60, 0.70, 0.80, 0.90, 0.97];
        assert_eq!(classify_action(&scroll, 0..6, &[false; 6], &p), ActionType::Scroll);
        assert_eq!(classify_action(&scroll, 0..6, &[false, true], &p), ActionType::Input);
        assert_eq!(classify_action(&tap, 0..3, &[true], &p), ActionType::Input);
    }

    #[test]
    fn short_or_falling_recovery_is_a_tap() {
        let p = params();
        assert_eq!(
            classify_action(&[0.99, 0.6, 0.7, 0.8, 0.99], 0..5, &[], &p),
            ActionType::Tap
        );
        // A slow fall after the minimum is not a recovery.
        assert_eq!(
            classify_action(&[0.99, 0.5, 0.55, 0.52, 0.51, 0.5, 0.99], 0..7, &[], &p),
            ActionType::Tap
        );
        assert_eq!(classify_action(&[0.9], 0..0, &[], &p), ActionType::Tap);
    }

    #[test]
    fn keyboard_predicate_examples() {
        assert!(is_keyboard_frame(&OcrResult::from_text("QWERTYUIOP ASDFGHJKL")));
        assert!(is_keyboard_frame(&OcrResult::from_text("7894561230")));
        let r = OcrResult {
            tokens: vec![],
            ocr_text: "hello settings".into(),
            ocr_num: "42".into(),
        };
        assert!(!is_keyboard_frame(&r));
    }

    #[test]
    fn ocr_split_separates_letters_and_digits() {
        let r = OcrResult::from_text("Room 12b, floor 3");
        assert_eq!(r.ocr_text, "Room b floor ");
        assert_eq!(r.ocr_num, " 12  3");
    }

    #[test]
    fn keyboard_rows_split_across_tokens_still_match() {
        let tokens = ["q", "w", "e", "r", "t"]
            .iter()
            .map(|t| OcrToken {
                text: t.to_string(),
                rect: Rect::new(0, 0, 1, 1),
            })
            .collect();
        assert!(is_keyboard_frame(&OcrResult::from_tokens(tokens)));
    }

    #[test]
    fn scene_json_shape() {
        let list = SceneList {
            boundaries: vec![2],
            scenes: vec![SceneRecord {
                start: 3,
                end: 5,
                action_type: ActionType::Input,
                keyboard_frames: vec![4, 5],
            }],
        };
        assert_eq!(
            serde_json::to_string(&list).unwrap(),
            r#"{"boundaries":[2],"scenes":[{"start":3,"end":5,"type":"input","keyboard_frames":[4,5]}]}"#
        );
    }
}
