use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{DeviceAdapter, ScreenCapture};
use crate::draw;
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::replay::{Direction, ReplayAction, TapTarget};

pub const DEFAULT_SIM_SIZE: (u32, u32) = (240, 400);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimElement {
    pub id: u32,
    #[serde(default)]
    pub text: String,
    pub rect: Rect,
    #[serde(default)]
    pub clickable: bool,
    #[serde(default)]
    pub editable: bool,
    #[serde(default)]
    pub scrollable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

impl SimElement {
    fn class_name(&self) -> &str {
        match &self.class {
            Some(c) => c,
            None if self.editable => "android.widget.EditText",
            None if self.scrollable => "android.widget.ScrollView",
            None if self.clickable => "android.widget.Button",
            None => "android.widget.TextView",
        }
    }
}

fn auto() -> String {
    "auto".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScreen {
    #[serde(default)]
    pub elements: Vec<SimElement>,
    /// `"auto"` for a synthetic render, otherwise a PNG path relative to the
    /// app file.
    #[serde(default = "auto")]
    pub render: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionPattern {
    Tap,
    Scroll,
    Input,
    Back,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    /// Exact typed value, or `"*"` for any value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

impl TransitionMatch {
    fn names_element(&self) -> bool {
        self.text.is_some() || self.id.is_some()
    }

    fn selects(&self, element: &SimElement) -> bool {
        self.names_element()
            && self.id.is_none_or(|id| id == element.id)
            && self.text.as_ref().is_none_or(|t| *t == element.text)
    }

    fn wildcard(&self) -> bool {
        self.value.as_deref() == Some("*")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub from: String,
    pub action: ActionPattern,
    #[serde(default, rename = "match")]
    pub pattern: TransitionMatch,
    pub to: String,
}

impl Transition {
    fn describe(&self, index: usize) -> String {
        format!("transition #{index} ({} {:?} -> {})", self.from, self.action, self.to)
    }
}

fn default_size() -> (u32, u32) {
    DEFAULT_SIM_SIZE
}

/// A scripted GUI state machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimApp {
    pub initial: String,
    #[serde(default)]
    pub bug_screens: BTreeSet<String>,
    pub screens: BTreeMap<String, SimScreen>,
    #[serde(default)]
    pub transitions: Vec<Transition>,
    /// Screen size `[width, height]`.
    #[serde(default = "default_size")]
    pub size: (u32, u32),
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// Reads and validates an app definition.
pub fn load_sim_app(path: &Path) -> Result<SimApp> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut app: SimApp = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    app.base_dir = path.parent().map(Path::to_path_buf);
    app.validate()?;
    Ok(app)
}

impl SimApp {
    pub fn from_json(text: &str) -> Result<SimApp> {
        let app: SimApp = serde_json::from_str(text).map_err(|e| Error::Validation(e.to_string()))?;
        app.validate()?;
        Ok(app)
    }

    fn screen(&self, id: &str) -> Result<&SimScreen> {
        self.screens
            .get(id)
            .ok_or_else(|| Error::State(format!("unknown screen {id:?}")))
    }

    /// Checks every structural invariant; errors name the offending entry.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        let (w, h) = self.size;
        if w == 0 || h == 0 {
            return bad(format!("screen size {w}x{h} is empty"));
        }
        if !self.screens.contains_key(&self.initial) {
            return bad(format!("initial screen {:?} is not defined", self.initial));
        }
        for b in &self.bug_screens {
            if !self.screens.contains_key(b) {
                return bad(format!("bug screen {b:?} is not defined"));
            }
        }
        for (sid, screen) in &self.screens {
            let mut ids = BTreeSet::new();
            for e in &screen.elements {
                if !ids.insert(e.id) {
                    return bad(format!("screen {sid:?}: duplicate element id {}", e.id));
                }
                if e.rect.is_empty() || !e.rect.fits_within(w, h) {
                    return bad(format!("screen {sid:?}: element {} rect {:?} is outside {w}x{h}", e.id, e.rect));
                }
            }
        }
        for (i, t) in self.transitions.iter().enumerate() {
            for end in [&t.from, &t.to] {
                if !self.screens.contains_key(end) {
                    return bad(format!("{}: unknown screen {end:?}", t.describe(i)));
                }
            }
            let from = &self.screens[&t.from];
            let p = &t.pattern;
            match t.action {
                ActionPattern::Tap | ActionPattern::Input => {
                    if !p.names_element() {
                        return bad(format!("{}: match needs \"text\" or \"id\"", t.describe(i)));
                    }
                    if !from.elements.iter().any(|e| p.selects(e)) {
                        return bad(format!("{}: no element on {:?} matches {:?}", t.describe(i), t.from, p));
                    }
                    if t.action == ActionPattern::Input && p.value.is_none() {
                        return bad(format!("{}: input match needs \"value\" (use \"*\" for any)", t.describe(i)));
                    }
                }
                ActionPattern::Scroll => {
                    if p.direction.is_none() {
                        return bad(format!("{}: scroll match needs \"direction\"", t.describe(i)));
                    }
                }
                ActionPattern::Back => {}
            }
        }
        // at most one successor per (screen, concrete action)
        for (i, a) in self.transitions.iter().enumerate() {
            for (j, b) in self.transitions.iter().enumerate().skip(i + 1) {
                if a.from != b.from || a.action != b.action {
                    continue;
                }
                let clash = match a.action {
                    ActionPattern::Back => true,
                    ActionPattern::Scroll => a.pattern.direction == b.pattern.direction,
                    ActionPattern::Tap | ActionPattern::Input => {
                        let shared = self.screens[&a.from]
                            .elements
                            .iter()
                            .any(|e| a.pattern.selects(e) && b.pattern.selects(e));
                        shared
                            && (a.action == ActionPattern::Tap
                                || a.pattern.value == b.pattern.value)
                    }
                };
                if clash {
                    return bad(format!(
                        "duplicate transition key: {} and {}",
                        a.describe(i),
                        b.describe(j)
                    ));
                }
            }
        }
        Ok(())
    }

    /// The raster for `screen_id`: a synthetic render or the referenced PNG.
    pub fn raster(&self, screen_id: &str) -> Result<RgbImage> {
        let screen = self.screen(screen_id)?;
        if screen.render == "auto" {
            return Ok(render_screen(screen_id, screen, self.size));
        }
        let path = match &self.base_dir {
            Some(dir) => dir.join(&screen.render),
            None => PathBuf::from(&screen.render),
        };
        let img = image::open(&path).map_err(|e| Error::Validation(format!("screen {screen_id:?}: {}: {e}", path.display())))?;
        let img = img.to_rgb8();
        if img.dimensions() != self.size {
            return Err(Error::Validation(format!(
                "screen {screen_id:?}: raster is {}x{}, app size is {}x{}",
                img.width(),
                img.height(),
                self.size.0,
                self.size.1
            )));
        }
        Ok(img)
    }

    /// Successor of `screen_id` under `action`; `None` means no transition.
    fn successor(&self, screen_id: &str, action: &ReplayAction, hit: Option<&SimElement>) -> Option<&Transition> {
        let from = self.transitions.iter().filter(|t| t.from == screen_id);
        match action {
            ReplayAction::Tap(TapTarget::Back) => from.into_iter().find(|t| t.action == ActionPattern::Back),
            ReplayAction::Tap(TapTarget::Element(_)) => {
                let e = hit?;
                from.into_iter()
                    .find(|t| t.action == ActionPattern::Tap && t.pattern.selects(e))
            }
            ReplayAction::Scroll(d) => from
                .into_iter()
                .find(|t| t.action == ActionPattern::Scroll && t.pattern.direction == Some(*d)),
            ReplayAction::Input { value, .. } => {
                let e = hit?;
                let candidates: Vec<&Transition> = from
                    .filter(|t| t.action == ActionPattern::Input && t.pattern.selects(e))
                    .collect();
                candidates
                    .iter()
                    .find(|t| t.pattern.value.as_deref() == Some(value.as_str()))
                    .or_else(|| candidates.iter().find(|t| t.pattern.wildcard()))
                    .copied()
            }
            ReplayAction::End => None,
        }
    }
}

fn hash_str(s: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn shade(h: u64, lo: u8, span: u8) -> Rgb<u8> {
    let c = |k: u32| lo + ((h >> k) % span as u64) as u8;
    Rgb([c(0), c(16), c(32)])
}

/// Deterministic synthetic render: a tiled background keyed by the screen id,
/// a title bar with the id, and each element filled and labelled.
pub fn render_screen(screen_id: &str, screen: &SimScreen, size: (u32, u32)) -> RgbImage {
    let (w, h) = size;
    let base = hash_str(screen_id);
    let mut img = RgbImage::from_pixel(w, h, shade(base, 120, 110));
    let (cols, rows) = (4u32, 6u32);
    for r in 0..rows {
        for c in 0..cols {
            let (x0, y0) = (c * w / cols, r * h / rows);
            let tile = Rect::new(x0, y0, (c + 1) * w / cols - x0, (r + 1) * h / rows - y0);
            let th = crate::recording::splitmix64(base ^ ((r * cols + c) as u64));
            draw::fill_rect(&mut img, tile, shade(th, 90, 150));
        }
    }
    let bar_h = (h / 12).max(9);
    let bar = shade(base.rotate_left(17), 30, 70);
    draw::fill_rect(&mut img, Rect::new(0, 0, w, bar_h), bar);
    let title = screen_id.to_ascii_uppercase();
    let scale = if draw::text_size(&title, 2).1 + 2 <= bar_h { 2 } else { 1 };
    let (_, th) = draw::text_size(&title, scale);
    draw::draw_text(&mut img, 4, bar_h.saturating_sub(th) / 2, &title, scale, Rgb([250, 250, 250]));

    for e in &screen.elements {
        let fill = if e.editable {
            Rgb([248, 248, 248])
        } else {
            shade(hash_str(&format!("{screen_id}/{}", e.id)), 40, 200)
        };
        draw::fill_rect(&mut img, e.rect, fill);
        draw::outline_rect(&mut img, e.rect, 1, Rgb([20, 20, 20]));
        if !e.text.is_empty() {
            let ink = draw::contrasting(fill);
            let scale = if draw::text_size(&e.text, 2).0 + 4 <= e.rect.width && 18 <= e.rect.height { 2 } else { 1 };
            let (tw, th) = draw::text_size(&e.text, scale);
            let x = e.rect.x + e.rect.width.saturating_sub(tw) / 2;
            let y = e.rect.y + e.rect.height.saturating_sub(th) / 2;
            draw::draw_text(&mut img, x, y, &e.text, scale, ink);
        }
    }
    img
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

fn bounds(r: Rect) -> String {
    format!("[{},{}][{},{}]", r.x, r.y, r.right(), r.bottom())
}

/// UIAutomator-style dump: a root frame holding one node per element.
pub fn hierarchy_xml(screen: &SimScreen, size: (u32, u32)) -> String {
    let mut xml = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
    if screen.elements.is_empty() {
        xml.push_str("<hierarchy rotation=\"0\"/>");
        return xml;
    }
    let _ = write!(
        xml,
        "<hierarchy rotation=\"0\"><node index=\"0\" text=\"\" resource-id=\"\" class=\"android.widget.FrameLayout\" \
         content-desc=\"\" clickable=\"false\" scrollable=\"false\" long-clickable=\"false\" bounds=\"{}\">",
        bounds(Rect::new(0, 0, size.0, size.1))
    );
    for (i, e) in screen.elements.iter().enumerate() {
        let _ = write!(
            xml,
            "<node index=\"{i}\" text=\"{}\" resource-id=\"sim:id/e{}\" class=\"{}\" content-desc=\"\" \
             clickable=\"{}\" scrollable=\"{}\" long-clickable=\"false\" editable=\"{}\" bounds=\"{}\"/>",
            xml_escape(&e.text),
            e.id,
            xml_escape(e.class_name()),
            e.clickable,
            e.scrollable,
            e.editable,
            bounds(e.rect)
        );
    }
    xml.push_str("</node></hierarchy>");
    xml
}

/// Simulator device. Back navigation uses an implicit stack of visited
/// screens; an explicit `back` transition takes precedence.
#[derive(Debug, Clone)]
pub struct SimDevice {
    app: SimApp,
    rasters: HashMap<String, Arc<RgbImage>>,
    hierarchies: HashMap<String, String>,
    current: String,
    stack: Vec<String>,
    captures: u64,
    visited: BTreeSet<String>,
}

impl SimDevice {
    /// Renders every screen up front; missing or mis-sized rasters fail here.
    pub fn new(app: SimApp) -> Result<Self> {
        let mut rasters = HashMap::new();
        let mut hierarchies = HashMap::new();
        for (id, screen) in &app.screens {
            rasters.insert(id.clone(), Arc::new(app.raster(id)?));
            hierarchies.insert(id.clone(), hierarchy_xml(screen, app.size));
        }
        let current = app.initial.clone();
        let visited = BTreeSet::from([current.clone()]);
        Ok(SimDevice {
            app,
            rasters,
            hierarchies,
            current,
            stack: Vec::new(),
            captures: 0,
            visited,
        })
    }

    pub fn app(&self) -> &SimApp {
        &self.app
    }

    pub fn current_screen(&self) -> &str {
        &self.current
    }

    pub fn raster(&self, screen_id: &str) -> Option<Arc<RgbImage>> {
        self.rasters.get(screen_id).cloned()
    }

    /// Returns to the initial screen with an empty back stack.
    pub fn reset(&mut self) {
        self.current = self.app.initial.clone();
        self.stack.clear();
        self.captures = 0;
        self.visited = BTreeSet::from([self.current.clone()]);
    }

    fn hit(&self, rect: Option<Rect>, action: &ReplayAction) -> Result<Option<&SimElement>> {
        let rect = rect.ok_or_else(|| Error::Device(format!("{action} needs a target rectangle")))?;
        let (cx, cy) = rect.center();
        let screen = self.app.screen(&self.current)?;
        Ok(screen
            .elements
            .iter()
            .filter(|e| e.rect.contains_point(cx, cy))
            .min_by_key(|e| e.rect.area()))
    }

    fn go(&mut self, to: String) {
        if to != self.current {
            let from = std::mem::replace(&mut self.current, to);
            self.stack.push(from);
        }
        self.visited.insert(self.current.clone());
    }
}

impl DeviceAdapter for SimDevice {
    fn capture(&mut self) -> Result<ScreenCapture> {
        self.captures += 1;
        Ok(ScreenCapture {
            capture_id: format!("cap{:04}-{}", self.captures, self.current),
            pixels: self.rasters[&self.current].clone(),
            hierarchy: self.hierarchies[&self.current].clone(),
            taken_at: self.captures as f64,
        })
    }

    fn act(&mut self, action: &ReplayAction, resolved_rect: Option<Rect>) -> Result<()> {
        match action {
            ReplayAction::End => Err(Error::Input("[end] has no device effect".into())),
            ReplayAction::Tap(TapTarget::Back) => {
                if let Some(t) = self.app.successor(&self.current, action, None) {
                    let to = t.to.clone();
                    if self.stack.last() == Some(&to) {
                        self.stack.pop();
                    }
                    self.current = to;
                } else if let Some(prev) = self.stack.pop() {
                    self.current = prev;
                }
                self.visited.insert(self.current.clone());
                Ok(())
            }
            ReplayAction::Tap(TapTarget::Element(_)) => {
                let hit = self.hit(resolved_rect, action)?;
                if let Some(to) = self.app.successor(&self.current, action, hit).map(|t| t.to.clone()) {
                    self.go(to);
                }
                Ok(())
            }
            ReplayAction::Scroll(_) => {
                if let Some(to) = self.app.successor(&self.current, action, None).map(|t| t.to.clone()) {
                    self.go(to);
                }
                Ok(())
            }
            ReplayAction::Input { .. } => {
                let hit = self.hit(resolved_rect, action)?;
                match hit {
                    Some(e) if e.editable => {}
                    Some(e) => {
                        return Err(Error::Device(format!(
                            "element {} ({:?}) on screen {:?} is not editable",
                            e.id, e.text, self.current
                        )))
                    }
                    None => {
                        return Err(Error::Device(format!(
                            "no element under the input target on screen {:?}",
                            self.current
                        )))
                    }
                }
                if let Some(to) = self.app.successor(&self.current, action, hit).map(|t| t.to.clone()) {
                    self.go(to);
                }
                Ok(())
            }
        }
    }

    fn bug_reached(&self) -> Option<bool> {
        Some(self.visited.iter().any(|s| self.app.bug_screens.contains(s)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::extract_elements;

    const APP: &str = r#"{
        "initial": "s0",
        "bug_screens": ["s2"],
        "screens": {
            "s0": {"elements": [{"id": 1, "text": "OK", "rect": [20, 60, 100, 40], "clickable": true},
                                {"id": 2, "text": "NAME", "rect": [20, 120, 160, 30], "editable": true}]},
            "s1": {"elements": [{"id": 1, "text": "NEXT", "rect": [20, 60, 100, 40], "clickable": true}]},
            "s2": {"elements": []}
        },
        "transitions": [
            {"from": "s0", "action": "tap", "match": {"text": "OK"}, "to": "s1"},
            {"from": "s1", "action": "tap", "match": {"id": 1}, "to": "s2"}
        ]
    }"#;

    fn device() -> SimDevice {
        SimDevice::new(SimApp::from_json(APP).unwrap()).unwrap()
    }

    #[test]
    fn load_keeps_tables() {
        let app = SimApp::from_json(APP).unwrap();
        assert_eq!(app.screens.len(), 3);
        assert_eq!(app.transitions.len(), 2);
        assert_eq!(app.initial, "s0");
        assert_eq!(app.size, DEFAULT_SIM_SIZE);
    }

    #[test]
    fn dangling_target_is_named() {
        let text = APP.replace(r#""to": "s2""#, r#""to": "X""#);
        let err = SimApp::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("\"X\""), "{err}");
    }

    #[test]
    fn duplicate_keys_rejected() {
        let text = APP.replace(
            r#"{"from": "s1", "action": "tap", "match": {"id": 1}, "to": "s2"}"#,
            r#"{"from": "s1", "action": "tap", "match": {"id": 1}, "to": "s2"},
               {"from": "s1", "action": "tap", "match": {"text": "NEXT"}, "to": "s0"}"#,
        );
        let err = SimApp::from_json(&text).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("duplicate")), "{err}");
    }

    #[test]
    fn missing_initial_rejected() {
        let text = APP.replace(r#""initial": "s0""#, r#""initial": "nowhere""#);
        assert!(SimApp::from_json(&text).unwrap_err().to_string().contains("nowhere"));
    }

    #[test]
    fn capture_matches_hierarchy_and_ids_are_fresh() {
        let mut dev = device();
        let a = dev.capture().unwrap();
        let b = dev.capture().unwrap();
        assert_ne!(a.capture_id, b.capture_id);
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.hierarchy, b.hierarchy);
        let elements = extract_elements(&a.hierarchy).unwrap();
        assert_eq!(elements.len(), 2);
        assert_eq!(elements[0].text.as_deref(), Some("OK"));
        assert!(elements[1].editable);
        for e in &elements {
            assert!(e.rect.fits_within(a.pixels.width(), a.pixels.height()));
        }
    }

    #[test]
    fn tap_back_and_self_loops() {
        let mut dev = device();
        dev.act(&ReplayAction::Tap(TapTarget::Element(1)), Some(Rect::new(20, 60, 100, 40))).unwrap();
        assert_eq!(dev.current_screen(), "s1");
        dev.act(&ReplayAction::Tap(TapTarget::Back), None).unwrap();
        assert_eq!(dev.current_screen(), "s0");
        dev.act(&ReplayAction::Tap(TapTarget::Back), None).unwrap();
        assert_eq!(dev.current_screen(), "s0");
        dev.act(&ReplayAction::Scroll(Direction::Down), None).unwrap();
        assert_eq!(dev.current_screen(), "s0");
        dev.act(&ReplayAction::Tap(TapTarget::Element(9)), Some(Rect::new(200, 300, 4, 4))).unwrap();
        assert_eq!(dev.current_screen(), "s0");
        assert_eq!(dev.bug_reached(), Some(false));
    }

    #[test]
    fn input_on_non_editable_is_device_error() {
        let mut dev = device();
        let action = ReplayAction::Input {
            target: 1,
            value: "x".into(),
        };
        assert!(matches!(dev.act(&action, Some(Rect::new(20, 60, 100, 40))), Err(Error::Device(_))));
        dev.act(
            &ReplayAction::Input {
                target: 2,
                value: "x".into(),
            },
            Some(Rect::new(20, 120, 160, 30)),
        )
        .unwrap();
        assert_eq!(dev.current_screen(), "s0");
    }

    #[test]
    fn bug_screen_visit_is_remembered() {
        let mut dev = device();
        let tap = ReplayAction::Tap(TapTarget::Element(1));
        dev.act(&tap, Some(Rect::new(20, 60, 100, 40))).unwrap();
        dev.act(&tap, Some(Rect::new(20, 60, 100, 40))).unwrap();
        assert_eq!(dev.current_screen(), "s2");
        dev.act(&ReplayAction::Tap(TapTarget::Back), None).unwrap();
        assert_eq!(dev.bug_reached(), Some(true));
    }

    #[test]
    fn renders_differ_between_screens_and_are_stable() {
        let app = SimApp::from_json(APP).unwrap();
        let a = app.raster("s0").unwrap();
        assert_eq!(a, app.raster("s0").unwrap());
        assert_ne!(a, app.raster("s1").unwrap());
        assert_eq!(a.dimensions(), DEFAULT_SIM_SIZE);
    }
}
