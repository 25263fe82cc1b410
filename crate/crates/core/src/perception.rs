//! Candidate regions on recorded frames, element lists from device view
//! hierarchies, set-of-mark annotation and the before/after composite.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use image::{Rgb, RgbImage};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::draw;
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::recording::{self, Frame};

/// A candidate interaction region on a recorded frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// 1-based label in reading order.
    pub index: usize,
    pub rect: Rect,
    pub score: f64,
    pub phrase: String,
}

/// Raw detector output before thresholding and suppression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub rect: Rect,
    pub score: f64,
    pub phrase: String,
}

/// Open-vocabulary detector: boxes for text queries.
pub trait RegionDetector: Send + Sync {
    fn detect(&self, pixels: &RgbImage, queries: &[String]) -> Result<Vec<Detection>>;

    /// Latency to record instead of wall-clock time (fixtures report zero).
    fn fixed_latency(&self) -> Option<f64> {
        None
    }
}

pub const DEFAULT_QUERIES: [&str; 8] = [
    "button",
    "text field",
    "search bar",
    "icon",
    "list item",
    "tab",
    "checkbox",
    "layout",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionParams {
    pub queries: Vec<String>,
    pub score_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        DetectionParams {
            queries: DEFAULT_QUERIES.iter().map(|q| q.to_string()).collect(),
            score_threshold: 0.3,
            iou_threshold: 0.5,
        }
    }
}

/// Greedy non-maximum suppression; input order breaks score ties.
/// Returns the indices of the surviving detections.
pub fn non_max_suppression(detections: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| detections[k].rect.iou(&detections[i].rect) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// Thresholds, clips, suppresses and re-indexes detections 1..K in reading
/// order (top edge, then left edge, then original detector order).
pub fn finalize_regions(
    detections: Vec<Detection>,
    frame_width: u32,
    frame_height: u32,
    params: &DetectionParams,
) -> Vec<Region> {
    let candidates: Vec<Detection> = detections
        .into_iter()
        .filter(|d| d.score.is_finite() && d.score >= params.score_threshold)
        .filter_map(|d| {
            d.rect.clamp_to(frame_width, frame_height).map(|rect| Detection {
                rect,
                score: d.score.clamp(0.0, 1.0),
                phrase: d.phrase,
            })
        })
        .collect();
    let mut kept = non_max_suppression(&candidates, params.iou_threshold);
    kept.sort_by_key(|&i| (candidates[i].rect.y, candidates[i].rect.x, i));
    kept.into_iter()
        .enumerate()
        .map(|(k, i)| Region {
            index: k + 1,
            rect: candidates[i].rect,
            score: candidates[i].score,
            phrase: candidates[i].phrase.clone(),
        })
        .collect()
}

pub fn detect_regions(
    frame: &Frame,
    detector: &dyn RegionDetector,
    params: &DetectionParams,
) -> Result<Vec<Region>> {
    if params.queries.is_empty() {
        return Err(Error::Input("detector query list is empty".into()));
    }
    let raw = detector.detect(&frame.pixels, &params.queries)?;
    Ok(finalize_regions(raw, frame.width(), frame.height(), params))
}

/// Fixture detector: scripted detections keyed by raster fingerprint, with a
/// fallback list for unknown frames. Uniform rasters yield nothing.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScriptedDetector {
    #[serde(default)]
    pub default: Vec<Detection>,
    #[serde(default)]
    pub frames: HashMap<String, Vec<Detection>>,
}

impl ScriptedDetector {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn with_default(default: Vec<Detection>) -> Self {
        ScriptedDetector {
            default,
            frames: HashMap::new(),
        }
    }
}

impl RegionDetector for ScriptedDetector {
    fn fixed_latency(&self) -> Option<f64> {
        Some(0.0)
    }

    fn detect(&self, pixels: &RgbImage, _queries: &[String]) -> Result<Vec<Detection>> {
        if let Some(d) = self.frames.get(&recording::fingerprint(pixels)) {
            return Ok(d.clone());
        }
        let first = pixels.get_pixel(0, 0);
        if pixels.pixels().all(|p| p == first) {
            return Ok(Vec::new());
        }
        Ok(self.default.clone())
    }
}

/// Client for a grounding-detector service.
///
/// `POST {endpoint}` with `{"image": "<base64 PNG>", "queries": [str]}`; the
/// service answers `{"detections": [{"rect": [x, y, w, h], "score": f, "phrase": str}]}`.
#[derive(Debug, Clone)]
pub struct HttpDetector {
    pub endpoint: String,
    pub api_key: Option<String>,
}

#[derive(Deserialize)]
struct DetectorReply {
    detections: Vec<Detection>,
}

impl RegionDetector for HttpDetector {
    fn detect(&self, pixels: &RgbImage, queries: &[String]) -> Result<Vec<Detection>> {
        let image = recording::encode_png_base64(pixels);
        let mut req = ureq::post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let reply: DetectorReply = req
            .send_json(serde_json::json!({ "image": image, "queries": queries }))
            .map_err(|e| Error::backend("http-detector", e))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::backend("http-detector", e))?;
        Ok(reply.detections)
    }
}

/// An actionable element from a device view hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuiElement {
    pub mark_id: u32,
    pub rect: Rect,
    pub text: Option<String>,
    pub element_class: String,
    pub clickable: bool,
    pub editable: bool,
    pub scrollable: bool,
}

fn bounds_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*\[\s*(-?\d+)\s*,\s*(-?\d+)\s*\]\s*\[\s*(-?\d+)\s*,\s*(-?\d+)\s*\]\s*$")
            .expect("static regex")
    })
}

/// Parses `"[x1,y1][x2,y2]"`; negative coordinates clamp to zero.
pub fn parse_bounds(bounds: &str) -> Result<Rect> {
    let caps = bounds_re()
        .captures(bounds)
        .ok_or_else(|| Error::Parse(format!("malformed bounds {bounds:?}")))?;
    let n = |i: usize| caps[i].parse::<i64>().map(|v| v.max(0) as u32);
    let (x1, y1, x2, y2) = (n(1), n(2), n(3), n(4));
    let (Ok(x1), Ok(y1), Ok(x2), Ok(y2)) = (x1, y1, x2, y2) else {
        return Err(Error::Parse(format!("malformed bounds {bounds:?}")));
    };
    Rect::from_corners(x1, y1, x2, y2)
        .ok_or_else(|| Error::Parse(format!("inverted bounds {bounds:?}")))
}

fn flag(node: roxmltree::Node, name: &str) -> bool {
    node.attribute(name) == Some("true")
}

fn is_editable(node: roxmltree::Node) -> bool {
    flag(node, "editable") || node.attribute("class").is_some_and(|c| c.contains("EditText"))
}

fn is_interactive(node: roxmltree::Node) -> bool {
    flag(node, "clickable") || flag(node, "scrollable") || flag(node, "long-clickable") || is_editable(node)
}

fn is_hidden(node: roxmltree::Node) -> bool {
    node.attribute("visible-to-user") == Some("false")
}

fn element_children<'a, 'i>(node: roxmltree::Node<'a, 'i>) -> Vec<roxmltree::Node<'a, 'i>> {
    node.children()
        .filter(|c| c.is_element() && c.tag_name().name() == "node" && !is_hidden(*c))
        .collect()
}

/// Depth-first extraction of actionable elements from a UIAutomator-style dump.
///
/// Starting below `<hierarchy>`, a non-interactive node with exactly one child
/// is collapsed into that child. Leaves and interactive nodes become elements
/// (interactive containers still have their children visited). Mark ids are
/// assigned 1, 2, ... in pre-order; nodes with empty bounds and nodes marked
/// `visible-to-user="false"` are skipped.
pub fn extract_elements(hierarchy: &str) -> Result<Vec<GuiElement>> {
    let doc = roxmltree::Document::parse(hierarchy)
        .map_err(|e| Error::Parse(format!("view hierarchy: {e}")))?;
    let root = doc.root_element();
    let tops = if root.tag_name().name() == "node" {
        if is_hidden(root) {
            Vec::new()
        } else {
            vec![root]
        }
    } else {
        element_children(root)
    };
    let mut out = Vec::new();
    for top in tops {
        visit(top, &mut out)?;
    }
    Ok(out)
}

fn visit(node: roxmltree::Node, out: &mut Vec<GuiElement>) -> Result<()> {
    let children = element_children(node);
    let interactive = is_interactive(node);
    if children.len() == 1 && !interactive {
        return visit(children[0], out);
    }
    if children.is_empty() || interactive {
        let rect = match node.attribute("bounds") {
            Some(b) => parse_bounds(b)?,
            None => return Err(Error::Parse("node without bounds attribute".into())),
        };
        if !rect.is_empty() {
            let text = node
                .attribute("text")
                .filter(|t| !t.is_empty())
                .or_else(|| node.attribute("content-desc").filter(|t| !t.is_empty()))
                .map(str::to_string);
            out.push(GuiElement {
                mark_id: out.len() as u32 + 1,
                rect,
                text,
                element_class: node.attribute("class").unwrap_or("").to_string(),
                clickable: flag(node, "clickable"),
                editable: is_editable(node),
                scrollable: flag(node, "scrollable"),
            });
        }
    }
    for child in children {
        visit(child, out)?;
    }
    Ok(())
}

/// A screenshot with numbered element marks drawn on it.
#[derive(Debug, Clone)]
pub struct AnnotatedScreen {
    pub pixels: Arc<RgbImage>,
    pub elements: Vec<GuiElement>,
    pub raw_pixels: Arc<RgbImage>,
}

impl AnnotatedScreen {
    pub fn element(&self, mark_id: u32) -> Option<&GuiElement> {
        self.elements.iter().find(|e| e.mark_id == mark_id)
    }
}

const MARK_PALETTE: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [0, 128, 128],
];
pub const MARK_OUTLINE: u32 = 2;
const MARK_SCALE: u32 = 2;
const CHIP_PAD: u32 = 2;

/// Placement of a mark label chip: above the element's top-left corner when
/// there is room, otherwise inside it.
pub fn mark_chip_rect(label: &str, rect: Rect, canvas: (u32, u32)) -> Rect {
    let (tw, th) = draw::text_size(label, MARK_SCALE);
    let (cw, ch) = (tw + 2 * CHIP_PAD, th + 2 * CHIP_PAD);
    let x = rect.x.min(canvas.0.saturating_sub(cw));
    if rect.y >= ch {
        Rect::new(x, rect.y - ch, cw, ch)
    } else {
        Rect::new(x, rect.y, cw, ch)
    }
}

/// Draws an outline and a numbered chip for every element; the raw raster is kept.
pub fn annotate_marks(raw: Arc<RgbImage>, elements: Vec<GuiElement>) -> Result<AnnotatedScreen> {
    let mut elements = elements;
    elements.sort_by_key(|e| e.mark_id);
    if elements.is_empty() {
        return Ok(AnnotatedScreen {
            pixels: raw.clone(),
            elements,
            raw_pixels: raw,
        });
    }
    let (w, h) = raw.dimensions();
    let mut img = (*raw).clone();
    for e in &elements {
        if !e.rect.fits_within(w, h) {
            return Err(Error::Input(format!(
                "mark {} at {:?} lies outside the {w}x{h} screen",
                e.mark_id, e.rect
            )));
        }
    }
    for e in &elements {
        let color = Rgb(MARK_PALETTE[(e.mark_id as usize - 1) % MARK_PALETTE.len()]);
        draw::outline_rect(&mut img, e.rect, MARK_OUTLINE, color);
    }
    for e in &elements {
        let color = Rgb(MARK_PALETTE[(e.mark_id as usize - 1) % MARK_PALETTE.len()]);
        let label = e.mark_id.to_string();
        let chip = mark_chip_rect(&label, e.rect, (w, h));
        draw::fill_rect(&mut img, chip, color);
        draw::draw_text(
            &mut img,
            chip.x + CHIP_PAD,
            chip.y + CHIP_PAD,
            &label,
            MARK_SCALE,
            draw::contrasting(color),
        );
    }
    Ok(AnnotatedScreen {
        pixels: Arc::new(img),
        elements,
        raw_pixels: raw,
    })
}

pub const DIVIDER_WIDTH: u32 = 8;
pub const HEADER_HEIGHT: u32 = 24;
const REGION_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

/// Before/after composite: `first | divider | last` under a labeled header,
/// with region boxes and `Region k` labels on the left half only.
pub fn compose_dual_view(first: &RgbImage, last: &RgbImage, regions: &[Region]) -> Result<RgbImage> {
    if first.dimensions() != last.dimensions() {
        return Err(Error::Input(format!(
            "dual view needs equal frames, got {:?} and {:?}",
            first.dimensions(),
            last.dimensions()
        )));
    }
    let (w, h) = first.dimensions();
    let mut out = RgbImage::from_pixel(2 * w + DIVIDER_WIDTH, h + HEADER_HEIGHT, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    let scale = if draw::text_size("BEFORE", 2).0 + 8 <= w { 2 } else { 1 };
    draw::draw_text(&mut out, 4, 5, "BEFORE", scale, black);
    draw::draw_text(&mut out, w + DIVIDER_WIDTH + 4, 5, "AFTER", scale, black);
    draw::fill_rect(&mut out, Rect::new(w, 0, DIVIDER_WIDTH, h + HEADER_HEIGHT), Rgb([64, 64, 64]));
    image::imageops::replace(&mut out, first, 0, HEADER_HEIGHT as i64);
    image::imageops::replace(&mut out, last, (w + DIVIDER_WIDTH) as i64, HEADER_HEIGHT as i64);

    let left = Rect::new(0, HEADER_HEIGHT, w, h);
    for r in regions {
        let Some(rect) = r.rect.clamp_to(w, h) else { continue };
        let shifted = Rect::new(rect.x, rect.y + HEADER_HEIGHT, rect.width, rect.height);
        draw::outline_rect(&mut out, shifted, 2, REGION_COLOR);
        let label = format!("Region {}", r.index);
        let (tw, th) = draw::text_size(&label, 1);
        let chip_w = (tw + 4).min(w);
        let chip = Rect::new(shifted.x.min(w.saturating_sub(chip_w)), shifted.y, chip_w, th + 4);
        if let Some(chip) = chip.intersection(&left) {
            draw::fill_rect(&mut out, chip, REGION_COLOR);
            draw::draw_text(&mut out, chip.x + 2, chip.y + 2, &label, 1, Rgb([255, 255, 255]));
            // Glyphs may spill past the left half on tiny frames; repaint the divider.
            draw::fill_rect(&mut out, Rect::new(w, 0, DIVIDER_WIDTH, h + HEADER_HEIGHT), Rgb([64, 64, 64]));
        }
    }
    Ok(out)
}
