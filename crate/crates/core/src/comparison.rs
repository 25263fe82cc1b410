//! Region-of-interest selection and functional state comparison.

use std::sync::Arc;
use std::time::Instant;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::draw;
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::perception::{compose_dual_view, detect_regions, DetectionParams, Region, RegionDetector};
use crate::segmentation::ActionScene;
use crate::vlm::{build_compare_prompt, build_roi_prompt, Parsed, Phase, UsageRecord, VlmClient};

pub const ROI_OUTLINE: u32 = 4;
pub const ROI_COLOR: Rgb<u8> = Rgb([255, 0, 255]);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSelection {
    pub scene: usize,
    pub region: Region,
    /// Every candidate shown to the model.
    pub candidates: Vec<Region>,
    pub raw_response: String,
    pub confidence: f64,
    /// True when detection found nothing and the whole frame stands in.
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyVerdict {
    pub consistent: bool,
    pub confidence: f64,
    pub scene: usize,
    pub screen_id: String,
    pub raw_response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareOptions {
    /// Attach the recorded post-action frame as a middle image.
    pub include_post_frame: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            include_post_frame: true,
        }
    }
}

/// The frame with a thick box around the ROI; pixels outside the box are kept.
pub fn emphasize_roi(pixels: &RgbImage, rect: Rect) -> RgbImage {
    let mut out = pixels.clone();
    if let Some(r) = rect.clamp_to(out.width(), out.height()) {
        draw::outline_rect(&mut out, r, ROI_OUTLINE, ROI_COLOR);
    }
    out
}

/// Detects candidate regions on the scene's first frame and asks the model
/// which one the user touched. Returns the selection and the usage records of
/// the detection and selection calls.
pub fn select_roi(
    scene: &ActionScene,
    scene_index: usize,
    detector: &dyn RegionDetector,
    client: &VlmClient,
    params: &DetectionParams,
) -> Result<(RoiSelection, Vec<UsageRecord>)> {
    let started = Instant::now();
    let regions = detect_regions(&scene.first_frame, detector, params)?;
    let latency = detector.fixed_latency().unwrap_or_else(|| started.elapsed().as_secs_f64());
    let mut usage = vec![UsageRecord {
        latency,
        ..UsageRecord::zero(Phase::RegionDetection)
    }];

    if regions.is_empty() {
        let (w, h) = (scene.first_frame.width(), scene.first_frame.height());
        let region = Region {
            index: 1,
            rect: Rect::new(0, 0, w, h),
            score: 1.0,
            phrase: "full frame".into(),
        };
        let selection = RoiSelection {
            scene: scene_index,
            region: region.clone(),
            candidates: vec![region],
            raw_response: String::new(),
            confidence: 1.0,
            synthetic: true,
        };
        return Ok((selection, usage));
    }

    let composite = compose_dual_view(&scene.first_frame.pixels, &scene.last_frame.pixels, &regions)?;
    let request = build_roi_prompt(Some(Arc::new(composite)), regions.len())?;
    let k = regions.len();
    let check = move |p: &Parsed| match p {
        Parsed::RegionIndex(i) if (1..=k).contains(i) => Ok(()),
        Parsed::RegionIndex(i) => Err(format!("Region {i} is not a label; choose between Region 1 and Region {k}")),
        other => Err(format!("unexpected answer {other:?}")),
    };
    let response = client.invoke_validated(&request, &check).map_err(|e| match e {
        Error::Invocation { attempts, last_error } => Error::Selection(format!(
            "scene {scene_index}: {last_error} (answers: {attempts:?})"
        )),
        other => other,
    })?;
    usage.push(response.usage.clone());
    let Some(Parsed::RegionIndex(index)) = response.parsed else {
        return Err(Error::Selection(format!("scene {scene_index}: no region index")));
    };
    let region = regions[index - 1].clone();
    Ok((
        RoiSelection {
            scene: scene_index,
            region,
            candidates: regions,
            raw_response: response.text,
            confidence: response.confidence,
            synthetic: false,
        },
        usage,
    ))
}

/// Asks whether the device screen is functionally consistent with the scene's
/// pre-action frame. Both screens are sent whole.
pub fn compare_state(
    scene: &ActionScene,
    roi: &RoiSelection,
    current_screen: Arc<RgbImage>,
    screen_id: &str,
    client: &VlmClient,
    options: &CompareOptions,
) -> Result<(ConsistencyVerdict, UsageRecord)> {
    let emphasized = Arc::new(emphasize_roi(&scene.first_frame.pixels, roi.region.rect));
    let post = options
        .include_post_frame
        .then(|| scene.last_frame.pixels.clone());
    let request = build_compare_prompt(Some(emphasized), Some(current_screen), post)?;
    let response = client.invoke(&request)?;
    let Some(Parsed::YesNo(consistent)) = response.parsed else {
        return Err(Error::Parse("comparison answer is not YES/NO".into()));
    };
    Ok((
        ConsistencyVerdict {
            consistent,
            confidence: response.confidence,
            scene: roi.scene,
            screen_id: screen_id.to_string(),
            raw_response: response.text,
        },
        response.usage,
    ))
}
