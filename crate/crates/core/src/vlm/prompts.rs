//! Request builders for the three prompt families. Prompt texts are
//! versioned resource files under `prompts/`.

use std::sync::Arc;

use image::RgbImage;

use super::{CaptionedImage, Phase, ResponseSchema, VlmRequest};
use crate::error::{Error, Result};
use crate::segmentation::ActionType;

pub const PROMPT_VERSION: &str = "v1";

const ROI_SELECTION: &str = include_str!("../../prompts/v1/roi_selection.txt");
const STATE_COMPARISON: &str = include_str!("../../prompts/v1/state_comparison.txt");
const ACTION_SPACE: &str = include_str!("../../prompts/v1/action_space.txt");
const ACTION_CONSISTENT: &str = include_str!("../../prompts/v1/action_consistent.txt");
const ACTION_INCONSISTENT: &str = include_str!("../../prompts/v1/action_inconsistent.txt");
const ACTION_COMPLETION: &str = include_str!("../../prompts/v1/action_completion.txt");

/// Tags on the first line of each prompt; scripted fixtures match on these.
pub const TAG_ROI: &str = "Task: region-selection";
pub const TAG_COMPARE: &str = "Task: state-comparison";
pub const TAG_REPLAY: &str = "Task: replay-action";
pub const TAG_EXPLORE: &str = "Task: explore-action";
pub const TAG_COMPLETION: &str = "Task: completion-check";

fn required(image: Option<Arc<RgbImage>>, what: &str) -> Result<Arc<RgbImage>> {
    image.ok_or_else(|| Error::Input(format!("{what} image is missing")))
}

fn region_list(count: usize) -> String {
    let labels: Vec<String> = (1..=count).map(|k| format!("Region {k}")).collect();
    match labels.as_slice() {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

pub fn build_roi_prompt(composite: Option<Arc<RgbImage>>, region_count: usize) -> Result<VlmRequest> {
    if region_count == 0 {
        return Err(Error::Input("region selection needs at least one region".into()));
    }
    let composite = required(composite, "dual-view composite")?;
    let prompt_text = ROI_SELECTION
        .replace("{region_list}", &region_list(region_count))
        .replace("{region_count}", &region_count.to_string());
    Ok(VlmRequest {
        images: vec![CaptionedImage::new("BEFORE | AFTER composite", composite)],
        prompt_text,
        max_output_tokens: ResponseSchema::RegionIndex.default_max_tokens(),
        schema: ResponseSchema::RegionIndex,
        phase: Phase::RoiSelection,
    })
}

/// Two-image comparison (recorded frame with the ROI emphasized, current
/// screen), or three images when the recorded post-action frame is attached.
pub fn build_compare_prompt(
    roi_frame: Option<Arc<RgbImage>>,
    current_screen: Option<Arc<RgbImage>>,
    post_frame: Option<Arc<RgbImage>>,
) -> Result<VlmRequest> {
    let roi_frame = required(roi_frame, "recorded frame")?;
    let current = required(current_screen, "current screen")?;
    let mut images = vec![CaptionedImage::new("recorded screen, ROI highlighted", roi_frame)];
    let post_line = if let Some(post) = post_frame {
        images.push(CaptionedImage::new("recorded screen after the action", post));
        "Image 2 is the recorded screen right after the action.\n"
    } else {
        ""
    };
    images.push(CaptionedImage::new("current device screen", current));
    Ok(VlmRequest {
        images,
        prompt_text: STATE_COMPARISON.replace("{post_frame_line}", post_line),
        max_output_tokens: ResponseSchema::YesNo.default_max_tokens(),
        schema: ResponseSchema::YesNo,
        phase: Phase::StateComparison,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionPromptMode {
    /// Device matches the recording: replay the recorded action.
    Consistent,
    /// Device differs: explore towards the recorded state.
    Inconsistent,
    /// Consistent-mode turn after the last scene, expected to answer `[end]`.
    Completion,
}

fn mark_list(marks: &[u32]) -> String {
    if marks.is_empty() {
        "none".to_string()
    } else {
        marks.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")
    }
}

/// `images` are, for consistent and completion mode: the ROI-highlighted first
/// frame, the last frame and the annotated current screen; for inconsistent
/// mode: the first frame and the annotated current screen.
pub fn build_action_prompt(
    mode: ActionPromptMode,
    images: Vec<Arc<RgbImage>>,
    hinted_action: Option<ActionType>,
    marks: &[u32],
) -> Result<VlmRequest> {
    let (template, captions): (&str, &[&str]) = match mode {
        ActionPromptMode::Consistent => (
            ACTION_CONSISTENT,
            &["recorded first frame, ROI highlighted", "recorded last frame", "current screen with marks"],
        ),
        ActionPromptMode::Completion => (
            ACTION_COMPLETION,
            &["recorded first frame, ROI highlighted", "recorded last frame", "current screen with marks"],
        ),
        ActionPromptMode::Inconsistent => (
            ACTION_INCONSISTENT,
            &["recorded first frame", "current screen with marks"],
        ),
    };
    if images.len() != captions.len() {
        return Err(Error::Input(format!(
            "{mode:?} action prompt takes {} images, got {}",
            captions.len(),
            images.len()
        )));
    }
    let mut prompt_text = template
        .replace("{action_space}", ACTION_SPACE)
        .replace("{marks}", &mark_list(marks));
    if mode == ActionPromptMode::Consistent {
        let hint = hinted_action
            .ok_or_else(|| Error::Input("consistent action prompt needs a hinted action".into()))?;
        prompt_text = prompt_text.replace("{hinted_action}", hint.as_str());
    }
    Ok(VlmRequest {
        images: images
            .into_iter()
            .zip(captions)
            .map(|(img, cap)| CaptionedImage::new(*cap, img))
            .collect(),
        prompt_text,
        max_output_tokens: ResponseSchema::Action.default_max_tokens(),
        schema: ResponseSchema::Action,
        phase: Phase::ActionInference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> Arc<RgbImage> {
        Arc::new(RgbImage::new(2, 2))
    }

    #[test]
    fn roi_prompt_enumerates_regions() {
        let req = build_roi_prompt(Some(img()), 3).unwrap();
        for k in 1..=3 {
            assert!(req.prompt_text.contains(&format!("Region {k}")));
        }
        assert!(!req.prompt_text.contains("Region 4"));
        assert!(req.prompt_text.starts_with(TAG_ROI));
        assert_eq!(req.images.len(), 1);
    }

    #[test]
    fn roi_prompt_single_region_keeps_schema() {
        let req = build_roi_prompt(Some(img()), 1).unwrap();
        assert_eq!(req.schema, ResponseSchema::RegionIndex);
        assert!(req.prompt_text.contains("Region 1"));
    }

    #[test]
    fn roi_prompt_preconditions() {
        assert!(matches!(build_roi_prompt(None, 2), Err(Error::Input(_))));
        assert!(matches!(build_roi_prompt(Some(img()), 0), Err(Error::Input(_))));
    }

    #[test]
    fn compare_prompt_shape() {
        let req = build_compare_prompt(Some(img()), Some(img()), None).unwrap();
        assert_eq!(req.images.len(), 2);
        assert_eq!(req.schema, ResponseSchema::YesNo);
        assert_eq!(req.max_output_tokens, 16);
        assert!(req.prompt_text.contains("[YES/NO]"));
        assert!(!req.prompt_text.contains("Image 2 is"));
        let with_post = build_compare_prompt(Some(img()), Some(img()), Some(img())).unwrap();
        assert_eq!(with_post.images.len(), 3);
        assert!(with_post.prompt_text.contains("Image 2 is"));
        assert!(build_compare_prompt(None, Some(img()), None).is_err());
        assert!(build_compare_prompt(Some(img()), None, None).is_err());
    }

    #[test]
    fn consistent_prompt_lists_action_space() {
        let req = build_action_prompt(
            ActionPromptMode::Consistent,
            vec![img(), img(), img()],
            Some(ActionType::Tap),
            &[1, 2, 3],
        )
        .unwrap();
        assert!(req.prompt_text.contains("[tap] [element/back]"));
        assert!(req.prompt_text.contains("[scroll] [direction]"));
        assert!(req.prompt_text.contains("[input] [element] [value]"));
        assert!(req.prompt_text.contains("[end]"));
        assert!(req.prompt_text.contains("appears to be a tap"));
        assert!(req.prompt_text.contains("valid marks: 1, 2, 3"));
        assert_eq!(req.max_output_tokens, 128);
        assert!(!req.prompt_text.contains('{'));
    }

    #[test]
    fn inconsistent_prompt_has_no_hint() {
        let req = build_action_prompt(
            ActionPromptMode::Inconsistent,
            vec![img(), img()],
            Some(ActionType::Scroll),
            &[],
        )
        .unwrap();
        assert!(!req.prompt_text.contains("appears to be"));
        assert!(!req.prompt_text.contains("scroll.") && !req.prompt_text.contains("a scroll"));
        assert!(req.prompt_text.contains("valid marks: none"));
        assert!(!req.prompt_text.contains('{'));
    }

    #[test]
    fn image_count_is_checked() {
        let err = build_action_prompt(
            ActionPromptMode::Consistent,
            vec![img(), img()],
            Some(ActionType::Tap),
            &[1],
        );
        assert!(matches!(err, Err(Error::Input(_))));
        let err = build_action_prompt(ActionPromptMode::Inconsistent, vec![img()], None, &[1]);
        assert!(matches!(err, Err(Error::Input(_))));
        let err = build_action_prompt(ActionPromptMode::Consistent, vec![img(), img(), img()], None, &[1]);
        assert!(matches!(err, Err(Error::Input(_))));
    }
}
