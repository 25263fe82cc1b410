//! Synthetic recordings with known action boundaries and types.
//!
//! Each screen is a tall page of random colour blocks under a fixed status
//! bar. A tap swaps in a new page,
//! a scroll moves the viewport by decreasing steps, and an input slides up a
//! keyboard over the lower part and then types a few characters into a field.
//! Every frame gets independent pixel jitter. Keyboard frames are registered
//! in a [`ScriptedOcr`] so that OCR reports keyboard rows for exactly those
//! frames.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::device::SimApp;
use crate::error::Result;
use crate::geometry::Rect;
use crate::recording::Recording;
use crate::segmentation::{ActionType, OcrToken, SceneList, SceneRecord, ScriptedOcr};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub width: u32,
    pub height: u32,
    pub block: u32,
    pub min_actions: usize,
    pub max_actions: usize,
    /// Stable frames between actions, inclusive range.
    pub min_gap: usize,
    pub max_gap: usize,
    /// Per-pixel jitter amplitude in intensity levels.
    pub jitter: u8,
    /// Viewport steps of one scroll gesture, in pixels.
    pub scroll_steps: Vec<u32>,
    pub fps: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            width: 72,
            height: 128,
            block: 12,
            min_actions: 5,
            max_actions: 15,
            min_gap: 5,
            max_gap: 9,
            jitter: 3,
            scroll_steps: vec![18, 12, 8, 5, 3, 2],
            fps: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthRecording {
    pub recording: Recording,
    pub truth: SceneList,
    /// OCR fixture that sees a keyboard on exactly the keyboard frames.
    pub ocr: ScriptedOcr,
}

const STATUS_BAR: u32 = 10;
const PAGE_SCREENS: u32 = 5;
pub const KEYBOARD_TEXT: &str = "qwertyuiop asdfghjkl zxcvbnm";

#[derive(Clone)]
struct View {
    page: RgbImage,
    bar: Rgb<u8>,
    offset: u32,
    /// Typed characters when the keyboard is up.
    keyboard: Option<usize>,
}

fn random_page(rng: &mut ChaCha8Rng, p: &SynthParams) -> (RgbImage, Rgb<u8>) {
    let h = p.height * PAGE_SCREENS;
    let cols = p.width.div_ceil(p.block);
    let rows = h.div_ceil(p.block);
    let colors: Vec<Rgb<u8>> = (0..cols * rows)
        .map(|_| Rgb([rng.gen(), rng.gen(), rng.gen()]))
        .collect();
    let page = RgbImage::from_fn(p.width, h, |x, y| colors[((y / p.block) * cols + x / p.block) as usize]);
    let bar = Rgb([rng.gen_range(0..80), rng.gen_range(0..80), rng.gen_range(0..80)]);
    (page, bar)
}

fn keyboard_rect(p: &SynthParams) -> Rect {
    let top = p.height * 2 / 5;
    Rect::new(0, top, p.width, p.height - top)
}

fn render(view: &View, p: &SynthParams) -> RgbImage {
    let mut img = RgbImage::from_fn(p.width, p.height, |x, y| {
        if y < STATUS_BAR {
            view.bar
        } else {
            *view.page.get_pixel(x, y - STATUS_BAR + view.offset)
        }
    });
    if let Some(typed) = view.keyboard {
        let kb = keyboard_rect(p);
        let key_w = (p.width / 10).max(3);
        let key_h = (kb.height / 4).max(3);
        for y in kb.y..kb.bottom() {
            for x in kb.x..kb.right() {
                let (kx, ky) = ((x - kb.x) % key_w, (y - kb.y) % key_h);
                let gap = kx < 2 || ky < 2;
                img.put_pixel(x, y, if gap { Rgb([15, 15, 20]) } else { Rgb([240, 240, 245]) });
            }
        }
        // the text field and its characters, just above the keyboard
        let field = Rect::new(2, kb.y.saturating_sub(10), p.width - 4, 8);
        crate::draw::fill_rect(&mut img, field, Rgb([250, 250, 250]));
        for c in 0..typed as u32 {
            let x = field.x + 1 + c * 4;
            if x + 3 <= field.right() {
                crate::draw::fill_rect(&mut img, Rect::new(x, field.y + 2, 3, 4), Rgb([10, 10, 10]));
            }
        }
    }
    img
}

fn jitter(img: &RgbImage, amplitude: u8, rng: &mut ChaCha8Rng) -> RgbImage {
    if amplitude == 0 {
        return img.clone();
    }
    let a = amplitude as i16;
    let mut out = img.clone();
    for px in out.pixels_mut() {
        for c in px.0.iter_mut() {
            *c = (*c as i16 + rng.gen_range(-a..=a)).clamp(0, 255) as u8;
        }
    }
    out
}

struct Builder<'a> {
    p: &'a SynthParams,
    rng: ChaCha8Rng,
    clean: Vec<RgbImage>,
    keyboard: Vec<bool>,
}

impl Builder<'_> {
    fn push(&mut self, img: RgbImage, keyboard: bool) {
        self.clean.push(img);
        self.keyboard.push(keyboard);
    }

    fn hold(&mut self, view: &View, frames: usize) {
        let img = render(view, self.p);
        for _ in 0..frames {
            self.push(img.clone(), view.keyboard.is_some());
        }
    }

    fn gap(&mut self, view: &View) {
        let n = self.rng.gen_range(self.p.min_gap..=self.p.max_gap);
        self.hold(view, n);
    }

    fn last(&self) -> usize {
        self.clean.len() - 1
    }
}

/// Generates one recording from `seed`. The action sequence, screens and
/// noise are all drawn from the seed.
pub fn generate(seed: u64, p: &SynthParams) -> Result<SynthRecording> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_actions = rng.gen_range(p.min_actions..=p.max_actions);
    let (page, bar) = random_page(&mut rng, p);
    let mut view = View {
        page,
        bar,
        offset: 0,
        keyboard: None,
    };
    let mut b = Builder {
        p,
        rng,
        clean: Vec::new(),
        keyboard: Vec::new(),
    };
    let mut truth = SceneList::default();
    let max_offset = p.height * PAGE_SCREENS - (p.height - STATUS_BAR);
    let travel: u32 = p.scroll_steps.iter().sum();

    b.gap(&view);
    let mut previous = None;
    for _ in 0..n_actions {
        let kind = if previous == Some(ActionType::Input) {
            ActionType::Tap
        } else {
            ActionType::ALL[b.rng.gen_range(0..3)]
        };
        let boundary = b.last();
        let end;
        match kind {
            ActionType::Tap => {
                let (page, bar) = random_page(&mut b.rng, p);
                let next = View {
                    page,
                    bar,
                    offset: 0,
                    keyboard: None,
                };
                view = next;
                b.hold(&view, 1);
                end = b.last();
            }
            ActionType::Scroll => {
                let down = if view.offset + travel > max_offset {
                    false
                } else if view.offset < travel {
                    true
                } else {
                    b.rng.gen_bool(0.5)
                };
                for &step in &p.scroll_steps {
                    view.offset = if down { view.offset + step } else { view.offset - step };
                    b.hold(&view, 1);
                }
                end = b.last();
            }
            ActionType::Input => {
                view.keyboard = Some(0);
                b.hold(&view, 1);
                end = b.last();
                let chars = b.rng.gen_range(3..=8);
                for c in 1..=chars {
                    view.keyboard = Some(c);
                    b.hold(&view, 2);
                }
            }
        }
        truth.boundaries.push(boundary);
        truth.scenes.push(SceneRecord {
            start: boundary,
            end,
            action_type: kind,
            keyboard_frames: Vec::new(),
        });
        b.gap(&view);
        previous = Some(kind);
    }

    let Builder {
        mut rng,
        clean,
        keyboard,
        ..
    } = b;
    let frames: Vec<RgbImage> = clean.iter().map(|img| jitter(img, p.jitter, &mut rng)).collect();
    let mut ocr = ScriptedOcr {
        default: vec![OcrToken {
            text: "Settings".into(),
            rect: Rect::new(2, 1, 30, 8),
        }],
        ..ScriptedOcr::default()
    };
    for (frame, _) in frames.iter().zip(&keyboard).filter(|(_, &k)| k) {
        ocr.insert(
            frame,
            vec![OcrToken {
                text: KEYBOARD_TEXT.into(),
                rect: keyboard_rect(p),
            }],
        );
    }
    for scene in &mut truth.scenes {
        if scene.action_type == ActionType::Input {
            scene.keyboard_frames = (scene.start + 1..=scene.end).filter(|&i| keyboard[i]).collect();
        }
    }
    let recording = Recording::from_rasters(frames, p.fps, format!("synth-{seed}"))?;
    Ok(SynthRecording { recording, truth, ocr })
}

/// `count` recordings from consecutive seeds starting at `first_seed`.
pub fn generate_suite(first_seed: u64, count: usize, p: &SynthParams) -> Result<Vec<SynthRecording>> {
    (0..count as u64).map(|k| generate(first_seed + k, p)).collect()
}

/// A recording that holds each listed simulator screen for `hold` frames, as
/// if a user walked through them with instantaneous transitions.
pub fn sim_walk(app: &SimApp, screens: &[&str], hold: usize, fps: f64) -> Result<Recording> {
    let mut rasters = Vec::with_capacity(screens.len() * hold);
    for id in screens {
        let img = app.raster(id)?;
        rasters.extend(std::iter::repeat_n(img, hold));
    }
    Recording::from_rasters(rasters, fps, format!("sim-walk:{}", screens.join(",")))
}
