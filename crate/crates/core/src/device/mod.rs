//! Device abstraction: screen capture plus gesture execution.
//!
//! [`SimDevice`] is a scripted GUI state machine used for desk-scale testing;
//! [`AdbDevice`] drives a real device through the debug bridge shell.

mod adb;
mod sim;

use std::sync::Arc;

use image::RgbImage;

use crate::error::Result;
use crate::geometry::Rect;
use crate::replay::{Direction, ReplayAction};

pub use adb::{escape_input_text, AdbDevice};
pub use sim::{
    hierarchy_xml, load_sim_app, render_screen, ActionPattern, SimApp, SimDevice, SimElement, SimScreen,
    Transition, TransitionMatch,
};

#[derive(Debug, Clone)]
pub struct ScreenCapture {
    pub capture_id: String,
    pub pixels: Arc<RgbImage>,
    /// View-hierarchy XML taken together with the screenshot.
    pub hierarchy: String,
    /// Seconds; logical for the simulator.
    pub taken_at: f64,
}

/// One device. Calls are serialized by the caller.
pub trait DeviceAdapter {
    fn capture(&mut self) -> Result<ScreenCapture>;

    /// Performs `action`; `resolved_rect` is the on-screen box of the targeted
    /// element (tap, input) or the scrollable viewport (scroll).
    fn act(&mut self, action: &ReplayAction, resolved_rect: Option<Rect>) -> Result<()>;

    /// Whether a bug-manifesting state has been reached, if the device knows.
    fn bug_reached(&self) -> Option<bool> {
        None
    }
}

/// Swipe endpoints for a vertical scroll over the middle 60% of `viewport`.
/// Scrolling down drags the content upwards.
pub fn scroll_gesture(viewport: Rect, direction: Direction) -> (u32, u32, u32, u32) {
    let x = viewport.x + viewport.width / 2;
    let low = viewport.y + viewport.height * 4 / 5;
    let high = viewport.y + viewport.height / 5;
    match direction {
        Direction::Down => (x, low, x, high),
        Direction::Up => (x, high, x, low),
    }
}

pub const SCROLL_DURATION_MS: u32 = 300;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scroll_spans_middle_sixty_percent() {
        let (x1, y1, x2, y2) = scroll_gesture(Rect::new(0, 0, 100, 1000), Direction::Down);
        assert_eq!((x1, y1, x2, y2), (50, 800, 50, 200));
        let (_, y1, _, y2) = scroll_gesture(Rect::new(0, 100, 100, 500), Direction::Up);
        assert_eq!((y1, y2), (200, 500));
    }
}
