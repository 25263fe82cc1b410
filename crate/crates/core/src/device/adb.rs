use std::process::Command;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use super::{scroll_gesture, DeviceAdapter, ScreenCapture, SCROLL_DURATION_MS};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::replay::{ReplayAction, TapTarget};

/// Real device over the debug bridge: `screencap` for screenshots,
/// `uiautomator dump` for the hierarchy and `input` for gestures.
#[derive(Debug, Clone)]
pub struct AdbDevice {
    pub adb: String,
    pub serial: Option<String>,
    captures: u64,
}

impl AdbDevice {
    pub fn new(adb: impl Into<String>, serial: Option<String>) -> Self {
        AdbDevice {
            adb: adb.into(),
            serial,
            captures: 0,
        }
    }

    fn run(&self, args: &[&str]) -> Result<Vec<u8>> {
        let mut cmd = Command::new(&self.adb);
        if let Some(serial) = &self.serial {
            cmd.args(["-s", serial]);
        }
        let out = cmd
            .args(args)
            .output()
            .map_err(|e| Error::Device(format!("{} {}: {e}", self.adb, args.join(" "))))?;
        if !out.status.success() {
            return Err(Error::Device(format!(
                "{} {} exited with {}: {}",
                self.adb,
                args.join(" "),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(out.stdout)
    }

    fn shell(&self, command: &str) -> Result<()> {
        self.run(&["shell", command]).map(|_| ())
    }

    fn screen_rect(&self, pixels: &image::RgbImage) -> Rect {
        Rect::new(0, 0, pixels.width(), pixels.height())
    }
}

/// Escapes text for `input text`: spaces become `%s`, shell metacharacters
/// are backslash-escaped.
pub fn escape_input_text(value: &str) -> String {
    let mut out = String::with_capacity(value.len() * 2);
    for c in value.chars() {
        match c {
            ' ' => out.push_str("%s"),
            '\\' | '\'' | '"' | '`' | '$' | '&' | '|' | ';' | '<' | '>' | '(' | ')' | '*' | '?' | '~' | '#'
            | '%' => {
                out.push('\\');
                out.push(c);
            }
            _ => out.push(c),
        }
    }
    out
}

fn required(rect: Option<Rect>, action: &ReplayAction) -> Result<Rect> {
    rect.ok_or_else(|| Error::Device(format!("{action} needs a target rectangle")))
}

impl DeviceAdapter for AdbDevice {
    fn capture(&mut self) -> Result<ScreenCapture> {
        let png = self.run(&["exec-out", "screencap", "-p"])?;
        let pixels = image::load_from_memory(&png)
            .map_err(|e| Error::Device(format!("screencap output: {e}")))?
            .to_rgb8();
        let dump = self.run(&["exec-out", "uiautomator", "dump", "/dev/tty"])?;
        let dump = String::from_utf8_lossy(&dump);
        let end = dump
            .rfind("</hierarchy>")
            .map(|i| i + "</hierarchy>".len())
            .ok_or_else(|| Error::Device("hierarchy dump has no </hierarchy>".into()))?;
        let start = dump.find("<?xml").or_else(|| dump.find("<hierarchy")).unwrap_or(0);
        self.captures += 1;
        let taken_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Ok(ScreenCapture {
            capture_id: format!("adb{:04}", self.captures),
            pixels: Arc::new(pixels),
            hierarchy: dump[start..end].to_string(),
            taken_at,
        })
    }

    fn act(&mut self, action: &ReplayAction, resolved_rect: Option<Rect>) -> Result<()> {
        match action {
            ReplayAction::Tap(TapTarget::Back) => self.shell("input keyevent 4"),
            ReplayAction::Tap(TapTarget::Element(_)) => {
                let (x, y) = required(resolved_rect, action)?.center();
                self.shell(&format!("input tap {x} {y}"))
            }
            ReplayAction::Scroll(direction) => {
                let viewport = match resolved_rect {
                    Some(r) => r,
                    None => {
                        let png = self.run(&["exec-out", "screencap", "-p"])?;
                        let px = image::load_from_memory(&png)
                            .map_err(|e| Error::Device(format!("screencap output: {e}")))?
                            .to_rgb8();
                        self.screen_rect(&px)
                    }
                };
                let (x1, y1, x2, y2) = scroll_gesture(viewport, *direction);
                self.shell(&format!("input swipe {x1} {y1} {x2} {y2} {SCROLL_DURATION_MS}"))
            }
            ReplayAction::Input { value, .. } => {
                let (x, y) = required(resolved_rect, action)?.center();
                self.shell(&format!("input tap {x} {y}"))?;
                self.shell("input keyevent KEYCODE_MOVE_END")?;
                let dels = vec!["KEYCODE_DEL"; 64].join(" ");
                self.shell(&format!("input keyevent {dels}"))?;
                if value.is_empty() {
                    Ok(())
                } else {
                    self.shell(&format!("input text {}", escape_input_text(value)))
                }
            }
            ReplayAction::End => Err(Error::Input("[end] has no device effect".into())),
        }
    }
}
