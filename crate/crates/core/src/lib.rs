//! Replay GUI screen recordings on a device.
//!
//! The pipeline has three phases:
//!
//! 1. [`segmentation`] splits a [`recording::Recording`] into per-action
//!    scenes using a luminance-embedding similarity series, and labels each
//!    scene as a tap, scroll or text input.
//! 2. [`comparison`] picks the region the user touched in each scene and asks a
//!    vision-language model whether the device screen is functionally in the
//!    same state as the recording.
//! 3. [`replay`] infers the next action (replaying the recorded one, or
//!    exploring towards the recorded state) and drives a [`device`].
//!
//! Model and detector access goes through small traits so that every phase can
//! run against scripted fixtures; see [`vlm::ScriptedVlm`],
//! [`perception::ScriptedDetector`], [`segmentation::ScriptedOcr`] and
//! [`device::SimDevice`].

pub mod comparison;
pub mod config;
pub mod device;
pub mod draw;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod perception;
pub mod recording;
pub mod replay;
pub mod segmentation;
pub mod synth;
pub mod vlm;

pub use error::{Error, Result};
pub use geometry::Rect;
pub use image;
