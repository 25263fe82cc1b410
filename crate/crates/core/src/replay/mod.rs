//! Action grammar and the replay loop.

mod action;
mod engine;

pub use action::{parse_action, render_action, ActionKind, Direction, ReplayAction, TapTarget};
pub use engine::{
    execute, infer_action, reproduce, reproduce_scenes, Backends, ReplayBudget, ReplayOptions, ReplayStep,
    ReplayTrace, StepMode, StepVerdict, TraceStatus, UsageTotals,
};
