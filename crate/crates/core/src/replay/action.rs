//! The replay action space and its bracketed text form.
//!
//! ```text
//! [tap] [5]          [tap] [back]
//! [scroll] [up]      [scroll] [down]
//! [input] [3] [some text]
//! [end]
//! ```

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::ActionType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TapTarget {
    Element(u32),
    Back,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ReplayAction {
    Tap(TapTarget),
    Scroll(Direction),
    Input { target: u32, value: String },
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Tap,
    Scroll,
    Input,
    End,
}

impl ReplayAction {
    pub fn kind(&self) -> ActionKind {
        match self {
            ReplayAction::Tap(_) => ActionKind::Tap,
            ReplayAction::Scroll(_) => ActionKind::Scroll,
            ReplayAction::Input { .. } => ActionKind::Input,
            ReplayAction::End => ActionKind::End,
        }
    }

    /// Mark the action refers to, if any.
    pub fn mark(&self) -> Option<u32> {
        match self {
            ReplayAction::Tap(TapTarget::Element(m)) => Some(*m),
            ReplayAction::Input { target, .. } => Some(*target),
            _ => None,
        }
    }

    pub fn action_type(&self) -> Option<ActionType> {
        match self.kind() {
            ActionKind::Tap => Some(ActionType::Tap),
            ActionKind::Scroll => Some(ActionType::Scroll),
            ActionKind::Input => Some(ActionType::Input),
            ActionKind::End => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ReplayAction::Tap(TapTarget::Element(0)) | ReplayAction::Input { target: 0, .. } => {
                Err(Error::Input("mark ids start at 1".into()))
            }
            ReplayAction::Input { value, .. } if value.contains(['[', ']', '\n', '\r']) => Err(
                Error::Input(format!("input value {value:?} cannot contain brackets or newlines")),
            ),
            _ => Ok(()),
        }
    }
}

/// Canonical bracketed text of a valid action.
pub fn render_action(action: &ReplayAction) -> Result<String> {
    action.validate()?;
    Ok(match action {
        ReplayAction::Tap(TapTarget::Element(m)) => format!("[tap] [{m}]"),
        ReplayAction::Tap(TapTarget::Back) => "[tap] [back]".to_string(),
        ReplayAction::Scroll(d) => format!("[scroll] [{}]", d.as_str()),
        ReplayAction::Input { target, value } => format!("[input] [{target}] [{value}]"),
        ReplayAction::End => "[end]".to_string(),
    })
}

impl fmt::Display for ReplayAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match render_action(self) {
            Ok(s) => f.write_str(&s),
            Err(_) => write!(f, "{self:?}"),
        }
    }
}

impl Serialize for ReplayAction {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let text = render_action(self).map_err(serde::ser::Error::custom)?;
        serializer.serialize_str(&text)
    }
}

impl<'de> Deserialize<'de> for ReplayAction {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_action(&text).map_err(serde::de::Error::custom)
    }
}

fn sequence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[[^\[\]\n]*\](?:[ \t]*\[[^\[\]\n]*\])*").expect("static regex"))
}

fn field_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([^\[\]\n]*)\]").expect("static regex"))
}

fn parse_mark(field: &str) -> Option<u32> {
    let field = field.trim();
    if field.is_empty() || !field.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    field.parse().ok().filter(|&m| m > 0)
}

fn interpret(fields: &[&str]) -> Option<ReplayAction> {
    let head = fields.first()?.trim().to_ascii_lowercase();
    match (head.as_str(), fields.len()) {
        ("tap", 2) => {
            let target = fields[1].trim().to_ascii_lowercase();
            if target == "back" || target == "backward" {
                Some(ReplayAction::Tap(TapTarget::Back))
            } else {
                parse_mark(fields[1]).map(|m| ReplayAction::Tap(TapTarget::Element(m)))
            }
        }
        ("scroll", 2) => match fields[1].trim().to_ascii_lowercase().as_str() {
            "up" => Some(ReplayAction::Scroll(Direction::Up)),
            "down" => Some(ReplayAction::Scroll(Direction::Down)),
            _ => None,
        },
        ("input", 3) => parse_mark(fields[1]).map(|target| ReplayAction::Input {
            target,
            value: fields[2].to_string(),
        }),
        ("end", 1) => Some(ReplayAction::End),
        _ => None,
    }
}

/// Finds the first run of adjacent bracketed fields that forms a legal action.
/// Surrounding prose is ignored; field keywords are case-insensitive and the
/// input value is taken verbatim.
pub fn parse_action(text: &str) -> Result<ReplayAction> {
    for seq in sequence_re().find_iter(text) {
        let fields: Vec<&str> = field_re()
            .captures_iter(seq.as_str())
            .map(|c| c.get(1).map_or("", |m| m.as_str()))
            .collect();
        if let Some(action) = interpret(&fields) {
            return Ok(action);
        }
    }
    Err(Error::Parse(format!("no legal bracketed action in {text:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_canonical_forms() {
        let cases = [
            (ReplayAction::Tap(TapTarget::Element(5)), "[tap] [5]"),
            (ReplayAction::Tap(TapTarget::Back), "[tap] [back]"),
            (ReplayAction::Scroll(Direction::Down), "[scroll] [down]"),
            (
                ReplayAction::Input {
                    target: 3,
                    value: "hello world".into(),
                },
                "[input] [3] [hello world]",
            ),
            (ReplayAction::End, "[end]"),
        ];
        for (a, s) in cases {
            assert_eq!(render_action(&a).unwrap(), s);
        }
    }

    #[test]
    fn spaces_survive_in_values() {
        let a = ReplayAction::Input {
            target: 3,
            value: "a b".into(),
        };
        assert_eq!(render_action(&a).unwrap(), "[input] [3] [a b]");
        assert_eq!(parse_action("[input] [3] [a b]").unwrap(), a);
    }

    #[test]
    fn invalid_actions_do_not_render() {
        assert!(render_action(&ReplayAction::Tap(TapTarget::Element(0))).is_err());
        let bad = ReplayAction::Input {
            target: 1,
            value: "x]y".into(),
        };
        assert!(matches!(render_action(&bad), Err(Error::Input(_))));
    }

    #[test]
    fn parses_with_prose() {
        assert_eq!(
            parse_action("Action: [scroll] [up]").unwrap(),
            ReplayAction::Scroll(Direction::Up)
        );
        assert_eq!(
            parse_action("[input] [2] [pa55]").unwrap(),
            ReplayAction::Input {
                target: 2,
                value: "pa55".into()
            }
        );
        assert_eq!(
            parse_action("I think [tap] [5]").unwrap(),
            ReplayAction::Tap(TapTarget::Element(5))
        );
        assert_eq!(
            parse_action("choose from [tap] [element/back]; answer: [TAP] [Back]").unwrap(),
            ReplayAction::Tap(TapTarget::Back)
        );
        assert_eq!(parse_action("done. [end]").unwrap(), ReplayAction::End);
    }

    #[test]
    fn prose_without_brackets_fails() {
        assert!(matches!(parse_action("tap the button"), Err(Error::Parse(_))));
    }
}
