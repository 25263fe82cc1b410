use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendReply, CaptionedImage, VlmBackend};
use crate::error::{Error, Result};

/// One scripted reply. A rule answers a prompt that contains `match`
/// (an empty `match` answers anything).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match", default)]
    pub pattern: String,
    pub response: String,
    #[serde(default)]
    pub input_tokens: u64,
    #[serde(default)]
    pub output_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    /// Repeating rules are never used up.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub repeat: bool,
}

impl ScriptRule {
    pub fn new(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptRule {
            pattern: pattern.into(),
            response: response.into(),
            input_tokens: 0,
            output_tokens: 0,
            latency: None,
            probability: None,
            repeat: false,
        }
    }

    pub fn tokens(mut self, input: u64, output: u64) -> Self {
        self.input_tokens = input;
        self.output_tokens = output;
        self
    }

    pub fn latency(mut self, seconds: f64) -> Self {
        self.latency = Some(seconds);
        self
    }

    pub fn probability(mut self, p: f64) -> Self {
        self.probability = Some(p);
        self
    }

    pub fn repeat(mut self) -> Self {
        self.repeat = true;
        self
    }
}

/// Deterministic backend replaying a script.
///
/// Each call takes the first rule, in script order, that is still available
/// and whose pattern occurs in the prompt; non-repeating rules are then used
/// up. Calls must be serialized for the order to be meaningful.
#[derive(Debug)]
pub struct ScriptedVlm {
    rules: Vec<ScriptRule>,
    used: Mutex<Vec<bool>>,
}

impl ScriptedVlm {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        let used = Mutex::new(vec![false; rules.len()]);
        ScriptedVlm { rules, used }
    }

    /// Reads a JSON array of rules.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rules: Vec<ScriptRule> = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(ScriptedVlm::new(rules))
    }

    pub fn remaining(&self) -> usize {
        let used = self.used.lock().expect("script state poisoned");
        self.rules
            .iter()
            .zip(used.iter())
            .filter(|(r, u)| !r.repeat && !**u)
            .count()
    }
}

impl VlmBackend for ScriptedVlm {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, _images: &[CaptionedImage], text: &str, _max_tokens: u32) -> Result<BackendReply> {
        let mut used = self.used.lock().expect("script state poisoned");
        let pick = self
            .rules
            .iter()
            .enumerate()
            .find(|(i, r)| !used[*i] && text.contains(&r.pattern));
        let Some((i, rule)) = pick else {
            let head = text.lines().next().unwrap_or("");
            return Err(Error::backend("scripted", format!("script exhausted for prompt {head:?}")));
        };
        if !rule.repeat {
            used[i] = true;
        }
        Ok(BackendReply {
            text: rule.response.clone(),
            input_tokens: rule.input_tokens,
            output_tokens: rule.output_tokens,
            first_token_probability: rule.probability,
            latency: Some(rule.latency.unwrap_or(0.0)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules_are_consumed_in_order_per_pattern() {
        let vlm = ScriptedVlm::new(vec![
            ScriptRule::new("alpha", "a1"),
            ScriptRule::new("beta", "b1"),
            ScriptRule::new("alpha", "a2"),
        ]);
        assert_eq!(vlm.complete(&[], "beta?", 1).unwrap().text, "b1");
        assert_eq!(vlm.complete(&[], "alpha?", 1).unwrap().text, "a1");
        assert_eq!(vlm.complete(&[], "alpha!", 1).unwrap().text, "a2");
        assert!(vlm.complete(&[], "alpha", 1).is_err());
        assert_eq!(vlm.remaining(), 0);
    }

    #[test]
    fn repeating_rules_persist() {
        let vlm = ScriptedVlm::new(vec![ScriptRule::new("", "NO").repeat()]);
        for _ in 0..5 {
            assert_eq!(vlm.complete(&[], "x", 1).unwrap().text, "NO");
        }
    }

    #[test]
    fn json_rule_shape() {
        let rules: Vec<ScriptRule> = serde_json::from_str(
            r#"[{"match": "Task: state-comparison", "response": "YES", "input_tokens": 2318, "output_tokens": 1}]"#,
        )
        .unwrap();
        assert_eq!(rules[0].pattern, "Task: state-comparison");
        assert_eq!(rules[0].input_tokens, 2318);
        assert!(!rules[0].repeat);
    }
}
