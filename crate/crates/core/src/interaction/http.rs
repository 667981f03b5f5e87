//! Chat-style HTTP critic adapter.
//!
//! Requests are `{model, messages: [{role: "user", content: [text, image]}]}`
//! with a bearer token read from the configured environment variable. Any
//! response whose text content contains a JSON array of
//! `{"bbox": [x1, y1, x2, y2], "aesthetical description": "..."}` objects is
//! accepted.

use std::time::Duration;

use base64::Engine;
use log::warn;
use serde_json::{json, Value};

use super::{HttpCriticConfig, RegionSuggestion};
use crate::error::{Error, Result};
use crate::world::{Background, Brightness, Detail, ImageBuffer, PromptSpec};

/// Critic instruction; `__prompt__` is replaced with the prompt text.
pub const CRITIC_TEMPLATE: &str = include_str!("../../assets/critic_prompt.txt");

const DESCRIPTION_KEY: &str = "aesthetical description";

pub fn render_template(prompt: &PromptSpec) -> String {
    CRITIC_TEMPLATE.replace("__prompt__", &prompt.text())
}

pub struct HttpCritic {
    config: HttpCriticConfig,
    agent: ureq::Agent,
}

impl HttpCritic {
    pub fn new(config: HttpCriticConfig) -> Self {
        let agent = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
                .build(),
        );
        Self { config, agent }
    }

    fn post(&self, content: Vec<Value>) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
        });
        let mut req = self.agent.post(&self.config.endpoint);
        match std::env::var(&self.config.token_env) {
            Ok(token) => req = req.header("Authorization", format!("Bearer {token}")),
            Err(_) => warn!(
                "{} is not set; sending critic request without a token",
                self.config.token_env
            ),
        }
        let unavailable = |e: ureq::Error| Error::CriticUnavailable(format!("{}: {e}", self.config.endpoint));
        let mut resp = req.send_json(&body).map_err(unavailable)?;
        resp.body_mut().read_to_string().map_err(unavailable)
    }

    /// Sends the critic template and the image as a base64 8-bit PGM.
    pub fn critique_request(&self, image: &ImageBuffer, prompt: &PromptSpec) -> Result<String> {
        let data = base64::engine::general_purpose::STANDARD.encode(image.to_pgm_bytes());
        self.post(vec![
            json!({"type": "text", "text": render_template(prompt)}),
            json!({"type": "image", "data": data}),
        ])
    }

    /// Asks for a canonical token tuple for the prompt text.
    pub fn refine_request(&self, prompt: &PromptSpec) -> Result<String> {
        let text = format!(
            "Rewrite this image prompt as JSON {{\"shape\", \"brightness\", \"background\", \"detail\"}} \
             using only the tokens shape: disk|square|cross, brightness: dim|bright, background: dark|light, \
             detail: none|halo|border.\nPrompt: {}",
            prompt.text()
        );
        self.post(vec![json!({"type": "text", "text": text})])
    }
}

/// Every string leaf of a JSON document, in document order.
fn string_leaves(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::String(s) => out.push(s.clone()),
        Value::Array(items) => items.iter().for_each(|i| string_leaves(i, out)),
        Value::Object(map) => map.values().for_each(|i| string_leaves(i, out)),
        _ => {}
    }
}

/// Candidate texts: string leaves of a JSON body first, then the raw body.
fn candidate_texts(body: &str) -> Vec<String> {
    let mut texts = Vec::new();
    if let Ok(v) = serde_json::from_str::<Value>(body) {
        string_leaves(&v, &mut texts);
    }
    texts.push(body.to_string());
    texts
}

fn first_array(text: &str) -> Option<Vec<Value>> {
    for (i, _) in text.match_indices('[') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Array(items))) = stream.next() {
            return Some(items);
        }
    }
    None
}

/// The first JSON array found in the response text content. A JSON body is
/// searched through its string leaves only, so arrays of the response
/// envelope itself never match; a bare array body is taken as is.
pub fn extract_suggestion_array(body: &str) -> Option<Vec<Value>> {
    match serde_json::from_str::<Value>(body) {
        Ok(Value::Array(items)) => Some(items),
        Ok(v) => {
            let mut texts = Vec::new();
            string_leaves(&v, &mut texts);
            texts.iter().find_map(|t| first_array(t))
        }
        Err(_) => first_array(body),
    }
}

/// Maps a free-text description onto the prompt's tokens. Keywords override
/// brightness, background and detail; the shape is kept. A description with
/// no known keyword becomes the prompt with a halo.
fn description_to_prompt(description: &str, prompt: &PromptSpec) -> PromptSpec {
    let lower = description.to_ascii_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let has = |ks: &[&str]| words.iter().any(|w| ks.contains(w));
    let mut out = *prompt;
    let mut matched = false;
    if has(&["bright", "brighter", "glowing", "luminous", "vivid"]) {
        out.brightness = Brightness::Bright;
        matched = true;
    } else if has(&["dim", "faint", "muted", "subdued"]) {
        out.brightness = Brightness::Dim;
        matched = true;
    }
    if has(&["night", "shadow", "shadows", "dark", "darker"]) {
        out.background = Background::Dark;
        matched = true;
    } else if has(&["light", "pale", "daylight", "white"]) {
        out.background = Background::Light;
        matched = true;
    }
    if has(&["halo", "glow", "aura", "ring"]) {
        out.detail = Detail::Halo;
        matched = true;
    } else if has(&["border", "frame", "framed", "edge", "edges"]) {
        out.detail = Detail::Border;
        matched = true;
    }
    if matched {
        out
    } else {
        prompt.with_detail(Detail::Halo)
    }
}

/// Turns a critic response into validated suggestions. Malformed or
/// degenerate entries are dropped with a warning; at most `max_regions` are
/// kept.
pub fn parse_suggestions(
    body: &str,
    prompt: &PromptSpec,
    height: usize,
    width: usize,
    max_regions: usize,
) -> Result<Vec<RegionSuggestion>> {
    let items = extract_suggestion_array(body).ok_or_else(|| {
        let head: String = body.chars().take(80).collect();
        Error::Parse(format!("no JSON array in critic response {head:?}"))
    })?;
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let bbox = item.get("bbox").and_then(Value::as_array).and_then(|b| {
            let nums: Vec<f64> = b.iter().filter_map(Value::as_f64).collect();
            (b.len() == 4 && nums.len() == 4).then(|| [nums[0], nums[1], nums[2], nums[3]])
        });
        let description = item.get(DESCRIPTION_KEY).and_then(Value::as_str);
        let (Some(bbox), Some(description)) = (bbox, description) else {
            warn!("critic entry {i} lacks a 4-number bbox or a description; dropped");
            continue;
        };
        match RegionSuggestion::new(
            bbox,
            description_to_prompt(description, prompt),
            description,
            height,
            width,
        ) {
            Ok(s) if out.len() < max_regions => out.push(s),
            Ok(_) => warn!("critic entry {i} exceeds max_regions={max_regions}; dropped"),
            Err(e) => warn!("critic entry {i}: {e}; dropped"),
        }
    }
    Ok(out)
}

/// Single-turn critique through the HTTP backend.
pub fn mllm_critic(
    image: &ImageBuffer,
    prompt: &PromptSpec,
    config: &HttpCriticConfig,
) -> Result<Vec<RegionSuggestion>> {
    let body = HttpCritic::new(config.clone()).critique_request(image, prompt)?;
    parse_suggestions(&body, prompt, image.height(), image.width(), config.max_regions)
}

/// Reads a prompt out of a refinement reply: a JSON token object anywhere in
/// the text content, or free text naming all required tokens.
pub fn parse_refined_prompt(reply: &str) -> Option<PromptSpec> {
    for text in candidate_texts(reply) {
        for (i, _) in text.match_indices('{') {
            let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<PromptSpec>();
            if let Some(Ok(p)) = stream.next() {
                return Some(p);
            }
        }
    }
    candidate_texts(reply).iter().find_map(|t| PromptSpec::parse(t).ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Shape;

    fn base() -> PromptSpec {
        PromptSpec::new(Shape::Square, Brightness::Dim, Background::Light, Detail::None)
    }

    #[test]
    fn template_substitution() {
        let t = render_template(&base());
        assert!(!t.contains("__prompt__"));
        assert!(t.contains(&base().text()));
        assert!(t.contains(DESCRIPTION_KEY));
    }

    #[test]
    fn single_entry_gives_one_suggestion() {
        let body = r#"[{"bbox":[0,0,8,8],"aesthetical description":"a bright halo"}]"#;
        let s = parse_suggestions(body, &base(), 16, 16, 4).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mask(16, 16).unwrap().count(), 64);
        assert_eq!(s[0].prompt.brightness, Brightness::Bright);
        assert_eq!(s[0].prompt.detail, Detail::Halo);
        assert_eq!(s[0].prompt.shape, Shape::Square);
    }

    #[test]
    fn refusal_is_parse_error() {
        assert!(matches!(
            parse_suggestions("I cannot help", &base(), 16, 16, 4),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn cap_keeps_first_entries() {
        let items: Vec<Value> = (0..7)
            .map(|i| json!({"bbox": [i, 0, i + 2, 2], "aesthetical description": "soft"}))
            .collect();
        let s = parse_suggestions(&Value::Array(items).to_string(), &base(), 16, 16, 4).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s[3].bbox, [3, 0, 5, 2]);
        assert_eq!(s[0].prompt, base().with_detail(Detail::Halo));
    }

    #[test]
    fn array_inside_chat_envelope() {
        let inner = r#"Sure: [{"bbox":[2,2,99,99],"aesthetical description":"a frame"}] done"#;
        let body = json!({"choices": [{"message": {"content": inner}}]}).to_string();
        let s = parse_suggestions(&body, &base(), 16, 16, 4).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].bbox, [2, 2, 16, 16]);
        assert_eq!(s[0].prompt.detail, Detail::Border);
    }

    #[test]
    fn bad_entries_are_dropped() {
        let body = r#"[{"bbox":[3,3,3,5],"aesthetical description":"x"},{"bbox":[1,2],"aesthetical description":"x"},{"bbox":[0,0,4,4]}]"#;
        assert!(parse_suggestions(body, &base(), 16, 16, 4).unwrap().is_empty());
    }

    #[test]
    fn refined_prompt_from_json_or_text() {
        let p = parse_refined_prompt(
            r#"{"content":"{\"shape\":\"cross\",\"brightness\":\"bright\",\"background\":\"dark\",\"detail\":\"halo\"}"}"#,
        );
        assert_eq!(
            p,
            Some(PromptSpec::new(
                Shape::Cross,
                Brightness::Bright,
                Background::Dark,
                Detail::Halo
            ))
        );
        assert_eq!(
            parse_refined_prompt("a dim disk on a light background"),
            Some(PromptSpec::new(
                Shape::Disk,
                Brightness::Dim,
                Background::Light,
                Detail::None
            ))
        );
        assert_eq!(parse_refined_prompt("no idea"), None);
    }
}
