use log::warn;

use super::PromptSpec;
use crate::error::Result;
use crate::interaction::{CriticBackend, HttpCritic};

/// Canonicalizes a prompt through the configured critic backend.
///
/// The rule-based backend is the identity. The HTTP backend asks the model
/// for a token tuple; an unparseable answer leaves the prompt unchanged,
/// while transport failures surface as `CriticUnavailable` so the caller can
/// decide to fall back.
pub fn refine_prompt(prompt: &PromptSpec, critic: &CriticBackend) -> Result<PromptSpec> {
    match critic {
        CriticBackend::RuleBased { .. } => Ok(*prompt),
        CriticBackend::Http(cfg) => {
            let reply = HttpCritic::new(cfg.clone()).refine_request(prompt)?;
            match crate::interaction::parse_refined_prompt(&reply) {
                Some(p) => Ok(p),
                None => {
                    warn!("critic returned no usable prompt for {prompt:?}; keeping it");
                    Ok(*prompt)
                }
            }
        }
    }
}
