//! Critic backends and the rule-based image analyzer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RegionSuggestion;
use crate::seed;
use crate::world::{
    canonical_template, shape_bbox, Background, Brightness, Detail, ImageBuffer, PromptSpec, RenderParams,
};

pub const DEFAULT_MAX_REGIONS: usize = 4;

/// A quadrant counts as flat below this pixel standard deviation.
const FLAT_STD: f64 = 0.04;
/// Shape contrast below this fraction of the prompt's nominal contrast is a defect.
const CONTRAST_FRACTION: f64 = 0.8;
/// Allowed deviation of the shape's mean level from the prompt's nominal level.
const LEVEL_TOLERANCE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpCriticConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
    pub max_regions: usize,
}

impl Default for HttpCriticConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "critic".into(),
            token_env: "ARTAUG_CRITIC_TOKEN".into(),
            timeout_secs: 30,
            max_regions: DEFAULT_MAX_REGIONS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CriticBackend {
    RuleBased { max_regions: usize },
    Http(HttpCriticConfig),
}

impl Default for CriticBackend {
    fn default() -> Self {
        CriticBackend::RuleBased {
            max_regions: DEFAULT_MAX_REGIONS,
        }
    }
}

impl CriticBackend {
    pub fn max_regions(&self) -> usize {
        match self {
            CriticBackend::RuleBased { max_regions } => *max_regions,
            CriticBackend::Http(c) => c.max_regions,
        }
    }
}

/// The brightness/background change that widens the gap between shape and
/// background while keeping its sign. `None` when the prompt already has
/// the widest gap available for its polarity.
pub fn contrast_tweak(prompt: &PromptSpec) -> Option<PromptSpec> {
    match (prompt.brightness, prompt.background) {
        (Brightness::Dim, Background::Dark) => Some(prompt.with_brightness(Brightness::Bright)),
        (Brightness::Bright, Background::Light) => Some(prompt.with_background(Background::Dark)),
        (Brightness::Bright, Background::Dark) | (Brightness::Dim, Background::Light) => None,
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Inspects an image for (b) a shape region whose level or contrast falls
/// short of the prompt and (a) flat quadrants, and proposes token tweaks
/// for each. The shape token is never changed. Ties between equally flat
/// quadrants are broken by `seed`.
pub fn rule_critic(image: &ImageBuffer, prompt: &PromptSpec, max_regions: usize, seed: u64) -> Vec<RegionSuggestion> {
    let (h, w) = (image.height(), image.width());
    let mut out = Vec::new();

    // (b) shape region vs the prompt's brightness token
    let template = canonical_template(&prompt.with_detail(Detail::None), h, w);
    let bg_level = RenderParams::background_level(prompt.background) as f64;
    let fg_level = RenderParams::shape_level(prompt.brightness) as f64;
    let inside = |k: usize| (template.pixels()[k] as f64 - bg_level).abs() > 0.5 * (fg_level - bg_level).abs();
    let (fg_mean, _) = mean_std((0..h * w).filter(|&k| inside(k)).map(|k| image.pixels()[k] as f64));
    let (bg_mean, _) = mean_std((0..h * w).filter(|&k| !inside(k)).map(|k| image.pixels()[k] as f64));
    let expected = fg_level - bg_level;
    let measured = fg_mean - bg_mean;
    let weak = measured * expected.signum() < CONTRAST_FRACTION * expected.abs();
    // A halo smooths the shape edge in practice and lowers the aesthetic
    // proxy, so a shape defect without a contrast tweak is left alone.
    let defect = weak || (fg_mean - fg_level).abs() > LEVEL_TOLERANCE;
    if let (true, Some(region_prompt)) = (defect, contrast_tweak(prompt)) {
        let [x1, y1, x2, y2] = shape_bbox(prompt, h, w, 1.0);
        out.push(RegionSuggestion {
            bbox: [x1, y1, x2, y2],
            prompt: region_prompt,
            description: format!("a crisp {} {}", region_prompt.brightness, prompt.shape),
        });
    }

    // (a) flat quadrants, flattest first
    let (hh, hw) = (h / 2, w / 2);
    let mut quadrants: Vec<([usize; 4], f64)> = [[0, 0, hw, hh], [hw, 0, w, hh], [0, hh, hw, h], [hw, hh, w, h]]
        .into_iter()
        .map(|b| {
            let (_, std) = mean_std(
                (b[1]..b[3])
                    .flat_map(|y| (b[0]..b[2]).map(move |x| (y, x)))
                    .map(|(y, x)| image.get(y, x) as f64),
            );
            (b, std)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0xc21c]));
    quadrants.shuffle(&mut rng);
    quadrants.sort_by(|a, b| a.1.total_cmp(&b.1));
    for (bbox, std) in quadrants {
        if std >= FLAT_STD {
            break;
        }
        let region_prompt = contrast_tweak(prompt).unwrap_or(prompt.with_detail(Detail::Border));
        out.push(RegionSuggestion {
            bbox,
            prompt: region_prompt,
            description: format!("a textured {} patch", region_prompt.background),
        });
    }

    out.truncate(max_regions);
    out
}
