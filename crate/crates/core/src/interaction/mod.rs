//! Generation, critique and regional regeneration of an image.
//!
//! A critic looks at a sampled image and proposes regions paired with
//! prompts. Regeneration reuses the same starting noise and, at every solver
//! step, replaces the network output with the per-pixel average of the base
//! prediction and each region's prediction over that region's mask.

mod critic;
mod http;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_with, Denoiser, DenoiserConfig, DenoiserParams, NoisePredictor, SamplerConfig};
use crate::error::{Error, Result};
use crate::lora::LoraParams;
use crate::tensor::Tensor;
use crate::world::{ImageBuffer, PromptSpec};

pub use critic::{contrast_tweak, rule_critic, CriticBackend, HttpCriticConfig, DEFAULT_MAX_REGIONS};
pub use http::{
    extract_suggestion_array, mllm_critic, parse_refined_prompt, parse_suggestions, render_template, HttpCritic,
    CRITIC_TEMPLATE,
};

/// Binary `H × W` mask stored as 0/1 floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Mask {
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(if f(y, x) { 1.0 } else { 0.0 });
            }
        }
        Self { height, width, data }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Clamps a raw `[x1, y1, x2, y2]` box to the image and rasterizes it with
/// the half-open convention `[x1, x2) × [y1, y2)`. Coordinates are rounded
/// to the nearest pixel edge.
pub fn bbox_to_mask(bbox: [f64; 4], height: usize, width: usize) -> Result<(Mask, [usize; 4])> {
    let clamped = validate_bbox(bbox, height, width)?;
    let [x1, y1, x2, y2] = clamped;
    Ok((
        Mask::from_fn(height, width, |y, x| x >= x1 && x < x2 && y >= y1 && y < y2),
        clamped,
    ))
}

fn validate_bbox(bbox: [f64; 4], height: usize, width: usize) -> Result<[usize; 4]> {
    if bbox.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateRegion { bbox });
    }
    let clamp = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
    let out = [
        clamp(bbox[0], width),
        clamp(bbox[1], height),
        clamp(bbox[2], width),
        clamp(bbox[3], height),
    ];
    if out[0] >= out[2] || out[1] >= out[3] {
        return Err(Error::DegenerateRegion { bbox });
    }
    Ok(out)
}

/// One critic proposal `(Pᵢ, Mᵢ)`. The box is stored already validated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSuggestion {
    pub bbox: [usize; 4],
    pub prompt: PromptSpec,
    pub description: String,
}

impl RegionSuggestion {
    pub fn new(
        raw_bbox: [f64; 4],
        prompt: PromptSpec,
        description: impl Into<String>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        Ok(Self {
            bbox: validate_bbox(raw_bbox, height, width)?,
            prompt,
            description: description.into(),
        })
    }

    pub fn mask(&self, height: usize, width: usize) -> Result<Mask> {
        let [x1, y1, x2, y2] = self.bbox;
        bbox_to_mask([x1 as f64, y1 as f64, x2 as f64, y2 as f64], height, width).map(|(m, _)| m)
    }
}

/// `(ε̂(P,t,h) + Σᵢ ε̂(Pᵢ,t,h)·Mᵢ) / (1 + Σᵢ Mᵢ)`, evaluated with exactly
/// `n + 1` network calls. Pixels outside every mask keep the base output
/// bit-for-bit.
pub fn partitioned_denoise<P: NoisePredictor + ?Sized>(
    model: &P,
    prompt: &PromptSpec,
    regions: &[(PromptSpec, Mask)],
    t: f32,
    h_t: &Tensor,
) -> Result<Tensor> {
    for (i, (_, m)) in regions.iter().enumerate() {
        if h_t.shape() != m.shape() {
            return Err(Error::shape(
                "partitioned_denoise",
                format!("mask {i} is {:?}, state is {:?}", m.shape(), h_t.shape()),
            ));
        }
    }
    let base = model.predict(prompt, t, h_t)?;
    if regions.is_empty() {
        return Ok(base);
    }
    let mut numerator = base.into_data();
    let mut denominator = vec![1.0f32; numerator.len()];
    for (region_prompt, mask) in regions {
        let out = model.predict(region_prompt, t, h_t)?;
        for (k, &m) in mask.data().iter().enumerate() {
            if m > 0.0 {
                numerator[k] += out.data()[k] * m;
                denominator[k] += m;
            }
        }
    }
    for (n, d) in numerator.iter_mut().zip(&denominator) {
        if *d != 1.0 {
            *n /= d;
        }
    }
    Tensor::new(h_t.shape().to_vec(), numerator)
}

/// An image pair `(X, X′)` produced by one interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionResult {
    pub prompt: PromptSpec,
    pub seed: u64,
    pub before: ImageBuffer,
    pub after: ImageBuffer,
    pub suggestions: Vec<RegionSuggestion>,
    /// `"rule_based"`, `"http"`, or `"rule_based_fallback"`.
    pub critic_used: String,
}

/// Asks the configured critic for suggestions, falling back to the rule
/// critic when the HTTP backend fails.
pub fn critique(
    image: &ImageBuffer,
    prompt: &PromptSpec,
    critic: &CriticBackend,
    seed: u64,
) -> (Vec<RegionSuggestion>, String) {
    match critic {
        CriticBackend::RuleBased { max_regions } => {
            (rule_critic(image, prompt, *max_regions, seed), "rule_based".into())
        }
        CriticBackend::Http(cfg) => match mllm_critic(image, prompt, cfg) {
            Ok(s) => (s, "http".into()),
            Err(e) => {
                warn!("http critic failed ({e}); using rule critic");
                (
                    rule_critic(image, prompt, cfg.max_regions, seed),
                    "rule_based_fallback".into(),
                )
            }
        },
    }
}

/// Samples `X`, critiques it, and regenerates `X′` from the same noise with
/// partitioned denoising at every solver step. No suggestions means
/// `X′ = X`.
pub fn interactive_generate(
    params: &DenoiserParams,
    lora: Option<&LoraParams>,
    prompt: &PromptSpec,
    seed: u64,
    critic: &CriticBackend,
    steps: usize,
) -> Result<InteractionResult> {
    let model = Denoiser::with_lora(params, lora)?;
    let (before, suggestions, critic_used) = {
        let cfg = params.config;
        let sampler = SamplerConfig::new(steps, seed);
        let before = sample_with(&cfg.schedule, &sampler, cfg.height, cfg.width, |t, x| {
            model.predict(prompt, t, x)
        })?;
        let (s, used) = critique(&before, prompt, critic, seed);
        (before, s, used)
    };
    let after = if suggestions.is_empty() {
        before.clone()
    } else {
        regenerate(&model, prompt, &suggestions, seed, steps)?
    };
    Ok(InteractionResult {
        prompt: *prompt,
        seed,
        before,
        after,
        suggestions,
        critic_used,
    })
}

/// Runs the sampler with [`partitioned_denoise`] in place of the network.
pub fn regenerate(
    model: &Denoiser,
    prompt: &PromptSpec,
    suggestions: &[RegionSuggestion],
    seed: u64,
    steps: usize,
) -> Result<ImageBuffer> {
    regenerate_with(model, model.config(), prompt, suggestions, seed, steps)
}

/// [`regenerate`] over any predictor, e.g. an instrumented one.
pub fn regenerate_with<P: NoisePredictor + ?Sized>(
    model: &P,
    config: &DenoiserConfig,
    prompt: &PromptSpec,
    suggestions: &[RegionSuggestion],
    seed: u64,
    steps: usize,
) -> Result<ImageBuffer> {
    let cfg = *config;
    let regions = suggestions
        .iter()
        .map(|s| Ok((s.prompt, s.mask(cfg.height, cfg.width)?)))
        .collect::<Result<Vec<_>>>()?;
    let sampler = SamplerConfig::new(steps, seed);
    sample_with(&cfg.schedule, &sampler, cfg.height, cfg.width, |t, x| {
        partitioned_denoise(model, prompt, &regions, t, x)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{CountingPredictor, DenoiserConfig};
    use crate::world::{Background, Brightness, Detail, Shape};

    struct Constant;

    impl NoisePredictor for Constant {
        fn predict(&self, prompt: &PromptSpec, _t: f32, state: &Tensor) -> Result<Tensor> {
            let v = if prompt.detail == Detail::Halo { 3.0 } else { 1.0 };
            Ok(Tensor::full(state.shape(), v))
        }
    }

    fn base() -> PromptSpec {
        PromptSpec::new(Shape::Disk, Brightness::Bright, Background::Dark, Detail::None)
    }

    #[test]
    fn bbox_examples() {
        let (m, _) = bbox_to_mask([0.0, 0.0, 2.0, 1.0], 4, 4).unwrap();
        assert_eq!(m.count(), 2);
        assert_eq!(&m.data()[..4], &[1.0, 1.0, 0.0, 0.0]);
        let (m, b) = bbox_to_mask([2.0, 2.0, 99.0, 99.0], 4, 4).unwrap();
        assert_eq!(b, [2, 2, 4, 4]);
        assert_eq!(m.count(), 4);
        assert!(matches!(
            bbox_to_mask([3.0, 3.0, 3.0, 5.0], 4, 4),
            Err(Error::DegenerateRegion { .. })
        ));
        assert!(bbox_to_mask([f64::NAN, 0.0, 2.0, 2.0], 4, 4).is_err());
    }

    #[test]
    fn left_half_average() {
        let mask = Mask::from_fn(2, 2, |_, x| x == 0);
        let out = partitioned_denoise(
            &Constant,
            &base(),
            &[(base().with_detail(Detail::Halo), mask)],
            0.5,
            &Tensor::zeros(&[2, 2]),
        )
        .unwrap();
        assert_eq!(out.data(), &[2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn overlapping_full_frame_masks() {
        let full = Mask::from_fn(2, 2, |_, _| true);
        let halo = base().with_detail(Detail::Halo);
        let out = partitioned_denoise(
            &Constant,
            &base(),
            &[(halo, full.clone()), (base(), full)],
            0.5,
            &Tensor::zeros(&[2, 2]),
        )
        .unwrap();
        for v in out.data() {
            assert!((v - 5.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn evaluation_count_is_n_plus_one() {
        let counter = CountingPredictor::new(Constant);
        let regions: Vec<_> = (0..3).map(|i| (base(), Mask::from_fn(4, 4, |y, _| y == i))).collect();
        partitioned_denoise(&counter, &base(), &regions, 0.1, &Tensor::zeros(&[4, 4])).unwrap();
        assert_eq!(counter.count(), 4);
    }

    #[test]
    fn mask_shape_mismatch_is_error() {
        let r = partitioned_denoise(
            &Constant,
            &base(),
            &[(base(), Mask::from_fn(3, 3, |_, _| true))],
            0.1,
            &Tensor::zeros(&[4, 4]),
        );
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    fn model() -> DenoiserParams {
        let cfg = DenoiserConfig {
            height: 16,
            width: 16,
            hidden: 32,
            layers: 3,
            ..DenoiserConfig::default()
        };
        DenoiserParams::init(cfg, 8).unwrap()
    }

    #[test]
    fn identical_region_prompt_leaves_image_unchanged() {
        let p = model();
        let d = Denoiser::new(&p);
        let before = crate::diffusion::sample(&p, None, &base(), &SamplerConfig::new(20, 3)).unwrap();
        let s = RegionSuggestion::new([0.0, 0.0, 16.0, 16.0], base(), "same", 16, 16).unwrap();
        let after = regenerate(&d, &base(), &[s], 3, 20).unwrap();
        for (a, b) in before.pixels().iter().zip(after.pixels()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn no_suggestions_means_identical_pair() {
        let p = model();
        let critic = CriticBackend::RuleBased { max_regions: 4 };
        // a random network yields some image; force the empty case by max_regions = 0
        let none = CriticBackend::RuleBased { max_regions: 0 };
        let r = interactive_generate(&p, None, &base(), 5, &none, 10).unwrap();
        assert!(r.suggestions.is_empty());
        assert_eq!(r.before, r.after);
        let r = interactive_generate(&p, None, &base(), 5, &critic, 10).unwrap();
        assert!(r.suggestions.len() <= 4);
    }
}
