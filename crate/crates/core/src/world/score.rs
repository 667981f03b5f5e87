use serde::{Deserialize, Serialize};

use super::{canonical_template, ImageBuffer, PromptSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub aesthetic: f64,
    pub consistency: f64,
}

impl ScoreCard {
    pub fn of(image: &ImageBuffer, prompt: &PromptSpec) -> Self {
        Self {
            aesthetic: aesthetic_proxy(image),
            consistency: consistency_proxy(image, prompt),
        }
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Aesthetic proxy on a raw `height × width` grid:
/// `0.4·min(1, 2·std) + 0.3·(q99 − q1) + 0.3·min(1, 4·mean|∇|)`, where the
/// gradient term averages absolute differences over all horizontal and
/// vertical neighbor pairs.
pub fn aesthetic_score(pixels: &[f32], height: usize, width: usize) -> f64 {
    assert_eq!(pixels.len(), height * width);
    let n = pixels.len() as f64;
    let vals: Vec<f64> = pixels.iter().map(|&p| p as f64).collect();
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();

    let mut sorted = vals.clone();
    sorted.sort_by(f64::total_cmp);
    let range = quantile(&sorted, 0.99) - quantile(&sorted, 0.01);

    let mut grad_sum = 0.0;
    let mut pairs = 0usize;
    for y in 0..height {
        for x in 0..width {
            let v = vals[y * width + x];
            if x + 1 < width {
                grad_sum += (vals[y * width + x + 1] - v).abs();
                pairs += 1;
            }
            if y + 1 < height {
                grad_sum += (vals[(y + 1) * width + x] - v).abs();
                pairs += 1;
            }
        }
    }
    let grad = if pairs == 0 { 0.0 } else { grad_sum / pairs as f64 };

    let score = 0.4 * (2.0 * std).min(1.0) + 0.3 * range + 0.3 * (4.0 * grad).min(1.0);
    score.clamp(0.0, 1.0)
}

pub fn aesthetic_proxy(image: &ImageBuffer) -> f64 {
    aesthetic_score(image.pixels(), image.height(), image.width())
}

/// Zero-mean normalized cross-correlation; `None` when either side has no
/// variance.
pub fn ncc(a: &[f32], b: &[f32]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    const TINY: f64 = 1e-12;
    if saa <= TINY || sbb <= TINY {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// `(NCC(image, template) + 1) / 2` against the prompt's jitter-free
/// rendering; 0 when either side is constant.
pub fn consistency_proxy(image: &ImageBuffer, prompt: &PromptSpec) -> f64 {
    let template = canonical_template(prompt, image.height(), image.width());
    match ncc(image.pixels(), template.pixels()) {
        Some(r) => (r + 1.0) / 2.0,
        None => 0.0,
    }
}

/// Cosine similarity of mean-centered pixel vectors; 0 for constant inputs.
pub fn image_cosine(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    ncc(a.pixels(), b.pixels()).unwrap_or(0.0)
}
