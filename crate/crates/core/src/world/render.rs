use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Background, Brightness, Detail, ImageBuffer, PromptSpec, Shape};
use crate::seed;

/// Scene constants shared by the renderer and the critic.
pub struct RenderParams;

impl RenderParams {
    pub const BG_DARK: f32 = 0.1;
    pub const BG_LIGHT: f32 = 0.75;
    pub const SHAPE_DIM: f32 = 0.4;
    pub const SHAPE_BRIGHT: f32 = 0.95;
    /// Maximum center offset in pixels.
    pub const POSITION_JITTER: f32 = 2.0;
    /// Maximum global intensity offset.
    pub const INTENSITY_JITTER: f32 = 0.1;
    /// Shape radius as a fraction of the shorter side.
    pub const RADIUS_FRACTION: f32 = 0.28;
    const HALO_CENTER: f32 = 1.5;
    const HALO_WIDTH: f32 = 0.9;
    const HALO_STRENGTH: f32 = 0.7;

    pub fn background_level(b: Background) -> f32 {
        match b {
            Background::Dark => Self::BG_DARK,
            Background::Light => Self::BG_LIGHT,
        }
    }

    pub fn shape_level(b: Brightness) -> f32 {
        match b {
            Brightness::Dim => Self::SHAPE_DIM,
            Brightness::Bright => Self::SHAPE_BRIGHT,
        }
    }

    pub fn radius(height: usize, width: usize) -> f32 {
        Self::RADIUS_FRACTION * height.min(width) as f32
    }
}

/// Signed distance (pixels) from the shape outline; negative inside.
fn shape_distance(shape: Shape, dx: f32, dy: f32, radius: f32) -> f32 {
    match shape {
        Shape::Disk => (dx * dx + dy * dy).sqrt() - radius,
        Shape::Square => dx.abs().max(dy.abs()) - 0.85 * radius,
        Shape::Cross => {
            let long = 1.1 * radius;
            let half = 0.45 * radius;
            let horizontal = (dx.abs() - long).max(dy.abs() - half);
            let vertical = (dx.abs() - half).max(dy.abs() - long);
            horizontal.min(vertical)
        }
    }
}

fn draw(prompt: &PromptSpec, height: usize, width: usize, offset: (f32, f32), level_shift: f32) -> ImageBuffer {
    let bg = RenderParams::background_level(prompt.background);
    let fg = RenderParams::shape_level(prompt.brightness);
    let radius = RenderParams::radius(height, width);
    let cx = (width as f32 - 1.0) / 2.0 + offset.0;
    let cy = (height as f32 - 1.0) / 2.0 + offset.1;

    let mut pixels = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let d = shape_distance(prompt.shape, x as f32 - cx, y as f32 - cy, radius);
            let coverage = (0.5 - d).clamp(0.0, 1.0);
            let mut v = bg + (fg - bg) * coverage;
            match prompt.detail {
                Detail::None => {}
                Detail::Halo => {
                    if d > 0.0 {
                        let z = (d - RenderParams::HALO_CENTER) / RenderParams::HALO_WIDTH;
                        let ring = (-z * z).exp() * RenderParams::HALO_STRENGTH;
                        v += (fg - bg) * ring * (1.0 - coverage);
                    }
                }
                Detail::Border => {
                    if x == 0 || y == 0 || x == width - 1 || y == height - 1 {
                        v = fg;
                    }
                }
            }
            pixels.push((v + level_shift).clamp(0.0, 1.0));
        }
    }
    ImageBuffer::new(height, width, pixels).expect("renderer keeps pixels in range")
}

/// Renders a prompt with seeded position and intensity jitter.
pub fn render_scene(prompt: &PromptSpec, variation_seed: u64, height: usize, width: usize) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(variation_seed, &[prompt.ordinal() as u64, 0x5ce0e]));
    let j = RenderParams::POSITION_JITTER;
    let dx = rng.random_range(-j..=j);
    let dy = rng.random_range(-j..=j);
    let i = RenderParams::INTENSITY_JITTER;
    let shift = rng.random_range(-i..=i);
    draw(prompt, height, width, (dx, dy), shift)
}

/// The jitter-free rendering used as the consistency reference.
pub fn canonical_template(prompt: &PromptSpec, height: usize, width: usize) -> ImageBuffer {
    draw(prompt, height, width, (0.0, 0.0), 0.0)
}

/// Half-open pixel box `[x1, y1, x2, y2]` around the canonical shape, grown
/// by `margin` pixels and clipped to the image.
pub fn shape_bbox(prompt: &PromptSpec, height: usize, width: usize, margin: f32) -> [usize; 4] {
    let radius = RenderParams::radius(height, width);
    let extent = match prompt.shape {
        Shape::Disk => radius,
        Shape::Square => 0.85 * radius,
        Shape::Cross => 1.1 * radius,
    } + margin;
    let cx = (width as f32 - 1.0) / 2.0;
    let cy = (height as f32 - 1.0) / 2.0;
    let x1 = (cx - extent).floor().max(0.0) as usize;
    let y1 = (cy - extent).floor().max(0.0) as usize;
    let x2 = ((cx + extent).ceil() as usize + 1).min(width);
    let y2 = ((cy + extent).ceil() as usize + 1).min(height);
    [x1, y1, x2, y2]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inside_outside(img: &ImageBuffer, prompt: &PromptSpec) -> (f32, f32) {
        let t = canonical_template(&prompt.with_detail(Detail::None), img.height(), img.width());
        let bg = RenderParams::background_level(prompt.background);
        let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
        for (p, q) in img.pixels().iter().zip(t.pixels()) {
            if (q - bg).abs() > 1e-3 {
                si += p;
                ni += 1;
            } else {
                so += p;
                no += 1;
            }
        }
        (si / ni as f32, so / no as f32)
    }

    #[test]
    fn bright_disk_stands_out_on_dark() {
        let p = PromptSpec::new(Shape::Disk, Brightness::Bright, Background::Dark, Detail::None);
        let t = canonical_template(&p, 16, 16);
        let (inside, outside) = inside_outside(&t, &p);
        assert!(inside - outside >= 0.3, "{inside} {outside}");
    }

    #[test]
    fn dim_square_is_darker_than_light_background() {
        let p = PromptSpec::new(Shape::Square, Brightness::Dim, Background::Light, Detail::None);
        let t = canonical_template(&p, 16, 16);
        let (inside, outside) = inside_outside(&t, &p);
        assert!(inside < outside, "{inside} {outside}");
    }

    #[test]
    fn rendering_is_deterministic_and_seed_dependent() {
        let p = PromptSpec::new(Shape::Cross, Brightness::Dim, Background::Dark, Detail::Halo);
        assert_eq!(render_scene(&p, 3, 16, 16), render_scene(&p, 3, 16, 16));
        assert_ne!(render_scene(&p, 3, 16, 16), render_scene(&p, 4, 16, 16));
    }

    #[test]
    fn details_change_the_picture() {
        let base = PromptSpec::new(Shape::Disk, Brightness::Bright, Background::Dark, Detail::None);
        let plain = canonical_template(&base, 16, 16);
        assert_ne!(plain, canonical_template(&base.with_detail(Detail::Halo), 16, 16));
        let bordered = canonical_template(&base.with_detail(Detail::Border), 16, 16);
        assert_eq!(bordered.get(0, 0), RenderParams::SHAPE_BRIGHT);
    }

    #[test]
    fn bbox_contains_shape() {
        for p in PromptSpec::all() {
            let [x1, y1, x2, y2] = shape_bbox(&p, 16, 16, 0.0);
            let t = canonical_template(&p.with_detail(Detail::None), 16, 16);
            let bg = RenderParams::background_level(p.background);
            for y in 0..16 {
                for x in 0..16 {
                    if (t.get(y, x) - bg).abs() > 1e-3 {
                        assert!(x >= x1 && x < x2 && y >= y1 && y < y2, "{p}: ({x},{y})");
                    }
                }
            }
        }
    }
}
