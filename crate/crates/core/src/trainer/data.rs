//! Procedural training images: one colored shape on a background.

use crate::nn::{Rng, Tensor};
use crate::vocab::{self, BACKGROUNDS, COLORS, COLOR_RGB, SHAPES, STYLES};

pub const IMAGE_SIZE: usize = 32;

const DARK: f32 = -0.9;
const LIGHT: f32 = 0.8;
const NOISY_MEAN: f32 = -0.2;
const NOISY_SPREAD: f32 = 0.3;

/// Token ids of the concrete styles, in vocabulary order.
const FLAT: usize = STYLES.start;
const OUTLINE: usize = STYLES.start + 1;
const GRADIENT: usize = STYLES.start + 2;
const DOTTED: usize = STYLES.start + 3;
const NULL_STYLE: usize = STYLES.start + 4;

const CIRCLE: usize = SHAPES.start;
const SQUARE: usize = SHAPES.start + 1;
const TRIANGLE: usize = SHAPES.start + 2;

const DARK_BG: usize = BACKGROUNDS.start;
const LIGHT_BG: usize = BACKGROUNDS.start + 1;

/// Shape geometry in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
}

/// Signed inside test scaled so the boundary sits at 1.0: values ≤ 1 are
/// inside the shape.
fn shape_extent(shape: usize, dx: f32, dy: f32, r: f32) -> f32 {
    match shape {
        CIRCLE => (dx * dx + dy * dy).sqrt() / r,
        SQUARE => dx.abs().max(dy.abs()) / (0.85 * r),
        TRIANGLE => {
            // Apex up, base at dy = +r; half-width grows linearly to r.
            let v = (dy + r) / (2.0 * r);
            if !(0.0..=1.0).contains(&v) {
                return f32::INFINITY;
            }
            let half = v * r;
            if half <= 0.0 {
                return if dx == 0.0 { 1.0 } else { f32::INFINITY };
            }
            (dx.abs() / half).max((2.0 * v - 1.0).abs())
        }
        _ => {
            let arm = r / 3.0;
            let horizontal = (dy.abs() / arm).max(dx.abs() / r);
            let vertical = (dx.abs() / arm).max(dy.abs() / r);
            horizontal.min(vertical)
        }
    }
}

/// Renders `tokens` (`[COLOR, SHAPE, BACKGROUND, STYLE]`, concrete values
/// only) at `placement`. The noisy background draws one uniform per pixel
/// from `rng`; nothing else consumes randomness.
pub fn render(tokens: &[usize; 4], placement: Placement, rng: &mut Rng) -> Tensor {
    let [color, shape, background, style] = *tokens;
    let n = IMAGE_SIZE;
    let rgb = COLOR_RGB[color - COLORS.start];
    let mut img = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let bg = match background {
                DARK_BG => DARK,
                LIGHT_BG => LIGHT,
                _ => NOISY_MEAN + rng.uniform(-NOISY_SPREAD, NOISY_SPREAD),
            };
            let dx = x as f32 + 0.5 - placement.cx;
            let dy = y as f32 + 0.5 - placement.cy;
            let e = shape_extent(shape, dx, dy, placement.radius);
            let paint = e <= 1.0
                && match style {
                    OUTLINE => shape_extent(shape, dx, dy, placement.radius - 2.0) > 1.0,
                    DOTTED => x % 4 < 2 && y % 4 < 2,
                    _ => true,
                };
            for c in 0..3 {
                img[(c * n + y) * n + x] = if !paint {
                    bg
                } else if style == GRADIENT {
                    let w = 1.0 - 0.6 * e;
                    bg + (rgb[c] - bg) * w
                } else {
                    rgb[c]
                };
            }
        }
    }
    Tensor::new(&[3, n, n], img).expect("render shape")
}

/// Draws a prompt and its image. `null_style` prompts are rendered with a
/// style drawn uniformly from the four concrete ones.
pub fn generate_sample(rng: &mut Rng) -> (Tensor, [usize; 4]) {
    let color = COLORS.start + rng.below(COLORS.len() as u32) as usize;
    let shape = SHAPES.start + rng.below(SHAPES.len() as u32) as usize;
    let background = BACKGROUNDS.start + rng.below(BACKGROUNDS.len() as u32) as usize;
    let style = STYLES.start + rng.below(STYLES.len() as u32) as usize;
    let drawn = if style == NULL_STYLE { FLAT + rng.below(4) as usize } else { style };
    let placement = Placement { cx: rng.uniform(10.0, 22.0), cy: rng.uniform(10.0, 22.0), radius: rng.uniform(6.0, 10.0) };
    let image = render(&[color, shape, background, drawn], placement, rng);
    (image, [color, shape, background, style])
}

/// Mean color of the pixels that differ clearly from the background, where
/// the background is the per-channel median of the border ring. `None` when
/// no pixel qualifies.
pub fn foreground_mean(img: &Tensor) -> Option<[f32; 3]> {
    let n = img.dim(1);
    let px = |c: usize, y: usize, x: usize| img.data()[(c * n + y) * n + x];
    let mut bg = [0.0f32; 3];
    for (c, b) in bg.iter_mut().enumerate() {
        let mut ring: Vec<f32> = Vec::new();
        for i in 0..n {
            ring.extend([px(c, 0, i), px(c, n - 1, i)]);
            if i > 0 && i < n - 1 {
                ring.extend([px(c, i, 0), px(c, i, n - 1)]);
            }
        }
        ring.sort_by(f32::total_cmp);
        *b = ring[ring.len() / 2];
    }
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for y in 0..n {
        for x in 0..n {
            let far = (0..3).any(|c| (px(c, y, x) - bg[c]).abs() > 0.5);
            if far {
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += px(c, y, x) as f64;
                }
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum.map(|s| (s / count as f64) as f32))
}

/// Channel (0 = R, 1 = G, 2 = B) with the largest foreground mean.
pub fn dominant_channel(img: &Tensor) -> Option<usize> {
    let mean = foreground_mean(img)?;
    let mut best = 0;
    for c in 1..3 {
        if mean[c] > mean[best] {
            best = c;
        }
    }
    Some(best)
}

/// Color token whose reference RGB is nearest the foreground mean.
pub fn nearest_color(img: &Tensor) -> Option<usize> {
    let mean = foreground_mean(img)?;
    let dist = |rgb: &[f32; 3]| (0..3).map(|c| (rgb[c] - mean[c]).powi(2)).sum::<f32>();
    let mut best = 0;
    for i in 1..COLOR_RGB.len() {
        if dist(&COLOR_RGB[i]) < dist(&COLOR_RGB[best]) {
            best = i;
        }
    }
    Some(COLORS.start + best)
}

pub fn describe(tokens: &[usize]) -> String {
    vocab::prompt_names(tokens).map(|n| n.join(" ")).unwrap_or_else(|_| format!("{tokens:?}"))
}
