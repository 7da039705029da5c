//! Procedural prompt/image pairs. Every prompt names a tone, a size, a shape
//! and a position; the renderer draws that shape with small per-image jitter.

use rand::Rng;

use super::{Dims, GenError, PixelImage};
use crate::rng::stream_rng;

pub const TONES: [&str; 2] = ["bright", "dim"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const SHAPES: [&str; 5] = ["circle", "square", "ring", "stripes", "cross"];
pub const POSITIONS: [&str; 5] = ["left", "right", "top", "bottom", "center"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSpec {
    pub tone: usize,
    pub size: usize,
    pub shape: usize,
    pub position: usize,
}

impl ImageSpec {
    /// Order-insensitive parse; every slot must be named exactly once.
    pub fn parse(prompt: &str) -> Result<Self, GenError> {
        let mut slots = [None; 4];
        for tok in super::tokenize(prompt) {
            let hit = [&TONES[..], &SIZES[..], &SHAPES[..], &POSITIONS[..]]
                .iter()
                .enumerate()
                .find_map(|(slot, words)| words.iter().position(|w| *w == tok).map(|i| (slot, i)));
            match hit {
                Some((slot, i)) if slots[slot].is_none() => slots[slot] = Some(i),
                Some(_) => return Err(GenError::Argument(format!("{prompt:?}: repeated attribute"))),
                None => return Err(GenError::Argument(format!("{prompt:?}: unknown word {tok:?}"))),
            }
        }
        match slots {
            [Some(tone), Some(size), Some(shape), Some(position)] => {
                Ok(ImageSpec { tone, size, shape, position })
            }
            _ => Err(GenError::Argument(format!(
                "{prompt:?}: needs a tone, a size, a shape and a position"
            ))),
        }
    }

    pub fn prompt(&self) -> String {
        format!(
            "{} {} {} {}",
            TONES[self.tone], SIZES[self.size], SHAPES[self.shape], POSITIONS[self.position]
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PromptGrammar;

impl PromptGrammar {
    /// All 100 prompts in a fixed order.
    pub fn all(&self) -> Vec<String> {
        let mut out = Vec::new();
        for tone in 0..TONES.len() {
            for size in 0..SIZES.len() {
                for shape in 0..SHAPES.len() {
                    for position in 0..POSITIONS.len() {
                        out.push(ImageSpec { tone, size, shape, position }.prompt());
                    }
                }
            }
        }
        out
    }

    /// `n` prompts spread evenly over [`PromptGrammar::all`].
    pub fn evaluation(&self, n: usize) -> Vec<String> {
        let all = self.all();
        let n = n.clamp(1, all.len());
        (0..n).map(|i| all[(i * all.len() + all.len() / (2 * n)) / n].clone()).collect()
    }
}

/// Draws `spec` into an image; `jitter` in `[0, 1]` scales the random
/// perturbation of position, size and tone.
pub fn render(spec: &ImageSpec, dims: Dims, jitter: f32, rng: &mut impl Rng) -> PixelImage {
    let (h, w) = (dims.height as f32, dims.width as f32);
    let unit = h.min(w) / 32.0;
    let (fx, fy) = [(0.25, 0.5), (0.75, 0.5), (0.5, 0.25), (0.5, 0.75), (0.5, 0.5)][spec.position];
    let mut j = |scale: f32| jitter * scale * rng.random_range(-1.0f32..=1.0);
    let cx = fx * w + j(1.5 * unit);
    let cy = fy * h + j(1.5 * unit);
    let radius = [4.0, 7.0][spec.size] * unit + j(0.5 * unit);
    let tone = [0.95, 0.55][spec.tone] + j(0.05);
    let background = 0.05;
    let mut values = Vec::with_capacity(dims.len());
    for _ in 0..dims.channels {
        for y in 0..dims.height {
            for x in 0..dims.width {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let coverage = coverage(spec.shape, dx, dy, radius, unit);
                values.push((background + (tone - background) * coverage).clamp(0.0, 1.0));
            }
        }
    }
    PixelImage { dims, values }
}

/// Soft (one-pixel ramp) membership of an offset in the shape.
fn coverage(shape: usize, dx: f32, dy: f32, r: f32, unit: f32) -> f32 {
    let ramp = |signed_dist: f32| (0.5 - signed_dist / unit).clamp(0.0, 1.0);
    let d = (dx * dx + dy * dy).sqrt();
    let boxed = dx.abs().max(dy.abs());
    match shape {
        0 => ramp(d - r),
        1 => ramp(boxed - r),
        2 => ramp((d - 0.7 * r).abs() - 0.3 * r),
        3 => {
            let period = 4.0 * unit;
            let stripe = if (dy + r).rem_euclid(period) < period / 2.0 { 1.0 } else { 0.0 };
            ramp(boxed - r) * stripe
        }
        _ => {
            let arm = 0.35 * r;
            let bar = (dx.abs() - arm).max(dy.abs() - r).min((dy.abs() - arm).max(dx.abs() - r));
            ramp(bar)
        }
    }
}

/// Jittered images for a list of prompts.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub prompts: Vec<String>,
    pub images: Vec<PixelImage>,
    /// `images[i]` was drawn from `prompts[prompt_of[i]]`.
    pub prompt_of: Vec<usize>,
}

impl Corpus {
    pub fn generate(prompts: Vec<String>, dims: Dims, per_prompt: usize, seed: u64) -> Result<Self, GenError> {
        if prompts.is_empty() || per_prompt == 0 {
            return Err(GenError::Argument("corpus needs prompts and images per prompt".into()));
        }
        let mut images = Vec::with_capacity(prompts.len() * per_prompt);
        let mut prompt_of = Vec::with_capacity(images.capacity());
        for (p, text) in prompts.iter().enumerate() {
            let spec = ImageSpec::parse(text)?;
            let mut rng = stream_rng(seed, p as u64);
            for _ in 0..per_prompt {
                images.push(render(&spec, dims, 1.0, &mut rng));
                prompt_of.push(p);
            }
        }
        Ok(Corpus { prompts, images, prompt_of })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
