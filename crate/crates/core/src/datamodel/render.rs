//! Procedural renderer. The figure is an analytic shape evaluated through an
//! inverse view transform, so every pixel is a closed-form function of the
//! identity attributes, the view jitter and the background noise.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::vocab::{encode_text, vocabulary};
use super::{describe, Accessory, Build, IdentityParams, ImageSample, Pattern, Sample};
use crate::math;
use crate::modality::ModalityKind;
use crate::rng::{self, label};

/// Sobel magnitudes above this become sketch strokes.
pub const SKETCH_THRESHOLD: f64 = 0.5;

const MAX_SHIFT_PX: f64 = 3.0;
const MAX_ROTATION_DEG: f64 = 10.0;
const BACKGROUND_NOISE: f64 = 0.04;
const IR_NOISE: f64 = 0.03;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = math::frac(h) * 6.0;
    let sector = h6 as usize % 6;
    let f = h6 - libm::floor(h6);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hash of a texture cell into `[-1, 1]`.
fn cell_noise(seed: u64, cx: i64, cy: i64) -> f64 {
    let h = rng::derive_seed(seed, &[cx as u64, cy as u64]);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Colour of the figure at canonical coordinates `(u, v)` in the unit
/// square, or `None` for background.
fn figure(p: &IdentityParams, u: f64, v: f64) -> Option<[f64; 3]> {
    let half = match p.build {
        Build::Slim => 0.11,
        Build::Medium => 0.15,
        Build::Broad => 0.2,
    };
    let (cx, du) = (0.5, u - 0.5);
    // hat above the head
    if p.accessory == Accessory::Hat
        && (((0.07..0.13).contains(&v) && du.abs() <= 0.07) || ((0.13..0.15).contains(&v) && du.abs() <= 0.11))
    {
        return Some([0.08, 0.08, 0.1]);
    }
    let (hx, hy) = (u - cx, v - 0.21);
    if hx * hx + hy * hy <= 0.075 * 0.075 {
        return Some([0.93, 0.78, 0.64]);
    }
    if p.accessory == Accessory::Backpack && (0.32..0.56).contains(&v) && du > half && du <= half + 0.08 {
        return Some([0.36, 0.22, 0.1]);
    }
    if (0.3..0.62).contains(&v) && du.abs() <= half {
        let mut c = hsv(p.hue, 0.85, 0.92);
        if p.pattern == Pattern::Striped && (libm::floor(v * 20.0) as i64) % 2 == 0 {
            for x in &mut c {
                *x *= 0.5;
            }
        }
        let t = 1.0 + 0.08 * cell_noise(p.texture_seed, libm::floor(u * 10.0) as i64, libm::floor(v * 10.0) as i64);
        return Some(c.map(|x| x * t));
    }
    if (0.62..0.93).contains(&v) && du.abs() >= 0.015 && du.abs() <= half - 0.02 {
        return Some(hsv(p.hue, 0.5, 0.35));
    }
    None
}

/// RGB rendering of an identity in a given view.
pub fn render_rgb(p: &IdentityParams, view: u32, seed: u64, size: usize) -> ImageSample {
    let mut r = rng::stream(seed, &[label::RGB, p.texture_seed, view as u64]);
    let tx = r.gen_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX) / size as f64;
    let ty = r.gen_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX) / size as f64;
    let theta = r.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians();
    let bg = r.gen_range(0.3..0.7);
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64 - 0.5 - tx;
            let v = (y as f64 + 0.5) / size as f64 - 0.5 - ty;
            // inverse rotation back into the canonical frame
            let cu = cos * u + sin * v + 0.5;
            let cv = -sin * u + cos * v + 0.5;
            let noise = r.gen_range(-BACKGROUND_NOISE..=BACKGROUND_NOISE);
            let c = figure(p, cu, cv).unwrap_or([bg + noise; 3]);
            pixels.extend(c.iter().map(|&ch| ch.clamp(0.0, 1.0) as f32));
        }
    }
    ImageSample { height: size, width: size, channels: 3, pixels }
}

/// `0.299 R + 0.587 G + 0.114 B` per pixel of a 3-channel image.
pub fn luminance(img: &ImageSample) -> Vec<f64> {
    assert_eq!(img.channels, 3);
    img.pixels
        .chunks_exact(3)
        .map(|c| 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64)
        .collect()
}

/// 3x3 mean filter; border pixels average over their in-bounds neighbours.
pub fn box_blur3(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    s += plane[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = s / n;
        }
    }
    out
}

/// Sobel gradient magnitude with replicated borders.
pub fn sobel_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        plane[yy * w + xx]
    };
    let mut out = vec![0.0; plane.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            out[y as usize * w + x as usize] = math::sqrt(gx * gx + gy * gy);
        }
    }
    out
}

pub(crate) fn infrared_from_rgb(rgb: &ImageSample, noise_seed: u64) -> ImageSample {
    let (h, w) = (rgb.height, rgb.width);
    let blurred = box_blur3(&luminance(rgb), h, w);
    let mut r = rng::stream(noise_seed, &[label::IR_NOISE]);
    let pixels = blurred
        .iter()
        .map(|&v| (v + r.gen_range(-IR_NOISE..=IR_NOISE)).clamp(0.0, 1.0) as f32)
        .collect();
    ImageSample { height: h, width: w, channels: 1, pixels }
}

pub(crate) fn sketch_from_rgb(rgb: &ImageSample) -> ImageSample {
    let (h, w) = (rgb.height, rgb.width);
    let mag = sobel_magnitude(&luminance(rgb), h, w);
    let pixels = mag.iter().map(|&m| if m > SKETCH_THRESHOLD { 1.0 } else { 0.0 }).collect();
    ImageSample { height: h, width: w, channels: 1, pixels }
}

/// Renders one modality of an identity's view. Deterministic in all inputs.
pub fn render_modality(
    params: &IdentityParams,
    view: u32,
    kind: ModalityKind,
    seed: u64,
    image_size: usize,
    text_len: usize,
) -> Sample {
    match kind {
        ModalityKind::R => Sample::Image(render_rgb(params, view, seed, image_size)),
        ModalityKind::I => {
            let rgb = render_rgb(params, view, seed, image_size);
            let noise_seed = rng::derive_seed(seed, &[params.texture_seed, view as u64]);
            Sample::Image(infrared_from_rgb(&rgb, noise_seed))
        }
        ModalityKind::S => Sample::Image(sketch_from_rgb(&render_rgb(params, view, seed, image_size))),
        ModalityKind::T => Sample::Text(encode_text(&describe(params), &vocabulary(), text_len)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> IdentityParams {
        IdentityParams {
            hue: 0.62,
            build: Build::Broad,
            accessory: Accessory::Backpack,
            pattern: Pattern::Striped,
            texture_seed: 99,
        }
    }

    fn constant_rgb(c: [f32; 3]) -> ImageSample {
        ImageSample { height: 8, width: 8, channels: 3, pixels: c.repeat(64) }
    }

    #[test]
    fn rgb_render_is_bounded_and_shaped() {
        for view in 0..4 {
            let img = render_rgb(&params(), view, 5, 32);
            assert_eq!((img.height, img.width, img.channels), (32, 32, 3));
            assert!(img.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn views_differ_but_repeat_exactly() {
        let a = render_rgb(&params(), 0, 5, 32);
        let b = render_rgb(&params(), 1, 5, 32);
        assert_ne!(a, b);
        assert_eq!(a, render_rgb(&params(), 0, 5, 32));
    }

    #[test]
    fn luminance_of_constant_colours() {
        let white = luminance(&constant_rgb([1.0, 1.0, 1.0]));
        assert!(white.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let red = luminance(&constant_rgb([1.0, 0.0, 0.0]));
        assert!(red.iter().all(|&v| (v - 0.299).abs() < 1e-12));
    }

    #[test]
    fn constant_image_has_empty_sketch() {
        let s = sketch_from_rgb(&constant_rgb([0.3, 0.6, 0.9]));
        assert!(s.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blur_preserves_constants() {
        let plane = vec![0.25; 25];
        assert!(box_blur3(&plane, 5, 5).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn modality_renders_have_expected_channels() {
        let p = params();
        for kind in ModalityKind::ALL {
            match render_modality(&p, 2, kind, 11, 32, 16) {
                Sample::Image(img) => {
                    let c = if kind == ModalityKind::R { 3 } else { 1 };
                    assert_eq!(img.channels, c);
                    assert!(img.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
                    if kind == ModalityKind::S {
                        assert!(img.pixels.iter().all(|&v| v == 0.0 || v == 1.0));
                        assert!(img.pixels.contains(&1.0));
                    }
                }
                Sample::Text(t) => {
                    assert_eq!(kind, ModalityKind::T);
                    assert_eq!(t.token_ids.len(), 16);
                }
            }
        }
    }
}
