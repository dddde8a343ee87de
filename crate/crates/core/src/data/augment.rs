//! Deterministic image and text view augmentation.
//!
//! Image views: random crop (area fraction 0.5–1.0, constrained to keep at
//! least half of the primary object's bounding box), nearest-neighbor resize
//! back to 32x32, per-channel color jitter, occasional grayscale, and a little
//! uniform noise. No horizontal flip — captions encode left/right.
//!
//! Text views: either the full clause list or a uniformly sampled non-empty
//! clause subset with occasional color-synonym substitution.

use crate::error::Result;
use crate::numerics::{Rng, Tensor};

use super::scene::IMAGE_SIZE;
use super::vocab::{Vocab, COLORS, COLOR_SYNONYMS};

/// Luma weights for the grayscale branch.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

const JITTER_PROB: f64 = 0.8;
const GRAYSCALE_PROB: f64 = 0.2;
const NOISE_AMPLITUDE: f64 = 0.02;
const SYNONYM_PROB: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextMode {
    /// All clauses in object order (the identity view for V_T = 1 runs).
    Full,
    /// A uniformly sampled non-empty clause subset, in order.
    Sub,
}

/// Sample a square crop window (x0, y0, side) whose area fraction lies in
/// [0.5, 1.0] and which overlaps at least half of `bbox`. Rejection-samples
/// the offset; falls back to the bbox-centered placement, which always
/// satisfies the overlap constraint since the crop is at least as large as
/// the box.
fn sample_crop(rng: &mut Rng, bbox: (usize, usize, usize, usize)) -> (usize, usize, usize) {
    let s = IMAGE_SIZE as i64;
    let area = 0.5 + 0.5 * rng.f64();
    let side = ((s as f64) * area.sqrt()).round() as i64;
    let side = side.clamp(1, s);
    let (bx0, by0, bx1, by1) = (bbox.0 as i64, bbox.1 as i64, bbox.2 as i64, bbox.3 as i64);
    let need = (bx1 - bx0) * (by1 - by0) / 2;
    for _ in 0..32 {
        let x0 = rng.below((s - side + 1) as u64) as i64;
        let y0 = rng.below((s - side + 1) as u64) as i64;
        let ox = (bx1.min(x0 + side) - bx0.max(x0)).max(0);
        let oy = (by1.min(y0 + side) - by0.max(y0)).max(0);
        if ox * oy >= need {
            return (x0 as usize, y0 as usize, side as usize);
        }
    }
    let cx = (bx0 + bx1) / 2;
    let cy = (by0 + by1) / 2;
    let x0 = (cx - side / 2).clamp(0, s - side);
    let y0 = (cy - side / 2).clamp(0, s - side);
    (x0 as usize, y0 as usize, side as usize)
}

/// One augmented image view: [3, 32, 32] in [0, 1]. `bbox` is the primary
/// object's bounding box in the source image, used to constrain the crop.
pub fn augment_image(
    image: &Tensor,
    bbox: (usize, usize, usize, usize),
    rng: &mut Rng,
) -> Tensor {
    let s = IMAGE_SIZE;
    assert_eq!(image.shape(), &[3, s, s]);
    let src = image.data();

    // Crop and nearest-neighbor resize back to the native resolution.
    let (x0, y0, side) = sample_crop(rng, bbox);
    let mut out = vec![0.0; 3 * s * s];
    for y in 0..s {
        let sy = y0 + y * side / s;
        for x in 0..s {
            let sx = x0 + x * side / s;
            for c in 0..3 {
                out[(c * s + y) * s + x] = src[(c * s + sy) * s + sx];
            }
        }
    }

    // Color jitter: brightness, contrast, saturation, each with a factor in
    // 1 +/- 0.4, applied in that fixed order.
    if rng.f64() < JITTER_PROB {
        let brightness = 1.0 + 0.4 * (2.0 * rng.f64() - 1.0);
        let contrast = 1.0 + 0.4 * (2.0 * rng.f64() - 1.0);
        let saturation = 1.0 + 0.4 * (2.0 * rng.f64() - 1.0);
        for v in out.iter_mut() {
            *v *= brightness;
        }
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        for v in out.iter_mut() {
            *v = mean + contrast * (*v - mean);
        }
        for i in 0..s * s {
            let luma: f64 = (0..3).map(|c| LUMA[c] * out[c * s * s + i]).sum();
            for c in 0..3 {
                let v = &mut out[c * s * s + i];
                *v = luma + saturation * (*v - luma);
            }
        }
        // Bring any out-of-range values back with one global affine map
        // rather than per-pixel clipping: hard clipping desaturates the
        // brightest colors asymmetrically and can flip which palette entry
        // a swatch is nearest to, breaking label preservation.
        let lo = out.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
        let hi = out.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(1.0);
        if lo < 0.0 || hi > 1.0 {
            let inv = 1.0 / (hi - lo);
            for v in out.iter_mut() {
                *v = (*v - lo) * inv;
            }
        }
    }

    if rng.f64() < GRAYSCALE_PROB {
        for i in 0..s * s {
            let luma: f64 = (0..3).map(|c| LUMA[c] * out[c * s * s + i]).sum();
            for c in 0..3 {
                out[c * s * s + i] = luma;
            }
        }
    }

    for v in out.iter_mut() {
        *v = (*v + NOISE_AMPLITUDE * (2.0 * rng.f64() - 1.0)).clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, s, s], out)
}

/// One text view as a padded token row of length `max_len`.
///
/// Clauses are joined with "and". If the full join does not fit, trailing
/// clauses are dropped whole (never mid-word); at least one clause always
/// fits at L_T = 16.
pub fn augment_text(
    clauses: &[Vec<&'static str>],
    mode: TextMode,
    vocab: &Vocab,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Vec<u16>> {
    assert!(!clauses.is_empty());
    let chosen: Vec<&Vec<&'static str>> = match mode {
        TextMode::Full => clauses.iter().collect(),
        TextMode::Sub => {
            // The first clause names the class-defining object and is always
            // kept; the distractor clauses form a uniform random subset
            // (possibly empty), drawn as a bitmask.
            let k = clauses.len() as u32 - 1;
            let mask = if k == 0 { 0 } else { rng.below(1u64 << k) };
            clauses
                .iter()
                .enumerate()
                .filter(|(i, _)| *i == 0 || mask >> (i - 1) & 1 == 1)
                .map(|(_, c)| c)
                .collect()
        }
    };

    let mut words: Vec<&'static str> = Vec::new();
    for (i, clause) in chosen.iter().enumerate() {
        let sep = usize::from(i > 0); // one "and" between clauses
        if words.len() + sep + clause.len() + 2 > max_len {
            break;
        }
        if sep == 1 {
            words.push("and");
        }
        words.extend(clause.iter().copied());
    }

    if mode == TextMode::Sub {
        for w in words.iter_mut() {
            if let Some(ci) = COLORS.iter().position(|c| c == w) {
                if rng.f64() < SYNONYM_PROB {
                    *w = COLOR_SYNONYMS[ci];
                }
            }
        }
    }

    vocab.encode(&words, max_len)
}
