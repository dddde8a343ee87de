//! Procedural scene specifications and the 32x32 raster renderer.

use crate::numerics::{Rng, Tensor};

use super::vocab::{COLORS, QUADRANTS, SHAPES};

pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = SHAPES.len() * COLORS.len();

/// Palette RGB values, index-aligned with [`COLORS`]. Chosen well separated
/// in chromaticity so bounded jitter cannot flip the nearest palette entry.
pub const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.08, 0.08], // red
    [0.08, 0.80, 0.15], // green
    [0.12, 0.20, 0.90], // blue
    [0.92, 0.86, 0.10], // yellow
    [0.85, 0.10, 0.80], // magenta
    [0.10, 0.80, 0.85], // cyan
    [0.95, 0.95, 0.95], // white
    [0.95, 0.52, 0.06], // orange
];

pub const BACKGROUND: f64 = 0.12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: usize,    // index into SHAPES
    pub color: usize,    // index into COLORS / PALETTE
    pub quadrant: usize, // index into QUADRANTS
}

/// 1-3 objects, each in a distinct quadrant. The first object defines the
/// 32-way (shape, color) class; it is drawn larger than any distractor and
/// no distractor repeats its (shape, color), so the class is recoverable
/// from the image alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn sample(rng: &mut Rng) -> SceneSpec {
        // Primary (shape, color) drawn uniformly over the 32 classes.
        let class = rng.below(NUM_CLASSES as u64) as usize;
        let n_objects = 1 + rng.below(3) as usize;
        let quads = rng.permutation(4);
        let mut objects = vec![SceneObject {
            shape: class / COLORS.len(),
            color: class % COLORS.len(),
            quadrant: quads[0],
        }];
        for i in 1..n_objects {
            // Uniform over the 31 classes other than the primary's.
            let mut d = rng.below(NUM_CLASSES as u64 - 1) as usize;
            if d >= class {
                d += 1;
            }
            objects.push(SceneObject {
                shape: d / COLORS.len(),
                color: d % COLORS.len(),
                quadrant: quads[i],
            });
        }
        SceneSpec { objects }
    }

    pub fn primary_class(&self) -> u16 {
        let o = self.objects[0];
        (o.shape * COLORS.len() + o.color) as u16
    }

    pub fn class_name(class: u16) -> String {
        let shape = SHAPES[class as usize / COLORS.len()];
        let color = COLORS[class as usize % COLORS.len()];
        format!("{color} {shape}")
    }

    /// Caption clauses in object order: "a {color} {shape} in the {quadrant}".
    pub fn clauses(&self) -> Vec<Vec<&'static str>> {
        self.objects
            .iter()
            .map(|o| {
                vec![
                    "a",
                    COLORS[o.color],
                    SHAPES[o.shape],
                    "in",
                    "the",
                    QUADRANTS[o.quadrant],
                ]
            })
            .collect()
    }

    /// Bounding box (x0, y0, x1, y1), half-open, of the primary object,
    /// clipped to the image.
    pub fn primary_bbox(&self) -> (usize, usize, usize, usize) {
        let o = self.objects[0];
        let (cx, cy) = quadrant_center(o.quadrant);
        let (cx, cy) = (cx as i64, cy as i64);
        let r = PRIMARY_HALF + 1;
        let s = IMAGE_SIZE as i64;
        (
            (cx - r).clamp(0, s) as usize,
            (cy - r).clamp(0, s) as usize,
            (cx + r).clamp(0, s) as usize,
            (cy + r).clamp(0, s) as usize,
        )
    }
}

fn quadrant_center(q: usize) -> (usize, usize) {
    // x to the right, y downwards; quadrant order TL, TR, BL, BR
    match q {
        0 => (8, 8),
        1 => (24, 8),
        2 => (8, 24),
        _ => (24, 24),
    }
}

/// Half-extents for the primary (class-defining) object and the
/// distractors; the primary is always drawn larger so the class stays
/// visually unambiguous.
const PRIMARY_HALF: i64 = 7;
const DISTRACTOR_HALF: i64 = 4;

fn inside(shape: usize, dx: i64, dy: i64, r: i64) -> bool {
    let w = (r / 3).max(1); // cross arm half-width
    match shape {
        0 => dx * dx + dy * dy <= r * r,       // circle
        1 => dx.abs() <= r && dy.abs() <= r,   // square
        2 => (-r..=r).contains(&dy) && 2 * dx.abs() <= dy + r, // triangle, apex up
        _ => (dx.abs() <= w && dy.abs() <= r) || (dy.abs() <= w && dx.abs() <= r), // cross
    }
}

/// Render to [3, 32, 32] floats in [0, 1]. Deterministic in the spec.
pub fn render(spec: &SceneSpec) -> Tensor {
    let s = IMAGE_SIZE;
    let mut img = Tensor::full(&[3, s, s], BACKGROUND);
    let data = img.data_mut();
    for (k, o) in spec.objects.iter().enumerate() {
        let (cx, cy) = quadrant_center(o.quadrant);
        let (cx, cy) = (cx as i64, cy as i64);
        let half = if k == 0 { PRIMARY_HALF } else { DISTRACTOR_HALF };
        let rgb = PALETTE[o.color];
        for y in 0..s {
            for x in 0..s {
                let dx = x as i64 - cx;
                let dy = y as i64 - cy;
                if inside(o.shape, dx, dy, half) {
                    for c in 0..3 {
                        data[(c * s + y) * s + x] = rgb[c];
                    }
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_quadrants_and_consistent_class() {
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let spec = SceneSpec::sample(&mut rng);
            assert!((1..=3).contains(&spec.objects.len()));
            let mut quads: Vec<_> = spec.objects.iter().map(|o| o.quadrant).collect();
            quads.sort_unstable();
            quads.dedup();
            assert_eq!(quads.len(), spec.objects.len(), "shared quadrant");
            let o = spec.objects[0];
            assert_eq!(
                spec.primary_class() as usize,
                o.shape * COLORS.len() + o.color
            );
            for d in &spec.objects[1..] {
                assert!(
                    (d.shape, d.color) != (o.shape, o.color),
                    "distractor repeats the primary class"
                );
            }
        }
    }

    #[test]
    fn rendered_image_has_foreground() {
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let spec = SceneSpec::sample(&mut rng);
            let img = render(&spec);
            let fg = img
                .data()
                .iter()
                .filter(|&&v| (v - BACKGROUND).abs() > 1e-9)
                .count();
            assert!(fg > 0);
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn primary_bbox_contains_foreground() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let spec = SceneSpec::sample(&mut rng);
            let img = render(&spec);
            let (x0, y0, x1, y1) = spec.primary_bbox();
            let s = IMAGE_SIZE;
            let mut fg = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    if (img.data()[y * s + x] - BACKGROUND).abs() > 1e-9
                        || (img.data()[(s + y) * s + x] - BACKGROUND).abs() > 1e-9
                        || (img.data()[(2 * s + y) * s + x] - BACKGROUND).abs() > 1e-9
                    {
                        fg += 1;
                    }
                }
            }
            assert!(fg > 20, "primary object missing from its bbox");
        }
    }

    #[test]
    fn clause_text_matches_object() {
        let spec = SceneSpec {
            objects: vec![
                SceneObject { shape: 0, color: 0, quadrant: 0 },
                SceneObject { shape: 1, color: 2, quadrant: 3 },
            ],
        };
        let clauses = spec.clauses();
        assert_eq!(clauses[0], vec!["a", "red", "circle", "in", "the", "top-left"]);
        assert_eq!(
            clauses[1],
            vec!["a", "blue", "square", "in", "the", "bottom-right"]
        );
    }
}
