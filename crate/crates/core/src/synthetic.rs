//! Seeded synthetic data: Gaussian blobs in feature space and stroke
//! "glyph" images drawn from per-class prototypes. Used by tests, benches
//! and the demo pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::features::ImageRecord;
use crate::linalg::Matrix;

/// `classes` isotropic Gaussian blobs of `per_class` points each. Centres sit
/// on scaled coordinate axes, `separation` apart from the origin.
pub fn gaussian_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, std: f64, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, std).expect("valid std");
    let mut rows = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let mut centre = vec![0.0; dim];
        centre[c % dim] = separation * (1 + c / dim) as f64;
        for _ in 0..per_class {
            rows.push(centre.iter().map(|m| m + noise.sample(&mut rng)).collect::<Vec<f64>>());
            labels.push(c);
        }
    }
    (Matrix::from_rows(&rows).expect("equal rows"), labels)
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: (f64, f64),
    b: (f64, f64),
}

/// A class prototype: a few strokes in unit coordinates.
#[derive(Debug, Clone)]
pub struct GlyphPrototype {
    strokes: Vec<Segment>,
}

impl GlyphPrototype {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let n = rng.random_range(2..=4);
        let mut strokes = Vec::with_capacity(n);
        let mut prev = (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
        for _ in 0..n {
            // strokes either continue from the last end point or start fresh
            let start = if rng.random_bool(0.6) {
                prev
            } else {
                (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85))
            };
            let end = (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
            strokes.push(Segment { a: start, b: end });
            prev = end;
        }
        Self { strokes }
    }

    /// Renders a jittered instance: small global affine distortion, per
    /// endpoint wobble and pixel noise. Dark strokes on a light background.
    pub fn render<R: Rng + ?Sized>(&self, id: impl Into<String>, size: usize, rng: &mut R) -> ImageRecord {
        let angle: f64 = rng.random_range(-0.12..0.12);
        let scale: f64 = rng.random_range(0.92..1.08);
        let shift = (rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04));
        let (s, c) = angle.sin_cos();
        let mut warp = |p: (f64, f64)| {
            let (x, y) = (p.0 - 0.5, p.1 - 0.5);
            let (x, y) = (scale * (c * x - s * y), scale * (s * x + c * y));
            (
                x + 0.5 + shift.0 + rng.random_range(-0.025..0.025),
                y + 0.5 + shift.1 + rng.random_range(-0.025..0.025),
            )
        };
        let strokes: Vec<Segment> = self
            .strokes
            .iter()
            .map(|sg| Segment {
                a: warp(sg.a),
                b: warp(sg.b),
            })
            .collect();
        let thickness = rng.random_range(0.045..0.07);
        let noise = Normal::new(0.0, 6.0).expect("valid std");
        let mut gray = Vec::with_capacity(size * size);
        for py in 0..size {
            for px in 0..size {
                let p = ((px as f64 + 0.5) / size as f64, (py as f64 + 0.5) / size as f64);
                let d = strokes.iter().map(|sg| seg_dist(p, sg)).fold(f64::INFINITY, f64::min);
                let ink = (1.0 - (d - thickness / 2.0) * size as f64).clamp(0.0, 1.0);
                let v = 245.0 - 225.0 * ink + noise.sample(rng);
                gray.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        ImageRecord::from_gray(id, size, size, &gray).expect("sized buffer")
    }
}

fn seg_dist(p: (f64, f64), s: &Segment) -> f64 {
    let (dx, dy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - s.a.0) * dx + (p.1 - s.a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (s.a.0 + t * dx, s.a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// `classes × per_class` glyph images, class names `"{prefix}{c:03}"`,
/// image ids `"{class}_{i:02}"`.
pub fn glyph_dataset(prefix: &str, classes: usize, per_class: usize, size: usize, seed: u64) -> Vec<(String, Vec<ImageRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..classes)
        .map(|c| {
            let proto = GlyphPrototype::random(&mut rng);
            let name = format!("{prefix}{c:03}");
            let imgs = (0..per_class)
                .map(|i| proto.render(format!("{name}_{i:02}"), size, &mut rng))
                .collect();
            (name, imgs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_have_requested_shape() {
        let (x, labels) = gaussian_blobs(3, 30, 8, 10.0, 1.0, 1);
        assert_eq!((x.rows(), x.cols()), (90, 8));
        assert_eq!(labels.iter().filter(|&&l| l == 2).count(), 30);
    }

    #[test]
    fn glyphs_are_deterministic() {
        let a = glyph_dataset("c", 2, 3, 32, 7);
        let b = glyph_dataset("c", 2, 3, 32, 7);
        assert_eq!(a[1].1[2], b[1].1[2]);
        assert_eq!(a[0].1[0].id, "c000_00");
        // ink present
        assert!(a[0].1[0].pixels.iter().any(|&p| p < 100));
    }
}
