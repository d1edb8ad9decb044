//! Procedural "natural-looking" images: smooth gradients, soft-edged shapes
//! and mild texture. Used for demos and desk-scale experiments when no photo
//! collection is at hand.

use rand::Rng;

use crate::dataset_io::ImageTensor;
use crate::distortions::blur;

fn random_colour(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Draws one `side x side` image from `rng`. Values stay inside `[0, 1]`.
pub fn natural_like(side: usize, rng: &mut impl Rng) -> ImageTensor {
    let s = side as f32;
    let c0 = random_colour(rng);
    let c1 = random_colour(rng);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());

    let mut planes = vec![0.0f32; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let t = ((x as f32 / s - 0.5) * dx + (y as f32 / s - 0.5) * dy + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                planes[(c * side + y) * side + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let colour = random_colour(rng);
        let cy = rng.random_range(0.0..s);
        let cx = rng.random_range(0.0..s);
        let ry = rng.random_range(0.08..0.35) * s;
        let rx = rng.random_range(0.08..0.35) * s;
        let ellipse = rng.random_bool(0.5);
        let alpha: f32 = rng.random_range(0.5..1.0);
        for y in 0..side {
            for x in 0..side {
                let u = (x as f32 - cx) / rx;
                let v = (y as f32 - cy) / ry;
                let d = if ellipse {
                    (u * u + v * v).sqrt()
                } else {
                    u.abs().max(v.abs())
                };
                // One-pixel-wide soft edge.
                let cover = ((1.0 - d) * rx.min(ry)).clamp(0.0, 1.0) * alpha;
                if cover > 0.0 {
                    for c in 0..3 {
                        let p = &mut planes[(c * side + y) * side + x];
                        *p = *p * (1.0 - cover) + colour[c] * cover;
                    }
                }
            }
        }
    }

    // Low-amplitude texture, then a light blur to keep edges natural.
    let amp: f32 = rng.random_range(0.0..0.04);
    for p in planes.iter_mut() {
        *p += amp * (rng.random::<f32>() - 0.5);
    }
    let taps: Vec<f32> = blur::gaussian_kernel(3, 0.7)
        .into_iter()
        .map(|t| t as f32)
        .collect();
    let mut out = Vec::with_capacity(planes.len());
    for c in 0..3 {
        out.extend(blur::blur_plane(
            &planes[c * side * side..][..side * side],
            side,
            side,
            &taps,
            false,
        ));
    }
    ImageTensor::from_clamped(side, side, out)
}

/// `count` images from one seeded stream, each quantized to 8 bits like a
/// file-backed dataset.
pub fn dataset(count: usize, side: usize, seed: u64) -> Vec<ImageTensor> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| crate::dataset_io::quantize(&natural_like(side, &mut rng)))
        .collect()
}
