//! Baseline JPEG (4:4:4, Annex K tables) as an image-to-image operator.
//!
//! The same pipeline serves two purposes: with [`Rounding::Soft`] it is a
//! differentiable noise layer for training, with [`Rounding::Hard`] it is the
//! lossy codec used when attacking stego images at evaluation time.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::tensor::Real;

#[rustfmt::skip]
const LUMA_QTABLE: [u16; 64] = [
    16, 11, 10, 16,  24,  40,  51,  61,
    12, 12, 14, 19,  26,  58,  60,  55,
    14, 13, 16, 24,  40,  57,  69,  56,
    14, 17, 22, 29,  51,  87,  80,  62,
    18, 22, 37, 56,  68, 109, 103,  77,
    24, 35, 55, 64,  81, 104, 113,  92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103,  99,
];

#[rustfmt::skip]
const CHROMA_QTABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

const RGB_TO_YCC: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
];

/// How quantized DCT coefficients are rounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    /// `r(x) = x - sin(2 pi x) / (2 pi)`: smooth, differentiable everywhere.
    Soft,
    /// Nearest integer, plus 8-bit output quantization, as a real codec does.
    Hard,
}

/// Quality-scaled luma and chroma tables (IJG scaling, entries in 1..=255).
pub fn quant_tables(quality: u8) -> [[f64; 64]; 2] {
    let q = u32::from(quality.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [[0.0; 64]; 2];
    for (dst, src) in out.iter_mut().zip([&LUMA_QTABLE, &CHROMA_QTABLE]) {
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            *d = ((u32::from(s) * scale + 50) / 100).clamp(1, 255) as f64;
        }
    }
    out
}

fn dct_matrix() -> &'static [[f64; 8]; 8] {
    static M: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    M.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (u, row) in m.iter_mut().enumerate() {
            let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = c * (((2 * x + 1) as f64 * u as f64 * PI) / 16.0).cos();
            }
        }
        m
    })
}

fn ycc_to_rgb() -> &'static [[f64; 3]; 3] {
    static M: OnceLock<[[f64; 3]; 3]> = OnceLock::new();
    M.get_or_init(|| invert3(&RGB_TO_YCC))
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

/// Applies `D * B * D^T` (forward) or `D^T * B * D` (inverse) to every 8x8
/// block of a plane in place.
fn block_transform<T: Real>(plane: &mut [T], h: usize, w: usize, inverse: bool) {
    let d = dct_matrix();
    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for (y, row) in block.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    *v = plane[(by + y) * w + bx + x].as_f64();
                }
            }
            // tmp = A * block, then out = tmp * A^T with A = D or D^T.
            for i in 0..8 {
                for j in 0..8 {
                    let mut acc = 0.0;
                    for k in 0..8 {
                        let a = if inverse { d[k][i] } else { d[i][k] };
                        acc += a * block[k][j];
                    }
                    tmp[i][j] = acc;
                }
            }
            for i in 0..8 {
                for j in 0..8 {
                    let mut acc = 0.0;
                    for k in 0..8 {
                        let a = if inverse { d[k][j] } else { d[j][k] };
                        acc += tmp[i][k] * a;
                    }
                    plane[(by + i) * w + bx + j] = T::lit(acc);
                }
            }
        }
    }
}

/// Intermediate values the backward pass needs.
#[derive(Debug, Clone)]
pub struct JpegTrace<T> {
    /// Quantized (pre-rounding) coefficients, stored block-in-place per plane.
    levels: Vec<T>,
    /// Output pixels that were not clipped.
    pass: Vec<bool>,
}

/// Runs the codec on a planar RGB image with values in `[0, 1]`.
/// Panics unless `h` and `w` are multiples of 8.
pub fn forward<T: Real>(
    rgb: &[T],
    h: usize,
    w: usize,
    quality: u8,
    rounding: Rounding,
) -> (Vec<T>, JpegTrace<T>) {
    assert!(h.is_multiple_of(8) && w.is_multiple_of(8), "JPEG needs sides divisible by 8");
    let plane = h * w;
    assert_eq!(rgb.len(), 3 * plane);
    let tables = quant_tables(quality);

    let mut ycc = vec![T::zero(); 3 * plane];
    for p in 0..plane {
        let px = [
            rgb[p].as_f64(),
            rgb[plane + p].as_f64(),
            rgb[2 * plane + p].as_f64(),
        ];
        for (c, row) in RGB_TO_YCC.iter().enumerate() {
            let mut v = 255.0 * (row[0] * px[0] + row[1] * px[1] + row[2] * px[2]);
            if c == 0 {
                v -= 128.0;
            }
            ycc[c * plane + p] = T::lit(v);
        }
    }

    let mut levels = ycc;
    for c in 0..3 {
        let table = &tables[usize::from(c > 0)];
        let chan = &mut levels[c * plane..(c + 1) * plane];
        block_transform(chan, h, w, false);
        for (i, v) in chan.iter_mut().enumerate() {
            let q = table[(i / w % 8) * 8 + i % w % 8];
            *v = T::lit(v.as_f64() / q);
        }
    }

    let mut coef = levels.clone();
    for c in 0..3 {
        let table = &tables[usize::from(c > 0)];
        let chan = &mut coef[c * plane..(c + 1) * plane];
        for (i, v) in chan.iter_mut().enumerate() {
            let x = v.as_f64();
            let r = match rounding {
                Rounding::Soft => x - (2.0 * PI * x).sin() / (2.0 * PI),
                Rounding::Hard => x.round(),
            };
            *v = T::lit(r * table[(i / w % 8) * 8 + i % w % 8]);
        }
        block_transform(chan, h, w, true);
    }

    let inv = ycc_to_rgb();
    let mut out = vec![T::zero(); 3 * plane];
    let mut pass = vec![true; 3 * plane];
    for p in 0..plane {
        let y = [
            coef[p].as_f64() + 128.0,
            coef[plane + p].as_f64(),
            coef[2 * plane + p].as_f64(),
        ];
        for c in 0..3 {
            let v = (inv[c][0] * y[0] + inv[c][1] * y[1] + inv[c][2] * y[2]) / 255.0;
            let i = c * plane + p;
            pass[i] = (0.0..=1.0).contains(&v);
            let v = v.clamp(0.0, 1.0);
            out[i] = T::lit(match rounding {
                Rounding::Soft => v,
                Rounding::Hard => (v * 255.0).round() / 255.0,
            });
        }
    }
    (out, JpegTrace { levels, pass })
}

/// Gradient of the soft-rounding pipeline with respect to its input.
pub fn backward<T: Real>(grad: &[T], h: usize, w: usize, trace: &JpegTrace<T>) -> Vec<T> {
    let plane = h * w;
    let inv = ycc_to_rgb();
    // Through the clip and the inverse colour transform (scale 1/255).
    let mut g = vec![T::zero(); 3 * plane];
    for p in 0..plane {
        let gr: [f64; 3] = std::array::from_fn(|c| {
            let i = c * plane + p;
            if trace.pass[i] {
                grad[i].as_f64() / 255.0
            } else {
                0.0
            }
        });
        for k in 0..3 {
            g[k * plane + p] = T::lit(inv[0][k] * gr[0] + inv[1][k] * gr[1] + inv[2][k] * gr[2]);
        }
    }
    // Adjoint of the inverse DCT is the forward DCT; the table scale cancels
    // between dequantization and quantization, leaving r'(x) = 1 - cos(2 pi x).
    for c in 0..3 {
        let chan = &mut g[c * plane..(c + 1) * plane];
        block_transform(chan, h, w, false);
        for (v, l) in chan
            .iter_mut()
            .zip(&trace.levels[c * plane..(c + 1) * plane])
        {
            let d = 1.0 - (2.0 * PI * l.as_f64()).cos();
            *v = T::lit(v.as_f64() * d);
        }
        block_transform(chan, h, w, true);
    }
    // Through the forward colour transform (scale 255).
    let mut out = vec![T::zero(); 3 * plane];
    for p in 0..plane {
        let gy = [
            g[p].as_f64(),
            g[plane + p].as_f64(),
            g[2 * plane + p].as_f64(),
        ];
        for k in 0..3 {
            let v = RGB_TO_YCC[0][k] * gy[0] + RGB_TO_YCC[1][k] * gy[1] + RGB_TO_YCC[2][k] * gy[2];
            out[k * plane + p] = T::lit(255.0 * v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_fifty_uses_base_tables() {
        let t = quant_tables(50);
        assert_eq!(t[0][0], 16.0);
        assert_eq!(t[1][63], 99.0);
        let t100 = quant_tables(100);
        assert!(t100.iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn dct_round_trip_is_identity() {
        let mut plane: Vec<f64> = (0..256).map(|i| ((i * 7919) % 255) as f64).collect();
        let orig = plane.clone();
        block_transform(&mut plane, 16, 16, false);
        block_transform(&mut plane, 16, 16, true);
        for (a, b) in plane.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn colour_transform_inverts() {
        let inv = ycc_to_rgb();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| inv[i][k] * RGB_TO_YCC[k][j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        // The familiar JFIF decode constant.
        assert!((inv[0][2] - 1.402).abs() < 1e-3);
    }
}
