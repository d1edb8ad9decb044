//! Separable Gaussian filtering with half-sample symmetric boundaries
//! (`d c b a | a b c d | d c b a`), which keeps the image mean unchanged.

use crate::tensor::Real;

/// Normalized 1-D Gaussian taps; `size` must be odd.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    assert!(size % 2 == 1, "gaussian kernel size must be odd");
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Maps an out-of-range index back into `0..n` by mirroring about the edges.
pub fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

fn pass<T: Real>(
    src: &[T],
    h: usize,
    w: usize,
    taps: &[T],
    horizontal: bool,
    adjoint: bool,
) -> Vec<T> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let (pos, len) = if horizontal { (x, w) } else { (y, h) };
            let at = |p: usize| if horizontal { y * w + p } else { p * w + x };
            if adjoint {
                let g = src[y * w + x];
                for (t, &k) in taps.iter().enumerate() {
                    let p = mirror(pos as isize + t as isize - r, len);
                    out[at(p)] = out[at(p)] + k * g;
                }
            } else {
                let mut acc = T::zero();
                for (t, &k) in taps.iter().enumerate() {
                    let p = mirror(pos as isize + t as isize - r, len);
                    acc = acc + k * src[at(p)];
                }
                out[y * w + x] = acc;
            }
        }
    }
    out
}

/// Blurs one `h x w` plane. With `adjoint` set, applies the transpose of the
/// blur operator instead (used for backpropagation).
pub fn blur_plane<T: Real>(src: &[T], h: usize, w: usize, taps: &[T], adjoint: bool) -> Vec<T> {
    if adjoint {
        let tmp = pass(src, h, w, taps, false, true);
        pass(&tmp, h, w, taps, true, true)
    } else {
        let tmp = pass(src, h, w, taps, true, false);
        pass(&tmp, h, w, taps, false, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_is_half_sample_symmetric() {
        let idx: Vec<usize> = (-3..7).map(|i| mirror(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let (h, w) = (5, 7);
        let taps: Vec<f64> = gaussian_kernel(5, 1.0);
        let x: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let y: Vec<f64> = (0..h * w).map(|i| ((i * 13) % 7) as f64 / 7.0).collect();
        let ax = blur_plane(&x, h, w, &taps, false);
        let aty = blur_plane(&y, h, w, &taps, true);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
