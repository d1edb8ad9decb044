//! Image quality metrics (APD, MSE, PSNR, SSIM) and locating IoU.
//!
//! Images are compared on the `[0, 1]` scale; APD is reported on the 0-255
//! scale and PSNR uses a peak value of 1.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize, Serializer};

use crate::dataset_io::ImageTensor;
use crate::embedding::LocationMap;
use crate::error::{LdhError, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(LdhError::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Mean absolute difference over every element, times 255.
pub fn apd(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(sum / a.data().len() as f64 * 255.0)
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Which SSIM formulation to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsimMode {
    /// Gaussian-weighted local statistics averaged over valid window positions.
    #[default]
    Windowed,
    /// One window covering the whole channel.
    Global,
}

fn ssim_term(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    let c1 = (SSIM_K1).powi(2);
    let c2 = (SSIM_K2).powi(2);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_channel_windowed(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64]) -> f64 {
    let prod =
        |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, g);
    let mu_b = filter_valid(b, h, w, g);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, g);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, g);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, g);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            ssim_term(ma, mb, aa[i] - ma * ma, bb[i] - mb * mb, ab[i] - ma * mb)
        })
        .sum::<f64>()
        / n as f64
}

fn ssim_channel_global(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    ssim_term(ma, mb, va / n, vb / n, cov / n)
}

/// Windowed SSIM averaged over the three channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ssim_with(a, b, SsimMode::Windowed)
}

pub fn ssim_with(a: &ImageTensor, b: &ImageTensor, mode: SsimMode) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if mode == SsimMode::Windowed && (h < SSIM_WINDOW || w < SSIM_WINDOW) {
        return Err(LdhError::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    if a.data() == b.data() {
        return Ok(1.0);
    }
    let g = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.data()[c * plane..(c + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let pb: Vec<f64> = b.data()[c * plane..(c + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .collect();
        total += match mode {
            SsimMode::Windowed => ssim_channel_windowed(&pa, &pb, h, w, &g),
            SsimMode::Global => ssim_channel_global(&pa, &pb),
        };
    }
    Ok(total / 3.0)
}

/// Intersection over union of two binary maps; two empty maps score 1.
pub fn locating_iou(truth: &LocationMap, pred: &LocationMap) -> Result<f64> {
    if truth.height() != pred.height() || truth.width() != pred.width() {
        return Err(LdhError::Shape("location maps differ in size".into()));
    }
    if !truth.is_binary() || !pred.is_binary() {
        return Err(LdhError::NonBinaryMap);
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&t, &p) in truth.values().iter().zip(pred.values()) {
        let (t, p) = (t > 0.5, p > 0.5);
        inter += (t && p) as usize;
        union += (t || p) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairKind {
    #[serde(rename = "cover-stego")]
    CoverStego,
    #[serde(rename = "secret-revealed")]
    SecretRevealed,
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CoverStego => "cover-stego",
            Self::SecretRevealed => "secret-revealed",
        })
    }
}

impl FromStr for PairKind {
    type Err = LdhError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cover-stego" => Ok(Self::CoverStego),
            "secret-revealed" => Ok(Self::SecretRevealed),
            _ => Err(LdhError::Config(format!("unknown pair kind '{s}'"))),
        }
    }
}

/// Writes infinite PSNR as the string `inf`.
pub fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format_db(*v))
}

pub fn format_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QualityReport {
    pub pair_kind: PairKind,
    pub apd: f64,
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
}

impl QualityReport {
    pub fn measure(kind: PairKind, a: &ImageTensor, b: &ImageTensor) -> Result<Self> {
        Ok(Self {
            pair_kind: kind,
            apd: apd(a, b)?,
            psnr: psnr(a, b)?,
            ssim: ssim(a, b)?,
        })
    }

    /// Element-wise mean of several reports of the same kind.
    pub fn mean(kind: PairKind, reports: &[QualityReport]) -> Self {
        let n = reports.len().max(1) as f64;
        Self {
            pair_kind: kind,
            apd: reports.iter().map(|r| r.apd).sum::<f64>() / n,
            psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        }
    }
}

/// CSV with columns `pair_kind, apd, psnr, ssim`.
pub fn write_reports_csv(reports: &[QualityReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)
            .map_err(|e| LdhError::Report(e.to_string()))?;
    }
    w.flush().map_err(|e| LdhError::Report(e.to_string()))?;
    Ok(())
}

pub fn save_reports_csv(reports: &[QualityReport], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| LdhError::io(path, e))?;
    write_reports_csv(reports, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{make_ground_truth_map, Region};

    fn constant(side: usize, v: f32) -> ImageTensor {
        ImageTensor::filled(side, side, v)
    }

    #[test]
    fn analytic_anchors() {
        let a = constant(16, 0.3);
        let b = constant(16, 0.4);
        assert!((apd(&a, &b).unwrap() - 25.5).abs() < 1e-4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(apd(&a, &a).unwrap(), 0.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_flat_black_and_white() {
        // Zero variances leave (c1 * c2) / ((1 + c1) * c2) = c1 / (1 + c1).
        let c1 = SSIM_K1 * SSIM_K1;
        let expected = c1 / (1.0 + c1);
        for mode in [SsimMode::Windowed, SsimMode::Global] {
            let s = ssim_with(&constant(16, 0.0), &constant(16, 1.0), mode).unwrap();
            assert!((s - expected).abs() < 1e-12, "{mode:?}: {s}");
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = constant(8, 0.0);
        assert!(ssim(&a, &a).is_err());
        assert!(ssim_with(&a, &a, SsimMode::Global).is_ok());
        assert!(apd(&a, &constant(9, 0.0)).is_err());
    }

    #[test]
    fn iou_cases() {
        let r = |t, l| make_ground_truth_map(&[Region::new(t, l, 4)], 8).unwrap();
        let empty = LocationMap::zeros(8, 8);
        assert_eq!(locating_iou(&r(0, 0), &r(0, 0)).unwrap(), 1.0);
        assert_eq!(locating_iou(&r(0, 0), &r(4, 4)).unwrap(), 0.0);
        assert!((locating_iou(&r(0, 0), &r(0, 2)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(locating_iou(&empty, &empty).unwrap(), 1.0);
        let soft = LocationMap::new(8, 8, vec![0.5; 64]).unwrap();
        assert!(matches!(
            locating_iou(&soft, &empty),
            Err(LdhError::NonBinaryMap)
        ));
    }

    #[test]
    fn csv_uses_inf_sentinel() {
        let r = QualityReport {
            pair_kind: PairKind::CoverStego,
            apd: 0.0,
            psnr: f64::INFINITY,
            ssim: 1.0,
        };
        let mut buf = Vec::new();
        write_reports_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "pair_kind,apd,psnr,ssim\ncover-stego,0.0,inf,1.0\n");
    }
}
