//! Evaluation protocols: quality per number of hidden secrets, robustness
//! under attacks, and the embedding-rate-under-threshold sweep.
//!
//! Every test image `i` acts as a cover once; its secrets are the images that
//! follow it (`test[(i + 1 + k) % len]`). Placement and attack randomness for
//! image `i` come from stream `i` of a ChaCha generator seeded with the run
//! seed, so results do not depend on scheduling order.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{load_image, quantize, save_image, ImageTensor};
use crate::distortions::{apply_attack, DistortionSpec};
use crate::embedding::{
    crop, embedding_rate_bpp, extract_regions, local_add_many, make_ground_truth_map,
    sample_regions, strongest_cell, PlacementMode, Region,
};
use crate::error::{LdhError, Result};
use crate::exec;
use crate::metrics::{format_db, locating_iou, PairKind, QualityReport};
use crate::networks::Models;

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const DEFAULT_RATE_THRESHOLDS: [f64; 2] = [26.0, 32.0];

/// Where the receiver takes its crops from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropSource {
    /// Regions extracted from the locating network's map.
    #[default]
    Located,
    /// The true embedding regions (bypasses the locating network).
    GroundTruth,
}

/// Post-processing applied to every revealed secret.
#[derive(Clone)]
pub enum Restoration {
    /// Shell command with `{in}` and `{out}` placeholders for PNG paths.
    Command(String),
    Function(Arc<dyn Fn(&ImageTensor) -> Result<ImageTensor> + Send + Sync>),
}

impl fmt::Debug for Restoration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Command(c) => f.debug_tuple("Command").field(c).finish(),
            Self::Function(_) => f.write_str("Function(..)"),
        }
    }
}

impl Restoration {
    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        match self {
            Self::Function(f) => f(img),
            Self::Command(template) => {
                let dir = tempfile::tempdir().map_err(|e| LdhError::Restoration(e.to_string()))?;
                let input = dir.path().join("in.png");
                let output = dir.path().join("out.png");
                save_image(img, &input)?;
                let cmd = template
                    .replace("{in}", &input.to_string_lossy())
                    .replace("{out}", &output.to_string_lossy());
                let status = Command::new("sh")
                    .arg("-c")
                    .arg(&cmd)
                    .status()
                    .map_err(|e| LdhError::Restoration(format!("{cmd}: {e}")))?;
                if !status.success() {
                    return Err(LdhError::Restoration(format!(
                        "{cmd}: exited with {status}"
                    )));
                }
                let out = load_image(&output)?;
                if !out.same_shape(img) {
                    return Err(LdhError::Restoration(format!(
                        "output is {}x{}, expected {}x{}",
                        out.height(),
                        out.width(),
                        img.height(),
                        img.width()
                    )));
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub n_secrets: usize,
    pub seed: u64,
    /// Round stegos to 8 bits before they reach the receiver.
    pub quantize: bool,
    pub crop_source: CropSource,
    pub threshold: f32,
    pub attack: Option<DistortionSpec>,
    pub restoration: Option<Restoration>,
}

impl EvalOptions {
    pub fn new(n_secrets: usize, seed: u64) -> Self {
        Self {
            n_secrets,
            seed,
            quantize: true,
            crop_source: CropSource::Located,
            threshold: DEFAULT_THRESHOLD,
            attack: None,
            restoration: None,
        }
    }
}

/// Result for one cover.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageOutcome {
    pub regions: Vec<Region>,
    pub detected: Vec<Region>,
    pub stego: QualityReport,
    /// One report per secret, in embedding order.
    pub revealed: Vec<QualityReport>,
    pub iou: f64,
    /// Detected regions equal the embedded ones.
    pub located: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualitySummary {
    pub n_secrets: usize,
    pub images: usize,
    pub stego: QualityReport,
    pub revealed: Option<QualityReport>,
    pub iou: f64,
    pub failure_rate: f64,
    pub outcomes: Vec<ImageOutcome>,
}

fn check_test_set(models: &Models<f32>, test: &[ImageTensor], n: usize) -> Result<()> {
    if test.is_empty() {
        return Err(LdhError::EmptyDataset);
    }
    let cfg = models.config;
    let cap = cfg.omega * cfg.omega;
    if n > cap {
        return Err(LdhError::Config(format!(
            "at most {cap} secrets fit at omega {}",
            cfg.omega
        )));
    }
    if let Some(bad) = test
        .iter()
        .find(|t| t.height() != cfg.image_side || t.width() != cfg.image_side)
    {
        return Err(LdhError::Shape(format!(
            "test image is {}x{}, model expects {}",
            bad.height(),
            bad.width(),
            cfg.image_side
        )));
    }
    Ok(())
}

/// Pairs each true region with a detected one (largest overlap first, then
/// unused detections, then the strongest grid cell).
fn match_regions(truth: &[Region], detected: &[Region], fallback: Region) -> Vec<Region> {
    let mut used = vec![false; detected.len()];
    let mut out = Vec::with_capacity(truth.len());
    for t in truth {
        let best = detected
            .iter()
            .enumerate()
            .filter(|(j, d)| !used[*j] && d.intersection(t) > 0)
            .max_by_key(|(j, d)| (d.intersection(t), std::cmp::Reverse(*j)))
            .map(|(j, _)| j)
            .or_else(|| used.iter().position(|u| !u));
        match best {
            Some(j) => {
                used[j] = true;
                out.push(detected[j]);
            }
            None => out.push(fallback),
        }
    }
    out
}

/// Runs the full sender/receiver pipeline for cover `index`.
pub fn evaluate_image(
    models: &Models<f32>,
    test: &[ImageTensor],
    index: usize,
    opts: &EvalOptions,
) -> Result<ImageOutcome> {
    let cfg = models.config;
    let cover = &test[index];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index as u64);

    let n = opts.n_secrets;
    let secrets: Vec<&ImageTensor> = (0..n)
        .map(|k| &test[(index + 1 + k) % test.len()])
        .collect();
    let regions = if n == 0 {
        Vec::new()
    } else {
        sample_regions(n, cfg.image_side, cfg.omega, &mut rng, PlacementMode::Grid)?
    };
    let codes = models.hide_images(&secrets)?;
    let pairs: Vec<_> = codes.iter().zip(regions.iter().copied()).collect();
    let mut stego = local_add_many(cover, &pairs)?;
    if opts.quantize {
        stego = quantize(&stego);
    }
    let stego_report = QualityReport::measure(PairKind::CoverStego, cover, &stego)?;
    let received = match &opts.attack {
        Some(spec) => apply_attack(spec, &stego, cover, &mut rng)?,
        None => stego,
    };

    let map = models.locate_image(&received)?;
    let truth = make_ground_truth_map(&regions, cfg.image_side)?;
    let iou = locating_iou(&truth, &map.binarize(opts.threshold))?;
    let detected = extract_regions(&map, cfg.omega, opts.threshold);
    let mut sorted_truth = regions.clone();
    sorted_truth.sort();
    let located = detected == sorted_truth;

    let crops = match opts.crop_source {
        CropSource::GroundTruth => regions.clone(),
        CropSource::Located => match_regions(&regions, &detected, strongest_cell(&map, cfg.omega)),
    };
    let patches = crops
        .iter()
        .map(|&r| crop(&received, r))
        .collect::<Result<Vec<_>>>()?;
    let patch_refs: Vec<&ImageTensor> = patches.iter().collect();
    let mut revealed_imgs = models.reveal_patches(&patch_refs)?;
    if let Some(hook) = &opts.restoration {
        revealed_imgs = revealed_imgs
            .iter()
            .map(|r| hook.apply(r))
            .collect::<Result<_>>()?;
    }
    let revealed = secrets
        .iter()
        .zip(&revealed_imgs)
        .map(|(s, r)| QualityReport::measure(PairKind::SecretRevealed, s, r))
        .collect::<Result<Vec<_>>>()?;

    Ok(ImageOutcome {
        regions,
        detected,
        stego: stego_report,
        revealed,
        iou,
        located,
    })
}

/// Evaluates every test image as a cover and averages the results.
pub fn evaluate_with(
    models: &Models<f32>,
    test: &[ImageTensor],
    opts: &EvalOptions,
) -> Result<QualitySummary> {
    check_test_set(models, test, opts.n_secrets)?;
    if let Some(a) = &opts.attack {
        a.validate()?;
    }
    let outcomes = exec::map_indexed(test.len(), |i| evaluate_image(models, test, i, opts))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let stegos: Vec<_> = outcomes.iter().map(|o| o.stego).collect();
    let revealed: Vec<_> = outcomes
        .iter()
        .flat_map(|o| o.revealed.iter().copied())
        .collect();
    let n = outcomes.len() as f64;
    Ok(QualitySummary {
        n_secrets: opts.n_secrets,
        images: outcomes.len(),
        stego: QualityReport::mean(PairKind::CoverStego, &stegos),
        revealed: (!revealed.is_empty())
            .then(|| QualityReport::mean(PairKind::SecretRevealed, &revealed)),
        iou: outcomes.iter().map(|o| o.iou).sum::<f64>() / n,
        failure_rate: outcomes.iter().filter(|o| !o.located).count() as f64 / n,
        outcomes,
    })
}

/// Quality with `n_secrets` hidden per cover, using the full receiver.
pub fn evaluate_quality(
    models: &Models<f32>,
    test: &[ImageTensor],
    n_secrets: usize,
    seed: u64,
) -> Result<QualitySummary> {
    evaluate_with(models, test, &EvalOptions::new(n_secrets, seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    /// Attack in its textual form, `none` for the clean baseline.
    pub attack: String,
    pub summary: QualitySummary,
}

/// One row per attack (one secret per cover).
pub fn evaluate_robustness(
    models: &Models<f32>,
    test: &[ImageTensor],
    attacks: &[DistortionSpec],
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    if attacks.is_empty() {
        return Ok(vec![RobustnessRow {
            attack: "none".into(),
            summary: evaluate_quality(models, test, 1, seed)?,
        }]);
    }
    attacks
        .iter()
        .map(|a| {
            let mut opts = EvalOptions::new(1, seed);
            opts.attack = Some(a.clone());
            Ok(RobustnessRow {
                attack: a.to_string(),
                summary: evaluate_with(models, test, &opts)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RateAnalysisConfig {
    pub thresholds_db: Vec<f64>,
    /// Defaults to `omega^2`.
    pub max_secrets: Option<usize>,
    pub quantize: bool,
    #[serde(skip)]
    pub restoration: Option<Restoration>,
}

impl Default for RateAnalysisConfig {
    fn default() -> Self {
        Self {
            thresholds_db: DEFAULT_RATE_THRESHOLDS.to_vec(),
            max_secrets: None,
            quantize: true,
            restoration: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub n_secrets: usize,
    #[serde(serialize_with = "crate::metrics::serialize_db")]
    pub revealed_psnr: f64,
    pub failure_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateResult {
    pub threshold_db: f64,
    /// Largest swept `n` meeting the threshold, 0 when none does.
    pub n_secrets: usize,
    pub bpp: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub sweep: Vec<SweepPoint>,
    pub rates: Vec<RateResult>,
}

/// Applies the threshold rule to an existing sweep.
pub fn rates_from_sweep(sweep: &[SweepPoint], thresholds: &[f64]) -> Vec<RateResult> {
    thresholds
        .iter()
        .map(|&t| {
            let n = sweep
                .iter()
                .filter(|p| p.revealed_psnr >= t)
                .map(|p| p.n_secrets)
                .max()
                .unwrap_or(0);
            RateResult {
                threshold_db: t,
                n_secrets: n,
                bpp: embedding_rate_bpp(n),
            }
        })
        .collect()
}

/// Sweeps `n = 1..=max_secrets` on a fixed pairing and reports, per
/// threshold, the highest payload whose mean revealed PSNR meets it.
pub fn max_embedding_rate(
    models: &Models<f32>,
    test: &[ImageTensor],
    config: &RateAnalysisConfig,
    seed: u64,
) -> Result<RateReport> {
    let cap = models.config.omega * models.config.omega;
    let max = config.max_secrets.unwrap_or(cap);
    if max == 0 || max > cap {
        return Err(LdhError::Config(format!(
            "max_secrets must be in 1..={cap}, got {max}"
        )));
    }
    if let Some(t) = config.thresholds_db.iter().find(|t| !(**t > 0.0)) {
        return Err(LdhError::Config(format!(
            "thresholds must be positive, got {t}"
        )));
    }
    let mut sweep = Vec::with_capacity(max);
    for n in 1..=max {
        let mut opts = EvalOptions::new(n, seed);
        opts.quantize = config.quantize;
        opts.restoration = config.restoration.clone();
        let s = evaluate_with(models, test, &opts)?;
        sweep.push(SweepPoint {
            n_secrets: n,
            revealed_psnr: s.revealed.map_or(f64::NAN, |r| r.psnr),
            failure_rate: s.failure_rate,
        });
    }
    let rates = rates_from_sweep(&sweep, &config.thresholds_db);
    Ok(RateReport { sweep, rates })
}

fn csv_err(e: csv::Error) -> LdhError {
    LdhError::Report(e.to_string())
}

/// CSV: `n_secrets, pair_kind, apd, psnr, ssim, iou, failure_rate`.
pub fn write_quality_csv(rows: &[QualitySummary], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "n_secrets",
        "pair_kind",
        "apd",
        "psnr",
        "ssim",
        "iou",
        "failure_rate",
    ])
    .map_err(csv_err)?;
    for s in rows {
        for r in std::iter::once(&s.stego).chain(s.revealed.as_ref()) {
            w.write_record([
                s.n_secrets.to_string(),
                r.pair_kind.to_string(),
                r.apd.to_string(),
                format_db(r.psnr),
                r.ssim.to_string(),
                s.iou.to_string(),
                s.failure_rate.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| LdhError::Report(e.to_string()))
}

/// CSV: `attack, apd, psnr, ssim, failure_rate` for the revealed secrets.
pub fn write_robustness_csv(rows: &[RobustnessRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["attack", "apd", "psnr", "ssim", "failure_rate"])
        .map_err(csv_err)?;
    for row in rows {
        let r = row
            .summary
            .revealed
            .expect("robustness rows hide one secret");
        w.write_record([
            row.attack.clone(),
            r.apd.to_string(),
            format_db(r.psnr),
            r.ssim.to_string(),
            row.summary.failure_rate.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| LdhError::Report(e.to_string()))
}

/// Two CSV tables: the sweep and the per-threshold rates.
pub fn write_rate_csv(
    report: &RateReport,
    sweep_out: impl Write,
    rates_out: impl Write,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sweep_out);
    for p in &report.sweep {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush().map_err(|e| LdhError::Report(e.to_string()))?;
    let mut w = csv::Writer::from_writer(rates_out);
    for r in &report.rates {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| LdhError::Report(e.to_string()))
}

fn render(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        format!("| {} |\n", parts.join(" | "))
    };
    let mut out = line(headers.to_vec());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

fn db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.3}")
    }
}

/// Plain-text table: one row per secret count and pair kind.
pub fn quality_table(rows: &[QualitySummary]) -> String {
    let mut cells = Vec::new();
    for s in rows {
        for r in std::iter::once(&s.stego).chain(s.revealed.as_ref()) {
            cells.push(vec![
                s.n_secrets.to_string(),
                r.pair_kind.to_string(),
                format!("{:.3}", r.apd),
                db(r.psnr),
                format!("{:.4}", r.ssim),
                format!("{:.3}", s.iou),
                format!("{:.3}", s.failure_rate),
            ]);
        }
    }
    render(&["n", "pair", "APD", "PSNR", "SSIM", "IoU", "fail"], &cells)
}

pub fn robustness_table(rows: &[RobustnessRow]) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let r = row
                .summary
                .revealed
                .expect("robustness rows hide one secret");
            vec![
                row.attack.clone(),
                format!("{:.3}", r.apd),
                db(r.psnr),
                format!("{:.4}", r.ssim),
                format!("{:.3}", row.summary.failure_rate),
            ]
        })
        .collect();
    render(&["attack", "APD", "PSNR", "SSIM", "fail"], &cells)
}

pub fn rate_table(report: &RateReport) -> String {
    let cells: Vec<Vec<String>> = report
        .rates
        .iter()
        .map(|r| {
            vec![
                format!("PSNR>={}dB", r.threshold_db),
                r.n_secrets.to_string(),
                format!("{}x24 = {} bpp", r.n_secrets, r.bpp),
            ]
        })
        .collect();
    render(&["threshold", "secrets", "rate"], &cells)
}

pub fn save_text(text: &str, path: &Path) -> Result<()> {
    std::fs::write(path, text).map_err(|e| LdhError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::NetworkConfig;
    use crate::synth;

    fn setup() -> (Models<f32>, Vec<ImageTensor>) {
        let models = Models::init(NetworkConfig::new(2, 8, 32), 1).unwrap();
        (models, synth::dataset(4, 32, 2))
    }

    #[test]
    fn zero_secrets_leave_the_cover_alone() {
        let (m, test) = setup();
        let s = evaluate_quality(&m, &test, 0, 0).unwrap();
        assert_eq!(s.stego.apd, 0.0);
        assert_eq!(s.stego.psnr, f64::INFINITY);
        assert!(s.revealed.is_none());
    }

    #[test]
    fn evaluation_is_deterministic_in_both_modes() {
        let (m, test) = setup();
        let a = evaluate_quality(&m, &test, 2, 9).unwrap();
        exec::set_mode(exec::Mode::Sequential);
        let b = evaluate_quality(&m, &test, 2, 9).unwrap();
        exec::set_mode(exec::Mode::Parallel);
        assert_eq!(a, b);
        assert_ne!(a, evaluate_quality(&m, &test, 2, 10).unwrap());
    }

    #[test]
    fn too_many_secrets_or_wrong_size_is_an_error() {
        let (m, test) = setup();
        assert!(evaluate_quality(&m, &test, 5, 0).is_err());
        assert!(evaluate_quality(&m, &synth::dataset(2, 16, 0), 1, 0).is_err());
        assert!(matches!(
            evaluate_quality(&m, &[], 1, 0),
            Err(LdhError::EmptyDataset)
        ));
    }

    #[test]
    fn matching_prefers_overlap_then_leftovers() {
        let a = Region::new(0, 0, 4);
        let b = Region::new(0, 4, 4);
        let c = Region::new(4, 0, 4);
        let fallback = Region::new(4, 4, 4);
        assert_eq!(match_regions(&[a, b], &[b, a], fallback), vec![a, b]);
        assert_eq!(match_regions(&[a, b], &[c], fallback), vec![c, fallback]);
        assert_eq!(match_regions(&[a], &[], fallback), vec![fallback]);
    }

    #[test]
    fn rate_rule_and_tables() {
        let sweep: Vec<SweepPoint> = [(1, 35.0), (2, 30.0), (3, 33.0), (4, 20.0)]
            .iter()
            .map(|&(n, p)| SweepPoint {
                n_secrets: n,
                revealed_psnr: p,
                failure_rate: 0.0,
            })
            .collect();
        let rates = rates_from_sweep(&sweep, &[10.0, 26.0, 32.0, 40.0]);
        let ns: Vec<_> = rates.iter().map(|r| r.n_secrets).collect();
        assert_eq!(ns, vec![4, 3, 3, 0]);
        assert_eq!(rates[1].bpp, 72);
        let report = RateReport { sweep, rates };
        assert!(rate_table(&report).contains("3x24 = 72 bpp"));
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_rate_csv(&report, &mut a, &mut b).unwrap();
        assert!(String::from_utf8(b)
            .unwrap()
            .starts_with("threshold_db,n_secrets,bpp\n10.0,4,96\n"));
    }

    #[test]
    fn function_hook_is_applied() {
        let (m, test) = setup();
        let mut opts = EvalOptions::new(1, 3);
        let plain = evaluate_with(&m, &test, &opts).unwrap();
        opts.restoration = Some(Restoration::Function(Arc::new(|img: &ImageTensor| {
            Ok(img.clone())
        })));
        assert_eq!(evaluate_with(&m, &test, &opts).unwrap(), plain);
        opts.restoration = Some(Restoration::Function(Arc::new(|img: &ImageTensor| {
            Ok(ImageTensor::filled(img.height(), img.width(), 0.5))
        })));
        assert_ne!(
            evaluate_with(&m, &test, &opts).unwrap().revealed,
            plain.revealed
        );
    }
}
