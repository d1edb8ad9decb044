//! Noise layers for adversarial training and attacks for robustness evaluation.

pub mod blur;
pub mod jpeg;

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset_io::ImageTensor;
use crate::error::{LdhError, Result};

pub const DEFAULT_DROPOUT: f64 = 0.3;
pub const DEFAULT_BLUR_KERNEL: usize = 5;
pub const DEFAULT_BLUR_SIGMA: f64 = 1.0;
pub const DEFAULT_JPEG_QUALITY: u8 = 80;
pub const DEFAULT_CROP_GRID: usize = 4;

/// Which blocks a crop-style attack erases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockSelection {
    /// Row-major block indices.
    Explicit(Vec<usize>),
    /// This many distinct blocks drawn at random per image.
    Random(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    /// Erased blocks become zeros.
    Crop,
    /// Erased blocks are refilled from the cover.
    Cropout,
}

/// A distortion with its parameters. Textual form: `kind[:key=value,...]`,
/// e.g. `jpeg:q=80`, `gaussian:k=5,sigma=1.0`, `crop:blocks=3,7`,
/// `cropout:random=2,grid=4`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DistortionSpec {
    Dropout {
        p: f64,
    },
    Gaussian {
        kernel: usize,
        sigma: f64,
    },
    Jpeg {
        quality: u8,
    },
    Crop {
        mode: CropMode,
        blocks: BlockSelection,
        grid: usize,
    },
}

impl DistortionSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Dropout { p } if !(0.0..=1.0).contains(p) => Err(LdhError::Distortion(format!(
                "dropout p={p} outside [0, 1]"
            ))),
            Self::Gaussian { kernel, sigma } if kernel % 2 == 0 || *sigma <= 0.0 => {
                Err(LdhError::Distortion(format!(
                    "gaussian needs an odd kernel and sigma > 0, got k={kernel} sigma={sigma}"
                )))
            }
            Self::Jpeg { quality } if !(1..=100).contains(quality) => Err(LdhError::Distortion(
                format!("jpeg quality {quality} outside 1..=100"),
            )),
            Self::Crop { blocks, grid, .. } => {
                let total = grid * grid;
                if *grid == 0 {
                    return Err(LdhError::Distortion("crop grid must be positive".into()));
                }
                match blocks {
                    BlockSelection::Explicit(ix) if ix.iter().any(|&i| i >= total) => {
                        Err(LdhError::Distortion(format!(
                            "block index out of range 0..{total}: {ix:?}"
                        )))
                    }
                    BlockSelection::Random(k) if *k > total => Err(LdhError::Distortion(format!(
                        "cannot pick {k} of {total} blocks"
                    ))),
                    _ => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }

    /// True for the three global noise layers usable during training.
    pub fn is_noise_layer(&self) -> bool {
        !matches!(self, Self::Crop { .. })
    }

    pub fn dropout() -> Self {
        Self::Dropout { p: DEFAULT_DROPOUT }
    }

    pub fn gaussian() -> Self {
        Self::Gaussian {
            kernel: DEFAULT_BLUR_KERNEL,
            sigma: DEFAULT_BLUR_SIGMA,
        }
    }

    pub fn jpeg() -> Self {
        Self::Jpeg {
            quality: DEFAULT_JPEG_QUALITY,
        }
    }
}

impl fmt::Display for DistortionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dropout { p } => write!(f, "dropout:p={p}"),
            Self::Gaussian { kernel, sigma } => write!(f, "gaussian:k={kernel},sigma={sigma}"),
            Self::Jpeg { quality } => write!(f, "jpeg:q={quality}"),
            Self::Crop { mode, blocks, grid } => {
                let kind = match mode {
                    CropMode::Crop => "crop",
                    CropMode::Cropout => "cropout",
                };
                match blocks {
                    BlockSelection::Explicit(ix) => {
                        let list: Vec<String> = ix.iter().map(usize::to_string).collect();
                        write!(f, "{kind}:blocks={},grid={grid}", list.join(","))
                    }
                    BlockSelection::Random(k) => write!(f, "{kind}:random={k},grid={grid}"),
                }
            }
        }
    }
}

impl From<DistortionSpec> for String {
    fn from(d: DistortionSpec) -> String {
        d.to_string()
    }
}

impl TryFrom<String> for DistortionSpec {
    type Error = LdhError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for DistortionSpec {
    type Err = LdhError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| LdhError::Distortion(format!("{s:?}: {msg}"));
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        // `key=v1,v2,key2=v3`: bare tokens extend the previous key's list.
        let mut params: Vec<(String, Vec<String>)> = Vec::new();
        for tok in rest.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok.split_once('=') {
                Some((k, v)) => params.push((k.trim().to_string(), vec![v.trim().to_string()])),
                None => match params.last_mut() {
                    Some((_, vals)) => vals.push(tok.to_string()),
                    None => return Err(bad(format!("value {tok:?} without a key"))),
                },
            }
        }
        let get = |keys: &[&str]| params.iter().find(|(k, _)| keys.contains(&k.as_str()));
        fn num<T: FromStr>(v: &str, s: &str) -> Result<T> {
            v.parse()
                .map_err(|_| LdhError::Distortion(format!("{s:?}: cannot parse {v:?}")))
        }
        let allowed: &[&str] = match kind {
            "dropout" => &["p"],
            "gaussian" | "blur" => &["k", "kernel", "sigma"],
            "jpeg" => &["q", "quality"],
            "crop" | "cropout" => &["blocks", "random", "grid"],
            other => return Err(bad(format!("unknown distortion kind {other:?}"))),
        };
        if let Some((k, _)) = params.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            return Err(bad(format!("unknown parameter {k:?}")));
        }
        let spec = match kind {
            "dropout" => Self::Dropout {
                p: get(&["p"]).map_or(Ok(DEFAULT_DROPOUT), |(_, v)| num(&v[0], s))?,
            },
            "gaussian" | "blur" => Self::Gaussian {
                kernel: get(&["k", "kernel"])
                    .map_or(Ok(DEFAULT_BLUR_KERNEL), |(_, v)| num(&v[0], s))?,
                sigma: get(&["sigma"]).map_or(Ok(DEFAULT_BLUR_SIGMA), |(_, v)| num(&v[0], s))?,
            },
            "jpeg" => Self::Jpeg {
                quality: get(&["q", "quality"])
                    .map_or(Ok(DEFAULT_JPEG_QUALITY), |(_, v)| num(&v[0], s))?,
            },
            _ => {
                let mode = if kind == "crop" {
                    CropMode::Crop
                } else {
                    CropMode::Cropout
                };
                let grid = get(&["grid"]).map_or(Ok(DEFAULT_CROP_GRID), |(_, v)| num(&v[0], s))?;
                let blocks = match (get(&["blocks"]), get(&["random"])) {
                    (Some((_, v)), None) => BlockSelection::Explicit(
                        v.iter()
                            .map(|x| num(x, s))
                            .collect::<Result<Vec<usize>>>()?,
                    ),
                    (None, Some((_, v))) => BlockSelection::Random(num(&v[0], s)?),
                    (None, None) => BlockSelection::Random(1),
                    (Some(_), Some(_)) => return Err(bad("give either blocks= or random=".into())),
                };
                Self::Crop { mode, blocks, grid }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-pixel replacement flags with probability `p` (one flag per pixel,
/// shared across channels).
pub fn dropout_mask(pixels: usize, p: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..pixels)
        .map(|_| rng.random_bool(p.clamp(0.0, 1.0)))
        .collect()
}

/// Replaces each stego pixel by the cover pixel with probability `p`.
pub fn dropout_noise(
    stego: &ImageTensor,
    cover: &ImageTensor,
    p: f64,
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    if !stego.same_shape(cover) {
        return Err(LdhError::Shape(
            "dropout: stego and cover differ in size".into(),
        ));
    }
    DistortionSpec::Dropout { p }.validate()?;
    let (h, w) = (stego.height(), stego.width());
    let mask = dropout_mask(h * w, p, rng);
    let mut data = stego.data().to_vec();
    for c in 0..3 {
        for (i, &m) in mask.iter().enumerate() {
            if m {
                data[c * h * w + i] = cover.data()[c * h * w + i];
            }
        }
    }
    Ok(ImageTensor::from_clamped(h, w, data))
}

/// Per-channel Gaussian blur (normalized kernel, mirrored borders).
pub fn gaussian_blur(img: &ImageTensor, kernel: usize, sigma: f64) -> Result<ImageTensor> {
    DistortionSpec::Gaussian { kernel, sigma }.validate()?;
    let taps = blur::gaussian_kernel(kernel, sigma);
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let plane: Vec<f64> = img.data()[c * h * w..][..h * w]
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        data.extend(
            blur::blur_plane(&plane, h, w, &taps, false)
                .into_iter()
                .map(|v| v as f32),
        );
    }
    Ok(ImageTensor::from_clamped(h, w, data))
}

fn jpeg_common(img: &ImageTensor, quality: u8, rounding: jpeg::Rounding) -> Result<ImageTensor> {
    DistortionSpec::Jpeg { quality }.validate()?;
    let (h, w) = (img.height(), img.width());
    if h % 8 != 0 || w % 8 != 0 {
        return Err(LdhError::Shape(format!(
            "JPEG needs sides divisible by 8, got {h}x{w}"
        )));
    }
    let src: Vec<f64> = img.data().iter().map(|&v| f64::from(v)).collect();
    let (out, _) = jpeg::forward(&src, h, w, quality, rounding);
    Ok(ImageTensor::from_clamped(
        h,
        w,
        out.into_iter().map(|v| v as f32).collect(),
    ))
}

/// Differentiable JPEG approximation (soft rounding of quantized coefficients).
pub fn jpeg_approx(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    jpeg_common(img, quality, jpeg::Rounding::Soft)
}

/// Lossy JPEG with true rounding and 8-bit output, as used by attacks.
pub fn jpeg_compress(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    jpeg_common(img, quality, jpeg::Rounding::Hard)
}

/// Pixel bounds `(top, left, height, width)` of block `index` in a
/// `grid x grid` tiling.
pub fn block_bounds(h: usize, w: usize, grid: usize, index: usize) -> (usize, usize, usize, usize) {
    let (bh, bw) = (h / grid, w / grid);
    ((index / grid) * bh, (index % grid) * bw, bh, bw)
}

/// Erases the listed blocks with zeros (`Crop`) or cover pixels (`Cropout`).
pub fn crop_attack(
    stego: &ImageTensor,
    cover: &ImageTensor,
    blocks: &[usize],
    mode: CropMode,
    grid: usize,
) -> Result<ImageTensor> {
    if !stego.same_shape(cover) {
        return Err(LdhError::Shape(
            "crop attack: stego and cover differ in size".into(),
        ));
    }
    let (h, w) = (stego.height(), stego.width());
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(LdhError::Distortion(format!(
            "{grid}x{grid} blocks do not tile {h}x{w}"
        )));
    }
    if let Some(&bad) = blocks.iter().find(|&&b| b >= grid * grid) {
        return Err(LdhError::Distortion(format!(
            "block index {bad} out of range"
        )));
    }
    let mut data = stego.data().to_vec();
    for &b in blocks {
        let (top, left, bh, bw) = block_bounds(h, w, grid, b);
        for c in 0..3 {
            for y in top..top + bh {
                for x in left..left + bw {
                    let i = (c * h + y) * w + x;
                    data[i] = match mode {
                        CropMode::Crop => 0.0,
                        CropMode::Cropout => cover.data()[i],
                    };
                }
            }
        }
    }
    Ok(ImageTensor::from_clamped(h, w, data))
}

/// Applies an attack on the evaluation path (JPEG uses true rounding).
pub fn apply_attack(
    spec: &DistortionSpec,
    stego: &ImageTensor,
    cover: &ImageTensor,
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    spec.validate()?;
    match spec {
        DistortionSpec::Dropout { p } => dropout_noise(stego, cover, *p, rng),
        DistortionSpec::Gaussian { kernel, sigma } => gaussian_blur(stego, *kernel, *sigma),
        DistortionSpec::Jpeg { quality } => jpeg_compress(stego, *quality),
        DistortionSpec::Crop { mode, blocks, grid } => {
            let picked = match blocks {
                BlockSelection::Explicit(ix) => ix.clone(),
                BlockSelection::Random(k) => {
                    let mut v = sample(rng, grid * grid, *k).into_vec();
                    v.sort_unstable();
                    v
                }
            };
            crop_attack(stego, cover, &picked, *mode, *grid)
        }
    }
}
