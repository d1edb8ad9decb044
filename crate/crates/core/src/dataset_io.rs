//! Image tensors, image files, dataset manifests and train/val/test splits.
//!
//! Stego images are serialized as 8-bit RGB PNG with `byte = round(v * 255)`;
//! [`quantize`] performs the same rounding in memory.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Rgb};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LdhError, Result};
use crate::exec;
use crate::tensor::{Real, Tensor};

/// An RGB image with values in `[0, 1]`, stored channel-planar.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Builds an image from planar RGB data. Values outside `[0, 1]` (or NaN)
    /// are rejected.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(LdhError::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LdhError::Shape(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    /// Like [`ImageTensor::new`] but clamps into `[0, 1]` instead of failing.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * height * width, "image data length");
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Writes one value, clamped into `[0, 1]`.
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Single-item `[1, 3, h, w]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::lit(f64::from(v))).collect(),
        )
    }

    /// Reads batch item `item` of a 3-channel tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, item: usize) -> Self {
        assert_eq!(t.channels(), 3, "image tensors have three channels");
        let data = t.item(item).iter().map(|v| v.as_f64() as f32).collect();
        Self::from_clamped(t.height(), t.width(), data)
    }
}

/// Stacks images into one `[n, 3, h, w]` batch.
pub fn batch_tensor<T: Real>(images: &[&ImageTensor]) -> Tensor<T> {
    let items: Vec<Tensor<T>> = images.iter().map(|im| im.to_tensor()).collect();
    Tensor::stack(&items)
}

/// Rounds every value to the nearest multiple of 1/255 (half away from zero),
/// exactly what a save/load cycle does.
pub fn quantize(img: &ImageTensor) -> ImageTensor {
    ImageTensor {
        height: img.height,
        width: img.width,
        data: img
            .data
            .iter()
            .map(|&v| to_byte(v) as f32 / 255.0)
            .collect(),
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Problems tolerated while loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadWarning {
    GrayscaleReplicated,
    AlphaDropped,
}

/// Loads an 8-bit image as `[0, 1]` RGB, reporting tolerated conversions.
pub fn load_image_checked(path: &Path) -> Result<(ImageTensor, Option<LoadWarning>)> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| LdhError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| LdhError::io(path, e))?;
    let decoded = reader.decode().map_err(|source| LdhError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    let (rgb, warning) = match decoded {
        DynamicImage::ImageRgb8(buf) => (buf, None),
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            (decoded.to_rgb8(), Some(LoadWarning::GrayscaleReplicated))
        }
        DynamicImage::ImageRgba8(_) => (decoded.to_rgb8(), Some(LoadWarning::AlphaDropped)),
        other => {
            return Err(LdhError::UnsupportedFormat {
                path: path.to_path_buf(),
                format: format!("{:?}", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f32::from(px[c]) / 255.0;
        }
    }
    Ok((ImageTensor::new(h, w, data)?, warning))
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    load_image_checked(path).map(|(img, _)| img)
}

/// Writes an 8-bit RGB PNG; each byte is `round(v * 255)`.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w) = (img.height, img.width);
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            to_byte(img.get(y, x, 0)),
            to_byte(img.get(y, x, 1)),
            to_byte(img.get(y, x, 2)),
        ])
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => LdhError::io(path, io),
            other => LdhError::Decode {
                path: path.to_path_buf(),
                source: other,
            },
        })
}

/// Writes a single-channel map in `[0, 1]` as a grayscale PNG.
pub fn save_map(values: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    let buf: ImageBuffer<image::Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
            image::Luma([to_byte(values[y as usize * width + x as usize])])
        });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => LdhError::io(path, io),
            other => LdhError::Decode {
                path: path.to_path_buf(),
                source: other,
            },
        })
}

/// Bilinear resampling with pixel-centre alignment; output clamped to `[0, 1]`.
pub fn resize(img: &ImageTensor, h: usize, w: usize) -> ImageTensor {
    assert!(h >= 1 && w >= 1, "resize target must be at least 1x1");
    if h == img.height && w == img.width {
        return img.clone();
    }
    let coord = |dst: usize, src_len: usize, dst_len: usize| {
        let s = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
        let s = s.clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        let (y0, y1, fy) = coord(y, img.height, h);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, img.width, w);
            for c in 0..3 {
                let p = |yy, xx| f64::from(img.get(yy, xx, c));
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                data[(c * h + y) * w + x] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    ImageTensor::from_clamped(h, w, data)
}

/// A deterministic partition of dataset references.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit<R> {
    pub train: Vec<R>,
    pub val: Vec<R>,
    pub test: Vec<R>,
    pub seed: u64,
}

/// Shuffles `refs` with `seed` and cuts it by `ratios` (train, val, test).
/// Val and test sizes are floored; the remainder goes to train.
pub fn split_dataset<R: Clone>(
    refs: &[R],
    seed: u64,
    ratios: (f64, f64, f64),
) -> Result<DatasetSplit<R>> {
    if refs.is_empty() {
        return Err(LdhError::EmptyDataset);
    }
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-6 {
        return Err(LdhError::Config(format!(
            "split ratios {ratios:?} must be fractions summing to 1"
        )));
    }
    let n = refs.len();
    let n_val = ((n as f64) * b + 1e-9).floor() as usize;
    let n_test = ((n as f64) * c + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |range: &[usize]| range.iter().map(|&i| refs[i].clone()).collect::<Vec<_>>();
    let n_train = n - n_val - n_test;
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
        seed,
    })
}

/// Reads a newline-delimited manifest; relative entries resolve against the
/// manifest's directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| LdhError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let entries: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect();
    if entries.is_empty() {
        return Err(LdhError::EmptyDataset);
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[impl AsRef<Path>]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.as_ref().to_string_lossy());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| LdhError::io(path, e))
}

/// Loads every file (in parallel), resizing to `side x side` when needed.
pub fn load_images(paths: &[PathBuf], side: usize) -> Result<Vec<ImageTensor>> {
    exec::map_indexed(paths.len(), |i| {
        let img = load_image(&paths[i])?;
        Ok(if img.height == side && img.width == side {
            img
        } else {
            resize(&img, side, side)
        })
    })
    .into_iter()
    .collect()
}
