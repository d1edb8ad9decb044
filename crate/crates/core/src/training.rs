//! Loss terms, Adam, and the two-phase (pre-train, co-train) training loop.
//!
//! A training step hides one secret per cover at a uniformly random position,
//! optionally passes the stego through a noise layer, and updates every
//! network that took part. During pre-training the locating network is not
//! evaluated at all; the revealing network always reads ground-truth crops.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var, Window};
use crate::checkpoint::{Checkpoint, Progress, RngState};
use crate::dataset_io::{batch_tensor, ImageTensor};
use crate::distortions::{blur, dropout_mask, DistortionSpec};
use crate::embedding::{make_ground_truth_map, sample_regions, LocationMap, PlacementMode};
use crate::error::{LdhError, Result};
use crate::evaluation::{evaluate_with, CropSource, EvalOptions};
use crate::networks::{Models, NetworkConfig, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub const PRETRAIN: Self = Self::new(0.25, 0.0, 0.75);
    pub const COTRAIN: Self = Self::new(0.1, 0.8, 0.1);

    pub const fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            lambda3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LdhError::Config(format!(
                "loss weights must be finite and >= 0: {all:?}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(LdhError::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Cotrain,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pretrain => "pretrain",
            Self::Cotrain => "cotrain",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSchedule {
    pub pretrain_epochs: usize,
    pub cotrain_epochs: usize,
    pub pretrain_weights: LossWeights,
    pub cotrain_weights: LossWeights,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Count decay epochs from the start of each phase instead of from the
    /// start of training.
    pub lr_restart_each_phase: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            pretrain_epochs: 60,
            cotrain_epochs: 30,
            pretrain_weights: LossWeights::PRETRAIN,
            cotrain_weights: LossWeights::COTRAIN,
            lr: 0.001,
            lr_decay: 0.1,
            lr_decay_every: 30,
            lr_restart_each_phase: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainingSchedule {
    pub fn total_epochs(&self) -> usize {
        self.pretrain_epochs + self.cotrain_epochs
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.pretrain_epochs {
            Phase::Pretrain
        } else {
            Phase::Cotrain
        }
    }

    pub fn weights(&self, phase: Phase) -> LossWeights {
        match phase {
            Phase::Pretrain => self.pretrain_weights,
            Phase::Cotrain => self.cotrain_weights,
        }
    }

    /// `lr * decay^floor(e / decay_every)` for a count of elapsed epochs `e`.
    pub fn lr_after(&self, elapsed: usize) -> f64 {
        self.lr * self.lr_decay.powi((elapsed / self.lr_decay_every) as i32)
    }

    /// Learning rate for the global epoch index `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let elapsed = if self.lr_restart_each_phase && epoch >= self.pretrain_epochs {
            epoch - self.pretrain_epochs
        } else {
            epoch
        };
        self.lr_after(elapsed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pretrain_weights.lambda2 != 0.0 {
            return Err(LdhError::Config(
                "pre-training must not weight the locating loss".into(),
            ));
        }
        self.pretrain_weights.validate()?;
        self.cotrain_weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LdhError::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every == 0 {
            return Err(LdhError::Config(
                "lr decay must be in (0, 1] with a positive period".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(LdhError::Config("invalid Adam moments".into()));
        }
        if self.batch_size == 0 {
            return Err(LdhError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Norm orders (1 or 2) of the three loss terms, and whether the locating
/// loss reaches the hiding network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub hide_p: u8,
    pub locate_p: u8,
    pub reveal_p: u8,
    /// Feed the locator a constant copy of the received stego, so `L_P`
    /// updates P only.
    pub detach_locator_input: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            hide_p: 1,
            locate_p: 2,
            reveal_p: 1,
            detach_locator_input: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for p in [self.hide_p, self.locate_p, self.reveal_p] {
            if p != 1 && p != 2 {
                return Err(LdhError::Config(format!(
                    "norm order must be 1 or 2, got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Noise layers used during training. Textual form: `none`, `combined`, or a
/// single distortion such as `jpeg:q=80`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DistortionMode {
    #[default]
    None,
    Specialized(DistortionSpec),
    /// Dropout, Gaussian blur and JPEG in round-robin order, one per batch.
    Combined,
}

impl DistortionMode {
    pub fn combined_layers() -> [DistortionSpec; 3] {
        [
            DistortionSpec::dropout(),
            DistortionSpec::gaussian(),
            DistortionSpec::jpeg(),
        ]
    }

    /// Noise layer for optimizer step `step`.
    pub fn layer_for(&self, step: u64, seed: u64) -> Option<DistortionSpec> {
        match self {
            Self::None => None,
            Self::Specialized(d) => Some(d.clone()),
            Self::Combined => {
                let layers = Self::combined_layers();
                Some(layers[((seed % 3) + step % 3) as usize % 3].clone())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::Specialized(d) = self {
            d.validate()?;
            if !d.is_noise_layer() {
                return Err(LdhError::Config(format!(
                    "{d} cannot be used as a training noise layer"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for DistortionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::Combined => f.write_str("combined"),
            Self::Specialized(d) => d.fmt(f),
        }
    }
}

impl FromStr for DistortionMode {
    type Err = LdhError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Self::None),
            "combined" => Ok(Self::Combined),
            other => Ok(Self::Specialized(other.parse()?)),
        }
    }
}

impl TryFrom<String> for DistortionMode {
    type Error = LdhError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DistortionMode> for String {
    fn from(d: DistortionMode) -> Self {
        d.to_string()
    }
}

/// Everything that defines a training run; the JSON config file format.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub schedule: TrainingSchedule,
    pub loss: LossConfig,
    pub distortion: DistortionMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.schedule.validate()?;
        self.loss.validate()?;
        self.distortion.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LdhError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn mean_pow_plain(a: &[f32], b: &[f32], p: u8) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LdhError::Shape(format!(
            "loss inputs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if p != 1 && p != 2 {
        return Err(LdhError::Config(format!(
            "norm order must be 1 or 2, got {p}"
        )));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64).abs();
            if p == 1 {
                d
            } else {
                d * d
            }
        })
        .sum();
    Ok(sum / a.len().max(1) as f64)
}

/// Mean `|cover - stego|^p` over all elements.
pub fn hiding_loss(cover: &ImageTensor, stego: &ImageTensor, p: u8) -> Result<f64> {
    if !cover.same_shape(stego) {
        return Err(LdhError::Shape("hiding loss: images differ in size".into()));
    }
    mean_pow_plain(cover.data(), stego.data(), p)
}

pub fn locating_loss(truth: &LocationMap, pred: &LocationMap, p: u8) -> Result<f64> {
    if truth.height() != pred.height() || truth.width() != pred.width() {
        return Err(LdhError::Shape("locating loss: maps differ in size".into()));
    }
    mean_pow_plain(truth.values(), pred.values(), p)
}

pub fn revealing_loss(secret: &ImageTensor, revealed: &ImageTensor, p: u8) -> Result<f64> {
    if !secret.same_shape(revealed) {
        return Err(LdhError::Shape(
            "revealing loss: images differ in size".into(),
        ));
    }
    mean_pow_plain(secret.data(), revealed.data(), p)
}

pub fn total_loss(lh: f64, lp: f64, lr: f64, w: LossWeights) -> f64 {
    w.lambda1 * lh + w.lambda2 * lp + w.lambda3 * lr
}

/// Adam with a separate step count per parameter, so parameters that sit
/// out a phase start with fresh bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: Vec<u64>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| Tensor::zeros(params.get(id).shape()))
                .collect()
        };
        Self {
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            t: vec![0; params.len()],
        }
    }

    pub fn steps(&self) -> &[u64] {
        &self.t
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        let (b1, b2) = (self.beta1, self.beta2);
        for (id, g) in grads.params() {
            let i = id.0;
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k].as_f64();
                let mk = b1 * m[k].as_f64() + (1.0 - b1) * gk;
                let vk = b2 * v[k].as_f64() + (1.0 - b2) * gk * gk;
                m[k] = T::lit(mk);
                v[k] = T::lit(vk);
                let update = lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                p[k] = T::lit(p[k].as_f64() - update);
            }
        }
    }

    fn to_named(&self, params: &ParamStore<T>) -> Vec<(String, Tensor<f64>)> {
        let mut out = Vec::new();
        for id in params.ids() {
            let name = params.name(id);
            out.push((format!("adam.m.{name}"), self.m[id.0].cast()));
            out.push((format!("adam.v.{name}"), self.v[id.0].cast()));
        }
        let t = self.t.iter().map(|&s| s as f64).collect();
        out.push((
            "adam.t".into(),
            Tensor::from_vec([1, 1, 1, self.t.len()], t),
        ));
        out
    }

    fn from_checkpoint(
        ck: &Checkpoint,
        params: &ParamStore<T>,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<Self> {
        let mut adam = Self::new(params, beta1, beta2, eps);
        let missing = |n: &str| LdhError::Checkpoint(format!("missing optimizer state {n}"));
        for id in params.ids() {
            let name = params.name(id);
            for (slot, prefix) in [(&mut adam.m, "adam.m."), (&mut adam.v, "adam.v.")] {
                let key = format!("{prefix}{name}");
                let t = ck.tensor(&key).ok_or_else(|| missing(&key))?;
                if t.shape() != params.get(id).shape() {
                    return Err(LdhError::Checkpoint(format!("{key} has the wrong shape")));
                }
                slot[id.0] = t.cast();
            }
        }
        let t = ck.tensor("adam.t").ok_or_else(|| missing("adam.t"))?;
        if t.len() != params.len() {
            return Err(LdhError::Checkpoint("adam.t has the wrong length".into()));
        }
        adam.t = t.data().iter().map(|&s| s as u64).collect();
        Ok(adam)
    }
}

/// Graph handles of one forward pass through the training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub hide: Var,
    pub locate: Option<Var>,
    pub reveal: Var,
}

fn apply_noise<T: Real>(
    g: &mut Graph<T>,
    stego: Var,
    cover: Var,
    noise: &DistortionSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    match noise {
        DistortionSpec::Dropout { p } => {
            let [n, _, h, w] = g.value(stego).shape();
            let mask = dropout_mask(n * h * w, *p, rng);
            Ok(g.select(stego, cover, mask))
        }
        DistortionSpec::Gaussian { kernel, sigma } => {
            Ok(g.blur(stego, &blur::gaussian_kernel(*kernel, *sigma)))
        }
        DistortionSpec::Jpeg { quality } => Ok(g.jpeg(stego, *quality)),
        DistortionSpec::Crop { .. } => {
            Err(LdhError::Config(format!("{noise} is not a noise layer")))
        }
    }
}

/// Records the forward pass of the training objective for one batch.
/// Randomness (positions, dropout masks) is drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn build_loss<T: Real>(
    g: &mut Graph<T>,
    models: &Models<T>,
    secrets: &[&ImageTensor],
    covers: &[&ImageTensor],
    phase: Phase,
    weights: LossWeights,
    loss: LossConfig,
    noise: Option<&DistortionSpec>,
    rng: &mut ChaCha8Rng,
) -> Result<LossVars> {
    let cfg = models.config;
    if secrets.len() != covers.len() || secrets.is_empty() {
        return Err(LdhError::Shape(format!(
            "batch needs as many covers as secrets, got {} and {}",
            covers.len(),
            secrets.len()
        )));
    }
    for img in secrets.iter().chain(covers) {
        if img.height() != cfg.image_side || img.width() != cfg.image_side {
            return Err(LdhError::Shape(format!(
                "training image is {}x{}, model expects {}",
                img.height(),
                img.width(),
                cfg.image_side
            )));
        }
    }
    let n = secrets.len();
    let mut regions = Vec::with_capacity(n);
    for _ in 0..n {
        regions.push(sample_regions(1, cfg.image_side, cfg.omega, rng, PlacementMode::Random)?[0]);
    }
    let windows: Vec<Window> = regions
        .iter()
        .enumerate()
        .map(|(item, r)| Window {
            item,
            top: r.top,
            left: r.left,
        })
        .collect();

    let secret_t: Tensor<T> = batch_tensor(secrets);
    let s = g.input(secret_t);
    let c = g.input(batch_tensor(covers));
    let code = models.hide.forward(g, &models.params, s);
    let stego = g.local_add(c, code, windows.clone());
    let hide = g.mean_pow(stego, c, loss.hide_p);
    let received = match noise {
        Some(spec) => apply_noise(g, stego, c, spec, rng)?,
        None => stego,
    };

    let locate = if phase == Phase::Cotrain {
        let input = if loss.detach_locator_input {
            let copy = g.value(received).clone();
            g.input(copy)
        } else {
            received
        };
        let pred = models.locate.forward(g, &models.params, input);
        let mut truth = Vec::with_capacity(n * cfg.image_side * cfg.image_side);
        for r in &regions {
            let map = make_ground_truth_map(std::slice::from_ref(r), cfg.image_side)?;
            truth.extend(map.values().iter().map(|&v| T::lit(v as f64)));
        }
        let t = g.input(Tensor::from_vec(
            [n, 1, cfg.image_side, cfg.image_side],
            truth,
        ));
        Some(g.mean_pow(pred, t, loss.locate_p))
    } else {
        None
    };

    let patch = g.crop(received, windows, cfg.code_side());
    let revealed = models.reveal.forward(g, &models.params, patch);
    let reveal = g.mean_pow(revealed, s, loss.reveal_p);

    let mut terms = vec![(hide, weights.lambda1), (reveal, weights.lambda3)];
    if let Some(l) = locate {
        terms.insert(1, (l, weights.lambda2));
    }
    let total = g.weighted_sum(terms);
    Ok(LossVars {
        total,
        hide,
        locate,
        reveal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub total: f64,
    pub hide: f64,
    /// Absent during pre-training.
    pub locate: Option<f64>,
    pub reveal: f64,
}

/// One optimizer update on the weighted total loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    models: &mut Models<T>,
    opt: &mut Adam<T>,
    secrets: &[&ImageTensor],
    covers: &[&ImageTensor],
    phase: Phase,
    weights: LossWeights,
    loss: LossConfig,
    lr: f64,
    noise: Option<&DistortionSpec>,
    rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<StepMetrics> {
    let mut g = Graph::new();
    let vars = build_loss(
        &mut g, models, secrets, covers, phase, weights, loss, noise, rng,
    )?;
    let scalar = |v: Var| g.value(v).to_scalar().as_f64();
    let total = scalar(vars.total);
    if !total.is_finite() {
        return Err(LdhError::Diverged { step, loss: total });
    }
    let metrics = StepMetrics {
        total,
        hide: scalar(vars.hide),
        locate: vars.locate.map(scalar),
        reveal: scalar(vars.reveal),
    };
    let grads = g.backward(vars.total);
    opt.step(&mut models.params, &grads, lr);
    Ok(metrics)
}

/// Per-epoch training and validation summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_hide: f64,
    pub loss_locate: Option<f64>,
    pub loss_reveal: f64,
    pub val: Option<ValMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub stego_apd: f64,
    pub stego_psnr: f64,
    pub stego_ssim: f64,
    pub secret_apd: f64,
    pub secret_psnr: f64,
    pub secret_ssim: f64,
    pub iou: f64,
}

pub const HISTORY_COLUMNS: [&str; 15] = [
    "epoch",
    "phase",
    "lr",
    "loss_total",
    "loss_hide",
    "loss_locate",
    "loss_reveal",
    "val_stego_apd",
    "val_stego_psnr",
    "val_stego_ssim",
    "val_secret_apd",
    "val_secret_psnr",
    "val_secret_ssim",
    "val_iou",
    "val_images",
];

/// Validation with one secret per cover; secrets are revealed from
/// ground-truth crops so the value tracks H and R alone, while `iou`
/// tracks P.
pub fn validate(
    models: &Models<f32>,
    val: &[ImageTensor],
    seed: u64,
) -> Result<Option<ValMetrics>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut opts = EvalOptions::new(1, seed);
    opts.crop_source = CropSource::GroundTruth;
    let s = evaluate_with(models, val, &opts)?;
    let r = s.revealed.expect("one secret per cover");
    Ok(Some(ValMetrics {
        stego_apd: s.stego.apd,
        stego_psnr: s.stego.psnr,
        stego_ssim: s.stego.ssim,
        secret_apd: r.apd,
        secret_psnr: r.psnr,
        secret_ssim: r.ssim,
        iou: s.iou,
    }))
}

pub fn write_history_csv(
    history: &[EpochRecord],
    val_images: usize,
    out: impl Write,
) -> Result<()> {
    let err = |e: csv::Error| LdhError::Report(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_COLUMNS).map_err(err)?;
    let opt = |v: Option<f64>| v.map(crate::metrics::format_db).unwrap_or_default();
    for r in history {
        let v = r.val;
        w.write_record([
            r.epoch.to_string(),
            r.phase.to_string(),
            r.lr.to_string(),
            r.loss_total.to_string(),
            r.loss_hide.to_string(),
            opt(r.loss_locate),
            r.loss_reveal.to_string(),
            opt(v.map(|v| v.stego_apd)),
            opt(v.map(|v| v.stego_psnr)),
            opt(v.map(|v| v.stego_ssim)),
            opt(v.map(|v| v.secret_apd)),
            opt(v.map(|v| v.secret_psnr)),
            opt(v.map(|v| v.secret_ssim)),
            opt(v.map(|v| v.iou)),
            val_images.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| LdhError::Report(e.to_string()))
}

/// Salt separating the validation stream from the training streams.
const VAL_SALT: u64 = 0x5_eed0_f7a1;

#[derive(Debug, Serialize, Deserialize)]
struct TrainingEcho {
    config: TrainConfig,
    history: Vec<EpochRecord>,
}

/// Training state that survives checkpoints.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub models: Models<f32>,
    pub adam: Adam<f32>,
    pub progress: Progress,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let models = Models::init(config.network, config.schedule.seed)?;
        let s = &config.schedule;
        let adam = Adam::new(&models.params, s.beta1, s.beta2, s.eps);
        Ok(Self {
            config,
            models,
            adam,
            progress: Progress::default(),
            history: Vec::new(),
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let echo: TrainingEcho = ck
            .training
            .clone()
            .ok_or_else(|| LdhError::Checkpoint("no training state in checkpoint".into()))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| LdhError::Checkpoint(e.to_string()))
            })?;
        echo.config.validate()?;
        if echo.config.network != ck.network {
            return Err(LdhError::Checkpoint(
                "network config disagrees with training echo".into(),
            ));
        }
        let models = ck.models::<f32>()?;
        let s = &echo.config.schedule;
        let adam = Adam::from_checkpoint(ck, &models.params, s.beta1, s.beta2, s.eps)?;
        Ok(Self {
            config: echo.config,
            models,
            adam,
            progress: ck.progress,
            history: echo.history,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_models(&self.models);
        ck.tensors.extend(self.adam.to_named(&self.models.params));
        ck.progress = self.progress;
        ck.rng = Some(self.epoch_rng_state(self.progress.epoch));
        let echo = TrainingEcho {
            config: self.config.clone(),
            history: self.history.clone(),
        };
        ck.training = Some(serde_json::to_value(echo).expect("training echo serializes"));
        ck
    }

    pub fn is_finished(&self) -> bool {
        self.progress.epoch >= self.config.schedule.total_epochs()
    }

    fn epoch_rng_state(&self, epoch: usize) -> RngState {
        RngState {
            seed: self.config.schedule.seed,
            stream: epoch as u64 + 1,
            word_pos: 0,
        }
    }

    /// Runs the next epoch and appends its record to the history.
    pub fn run_epoch(&mut self, train: &[ImageTensor], val: &[ImageTensor]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(LdhError::EmptyDataset);
        }
        let sched = self.config.schedule.clone();
        let epoch = self.progress.epoch;
        let phase = sched.phase(epoch);
        let weights = sched.weights(phase);
        let lr = sched.lr_at(epoch);
        let state = self.epoch_rng_state(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_stream(state.stream);

        let mut secret_order: Vec<usize> = (0..train.len()).collect();
        let mut cover_order = secret_order.clone();
        secret_order.shuffle(&mut rng);
        cover_order.shuffle(&mut rng);

        let (mut sum_total, mut sum_hide, mut sum_locate, mut sum_reveal) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (sb, cb) in secret_order
            .chunks(sched.batch_size)
            .zip(cover_order.chunks(sched.batch_size))
        {
            let secrets: Vec<&ImageTensor> = sb.iter().map(|&i| &train[i]).collect();
            let covers: Vec<&ImageTensor> = cb.iter().map(|&i| &train[i]).collect();
            let noise = self
                .config
                .distortion
                .layer_for(self.progress.step, sched.seed);
            let m = train_step(
                &mut self.models,
                &mut self.adam,
                &secrets,
                &covers,
                phase,
                weights,
                self.config.loss,
                lr,
                noise.as_ref(),
                &mut rng,
                self.progress.step,
            )?;
            self.progress.step += 1;
            sum_total += m.total;
            sum_hide += m.hide;
            sum_locate += m.locate.unwrap_or(0.0);
            sum_reveal += m.reveal;
            batches += 1;
        }
        let b = batches as f64;
        let record = EpochRecord {
            epoch,
            phase,
            lr,
            loss_total: sum_total / b,
            loss_hide: sum_hide / b,
            loss_locate: (phase == Phase::Cotrain).then_some(sum_locate / b),
            loss_reveal: sum_reveal / b,
            val: validate(&self.models, val, sched.seed ^ VAL_SALT)?,
        };
        self.progress.epoch += 1;
        self.history.push(record);
        Ok(record)
    }

    /// Trains until the schedule is complete, writing `last.ckpt` and
    /// `history.csv` into `out_dir` after every epoch.
    pub fn fit(
        &mut self,
        train: &[ImageTensor],
        val: &[ImageTensor],
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        while !self.is_finished() {
            let record = self.run_epoch(train, val)?;
            if let Some(dir) = out_dir {
                self.checkpoint().save(&checkpoint_path(dir))?;
                let path = dir.join("history.csv");
                let f = std::fs::File::create(&path).map_err(|e| LdhError::io(&path, e))?;
                write_history_csv(&self.history, val.len(), f)?;
            }
            on_epoch(&record);
        }
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("last.ckpt")
}
