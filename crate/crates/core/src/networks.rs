//! The hiding (H), locating (P) and revealing (R) networks.
//!
//! * H: `log2(omega)` stages of conv + leaky ReLU + 2x max-pool, then a
//!   U-shaped encoder/decoder with skip connections; unbounded 3-channel output.
//! * P: six 3x3 convolutions at full resolution with a sigmoid head.
//! * R: six 3x3 convolutions at code resolution, `log2(omega)` stages of
//!   nearest 2x upsampling + conv, and a sigmoid head.
//!
//! All layers are 3x3 'same' convolutions with leaky ReLU (slope 0.2).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, Var};
use crate::dataset_io::{batch_tensor, ImageTensor};
use crate::embedding::{LocationMap, SecretCode};
use crate::error::{LdhError, Result};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
const KERNEL: usize = 3;
const MAX_UNET_LEVELS: u32 = 4;

/// Shape-defining hyperparameters shared by the three networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Ratio of secret side to code side.
    pub omega: usize,
    /// Hidden feature width.
    pub nhf: usize,
    /// Side of covers and secrets in pixels.
    pub image_side: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            omega: 4,
            nhf: 64,
            image_side: 1024,
        }
    }
}

impl NetworkConfig {
    pub fn new(omega: usize, nhf: usize, image_side: usize) -> Self {
        Self {
            omega,
            nhf,
            image_side,
        }
    }

    pub fn code_side(&self) -> usize {
        self.image_side / self.omega
    }

    /// Conditions the layer stack itself needs.
    pub fn check_architecture(&self) -> Result<()> {
        if self.omega < 2 || !self.omega.is_power_of_two() {
            return Err(LdhError::Config(format!(
                "omega must be a power of two >= 2, got {}",
                self.omega
            )));
        }
        if self.nhf == 0 {
            return Err(LdhError::Config("nhf must be positive".into()));
        }
        if self.image_side == 0 || !self.image_side.is_multiple_of(self.omega) {
            return Err(LdhError::Config(format!(
                "image side {} is not divisible by omega {}",
                self.image_side, self.omega
            )));
        }
        Ok(())
    }

    /// Full pipeline invariants: omega in {2, 4, 8}, side divisible by
    /// `omega * 8` (8x8 JPEG blocks inside every code), nhf >= 8.
    pub fn validate(&self) -> Result<()> {
        self.check_architecture()?;
        if ![2, 4, 8].contains(&self.omega) {
            return Err(LdhError::Config(format!(
                "omega must be 2, 4 or 8, got {}",
                self.omega
            )));
        }
        if !self.image_side.is_multiple_of(self.omega * 8) {
            return Err(LdhError::Config(format!(
                "image side {} must be a multiple of omega*8 = {}",
                self.image_side,
                self.omega * 8
            )));
        }
        if self.nhf < 8 {
            return Err(LdhError::Config(format!(
                "nhf must be at least 8, got {}",
                self.nhf
            )));
        }
        Ok(())
    }

    /// Number of resolution levels in the hiding network's U-shaped body.
    pub fn unet_levels(&self) -> usize {
        self.code_side().trailing_zeros().clamp(1, MAX_UNET_LEVELS) as usize
    }

    fn down_stages(&self) -> usize {
        self.omega.trailing_zeros() as usize
    }
}

/// Named trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn add(&mut self, name: String, t: Tensor<T>) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    fn build<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let fan_in = (cin * KERNEL * KERNEL) as f64;
        // He-uniform for leaky ReLU.
        let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
        let n = cout * cin * KERNEL * KERNEL;
        let w: Vec<T> = (0..n)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_vec([cout, cin, KERNEL, KERNEL], w),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]));
        Self { weight, bias }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(self.weight, p.get(self.weight));
        let b = g.param(self.bias, p.get(self.bias));
        g.conv2d(x, w, b)
    }

    fn apply_act<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let y = self.apply(g, p, x);
        g.leaky_relu(y, LEAKY_SLOPE)
    }
}

/// H: secret image -> compact code.
#[derive(Debug, Clone)]
pub struct HidingNetwork {
    down: Vec<Conv>,
    enc: Vec<Conv>,
    dec: Vec<Conv>,
    out: Conv,
}

impl HidingNetwork {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, secret: Var) -> Var {
        let mut x = secret;
        for conv in &self.down {
            x = conv.apply_act(g, p, x);
            x = g.max_pool2(x);
        }
        let mut skips = Vec::with_capacity(self.enc.len());
        for (level, conv) in self.enc.iter().enumerate() {
            if level > 0 {
                x = g.max_pool2(x);
            }
            x = conv.apply_act(g, p, x);
            skips.push(x);
        }
        for level in (0..self.dec.len()).rev() {
            x = g.upsample2(x);
            x = g.concat(x, skips[level]);
            x = self.dec[level].apply_act(g, p, x);
        }
        self.out.apply(g, p, x)
    }
}

/// P: stego image -> soft location map.
#[derive(Debug, Clone)]
pub struct LocatingNetwork {
    convs: Vec<Conv>,
}

impl LocatingNetwork {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, stego: Var) -> Var {
        let mut x = stego;
        let last = self.convs.len() - 1;
        for conv in &self.convs[..last] {
            x = conv.apply_act(g, p, x);
        }
        let logits = self.convs[last].apply(g, p, x);
        g.sigmoid(logits)
    }
}

/// R: cropped code region -> full-size secret.
#[derive(Debug, Clone)]
pub struct RevealingNetwork {
    pre: Vec<Conv>,
    up: Vec<Conv>,
    out: Conv,
}

impl RevealingNetwork {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, patch: Var) -> Var {
        let mut x = patch;
        for conv in &self.pre {
            x = conv.apply_act(g, p, x);
        }
        for conv in &self.up {
            x = g.upsample2(x);
            x = conv.apply_act(g, p, x);
        }
        let logits = self.out.apply(g, p, x);
        g.sigmoid(logits)
    }
}

/// The three networks and their parameters.
#[derive(Debug, Clone)]
pub struct Models<T> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    pub hide: HidingNetwork,
    pub locate: LocatingNetwork,
    pub reveal: RevealingNetwork,
}

/// Name prefixes of the three parameter groups.
pub const HIDE_PREFIX: &str = "hide.";
pub const LOCATE_PREFIX: &str = "locate.";
pub const REVEAL_PREFIX: &str = "reveal.";

impl<T: Real> Models<T> {
    /// Builds all three networks with seeded fan-in-scaled initialization.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.check_architecture()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let nhf = config.nhf;

        let mut down = Vec::new();
        let mut cin = 3;
        for i in 0..config.down_stages() {
            down.push(Conv::build(
                &mut store,
                &mut rng,
                &format!("hide.down{i}"),
                cin,
                nhf,
            ));
            cin = nhf;
        }
        let levels = config.unet_levels();
        let widths: Vec<usize> = (0..levels).map(|l| nhf << l).collect();
        let mut enc = Vec::new();
        for (l, &wl) in widths.iter().enumerate() {
            let from = if l == 0 { nhf } else { widths[l - 1] };
            enc.push(Conv::build(
                &mut store,
                &mut rng,
                &format!("hide.enc{l}"),
                from,
                wl,
            ));
        }
        let mut dec = Vec::new();
        for l in 0..levels - 1 {
            dec.push(Conv::build(
                &mut store,
                &mut rng,
                &format!("hide.dec{l}"),
                widths[l + 1] + widths[l],
                widths[l],
            ));
        }
        let out = Conv::build(&mut store, &mut rng, "hide.out", widths[0], 3);
        let hide = HidingNetwork {
            down,
            enc,
            dec,
            out,
        };

        let mut convs = Vec::new();
        for i in 0..6 {
            let (ci, co) = match i {
                0 => (3, nhf),
                5 => (nhf, 1),
                _ => (nhf, nhf),
            };
            convs.push(Conv::build(
                &mut store,
                &mut rng,
                &format!("locate.conv{i}"),
                ci,
                co,
            ));
        }
        let locate = LocatingNetwork { convs };

        let mut pre = Vec::new();
        for i in 0..6 {
            let ci = if i == 0 { 3 } else { nhf };
            pre.push(Conv::build(
                &mut store,
                &mut rng,
                &format!("reveal.pre{i}"),
                ci,
                nhf,
            ));
        }
        let up = (0..config.down_stages())
            .map(|i| Conv::build(&mut store, &mut rng, &format!("reveal.up{i}"), nhf, nhf))
            .collect();
        let out = Conv::build(&mut store, &mut rng, "reveal.out", nhf, 3);
        let reveal = RevealingNetwork { pre, up, out };

        Ok(Self {
            config,
            params: store,
            hide,
            locate,
            reveal,
        })
    }

    /// Same architecture with parameters converted to another float type.
    pub fn cast<U: Real>(&self) -> Models<U> {
        Models {
            config: self.config,
            params: self.params.cast(),
            hide: self.hide.clone(),
            locate: self.locate.clone(),
            reveal: self.reveal.clone(),
        }
    }

    fn check_input(&self, t: &Tensor<T>, side: usize, what: &str) -> Result<()> {
        if t.channels() != 3 || t.height() != side || t.width() != side {
            return Err(LdhError::Shape(format!(
                "{what} expects [n, 3, {side}, {side}], got {:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    /// H on a batch of secrets: `[n, 3, s, s] -> [n, 3, s/omega, s/omega]`.
    pub fn forward_hide(&self, secrets: Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(&secrets, self.config.image_side, "hiding network")?;
        let mut g = Graph::new();
        let x = g.input(secrets);
        let y = self.hide.forward(&mut g, &self.params, x);
        Ok(g.value(y).clone())
    }

    /// P on a batch of stegos: `[n, 3, s, s] -> [n, 1, s, s]` in (0, 1).
    pub fn forward_locate(&self, stegos: Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(&stegos, self.config.image_side, "locating network")?;
        let mut g = Graph::new();
        let x = g.input(stegos);
        let y = self.locate.forward(&mut g, &self.params, x);
        Ok(g.value(y).clone())
    }

    /// R on a batch of patches: `[n, 3, s/omega, s/omega] -> [n, 3, s, s]`.
    pub fn forward_reveal(&self, patches: Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(&patches, self.config.code_side(), "revealing network")?;
        let mut g = Graph::new();
        let x = g.input(patches);
        let y = self.reveal.forward(&mut g, &self.params, x);
        Ok(g.value(y).clone())
    }
}

impl Models<f32> {
    pub fn hide_images(&self, secrets: &[&ImageTensor]) -> Result<Vec<SecretCode>> {
        if secrets.is_empty() {
            return Ok(Vec::new());
        }
        let codes = self.forward_hide(batch_tensor(secrets))?;
        let side = codes.height();
        (0..codes.batch())
            .map(|i| SecretCode::new(side, codes.item(i).to_vec()))
            .collect()
    }

    pub fn locate_image(&self, stego: &ImageTensor) -> Result<LocationMap> {
        let map = self.forward_locate(stego.to_tensor())?;
        LocationMap::new(map.height(), map.width(), map.item(0).to_vec())
    }

    pub fn reveal_patches(&self, patches: &[&ImageTensor]) -> Result<Vec<ImageTensor>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.forward_reveal(batch_tensor(patches))?;
        Ok((0..out.batch())
            .map(|i| ImageTensor::from_tensor(&out, i))
            .collect())
    }
}
