use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use ldh_core::checkpoint::Checkpoint;
use ldh_core::dataset_io::{
    load_image, load_images, read_manifest, save_image, save_map, split_dataset, write_manifest,
    ImageTensor,
};
use ldh_core::distortions::{apply_attack, DistortionSpec};
use ldh_core::embedding::{
    embedding_rate_bpp, extract_regions, format_regions, local_add_many, parse_regions,
    sample_regions, texture_regions, PlacementMode, Region,
};
use ldh_core::evaluation::{
    self, max_embedding_rate, CropSource, EvalOptions, RateAnalysisConfig, Restoration,
};
use ldh_core::networks::Models;
use ldh_core::training::{checkpoint_path, DistortionMode, TrainConfig, Trainer};
use ldh_core::{synth, LdhError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::{Command, Failure, Globals};

type CmdResult = Result<(), Failure>;

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Manifest listing training images (one path per line).
    #[arg(long)]
    pub data: PathBuf,
    /// Separate validation manifest; without it `--data` is split.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Train/val/test fractions used when `--val` is absent.
    #[arg(long, default_value = "0.9,0.1,0.0")]
    pub split: String,
    /// `none`, `combined`, or a noise layer such as `jpeg:q=80`.
    #[arg(long)]
    pub distortion: Option<String>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub cotrain_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub omega: Option<usize>,
    #[arg(long)]
    pub nhf: Option<usize>,
    #[arg(long)]
    pub side: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Random,
    Grid,
    Texture,
    Explicit,
}

#[derive(Debug, Args, Serialize)]
pub struct HideArgs {
    /// Secret image; repeat for several secrets.
    #[arg(long = "secret", required = true)]
    pub secrets: Vec<PathBuf>,
    #[arg(long)]
    pub cover: PathBuf,
    #[arg(long, value_enum, default_value = "random")]
    pub placement: Placement,
    /// Region file for `--placement explicit` (one `top left side` per line).
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// Stego file name inside the output directory.
    #[arg(long, default_value = "stego.png")]
    pub output: String,
}

#[derive(Debug, Args, Serialize)]
pub struct RevealArgs {
    #[arg(long)]
    pub stego: PathBuf,
    /// Known regions; skips region extraction.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// Map level above which a grid cell counts as embedded.
    #[arg(long, default_value_t = evaluation::DEFAULT_THRESHOLD)]
    pub threshold: f32,
}

#[derive(Debug, Args, Serialize)]
pub struct AttackArgs {
    #[arg(long)]
    pub stego: PathBuf,
    #[arg(long)]
    pub cover: PathBuf,
    /// Attack such as `jpeg:q=80`, `gaussian:k=5,sigma=1`, `cropout:blocks=0`.
    #[arg(long)]
    pub attack: String,
    #[arg(long, default_value = "attacked.png")]
    pub output: String,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Manifest of test images.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated secret counts.
    #[arg(long, default_value = "1")]
    pub n_secrets: String,
    /// Attack to evaluate under; repeatable.
    #[arg(long = "attack")]
    pub attacks: Vec<String>,
    #[arg(long, value_enum, default_value = "located")]
    pub crop_source: CropArg,
    #[arg(long)]
    pub no_quantize: bool,
    #[arg(long, default_value_t = evaluation::DEFAULT_THRESHOLD)]
    pub threshold: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropArg {
    Located,
    GroundTruth,
}

impl From<CropArg> for CropSource {
    fn from(c: CropArg) -> Self {
        match c {
            CropArg::Located => CropSource::Located,
            CropArg::GroundTruth => CropSource::GroundTruth,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct RateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated PSNR thresholds in dB.
    #[arg(long, default_value = "26,32")]
    pub thresholds: String,
    /// Largest secret count to sweep (default omega^2).
    #[arg(long)]
    pub max_secrets: Option<usize>,
    /// Shell command run on every revealed secret, with `{in}` and `{out}`.
    #[arg(long)]
    pub restoration: Option<String>,
    #[arg(long)]
    pub no_quantize: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub side: usize,
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(anyhow!(msg.into()))
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, Failure>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| config_err(format!("bad {what} '{s}': {e}")))
        })
        .collect()
}

fn write_json(path: &Path, value: &Value) -> CmdResult {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Data)
}

/// Writes `manifest.json` with the command, its flags and every resolved
/// setting.
fn write_run_manifest(g: &Globals, command: &Command, resolved: Value) -> CmdResult {
    let mut globals = serde_json::to_value(g).expect("globals serialize");
    globals["seed"] = json!(g.seed());
    let manifest = json!({
        "tool": "ldh",
        "version": env!("CARGO_PKG_VERSION"),
        "globals": globals,
        "command": command,
        "resolved": resolved,
    });
    write_json(&g.out.join("manifest.json"), &manifest)
}

fn load_models(g: &Globals) -> Result<(Models<f32>, Checkpoint), Failure> {
    let path = g
        .checkpoint
        .as_ref()
        .ok_or_else(|| config_err("--checkpoint is required for this command"))?;
    let ck = Checkpoint::load(path)?;
    Ok((ck.models()?, ck))
}

fn load_sized(path: &Path, side: usize, what: &str) -> Result<ImageTensor, Failure> {
    let img = load_image(path)?;
    if img.height() != side || img.width() != side {
        return Err(LdhError::Shape(format!(
            "{what} {} is {}x{}, the model expects {side}x{side}",
            path.display(),
            img.height(),
            img.width()
        ))
        .into());
    }
    Ok(img)
}

pub fn run(g: &Globals, command: &Command) -> CmdResult {
    fs::create_dir_all(&g.out)
        .with_context(|| format!("creating {}", g.out.display()))
        .map_err(Failure::Data)?;
    match command {
        Command::Train(a) => train(g, command, a),
        Command::Hide(a) => hide(g, command, a),
        Command::Reveal(a) => reveal(g, command, a),
        Command::Attack(a) => attack(g, command, a),
        Command::Evaluate(a) => evaluate(g, command, a),
        Command::Rate(a) => rate(g, command, a),
        Command::Synth(a) => synth_cmd(g, command, a),
    }
}

fn resolve_train_config(g: &Globals, a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Config)?;
            TrainConfig::from_json(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.schedule.seed = s;
    }
    if let Some(d) = &a.distortion {
        cfg.distortion = d.parse::<DistortionMode>()?;
    }
    let s = &mut cfg.schedule;
    s.pretrain_epochs = a.pretrain_epochs.unwrap_or(s.pretrain_epochs);
    s.cotrain_epochs = a.cotrain_epochs.unwrap_or(s.cotrain_epochs);
    s.batch_size = a.batch_size.unwrap_or(s.batch_size);
    s.lr = a.lr.unwrap_or(s.lr);
    let n = &mut cfg.network;
    n.omega = a.omega.unwrap_or(n.omega);
    n.nhf = a.nhf.unwrap_or(n.nhf);
    n.image_side = a.side.unwrap_or(n.image_side);
    cfg.validate()?;
    Ok(cfg)
}

fn train(g: &Globals, command: &Command, a: &TrainArgs) -> CmdResult {
    let resume = match &g.checkpoint {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };
    let mut trainer = match &resume {
        Some(ck) => Trainer::from_checkpoint(ck)?,
        None => Trainer::new(resolve_train_config(g, a)?)?,
    };
    let cfg = trainer.config.clone();

    let paths = read_manifest(&a.data)?;
    let (train_paths, val_paths) = match &a.val {
        Some(v) => (paths, read_manifest(v)?),
        None => {
            let r: Vec<f64> = parse_list(&a.split, "split")?;
            if r.len() != 3 {
                return Err(config_err("--split needs three fractions"));
            }
            let split = split_dataset(&paths, cfg.schedule.seed, (r[0], r[1], r[2]))?;
            write_json(
                &g.out.join("split.json"),
                &serde_json::to_value(&split).expect("split serializes"),
            )?;
            (split.train, split.val)
        }
    };
    let side = cfg.network.image_side;
    let train_imgs = load_images(&train_paths, side)?;
    let val_imgs = load_images(&val_paths, side)?;
    if train_imgs.is_empty() {
        return Err(LdhError::EmptyDataset.into());
    }

    write_run_manifest(
        g,
        command,
        json!({
            "train_config": cfg,
            "train_images": train_imgs.len(),
            "val_images": val_imgs.len(),
            "resumed_from_epoch": resume.as_ref().map(|c| c.progress.epoch),
        }),
    )?;
    let total = cfg.schedule.total_epochs();
    trainer.fit(&train_imgs, &val_imgs, Some(&g.out), |r| {
        let val = r
            .val
            .map(|v| {
                format!(
                    " val stego {:.2} dB, secret {:.2} dB, IoU {:.3}",
                    v.stego_psnr, v.secret_psnr, v.iou
                )
            })
            .unwrap_or_default();
        eprintln!(
            "epoch {}/{} [{}] lr {:.0e} loss {:.5}{}",
            r.epoch + 1,
            total,
            r.phase,
            r.lr,
            r.loss_total,
            val
        );
    })?;
    println!("{}", checkpoint_path(&g.out).display());
    Ok(())
}

fn hide(g: &Globals, command: &Command, a: &HideArgs) -> CmdResult {
    let (models, _) = load_models(g)?;
    let cfg = models.config;
    let cap = cfg.omega * cfg.omega;
    if a.secrets.len() > cap {
        return Err(config_err(format!(
            "{} secrets do not fit; omega {} holds at most {cap}",
            a.secrets.len(),
            cfg.omega
        )));
    }
    let cover = load_sized(&a.cover, cfg.image_side, "cover")?;
    let secrets = a
        .secrets
        .iter()
        .map(|p| load_sized(p, cfg.image_side, "secret"))
        .collect::<Result<Vec<_>, _>>()?;
    let n = secrets.len();
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed());
    let regions: Vec<Region> = match a.placement {
        Placement::Random => sample_regions(
            n,
            cfg.image_side,
            cfg.omega,
            &mut rng,
            PlacementMode::Random,
        )?,
        Placement::Grid => {
            sample_regions(n, cfg.image_side, cfg.omega, &mut rng, PlacementMode::Grid)?
        }
        Placement::Texture => texture_regions(&cover, n, cfg.omega)?,
        Placement::Explicit => {
            let path = a
                .regions
                .as_ref()
                .ok_or_else(|| config_err("--placement explicit needs --regions"))?;
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Data)?;
            let r = parse_regions(&text)?;
            if r.len() != n {
                return Err(config_err(format!(
                    "{} regions given for {n} secrets",
                    r.len()
                )));
            }
            if let Some(bad) = r.iter().find(|r| r.side != cfg.code_side()) {
                return Err(config_err(format!(
                    "region ({bad}) must have side {}",
                    cfg.code_side()
                )));
            }
            r
        }
    };
    let refs: Vec<&ImageTensor> = secrets.iter().collect();
    let codes = models.hide_images(&refs)?;
    let pairs: Vec<_> = codes.iter().zip(regions.iter().copied()).collect();
    let stego = local_add_many(&cover, &pairs)?;

    let stego_path = g.out.join(&a.output);
    save_image(&stego, &stego_path)?;
    let regions_path = g.out.join("regions.txt");
    fs::write(&regions_path, format_regions(&regions))
        .with_context(|| format!("writing {}", regions_path.display()))
        .map_err(Failure::Data)?;
    let bpp = embedding_rate_bpp(n);
    write_run_manifest(
        g,
        command,
        json!({
            "network": cfg,
            "regions": regions.iter().map(ToString::to_string).collect::<Vec<_>>(),
            "embedding_rate_bpp": bpp,
        }),
    )?;
    println!("hid {n} secrets: {n}x24 = {bpp} bpp");
    Ok(())
}

fn reveal(g: &Globals, command: &Command, a: &RevealArgs) -> CmdResult {
    let (models, _) = load_models(g)?;
    let cfg = models.config;
    let stego = load_sized(&a.stego, cfg.image_side, "stego")?;
    let map = models.locate_image(&stego)?;
    let hard = map.binarize(a.threshold);
    save_map(
        hard.values(),
        hard.height(),
        hard.width(),
        &g.out.join("location_map.png"),
    )?;

    let regions = match &a.regions {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Data)?;
            parse_regions(&text)?
        }
        None => extract_regions(&map, cfg.omega, a.threshold),
    };
    let regions_path = g.out.join("regions.txt");
    fs::write(&regions_path, format_regions(&regions))
        .with_context(|| format!("writing {}", regions_path.display()))
        .map_err(Failure::Data)?;
    let source = if a.regions.is_some() {
        "given"
    } else {
        "located"
    };
    write_run_manifest(
        g,
        command,
        json!({
            "network": cfg,
            "region_source": source,
            "regions": regions.iter().map(ToString::to_string).collect::<Vec<_>>(),
        }),
    )?;
    if regions.is_empty() {
        return Err(Failure::NoRegions);
    }
    if let Some(bad) = regions.iter().find(|r| r.side != cfg.code_side()) {
        return Err(config_err(format!(
            "region ({bad}) must have side {}",
            cfg.code_side()
        )));
    }
    let patches = regions
        .iter()
        .map(|&r| ldh_core::embedding::crop(&stego, r))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&ImageTensor> = patches.iter().collect();
    let revealed = models.reveal_patches(&refs)?;
    for (k, img) in revealed.iter().enumerate() {
        let path = g.out.join(format!("revealed_{k}.png"));
        save_image(img, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn attack(g: &Globals, command: &Command, a: &AttackArgs) -> CmdResult {
    let spec: DistortionSpec = a.attack.parse()?;
    spec.validate()?;
    let stego = load_image(&a.stego)?;
    let cover = load_image(&a.cover)?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed());
    let attacked = apply_attack(&spec, &stego, &cover, &mut rng)?;
    let path = g.out.join(&a.output);
    save_image(&attacked, &path)?;
    write_run_manifest(g, command, json!({ "attack": spec.to_string() }))?;
    println!("{}", path.display());
    Ok(())
}

fn write_text(path: PathBuf, text: &str) -> CmdResult {
    fs::write(&path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Data)
}

fn create(path: PathBuf) -> Result<fs::File, Failure> {
    fs::File::create(&path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(Failure::Data)
}

fn evaluate(g: &Globals, command: &Command, a: &EvaluateArgs) -> CmdResult {
    let (models, _) = load_models(g)?;
    let counts: Vec<usize> = parse_list(&a.n_secrets, "secret count")?;
    let attacks = a
        .attacks
        .iter()
        .map(|s| {
            let spec: DistortionSpec = s.parse()?;
            spec.validate()?;
            Ok(spec)
        })
        .collect::<Result<Vec<_>, LdhError>>()?;
    let test = load_images(&read_manifest(&a.data)?, models.config.image_side)?;
    let base = |n: usize| {
        let mut o = EvalOptions::new(n, g.seed());
        o.quantize = !a.no_quantize;
        o.crop_source = a.crop_source.into();
        o.threshold = a.threshold;
        o
    };
    write_run_manifest(
        g,
        command,
        json!({
            "network": models.config,
            "n_secrets": counts,
            "attacks": attacks.iter().map(ToString::to_string).collect::<Vec<_>>(),
            "quantize": !a.no_quantize,
            "crop_source": CropSource::from(a.crop_source),
            "threshold": a.threshold,
            "test_images": test.len(),
        }),
    )?;

    let mut rows = Vec::with_capacity(counts.len());
    for &n in &counts {
        rows.push(evaluation::evaluate_with(&models, &test, &base(n))?);
    }
    evaluation::write_quality_csv(&rows, create(g.out.join("quality.csv"))?)?;
    let table = evaluation::quality_table(&rows);
    write_text(g.out.join("quality.txt"), &table)?;
    print!("{table}");

    if !attacks.is_empty() {
        let mut rob = Vec::with_capacity(attacks.len());
        for spec in &attacks {
            let mut o = base(1);
            o.attack = Some(spec.clone());
            rob.push(evaluation::RobustnessRow {
                attack: spec.to_string(),
                summary: evaluation::evaluate_with(&models, &test, &o)?,
            });
        }
        evaluation::write_robustness_csv(&rob, create(g.out.join("robustness.csv"))?)?;
        let table = evaluation::robustness_table(&rob);
        write_text(g.out.join("robustness.txt"), &table)?;
        print!("{table}");
    }
    Ok(())
}

fn rate(g: &Globals, command: &Command, a: &RateArgs) -> CmdResult {
    let (models, _) = load_models(g)?;
    let thresholds: Vec<f64> = parse_list(&a.thresholds, "threshold")?;
    if thresholds.is_empty() {
        return Err(config_err("at least one threshold is required"));
    }
    let config = RateAnalysisConfig {
        thresholds_db: thresholds,
        max_secrets: a.max_secrets,
        quantize: !a.no_quantize,
        restoration: a.restoration.clone().map(Restoration::Command),
    };
    let test = load_images(&read_manifest(&a.data)?, models.config.image_side)?;
    let cap = models.config.omega * models.config.omega;
    write_run_manifest(
        g,
        command,
        json!({
            "network": models.config,
            "thresholds_db": config.thresholds_db,
            "max_secrets": config.max_secrets.unwrap_or(cap),
            "quantize": config.quantize,
            "restoration": a.restoration,
            "test_images": test.len(),
        }),
    )?;
    let report = max_embedding_rate(&models, &test, &config, g.seed())?;
    evaluation::write_rate_csv(
        &report,
        create(g.out.join("rate_sweep.csv"))?,
        create(g.out.join("rate.csv"))?,
    )?;
    let table = evaluation::rate_table(&report);
    write_text(g.out.join("rate.txt"), &table)?;
    for r in &report.rates {
        println!("PSNR>={} dB: {} bpp", r.threshold_db, r.bpp);
    }
    Ok(())
}

fn synth_cmd(g: &Globals, command: &Command, a: &SynthArgs) -> CmdResult {
    if a.count == 0 || a.side == 0 {
        return Err(config_err("count and side must be positive"));
    }
    let images = synth::dataset(a.count, a.side, g.seed());
    let dir = g.out.join("images");
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Data)?;
    let mut names = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let name = format!("images/img_{i:05}.png");
        save_image(img, &g.out.join(&name))?;
        names.push(name);
    }
    write_manifest(&g.out.join("dataset.txt"), &names)?;
    write_run_manifest(g, command, json!({ "count": a.count, "side": a.side }))?;
    println!("{}", g.out.join("dataset.txt").display());
    Ok(())
}
