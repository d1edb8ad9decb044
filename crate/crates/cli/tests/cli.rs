//! End-to-end runs of the `ldh` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use ldh_core::dataset_io::{load_image, quantize};
use ldh_core::distortions::{apply_attack, DistortionSpec};
use ldh_core::embedding::parse_regions;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

fn ldh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldh"))
        .args(args)
        .env_remove("LDH_SEED")
        .output()
        .expect("ldh runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ldh(args);
    assert!(
        out.status.success(),
        "ldh {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

/// Runs `args` twice into a fresh `out` directory and checks the outputs
/// are byte-identical.
fn assert_reproducible(out: &Path, args: &[&str]) {
    let mut full: Vec<&str> = args.to_vec();
    full.extend(["--out", s(out)]);
    let _ = fs::remove_dir_all(out);
    let first_run = ok(&full);
    let first = snapshot(out);
    fs::remove_dir_all(out).unwrap();
    let second_run = ok(&full);
    assert_eq!(first_run.stdout, second_run.stdout);
    let second = snapshot(out);
    assert_eq!(
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>()
    );
    for (k, v) in &first {
        assert!(v == &second[k], "{} differs between runs", k.display());
    }
}

struct Fixture {
    dir: TempDir,
    data: PathBuf,
    ckpt: PathBuf,
    wide_ckpt: PathBuf,
}

impl Fixture {
    fn image(&self, i: usize) -> PathBuf {
        self.dir.path().join(format!("data/images/img_{i:05}.png"))
    }
}

/// Synthetic images plus two briefly trained models (omega 2 and omega 4).
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data_dir = dir.path().join("data");
        ok(&[
            "synth",
            "--count",
            "20",
            "--side",
            "32",
            "--seed",
            "5",
            "--out",
            s(&data_dir),
        ]);
        let data = data_dir.join("dataset.txt");
        let train = |omega: &str, name: &str| {
            let out = dir.path().join(name);
            ok(&[
                "train",
                "--data",
                s(&data),
                "--side",
                "32",
                "--omega",
                omega,
                "--nhf",
                "8",
                "--pretrain-epochs",
                "1",
                "--cotrain-epochs",
                "1",
                "--batch-size",
                "4",
                "--seed",
                "1",
                "--out",
                s(&out),
            ]);
            out.join("last.ckpt")
        };
        let ckpt = train("2", "model");
        let wide_ckpt = train("4", "wide");
        Fixture {
            dir,
            data,
            ckpt,
            wide_ckpt,
        }
    })
}

#[test]
fn synth_and_train_are_reproducible() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    assert_reproducible(
        &tmp.path().join("synth"),
        &["synth", "--count", "4", "--side", "32", "--seed", "9"],
    );
    assert_reproducible(
        &tmp.path().join("train"),
        &[
            "train",
            "--data",
            s(&f.data),
            "--side",
            "32",
            "--omega",
            "2",
            "--nhf",
            "8",
            "--pretrain-epochs",
            "1",
            "--cotrain-epochs",
            "1",
            "--batch-size",
            "4",
            "--seed",
            "3",
        ],
    );
}

#[test]
fn hide_reveal_attack_evaluate_rate_are_reproducible() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let (ck, c0, s1, s2) = (s(&f.ckpt), f.image(0), f.image(1), f.image(2));
    let hide_dir = tmp.path().join("hide");
    assert_reproducible(
        &hide_dir,
        &[
            "hide",
            "--checkpoint",
            ck,
            "--cover",
            s(&c0),
            "--secret",
            s(&s1),
            "--secret",
            s(&s2),
            "--placement",
            "grid",
            "--seed",
            "4",
        ],
    );
    let stego = hide_dir.join("stego.png");
    let kept = tmp.path().join("stego.png");
    fs::copy(&stego, &kept).unwrap();
    assert_reproducible(
        &tmp.path().join("reveal"),
        &[
            "reveal",
            "--checkpoint",
            ck,
            "--stego",
            s(&kept),
            "--threshold",
            "0.0",
        ],
    );
    assert_reproducible(
        &tmp.path().join("attack"),
        &[
            "attack",
            "--stego",
            s(&kept),
            "--cover",
            s(&c0),
            "--attack",
            "dropout:p=0.3",
            "--seed",
            "2",
        ],
    );
    assert_reproducible(
        &tmp.path().join("eval"),
        &[
            "evaluate",
            "--checkpoint",
            ck,
            "--data",
            s(&f.data),
            "--n-secrets",
            "1,2",
            "--attack",
            "jpeg:q=80",
        ],
    );
    assert_reproducible(
        &tmp.path().join("rate"),
        &["rate", "--checkpoint", ck, "--data", s(&f.data)],
    );
}

#[test]
fn explicit_regions_round_trip_through_reveal() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let regions = tmp.path().join("regions.txt");
    fs::write(&regions, "16 0 16\n0 9 16\n").unwrap();
    let hide_dir = tmp.path().join("hide");
    ok(&[
        "hide",
        "--checkpoint",
        s(&f.ckpt),
        "--cover",
        s(&f.image(0)),
        "--secret",
        s(&f.image(1)),
        "--secret",
        s(&f.image(2)),
        "--placement",
        "explicit",
        "--regions",
        s(&regions),
        "--out",
        s(&hide_dir),
    ]);
    let written = fs::read_to_string(hide_dir.join("regions.txt")).unwrap();
    assert_eq!(
        parse_regions(&written).unwrap(),
        parse_regions(&fs::read_to_string(&regions).unwrap()).unwrap()
    );
    let reveal_dir = tmp.path().join("reveal");
    ok(&[
        "reveal",
        "--checkpoint",
        s(&f.ckpt),
        "--stego",
        s(&hide_dir.join("stego.png")),
        "--regions",
        s(&hide_dir.join("regions.txt")),
        "--out",
        s(&reveal_dir),
    ]);
    assert_eq!(
        fs::read_to_string(reveal_dir.join("regions.txt")).unwrap(),
        written
    );
    assert!(reveal_dir.join("revealed_0.png").exists());
    assert!(reveal_dir.join("revealed_1.png").exists());
    assert!(reveal_dir.join("location_map.png").exists());
}

#[test]
fn attacked_file_matches_in_memory_attack() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    for attack in [
        "dropout:p=0.3",
        "gaussian:k=5,sigma=1",
        "jpeg:q=50",
        "crop:blocks=1,5",
        "cropout:blocks=0",
    ] {
        ok(&[
            "attack",
            "--stego",
            s(&f.image(3)),
            "--cover",
            s(&f.image(4)),
            "--attack",
            attack,
            "--seed",
            "8",
            "--out",
            s(tmp.path()),
        ]);
        let spec: DistortionSpec = attack.parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let want = apply_attack(
            &spec,
            &load_image(&f.image(3)).unwrap(),
            &load_image(&f.image(4)).unwrap(),
            &mut rng,
        )
        .unwrap();
        let got = load_image(&tmp.path().join("attacked.png")).unwrap();
        assert_eq!(got, quantize(&want), "{attack}");
    }
}

#[test]
fn grid_hiding_at_omega_four_reports_full_rate() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let mut args = vec![
        "hide".to_string(),
        "--checkpoint".into(),
        s(&f.wide_ckpt).into(),
    ];
    args.extend([
        "--cover".into(),
        s(&f.image(0)).into(),
        "--placement".into(),
        "grid".into(),
    ]);
    for i in 1..=16 {
        args.extend(["--secret".into(), s(&f.image(i)).into()]);
    }
    args.extend(["--out".into(), s(tmp.path()).into()]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = ok(&refs);
    assert!(String::from_utf8_lossy(&out.stdout).contains("16x24 = 384 bpp"));
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["resolved"]["embedding_rate_bpp"], 384);
    let regions =
        parse_regions(&fs::read_to_string(tmp.path().join("regions.txt")).unwrap()).unwrap();
    let mut cells: Vec<_> = regions.iter().map(|r| (r.top, r.left)).collect();
    cells.sort();
    cells.dedup();
    assert_eq!(cells.len(), 16);
}

#[test]
fn rate_reports_one_line_per_threshold() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let out = ok(&[
        "rate",
        "--checkpoint",
        s(&f.ckpt),
        "--data",
        s(&f.data),
        "--thresholds",
        "26,32",
        "--out",
        s(tmp.path()),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains("bpp")).count(), 2);
    let csv = fs::read_to_string(tmp.path().join("rate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn manifest_records_filled_in_defaults() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("config.json");
    fs::write(
        &config,
        r#"{"schedule": {"pretrain_epochs": 1, "cotrain_epochs": 0, "batch_size": 4}}"#,
    )
    .unwrap();
    ok(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&f.data),
        "--side",
        "32",
        "--omega",
        "2",
        "--nhf",
        "8",
        "--out",
        s(tmp.path()),
    ]);
    let m: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap())
            .unwrap();
    let schedule = &m["resolved"]["train_config"]["schedule"];
    assert_eq!(schedule["lr"], 0.001);
    assert_eq!(schedule["lr_decay_every"], 30);
    assert_eq!(schedule["seed"], 0);
    assert_eq!(m["globals"]["seed"], 0);
    assert_eq!(m["resolved"]["train_config"]["loss"]["hide_p"], 1);
    assert_eq!(m["resolved"]["train_config"]["distortion"], "none");
    assert!(tmp.path().join("split.json").exists());
    assert!(tmp.path().join("history.csv").exists());
}

#[test]
fn seed_falls_back_to_environment() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let run = |dir: &Path, env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ldh"));
        cmd.args([
            "attack",
            "--stego",
            s(&f.image(0)),
            "--cover",
            s(&f.image(1)),
            "--attack",
            "dropout:p=0.5",
        ]);
        cmd.args(["--out", s(dir)]).env_remove("LDH_SEED");
        if let Some(v) = env {
            cmd.env("LDH_SEED", v);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read(dir.join("attacked.png")).unwrap()
    };
    let env = run(&tmp.path().join("env"), Some("42"));
    let flag = ok(&[
        "attack",
        "--stego",
        s(&f.image(0)),
        "--cover",
        s(&f.image(1)),
        "--attack",
        "dropout:p=0.5",
        "--seed",
        "42",
        "--out",
        s(&tmp.path().join("flag")),
    ]);
    assert!(flag.status.success());
    assert_eq!(env, fs::read(tmp.path().join("flag/attacked.png")).unwrap());
    assert_ne!(env, run(&tmp.path().join("none"), None));
}

#[test]
fn exit_codes_distinguish_failures() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let out = s(tmp.path());
    let code = |args: &[&str]| ldh(args).status.code();

    // Config errors.
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&f.data),
            "--omega",
            "3",
            "--side",
            "32",
            "--out",
            out
        ]),
        Some(2)
    );
    assert_eq!(
        code(&[
            "attack",
            "--stego",
            s(&f.image(0)),
            "--cover",
            s(&f.image(1)),
            "--attack",
            "sharpen",
            "--out",
            out
        ]),
        Some(2)
    );
    assert_eq!(
        code(&["evaluate", "--data", s(&f.data), "--out", out]),
        Some(2)
    );
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"schedule": {"learning_rate": 0.1}}"#).unwrap();
    assert_eq!(
        code(&[
            "train",
            "--config",
            s(&bad),
            "--data",
            s(&f.data),
            "--out",
            out
        ]),
        Some(2)
    );

    // Data errors.
    let missing = tmp.path().join("missing.png");
    assert_eq!(
        code(&[
            "attack",
            "--stego",
            s(&missing),
            "--cover",
            s(&f.image(1)),
            "--attack",
            "jpeg:q=80",
            "--out",
            out
        ]),
        Some(3)
    );
    let garbage = tmp.path().join("garbage.png");
    fs::write(&garbage, b"not an image").unwrap();
    assert_eq!(
        code(&[
            "reveal",
            "--checkpoint",
            s(&f.ckpt),
            "--stego",
            s(&garbage),
            "--out",
            out
        ]),
        Some(3)
    );

    // Nothing above the threshold.
    assert_eq!(
        code(&[
            "reveal",
            "--checkpoint",
            s(&f.ckpt),
            "--stego",
            s(&f.image(0)),
            "--threshold",
            "1.0",
            "--out",
            out
        ]),
        Some(4)
    );
    assert!(tmp.path().join("location_map.png").exists());
    assert_eq!(
        fs::read_to_string(tmp.path().join("regions.txt")).unwrap(),
        ""
    );
}
