use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rescale_core::data::{load_png, save_png, synth, ImageRGB};
use rescale_core::gradcheck::PRIMITIVES;
use rescale_core::inn::{LatentMode, LatentSpec, ModelConfig, RescaleModel};
use rescale_core::trainer::TrainConfig;
use rescale_core::Checkpoint;

fn rescale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rescale"))
        .args(args)
        .env_remove("RESCALE_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = rescale(args);
    assert!(
        out.status.success(),
        "rescale {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn model_config(c_w: usize) -> ModelConfig {
    ModelConfig {
        scale: 2,
        blocks: 2,
        growth: 4,
        clamp: 1.0,
        latent: LatentSpec {
            c_w,
            w_mode: LatentMode::Gaussian,
            zhat_mode: LatentMode::Zero,
        },
    }
}

/// A model whose every weight is drawn with standard deviation `std`; 0
/// keeps the fresh model, which is the plain Haar analysis.
fn write_checkpoint(dir: &Path, name: &str, c_w: usize, std: f64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = RescaleModel::<f32>::new(model_config(c_w), &mut rng).unwrap();
    if std > 0.0 {
        model.randomize(&mut rng, std);
    }
    let path = dir.join(name);
    Checkpoint::from_model(&model).save(&path).unwrap();
    path
}

fn write_image(dir: &Path, name: &str, w: usize, h: usize, seed: u64) -> PathBuf {
    let img = synth::natural_image(&mut ChaCha8Rng::seed_from_u64(seed), w, h).unwrap();
    let path = dir.join(name);
    save_png(&path, &img).unwrap();
    path
}

fn max_level_diff(a: &ImageRGB, b: &ImageRGB) -> i64 {
    assert_eq!((a.width(), a.height()), (b.width(), b.height()));
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x * 255.0).round() as i64 - (y * 255.0).round() as i64).abs())
        .max()
        .unwrap()
}

/// Parses `name,psnr_db,ssim` rows.
fn report_rows(csv: &str) -> Vec<(String, f64, f64)> {
    csv.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn train_help_lists_every_config_key_with_its_default() {
    let help = String::from_utf8(ok(&["train", "--help"]).stdout).unwrap();
    let defaults: toml::Table = TrainConfig::default().to_toml().unwrap().parse().unwrap();
    for key in TrainConfig::KEYS {
        let flag = format!("--{} ", key.replace('_', "-"));
        let start = help.find(&flag).unwrap_or_else(|| panic!("{flag} missing from help"));
        let entry = &help[start..];
        let entry = &entry[..entry[2..].find("\n      --").map_or(entry.len(), |i| i + 2)];
        let shown = entry
            .split("[default: ")
            .nth(1)
            .and_then(|r| r.split(']').next())
            .unwrap_or_else(|| panic!("{flag} has no default in help"));
        match defaults.get(key) {
            None => assert!(shown == "auto" || shown == "none", "{key}: {shown}"),
            Some(toml::Value::String(v)) => assert_eq!(shown, v, "{key}"),
            Some(toml::Value::Boolean(v)) => assert_eq!(shown, v.to_string(), "{key}"),
            Some(toml::Value::Integer(v)) => assert_eq!(shown, v.to_string(), "{key}"),
            Some(toml::Value::Float(v)) => assert_eq!(shown.parse::<f64>().unwrap(), *v, "{key}"),
            Some(other) => panic!("{key}: unexpected default {other}"),
        }
    }
}

#[test]
fn every_flag_in_every_command_is_documented() {
    for cmd in [
        "train",
        "downscale",
        "upscale",
        "roundtrip",
        "ablate",
        "metrics",
        "gradcheck",
        "synth",
    ] {
        let help = String::from_utf8(ok(&[cmd, "--help"]).stdout).unwrap();
        let lines: Vec<&str> = help.lines().map(str::trim).collect();
        for (i, line) in lines.iter().enumerate() {
            if line.starts_with("--") || line.starts_with("-h") {
                let next = lines.get(i + 1).copied().unwrap_or_default();
                let inline = line.split("  ").filter(|p| !p.is_empty()).count() > 1;
                assert!(inline || !(next.is_empty() || next.starts_with('-')), "{cmd}: {line}");
            }
        }
    }
}

#[test]
fn print_config_applies_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "blocks = 3\ngrowth = 4\nseed = 9\n").unwrap();
    let out = ok(&[
        "train",
        "--config",
        s(&file),
        "--growth",
        "6",
        "--out",
        s(dir.path()),
        "--print-config",
    ]);
    let cfg = TrainConfig::from_toml(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!((cfg.blocks, cfg.growth, cfg.seed), (3, 6, 9));

    let out = Command::new(env!("CARGO_BIN_EXE_rescale"))
        .args(["train", "--out", s(dir.path()), "--print-config"])
        .env("RESCALE_SEED", "42")
        .output()
        .unwrap();
    let cfg = TrainConfig::from_toml(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.seed, 42);

    let out = rescale(&[
        "train",
        "--config",
        s(&file),
        "--lambda-inv",
        "maybe",
        "--out",
        s(dir.path()),
    ]);
    assert!(!out.status.success());
}

#[test]
fn constant_gray_stays_gray_through_the_fresh_model() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path(), "fresh.ckpt", 2, 0.0);
    let gray = ImageRGB::from_fn(32, 24, |_, _, _| 120.0 / 255.0).unwrap();
    let input = dir.path().join("gray.png");
    save_png(&input, &gray).unwrap();
    let lr = dir.path().join("lr.png");
    ok(&[
        "downscale",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&input),
        "--out",
        s(&lr),
        "--seed",
        "1",
    ]);
    let lr = load_png(&lr).unwrap();
    assert_eq!((lr.width(), lr.height()), (16, 12));
    assert!(lr.data().iter().all(|&v| (v * 255.0).round() == 120.0));
}

#[test]
fn odd_sizes_are_center_cropped_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path(), "m.ckpt", 2, 0.05);
    let input = write_image(dir.path(), "odd.png", 65, 64, 1);
    let lr = dir.path().join("lr.png");
    let out = ok(&["downscale", "--ckpt", s(&ckpt), "--in", s(&input), "--out", s(&lr)]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("center-cropped to 64x64"), "{stderr}");
    let lr = load_png(&lr).unwrap();
    assert_eq!((lr.width(), lr.height()), (32, 32));
}

#[test]
fn downscale_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path(), "m.ckpt", 2, 0.05);
    let input = write_image(dir.path(), "x.png", 48, 40, 2);
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "downscale",
            "--ckpt",
            s(&ckpt),
            "--in",
            s(&input),
            "--out",
            s(&out),
            "--seed",
            seed,
        ]);
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("5", "a.png"), run("5", "b.png"));
    // The seed falls back to the environment.
    let out = dir.path().join("env.png");
    let status = Command::new(env!("CARGO_BIN_EXE_rescale"))
        .args(["downscale", "--ckpt", s(&ckpt), "--in", s(&input), "--out", s(&out)])
        .env("RESCALE_SEED", "5")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(std::fs::read(out).unwrap(), run("5", "c.png"));
}

#[test]
fn saved_latent_and_exact_lr_invert_to_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path(), "m.ckpt", 2, 0.05);
    let input = write_image(dir.path(), "x.png", 48, 40, 3);
    let (lr, z, hr) = (
        dir.path().join("lr.png"),
        dir.path().join("z.bin"),
        dir.path().join("hr.png"),
    );
    ok(&[
        "downscale",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&input),
        "--out",
        s(&lr),
        "--save-z",
        s(&z),
        "--no-quantize",
    ]);
    ok(&[
        "upscale",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&lr),
        "--out",
        s(&hr),
        "--zblob",
        s(&z),
    ]);
    assert!(max_level_diff(&load_png(&input).unwrap(), &load_png(&hr).unwrap()) <= 1);
}

#[test]
fn latent_of_the_wrong_shape_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path(), "m.ckpt", 2, 0.05);
    let small = write_image(dir.path(), "small.png", 32, 32, 4);
    let large = write_image(dir.path(), "large.png", 48, 48, 5);
    let (lr_small, lr_large) = (dir.path().join("lr_s.png"), dir.path().join("lr_l.png"));
    let z = dir.path().join("z.bin");
    ok(&[
        "downscale",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&small),
        "--out",
        s(&lr_small),
        "--save-z",
        s(&z),
    ]);
    ok(&[
        "downscale",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&large),
        "--out",
        s(&lr_large),
    ]);
    let hr = dir.path().join("hr.png");
    let out = rescale(&[
        "upscale",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&lr_large),
        "--out",
        s(&hr),
        "--zblob",
        s(&z),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("latent has shape"));
    assert!(!hr.exists());
}

#[test]
fn sampled_latents_are_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path(), "m.ckpt", 0, 0.05);
    let input = write_image(dir.path(), "x.png", 32, 32, 6);
    let lr = dir.path().join("lr.png");
    ok(&["downscale", "--ckpt", s(&ckpt), "--in", s(&input), "--out", s(&lr)]);
    let up = |zhat: &str, seed: &str, name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "upscale",
            "--ckpt",
            s(&ckpt),
            "--in",
            s(&lr),
            "--out",
            s(&out),
            "--zhat",
            zhat,
            "--seed",
            seed,
        ]);
        std::fs::read(out).unwrap()
    };
    assert_eq!(up("zero", "1", "a.png"), up("zero", "2", "b.png"));
    assert_eq!(up("gaussian", "1", "c.png"), up("gaussian", "1", "d.png"));
    assert_ne!(up("gaussian", "1", "e.png"), up("gaussian", "2", "f.png"));
}

#[test]
fn roundtrip_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path(), "m.ckpt", 2, 0.05);
    let images = dir.path().join("images");
    std::fs::create_dir(&images).unwrap();
    for i in 0..3 {
        write_image(&images, &format!("im{i}.png"), 64, 64, 10 + i);
    }
    let report = dir.path().join("r.csv");
    ok(&[
        "roundtrip",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&images),
        "--report",
        s(&report),
        "--no-quantize",
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("name,psnr_db,ssim\n"));
    let rows = report_rows(&text);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.1 >= 99.0), "{text}");

    // A model near the Haar analysis keeps its LR inside the displayable
    // range, so rounding is the only loss.
    let mild = write_checkpoint(dir.path(), "mild.ckpt", 2, 0.01);
    let out = ok(&["roundtrip", "--ckpt", s(&mild), "--in", s(&images)]);
    let rows = report_rows(std::str::from_utf8(&out.stdout).unwrap());
    assert!(rows.iter().all(|r| r.1 > 45.0 && r.1 < 99.0), "{rows:?}");

    let out = ok(&[
        "roundtrip",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&images.join("im0.png")),
        "--z",
        "zero",
    ]);
    let rows = report_rows(std::str::from_utf8(&out.stdout).unwrap());
    assert_eq!(rows.len(), 1);
    assert!(rows[0].1.is_finite() && rows[0].1 < 45.0, "{rows:?}");
}

#[test]
fn metrics_of_identical_images_hit_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_image(dir.path(), "a.png", 40, 40, 7);
    let out = ok(&["metrics", "--reference", s(&a), "--test", s(&a), "--border", "2"]);
    let rows = report_rows(std::str::from_utf8(&out.stdout).unwrap());
    assert_eq!(rows[0].1, 99.0);
    assert_eq!(rows[0].2, 1.0);
}

#[test]
fn unreadable_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path(), "m.ckpt", 2, 0.05);
    let missing = dir.path().join("missing.png");
    let out = rescale(&[
        "downscale",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&missing),
        "--out",
        s(&dir.path().join("o.png")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.png"));
    let input = write_image(dir.path(), "x.png", 32, 32, 8);
    let out = rescale(&[
        "downscale",
        "--ckpt",
        s(&input),
        "--in",
        s(&input),
        "--out",
        s(&dir.path().join("o.png")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn gradcheck_passes_and_the_perturbed_run_fails() {
    let out = ok(&["gradcheck", "--size", "tiny"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for name in PRIMITIVES
        .iter()
        .chain(&["inv_block", "inv_block_inverse", "total_loss"])
    {
        let hits = text
            .lines()
            .filter(|l| l.split_whitespace().nth(2) == Some(name))
            .count();
        assert_eq!(hits, 1, "{name} in\n{text}");
    }
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() == PRIMITIVES.len() + 3);

    let out = rescale(&["gradcheck", "--perturb", "0.01"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn train_writes_a_usable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("train");
    ok(&[
        "synth",
        "--out",
        s(&images),
        "--count",
        "3",
        "--size",
        "48",
        "--seed",
        "1",
    ]);
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "train",
            "--train-dir",
            s(&images),
            "--eval-dir",
            s(&images),
            "--out",
            s(&out),
            "--blocks",
            "1",
            "--growth",
            "4",
            "--patch",
            "16",
            "--batch",
            "2",
            "--iterations",
            "6",
            "--eval-every",
            "3",
            "--checkpoint-every",
            "3",
            "--samples",
            "2",
        ]);
        out
    };
    let a = run("a");
    for f in [
        "config.toml",
        "final.ckpt",
        "ckpt_0000003.ckpt",
        "train_log.csv",
        "eval_log.csv",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
    let b = run("b");
    for f in ["final.ckpt", "train_log.csv", "eval_log.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let lr = dir.path().join("lr.png");
    ok(&[
        "downscale",
        "--ckpt",
        s(&a.join("final.ckpt")),
        "--in",
        s(&images.join("img000.png")),
        "--out",
        s(&lr),
    ]);
    assert_eq!(load_png(&lr).unwrap().width(), 24);
}
