use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use candle_core::DType;
use haze_core::checkpoint::{file_name, latest, Checkpoint};
use haze_core::ffa::{Ffa, FfaConfig};
use haze_core::synth::{write_toy_dataset, ToyDatasetSpec};
use haze_core::training::{Phase, ALLOWED_K};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_haze-restore"));
    c.env("RUST_LOG", "warn").env_remove("HAZE_RESTORE_HOME");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_png(path: &Path, w: u32, h: u32, seed: u8) {
    image::RgbImage::from_fn(w, h, |x, y| {
        image::Rgb([(x as u8).wrapping_mul(7).wrapping_add(seed), (y as u8).wrapping_mul(3), seed])
    })
    .save(path)
    .unwrap();
}

fn identity_checkpoint(dir: &Path, k: usize) -> PathBuf {
    let g = Ffa::new(FfaConfig::tiny(), 0, DType::F32).unwrap();
    g.params().zero_all().unwrap();
    let variant = format!("k{k}");
    let path = dir.join(file_name(Phase::Finetune, &variant, 1));
    Checkpoint::from_generator(Phase::Finetune, &variant, &g).unwrap().save(&path).unwrap();
    path
}

fn toy(root: &Path) {
    write_toy_dataset(
        root,
        &ToyDatasetSpec {
            paired: 5,
            unpaired: 3,
            test: 2,
            size: 32,
            seed: 4,
        },
    )
    .unwrap();
}

#[test]
fn help_lists_every_flag() {
    let cases: [(&str, &[&str]); 7] = [
        ("pretrain", &["--data-root", "--checkpoint", "--lr", "--epochs", "--seed", "--out", "--device", "--config"]),
        ("train-gan", &["--data-root", "--checkpoint", "--lr", "--epochs", "--seed", "--out", "--device"]),
        ("finetune", &["--data-root", "--checkpoint", "--k-paired", "--lr", "--epochs", "--seed", "--out", "--device"]),
        ("grid", &["--data-root", "--checkpoint", "--out", "--seed", "--table", "--profile"]),
        ("evaluate", &["--checkpoint", "--data-root", "--input", "--reference", "--out", "--size", "--device"]),
        ("restore", &["--input", "--checkpoint", "--out", "--reference", "--k-paired", "--server", "--device"]),
        ("synthesize", &["--out", "--input", "--kind", "--severity", "--seed"]),
    ];
    let top = run(&["--help"]);
    assert!(top.status.success());
    for (cmd, flags) in cases {
        let out = run(&[cmd, "--help"]);
        assert!(out.status.success(), "{cmd}");
        let text = String::from_utf8(out.stdout).unwrap();
        for flag in flags {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}");
        }
        assert!(String::from_utf8_lossy(&top.stdout).contains(cmd));
    }
}

#[test]
fn restore_with_identity_checkpoint_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path(), 25);
    let input = dir.path().join("in.png");
    write_png(&input, 40, 36, 1);
    let out = dir.path().join("out.png");
    let o = run(&["restore", "--input", s(&input), "--checkpoint", s(&ckpt), "--out", s(&out), "--reference", s(&input)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("SSIM 1.0000"), "{stdout}");
    let img = image::open(&out).unwrap();
    assert_eq!((img.width(), img.height()), (40, 36));
    assert_eq!(img.to_rgb8(), image::open(&input).unwrap().to_rgb8());
}

#[test]
fn restore_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path(), 25);
    let input = dir.path().join("in.png");
    write_png(&input, 32, 32, 2);
    let out = dir.path().join("out.png");

    let corrupt = dir.path().join("corrupt.ckpt");
    std::fs::write(&corrupt, b"definitely not safetensors").unwrap();
    let o = run(&["restore", "--input", s(&input), "--checkpoint", s(&corrupt), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corrupt.ckpt"));

    let junk = dir.path().join("junk.png");
    std::fs::write(&junk, b"nope").unwrap();
    let o = run(&["restore", "--input", s(&junk), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["restore", "--input", s(&dir.path().join("absent.png")), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["restore", "--input", s(&input), "--checkpoint", s(&ckpt), "--k-paired", "5", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));

    let o = bin()
        .args(["restore", "--input", s(&input), "--k-paired", "25", "--out", s(&out)])
        .env("HAZE_RESTORE_HOME", dir.path().join("empty"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn restore_finds_variant_under_home() {
    let home = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(home.path().join("checkpoints")).unwrap();
    identity_checkpoint(&home.path().join("checkpoints"), 10);
    let input = home.path().join("in.png");
    write_png(&input, 24, 20, 3);
    let o = bin()
        .args(["restore", "--input", s(&input), "--k-paired", "10"])
        .env("HAZE_RESTORE_HOME", home.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(home.path().join("in_restored.png").is_file());
}

#[test]
fn restore_through_service() {
    let ckpt = tempfile::tempdir().unwrap();
    let artifacts = tempfile::tempdir().unwrap();
    for k in ALLOWED_K {
        identity_checkpoint(ckpt.path(), k);
    }
    let state = Arc::new(
        haze_service::AppState::new(haze_service::ServiceConfig::new(ckpt.path(), artifacts.path())).unwrap(),
    );
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    rt.spawn(haze_service::serve(listener, state));

    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    write_png(&input, 50, 30, 4);
    let out = dir.path().join("out.png");
    let o = run(&["restore", "--input", s(&input), "--server", &url, "--k-paired", "20", "--out", s(&out), "--reference", s(&input)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("SSIM"));
    let img = image::open(&out).unwrap();
    assert_eq!((img.width(), img.height()), (50, 30));

    let o = run(&["restore", "--input", s(&input), "--server", &url, "--k-paired", "7", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[25, 20, 10, 5, 0]"));
}

#[test]
fn evaluate_writes_one_row_per_image() {
    let data = tempfile::tempdir().unwrap();
    toy(data.path());
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path(), 0);
    let out = dir.path().join("eval");
    let o = run(&["evaluate", "--checkpoint", s(&ckpt), "--data-root", s(data.path()), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reports = haze_core::metrics::read_reports_csv(&out.join("metrics.csv")).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.variant == "k0"));
    assert!(out.join("t_000.png").is_file());
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean over 2"));
}

#[test]
fn synthesize_writes_dataset_and_degrades_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("toy");
    let o = run(&["synthesize", "--out", s(&root), "--paired", "3", "--size", "24"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_dir(root.join("paired/hazy")).unwrap().count(), 3);
    let rain = dir.path().join("rain");
    let clean = root.join("paired/clean");
    let args = ["synthesize", "--out", s(&rain), "--input", s(&clean), "--kind", "rain", "--severity", "0.7"];
    assert!(run(&args).status.success());
    assert_eq!(std::fs::read_dir(&rain).unwrap().count(), 3);
    let first = std::fs::read(rain.join("img_000.png")).unwrap();
    assert!(run(&args).status.success());
    assert_eq!(std::fs::read(rain.join("img_000.png")).unwrap(), first);
}

#[test]
fn pipeline_with_config_file_and_flag_precedence() {
    let data = tempfile::tempdir().unwrap();
    toy(data.path());
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("train.conf");
    std::fs::write(&config, format!("# smoke settings\ndata_root = {}\nlr = 0.005\nepochs = 7\nmax_steps = 2\n", s(data.path()))).unwrap();
    let out = dir.path().join("ckpt");
    let base = ["--profile", "smoke", "--config", s(&config), "--out", s(&out)];

    let o = bin().arg("pretrain").args(base).args(["--epochs", "1", "--seed", "3"]).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pre = latest(&out, Phase::FfaPretrain, "base").unwrap();
    let meta = Checkpoint::load(&pre).unwrap().meta;
    let train = meta.train.unwrap();
    assert_eq!((train.lr, train.epochs, train.seed, meta.step), (0.005, 1, 3, 2));
    assert!(out.join("ffa_pretrain_base_history.csv").is_file());

    let o = bin().arg("train-gan").args(base).args(["--checkpoint", s(&pre)]).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let gan = latest(&out, Phase::Cyclegan, "base").unwrap();

    let o = bin().arg("finetune").args(base).args(["--checkpoint", s(&gan), "--k-paired", "3"]).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not one of"));
    assert!(latest(&out, Phase::Finetune, "k3").is_some());

    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "learning_rate = 1\n").unwrap();
    let o = run(&["pretrain", "--config", s(&bad), "--data-root", s(data.path()), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}
