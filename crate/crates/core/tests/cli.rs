use std::path::Path;
use std::process::{Command, Output};

use dynamic_isp::io::{encode_image, Config, ImageFormat};
use dynamic_isp::isp::{IspKind, PipelineSpec};
use dynamic_isp::ndiff::Tensor;
use dynamic_isp::trainer::ablation::identity_cs;

fn dynisp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynisp"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, cfg: &Config) -> String {
    let p = dir.join("config.json");
    cfg.save(&p).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn gradcheck_passes_and_logs_seed() {
    let o = dynisp(&["gradcheck", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("seed 7"));
}

#[test]
fn identity_cs_is_byte_exact_on_rawf32() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = Config::default();
    cfg.pipeline = PipelineSpec {
        stages: vec![identity_cs()],
    };
    let config = write_config(dir.path(), &cfg);
    let data: Vec<f64> = (0..2 * 5 * 3).map(|i| (i as f32 / 37.0) as f64).collect();
    let img = Tensor::new(vec![2, 5, 3], data).unwrap();
    let input = dir.path().join("in.rawf32");
    let bytes = encode_image(&img, ImageFormat::Rawf32).unwrap();
    std::fs::write(&input, &bytes).unwrap();
    let output = dir.path().join("out.rawf32");
    let o = dynisp(&[
        "process",
        "--config",
        &config,
        "--mode",
        "static",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(&output).unwrap(), bytes);
    let log = stderr(&o);
    assert!(log.contains("resolved config") && log.contains("seed 0"));
}

#[test]
fn flops_of_gm_head_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &Config::default());
    let o = dynisp(&["flops", "--config", &config]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let line = out.lines().find(|l| l.contains("GM")).unwrap();
    let n: f64 = line
        .split_whitespace()
        .skip_while(|w| *w != "controller")
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!((1e4..=1e5).contains(&n), "{line}");
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"pipeline": {"stages": []}, "bogus": 1}"#).unwrap();
    let o = dynisp(&["flops", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = dynisp(&["gradcheck", "--op", "no.such.op"]);
    assert_eq!(o.status.code(), Some(1));
    let o = dynisp(&["grid-search", "--range", "1:2"]);
    assert_eq!(o.status.code(), Some(1));
    let o = dynisp(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn non_finite_output_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = Config::default();
    cfg.pipeline = PipelineSpec::from_kinds(&[IspKind::Cs]);
    let config = write_config(dir.path(), &cfg);
    let img = Tensor::new(vec![1, 2, 2], vec![0.1, f64::NAN, 0.3, 0.4]).unwrap();
    let input = dir.path().join("nan.rawf32");
    std::fs::write(&input, encode_image(&img, ImageFormat::Rawf32).unwrap()).unwrap();
    let output = dir.path().join("out.rawf32");
    let o = dynisp(&[
        "process",
        "--config",
        &config,
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn process_handles_directories() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("in");
    std::fs::create_dir(&src).unwrap();
    let img = Tensor::new(vec![1, 3, 3], (0..9).map(|i| i as f64 / 8.0).collect()).unwrap();
    for name in ["a.pgm", "b.rawf32"] {
        let fmt = ImageFormat::from_path(Path::new(name)).unwrap();
        std::fs::write(src.join(name), encode_image(&img, fmt).unwrap()).unwrap();
    }
    std::fs::write(src.join("notes.txt"), "skip me").unwrap();
    let mut cfg = Config::default();
    cfg.pipeline = PipelineSpec::from_kinds(&[IspKind::Gm]);
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    let o = dynisp(&[
        "process",
        "--config",
        &config,
        "--input",
        src.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("a.pgm").is_file() && out.join("b.rawf32").is_file());
    assert!(!out.join("notes.txt").exists());
}
