//! End-to-end tests of the `rawscale` binary: artifact layout, manifest
//! replay, and the error contract (no partial outputs on bad input).

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rawscale::image::{save_raw, save_rgb, BayerPattern};
use rawscale::synth::{photo_like_raw, photo_like_rgb};

const BIN: &str = env!("CARGO_BIN_EXE_rawscale");

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rawscale-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_bin(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().expect("binary should spawn")
}

fn assert_success(out: &std::process::Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn help_exits_zero_and_lists_subcommands() {
    let out = run_bin(&["--help"]);
    assert_success(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["isp-run", "scale", "attack-direct", "train-proxy", "attack-proxy", "defend", "sweep-c", "rerun"] {
        assert!(text.contains(sub), "--help must list {sub}");
    }
}

#[test]
fn version_is_machine_readable() {
    let out = run_bin(&["--version"]);
    assert_success(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn isp_run_writes_output_and_manifest() {
    let dir = tmp_dir("isprun");
    let raw = photo_like_raw(16, 16, BayerPattern::Rggb, 3).unwrap();
    let raw_path = dir.join("input.pgm");
    save_raw(&raw, &raw_path).unwrap();
    let out_dir = dir.join("out");
    let out = run_bin(&["isp-run", "--raw", raw_path.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert_success(&out);
    assert!(out_dir.join("output.ppm").is_file());
    let manifest = fs::read_to_string(out_dir.join("manifest.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(json["subcommand"], "isp-run");
    assert!(json["artifacts"].as_array().unwrap().iter().any(|a| a == "output.ppm"));
}

#[test]
fn scale_rgb_end_to_end() {
    let dir = tmp_dir("scale");
    let img = photo_like_rgb(20, 20, 5);
    let img_path = dir.join("input.ppm");
    save_rgb(&img, &img_path).unwrap();
    let out_dir = dir.join("out");
    let out = run_bin(&[
        "scale", "--image", img_path.to_str().unwrap(), "--algorithm", "bicubic",
        "--height", "10", "--width", "10", "--out-dir", out_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    let scaled = rawscale::image::load_rgb(out_dir.join("scaled.ppm")).unwrap();
    assert_eq!((scaled.height(), scaled.width()), (10, 10));
}

fn dir_file_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn attack_direct_writes_artifacts_and_rerun_is_byte_identical() {
    let dir = tmp_dir("attack");
    let raw = photo_like_raw(16, 16, BayerPattern::Rggb, 11).unwrap();
    let raw_path = dir.join("source.pgm");
    save_raw(&raw, &raw_path).unwrap();
    let target = photo_like_rgb(8, 8, 99);
    let target_path = dir.join("target.ppm");
    save_rgb(&target, &target_path).unwrap();

    let out_a = dir.join("a");
    let out = run_bin(&[
        "attack-direct", "--raw", raw_path.to_str().unwrap(), "--target", target_path.to_str().unwrap(),
        "--iterations", "40", "--seed", "1", "--out-dir", out_a.to_str().unwrap(),
    ]);
    assert_success(&out);
    for f in ["adversarial_raw.pgm", "attack.ppm", "output.ppm", "trace.csv", "manifest.json"] {
        assert!(out_a.join(f).is_file(), "missing artifact {f}");
    }

    let out_b = dir.join("b");
    let out = run_bin(&[
        "rerun", "--manifest", out_a.join("manifest.json").to_str().unwrap(),
        "--out-dir", out_b.to_str().unwrap(),
    ]);
    assert_success(&out);

    let a = dir_file_bytes(&out_a);
    let b = dir_file_bytes(&out_b);
    // the manifest embeds its own out_dir and wall-clock duration; every data
    // artifact must match byte for byte
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, b.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>());
    for ((name, bytes_a), (_, bytes_b)) in a.iter().zip(b.iter()) {
        if name == "manifest.json" {
            continue;
        }
        assert_eq!(bytes_a, bytes_b, "artifact {name} differs after rerun");
    }
}

#[test]
fn missing_input_fails_without_partial_outputs() {
    let dir = tmp_dir("missing");
    let out_dir = dir.join("out");
    let out = run_bin(&[
        "isp-run", "--raw", dir.join("nope.pgm").to_str().unwrap(),
        "--out-dir", out_dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(!out_dir.exists(), "failed run must not leave partial outputs");
}

#[test]
fn stochastic_subcommands_require_a_seed() {
    let dir = tmp_dir("seed");
    let raw = photo_like_raw(16, 16, BayerPattern::Rggb, 2).unwrap();
    let raw_path = dir.join("source.pgm");
    save_raw(&raw, &raw_path).unwrap();
    let target = photo_like_rgb(8, 8, 4);
    let target_path = dir.join("target.ppm");
    save_rgb(&target, &target_path).unwrap();
    let out = run_bin(&[
        "attack-direct", "--raw", raw_path.to_str().unwrap(), "--target", target_path.to_str().unwrap(),
        "--out-dir", dir.join("out").to_str().unwrap(),
    ]);
    assert!(!out.status.success(), "attack-direct without --seed must be rejected");
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}
