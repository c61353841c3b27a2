//! End-to-end runs of the `dgae` binary on a tiny configuration.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dgae_cli::images;
use dgae_core::nn::Tensor;
use dgae_core::rng::Rng;

fn dgae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgae")).args(args).env("DGAE_THREADS", "2").output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let cfg = common::tiny_config(&dir.join("run"));
    let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
    edit(&mut v);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn png_size(path: &Path) -> (u32, u32) {
    let decoder = png::Decoder::new(std::fs::File::open(path).unwrap());
    let reader = decoder.read_info().unwrap();
    let info = reader.info();
    (info.width, info.height)
}

#[test]
fn help_lists_every_flag() {
    let o = dgae(&["train", "--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--config", "--seed", "--out", "--steps", "--T-sample", "--resume", "--from-scratch"] {
        assert!(text.contains(flag), "train --help lacks {flag}");
    }
    let text = String::from_utf8_lossy(&dgae(&["recombine", "--help"]).stdout).into_owned();
    assert!(text.contains("--donor") && text.contains("--noise"));
    let text = String::from_utf8_lossy(&dgae(&["--help"]).stdout).into_owned();
    for cmd in ["dataset", "train", "swap", "recombine", "interpolate", "eval"] {
        assert!(text.contains(cmd), "--help lacks {cmd}");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(dgae(&["train", "warmup", "--config", "x.json"]).status.code(), Some(1));
    assert_eq!(dgae(&["dataset"]).status.code(), Some(1));
    let o = dgae(&["dataset", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_errors_name_the_offending_key() {
    let dir = common::scratch_dir("cli-badkey");
    let path = write_config(&dir, |v| v["gae"]["bottleneck_width"] = 3.into());
    let o = dgae(&["dataset", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("bottleneck_width") && err.contains("gae"), "{err}");

    let path = write_config(&dir, |v| v["pretrain"]["lr"] = "fast".into());
    let err = stderr(&dgae(&["dataset", "--config", path.to_str().unwrap()]));
    assert!(err.contains("pretrain.lr"), "{err}");
}

#[test]
fn dataset_export_is_complete_and_repeatable() {
    let dir = common::scratch_dir("cli-dataset");
    let cfg = write_config(&dir, |_| {});
    let out = dir.join("grid");
    let run = || {
        let o = dgae(&["dataset", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let first = run();
    assert_eq!(first.iter().filter(|(n, _)| n.ends_with(".png")).count(), 480);
    let manifest = String::from_utf8(first.iter().find(|(n, _)| n == "manifest.csv").unwrap().1.clone()).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines[0], "index,identity,background,pose,file");
    assert_eq!(lines.len(), 481);
    assert!(lines[1].starts_with("0,0,0,0,"));
    assert_eq!(png_size(&out.join("000_id0_bg0_pose0.png")), (16, 16));
    assert_eq!(first, run());
}

#[test]
fn stages_enforce_prerequisites_and_resume_numbering() {
    let dir = common::scratch_dir("cli-stages");
    let cfg = write_config(&dir, |_| {});
    let c = cfg.to_str().unwrap();
    for stage in ["refine", "joint"] {
        let o = dgae(&["train", stage, "--config", c]);
        assert_eq!(o.status.code(), Some(2), "{stage}: {}", stderr(&o));
    }
    assert_eq!(dgae(&["swap", "--config", c, "--a", "tuple:0,0,0", "--b", "tuple:1,1,1"]).status.code(), Some(2));
    assert_eq!(dgae(&["train", "pretrain", "--config", c, "--from-scratch"]).status.code(), Some(1));

    assert!(dgae(&["train", "pretrain", "--config", c, "--steps", "20"]).status.success());
    let o = dgae(&["train", "pretrain", "--config", c, "--steps", "40", "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.join("run/pretrain.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,l_simple,l_r,l_ss,l_ur,total"));
    let steps: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![1, 10, 20, 30, 40]);
    let timing = std::fs::read_to_string(dir.join("run/timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 2);
}

#[test]
fn non_finite_losses_exit_with_three() {
    let dir = common::scratch_dir("cli-nan");
    let cfg = write_config(&dir, |v| v["pretrain"]["lr"] = 1e38.into());
    let o = dgae(&["train", "pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("pretrain"));
}

#[test]
fn trained_pipeline_outputs_are_seeded_and_shaped() {
    let dir = common::scratch_dir("cli-pipeline");
    let cfg = write_config(&dir, |_| {});
    let c = cfg.to_str().unwrap();
    for stage in ["pretrain", "refine", "joint"] {
        let o = dgae(&["train", stage, "--config", c]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    for f in ["pretrain.ckpt", "refine.ckpt", "joint.ckpt", "latents.bin", "refine.csv", "joint.csv"] {
        assert!(dir.join("run").join(f).exists(), "{f} missing");
    }

    let run = |tag: &str, seed: &str| -> Vec<Vec<u8>> {
        let out = dir.join(tag);
        let o = out.to_str().unwrap();
        let common = ["--config", c, "--seed", seed];
        let calls: [Vec<&str>; 3] = [
            vec!["swap", "--a", "tuple:0,1,2", "--b", "tuple:5,6,7", "--out", o],
            vec!["recombine", "--donor", "identity=tuple:1,0,0", "--donor", "background=tuple:2,3,4", "--donor", "pose=tuple:0,7,9", "--out", o],
            vec!["interpolate", "--a", "tuple:0,0,0", "--b", "tuple:3,3,3", "--out", o],
        ];
        let mut bytes = Vec::new();
        for (args, file) in calls.iter().zip(["swap.png", "recombine.png", "interpolate.png"]) {
            let mut full = args.clone();
            full.extend(common);
            let r = dgae(&full);
            assert!(r.status.success(), "{args:?}: {}", stderr(&r));
            bytes.push(std::fs::read(out.join(file)).unwrap());
        }
        bytes
    };
    let a = run("a", "3");
    assert_eq!(a, run("b", "3"));
    // the random-noise recombination follows the seed
    assert_ne!(a[1], run("c", "4")[1]);

    // 3 attribute rows x (a, b, a', b'); 1 x (endpoints + 7 frames), 2 px separators
    assert_eq!(png_size(&dir.join("a/swap.png")), (4 * 16 + 3 * 2, 3 * 16 + 2 * 2));
    assert_eq!(png_size(&dir.join("a/interpolate.png")), (9 * 16 + 8 * 2, 16));
    assert_eq!(png_size(&dir.join("a/recombine.png")), (4 * 16 + 3 * 2, 16));

    // PNG donors are accepted wherever tuples are
    let donor = dir.join("donor.png");
    images::save_png(&donor, &dgae_core::dataset::render(&dgae_core::dataset::AttributeTuple::new(0, 1, 2).unwrap(), 16))
        .unwrap();
    let out = dir.join("d");
    let r = dgae(&["swap", "--config", c, "--seed", "3", "--a", donor.to_str().unwrap(), "--b", "tuple:5,6,7", "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert_eq!(png_size(&out.join("swap.png")), png_size(&dir.join("a/swap.png")));

    let bad = dgae(&["swap", "--config", c, "--a", "/nonexistent.png", "--b", "tuple:0,0,0"]);
    assert_eq!(bad.status.code(), Some(1));
    let bad = dgae(&["recombine", "--config", c, "--donor", "colour=tuple:0,0,0"]);
    assert_eq!(bad.status.code(), Some(1));
    let missing = dgae(&["recombine", "--config", c, "--donor", "identity=tuple:0,0,0", "--noise", "inferred"]);
    assert_eq!(missing.status.code(), Some(2), "{}", stderr(&missing));

    let o = dgae(&["eval", "--config", c]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pm = std::fs::read_to_string(dir.join("run/eval/perplexity.csv")).unwrap();
    assert_eq!(pm.lines().next(), Some("partition,attribute,accuracy,chance"));
    assert_eq!(pm.lines().count(), 1 + 9);
    let metrics = std::fs::read_to_string(dir.join("run/eval/metrics.csv")).unwrap();
    assert!(metrics.contains("recon_mse,") && metrics.contains("ppl_T10,"));
}

#[test]
fn png_round_trip_is_exact_on_the_8_bit_grid() {
    let dir = common::scratch_dir("cli-png");
    let mut rng = Rng::new(5, 0);
    let img: Tensor<f32> = Tensor::from_fn(&[3, 5, 7], |_| (rng.below(256) as f32 / 255.0) * 2.0 - 1.0);
    let path = dir.join("x.png");
    images::save_png(&path, &img).unwrap();
    let back = images::load_png(&path).unwrap();
    assert_eq!(back.shape(), &[3, 5, 7]);
    assert!(back.max_abs_diff(&img) < 1e-6);
}
