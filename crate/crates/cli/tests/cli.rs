use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cad_core::io::{decode_pgm, TensorFile};
use cad_core::{LabelMap, Tensor};
use tempfile::TempDir;

fn cad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cad")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write(dir: &Path, name: &str, t: &Tensor<f64>) -> PathBuf {
    let p = dir.join(name);
    TensorFile::from_tensor(t).write(&p).unwrap();
    p
}

fn write_labels(dir: &Path, name: &str, l: &LabelMap) -> PathBuf {
    let p = dir.join(name);
    TensorFile::from_label_map(l).write(&p).unwrap();
    p
}

/// Two-class logits that are confident everywhere except inside `weak_patch`
/// (row, col, patch size).
fn logits_with_weak_patch(size: usize, weak_patch: (usize, usize, usize)) -> Tensor<f64> {
    let (pr, pc, ps) = weak_patch;
    Tensor::from_fn(vec![2, size, size], |i| {
        let (ch, px) = (i / (size * size), i % (size * size));
        let (y, x) = (px / size, px % size);
        let low = y / ps == pr && x / ps == pc;
        let margin = if low {
            0.05
        } else {
            4.0 + ((y * 7 + x * 3) % 5) as f64 * 0.1
        };
        if ch == 0 {
            margin
        } else {
            0.0
        }
    })
    .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn displace(dir: &Path, weak: &Path, strong: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "displace",
        "--weak",
        s(weak),
        "--strong",
        s(strong),
        "--out-dir",
        s(dir),
    ];
    args.extend_from_slice(extra);
    cad(&args)
}

fn mask_pixels(path: &Path) -> (usize, usize, Vec<u8>) {
    decode_pgm(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn displace_highlights_the_engineered_patch() {
    let dir = TempDir::new().unwrap();
    let z = logits_with_weak_patch(256, (3, 5, 16));
    let w = write(dir.path(), "w.cadt", &z);
    let st = write(dir.path(), "s.cadt", &z);
    let out = displace(dir.path(), &w, &st, &["--grid", "16", "--c-thr", "0.3", "--r-thr", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["mask_weak.pgm", "mask_strong.pgm"] {
        let (width, height, px) = mask_pixels(&dir.path().join(name));
        assert_eq!((width, height), (256, 256));
        for y in 0..256 {
            for x in 0..256 {
                let inside = y / 16 == 3 && x / 16 == 5;
                assert_eq!(px[y * 256 + x], if inside { 255 } else { 0 }, "{name} at ({y}, {x})");
            }
        }
    }
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("displacement.json")).unwrap()).unwrap();
    assert_eq!(
        record["weak_to_strong"]["region"]["members"],
        serde_json::json!([[3, 5]])
    );
    let displaced = TensorFile::read(dir.path().join("weak_displaced.cadt")).unwrap();
    assert_eq!(displaced.shape(), &[2, 256, 256]);
}

#[test]
fn single_patch_cap_replaces_one_patch() {
    let dir = TempDir::new().unwrap();
    let a = Tensor::from_fn(vec![2, 256, 256], |i| ((i * 2654435761) % 1000) as f64 / 250.0).unwrap();
    let b = Tensor::from_fn(vec![2, 256, 256], |i| ((i * 40503) % 997) as f64 / 200.0).unwrap();
    let w = write(dir.path(), "w.cadt", &a);
    let st = write(dir.path(), "s.cadt", &b);
    let out = displace(dir.path(), &w, &st, &["--c-thr", "0.75", "--r-thr", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["mask_weak.pgm", "mask_strong.pgm"] {
        let (_, _, px) = mask_pixels(&dir.path().join(name));
        assert_eq!(px.iter().filter(|&&v| v == 255).count(), 16 * 16, "{name}");
    }
}

#[test]
fn displace_kl_mode_and_images() {
    let dir = TempDir::new().unwrap();
    let z = logits_with_weak_patch(64, (1, 2, 4));
    let w = write(dir.path(), "w.cadt", &z);
    let st = write(dir.path(), "s.cadt", &z);
    let img = Tensor::from_fn(vec![64, 64], |i| i as f64).unwrap();
    let iw = write(dir.path(), "iw.cadt", &img);
    let is = write(dir.path(), "is.cadt", &img);
    let out = displace(
        dir.path(),
        &w,
        &st,
        &[
            "--c-thr",
            "0.5",
            "--r-thr",
            "2",
            "--kl",
            "--k-top",
            "3",
            "--weak-image",
            s(&iw),
            "--strong-image",
            s(&is),
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out_img = TensorFile::read(dir.path().join("strong_displaced.cadt"))
        .unwrap()
        .to_tensor::<f64>()
        .unwrap();
    assert_eq!(out_img.shape(), &[64, 64]);
    let changed = out_img.data().iter().zip(img.data()).filter(|(a, b)| a != b).count();
    assert!(changed > 0 && changed <= 2 * 16 * 16);
}

#[test]
fn displace_exit_codes() {
    let dir = TempDir::new().unwrap();
    let z64 = logits_with_weak_patch(64, (0, 0, 4));
    let z32 = logits_with_weak_patch(32, (0, 0, 2));
    let a = write(dir.path(), "a.cadt", &z64);
    let b = write(dir.path(), "b.cadt", &z32);
    let args = ["--c-thr", "0.5", "--r-thr", "1"];

    let missing = dir.path().join("missing.cadt");
    assert_eq!(code(&displace(dir.path(), &missing, &a, &args)), 2);

    let junk = dir.path().join("junk.cadt");
    fs::write(&junk, b"not a tensor").unwrap();
    assert_eq!(code(&displace(dir.path(), &junk, &a, &args)), 2);

    let mismatch = displace(dir.path(), &a, &b, &args);
    assert_eq!(code(&mismatch), 3);
    assert!(!mismatch.stderr.is_empty());

    let z60 = Tensor::from_fn(vec![2, 60, 60], |i| (i % 7) as f64).unwrap();
    let c = write(dir.path(), "c.cadt", &z60);
    assert_eq!(code(&displace(dir.path(), &c, &c, &args)), 3);

    assert_eq!(
        code(&displace(dir.path(), &a, &a, &["--c-thr", "1.5", "--r-thr", "1"])),
        2
    );
    assert_eq!(
        code(&displace(dir.path(), &a, &a, &["--c-thr", "0.5", "--r-thr", "0"])),
        2
    );
    assert_eq!(
        code(&displace(
            dir.path(),
            &a,
            &a,
            &["--c-thr", "0.5", "--r-thr", "1", "--grid", "0"]
        )),
        2
    );
}

fn schedule_rows(args: &[&str]) -> Vec<Vec<String>> {
    let mut full = vec!["schedule"];
    full.extend_from_slice(args);
    let out = cad(&full);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn schedule_rows_follow_the_ramp() {
    let rows = schedule_rows(&["--beta", "10", "--iters", "400"]);
    assert_eq!(rows[0], ["t", "psi", "c_threshold", "r_threshold"]);
    assert_eq!(rows[1], ["0", "0", "0.01", "1"]);
    assert_eq!(rows.len(), 402);
    let last = &rows[401];
    assert!((last[2].parse::<f64>().unwrap() - 0.75).abs() < 1e-12);
    assert_eq!(last[3], "16");
}

#[test]
fn schedule_rejects_bad_bounds() {
    assert_eq!(code(&cad(&["schedule", "--beta", "0", "--iters", "5"])), 2);
    assert_eq!(
        code(&cad(&["schedule", "--beta", "5", "--iters", "5", "--c-min", "0.9"])),
        2
    );
    assert_eq!(
        code(&cad(&["schedule", "--beta", "5", "--iters", "5", "--r-min", "0"])),
        2
    );
    assert_eq!(code(&cad(&["schedule", "--iters", "5"])), 2);
}

#[test]
fn metrics_on_identical_maps() {
    let dir = TempDir::new().unwrap();
    let mut m = vec![false; 32 * 32];
    for y in 8..20 {
        for x in 5..15 {
            m[y * 32 + x] = true;
        }
    }
    let l = LabelMap::from_mask(32, 32, &m).unwrap();
    let p = write_labels(dir.path(), "p.cadt", &l);
    let t = write_labels(dir.path(), "t.cadt", &l);
    let out = cad(&["metrics", "--pred", s(&p), "--truth", s(&t)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v[0]["class_id"], 1);
    assert_eq!(v[0]["dsc"], 1.0);
    assert_eq!(v[0]["jaccard"], 1.0);
    assert_eq!(v[0]["hd95"], 0.0);
    assert_eq!(v[0]["asd"], 0.0);
}

#[test]
fn metrics_errors() {
    let dir = TempDir::new().unwrap();
    let a = write_labels(dir.path(), "a.cadt", &LabelMap::new(4, 4, 2, vec![1; 16]).unwrap());
    let b = write_labels(dir.path(), "b.cadt", &LabelMap::new(4, 5, 2, vec![1; 20]).unwrap());
    assert_eq!(code(&cad(&["metrics", "--pred", s(&a), "--truth", s(&b)])), 3);
    let f = write(dir.path(), "f.cadt", &Tensor::zeros(vec![4, 4]).unwrap());
    assert_eq!(code(&cad(&["metrics", "--pred", s(&f), "--truth", s(&a)])), 2);
}

#[test]
fn losses_near_zero_for_matching_logits() {
    let dir = TempDir::new().unwrap();
    let labels = LabelMap::new(4, 4, 2, (0..16).map(|i| (i / 3) % 2).collect()).unwrap();
    let z = Tensor::from_fn(vec![2, 4, 4], |i| {
        if labels.labels()[i % 16] == i / 16 {
            30.0
        } else {
            0.0
        }
    })
    .unwrap();
    let a = write(dir.path(), "a.cadt", &z);
    let t = write_labels(dir.path(), "t.cadt", &labels);
    let out = cad(&["losses", "--a", s(&a), "--b", s(&a), "--target", s(&t)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["mt_a", "mt_b", "cps_a", "cps_b"] {
        assert!(v[key].as_f64().unwrap() < 1e-4, "{key} = {}", v[key]);
    }
}

#[test]
fn demo_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        let out = cad(&["demo", "--seed", "7", "--iters", "20", "--out", s(p)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let text = fs::read(&a).unwrap();
    assert_eq!(text, fs::read(&b).unwrap());
    assert_eq!(String::from_utf8(text).unwrap().lines().count(), 21);
}

#[test]
fn written_tensors_round_trip_byte_identically() {
    let dir = TempDir::new().unwrap();
    let z = logits_with_weak_patch(64, (2, 2, 4));
    let w = write(dir.path(), "w.cadt", &z);
    let out = displace(dir.path(), &w, &w, &["--c-thr", "0.5", "--r-thr", "3"]);
    assert_eq!(code(&out), 0);
    for name in ["w.cadt", "weak_displaced.cadt", "strong_displaced.cadt"] {
        let bytes = fs::read(dir.path().join(name)).unwrap();
        assert_eq!(TensorFile::decode(&bytes).unwrap().encode(), bytes, "{name}");
    }
}
