use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use imstab_cli::report::{append_summary, render, write_report, SummaryRow, SUMMARY_HEADER};
use imstab_core::config::{parse_config, parse_config_str};
use serde_json::json;

fn configs() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn imstab(args: &[&str], cwd: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_imstab")).args(args).current_dir(cwd).output().unwrap();
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn config_path(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).to_string_lossy().into_owned()
}

#[test]
fn every_shipped_config_round_trips() {
    let paths = configs();
    assert!(paths.len() >= 6);
    for p in paths {
        let c = parse_config(&p, &[]).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(parse_config_str(&text, &[]).unwrap(), c, "{}", p.display());
    }
}

#[test]
fn override_is_echoed_in_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_path("identical_pair.json");
    let (code, _) = imstab(&["solve", "--config", &cfg, "--out", "o", "--set", "grid.n_cells=32"], dir.path());
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("o/identical-pair.solve.json")).unwrap()).unwrap();
    assert_eq!(v["config"]["grid"]["n_cells"], json!(32));
    assert_eq!(v["n_cells"], json!(32));
}

#[test]
fn writes_stay_inside_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_path("identical_pair.json");
    let (code, _) = imstab(&["stability", "--config", &cfg, "--out", "nested/out"], dir.path());
    assert_eq!(code, 0);
    let top: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(top, vec!["nested"]);
    let mut files: Vec<String> = fs::read_dir(dir.path().join("nested/out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "identical-pair.stability.json",
            "identical-pair.stability.plot.csv",
            "identical-pair.stability.timings.json",
            "summary.csv"
        ]
    );
    let summary = fs::read_to_string(dir.path().join("nested/out/summary.csv")).unwrap();
    assert!(summary.starts_with(SUMMARY_HEADER));
    assert!(summary.contains("identical-pair:stability:t=1,0,"));
}

#[test]
fn missing_section_and_missing_flag_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let (code, msg) = imstab(&["stability", "--config", &config_path("resonant.json"), "--out", "o"], dir.path());
    assert_eq!(code, 1);
    assert!(msg.contains("problem2"), "{msg}");
    let (code, msg) = imstab(&["solve", "--out", "o"], dir.path());
    assert_eq!(code, 1);
    assert!(msg.contains("--config"), "{msg}");
    let (code, msg) = imstab(&["solve", "--config", "nope.json", "--out", "o"], dir.path());
    assert_eq!(code, 1);
    assert!(msg.contains("nope.json"), "{msg}");
}

#[test]
fn same_report_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let v = json!({"b": 0.1, "a": {"wall_time_s": 2.5, "x": 1e-300}, "c": [1.0 / 3.0]});
    let row = SummaryRow { id: "r".into(), lhs: Some(1.0), rhs: Some(2.0), alpha: None, c_final: None, verdict: true };
    let w1 = write_report(&dir.path().join("one"), "r", v.clone(), &[row.clone()]).unwrap();
    let w2 = write_report(&dir.path().join("two"), "r", v, &[row]).unwrap();
    let a = fs::read(&w1.report).unwrap();
    assert_eq!(a, fs::read(&w2.report).unwrap());
    assert!(!String::from_utf8(a.clone()).unwrap().contains("wall_time_s"));
    assert_eq!(a, render(&json!({"a": {"x": 1e-300}, "b": 0.1, "c": [1.0 / 3.0]})).into_bytes());
    assert!(w1.timings.is_some());
}

#[test]
fn parallel_appends_keep_rows_intact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("summary.csv");
    let threads: Vec<_> = (0..8)
        .map(|t| {
            let path = path.clone();
            std::thread::spawn(move || {
                for i in 0..50 {
                    let row = SummaryRow {
                        id: format!("writer{t}-{i}-{}", "x".repeat(200)),
                        lhs: Some(i as f64),
                        rhs: Some(0.5),
                        alpha: Some(0.25),
                        c_final: Some(3.0),
                        verdict: i % 2 == 0,
                    };
                    append_summary(&path, &[row]).unwrap();
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], SUMMARY_HEADER.trim_end());
    assert_eq!(lines.len(), 1 + 8 * 50);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 6, "{l}");
        assert!(f[0].starts_with("writer") && f[0].len() > 200);
        assert!(f[5] == "pass" || f[5] == "fail");
    }
}

#[test]
fn unwritable_directory_reports_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let target = blocker.join("sub");
    let e = write_report(&target, "r", json!({}), &[]).unwrap_err();
    assert!(e.to_string().contains(&*target.to_string_lossy()), "{e}");
}
