use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn morphnas(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphnas"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn line_value(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .and_then(|rest| rest.trim().strip_prefix('='))
        .map(|v| v.trim().parse().unwrap())
        .unwrap_or_else(|| panic!("{key} missing in {stdout}"))
}

#[test]
fn distance_and_morph() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&morphnas(&["default-arch", "-o", "base.json"], d));

    let same = ok(&morphnas(&["distance", "base.json", "base.json"], d));
    assert!(same.contains("d   = 0.000000"), "{same}");

    fs::write(d.join("deep.json"), r#"{"op":"deep","params":{"at_node":3,"inserted_kind":"conv"}}"#).unwrap();
    ok(&morphnas(&["morph", "base.json", "deep.json", "-o", "deeper.json"], d));
    let out = ok(&morphnas(&["distance", "base.json", "deeper.json"], d));
    assert_eq!(line_value(&out, "D_l"), 1.0);
    assert_eq!(line_value(&out, "D_s"), 0.0);

    fs::write(
        d.join("skip.json"),
        r#"[{"op":"deep","params":{"at_node":3,"inserted_kind":"conv"}},
            {"op":"add","params":{"from_node":3,"to_node":19}}]"#,
    )
    .unwrap();
    ok(&morphnas(&["morph", "base.json", "skip.json", "-o", "skipped.json"], d));
    let l1 = ok(&morphnas(&["distance", "base.json", "skipped.json"], d));
    let l2 = ok(&morphnas(&["distance", "base.json", "skipped.json", "--lambda", "2"], d));
    let (dl, ds) = (line_value(&l1, "D_l"), line_value(&l1, "D_s"));
    assert!(ds > 0.0);
    assert!((line_value(&l1, "d") - (dl + ds)).abs() < 1e-6);
    assert!((line_value(&l2, "d") - (dl + 2.0 * ds)).abs() < 1e-6);
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&morphnas(&["default-arch", "-o", "base.json"], d));

    fs::write(d.join("wide.json"), r#"{"op":"wide","params":{"at_node":0,"new_width":8}}"#).unwrap();
    let out = morphnas(&["morph", "base.json", "wide.json", "-o", "x.json"], d);
    assert_eq!(out.status.code(), Some(4));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    fs::write(d.join("broken.json"), "{\"version\": 1}").unwrap();
    assert_eq!(morphnas(&["distance", "base.json", "broken.json"], d).status.code(), Some(2));
    assert_eq!(morphnas(&["kernel", "nowhere"], d).status.code(), Some(2));

    fs::write(d.join("bad.json"), r#"{"r": 1.5}"#).unwrap();
    let out = morphnas(&["search", "--config", "bad.json", "--out", "run"], d);
    assert_eq!(out.status.code(), Some(2));
    fs::write(d.join("typo.json"), r#"{"betta": 1}"#).unwrap();
    assert_eq!(morphnas(&["search", "--config", "typo.json", "--out", "run"], d).status.code(), Some(2));
}

#[test]
fn search_resume_kernel_export() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let table = ok(&morphnas(&["search", "--out", "run1", "--evals", "6", "--seed", "0"], d));
    assert!(table.lines().next().unwrap().contains("alpha"));
    let hist = fs::read_to_string(d.join("run1/history.jsonl")).unwrap();
    assert_eq!(hist.lines().count(), 7);

    ok(&morphnas(&["search", "--out", "run2", "--evals", "6", "--seed", "0", "-q"], d));
    assert_eq!(hist, fs::read_to_string(d.join("run2/history.jsonl")).unwrap());
    // The same directory is not reused for a fresh run.
    assert_eq!(
        morphnas(&["search", "--out", "run1", "--evals", "1"], d).status.code(),
        Some(2)
    );

    ok(&morphnas(&["search", "--resume", "run1", "--evals", "3", "-q"], d));
    let resumed = fs::read_to_string(d.join("run1/history.jsonl")).unwrap();
    assert_eq!(resumed.lines().count(), 10);
    assert!(resumed.starts_with(&hist));

    let out = ok(&morphnas(&["kernel", "run1", "--out", "diag"], d));
    assert!(line_value(&out, "mse") >= 0.0);
    for name in ["K.csv", "P.csv"] {
        let text = fs::read_to_string(d.join("diag").join(name)).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 10);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), 10);
            assert_eq!(row[i], 1.0);
            assert!(row.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    let out = ok(&morphnas(&["export", "run1", "4", "-o", "best.json"], d));
    assert!(out.starts_with("arch 4:"), "{out}");
    assert_eq!(
        fs::read_to_string(d.join("best.json")).unwrap(),
        fs::read_to_string(d.join("run1/models/arch_4.json")).unwrap()
    );
    assert_eq!(morphnas(&["export", "run1", "999"], d).status.code(), Some(2));

    let out = ok(&morphnas(&["export", "run1"], d));
    let best = resumed
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter_map(|v| Some((v["arch_id"].as_u64()?, v["cost"].as_f64()?)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    assert!(out.starts_with(&format!("arch {}:", best.0)), "{out}");
    assert!(d.join(format!("arch_{}.json", best.0)).is_file());
}

#[test]
fn external_trainer_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let trainer = r#"
while read req; do
  case "$req" in *'"type":"stop"'*) continue;; esac
  id=$(echo "$req" | sed 's/.*"arch_id":\([0-9]*\).*/\1/')
  for e in 1 2 3; do
    echo "{\"type\":\"epoch\",\"arch_id\":$id,\"epoch\":$e,\"train_loss\":1.0,\"val_metric\":0.$((9 - e))}"
  done
  echo "{\"type\":\"final\",\"arch_id\":$id,\"val_metric\":0.6}"
done"#;
    let cfg = serde_json::json!({
        "evaluator": {"command": ["sh", "-c", trainer], "timeout_s": 30.0},
        "max_epochs": 3,
        "tau": 2
    });
    fs::write(d.join("ext.json"), cfg.to_string()).unwrap();
    ok(&morphnas(&["search", "--config", "ext.json", "--out", "run", "--evals", "3", "-q"], d));
    let hist = fs::read_to_string(d.join("run/history.jsonl")).unwrap();
    assert_eq!(hist.lines().count(), 4);
    for line in hist.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["status"], "ok");
        assert_eq!(v["epoch_trace"].as_array().unwrap().len(), 3);
    }
}

#[test]
fn evaluator_crash_exits_3_with_state() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = r#"{"evaluator": {"command": ["sh", "-c", "read req; exit 1"]}}"#;
    fs::write(d.join("crash.json"), cfg).unwrap();
    let out = morphnas(&["search", "--config", "crash.json", "--out", "run", "--evals", "2"], d);
    assert_eq!(out.status.code(), Some(3));
    assert!(d.join("run/state.json").is_file());
}
