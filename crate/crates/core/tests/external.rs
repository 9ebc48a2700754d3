use morphnas_core::evaluators::{EvalRequest, EvalStatus, Evaluator, EvaluatorError, ExternalConfig, ExternalEvaluator};
use morphnas_core::{ArchGraph, TensorShape};

fn sh(script: &str, timeout_s: Option<f64>) -> ExternalEvaluator {
    let mut cfg = ExternalConfig::new(vec!["sh".into(), "-c".into(), script.into()]);
    cfg.timeout_s = timeout_s;
    ExternalEvaluator::new(cfg)
}

fn request(arch_id: u64, tau: u32) -> EvalRequest {
    EvalRequest {
        arch_id,
        graph: ArchGraph::default_cnn(TensorShape::new(32, 32, 3), 10).unwrap(),
        max_epochs: 50,
        tau,
        seed: 0,
    }
}

fn epoch(arch: u64, e: u32, v: f64) -> String {
    format!(r#"echo '{{"type":"epoch","arch_id":{arch},"epoch":{e},"train_loss":1.0,"val_metric":{v}}}'"#)
}

#[test]
fn full_run_reports_final() {
    let mut script = String::from("read req; ");
    for (e, v) in [0.9, 0.7, 0.5, 0.4, 0.3].iter().enumerate() {
        script += &epoch(1, e as u32 + 1, *v);
        script += "; ";
    }
    script += r#"echo '{"type":"final","arch_id":1,"val_metric":0.3}'; sleep 5"#;
    let mut ev = sh(&script, Some(20.0));
    let r = ev.evaluate(&request(1, 3)).unwrap();
    assert_eq!(r.status, EvalStatus::Ok);
    assert_eq!(r.epoch_trace.len(), 5);
    assert!((r.cost.unwrap() - 0.4).abs() < 1e-12);
}

#[test]
fn plateau_triggers_stop() {
    // Constant metric with tau 2: no new minimum at epochs 2 and 3, so the
    // engine sends stop after epoch 3. The trainer waits for the stop line
    // (its second input line) before reporting the final value.
    let mut script = String::from("read req; ");
    for e in 1..=5 {
        script += &epoch(7, e, 0.4);
        script += "; ";
    }
    script += r#"read stop; case "$stop" in *stop*) echo '{"type":"final","arch_id":7,"val_metric":0.4}';; esac; sleep 5"#;
    let mut ev = sh(&script, Some(20.0));
    let r = ev.evaluate(&request(7, 2)).unwrap();
    assert_eq!(r.status, EvalStatus::Ok);
    assert_eq!(r.epoch_trace.len(), 3);
    assert_eq!(r.cost, Some(0.4));
}

#[test]
fn oom_and_error_messages() {
    let mut ev = sh(r#"read req; echo '{"type":"oom","arch_id":2,"estimated_bytes":99}'; sleep 5"#, Some(20.0));
    let r = ev.evaluate(&request(2, 5)).unwrap();
    assert_eq!(r.status, EvalStatus::Oom { estimated_bytes: 99 });
    assert_eq!(r.cost, None);

    let mut ev = sh(r#"read req; echo '{"type":"error","arch_id":2,"message":"nan loss"}'; sleep 5"#, Some(20.0));
    let r = ev.evaluate(&request(2, 5)).unwrap();
    assert_eq!(r.status, EvalStatus::Failed { reason: "nan loss".into() });
}

#[test]
fn garbage_line_fails_the_job_and_is_kept() {
    let mut ev = sh("read req; echo 'not json at all'; sleep 5", Some(20.0));
    let r = ev.evaluate(&request(3, 5)).unwrap();
    match r.status {
        EvalStatus::Failed { reason } => assert!(reason.starts_with("parse"), "{reason}"),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(ev.rejected_lines, vec!["not json at all".to_string()]);
}

#[test]
fn other_arch_ids_are_ignored() {
    let script = format!(
        "read req; {}; {}; echo '{{\"type\":\"final\",\"arch_id\":4,\"val_metric\":0.2}}'; sleep 5",
        epoch(99, 1, 0.1),
        epoch(4, 1, 0.2)
    );
    let mut ev = sh(&script, Some(20.0));
    let r = ev.evaluate(&request(4, 5)).unwrap();
    assert_eq!(r.epoch_trace, vec![(1, 0.2)]);
}

#[test]
fn silent_trainer_times_out() {
    let mut ev = sh("read req; sleep 30", Some(0.5));
    let t = std::time::Instant::now();
    let r = ev.evaluate(&request(5, 5)).unwrap();
    assert!(t.elapsed().as_secs_f64() < 10.0);
    match r.status {
        EvalStatus::Failed { reason } => assert!(reason.contains("timeout"), "{reason}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn exit_without_result_is_a_crash() {
    let mut ev = sh("read req; exit 3", Some(20.0));
    let err = ev.evaluate(&request(6, 5)).unwrap_err();
    assert!(matches!(err, EvaluatorError::Crashed(_)), "{err}");
}

#[test]
fn missing_program_fails_to_spawn() {
    let mut ev = ExternalEvaluator::new(ExternalConfig::new(vec!["/nonexistent/trainer".into()]));
    let err = ev.evaluate(&request(0, 5)).unwrap_err();
    assert!(matches!(err, EvaluatorError::Spawn { .. }));
}

#[test]
fn process_is_reused_across_jobs() {
    let script = r#"
n=0
while read req; do
  n=$((n+1))
  id=$(echo "$req" | sed 's/.*"arch_id":\([0-9]*\).*/\1/')
  echo "{\"type\":\"final\",\"arch_id\":$id,\"val_metric\":0.$n}"
done"#;
    let mut ev = sh(script, Some(20.0));
    let a = ev.evaluate(&request(10, 5)).unwrap();
    let b = ev.evaluate(&request(11, 5)).unwrap();
    assert_eq!(a.cost, Some(0.1));
    assert_eq!(b.cost, Some(0.2));
}
