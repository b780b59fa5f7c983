use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn irda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irda")).args(args).current_dir(workspace_root()).output().unwrap()
}

fn stderr_error(out: &Output) -> String {
    let line = String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap_or_else(|_| panic!("stderr is not JSON: {line}"));
    v["error"].as_str().unwrap().to_string()
}

#[test]
fn unknown_flag_exits_2_with_usage() {
    let out = irda(&["session", "run", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn scripted_session_exports_five_records() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = dir.path().join("ctx.json");
    let out = irda(&["session", "run", "--script", "fixtures/respectful.answers", "--llm", "stub", "--out", ctx.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ctx).unwrap()).unwrap();
    assert_eq!(v["schema"], "irda-context/1");
    let feedback = v["context"]["feedback"].as_array().unwrap();
    assert_eq!(feedback.len(), 5);
    assert_eq!(feedback.iter().filter(|r| r["stage"] == "uncertainty").count(), 1);
}

#[test]
fn stored_session_exports_the_same_context() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let run = irda(&[
        "session", "run", "--script", "fixtures/respectful.answers", "--store", store.to_str().unwrap(), "--session-id", "p1", "--out",
        a.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let export = irda(&["context", "export", "--store", store.to_str().unwrap(), "--session-id", "p1", "--out", b.to_str().unwrap()]);
    assert!(export.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn failures_are_reported_as_json() {
    let out = irda(&["session", "run", "--script", "does/not/exist.answers"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_error(&out).contains("does/not/exist.answers"));

    let out = irda(&["context", "export", "--store", "/nonexistent-irda-store", "--session-id", "x"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn pool_label_and_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    assert!(irda(&["pool", "gen", "--n", "100", "--seed", "7", "--out", &p("pool.json")]).status.success());
    let run = irda(&["session", "run", "--script", "fixtures/respectful.answers", "--pool", &p("pool.json"), "--out", &p("alice.json")]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));

    let sample = irda(&["sample", "diversity", "--pool", &p("pool.json"), "--k", "3"]);
    let ids: Vec<String> = serde_json::from_slice(&sample.stdout).unwrap();
    assert_eq!(ids.len(), 3);

    let label = irda(&["label", "--context", &p("alice.json"), "--pool", &p("pool.json"), "--ids", &ids.join(",")]);
    assert!(label.status.success());
    let lines: Vec<serde_json::Value> =
        String::from_utf8_lossy(&label.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l["label"].is_u64()));

    let eval = irda(&[
        "evaluate", "--context", &p("alice.json"), "--pool", &p("pool.json"), "--rule", "stays-home", "--resamples", "200", "--out",
        &p("report.tsv"),
    ]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let report = std::fs::read_to_string(p("report.tsv")).unwrap();
    let groups: Vec<&str> = report.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap()).collect();
    assert_eq!(groups, ["irda", "baseline", "mlp"]);
}

#[test]
fn moral_machine_gen_writes_one_scenario_per_line() {
    let dir = tempfile::tempdir().unwrap();
    let mm = dir.path().join("mm.jsonl");
    assert!(irda(&["mm", "gen", "--n", "12", "--seed", "3", "--out", mm.to_str().unwrap()]).status.success());
    assert_eq!(std::fs::read_to_string(&mm).unwrap().lines().count(), 12);
}

#[test]
fn baseline_train_and_curve_from_labels_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    assert!(irda(&["pool", "gen", "--n", "60", "--seed", "4", "--out", &p("pool.json")]).status.success());
    let pool: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("pool.json")).unwrap()).unwrap();
    let ids: Vec<String> = pool["trajectories"].as_array().unwrap().iter().map(|t| t["id"].as_str().unwrap().to_string()).collect();
    let labels = |flip: usize| ids.iter().enumerate().map(|(i, id)| (id.clone(), serde_json::json!((i / 3 + flip) % 2))).collect::<serde_json::Map<_, _>>();
    let file = serde_json::json!({ "schema": "irda-labels/1", "participants": { "p1": labels(0), "p2": labels(1) } });
    std::fs::write(p("labels.json"), file.to_string()).unwrap();

    let train = irda(&["baseline", "train", "--pool", &p("pool.json"), "--labels", &p("labels.json"), "--participant", "p1", "--out", &p("mlp.json")]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("mlp.json")).unwrap()).unwrap();
    assert_eq!(model["schema"], "irda-mlp/1");

    let curve = irda(&[
        "baseline", "curve", "--pool", &p("pool.json"), "--labels", &p("labels.json"), "--mode", "collective", "--grid", "5,10",
        "--resamples", "100",
    ]);
    assert!(curve.status.success(), "{}", String::from_utf8_lossy(&curve.stderr));
    let text = String::from_utf8_lossy(&curve.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n,mode,mean,ci_lo,ci_hi");
    assert_eq!(lines.len(), 3);

    let missing = irda(&["baseline", "train", "--pool", &p("pool.json"), "--labels", &p("labels.json"), "--participant", "p9", "--out", &p("x.json")]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr_error(&missing).contains("p9"));
}
