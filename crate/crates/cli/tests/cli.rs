use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets")
}

fn asset(name: &str) -> String {
    assets().join(name).display().to_string()
}

fn pertforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pertforge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn build_robust_val(dir: &Path) {
    let out = pertforge(&[
        "--config",
        &asset("robust.toml"),
        "build",
        &asset("robust-val.jsonl"),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

fn optimize(config: &str, data: &Path, run_dir: &Path, resume: bool) -> Output {
    let mut args = vec![
        "--config".to_owned(),
        config.to_owned(),
        "optimize".to_owned(),
        "--train".to_owned(),
        asset("robust-train.jsonl"),
        "--val".to_owned(),
        asset("robust-val.jsonl"),
        "--data-dir".to_owned(),
        data.display().to_string(),
    ];
    if resume {
        args.extend(["--resume".to_owned(), run_dir.display().to_string()]);
    } else {
        args.extend(["--out".to_owned(), run_dir.display().to_string()]);
    }
    pertforge(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn build_mini_corpus_writes_seven_subsets_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = pertforge(&[
            "--config",
            &asset("summarization.toml"),
            "build",
            &asset("xsum-mini.jsonl"),
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let fa = files(&a);
    let subsets: Vec<&String> = fa.keys().filter(|k| k.ends_with(".jsonl")).collect();
    assert_eq!(
        subsets,
        ["C1", "C2", "S1", "S2", "S3", "W1", "W3"]
            .iter()
            .map(|c| format!("xsum-mini.{c}.jsonl"))
            .collect::<Vec<_>>()
            .iter()
            .collect::<Vec<_>>()
    );
    assert!(fa.contains_key("xsum-mini.similarity.csv"));
    assert_eq!(fa, files(&b));
}

#[test]
fn unknown_code_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pertforge(&[
        "--config",
        &asset("summarization.toml"),
        "build",
        &asset("xsum-mini.jsonl"),
        "--codes",
        "C1,Q7",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Q7"));
    assert!(stderr(&out).contains("C1 C2 C3 W1 W2 W3 S1 S2 S3"));
}

#[test]
fn configuration_errors_exit_one() {
    let out = pertforge(&["--config", "/nonexistent/pertforge.toml", "report", "x"]);
    assert_eq!(code(&out), 1);
    let out = pertforge(&[
        "--config",
        &asset("robust.toml"),
        "--resume",
        "/tmp",
        "build",
        &asset("robust-val.jsonl"),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--resume"));
}

#[test]
fn optimize_finds_the_synthetic_optimum_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    build_robust_val(&data);
    let (a, b) = (tmp.path().join("run-a"), tmp.path().join("run-b"));
    let out = optimize(&asset("robust.toml"), &data, &a, false);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let printed = stdout(&out);
    assert!(printed.contains("ROBUST"));
    assert!(printed.contains("total = Σ(A_i + O_i) = "));
    let final_json: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("final.json")).unwrap()).unwrap();
    assert!(final_json["selection"]["prompt"]["text"]
        .as_str()
        .unwrap()
        .contains("ROBUST"));

    assert_eq!(code(&optimize(&asset("robust.toml"), &data, &b, false)), 0);
    assert_eq!(files(&a), files(&b));

    let again = optimize(&asset("robust.toml"), &data, &a, false);
    assert_eq!(code(&again), 1, "an existing run needs --resume");

    let report = pertforge(&["report", a.to_str().unwrap()]);
    assert_eq!(code(&report), 0);
    assert!(stdout(&report).contains("iteration,incumbent,score"));
    assert!(stdout(&report).contains("lineage"));
}

#[test]
fn missing_validation_code_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    build_robust_val(&data);
    fs::remove_file(data.join("robust-val.C2.jsonl")).unwrap();
    let out = optimize(&asset("robust.toml"), &data, &tmp.path().join("run"), false);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("C2"), "{}", stderr(&out));
}

#[test]
fn backend_failure_is_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    build_robust_val(&data);

    let mut script: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(assets().join("mock-robust.json")).unwrap())
            .unwrap();
    let fail = serde_json::json!({ "kind": "gradient", "label": "iter-3",
                                   "action": { "op": "fail", "message": "upstream timeout" } });
    script["rules"].as_array_mut().unwrap().insert(2, fail);
    let flaky_script = tmp.path().join("flaky.json");
    fs::write(&flaky_script, script.to_string()).unwrap();
    let config = fs::read_to_string(assets().join("robust.toml"))
        .unwrap()
        .replace("mock-robust.json", &flaky_script.display().to_string());
    let flaky_config = tmp.path().join("flaky.toml");
    fs::write(&flaky_config, config).unwrap();

    let run = tmp.path().join("run");
    let out = optimize(flaky_config.to_str().unwrap(), &data, &run, false);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains(&format!("checkpoint: {}", run.display())));
    assert!(run.join("iter-2.json").exists() && !run.join("iter-3.json").exists());

    let resumed = optimize(&asset("robust.toml"), &data, &run, true);
    assert_eq!(code(&resumed), 0, "{}", stderr(&resumed));

    let clean = tmp.path().join("clean");
    assert_eq!(
        code(&optimize(&asset("robust.toml"), &data, &clean, false)),
        0
    );
    assert_eq!(files(&run), files(&clean));
}

#[test]
fn evaluate_exports_scores_and_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    build_robust_val(&data);
    let report = tmp.path().join("report");
    let out = pertforge(&[
        "--config",
        &asset("robust.toml"),
        "evaluate",
        "--data",
        &asset("robust-val.jsonl"),
        "--data-dir",
        data.to_str().unwrap(),
        "--codes",
        "C1,W1",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let heatmap = fs::read_to_string(report.join("heatmap.csv")).unwrap();
    assert_eq!(
        heatmap,
        "dataset,code,metric,score,relative_change\n\
         robust-val,clean,accuracy,1.000000,0.000000\n\
         robust-val,C1,accuracy,0.000000,-1.000000\n\
         robust-val,W1,accuracy,0.000000,-1.000000\n"
    );
    let scores = fs::read_to_string(report.join("scores.csv")).unwrap();
    assert_eq!(
        scores.lines().next(),
        Some("dataset,code,prompt_id,metric,value")
    );
    assert_eq!(scores.lines().count(), 4);
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(report.join("scores.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 3);
    assert!(fs::read_to_string(report.join("cost.txt"))
        .unwrap()
        .starts_with("evaluation: "));

    let missing = pertforge(&[
        "--config",
        &asset("robust.toml"),
        "evaluate",
        "--data",
        &asset("robust-val.jsonl"),
        "--data-dir",
        data.to_str().unwrap(),
        "--codes",
        "C3",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&missing), 1);
}
