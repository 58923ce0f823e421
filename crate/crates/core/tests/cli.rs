use std::process::Command;

fn ads(store: &std::path::Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ads"))
        .env_remove("ADS_STORE")
        .arg("--store")
        .arg(store)
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn plan_lists_the_closure() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, out, _) = ads(tmp.path(), &["plan", "student_grad"]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().collect::<Vec<_>>(), ["teacher", "teacher_lambda=0.0_holdout", "proxy", "student_grad"]);
}

#[test]
fn invalid_arguments_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(ads(tmp.path(), &["plan", "teacher_lambda=abc_train"]).0, 2);
    assert_eq!(ads(tmp.path(), &["gencot", "--model_type", "teacher", "--lambda_value", "0.3", "--split", "train"]).0, 2);
    assert_eq!(ads(tmp.path(), &["gencot", "--model_type", "student", "--lambda_value", "0.3", "--split", "train"]).0, 2);
    assert_eq!(ads(tmp.path(), &["sft"]).0, 2);
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "teacher.d_model=zero\n").unwrap();
    assert_eq!(ads(tmp.path(), &["--config", cfg.to_str().unwrap(), "plan", "teacher"]).0, 2);
}

#[test]
fn missing_store_inputs_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, err) = ads(tmp.path(), &["eps-sweep", "--from-store"]);
    assert_eq!(code, 3);
    assert!(err.contains("is not in the store"), "{err}");
}

#[test]
fn numeric_failure_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(ads(tmp.path(), &["gradcheck", "--tolerance", "1e-300"]).0, 4);
    let (code, out, _) = ads(tmp.path(), &["gradcheck"]);
    assert_eq!(code, 0);
    assert!(out.contains("worst relative error"));
}
