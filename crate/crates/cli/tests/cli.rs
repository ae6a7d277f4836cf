use std::process::Command;

fn chc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chc"))
}

#[test]
fn lists_builtins() {
    let out = chc().arg("scenarios").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "coe-baseline"));
}

#[test]
fn run_writes_report_dir_and_report_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = chc().args(["run", "trojan"]).env("CHC_REPORT_DIR", dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("digest"));
    let path = dir.path().join("trojan.json");
    assert!(path.exists());
    let out = chc().arg("report").arg(&path).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("trojan:"));
}

#[test]
fn seed_changes_digest() {
    let digest = |seed: &str| {
        let out = chc().args(["run", "trojan", "--digest", "--seed", seed]).output().unwrap();
        assert!(out.status.success());
        String::from_utf8(out.stdout).unwrap()
    };
    assert_eq!(digest("1"), digest("1"));
    assert_ne!(digest("1"), digest("2"));
}

#[test]
fn gen_trace_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let out = chc().args(["gen-trace", "trojan", "-o"]).arg(&path).output().unwrap();
    assert!(out.status.success());
    let records = chc::trace::load(&path).unwrap();
    let s = chc::scenario::resolve("trojan").unwrap();
    assert_eq!(records, s.records().unwrap());
}

#[test]
fn errors_exit_2_and_failed_checks_exit_0_or_1() {
    let out = chc().args(["run", "no-such-scenario"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = chc().args(["check", "--only", "9,10"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 2);
    let out = chc().args(["check", "--only", "10", "--cases", "5"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
