use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};

fn metacat() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metacat"))
}

fn scenario(name: &str) -> String {
    format!("{}/../harness/scenarios/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn sim_reports_and_sets_exit_status() {
    let out = metacat().args(["sim", &scenario("plain_replication.scn"), "--seed", "3"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.scn");
    std::fs::write(&bad, "NODE M\nCLIENT M ADDENTRY /nowhere/x\nEXPECT OK\n").unwrap();
    let out = metacat().args(["sim", bad.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    let out = metacat()
        .args(["bench", "--slaves", "0..2", "--entries", "40", "--rate", "100", "--csv", csv.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "slaves,entries,rate,lag_ms_p50,lag_ms_max,work_units,wall_ms");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("2,40,100,"));
}

#[test]
fn restore_then_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let input = dir.path().join("in.dump");
    let text = "ADDATTR / site:STRING\nCREATEDIR /exp run:INT note:STRING\nADDENTRY /exp/a 1 \"two words\"\nADDENTRY /exp/b NULL x\n";
    std::fs::write(&input, text).unwrap();
    let out = metacat().args(["restore", store.to_str().unwrap(), input.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = metacat().args(["dump", store.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), text);
}

#[test]
fn errors_go_to_stderr_with_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.dump");
    std::fs::write(&input, "ADDENTRY /missing/x 1\n").unwrap();
    let out = metacat().args(["restore", dir.path().join("s").to_str().unwrap(), input.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ERR 404 "), "{}", String::from_utf8_lossy(&out.stderr));

    let out = metacat().args(["dump", dir.path().join("absent").to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
}

#[test]
fn serve_and_client() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("node.toml");
    std::fs::write(&cfg, "id = \"M\"\nlisten = \"127.0.0.1:0\"\nstorage = \"data\"\nsync = false\n").unwrap();
    let mut server = metacat().args(["serve", cfg.to_str().unwrap()]).stdout(Stdio::piped()).spawn().unwrap();
    let mut first = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut first).unwrap();
    let addr = first.trim().rsplit(' ').next().unwrap().to_string();

    let out = metacat()
        .args(["client", &addr, "-e", "CREATEDIR /exp n:INT", "-e", "ADDENTRY /exp/a 7", "-e", "GETATTR /exp/a"])
        .output()
        .unwrap();
    let _ = server.kill();
    let _ = server.wait();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout), "OK\n.\nOK\n.\nOK\n|n 7\n.\n");
    assert!(dir.path().join("data").is_dir());
}
