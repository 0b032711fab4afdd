use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mixoram"))
}

/// Runs in a scratch directory so default report output lands there.
fn run(args: &[&str]) -> Output {
    let dir = tempfile::tempdir().unwrap();
    bin().args(args).current_dir(dir.path()).output().expect("spawn mixoram")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn sim_passes_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["sim", "--design", "parallel-layered", "--n", "16", "--m", "2", "--seed", "9", "--out", out]);
    assert!(stdout(&o).contains("report="));
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("verdict=PASS"));
    assert!(dir.path().join("e2e_parallel-layered_16_2_9.csv").exists());
    assert!(dir.path().join("e2e_parallel-layered_16_2_9.txt").exists());
}

#[test]
fn missing_mix_count_is_a_usage_error() {
    let o = run(&["sim", "--design", "cascade-layered", "--n", "16"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["sim", "--design", "cascade-layered", "--n", "15", "--m", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["sim", "--design", "nope", "--n", "16", "--m", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# defaults\ndesign = cascade-rebuild\nn = 16\nm = 4\nseed = 5\n").unwrap();
    let o = run(&["sim", "--config", cfg.to_str().unwrap(), "--m", "2"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("design=cascade-rebuild"));
    assert!(text.contains("\nm=2\n"));
    assert!(text.contains("seed=5"));
}

#[test]
fn audit_and_reinit() {
    let o = run(&["audit", "--design", "cascade-layered", "--n", "32", "--m", "2"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let o = run(&["reinit", "--n", "32", "--m", "2", "--trials", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("wrong_reads=0"));
}

#[test]
fn coupon_statistics() {
    let o = run(&["stats", "coupon", "--n", "4096", "--s", "64", "--d", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("harmonic="));
}

fn free_addr() -> String {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string()
}

struct Reap(Vec<Child>);

impl Drop for Reap {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn spawn(args: &[&str]) -> Child {
    bin().args(args).stdout(Stdio::null()).stderr(Stdio::null()).spawn().unwrap()
}

#[test]
fn separate_processes_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let keydir = dir.path().to_str().unwrap();
    assert!(run(&["keygen", "--m", "2", "--out", keydir]).status.success());
    let key = |i: usize| Path::new(keydir).join(format!("mix{i}.key")).display().to_string();

    let (m0, m1, st, cl) = (free_addr(), free_addr(), free_addr(), free_addr());
    let peers = format!("mix0={m0},mix1={m1},storage={st},client={cl}");
    let scenario = ["--design", "cascade-rebuild", "--n", "16", "--m", "2", "--seed", "4", "--trials", "2"];
    let mut nodes = Reap(Vec::new());
    for (i, addr) in [&m0, &m1].into_iter().enumerate() {
        let (idx, kf) = (i.to_string(), key(i));
        nodes.0.push(spawn(&["node", "--role", "mix", "--index", &idx, "--key-file", &kf, "--listen", addr, "--peers", &peers, "--idle", "30"]));
    }
    let mut args = vec!["node", "--role", "storage", "--listen", &st, "--peers", &peers, "--idle", "30"];
    args.extend(scenario);
    nodes.0.push(spawn(&args));

    let keys = format!("{},{}", key(0), key(1));
    let mut args = vec!["node", "--role", "client", "--keys", &keys, "--listen", &cl, "--peers", &peers];
    args.extend(scenario);
    let o = run(&args);
    assert!(o.status.success(), "{}\n{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("check.readback=PASS"));
}
