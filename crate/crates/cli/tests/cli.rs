//! End-to-end tests for the `trigrid` binary: dataset generation, a small
//! two-node cluster over TCP with load and query, config files, and exit
//! codes.

use std::net::TcpListener;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trigrid"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn trigrid")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Reserve a free localhost port. The listener is dropped before the node
/// binds it, which is racy in principle but reliable for a test run.
fn free_addr() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

/// A node process killed on drop so a failing test does not leak daemons.
struct NodeProc(Child);

impl Drop for NodeProc {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_node(args: &[&str]) -> NodeProc {
    let child = bin()
        .args(["node"])
        .args(args)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .expect("spawn node");
    NodeProc(child)
}

fn wait_phase(addr: &str, phase: &str, secs: u64) {
    let deadline = Instant::now() + Duration::from_secs(secs);
    loop {
        let out = run(&["status", "--to", addr]);
        if out.status.success() && stdout(&out).contains(&format!("phase: {phase}")) {
            return;
        }
        assert!(
            Instant::now() < deadline,
            "node at {addr} never reached phase {phase}"
        );
        std::thread::sleep(Duration::from_millis(200));
    }
}

#[test]
fn generate_is_deterministic_ntriples() {
    let a = run(&["generate", "--stations", "3", "--observations", "2", "--seed", "7"]);
    let b = run(&["generate", "--stations", "3", "--observations", "2", "--seed", "7"]);
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    let text = stdout(&a);
    let lines: Vec<&str> = text.lines().collect();
    assert!(!lines.is_empty());
    for line in &lines {
        assert!(line.ends_with(" ."), "not an N-Triples statement: {line}");
        assert!(line.starts_with('<'), "subject is not an IRI: {line}");
    }
    let c = run(&["generate", "--stations", "3", "--observations", "2", "--seed", "8"]);
    assert_ne!(stdout(&a), stdout(&c));
}

#[test]
fn cluster_load_and_query_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("obs.nt");
    let out = run(&[
        "generate",
        "--stations",
        "3",
        "--observations",
        "6",
        "--seed",
        "21",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let addr0 = free_addr();
    let addr1 = free_addr();
    let _n0 = spawn_node(&["--id", "0", "--listen", &addr0]);
    let _n1 = spawn_node(&[
        "--id",
        "1",
        "--listen",
        &addr1,
        "--peer",
        &format!("0={addr0}"),
    ]);
    wait_phase(&addr0, "running", 30);
    wait_phase(&addr1, "running", 30);

    let out = run(&["load", "--to", &addr0, data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("inserted "), "{}", stdout(&out));

    let q = "PREFIX sosa: <http://www.w3.org/ns/sosa/>\n\
             SELECT ?obs ?v WHERE {\n\
               ?obs a sosa:Observation .\n\
               ?obs sosa:hasSimpleResult ?v .\n\
             }";
    // routed inserts settle asynchronously; poll until the star join is full
    let deadline = Instant::now() + Duration::from_secs(15);
    let rows = loop {
        let out = run(&["query", "--to", &addr1, q]);
        if out.status.success() {
            let text = stdout(&out);
            let rows: Vec<&str> = text.lines().skip(1).collect();
            if rows.len() == 6 * 7 || Instant::now() >= deadline {
                break rows.iter().map(|r| r.to_string()).collect::<Vec<_>>();
            }
        } else {
            assert!(Instant::now() < deadline, "query kept failing: {}", stderr(&out));
        }
        std::thread::sleep(Duration::from_millis(300));
    };
    assert_eq!(rows.len(), 6 * 7);
    for row in &rows {
        let cells: Vec<&str> = row.split('\t').collect();
        assert_eq!(cells.len(), 2);
        assert!(cells[0].starts_with('<'), "unresolved term: {row}");
    }
}

#[test]
fn node_reads_options_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let addr = free_addr();
    let cfg = dir.path().join("node.conf");
    std::fs::write(
        &cfg,
        format!("# test node\nid = 5\nlisten = {addr}\nsplit-blocks = 8\n"),
    )
    .unwrap();
    let _n = spawn_node(&["--config", cfg.to_str().unwrap()]);
    wait_phase(&addr, "running", 30);
    let out = run(&["status", "--to", &addr]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("path: "), "{}", stdout(&out));
}

#[test]
fn usage_errors_exit_2() {
    let out = run(&["query", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    // no node listening here
    let out = run(&["status", "--to", "127.0.0.1:1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("error:"), "{}", stderr(&out));

    let out = run(&["node", "--listen", "127.0.0.1:0"]);
    assert_eq!(out.status.code(), Some(1), "missing id must fail");
    assert!(stderr(&out).contains("id"), "{}", stderr(&out));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "this line has no equals sign\n").unwrap();
    let out = run(&["node", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("key=value"), "{}", stderr(&out));
}

#[test]
fn experiment_writes_csv() {
    let out = run(&[
        "experiment",
        "--exp",
        "1",
        "--sizes",
        "500",
        "--peers",
        "2",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.contains("peers"), "unexpected header: {header}");
    let body: Vec<&str> = lines.collect();
    assert!(!body.is_empty());
    for row in body {
        assert_eq!(row.split(',').count(), header.split(',').count());
    }
}
