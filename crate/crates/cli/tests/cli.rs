use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use pmcdb::model::UserId;
use pmcdb_cli::{self as cli, Transport, Workspace};

const BIN: &str = env!("CARGO_BIN_EXE_pmcdb");

const STAFF_CSV: &str = "Name,Age\nAlice,27\nAnna,30\nBob,27\nBill,25\nBob,33\n";
const STAFF_GROUPS: &str = "Alice,1\nAnna,1\nBob,2\nBill,2\n25,1\n27,1\n30,2\n33,2\n";

fn pmcdb(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--dir")
        .arg(dir)
        .args(args)
        .env_remove("PMCDB_S1")
        .env_remove("PMCDB_S2")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn staff(root: &Path) -> PathBuf {
    fs::write(root.join("staff.csv"), STAFF_CSV).unwrap();
    fs::write(root.join("groups.csv"), STAFF_GROUPS).unwrap();
    let dir = root.join("staff");
    let table = format!("table:{}", root.join("groups.csv").display());
    let csv = root.join("staff.csv");
    ok(pmcdb(
        &dir,
        &["--seed", "7", "init", csv.to_str().unwrap(), "--group-bits", "2", "--grouping", &table],
    ));
    dir
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

fn sorted_lines(s: &str) -> Vec<String> {
    let mut v: Vec<String> = s.lines().skip(1).map(String::from).collect();
    v.sort();
    v
}

#[test]
fn staff_stats_report_one_dummy_and_four_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = staff(tmp.path());
    let text = ok(pmcdb(&dir, &["stats"]));
    assert!(text.contains("records\t6\n"), "{text}");
    assert!(text.contains("dummies\t1\n"));
    assert!(text.contains("groups\t4\n"));
    // (field, group, |E|, tau, |IL|)
    for row in ["Name\t1\t2\t1\t2", "Name\t2\t2\t2\t4", "Age\t1\t2\t2\t4", "Age\t2\t2\t1\t2"] {
        assert!(text.contains(row), "missing {row:?} in\n{text}");
    }
    let lib = cli::stats(&Workspace::open(&dir, None).unwrap()).unwrap();
    assert_eq!(text, lib.to_string());
}

#[test]
fn select_prints_two_bobs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = staff(tmp.path());
    let out = ok(pmcdb(&dir, &["select", "Name", "Bob"]));
    assert_eq!(out.lines().next(), Some("Name,Age"));
    assert_eq!(sorted_lines(&out), vec!["Bob,27", "Bob,33"]);
    let out = ok(pmcdb(&dir, &["select", "1", "27"]));
    assert_eq!(sorted_lines(&out), vec!["Alice,27", "Bob,27"]);
}

/// Runs the same seeded command sequence through the binary and through
/// library calls on a copy of the directory; the stores must end up
/// byte-identical.
#[test]
fn binary_and_library_paths_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let a = staff(tmp.path());
    let b = tmp.path().join("copy");
    copy_dir(&a, &b);

    let sel = ok(pmcdb(&a, &["--seed", "11", "select", "Name", "Bob"]));
    ok(pmcdb(&a, &["--seed", "12", "insert", "Anna", "25"]));
    let del = ok(pmcdb(&a, &["--seed", "13", "delete", "Age", "27"]));
    ok(pmcdb(&a, &["--seed", "14", "compact"]));

    let ws = Workspace::open(&b, None).unwrap();
    let t = Transport::InProc;
    let rows = cli::select(&ws, &t, UserId(1), "Name", "Bob", Some(11)).unwrap().rows;
    let mut buf = Vec::new();
    cli::write_rows(&mut buf, &ws.manifest.field_names, &rows).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), sel);
    cli::insert(&ws, &t, UserId(1), &["Anna".into(), "25".into()], Some(12)).unwrap();
    let d = cli::delete(&ws, &t, UserId(1), "Age", "27", Some(13)).unwrap();
    assert_eq!(del, format!("deleted {} rows\n", d.deleted));
    cli::compact(&ws, Some(14)).unwrap();

    for f in ["edb.bin", "ndb.bin", "gdb.bin", "manifest.toml", "revoked.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

/// Dummy count Σ_max recomputed from the plaintext: per field, pad every
/// element of a `value mod 10` group up to the group maximum.
fn brute_force_sigma_max(csv: &str, modulus: u64) -> u64 {
    let mut occ: BTreeMap<u64, u64> = BTreeMap::new();
    for line in csv.lines().skip(1) {
        *occ.entry(line.trim().parse().unwrap()).or_default() += 1;
    }
    let mut max_in_group: BTreeMap<u64, u64> = BTreeMap::new();
    for (v, n) in &occ {
        let m = max_in_group.entry(v % modulus).or_default();
        *m = (*m).max(*n);
    }
    occ.iter().map(|(v, n)| max_in_group[&(v % modulus)] - n).sum()
}

#[test]
fn generated_mod10_table_matches_dummy_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("ints.csv");
    ok(pmcdb(
        tmp.path(),
        &["--seed", "5", "gen", "--rows", "10000", "--distinct", "3000", "--out", csv.to_str().unwrap()],
    ));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 10_001);
    let expect = brute_force_sigma_max(&text, 10);
    assert!(expect > 0);

    let dir = tmp.path().join("ints");
    let init = ok(pmcdb(&dir, &["--seed", "5", "init", csv.to_str().unwrap(), "--grouping", "mod:10"]));
    assert!(init.starts_with(&format!("10000 rows, {} records ({expect} dummy), 10 groups", 10_000 + expect)), "{init}");
    let stats = cli::stats(&Workspace::open(&dir, None).unwrap()).unwrap();
    assert_eq!(stats.dummies as u64, expect);
    assert_eq!(stats.groups.len(), 10);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = staff(tmp.path());
    let code = |o: Output| o.status.code().unwrap();
    assert_eq!(code(pmcdb(&dir, &["frobnicate"])), 2);
    assert_eq!(code(pmcdb(&dir, &["select", "Salary", "1"])), 2);
    assert_eq!(code(pmcdb(&dir, &["insert", "only-one"])), 2);
    assert_eq!(code(pmcdb(&dir, &["--transport", "tcp", "select", "Name", "Bob"])), 2);
    assert_eq!(code(pmcdb(&tmp.path().join("missing"), &["stats"])), 5);
    ok(pmcdb(&dir, &["revoke", "9"]));
    assert_eq!(code(pmcdb(&dir, &["--user", "9", "select", "Name", "Bob"])), 4);
    assert_eq!(code(pmcdb(&dir, &["--user", "8", "select", "Name", "Bob"])), 0);
    fs::write(dir.join("edb.bin"), b"PMCD").unwrap();
    assert_eq!(code(pmcdb(&dir, &["stats"])), 5);
}

#[test]
fn keys_come_from_the_environment_when_set() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = staff(tmp.path());
    let keys = fs::read_to_string(dir.join("keys.toml")).unwrap();
    let hex = |name: &str| {
        keys.lines()
            .find(|l| l.starts_with(name))
            .and_then(|l| l.split('"').nth(1))
            .unwrap()
            .to_string()
    };
    let moved = tmp.path().join("elsewhere.toml");
    fs::rename(dir.join("keys.toml"), &moved).unwrap();
    assert_eq!(pmcdb(&dir, &["stats"]).status.code(), Some(4));
    let out = Command::new(BIN)
        .args(["--dir", dir.to_str().unwrap(), "select", "Name", "Anna"])
        .env("PMCDB_S1", hex("s1"))
        .env("PMCDB_S2", hex("s2"))
        .output()
        .unwrap();
    assert_eq!(sorted_lines(&ok(out)), vec!["Anna,30"]);
    let out = ok(pmcdb(&dir, &["--key-file", moved.to_str().unwrap(), "select", "Name", "Anna"]));
    assert_eq!(sorted_lines(&out), vec!["Anna,30"]);
    for f in ["edb.bin", "ndb.bin", "gdb.bin", "manifest.toml"] {
        let bytes = fs::read(dir.join(f)).unwrap();
        let s1 = hex_decode(&hex("s1"));
        assert!(!bytes.windows(s1.len()).any(|w| w == s1), "{f} holds key material");
    }
}

fn hex_decode(s: &str) -> Vec<u8> {
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_server(dir: &Path, role: &str) -> (Server, SocketAddr) {
    let mut child = Command::new(BIN)
        .args(["--dir", dir.to_str().unwrap(), "--seed", "3", "serve", "--role", role])
        .args(["--addr", "127.0.0.1:0", "--max-connections", "1"])
        .env_remove("PMCDB_S1")
        .env_remove("PMCDB_S2")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().parse().unwrap();
    (Server(child), addr)
}

#[test]
fn tcp_transport_serves_and_persists() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = staff(tmp.path());
    let edb_before = fs::read(dir.join("edb.bin")).unwrap();
    let (mut s, sa) = spawn_server(&dir, "sss");
    let (mut i, ia) = spawn_server(&dir, "iws");
    let (mut r, ra) = spawn_server(&dir, "rss");
    let out = ok(pmcdb(
        &dir,
        &[
            "--transport",
            "tcp",
            "--sss",
            &sa.to_string(),
            "--iws",
            &ia.to_string(),
            "--rss",
            &ra.to_string(),
            "select",
            "Name",
            "Bob",
        ],
    ));
    assert_eq!(sorted_lines(&out), vec!["Bob,27", "Bob,33"]);
    for srv in [&mut s, &mut i, &mut r] {
        assert!(srv.0.wait().unwrap().success());
    }
    // The shuffle after the search was written back by the servers.
    assert_ne!(fs::read(dir.join("edb.bin")).unwrap(), edb_before);
    let out = ok(pmcdb(&dir, &["select", "Name", "Bob"]));
    assert_eq!(sorted_lines(&out), vec!["Bob,27", "Bob,33"]);
    assert!(ok(pmcdb(&dir, &["stats"])).contains("dummies\t1\n"));
}

#[test]
fn audit_writes_a_passing_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = staff(tmp.path());
    let edb = fs::read(dir.join("edb.bin")).unwrap();
    let report = tmp.path().join("audit.jsonl");
    let text = ok(pmcdb(
        &dir,
        &["--seed", "2", "audit", "--trials", "6", "--report", report.to_str().unwrap()],
    ));
    for kind in ["size pattern: PASS", "forward privacy: PASS", "backward privacy: PASS", "untraceability:"] {
        assert!(text.contains(kind), "{text}");
    }
    let lines = fs::read_to_string(&report).unwrap();
    assert_eq!(lines.lines().count(), 1 + 6 + 1 + 1);
    assert!(lines.lines().all(|l| l.starts_with("{\"audit\":")));
    // Audits run on a copy.
    assert_eq!(fs::read(dir.join("edb.bin")).unwrap(), edb);
}
