use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use automaton_lab::dfa::{equivalent, parity_dfa, Dfa};
use regex::Regex;
use tempfile::TempDir;

const SMALL: [&str; 5] = [
    "train.epochs=20",
    "train.hidden_size=12",
    "dataset.max_train_length=4",
    "dataset.validation_count=5",
    "extraction.snapshot_stride=10",
];

fn run(args: &[&str], sets: &[&str], out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_automaton-lab"));
    cmd.args(args).arg("--out").arg(out);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.env("AUTOMATON_LAB_WORKERS", "1");
    cmd.output().expect("binary runs")
}

fn ok(output: &Output) -> String {
    assert!(
        output.status.success(),
        "status {:?}\nstderr:\n{}",
        output.status,
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout.clone()).unwrap()
}

fn read(path: PathBuf) -> String {
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Rebuilds an automaton from the DOT emitted by the harness, checking
/// the statement grammar line by line on the way.
fn parse_dot(src: &str) -> Dfa {
    let node = Regex::new(r#"^q(\d+) \[label="q\d+/(\d+)"(, penwidth=3, xlabel="start")?\];$"#).unwrap();
    let edge = Regex::new(r#"^q(\d+) -> q(\d+) \[label="(\d+)"\];$"#).unwrap();
    let attr = Regex::new(r"^(rankdir=\w+|node \[[a-z]+=[a-z]+\]);$").unwrap();
    let mut lines = src.lines().map(str::trim).filter(|l| !l.is_empty());
    assert_eq!(lines.next(), Some("digraph dfa {"));
    let mut outputs = Vec::new();
    let mut initial = None;
    let mut edges = Vec::new();
    let mut closed = false;
    for line in lines {
        assert!(!closed, "statement after closing brace: {line}");
        if line == "}" {
            closed = true;
        } else if let Some(c) = node.captures(line) {
            let id: usize = c[1].parse().unwrap();
            assert_eq!(id, outputs.len());
            outputs.push(c[2].parse::<usize>().unwrap());
            if c.get(3).is_some() {
                assert!(initial.replace(id).is_none());
            }
        } else if let Some(c) = edge.captures(line) {
            let [from, to, sym] = [1, 2, 3].map(|i| c[i].parse::<usize>().unwrap());
            edges.push((from, to, sym));
        } else {
            assert!(attr.is_match(line), "unparsed DOT statement: {line}");
        }
    }
    assert!(closed);
    let k = edges.iter().map(|e| e.2 + 1).max().unwrap_or(0);
    let mut table = vec![vec![usize::MAX; k]; outputs.len()];
    for (from, to, sym) in edges {
        assert_eq!(table[from][sym], usize::MAX, "duplicate edge");
        table[from][sym] = to;
    }
    Dfa::new(k, table, initial.expect("initial state"), outputs).unwrap()
}

fn csv_files(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv" || x == "dot" || x == "txt"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), read(p)))
        .collect();
    files.sort();
    files
}

#[test]
fn zero_epochs_writes_headers_and_the_initial_row() {
    let dir = TempDir::new().unwrap();
    let mut sets = SMALL.to_vec();
    sets.push("train.epochs=0");
    ok(&run(&["train"], &sets, dir.path()));
    let loss = read(dir.path().join("loss.csv"));
    assert_eq!(loss, "epoch,train_loss\n".to_string() + loss.lines().nth(1).unwrap() + "\n");
    assert!(loss.lines().nth(1).unwrap().starts_with("0,"));
    let states = read(dir.path().join("states.csv"));
    let rows: Vec<&str> = states.lines().collect();
    assert_eq!(rows[0], "epoch,epsilon,states,minimized_states,max_transition_distance,conflict_rate");
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("0,"));
    let validation = read(dir.path().join("validation.csv"));
    assert!(validation.starts_with("epoch,length,loss,accuracy\n"));
    assert!(validation.lines().skip(1).all(|l| l.starts_with("0,")));
    assert_eq!(validation.lines().count(), 4);
    assert!(dir.path().join("automaton_epoch0000.dot").exists());
    assert!(dir.path().join("automaton_final_min.dot").exists());
}

#[test]
fn malformed_config_exits_with_code_two() {
    let dir = TempDir::new().unwrap();
    let out = run(&["train"], &["train.epochs=\"many\""], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train"], &["train.no_such_field=1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_automaton-lab"))
        .args(["train", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train", "--preset", "nonexistent"], &[], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_one_and_keeps_partial_output() {
    let dir = TempDir::new().unwrap();
    let mut sets = SMALL.to_vec();
    sets.push("train.init_gain=1e100");
    let out = run(&["train"], &sets, dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("loss.csv").exists());
}

#[test]
fn merger_check_on_negative_a_high() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(&run(&["theory", "merger-check", "--A-low", "0", "--A-high", "-1"], &[], dir.path()));
    assert!(stdout.lines().any(|l| l == "merge=true"), "{stdout}");
    let stdout = ok(&run(&["theory", "merger-check", "--A-low", "0.5", "--A-high", "1"], &[], dir.path()));
    assert!(stdout.lines().any(|l| l == "merge=false"), "{stdout}");
}

#[test]
fn ode3_report_meets_closed_form() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(&run(&["theory", "ode3"], &["draws=20"], dir.path()));
    let line = stdout
        .lines()
        .find(|l| l.starts_with("max_rel_err_final_distance "))
        .expect("report line");
    let err: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(err < 1e-6, "{line}");
    assert!(read(dir.path().join("ode3_trajectory.csv")).starts_with("t,"));
}

#[test]
fn ode9_unequal_rate_preset_diverges_then_merges() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(&run(&["theory", "ode9", "--preset", "agreeing-unequal-rates"], &[], dir.path()));
    let words: Vec<&str> = stdout.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(words[0], "agreeing-unequal-rates");
    let field = |name: &str| -> f64 {
        let i = words.iter().position(|w| *w == name).unwrap();
        words[i + 1].parse().unwrap()
    };
    let (d0, peak, last) = (field("initial"), field("peak"), field("final"));
    assert!(peak > d0 && last < 1e-3 * d0, "{stdout}");
    assert!(dir.path().join("ode9_agreeing-unequal-rates.csv").exists());
}

#[test]
fn fixed_points_and_oracle_commands_run() {
    let dir = TempDir::new().unwrap();
    ok(&run(&["theory", "fixed-points"], &[], dir.path()));
    assert!(read(dir.path().join("fixed_points.csv")).starts_with("point,dh2,dy2,w,stability"));
    ok(&run(&["theory", "oracle3"], &["oracle_instances=2"], dir.path()));
}

#[test]
fn reruns_are_byte_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let mut sets = SMALL.to_vec();
    sets.extend(["pairs.taylor_pairs=5", "extraction.tracked_pairs=50"]);
    ok(&run(&["pairs"], &sets, a.path()));
    ok(&run(&["pairs"], &sets, b.path()));
    let (fa, fb) = (csv_files(a.path()), csv_files(b.path()));
    assert!(fa.iter().any(|(n, _)| n == "merger_by_m.csv"));
    assert!(fa.iter().any(|(n, _)| n == "selected_pairs.csv"));
    assert_eq!(fa, fb);
}

#[test]
fn single_cell_sweep_matches_train_summary() {
    let train_dir = TempDir::new().unwrap();
    let sweep_dir = TempDir::new().unwrap();
    let sets = [
        "train.epochs=30",
        "train.hidden_size=16",
        "train.init_gain=0.2",
        "dataset.max_train_length=5",
        "dataset.validation_count=8",
        "sweep.gains=[0.2]",
        "sweep.max_lengths=[5]",
    ];
    ok(&run(&["train"], &sets, train_dir.path()));
    ok(&run(&["sweep"], &sets, sweep_dir.path()));
    let summary: serde_json::Value = serde_json::from_str(&read(train_dir.path().join("summary.json"))).unwrap();
    let sweep = read(sweep_dir.path().join("sweep.csv"));
    let mut reader = csv::Reader::from_reader(sweep.as_bytes());
    let headers = reader.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    for (h, v) in headers.iter().zip(rows[0].iter()) {
        let expect = match &summary[h] {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let same = match (v.parse::<f64>(), expect.parse::<f64>()) {
            (Ok(x), Ok(y)) => x == y,
            _ => v == expect,
        };
        assert!(same, "{h}: sweep {v} vs train {expect}");
    }
}

#[test]
fn sweep_is_independent_of_worker_count() {
    let one = TempDir::new().unwrap();
    let three = TempDir::new().unwrap();
    let sets = [
        "train.epochs=10",
        "train.hidden_size=8",
        "dataset.validation_count=4",
        "sweep.gains=[0.1,1.0]",
        "sweep.max_lengths=[3,4]",
        "sweep.seeds=2",
    ];
    ok(&run(&["sweep"], &sets, one.path()));
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_automaton-lab"));
    cmd.arg("sweep").arg("--out").arg(three.path()).env("AUTOMATON_LAB_WORKERS", "3");
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    ok(&cmd.output().unwrap());
    let a = read(one.path().join("sweep.csv"));
    assert_eq!(a.lines().count(), 9);
    assert_eq!(a, read(three.path().join("sweep.csv")));
}

#[test]
fn step_relu_variant_emits_all_files() {
    let dir = TempDir::new().unwrap();
    let mut sets = SMALL.to_vec();
    sets.push("plots=true");
    ok(&run(&["variant", "--preset", "step_relu"], &sets, dir.path()));
    for name in [
        "config.json",
        "summary.json",
        "loss.csv",
        "validation.csv",
        "states.csv",
        "task.dot",
        "automaton_epoch0000.dot",
        "automaton_epoch0010.dot",
        "automaton_epoch0020.dot",
        "automaton_final.dot",
        "automaton_final_min.dot",
        "automaton_final_min.txt",
        "loss.svg",
    ] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    let config: serde_json::Value = serde_json::from_str(&read(dir.path().join("config.json"))).unwrap();
    assert_eq!(config["train"]["output_activation"], "step_relu");
}

#[test]
fn dot_output_round_trips() {
    let dir = TempDir::new().unwrap();
    ok(&run(&["train"], &SMALL, dir.path()));
    let task = parse_dot(&read(dir.path().join("task.dot")));
    assert!(equivalent(&task, &parity_dfa()).unwrap());
    assert_eq!(task, parity_dfa());
    let learned = parse_dot(&read(dir.path().join("automaton_final.dot")));
    let minimized = parse_dot(&read(dir.path().join("automaton_final_min.dot")));
    assert!(equivalent(&learned, &minimized).unwrap());
    assert_eq!(
        read(dir.path().join("automaton_final_min.txt")),
        minimized.to_text()
    );
}
