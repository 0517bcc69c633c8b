use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use roundattn::synthetic::planted_corpus;

fn roundattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roundattn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_conversations(dir: &Path) {
    let words = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta"];
    for c in 0..3 {
        let mut msgs = Vec::new();
        for r in 0..4 + c {
            let pick = |k: usize| {
                (0..4)
                    .map(|i| words[(c * 5 + r * 3 + i * k) % words.len()])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            msgs.push(serde_json::json!({"from": "human", "value": pick(1)}));
            msgs.push(serde_json::json!({"from": "gpt", "value": pick(2)}));
        }
        let doc = serde_json::json!({ "conversations": msgs });
        fs::write(dir.join(format!("c{c}.json")), doc.to_string()).unwrap();
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn memory_prints_reference_rows_and_footprint() {
    let out = roundattn(&["memory", "--model-layers", "80", "--lw", "18", "--k", "10", "--t", "10"]);
    assert!(out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["kind"], "memory");
    assert_eq!(report["schema_version"], 1);
    let rows = report["reference"].as_array().unwrap();
    assert_eq!(rows.len(), 10);
    let big = rows.iter().find(|r| r["layers"] == 80).unwrap();
    assert_eq!(big["save_percent"], 78);
    // K = T saves nothing
    assert_eq!(report["footprint"]["save_percent"], 0);
    assert_eq!(report["footprint"]["limit_save_percent"], 78);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let convs = tmp.path().join("convs");
    fs::create_dir(&convs).unwrap();
    write_conversations(&convs);
    let c = convs.to_str().unwrap();
    for cmd in ["run", "compare", "analyze"] {
        let mut outs = Vec::new();
        for i in 0..2 {
            let out = tmp.path().join(format!("{cmd}{i}"));
            let o = out.to_str().unwrap();
            let mut args = vec![cmd, "--out", o, "--max-decode", "4", c];
            if cmd != "analyze" {
                args.extend(["--lw", "3"]);
            }
            let status = roundattn(&args);
            assert!(status.status.success(), "{cmd}: {}", String::from_utf8_lossy(&status.stderr));
            outs.push(dir_contents(&out));
        }
        assert!(!outs[0].is_empty());
        assert_eq!(outs[0], outs[1], "{cmd}");
    }
}

#[test]
fn run_reports_one_upper_fetch_per_turn_with_history() {
    let tmp = tempfile::tempdir().unwrap();
    write_conversations(tmp.path());
    let out = tmp.path().join("out");
    let args = ["run", "--lw", "2", "--fraction", "0.3", "--out", out.to_str().unwrap(), tmp.path().to_str().unwrap()];
    assert!(roundattn(&args).status.success());
    let report = read_json(&out.join("run.json"));
    let totals = &report["totals"];
    assert_eq!(totals["upper_h2d_events"], totals["turns_with_history"]);
    assert_eq!(report["seed"], 42);
    let csv = fs::read_to_string(out.join("costs.csv")).unwrap();
    assert!(csv.starts_with("layer,step,phase,"));
}

#[test]
fn watershed_source_must_be_unique() {
    let tmp = tempfile::tempdir().unwrap();
    write_conversations(tmp.path());
    let dir = tmp.path().to_str().unwrap();
    let both = roundattn(&["run", "--lw", "3", "--calibrate", dir, dir]);
    assert_eq!(both.status.code(), Some(2));
    let neither = roundattn(&["run", dir]);
    assert_eq!(neither.status.code(), Some(2));
    let calibrated = roundattn(&["run", "--calibrate", dir, "--max-decode", "2", dir]);
    assert!(calibrated.status.success());
    let report: Value = serde_json::from_slice(&calibrated.stdout).unwrap();
    assert_eq!(report["settings"]["watershed_source"]["source"], "calibrated");
    let detected = report["settings"]["watershed_source"]["detected_layer"].as_u64().unwrap();
    assert_eq!(report["settings"]["watershed"].as_u64().unwrap(), detected + 1);
}

#[test]
fn input_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{not json").unwrap();
    let b = bad.to_str().unwrap();
    assert_eq!(roundattn(&["run", "--lw", "3", b]).status.code(), Some(2));
    assert_eq!(roundattn(&["memory", "--lw", "9", "--model-layers", "8"]).status.code(), Some(2));
    assert_eq!(roundattn(&["run", "--lw", "3", "--strategy", "fixed", "--v", "1.5", b]).status.code(), Some(2));
    assert_eq!(roundattn(&["memory", "--bogus"]).status.code(), Some(2));
    write_conversations(tmp.path());
    fs::remove_file(&bad).unwrap();
    let one = roundattn(&["compare", "--lw", "3", "--policies", "top", tmp.path().to_str().unwrap()]);
    assert_eq!(one.status.code(), Some(2));
}

#[test]
fn analyze_skips_single_round_input_and_reads_traces() {
    let tmp = tempfile::tempdir().unwrap();
    for (i, trace) in planted_corpus(12, 5, 4, 7).unwrap().into_iter().enumerate() {
        let (header, payload) = trace.encode().unwrap();
        fs::write(tmp.path().join(format!("t{i}.json")), header).unwrap();
        fs::write(tmp.path().join(format!("t{i}.bin")), payload).unwrap();
    }
    let single = tmp.path().join("zz_single.json");
    fs::write(&single, r#"[{"from":"human","value":"hi"},{"from":"gpt","value":"hello"}]"#).unwrap();
    // the model only traces the single conversation, which is skipped
    let out = roundattn(&["analyze", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["watershed"]["layer"], 5);
    assert_eq!(report["lower_layers"], 6);
    assert_eq!(report["inputs"].as_array().unwrap().len(), 4);
    assert_eq!(report["skipped"][0]["name"], "zz_single");
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipped zz_single"));

    fs::remove_file(tmp.path().join("t0.json")).unwrap();
    fs::remove_file(tmp.path().join("t1.json")).unwrap();
    fs::remove_file(tmp.path().join("t2.json")).unwrap();
    fs::remove_file(tmp.path().join("t3.json")).unwrap();
    let none = roundattn(&["analyze", tmp.path().to_str().unwrap()]);
    assert_eq!(none.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    write_conversations(tmp.path());
    let cfg = tmp.path().join("settings.toml");
    fs::write(&cfg, "lw = 4\nstrategy = \"all\"\nmax_decode = 3\ndrop_window = 0\nseed = 7\n").unwrap();
    let dir = tmp.path().to_str().unwrap();
    let c = cfg.to_str().unwrap();
    let from_file = roundattn(&["run", "--config", c, dir]);
    assert!(from_file.status.success(), "{}", String::from_utf8_lossy(&from_file.stderr));
    let r: Value = serde_json::from_slice(&from_file.stdout).unwrap();
    assert_eq!(r["settings"]["watershed"], 4);
    assert_eq!(r["settings"]["policy"]["strategy"]["kind"], "all");
    assert_eq!(r["settings"]["max_decode_steps"], 3);
    assert!(r["settings"]["drop"].get("window").is_none());
    assert_eq!(r["seed"], 7);

    let overridden = roundattn(&["run", "--config", c, "--strategy", "top", "--lw", "2", dir]);
    let r: Value = serde_json::from_slice(&overridden.stdout).unwrap();
    assert_eq!(r["settings"]["watershed"], 2);
    assert_eq!(r["settings"]["policy"]["strategy"]["kind"], "top_percent");
    assert_eq!(r["settings"]["max_decode_steps"], 3);

    fs::write(&cfg, "lw = 4\nunknown_key = 1\n").unwrap();
    assert_eq!(roundattn(&["run", "--config", c, dir]).status.code(), Some(2));
}

#[test]
fn compare_all_against_baseline_has_no_divergence() {
    let tmp = tempfile::tempdir().unwrap();
    write_conversations(tmp.path());
    let out = tmp.path().join("out");
    let args = [
        "compare", "--lw", "3", "--policies", "all,baseline,token", "--out",
        out.to_str().unwrap(), tmp.path().to_str().unwrap(),
    ];
    assert!(roundattn(&args).status.success());
    let csv = fs::read_to_string(out.join("compare.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0][0], "all");
    assert_eq!(rows[0][6], "0");
    assert_eq!(rows[1][0], "baseline");
    for name in ["all", "baseline", "token"] {
        assert!(out.join(format!("costs_{name}.csv")).exists());
    }
}
