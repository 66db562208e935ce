//! The binary end to end: record, quantize, emulate, run, evaluate, bench.

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Duration;

use neuroedge::emulator::{run_emulator, EmulatorConfig, ScriptStep, SessionScript};
use neuroedge::nn::{load_model, save_model, AnyModel, Model};
use neuroedge::runtime::{LatencyReport, PredictionLog};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neuroedge"))
}

fn ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_script(path: &Path, secs: f64) -> SessionScript {
    let s = SessionScript::new(
        (0..7)
            .map(|c| ScriptStep {
                class: c,
                duration_s: secs,
            })
            .collect(),
    )
    .unwrap();
    std::fs::write(path, serde_json::to_string(&s).unwrap()).unwrap();
    s
}

#[test]
fn record_quantize_run_evaluate_bench() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let script = write_script(&d.join("script.json"), 0.5);

    ok(bin()
        .args(["record", "--seed", "3"])
        .arg("--out")
        .arg(d.join("rec.csv"))
        .arg("--script")
        .arg(d.join("script.json")));
    let header = std::fs::read_to_string(d.join("rec.csv")).unwrap();
    assert!(header.starts_with("time_s,label,ch000,"));

    save_model(&AnyModel::Float(Model::reference_random(1)), &d.join("f.nemw")).unwrap();
    ok(bin()
        .arg("quantize")
        .arg("--model")
        .arg(d.join("f.nemw"))
        .arg("--calib")
        .arg(d.join("rec.csv"))
        .arg("--out")
        .arg(d.join("q.nemw")));
    assert!(load_model(&d.join("q.nemw")).unwrap().is_int8());

    let run_script = SessionScript::new(
        (0..7)
            .map(|c| ScriptStep {
                class: c,
                duration_s: 1.0,
            })
            .collect(),
    )
    .unwrap();
    let emu = run_emulator(EmulatorConfig::synthetic("127.0.0.1:0", run_script, 3)).unwrap();
    let stdout = ok(bin()
        .args(["run", "--int8", "--duration", "2", "--link", "socket"])
        .arg("--endpoint")
        .arg(emu.local_addr().to_string())
        .arg("--model")
        .arg(d.join("q.nemw"))
        .arg("--log")
        .arg(d.join("log.csv"))
        .arg("--report")
        .arg(d.join("report.json")));
    assert!(stdout.contains("throughput"));
    let log = PredictionLog::load(&d.join("log.csv")).unwrap();
    assert_eq!(log.rows.len(), 51);
    let rep = LatencyReport::load(&d.join("report.json")).unwrap();
    assert_eq!(rep.windows, 51);

    // int8 model without --int8 is refused
    let out = bin()
        .args(["run", "--duration", "1"])
        .arg("--endpoint")
        .arg(emu.local_addr().to_string())
        .arg("--model")
        .arg(d.join("q.nemw"))
        .arg("--log")
        .arg(d.join("log2.csv"))
        .arg("--report")
        .arg(d.join("r2.json"))
        .output()
        .unwrap();
    assert!(!out.status.success());

    let cues: Vec<serde_json::Value> = script
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| serde_json::json!({"time_s": i as f64 * s.duration_s, "class": s.class}))
        .collect();
    std::fs::write(d.join("sched.json"), serde_json::to_string(&cues).unwrap()).unwrap();
    let eval = ok(bin()
        .args(["evaluate", "--json", "--offset", "0"])
        .arg("--log")
        .arg(d.join("log.csv"))
        .arg("--schedule")
        .arg(d.join("sched.json")));
    let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(
        v["windows_evaluated"].as_u64().unwrap() + v["windows_excluded"].as_u64().unwrap(),
        51
    );
    assert_eq!(v["confusion"].as_array().unwrap().len(), 7);

    let bench = ok(bin()
        .args(["bench", "--json"])
        .arg("--report")
        .arg(d.join("report.json")));
    let v: serde_json::Value = serde_json::from_str(&bench).unwrap();
    assert_eq!(v["windows"], 51);
    assert!(v["end_to_end"]["p95_ms"].as_f64().unwrap() > 0.0);
    assert!(ok(bin().arg("bench").arg("--report").arg(d.join("report.json"))).contains("end_to_end"));
}

#[test]
fn emulate_serves_until_interrupted() {
    let dir = tempfile::tempdir().unwrap();
    write_script(&dir.path().join("s.json"), 1.0);
    let mut child = bin()
        .args(["emulate", "--listen", "127.0.0.1:0", "--seed", "1", "--unpaced"])
        .arg("--script")
        .arg(dir.path().join("s.json"))
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();
    let cfg = neuroedge::bridge::BridgeConfig {
        endpoint: addr,
        ..Default::default()
    };
    let mut s = neuroedge::bridge::start_session(&cfg).unwrap();
    assert_eq!(s.next_window(&|| false).unwrap().unwrap().first_seq, 1000);
    child.kill().unwrap();
    child.wait().unwrap();
    std::thread::sleep(Duration::from_millis(10));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = bin()
        .args(["bench", "--report", "/nonexistent/report.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = bin().args(["run", "--endpoint", "x"]).output().unwrap();
    assert!(!out.status.success());
}
