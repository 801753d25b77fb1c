use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;
use tungstenite::Message;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lineguard"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn outcome(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.lines().last().expect("outcome line")).expect("outcome is json")
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn log_files(dir: &Path) -> BTreeMap<String, String> {
    [
        "telemetry.csv",
        "commands.jsonl",
        "decisions.jsonl",
        "events.jsonl",
        "mpc.csv",
        "snapshots.jsonl",
        "bus_stats.json",
        "metrics.json",
    ]
    .iter()
    .map(|f| (f.to_string(), std::fs::read_to_string(dir.join(f)).unwrap()))
    .collect()
}

#[test]
fn inspection_reference_completes_with_separation() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--scenario", scenario("inspection_ref.json").to_str().unwrap(), "--seed", "7", "--duration", "300"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let m = read_json(dir.path().join("metrics.json"));
    assert!(m["min_pairwise_distance"].as_f64().unwrap() >= 1.0);
    assert_eq!(m["mission_complete"], true);
    assert_eq!(m["region_completion"].as_object().unwrap().len(), 6);
}

#[test]
fn unreachable_deadline_reports_planner_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["--scenario", scenario("inspection_infeasible.json").to_str().unwrap()]).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let o = outcome(&out);
    assert_eq!(o["reason"], "planner-failure");
    assert!(o["detail"]["node"].is_u64());
    assert_eq!(o["detail"]["label"], "visit uav 0 region 3");
    assert_eq!(read_json(dir.path().join("outcome.json"))["reason"], "planner-failure");
}

#[test]
fn two_hundredths_of_a_second_is_two_master_steps() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["--scenario", scenario("empty.json").to_str().unwrap(), "--duration", "0.02"]).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(read_json(dir.path().join("metrics.json"))["master_steps"], 2);
    let rows = std::fs::read_to_string(dir.path().join("telemetry.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 2 * 2);
}

#[test]
fn configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let empty_fleet = dir.path().join("fleet.json");
    std::fs::write(&empty_fleet, "{\n  \"fleet\": [],\n  \"separation_min\": 1.0\n}\n").unwrap();
    let out = bin().arg("--scenario").arg(&empty_fleet).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let o = outcome(&out);
    assert_eq!(o["reason"], "scenario-invalid");
    assert_eq!(o["detail"][0]["rule"], "fleet non-empty");
    assert_eq!(o["detail"][0]["line"], 2);

    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{\n  \"fleet\": [,]\n}\n").unwrap();
    let out = bin().arg("--scenario").arg(&broken).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(outcome(&out)["reason"], "scenario-parse-error");
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = bin().args(["--scenario", "/nonexistent.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["--scenario", scenario("empty.json").to_str().unwrap(), "--duration", "-1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn snapshots_are_spaced_a_tenth_of_a_second() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["--scenario", scenario("safety_ref.json").to_str().unwrap(), "--duration", "3"]).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.code().is_some());
    let text = std::fs::read_to_string(dir.path().join("snapshots.jsonl")).unwrap();
    let ticks: Vec<i64> = text.lines().map(|l| (serde_json::from_str::<Value>(l).unwrap()["time"].as_f64().unwrap() * 100.0).round() as i64).collect();
    assert_eq!(ticks.len(), 30);
    assert!(ticks.windows(2).all(|w| w[1] - w[0] == 10), "{ticks:?}");
}

struct Server {
    child: Child,
    addr: String,
}

fn start_server(scenario_path: &Path, out: &Path, duration: &str, speed: &str) -> Server {
    let mut child = bin()
        .arg("--scenario")
        .arg(scenario_path)
        .args(["--duration", duration, "--serve=0", "--speed", speed])
        .arg("--out")
        .arg(out)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut first = String::new();
    BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut first).unwrap();
    let v: Value = serde_json::from_str(&first).expect("listening line");
    Server { child, addr: v["listening"].as_str().unwrap().to_string() }
}

fn formation_radii(snapshot: &Value) -> Vec<f64> {
    let w = &snapshot["workers"][0]["position"];
    let (wx, wy, wz) = (w["x"].as_f64().unwrap(), w["y"].as_f64().unwrap(), w["z"].as_f64().unwrap());
    snapshot["vehicles"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| {
            let p = &v["position"];
            let d = [p["x"].as_f64().unwrap() - wx, p["y"].as_f64().unwrap() - wy, p["z"].as_f64().unwrap() - wz];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .collect()
}

/// Live session: a malformed payload is rejected without ending the session,
/// set_formation is acked and the formation widens to 8 m; the resulting log
/// equals a headless run with the same command as a scenario event.
#[test]
fn serve_session_matches_scripted_headless_run() {
    let dir = tempfile::tempdir().unwrap();
    let serve_out = dir.path().join("serve");
    let server = start_server(&scenario("safety_ref.json"), &serve_out, "27", "4");
    let (mut ws, _) = tungstenite::connect(format!("ws://{}", server.addr)).unwrap();

    let mut sent = false;
    let mut acks = Vec::new();
    let mut snapshots = Vec::new();
    let mut seqs = Vec::new();
    loop {
        let msg = match ws.read() {
            Ok(Message::Text(t)) => serde_json::from_str::<Value>(t.as_str()).unwrap(),
            Ok(_) => continue,
            Err(_) => break,
        };
        seqs.push(msg["seq"].as_u64().unwrap());
        match msg["type"].as_str().unwrap() {
            "ack" => acks.push(msg),
            "snapshot" => {
                let t = msg["snapshot"]["time"].as_f64().unwrap();
                if snapshots.is_empty() {
                    assert!(msg["snapshot"]["scene"].is_object(), "first snapshot carries the scene");
                }
                if !sent && t >= 10.3 {
                    ws.send(Message::text(r#"{"type":"command","seq":1,"command":{"kind":"set_formation","radius":8}}"#)).unwrap();
                    ws.send(Message::text(r#"{"type":"command","seq":2,"command":{"kind":"set_formation","distance":8}}"#)).unwrap();
                    sent = true;
                }
                snapshots.push(msg["snapshot"].clone());
            }
            other => panic!("unexpected message type {other}"),
        }
    }
    let status = server.child.wait_with_output().unwrap().status;
    assert!(status.code().is_some());
    assert!(seqs.windows(2).all(|w| w[1] > w[0]), "server sequence numbers increase");

    assert_eq!(acks.len(), 2);
    assert_eq!((acks[0]["status"].as_str(), acks[0]["reason"].as_str()), (Some("rejected"), Some("schema violation")));
    assert_eq!((acks[1]["status"].as_str(), acks[1]["command_seq"].as_u64()), (Some("accepted"), Some(2)));

    let t_cmd = 10.3;
    let reached = snapshots.iter().find(|s| {
        let t = s["time"].as_f64().unwrap();
        t > t_cmd && formation_radii(s).iter().all(|r| (r - 8.0).abs() <= 0.3)
    });
    let t_reach = reached.expect("formation reaches 8 m")["time"].as_f64().unwrap();
    assert!(t_reach <= t_cmd + 15.0, "reached at {t_reach}");

    // headless replay with the command as an event in the same manager interval
    let mut sc: Value = serde_json::from_str(&std::fs::read_to_string(scenario("safety_ref.json")).unwrap()).unwrap();
    sc["events"].as_array_mut().unwrap().push(serde_json::json!({
        "time": 10.5, "kind": "operator", "command": {"kind": "set_formation", "distance": 8.0}
    }));
    let scripted = dir.path().join("scripted.json");
    std::fs::write(&scripted, serde_json::to_string_pretty(&sc).unwrap()).unwrap();
    let headless_out = dir.path().join("headless");
    let out = bin().arg("--scenario").arg(&scripted).args(["--duration", "27"]).arg("--out").arg(&headless_out).output().unwrap();
    assert_eq!(out.status.code(), status.code());
    assert_eq!(log_files(&serve_out), log_files(&headless_out));
    let stats = read_json(serve_out.join("gateway_stats.json"));
    assert_eq!(stats["commands_accepted"], 1);
    assert_eq!(stats["commands_rejected"], 1);
}

#[test]
fn serving_without_clients_leaves_the_run_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let server = start_server(&scenario("safety_ref.json"), &dir.path().join("serve"), "8", "50");
    let served = server.child.wait_with_output().unwrap();
    let headless = bin()
        .args(["--scenario", scenario("safety_ref.json").to_str().unwrap(), "--duration", "8"])
        .arg("--out")
        .arg(dir.path().join("headless"))
        .output()
        .unwrap();
    assert_eq!(served.status.code(), headless.status.code());
    assert_eq!(log_files(&dir.path().join("serve")), log_files(&dir.path().join("headless")));
    assert_eq!(read_json(dir.path().join("serve/gateway_stats.json"))["snapshots_produced"], 80);
}

#[test]
fn busy_port_is_a_configuration_error() {
    let holder = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = holder.local_addr().unwrap().port();
    let out = bin()
        .args(["--scenario", scenario("empty.json").to_str().unwrap(), "--duration", "1", &format!("--serve={port}")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(outcome(&out)["reason"], "port-busy");
}
