use std::path::Path;
use std::time::Duration;

use cryoloop::scenario::Scenario;
use cryoloop::telemetry::{read_csv, to_csv_string, TelemetryFrame};
use cryoloop_service::api::{serve, Created, ServiceConfig, SessionInfo, StateReply};
use cryoloop_service::files::{ActionLog, ACTIONS_FILE, SCENARIO_FILE, TELEMETRY_FILE};
use serde_json::json;

const TWO_EXPERIMENTS: &str = r#"
[plant]
layout = "reference"
experiments = 2

[initial]
from_steady = true
pressure_bar = 23.0
rpm = 21000.0

[initial.heaters_w]
exp1 = 40.0

[outputs]
sample_interval_s = 10.0
"#;

struct Server {
    base: String,
    client: reqwest::Client,
    _runs: tempfile::TempDir,
    runs_dir: std::path::PathBuf,
}

async fn start() -> Server {
    let runs = tempfile::tempdir().unwrap();
    let runs_dir = runs.path().to_path_buf();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let config = ServiceConfig {
        runs_dir: runs_dir.clone(),
        ..Default::default()
    };
    tokio::spawn(serve(listener, config));
    Server {
        base,
        client: reqwest::Client::new(),
        _runs: runs,
        runs_dir,
    }
}

impl Server {
    async fn create(&self, body: serde_json::Value) -> Created {
        let r = self
            .client
            .post(format!("{}/sessions", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        assert_eq!(r.status(), 201, "{}", r.text().await.unwrap());
        r.json().await.unwrap()
    }

    async fn paused(&self) -> Created {
        self.create(json!({ "scenario_toml": TWO_EXPERIMENTS, "paused": true }))
            .await
    }

    async fn act(&self, id: &str, action: serde_json::Value) -> reqwest::Response {
        self.client
            .post(format!("{}/sessions/{id}/actions", self.base))
            .json(&action)
            .send()
            .await
            .unwrap()
    }

    async fn advance(&self, id: &str, seconds: f64) -> StateReply {
        let r = self
            .client
            .post(format!("{}/sessions/{id}/advance", self.base))
            .json(&json!({ "seconds": seconds }))
            .send()
            .await
            .unwrap();
        assert_eq!(r.status(), 200);
        r.json().await.unwrap()
    }

    async fn state(&self, id: &str) -> StateReply {
        self.client
            .get(format!("{}/sessions/{id}/state", self.base))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap()
    }

    async fn text(&self, path: &str) -> String {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        assert_eq!(r.status(), 200);
        r.text().await.unwrap()
    }
}

/// Reads server-sent events until `count` frames have arrived.
async fn read_frames(mut resp: reqwest::Response, count: usize) -> Vec<TelemetryFrame> {
    let mut buf = String::new();
    let mut frames = Vec::new();
    while frames.len() < count {
        let chunk = tokio::time::timeout(Duration::from_secs(20), resp.chunk())
            .await
            .expect("stream stalled")
            .unwrap()
            .expect("stream ended early");
        buf.push_str(std::str::from_utf8(&chunk).unwrap());
        while let Some(end) = buf.find("\n\n") {
            let block: String = buf.drain(..end + 2).collect();
            let mut kind = "";
            let mut data = String::new();
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    kind = if v.trim() == "frame" { "frame" } else { "other" };
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push_str(v.trim_start());
                }
            }
            if kind == "frame" {
                frames.push(serde_json::from_str(&data).unwrap());
            }
        }
    }
    frames
}

#[tokio::test(flavor = "multi_thread")]
async fn two_subscribers_receive_identical_frames() {
    let s = start().await;
    let c = s.paused().await;
    let url = format!("{}/sessions/{}/stream", s.base, c.id);
    let a = s.client.get(&url).send().await.unwrap();
    let b = s.client.get(&url).send().await.unwrap();
    assert_eq!(s.state(&c.id).await.info.subscribers, 2);
    s.advance(&c.id, 60.0).await;
    let (fa, fb) = tokio::join!(read_frames(a, 6), read_frames(b, 6));
    assert_eq!(fa, fb);
    assert_eq!(fa.iter().map(|f| f.seq).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);

    let thinned = s.client.get(format!("{url}?every=3")).send().await.unwrap();
    s.advance(&c.id, 60.0).await;
    let f = read_frames(thinned, 2).await;
    assert_eq!(f.iter().map(|f| f.seq).collect::<Vec<_>>(), vec![9, 12]);
}

#[tokio::test(flavor = "multi_thread")]
async fn top_up_at_the_current_pressure_is_an_acknowledged_no_op() {
    let s = start().await;
    let c = s.paused().await;
    let before = s.state(&c.id).await;
    let r = s.act(&c.id, json!({ "action": "top_up", "pressure_bar": 23.0 })).await;
    assert_eq!(r.status(), 200);
    let ack: serde_json::Value = r.json().await.unwrap();
    assert_eq!(ack["frame"]["events"][0], "top_up 23 bar");
    let after = s.state(&c.id).await;
    assert_eq!(after.helium_kg, before.helium_kg);
    assert_eq!(after.topped_up_kg, 0.0);
    assert_eq!(after.frame.pressure_pa, before.frame.pressure_pa);
}

#[tokio::test(flavor = "multi_thread")]
async fn bad_requests_are_rejected_with_a_reason() {
    let s = start().await;
    let c = s.paused().await;
    let r = s
        .act(
            &c.id,
            json!({ "action": "set_heater", "experiment": 3, "power_w": 5.0 }),
        )
        .await;
    assert_eq!(r.status(), 400);
    let body: serde_json::Value = r.json().await.unwrap();
    assert!(body["error"].as_str().unwrap().contains("exp"), "{body}");

    let r = s.act(&c.id, json!({ "action": "top_up", "pressure_bar": 30.0 })).await;
    assert_eq!(r.status(), 400);
    let r = s.act("nope", json!({ "action": "set_rpm", "rpm": 1000.0 })).await;
    assert_eq!(r.status(), 404);

    let r = s
        .client
        .post(format!("{}/sessions", s.base))
        .json(&json!({ "scenario_toml": "[initial]\nrpm = = 1" }))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);
    assert!(r.text().await.unwrap().contains("line 2"));

    let r = s
        .client
        .post(format!("{}/sessions/{}/control", s.base, c.id))
        .json(&json!({ "time_ratio": 5000.0 }))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);
    assert!(s.state(&c.id).await.info.time_ratio == 1.0);
}

#[tokio::test(flavor = "multi_thread")]
async fn exp2_heater_at_80_w_plateaus_below_100_k() {
    let s = start().await;
    let c = s.paused().await;
    let r = s
        .act(
            &c.id,
            json!({ "action": "set_heater", "experiment": 2, "power_w": 80.0 }),
        )
        .await;
    assert_eq!(r.status(), 200);
    s.advance(&c.id, 2.0 * 3600.0).await;
    let frames = read_csv(s.text(&format!("/sessions/{}/telemetry.csv", c.id)).await.as_bytes()).unwrap();
    let t8: Vec<f64> = frames.iter().map(|f| f.sensor("T8").unwrap()).collect();
    let start = t8[0];
    let end = *t8.last().unwrap();
    let peak = t8.iter().cloned().fold(0.0, f64::max);
    assert!(end > start + 5.0, "outlet should rise: {start} -> {end}");
    assert!(peak < 100.0, "peak {peak}");
    // Plateau: the last half hour moves by well under a kelvin.
    let tail = &t8[t8.len() - 180..];
    let spread = tail.iter().cloned().fold(f64::MIN, f64::max) - tail.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.5, "still moving by {spread} K");
}

#[tokio::test(flavor = "multi_thread")]
async fn closed_session_replays_to_identical_telemetry() {
    let s = start().await;
    let c = s.paused().await;
    s.advance(&c.id, 125.0).await;
    s.act(
        &c.id,
        json!({ "action": "set_heater", "experiment": 2, "power_w": 80.0 }),
    )
    .await;
    s.advance(&c.id, 300.05).await;
    s.act(&c.id, json!({ "action": "set_rpm", "rpm": 15000.0 })).await;
    s.act(
        &c.id,
        json!({ "action": "set_valve", "experiment": 1, "side": "return", "opening": 0.5 }),
    )
    .await;
    s.advance(&c.id, 600.0).await;
    s.act(&c.id, json!({ "action": "top_up", "pressure_bar": 23.0 })).await;
    s.advance(&c.id, 200.0).await;

    let live_csv = s.text(&format!("/sessions/{}/telemetry.csv", c.id)).await;
    let replay = Scenario::parse(&s.text(&format!("/sessions/{}/replay", c.id)).await).unwrap();
    assert_eq!(to_csv_string(&replay.run().unwrap().frames), live_csv);

    let r = s
        .client
        .delete(format!("{}/sessions/{}", s.base, c.id))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 200);
    let dir = s.runs_dir.join(&c.id);
    let stored = |name: &str| std::fs::read_to_string(dir.join(name)).unwrap();
    assert_eq!(stored(TELEMETRY_FILE), live_csv);
    let mut scenario = Scenario::parse(&stored(SCENARIO_FILE)).unwrap();
    ActionLog::parse(&stored(ACTIONS_FILE)).unwrap().apply_to(&mut scenario);
    assert_eq!(to_csv_string(&scenario.run().unwrap().frames), live_csv);

    assert_eq!(s.state_status(&c.id).await, 404);
    assert!(Path::new(&dir).is_dir());
}

impl Server {
    async fn state_status(&self, id: &str) -> u16 {
        self.client
            .get(format!("{}/sessions/{id}/state", self.base))
            .send()
            .await
            .unwrap()
            .status()
            .as_u16()
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn running_session_keeps_pace_with_its_time_ratio() {
    let s = start().await;
    let c = s
        .create(json!({ "scenario_toml": TWO_EXPERIMENTS, "time_ratio": 1000.0 }))
        .await;
    tokio::time::sleep(Duration::from_millis(600)).await;
    let clock = s.state(&c.id).await.info.clock_s;
    assert!(clock > 200.0, "clock only reached {clock} s");

    let r = s
        .client
        .post(format!("{}/sessions/{}/control", s.base, c.id))
        .json(&json!({ "paused": true }))
        .send()
        .await
        .unwrap();
    let info: SessionInfo = r.json().await.unwrap();
    let held = info.clock_s;
    tokio::time::sleep(Duration::from_millis(200)).await;
    assert_eq!(s.state(&c.id).await.info.clock_s, held);

    let list: Vec<SessionInfo> = s
        .client
        .get(format!("{}/sessions", s.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0].id, c.id);
}
