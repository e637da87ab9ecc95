//! Scripted WebSocket client against a live server.

use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use spiraltwin::kinematics::{DatasetConfig, ReachSampling, RigidArm, RigidReachConfig, TrainConfig};
use spiraltwin::teleop::{build_assets, AssetBuildConfig, TeleopConfig, TeleopSession};
use spiraltwin::{build_arm, ArmGeometry, ArmParameters};
use spiraltwin_server::{spawn, ServerConfig};
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::Message;

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

fn session() -> TeleopSession {
    let g = ArmGeometry::desk();
    let model = build_arm(g.clone(), ArmParameters::reference(&g)).unwrap();
    let cfg = AssetBuildConfig {
        dataset: DatasetConfig { samples: 300, ..DatasetConfig::default() },
        train: TrainConfig { epochs: 5, ..TrainConfig::default() },
        soft_sampling: ReachSampling::with_samples(100),
        rigid_reach: RigidReachConfig { draws: 1, ik_grid: true, voxel_size: 0.04, ..RigidReachConfig::default() },
    };
    let assets = build_assets(model.clone(), model, RigidArm::default(), &cfg).unwrap();
    TeleopSession::new(assets, TeleopConfig { curl_s: 0.5, delay_s: 0.1, ..TeleopConfig::default() }).unwrap()
}

async fn recv(ws: &mut Ws) -> Value {
    loop {
        let msg =
            tokio::time::timeout(Duration::from_secs(30), ws.next()).await.expect("message in time").unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

async fn recv_until(ws: &mut Ws, pred: impl Fn(&Value) -> bool) -> (Vec<Value>, Value) {
    let mut seen = Vec::new();
    loop {
        let v = recv(ws).await;
        if pred(&v) {
            return (seen, v);
        }
        seen.push(v);
    }
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::Text(v.to_string())).await.unwrap();
}

fn is_state(v: &Value, phase: &str) -> bool {
    v["type"] == "state" && v["phase"] == phase
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn handshake_commands_and_execution_stream() {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let server = spawn(listener, session(), &ServerConfig { port: 0, playback_rate: 20.0 }).unwrap();
    let url = format!("ws://{}", server.local_addr);
    let (mut ws, _) = tokio_tungstenite::connect_async(&url).await.unwrap();

    let first = recv(&mut ws).await;
    assert!(is_state(&first, "idle"), "{first}");
    assert_eq!(first["rigid_joints"].as_array().unwrap().len(), 7);
    assert_eq!(first["soft_segments"].as_array().unwrap().len(), 8);
    assert_eq!(first["soft_segments"][0]["q"].as_array().unwrap().len(), 4);
    let mut kinds = Vec::new();
    for _ in 0..4 {
        let m = recv(&mut ws).await;
        assert_eq!(m["type"], "reach_map");
        kinds.push(m["kind"].as_str().unwrap().to_string());
    }
    assert_eq!(kinds, ["soft", "soft", "soft", "rigid"]);

    send(&mut ws, json!({"type": "warp"})).await;
    let e = recv(&mut ws).await;
    assert_eq!((e["type"].as_str(), e["code"].as_str()), (Some("error"), Some("bad_message")));
    send(&mut ws, json!({"type": "confirm"})).await;
    assert_eq!(recv(&mut ws).await["code"], "invalid_phase");

    let mount = [0.45, 0.0, 0.6];
    let ray = |hand: &str, p: [f64; 3]| json!({"type": "set_ray", "hand": hand, "origin": [p[0], p[1], p[2] + 1.0], "direction": [0, 0, -1], "length": 1.0, "note": "ignored"});
    send(&mut ws, ray("left", mount)).await;
    assert!(is_state(&recv(&mut ws).await, "idle"));
    send(&mut ws, ray("right", [0.45, 0.0, 0.6 - 0.507])).await;
    assert!(is_state(&recv(&mut ws).await, "target_set"));

    send(&mut ws, json!({"type": "preview"})).await;
    let m = recv(&mut ws).await;
    assert!(is_state(&m, "previewing"), "{m}");
    let (between, ready) = recv_until(&mut ws, |v| v["type"] == "state").await;
    assert!(is_state(&ready, "preview_ready"), "{ready}");
    let types: Vec<&str> = between.iter().map(|v| v["type"].as_str().unwrap()).collect();
    assert_eq!(types, ["plan", "preview_trajectory", "verdict"]);
    assert_eq!(between[2]["reason"], "no_object");

    send(&mut ws, json!({"type": "confirm"})).await;
    assert!(is_state(&recv(&mut ws).await, "executing"));
    let (frames, done) = recv_until(&mut ws, |v| is_state(v, "done")).await;
    assert!(frames.len() > 10);
    let times: Vec<f64> = frames.iter().map(|v| v["sim_time"].as_f64().unwrap()).collect();
    assert!(times.windows(2).all(|w| w[1] > w[0]));
    assert!(done["sim_time"].as_f64().unwrap() >= *times.last().unwrap());
    let report = recv(&mut ws).await;
    assert_eq!(report["type"], "execution_report");
    assert_eq!(report["e_internal_m"], 0.0);

    send(&mut ws, json!({"type": "reset"})).await;
    assert!(is_state(&recv(&mut ws).await, "idle"));
    server.shutdown().await;
}
