//! WebSocket front end for a single [`TeleopSession`].
//!
//! The session lives on one worker thread that takes commands from a single
//! queue in arrival order and paces execution frames at the configured rate.
//! Every server message is sent to all connected clients; a newly connected
//! client first receives a state snapshot, then the reachability maps.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::mpsc as std_mpsc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use spiraltwin::teleop::{ErrorCode, ServerMessage, TeleopSession, WireError};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio_tungstenite::tungstenite::Message;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub port: u16,
    /// Execution playback speed relative to real time.
    pub playback_rate: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { port: 8765, playback_rate: 1.0 }
    }
}

enum Command {
    Connect(u64, mpsc::UnboundedSender<String>),
    Text(String),
    Disconnect(u64),
    Shutdown,
}

/// Owns the session and fans its messages out to clients.
struct Worker {
    session: TeleopSession,
    clients: HashMap<u64, mpsc::UnboundedSender<String>>,
    period: Duration,
}

impl Worker {
    fn broadcast(&mut self, msgs: Vec<ServerMessage>) {
        for m in msgs {
            let text = m.to_json();
            self.clients.retain(|_, tx| tx.send(text.clone()).is_ok());
        }
    }

    fn run(mut self, rx: std_mpsc::Receiver<Command>) {
        let mut next_frame: Option<Instant> = None;
        loop {
            let cmd = match next_frame {
                Some(due) => match rx.recv_timeout(due.saturating_duration_since(Instant::now())) {
                    Ok(c) => Some(c),
                    Err(std_mpsc::RecvTimeoutError::Timeout) => None,
                    Err(std_mpsc::RecvTimeoutError::Disconnected) => return,
                },
                None => match rx.recv() {
                    Ok(c) => Some(c),
                    Err(_) => return,
                },
            };
            match cmd {
                Some(Command::Connect(id, tx)) => {
                    let mut first = vec![self.session.state_message()];
                    first.extend(self.session.reach_map_messages());
                    if first.into_iter().all(|m| tx.send(m.to_json()).is_ok()) {
                        self.clients.insert(id, tx);
                    }
                }
                Some(Command::Disconnect(id)) => {
                    self.clients.remove(&id);
                }
                Some(Command::Text(text)) => {
                    let out = self.session.handle_text(&text);
                    self.broadcast(out);
                }
                Some(Command::Shutdown) => return,
                None => {
                    let out = self.session.stream_next();
                    self.broadcast(out);
                }
            }
            next_frame = match (self.session.is_streaming(), next_frame) {
                (false, _) => None,
                (true, None) => Some(Instant::now() + self.period),
                (true, Some(due)) if Instant::now() >= due => Some(due + self.period),
                (true, due) => due,
            };
        }
    }
}

/// A running server. Dropping the handle does not stop it; call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    pub local_addr: SocketAddr,
    commands: std_mpsc::Sender<Command>,
    accept: tokio::task::JoinHandle<()>,
    worker: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub async fn shutdown(mut self) {
        self.accept.abort();
        let _ = self.commands.send(Command::Shutdown);
        if let Some(w) = self.worker.take() {
            let _ = tokio::task::spawn_blocking(move || w.join()).await;
        }
    }

    /// Waits until the accept loop ends, which only happens on I/O failure.
    pub async fn wait(self) {
        let _ = self.accept.await;
    }
}

/// Serves `session` on an already bound listener.
pub fn spawn(listener: TcpListener, session: TeleopSession, cfg: &ServerConfig) -> std::io::Result<ServerHandle> {
    if !(cfg.playback_rate > 0.0 && cfg.playback_rate.is_finite()) {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "playback_rate must be positive"));
    }
    let local_addr = listener.local_addr()?;
    let period = Duration::from_secs_f64(1.0 / (session.config().stream_hz * cfg.playback_rate));
    let (tx, rx) = std_mpsc::channel();
    let worker = Worker { session, clients: HashMap::new(), period };
    let worker = std::thread::Builder::new().name("teleop-session".into()).spawn(move || worker.run(rx))?;
    let commands = tx.clone();
    let accept = tokio::spawn(async move {
        let mut next_id = 0u64;
        loop {
            let Ok((stream, peer)) = listener.accept().await else {
                log::error!("accept failed");
                return;
            };
            next_id += 1;
            tokio::spawn(connection(stream, peer, next_id, tx.clone()));
        }
    });
    Ok(ServerHandle { local_addr, commands, accept, worker: Some(worker) })
}

/// Binds `0.0.0.0:port` and serves until the process ends.
pub async fn serve(session: TeleopSession, cfg: &ServerConfig) -> std::io::Result<()> {
    let listener = TcpListener::bind(("0.0.0.0", cfg.port)).await?;
    let handle = spawn(listener, session, cfg)?;
    log::info!("teleop server listening on {}", handle.local_addr);
    handle.wait().await;
    Ok(())
}

async fn connection(stream: TcpStream, peer: SocketAddr, id: u64, commands: std_mpsc::Sender<Command>) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("{peer}: handshake failed: {e}");
            return;
        }
    };
    log::info!("{peer}: connected");
    let (mut sink, mut source) = ws.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    if commands.send(Command::Connect(id, tx.clone())).is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        while let Some(text) = rx.recv().await {
            if sink.send(Message::Text(text)).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    while let Some(msg) = source.next().await {
        match msg {
            Ok(Message::Text(text)) => {
                if commands.send(Command::Text(text)).is_err() {
                    break;
                }
            }
            Ok(Message::Binary(_)) => {
                let e = WireError::new(ErrorCode::BadMessage, "binary frames are not supported");
                let _ = tx.send(ServerMessage::error(&e).to_json());
            }
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => {}
        }
    }
    let _ = commands.send(Command::Disconnect(id));
    drop(tx);
    let _ = writer.await;
    log::info!("{peer}: disconnected");
}
