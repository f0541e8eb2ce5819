//! Operator session over a WebSocket.
//!
//! The training loop runs on the caller's thread. An acceptor thread owns
//! the socket of the (single) connected operator: it forwards outgoing JSON
//! text frames and files incoming commands into a mailbox that the loop
//! drains exactly once per step boundary. A new connection first receives
//! `scene_init` and the latest `state`, so a client can rebuild its view at
//! any time.
//!
//! If the operator disconnects during a correction the loop waits for a
//! reconnect; after `disconnect_timeout_s` the attempt is discarded.

use std::collections::VecDeque;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parkcil_core::env::{Mode, RewardBreakdown, TerminationStatus};
use parkcil_core::geometry::{Point, Polygon, Pose2D};
use parkcil_core::scheduler::{
    EpisodeOutcome, EpisodeReport, Intervenor, Observer, OperatorEvent, Phase, StepContext, StepRecord,
};
use parkcil_core::vehicle::{Action, VehicleParams};
use serde::{Deserialize, Serialize};
use tungstenite::Message;

use crate::config::TrainConfig;
use crate::scenario::Scenario;
use crate::stats::LossStats;
use crate::train::{run_training_with, TrainSummary};
use crate::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub bind: String,
    /// Minimum wall-clock time per step; 0 runs unthrottled.
    pub step_period_ms: u64,
    pub disconnect_timeout_s: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8765".into(),
            step_period_ms: 100,
            disconnect_timeout_s: 120.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Control {
    /// Normalized steering in `[-1, 1]`.
    pub steer: f64,
    /// Normalized speed in `[-1, 1]`.
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedPoints {
    pub name: String,
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotInfo {
    pub name: String,
    pub points: Vec<[f64; 2]>,
    pub heading: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleDims {
    pub length: f64,
    pub width: f64,
    pub wheelbase: f64,
    pub rear_overhang: f64,
    pub max_steer: f64,
    pub max_speed: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferSizes {
    pub rl: usize,
    pub human: usize,
    pub regions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    SceneInit {
        boundary: Vec<[f64; 2]>,
        obstacles: Vec<NamedPoints>,
        slots: Vec<SlotInfo>,
        vehicle: VehicleDims,
    },
    State {
        episode: u64,
        step: u32,
        pose: Pose2D,
        /// Last command, normalized like `control`.
        last_action: Control,
        mode: Mode,
        phase: Phase,
        reward: f64,
        reward_breakdown: RewardBreakdown,
        status: Option<TerminationStatus>,
        buffer_sizes: BufferSizes,
        retries: u32,
    },
    Metrics {
        episode: u64,
        losses: Option<LossStats>,
        alpha: Option<f64>,
        /// Autonomous success rate over the session so far, percent.
        psr: f64,
    },
    /// A command the scheduler did not accept in the reported phase.
    Rejected {
        command: String,
        phase: Phase,
        mode: Mode,
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Control { steer: f64, speed: f64 },
    TakeControl,
    ReleaseToRl,
    HandBack,
    Retry,
    Discard,
    Pause,
    Resume,
}

impl ClientMessage {
    fn event(&self) -> Option<OperatorEvent> {
        Some(match self {
            ClientMessage::TakeControl => OperatorEvent::TakeControl,
            ClientMessage::ReleaseToRl => OperatorEvent::ReleaseToRl,
            ClientMessage::HandBack => OperatorEvent::HandBack,
            ClientMessage::Retry => OperatorEvent::Retry,
            ClientMessage::Discard => OperatorEvent::Discard,
            _ => return None,
        })
    }
}

fn event_name(e: OperatorEvent) -> &'static str {
    match e {
        OperatorEvent::TakeControl => "take_control",
        OperatorEvent::ReleaseToRl => "release_to_rl",
        OperatorEvent::HandBack => "hand_back",
        OperatorEvent::Retry => "retry",
        OperatorEvent::Discard => "discard",
    }
}

fn points(p: &Polygon) -> Vec<[f64; 2]> {
    p.vertices().iter().map(|v: &Point| [v.x, v.y]).collect()
}

pub fn scene_init(scenario: &Scenario) -> ServerMessage {
    let s = &scenario.scene;
    let v = &scenario.vehicle;
    ServerMessage::SceneInit {
        boundary: points(&s.boundary),
        obstacles: s
            .obstacles
            .iter()
            .map(|o| NamedPoints {
                name: o.name.clone(),
                points: points(&o.polygon),
            })
            .collect(),
        slots: s
            .slots
            .iter()
            .map(|sl| SlotInfo {
                name: sl.name.clone(),
                points: points(&sl.polygon),
                heading: sl.heading,
            })
            .collect(),
        vehicle: VehicleDims {
            length: v.length,
            width: v.width,
            wheelbase: v.wheelbase,
            rear_overhang: v.rear_overhang,
            max_steer: v.max_steer,
            max_speed: v.max_speed,
        },
    }
}

#[derive(Debug)]
struct Mailbox {
    events: VecDeque<OperatorEvent>,
    control: Control,
    paused: bool,
    connected: bool,
    disconnected_at: Option<Instant>,
}

struct Shared {
    mailbox: Mutex<Mailbox>,
    wake: Condvar,
    outbox: Mutex<Option<Sender<String>>>,
    scene_init: String,
    last_state: Mutex<Option<String>>,
    buffers: Mutex<BufferSizes>,
    /// Phase and mode of the last published state.
    current: Mutex<(Phase, Mode)>,
    stop: Arc<AtomicBool>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Shared {
    fn send(&self, msg: &ServerMessage) {
        let text = serde_json::to_string(msg).expect("server messages serialize");
        if let ServerMessage::State { phase, mode, .. } = msg {
            *lock(&self.current) = (*phase, *mode);
            *lock(&self.last_state) = Some(text.clone());
        }
        if let Some(tx) = lock(&self.outbox).as_ref() {
            let _ = tx.send(text);
        }
    }

    fn stopping(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }
}

const POLL: Duration = Duration::from_millis(10);

/// A bound listener plus its acceptor thread.
pub struct SessionServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
    config: SessionConfig,
    vehicle: VehicleParams,
}

impl SessionServer {
    /// Binds the listener. Setting `stop` ends the acceptor and makes the
    /// intervenor discard any open correction.
    pub fn bind(config: &SessionConfig, scenario: &Scenario, stop: Arc<AtomicBool>) -> Result<Self, HarnessError> {
        let listener = TcpListener::bind(&config.bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            mailbox: Mutex::new(Mailbox {
                events: VecDeque::new(),
                control: Control { steer: 0.0, speed: 0.0 },
                paused: false,
                connected: false,
                disconnected_at: None,
            }),
            wake: Condvar::new(),
            outbox: Mutex::new(None),
            scene_init: serde_json::to_string(&scene_init(scenario))?,
            last_state: Mutex::new(None),
            buffers: Mutex::new(BufferSizes { rl: 0, human: 0, regions: 0 }),
            current: Mutex::new((Phase::Autonomous, Mode::Rl)),
            stop,
        });
        let s = shared.clone();
        let acceptor = std::thread::Builder::new()
            .name("session-acceptor".into())
            .spawn(move || accept_loop(listener, s))?;
        Ok(Self {
            addr,
            shared,
            acceptor: Some(acceptor),
            config: config.clone(),
            vehicle: scenario.vehicle,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until an operator is connected or the server is stopped.
    pub fn wait_for_client(&self) -> bool {
        let mut mb = lock(&self.shared.mailbox);
        loop {
            if mb.connected {
                return true;
            }
            if self.shared.stopping() {
                return false;
            }
            mb = self.shared.wake.wait_timeout(mb, POLL).unwrap_or_else(|e| e.into_inner()).0;
        }
    }

    pub fn intervenor(&self) -> SessionIntervenor {
        SessionIntervenor {
            shared: self.shared.clone(),
            vehicle: self.vehicle,
            period: Duration::from_millis(self.config.step_period_ms),
            timeout: Duration::from_secs_f64(self.config.disconnect_timeout_s.max(0.0)),
            last_step: None,
        }
    }

    pub fn observer(&self) -> SessionObserver {
        SessionObserver {
            shared: self.shared.clone(),
            vehicle: self.vehicle,
            episodes: 0,
            arrived: 0,
        }
    }

    pub fn shutdown(mut self) {
        self.stop_acceptor();
    }

    fn stop_acceptor(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.wake.notify_all();
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for SessionServer {
    fn drop(&mut self) {
        self.stop_acceptor();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.stopping() {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("operator connected from {peer}");
                if let Err(e) = serve_client(stream, &shared) {
                    log::warn!("operator connection ended: {e}");
                }
                let mut mb = lock(&shared.mailbox);
                *lock(&shared.outbox) = None;
                mb.connected = false;
                mb.disconnected_at = Some(Instant::now());
                shared.wake.notify_all();
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(POLL);
            }
        }
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io)
        if matches!(io.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut))
}

fn serve_client(stream: TcpStream, shared: &Shared) -> Result<(), HarnessError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| HarnessError::Session(e.to_string()))?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let (tx, rx): (Sender<String>, Receiver<String>) = mpsc::channel();
    let ws_err = |e: tungstenite::Error| HarnessError::Session(e.to_string());
    {
        // Register under the mailbox lock so no state message slips between
        // the snapshot below and the new outbox.
        let mut mb = lock(&shared.mailbox);
        ws.send(Message::text(shared.scene_init.clone())).map_err(ws_err)?;
        if let Some(s) = lock(&shared.last_state).clone() {
            ws.send(Message::text(s)).map_err(ws_err)?;
        }
        *lock(&shared.outbox) = Some(tx.clone());
        mb.connected = true;
        mb.disconnected_at = None;
        shared.wake.notify_all();
    }
    loop {
        if shared.stopping() {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        while let Ok(text) = rx.try_recv() {
            ws.send(Message::text(text)).map_err(ws_err)?;
        }
        match ws.read() {
            Ok(Message::Text(t)) => handle_client_text(t.as_str(), shared, &tx),
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(tungstenite::Error::ConnectionClosed) => return Ok(()),
            Err(e) => return Err(ws_err(e)),
        }
    }
}

fn handle_client_text(text: &str, shared: &Shared, tx: &Sender<String>) {
    let reject = |command: &str, reason: String| {
        let (phase, mode) = *lock(&shared.current);
        let msg = ServerMessage::Rejected {
            command: command.to_string(),
            phase,
            mode,
            reason,
        };
        let _ = tx.send(serde_json::to_string(&msg).expect("server messages serialize"));
    };
    let msg: ClientMessage = match serde_json::from_str(text) {
        Ok(m) => m,
        Err(e) => return reject("unknown", format!("unparseable message: {e}")),
    };
    let mut mb = lock(&shared.mailbox);
    match msg {
        ClientMessage::Control { steer, speed } => {
            if steer.is_finite() && speed.is_finite() {
                mb.control = Control {
                    steer: steer.clamp(-1.0, 1.0),
                    speed: speed.clamp(-1.0, 1.0),
                };
            } else {
                drop(mb);
                reject("control", "steer and speed must be finite".into());
                return;
            }
        }
        ClientMessage::Pause => mb.paused = true,
        ClientMessage::Resume => mb.paused = false,
        other => mb.events.push_back(other.event().expect("remaining kinds are operator events")),
    }
    shared.wake.notify_all();
}

fn control_of(a: Action, v: &VehicleParams) -> Control {
    let n = a.normalized(v);
    Control {
        steer: n[0],
        speed: n[1],
    }
}

/// The operator as seen by the scheduler.
pub struct SessionIntervenor {
    shared: Arc<Shared>,
    vehicle: VehicleParams,
    period: Duration,
    timeout: Duration,
    last_step: Option<Instant>,
}

impl SessionIntervenor {
    fn pace(&mut self) {
        if let Some(t) = self.last_step {
            let elapsed = t.elapsed();
            if elapsed < self.period {
                std::thread::sleep(self.period - elapsed);
            }
        }
        self.last_step = Some(Instant::now());
    }

    fn disconnect_expired(&self, mb: &Mailbox) -> bool {
        !mb.connected && mb.disconnected_at.is_none_or(|t| t.elapsed() >= self.timeout)
    }

    fn announce(&self, ctx: &StepContext<'_>) {
        let Some(st) = ctx.env.state() else { return };
        let buffers = *lock(&self.shared.buffers);
        self.shared.send(&ServerMessage::State {
            episode: ctx.episode,
            step: st.step_index,
            pose: st.pose,
            last_action: control_of(st.last_action, &self.vehicle),
            mode: ctx.mode,
            phase: ctx.phase,
            reward: 0.0,
            reward_breakdown: RewardBreakdown::default(),
            status: st.status,
            buffer_sizes: buffers,
            retries: ctx.retries,
        });
    }
}

impl Intervenor for SessionIntervenor {
    fn poll_events(&mut self, ctx: &StepContext<'_>) -> Vec<OperatorEvent> {
        self.pace();
        let shared = self.shared.clone();
        let mut mb = lock(&shared.mailbox);
        loop {
            if shared.stopping() {
                return if ctx.phase == Phase::Correcting {
                    vec![OperatorEvent::Discard]
                } else {
                    Vec::new()
                };
            }
            if ctx.phase == Phase::Correcting && !mb.connected {
                if self.disconnect_expired(&mb) {
                    log::warn!("operator gone too long; discarding the correction");
                    mb.events.clear();
                    return vec![OperatorEvent::Discard];
                }
            } else if !mb.paused {
                break;
            }
            mb = shared.wake.wait_timeout(mb, POLL).unwrap_or_else(|e| e.into_inner()).0;
        }
        mb.events.drain(..).collect()
    }

    fn human_action(&mut self, _ctx: &StepContext<'_>) -> Action {
        let c = lock(&self.shared.mailbox).control;
        Action::from_normalized([c.steer, c.speed], &self.vehicle)
    }

    fn on_rollback(&mut self, ctx: &StepContext<'_>) {
        lock(&self.shared.mailbox).control = Control { steer: 0.0, speed: 0.0 };
        self.announce(ctx);
    }

    fn decide(&mut self, ctx: &StepContext<'_>) -> OperatorEvent {
        self.announce(ctx);
        let shared = self.shared.clone();
        let mut mb = lock(&shared.mailbox);
        loop {
            while let Some(ev) = mb.events.pop_front() {
                match ev {
                    OperatorEvent::Retry | OperatorEvent::Discard => return ev,
                    other => shared.send(&ServerMessage::Rejected {
                        command: event_name(other).into(),
                        phase: ctx.phase,
                        mode: ctx.mode,
                        reason: "waiting for retry or discard".into(),
                    }),
                }
            }
            if shared.stopping() || self.disconnect_expired(&mb) {
                return OperatorEvent::Discard;
            }
            mb = shared.wake.wait_timeout(mb, POLL).unwrap_or_else(|e| e.into_inner()).0;
        }
    }

    fn on_event(&mut self, event: OperatorEvent, accepted: bool, ctx: &StepContext<'_>) {
        if !accepted {
            self.shared.send(&ServerMessage::Rejected {
                command: event_name(event).into(),
                phase: ctx.phase,
                mode: ctx.mode,
                reason: "not allowed in this phase and mode".into(),
            });
        }
    }
}

/// Publishes step and episode events to the connected operator.
pub struct SessionObserver {
    shared: Arc<Shared>,
    vehicle: VehicleParams,
    episodes: u64,
    arrived: u64,
}

impl Observer for SessionObserver {
    fn on_step(&mut self, r: &StepRecord) {
        let buffers = BufferSizes {
            rl: r.rl_len,
            human: r.human_len,
            regions: r.regions,
        };
        *lock(&self.shared.buffers) = buffers;
        self.shared.send(&ServerMessage::State {
            episode: r.episode,
            step: r.step_index,
            pose: r.pose,
            last_action: control_of(r.action, &self.vehicle),
            mode: r.mode,
            phase: r.phase,
            reward: r.reward,
            reward_breakdown: r.breakdown,
            status: r.status,
            buffer_sizes: buffers,
            retries: r.retries,
        });
    }

    fn on_episode(&mut self, report: &EpisodeReport) {
        self.episodes += 1;
        if report.outcome == EpisodeOutcome::Arrived {
            self.arrived += 1;
        }
        self.shared.send(&ServerMessage::Metrics {
            episode: report.episode,
            losses: report.last_loss.as_ref().map(LossStats::from),
            alpha: report.last_loss.map(|l| l.alpha),
            psr: 100.0 * self.arrived as f64 / self.episodes as f64,
        });
    }
}

/// A session running on a background thread.
pub struct SessionHandle {
    pub addr: SocketAddr,
    pub stop: Arc<AtomicBool>,
    pub join: JoinHandle<Result<TrainSummary, HarnessError>>,
}

/// Binds the server and starts interactive training on a new thread; the
/// loop begins once the first operator connects.
pub fn spawn_session(config: &TrainConfig, session: &SessionConfig) -> Result<SessionHandle, HarnessError> {
    config.validate()?;
    let scenario = Scenario::resolve(&config.scenario)?;
    let stop = Arc::new(AtomicBool::new(false));
    let server = SessionServer::bind(session, &scenario, stop.clone())?;
    let addr = server.local_addr();
    let (cfg, flag) = (config.clone(), stop.clone());
    let join = std::thread::Builder::new()
        .name("session-training".into())
        .spawn(move || {
            let result = if server.wait_for_client() {
                let mut intervenor = server.intervenor();
                let mut observer = server.observer();
                run_training_with(&cfg, &scenario, &mut intervenor, &mut observer, &flag)
            } else {
                Err(HarnessError::Session("stopped before an operator connected".into()))
            };
            server.shutdown();
            result
        })?;
    Ok(SessionHandle { addr, stop, join })
}

/// Serves one interactive training run and blocks until it ends.
pub fn serve_session(config: &TrainConfig, session: &SessionConfig) -> Result<TrainSummary, HarnessError> {
    let handle = spawn_session(config, session)?;
    log::info!("session listening on ws://{}", handle.addr);
    handle
        .join
        .join()
        .map_err(|_| HarnessError::Session("training thread panicked".into()))?
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_messages_parse() {
        let m: ClientMessage = serde_json::from_str(r#"{"type":"control","steer":-0.5,"speed":1.0}"#).unwrap();
        assert_eq!(m, ClientMessage::Control { steer: -0.5, speed: 1.0 });
        for (text, ev) in [
            ("take_control", OperatorEvent::TakeControl),
            ("release_to_rl", OperatorEvent::ReleaseToRl),
            ("hand_back", OperatorEvent::HandBack),
            ("retry", OperatorEvent::Retry),
            ("discard", OperatorEvent::Discard),
        ] {
            let m: ClientMessage = serde_json::from_str(&format!(r#"{{"type":"{text}"}}"#)).unwrap();
            assert_eq!(m.event(), Some(ev));
            assert_eq!(event_name(ev), text);
        }
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"teleport"}"#).is_err());
    }

    #[test]
    fn state_message_field_names() {
        let msg = ServerMessage::State {
            episode: 1,
            step: 2,
            pose: Pose2D::new(1.0, 2.0, 0.5),
            last_action: Control { steer: 0.1, speed: -1.0 },
            mode: Mode::HumanCorr,
            phase: Phase::Correcting,
            reward: -0.1,
            reward_breakdown: RewardBreakdown::default(),
            status: None,
            buffer_sizes: BufferSizes { rl: 3, human: 4, regions: 1 },
            retries: 0,
        };
        let v: serde_json::Value = serde_json::to_value(&msg).unwrap();
        for key in ["episode", "step", "pose", "last_action", "mode", "phase", "reward_breakdown", "status", "buffer_sizes"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["type"], "state");
        assert_eq!(v["mode"], "human_corr");
        assert_eq!(v["phase"], "correcting");
        assert_eq!(v["pose"]["psi"], 0.5);
    }

    #[test]
    fn scene_init_lists_geometry() {
        let s = Scenario::builtin("open-lot").unwrap();
        let v = serde_json::to_value(scene_init(&s)).unwrap();
        assert_eq!(v["type"], "scene_init");
        assert_eq!(v["slots"].as_array().unwrap().len(), s.scene.slots.len());
        assert_eq!(v["obstacles"].as_array().unwrap().len(), s.scene.obstacles.len());
        assert_eq!(v["vehicle"]["wheelbase"], 2.7);
    }
}
