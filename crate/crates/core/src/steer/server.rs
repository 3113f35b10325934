//! Live steering session and its WebSocket server.
//!
//! One thread owns the session: each tick it accepts connections, drains
//! client commands, applies them, advances the policy by one control step
//! and publishes the resulting snapshot to every client. The first client
//! to send a command holds the control lease until it disconnects; the
//! others may only watch.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use crate::blockworld::{observe, reset, step, DisturbanceSpec, SimState, TaskSpec, ACTION_DIM};
use crate::error::{Error, Result};
use crate::policy::{ChunkBuffer, ObsHistory, PolicyNets};
use crate::seeding;
use crate::trainer::{Controller, PolicyController};

use super::protocol::{Command, ServerFrame, StateFrame, WireMode};
use super::{parse_subtask, plan_stub, ExpertStageMap, OverrideDirective, OverrideRunner};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    /// Control steps per second.
    pub tick_hz: f64,
    pub seed: u64,
    /// Applied to every step in addition to on-demand disturbances.
    pub disturbance: DisturbanceSpec,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            tick_hz: 20.0,
            seed: 0,
            disturbance: DisturbanceSpec::none(),
        }
    }
}

/// A policy driving one simulated episode under external commands.
pub struct SteerSession {
    nets: PolicyNets,
    task: TaskSpec,
    map: Option<ExpertStageMap>,
    disturbance: DisturbanceSpec,
    state: SimState,
    history: ObsHistory,
    buffer: ChunkBuffer,
    runner: OverrideRunner,
    paused: bool,
    episode_seed: u64,
}

impl SteerSession {
    pub fn new(
        nets: PolicyNets,
        task: TaskSpec,
        map: Option<ExpertStageMap>,
        config: &SessionConfig,
    ) -> Result<Self> {
        PolicyController::new(&nets).check_task(&task)?;
        let state = reset(&task, config.seed)?;
        let history = ObsHistory::new(nets.config.chunking.obs_horizon);
        Ok(Self {
            nets,
            task,
            map,
            disturbance: config.disturbance.clone(),
            state,
            history,
            buffer: ChunkBuffer::new(),
            runner: OverrideRunner::new(OverrideDirective::none()),
            paused: false,
            episode_seed: config.seed,
        })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn runner(&self) -> &OverrideRunner {
        &self.runner
    }

    /// Continues the episode from `state`, as if it had just been reset
    /// into it. Keeps the active directive and pause flag.
    pub fn restart_from(&mut self, state: SimState) -> Result<()> {
        if state.num_objects() != self.task.num_objects {
            return Err(Error::Contract(format!(
                "state has {} objects, the task {}",
                state.num_objects(),
                self.task.num_objects
            )));
        }
        self.state = state;
        self.history.clear();
        self.buffer = ChunkBuffer::new();
        self.runner = OverrideRunner::new(self.runner.directive().clone());
        Ok(())
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn snapshot(&self) -> StateFrame {
        StateFrame::new(
            &self.state,
            &self.task,
            self.buffer.current_gate.as_ref(),
            self.paused,
        )
    }

    fn num_experts(&self) -> Option<usize> {
        self.nets.moe().map(|m| m.config.num_experts)
    }

    /// Applies a command. Overrides act from the next chunk re-sampling
    /// boundary; everything else acts immediately.
    pub fn apply(&mut self, cmd: Command) -> Result<()> {
        match cmd {
            Command::Override { mode, expert } => {
                let directive = match (mode, expert) {
                    (WireMode::None, _) => OverrideDirective::none(),
                    (WireMode::Force, Some(e)) => OverrideDirective::force(e),
                    (WireMode::Force, None) => {
                        return Err(Error::Contract("force override needs an expert".into()))
                    }
                };
                self.set_directive(directive)
            }
            Command::Schedule { subtasks } => {
                let map = self
                    .map
                    .as_ref()
                    .ok_or_else(|| Error::Planning("session has no expert calibration".into()))?;
                let goal = subtasks
                    .iter()
                    .map(|s| parse_subtask(s, &self.task))
                    .collect::<Result<Vec<_>>>()?;
                let directive = plan_stub(&goal, map, Some(&self.state), &self.task)?;
                self.set_directive(directive)
            }
            Command::Pause {} => {
                self.paused = true;
                Ok(())
            }
            Command::Resume {} => {
                self.paused = false;
                Ok(())
            }
            Command::Reset { seed } => {
                self.episode_seed = seed.unwrap_or_else(|| seeding::derive(self.episode_seed, 1));
                let state = reset(&self.task, self.episode_seed)?;
                self.restart_from(state)
            }
            Command::Disturb {} => {
                if self.state.force_disturbance() {
                    Ok(())
                } else {
                    Err(Error::State("no object is held, nothing to disturb".into()))
                }
            }
        }
    }

    fn set_directive(&mut self, directive: OverrideDirective) -> Result<()> {
        let n = self.num_experts().unwrap_or(0);
        if directive != OverrideDirective::none() && n == 0 {
            return Err(Error::Contract(
                "overrides need a mixture-of-experts policy".into(),
            ));
        }
        directive.validate(n, self.task.num_objects)?;
        self.runner = OverrideRunner::new(directive);
        Ok(())
    }

    /// Advances one control step unless paused or finished; returns whether
    /// a step was taken.
    pub fn step(&mut self) -> Result<bool> {
        if self.paused || self.state.done {
            return Ok(false);
        }
        self.history.push(observe(&self.state));
        if self.buffer.needs_sample() {
            let forced = self.runner.next_forced(&self.state, &self.task);
            let seed = seeding::derive_path(
                self.episode_seed,
                &[0x73746572, self.buffer.chunks_sampled as u64],
            );
            let chunk = self
                .nets
                .sample_action_chunk(&self.history.window(), seed, forced)?;
            self.buffer
                .load(chunk, self.nets.config.chunking.execute_horizon);
        }
        let raw = self
            .buffer
            .next_action()
            .ok_or_else(|| Error::State("empty action chunk".into()))?;
        let mut action = [0.0; ACTION_DIM];
        for (dst, v) in action.iter_mut().zip(raw) {
            *dst = v.clamp(-1.0, 1.0);
        }
        let (next, _) = step(&self.state, action, &self.task, &self.disturbance)?;
        self.state = next;
        Ok(true)
    }
}

struct Client {
    id: u64,
    ws: WebSocket<TcpStream>,
    alive: bool,
}

impl Client {
    fn send(&mut self, frame: &ServerFrame) {
        match self.ws.send(Message::text(frame.to_json())) {
            Ok(()) => {}
            Err(tungstenite::Error::Io(e)) if e.kind() == ErrorKind::WouldBlock => {}
            Err(_) => self.alive = false,
        }
    }
}

/// Running server; dropping it stops the loop.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        self.join_inner()
    }

    /// Blocks until the loop ends (it only ends on error or shutdown).
    pub fn wait(mut self) -> Result<()> {
        self.join_inner()
    }

    fn join_inner(&mut self) -> Result<()> {
        match self.thread.take() {
            Some(t) => t
                .join()
                .map_err(|_| Error::Network("steering loop panicked".into()))?,
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.join_inner();
    }
}

/// Binds `addr` (port 0 picks a free port) and runs `session` on a
/// background thread.
pub fn serve(session: SteerSession, addr: &str, tick_hz: f64) -> Result<ServerHandle> {
    if !(tick_hz > 0.0 && tick_hz.is_finite()) {
        return Err(Error::Config(format!(
            "tick rate {tick_hz} must be positive"
        )));
    }
    let listener =
        TcpListener::bind(addr).map_err(|e| Error::Network(format!("cannot bind {addr}: {e}")))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| Error::Network(e.to_string()))?;
    let local = listener
        .local_addr()
        .map_err(|e| Error::Network(e.to_string()))?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let period = Duration::from_secs_f64(1.0 / tick_hz);
    let thread = std::thread::Builder::new()
        .name("modp-steer".into())
        .spawn(move || run_loop(session, listener, period, &flag))
        .map_err(|e| Error::Network(e.to_string()))?;
    log::info!("steering server listening on ws://{local}");
    Ok(ServerHandle {
        addr: local,
        stop,
        thread: Some(thread),
    })
}

fn handshake(stream: TcpStream) -> Option<WebSocket<TcpStream>> {
    stream.set_nonblocking(false).ok()?;
    stream.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    let ws = tungstenite::accept(stream)
        .map_err(|e| log::warn!("websocket handshake failed: {e}"))
        .ok()?;
    ws.get_ref().set_read_timeout(None).ok()?;
    ws.get_ref().set_nonblocking(true).ok()?;
    Some(ws)
}

fn run_loop(
    mut session: SteerSession,
    listener: TcpListener,
    period: Duration,
    stop: &AtomicBool,
) -> Result<()> {
    let mut clients: Vec<Client> = Vec::new();
    let mut next_id = 0u64;
    let mut lease: Option<u64> = None;
    while !stop.load(Ordering::SeqCst) {
        let tick = Instant::now();
        loop {
            match listener.accept() {
                Ok((stream, peer)) => {
                    if let Some(ws) = handshake(stream) {
                        let mut c = Client {
                            id: next_id,
                            ws,
                            alive: true,
                        };
                        next_id += 1;
                        log::info!("client {} connected from {peer}", c.id);
                        c.send(&ServerFrame::State(session.snapshot()));
                        clients.push(c);
                    }
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    break;
                }
            }
        }

        let mut changed = false;
        for c in clients.iter_mut() {
            loop {
                let text = match c.ws.read() {
                    Ok(Message::Text(t)) => t,
                    Ok(Message::Close(_)) => {
                        c.alive = false;
                        break;
                    }
                    Ok(_) => continue,
                    Err(tungstenite::Error::Io(e)) if e.kind() == ErrorKind::WouldBlock => break,
                    Err(_) => {
                        c.alive = false;
                        break;
                    }
                };
                let result = Command::parse(text.as_str()).and_then(|cmd| {
                    if lease.is_some_and(|holder| holder != c.id) {
                        return Err(Error::State(
                            "another client holds the control lease".into(),
                        ));
                    }
                    lease = Some(c.id);
                    session.apply(cmd)
                });
                match result {
                    Ok(()) => changed = true,
                    Err(e) => c.send(&ServerFrame::Error { msg: e.to_string() }),
                }
            }
        }

        let stepped = session.step()?;
        if stepped || changed {
            let frame = ServerFrame::State(session.snapshot());
            for c in clients.iter_mut() {
                c.send(&frame);
            }
        }
        for c in clients.iter_mut().filter(|c| !c.alive) {
            log::info!("client {} disconnected", c.id);
            if lease == Some(c.id) {
                lease = None;
            }
        }
        clients.retain(|c| c.alive);
        if let Some(rest) = period.checked_sub(tick.elapsed()) {
            std::thread::sleep(rest);
        }
    }
    Ok(())
}
