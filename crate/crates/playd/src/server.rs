//! WebSocket transport. One session runs at a time; a second client that
//! connects while a session is live gets an `error` and is closed.
//!
//! The session loop owns the socket: it polls for client messages with a
//! short read timeout until the tick deadline, then runs the tick and
//! sends its messages.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use mbag::goals::GoalSet;
use mbag::world::EnvConfig;
use tungstenite::{Message, WebSocket};

use crate::protocol::{Metrics, ServerMsg};
use crate::session::{AssistantRuntime, Session, SessionConfig};
use crate::{Error, Result};

const POLL: Duration = Duration::from_millis(5);

pub type AssistantFactory = Arc<dyn Fn() -> AssistantRuntime + Send + Sync>;

#[derive(Clone)]
pub struct ServerConfig {
    pub env: EnvConfig,
    pub session: SessionConfig,
    /// Goals are used in order, one per session, wrapping around.
    pub goals: GoalSet,
    /// Where per-session metrics JSON files are written on disconnect.
    pub metrics_dir: Option<PathBuf>,
    /// Stop after this many sessions.
    pub max_sessions: Option<u64>,
}

/// Summary written when a session ends.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SessionRecord {
    pub session: u64,
    pub goal_id: usize,
    pub metrics: Metrics,
    pub done: bool,
}

pub struct Server {
    listener: TcpListener,
    config: ServerConfig,
    assistant: AssistantFactory,
    shutdown: Arc<AtomicBool>,
    busy: Arc<AtomicBool>,
    sessions: Arc<AtomicU64>,
}

impl Server {
    /// Binds the listening socket; a busy port is reported here.
    pub fn bind(addr: &str, config: ServerConfig, assistant: AssistantFactory) -> Result<Server> {
        config.session.validate()?;
        if config.goals.is_empty() {
            return Err(Error::Config("goal source is empty".into()));
        }
        if config.goals.dims() != config.env.dims {
            return Err(Error::Config("goal dims do not match the environment".into()));
        }
        let listener = TcpListener::bind(addr).map_err(|e| Error::Bind(addr.to_string(), e))?;
        listener.set_nonblocking(true)?;
        Ok(Server {
            listener,
            config,
            assistant,
            shutdown: Arc::new(AtomicBool::new(false)),
            busy: Arc::new(AtomicBool::new(false)),
            sessions: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Setting the flag makes [`Server::run`] return.
    pub fn shutdown_handle(&self) -> Arc<AtomicBool> {
        self.shutdown.clone()
    }

    /// Accepts clients until shutdown or `max_sessions`.
    pub fn run(&self) -> Result<()> {
        let mut workers = Vec::new();
        let mut started = 0u64;
        loop {
            if self.shutdown.load(Ordering::SeqCst) {
                break;
            }
            if let Some(max) = self.config.max_sessions {
                if started >= max && !self.busy.load(Ordering::SeqCst) {
                    break;
                }
            }
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    let at_limit = self.config.max_sessions.is_some_and(|m| started >= m);
                    if at_limit || self.busy.swap(true, Ordering::SeqCst) {
                        reject(stream);
                        continue;
                    }
                    let id = started;
                    started += 1;
                    let goal_id = (id as usize) % self.config.goals.len();
                    let config = self.config.clone();
                    let assistant = (self.assistant)();
                    let busy = self.busy.clone();
                    let shutdown = self.shutdown.clone();
                    let sessions = self.sessions.clone();
                    workers.push(std::thread::spawn(move || {
                        let r = serve_client(stream, id, goal_id, &config, assistant, &shutdown);
                        sessions.fetch_add(1, Ordering::SeqCst);
                        busy.store(false, Ordering::SeqCst);
                        r
                    }));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(10)),
                Err(e) => return Err(e.into()),
            }
        }
        for w in workers {
            match w.join() {
                Ok(Err(e)) => eprintln!("session ended with error: {e}"),
                Err(_) => eprintln!("session thread panicked"),
                Ok(Ok(_)) => {}
            }
        }
        Ok(())
    }

    /// Sessions that have finished.
    pub fn finished_sessions(&self) -> u64 {
        self.sessions.load(Ordering::SeqCst)
    }
}

fn reject(stream: TcpStream) {
    if let Ok(mut ws) = tungstenite::accept(stream) {
        let _ = send(
            &mut ws,
            &ServerMsg::Error {
                message: "a session is already running".into(),
            },
        );
        let _ = ws.close(None);
        let _ = ws.flush();
    }
}

fn send(ws: &mut WebSocket<TcpStream>, msg: &ServerMsg) -> Result<()> {
    let text = serde_json::to_string(msg)?;
    ws.send(Message::text(text))?;
    Ok(())
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

/// Runs one session to completion, disconnect or shutdown.
pub fn serve_client(
    stream: TcpStream,
    id: u64,
    goal_id: usize,
    config: &ServerConfig,
    assistant: AssistantRuntime,
    shutdown: &AtomicBool,
) -> Result<SessionRecord> {
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => Error::from(e),
        tungstenite::HandshakeError::Interrupted(_) => Error::Handshake,
    })?;
    let episode_seed = config.session.seed.wrapping_add(id);
    let mut session = Session::new(
        config.env.clone(),
        config.goals.goals[goal_id].clone(),
        assistant,
        config.session.clone(),
        episode_seed,
    )?;
    ws.get_mut().set_read_timeout(Some(POLL))?;
    let result = session_loop(&mut ws, &mut session, shutdown);
    let record = SessionRecord {
        session: id,
        goal_id,
        metrics: session.metrics(),
        done: session.is_done(),
    };
    if let Some(dir) = &config.metrics_dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("session-{id}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(&record)?)?;
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    result.map(|_| record)
}

fn session_loop(ws: &mut WebSocket<TcpStream>, session: &mut Session, shutdown: &AtomicBool) -> Result<()> {
    send(ws, &session.hello())?;
    send(ws, &session.snapshot())?;
    let tick = Duration::from_millis(session.config().tick_ms);
    let mut deadline = Instant::now() + tick;
    loop {
        while Instant::now() < deadline {
            if shutdown.load(Ordering::SeqCst) {
                let _ = send(ws, &session.bye());
                return Ok(());
            }
            match ws.read() {
                Ok(Message::Text(t)) => {
                    for m in session.handle_client(t.as_str()) {
                        send(ws, &m)?;
                    }
                    if session.is_closed() {
                        return Ok(());
                    }
                }
                Ok(Message::Binary(_)) => send(
                    ws,
                    &ServerMsg::Error {
                        message: "binary frames are not supported".into(),
                    },
                )?,
                Ok(Message::Close(_)) => return Ok(()),
                Ok(_) => {}
                Err(e) if is_timeout(&e) => {}
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
                Err(tungstenite::Error::Protocol(_)) => return Ok(()),
                Err(tungstenite::Error::Io(e)) if e.kind() != ErrorKind::WouldBlock => return Ok(()),
                Err(e) => return Err(Error::WebSocket(Box::new(e))),
            }
        }
        deadline += tick;
        for m in session.tick()? {
            send(ws, &m)?;
        }
        if session.is_done() {
            return Ok(());
        }
        // a slow tick does not queue a burst of catch-up ticks
        let now = Instant::now();
        if deadline < now {
            deadline = now;
        }
    }
}
