//! Transports around a single host thread. The host owns every session and
//! runs planner calls (which may block on HTTP) off the async runtime; each
//! connection just forwards decoded messages in and encoded messages out.

use std::collections::BTreeMap;
use std::io::{BufReader, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc as std_mpsc, Arc};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use chrono::Utc;
use clap::Args;
use futures::{SinkExt, StreamExt};
use humantool_core::host::{Host, HostConfig};
use humantool_core::orchestrator::{Mode, SessionConfig};
use humantool_core::protocol::{decode_text, encode_text, read_frame, write_frame, ErrorCode, WireMessage};
use humantool_core::store::FsyncPolicy;
use tokio::sync::mpsc;

use crate::run::build_planner;
use crate::{profile, CliResult, Ctx, Failure, PlannerKind};

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// One or more profiles; the first is used when session/start names no human.
    #[arg(long, required = true)]
    pub profile: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: SocketAddr,
    /// Serve one session over stdin/stdout instead of a socket.
    #[arg(long)]
    pub stdio: bool,
    /// Session id for `--stdio`.
    #[arg(long, default_value = "stdio")]
    pub session_id: String,
    #[arg(long, value_enum, default_value = "scripted")]
    pub planner: PlannerKind,
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<PathBuf>,
    /// Default mode for sessions that do not ask for one.
    #[arg(long, default_value = "human-tool")]
    pub mode: Mode,
    /// Per-call response deadline.
    #[arg(long, default_value_t = 300_000)]
    pub timeout_ms: u64,
    /// fsync every log line instead of only on snapshots.
    #[arg(long)]
    pub fsync_always: bool,
    #[arg(long)]
    pub allow_concurrent_sessions: bool,
}

type Outbox = mpsc::UnboundedSender<WireMessage>;

enum Command {
    Connect { session: String, conn: u64, outbox: Outbox },
    Inbound { session: String, message: WireMessage },
    Disconnect { session: String, conn: u64 },
    Shutdown { done: std_mpsc::Sender<()> },
}

/// Longest the host sleeps without checking deadlines.
const MAX_WAIT: Duration = Duration::from_millis(250);

fn host_loop(mut host: Host, rx: std_mpsc::Receiver<Command>) {
    let mut routes: BTreeMap<String, (u64, Outbox)> = BTreeMap::new();
    let send = |routes: &BTreeMap<String, (u64, Outbox)>, session: &str, msgs: Vec<WireMessage>| {
        if let Some((_, outbox)) = routes.get(session) {
            for m in msgs {
                let _ = outbox.send(m);
            }
        }
    };
    loop {
        let wait = host
            .next_deadline()
            .map(|d| (d - Utc::now()).to_std().unwrap_or_default() + Duration::from_millis(1))
            .unwrap_or(MAX_WAIT)
            .min(MAX_WAIT);
        match rx.recv_timeout(wait) {
            Ok(Command::Connect { session, conn, outbox }) => {
                routes.insert(session, (conn, outbox));
            }
            Ok(Command::Inbound { session, message }) => {
                let out = host.handle(&session, message, Utc::now());
                send(&routes, &session, out);
            }
            Ok(Command::Disconnect { session, conn }) => {
                if routes.get(&session).is_some_and(|(c, _)| *c == conn) {
                    routes.remove(&session);
                }
            }
            Ok(Command::Shutdown { done }) => {
                for (session, msgs) in host.shutdown(Utc::now()) {
                    send(&routes, &session, msgs);
                }
                drop(routes);
                let _ = done.send(());
                return;
            }
            Err(std_mpsc::RecvTimeoutError::Timeout) => {}
            Err(std_mpsc::RecvTimeoutError::Disconnected) => {
                host.shutdown(Utc::now());
                return;
            }
        }
        for (session, msgs) in host.tick(Utc::now()) {
            send(&routes, &session, msgs);
        }
    }
}

fn build_host(ctx: &Ctx, args: &ServeArgs) -> Result<Host, Failure> {
    let profiles = args.profile.iter().map(|p| profile::load(ctx, p)).collect::<Result<Vec<_>, _>>()?;
    let (planner, _) = build_planner(ctx, args.planner, args.scenario.as_ref(), args.endpoint.as_ref())?;
    let session = SessionConfig { timeout_default_ms: args.timeout_ms, ..SessionConfig::with_mode(args.mode) };
    let config = HostConfig {
        session,
        workdir: Some(ctx.workdir.clone()),
        fsync: if args.fsync_always { FsyncPolicy::Always } else { FsyncPolicy::OnSnapshot },
        allow_concurrent_sessions: args.allow_concurrent_sessions,
    };
    Ok(Host::new(profiles, Arc::from(planner), config))
}

pub fn serve(ctx: &Ctx, args: &ServeArgs) -> CliResult {
    let host = build_host(ctx, args)?;
    let (tx, rx) = std_mpsc::channel();
    let host_thread = std::thread::spawn(move || host_loop(host, rx));
    let result = if args.stdio { serve_stdio(&tx, &args.session_id) } else { serve_socket(ctx, &tx, args.addr) };
    let (done_tx, done_rx) = std_mpsc::channel();
    if tx.send(Command::Shutdown { done: done_tx }).is_ok() {
        let _ = done_rx.recv();
    }
    drop(tx);
    let _ = host_thread.join();
    result
}

fn serve_stdio(tx: &std_mpsc::Sender<Command>, session: &str) -> CliResult {
    let (outbox, mut out_rx) = mpsc::unbounded_channel::<WireMessage>();
    let writer = std::thread::spawn(move || {
        let stdout = std::io::stdout();
        while let Some(msg) = out_rx.blocking_recv() {
            let mut lock = stdout.lock();
            if write_frame(&mut lock, &msg).and_then(|_| lock.flush()).is_err() {
                break;
            }
        }
    });
    tx.send(Command::Connect { session: session.to_string(), conn: 0, outbox: outbox.clone() })
        .map_err(|_| Failure::usage("host stopped"))?;
    let mut reader = BufReader::new(std::io::stdin().lock());
    loop {
        match read_frame(&mut reader) {
            Ok(None) | Err(_) => break,
            Ok(Some(Ok(message))) => {
                if tx.send(Command::Inbound { session: session.to_string(), message }).is_err() {
                    break;
                }
            }
            Ok(Some(Err(e))) => {
                let _ = outbox.send(e.to_wire());
                // A bad header leaves the stream unsynchronized.
                if e.offset < humantool_core::protocol::HEADER_LEN {
                    break;
                }
            }
        }
    }
    drop(outbox);
    let (done_tx, done_rx) = std_mpsc::channel();
    if tx.send(Command::Shutdown { done: done_tx }).is_ok() {
        let _ = done_rx.recv();
    }
    let _ = writer.join();
    Ok(())
}

#[derive(Clone)]
struct AppState {
    host: std_mpsc::Sender<Command>,
    next_conn: Arc<AtomicU64>,
    live_writers: Arc<AtomicUsize>,
}

async fn upgrade(ws: WebSocketUpgrade, Path(session): Path<String>, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, session, state))
}

async fn connection(socket: WebSocket, session: String, state: AppState) {
    let conn = state.next_conn.fetch_add(1, Ordering::Relaxed);
    let (mut sink, mut stream) = socket.split();
    let (outbox, mut out_rx) = mpsc::unbounded_channel::<WireMessage>();
    if state.host.send(Command::Connect { session: session.clone(), conn, outbox: outbox.clone() }).is_err() {
        return;
    }
    state.live_writers.fetch_add(1, Ordering::SeqCst);
    let live = Arc::clone(&state.live_writers);
    let writer = tokio::spawn(async move {
        while let Some(msg) = out_rx.recv().await {
            let Ok(text) = encode_text(&msg) else { continue };
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
        let _ = sink.send(Message::Close(None)).await;
        live.fetch_sub(1, Ordering::SeqCst);
    });
    while let Some(Ok(frame)) = stream.next().await {
        match frame {
            Message::Text(text) => match decode_text(text.as_str()) {
                Ok(message) => {
                    if state.host.send(Command::Inbound { session: session.clone(), message }).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = outbox.send(e.to_wire());
                }
            },
            Message::Binary(_) => {
                let _ = outbox.send(WireMessage::error(None, ErrorCode::InvalidMessage, "binary messages are not accepted", None));
            }
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => {}
        }
    }
    let _ = state.host.send(Command::Disconnect { session, conn });
    drop(outbox);
    // The writer ends once the host drops its route too.
    let _ = writer.await;
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

fn serve_socket(ctx: &Ctx, tx: &std_mpsc::Sender<Command>, addr: SocketAddr) -> CliResult {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(Failure::usage)?;
    rt.block_on(async {
        let listener =
            tokio::net::TcpListener::bind(addr).await.map_err(|e| Failure::usage(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(Failure::usage)?;
        if ctx.json {
            println!("{}", serde_json::json!({ "listening": local.to_string() }));
        } else {
            println!("listening on ws://{local}/session/{{id}}");
        }
        let _ = std::io::stdout().flush();
        let state = AppState {
            host: tx.clone(),
            next_conn: Arc::new(AtomicU64::new(1)),
            live_writers: Arc::new(AtomicUsize::new(0)),
        };
        let live = Arc::clone(&state.live_writers);
        let app = Router::new().route("/session/{id}", get(upgrade)).with_state(state);
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stop_rx.await;
                })
                .await
        });
        shutdown_signal().await;

        // Abort open sessions while sockets are still up, so consoles see it.
        let host = tx.clone();
        tokio::task::spawn_blocking(move || {
            let (done_tx, done_rx) = std_mpsc::channel();
            if host.send(Command::Shutdown { done: done_tx }).is_ok() {
                let _ = done_rx.recv();
            }
        })
        .await
        .ok();
        for _ in 0..40 {
            if live.load(Ordering::SeqCst) == 0 {
                break;
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        let _ = stop_tx.send(());
        let _ = tokio::time::timeout(Duration::from_secs(2), server).await;
        if !ctx.json {
            println!("shut down");
        }
        Ok(())
    })
}
