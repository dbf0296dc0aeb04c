use std::collections::HashMap;
use std::io::{self, BufReader};
use std::net::{Ipv4Addr, Ipv6Addr, Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use log::{debug, info, warn};

use crate::wire::{error_code, run_session, write_message, WireMessage};

use super::EnvFactory;

/// Counters for a running server.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServerStats {
    pub accepted: u64,
    pub refused: u64,
    pub active: usize,
    pub finished: u64,
    pub steps: u64,
}

#[derive(Default)]
struct Shared {
    stop: AtomicBool,
    accepted: AtomicU64,
    refused: AtomicU64,
    active: AtomicUsize,
    finished: AtomicU64,
    steps: AtomicU64,
    sessions: Mutex<HashMap<u64, TcpStream>>,
}

/// Remote control for a server: stop it or cut its live connections.
#[derive(Clone)]
pub struct StopHandle {
    shared: Arc<Shared>,
    wake: SocketAddr,
}

impl StopHandle {
    /// Stops accepting; every live session sends BYE and closes.
    pub fn stop(&self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        for s in self.shared.sessions.lock().unwrap().values() {
            let _ = s.shutdown(Shutdown::Read);
        }
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.wake);
    }

    /// Abruptly closes every live connection without BYE. The server keeps
    /// accepting; used to simulate a crashed environment process.
    pub fn drop_sessions(&self) -> usize {
        let sessions = self.shared.sessions.lock().unwrap();
        for s in sessions.values() {
            let _ = s.shutdown(Shutdown::Both);
        }
        sessions.len()
    }

    pub fn is_stopped(&self) -> bool {
        self.shared.stop.load(Ordering::SeqCst)
    }

    pub fn stats(&self) -> ServerStats {
        let s = &self.shared;
        ServerStats {
            accepted: s.accepted.load(Ordering::SeqCst),
            refused: s.refused.load(Ordering::SeqCst),
            active: s.active.load(Ordering::SeqCst),
            finished: s.finished.load(Ordering::SeqCst),
            steps: s.steps.load(Ordering::SeqCst),
        }
    }
}

/// Serves one environment copy per TCP connection, up to a connection cap.
/// Connections beyond the cap receive an ERROR frame (code 3) and are closed.
pub struct EnvServer {
    listener: TcpListener,
    factory: EnvFactory,
    max_connections: usize,
    handle: StopHandle,
}

impl EnvServer {
    pub fn bind<A: ToSocketAddrs>(addr: A, factory: EnvFactory, max_connections: usize) -> io::Result<Self> {
        if max_connections == 0 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "max_connections must be ≥ 1",
            ));
        }
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let wake = match local {
            SocketAddr::V4(a) if a.ip().is_unspecified() => SocketAddr::from((Ipv4Addr::LOCALHOST, a.port())),
            SocketAddr::V6(a) if a.ip().is_unspecified() => SocketAddr::from((Ipv6Addr::LOCALHOST, a.port())),
            a => a,
        };
        Ok(EnvServer {
            listener,
            factory,
            max_connections,
            handle: StopHandle {
                shared: Arc::default(),
                wake,
            },
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn stop_handle(&self) -> StopHandle {
        self.handle.clone()
    }

    /// Runs the accept loop on the current thread until stopped, then joins
    /// all session threads.
    pub fn run(self) {
        let shared = &self.handle.shared;
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        let mut next_id = 0u64;
        for conn in self.listener.incoming() {
            if shared.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            workers.retain(|w| !w.is_finished());
            if shared.active.load(Ordering::SeqCst) >= self.max_connections {
                shared.refused.fetch_add(1, Ordering::SeqCst);
                warn!("refusing connection: {} sessions active", self.max_connections);
                let mut s = stream;
                let _ = write_message(
                    &mut s,
                    &WireMessage::Error {
                        code: error_code::SERVER_FULL,
                        message: format!("server full ({} connections)", self.max_connections),
                    },
                );
                let _ = s.shutdown(Shutdown::Both);
                continue;
            }
            let id = next_id;
            next_id += 1;
            match self.start_session(id, stream) {
                Ok(w) => workers.push(w),
                Err(e) => warn!("could not start session: {e}"),
            }
        }
        info!("environment server on {} stopping", self.handle.wake);
        for w in workers {
            let _ = w.join();
        }
    }

    fn start_session(&self, id: u64, stream: TcpStream) -> io::Result<JoinHandle<()>> {
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr()?;
        let reader = stream.try_clone()?;
        let shared = Arc::clone(&self.handle.shared);
        shared.sessions.lock().unwrap().insert(id, stream.try_clone()?);
        shared.active.fetch_add(1, Ordering::SeqCst);
        shared.accepted.fetch_add(1, Ordering::SeqCst);
        let env = (self.factory)();
        debug!("session {id} from {peer}");
        thread::Builder::new().name(format!("env-session-{id}")).spawn(move || {
            let mut reader = BufReader::new(reader);
            let mut writer = stream;
            match run_session(&mut reader, &mut writer, env, &shared.stop, &shared.steps) {
                Ok(r) => debug!("session {id} from {peer} ended: {:?} after {} steps", r.end, r.steps),
                Err(e) => debug!("session {id} from {peer} failed: {e}"),
            }
            let _ = writer.shutdown(Shutdown::Both);
            shared.sessions.lock().unwrap().remove(&id);
            shared.active.fetch_sub(1, Ordering::SeqCst);
            shared.finished.fetch_add(1, Ordering::SeqCst);
        })
    }

    /// Runs the server on a background thread.
    pub fn spawn(self) -> io::Result<RunningServer> {
        let addr = self.local_addr()?;
        let handle = self.stop_handle();
        let thread = thread::Builder::new()
            .name(format!("env-server-{}", addr.port()))
            .spawn(move || self.run())?;
        Ok(RunningServer {
            addr,
            handle,
            thread: Some(thread),
        })
    }
}

/// A server running on its own thread; stopped and joined on drop.
pub struct RunningServer {
    addr: SocketAddr,
    handle: StopHandle,
    thread: Option<JoinHandle<()>>,
}

impl RunningServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn handle(&self) -> &StopHandle {
        &self.handle
    }

    pub fn stats(&self) -> ServerStats {
        self.handle.stats()
    }

    pub fn stop(mut self) -> ServerStats {
        self.shutdown();
        self.handle.stats()
    }

    fn shutdown(&mut self) {
        self.handle.stop();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds and serves in the background.
pub fn serve_envs<A: ToSocketAddrs>(addr: A, factory: EnvFactory, max_connections: usize) -> io::Result<RunningServer> {
    EnvServer::bind(addr, factory, max_connections)?.spawn()
}
