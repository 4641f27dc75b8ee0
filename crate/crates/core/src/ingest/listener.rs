//! TCP listener: one thread and one session per connection.

use std::collections::HashMap;
use std::io::{self, BufReader};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use super::{accept_session, IngestConfig, IngestError, SessionOutcome};
use crate::store::OutputRoot;

/// Outcome of one connection, passed to the server's callback.
#[derive(Debug)]
pub struct SessionReport {
    pub peer: Option<SocketAddr>,
    pub result: Result<SessionOutcome, IngestError>,
}

const POLL_INTERVAL: std::time::Duration = std::time::Duration::from_millis(20);

type Streams = Arc<Mutex<HashMap<u64, TcpStream>>>;

/// Stops a running [`IngestServer`] from another thread.
#[derive(Debug, Clone)]
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    streams: Streams,
}

impl ServerHandle {
    /// Stops accepting and cuts every live connection short; those sessions
    /// are finalized as truncated before `run` returns.
    pub fn shutdown(&self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        for s in self.streams.lock().unwrap_or_else(|e| e.into_inner()).values() {
            let _ = s.shutdown(Shutdown::Read);
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

pub struct IngestServer {
    listener: TcpListener,
    cfg: Arc<IngestConfig>,
    out: Arc<OutputRoot>,
    handle: ServerHandle,
}

impl IngestServer {
    pub fn bind(addr: impl ToSocketAddrs, cfg: IngestConfig, out: Arc<OutputRoot>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        Ok(IngestServer {
            listener,
            cfg: Arc::new(cfg),
            out,
            handle: ServerHandle {
                addr,
                stop: Arc::new(AtomicBool::new(false)),
                streams: Arc::default(),
            },
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.handle.addr
    }

    pub fn handle(&self) -> ServerHandle {
        self.handle.clone()
    }

    /// Serves until [`ServerHandle::shutdown`], then waits for all sessions.
    pub fn run(self, on_session: impl Fn(SessionReport) + Send + Sync + 'static) -> io::Result<()> {
        let on_session = Arc::new(on_session);
        let next_id = AtomicU64::new(0);
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        self.listener.set_nonblocking(true)?;
        loop {
            // Read before accepting so connections queued at shutdown are
            // still drained into (truncated) sessions.
            let stopping = self.handle.stop.load(Ordering::SeqCst);
            let stream = match self.listener.accept() {
                Ok((s, _)) => s,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if stopping {
                        break;
                    }
                    std::thread::sleep(POLL_INTERVAL);
                    continue;
                }
                Err(_) => continue,
            };
            stream.set_nonblocking(false)?;
            let id = next_id.fetch_add(1, Ordering::Relaxed);
            let peer = stream.peer_addr().ok();
            if let Ok(clone) = stream.try_clone() {
                self.handle
                    .streams
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .insert(id, clone);
            }
            // Registered before the check so shutdown cannot miss it.
            if self.handle.stop.load(Ordering::SeqCst) {
                let _ = stream.shutdown(Shutdown::Read);
            }
            let (cfg, out, streams, cb) = (
                self.cfg.clone(),
                self.out.clone(),
                self.handle.streams.clone(),
                on_session.clone(),
            );
            workers.push(std::thread::spawn(move || {
                let result = accept_session(BufReader::new(&stream), &cfg, &out);
                streams.lock().unwrap_or_else(|e| e.into_inner()).remove(&id);
                cb(SessionReport { peer, result });
            }));
            workers.retain(|w| !w.is_finished());
        }
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;
    use crate::protocol::encode_event;
    use std::io::Write;
    use std::sync::mpsc;

    fn header(id: &str) -> String {
        encode_event(&EventRecord::Header(SessionHeader {
            version: 1,
            session_id: id.into(),
            wall_start: 0,
            command: "c".into(),
            hostname: "h".into(),
            metrics: vec![MetricDesc::walltime()],
        }))
        .unwrap()
    }

    #[test]
    fn concurrent_sessions_and_shutdown_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let out = Arc::new(OutputRoot::new(dir.path()).unwrap());
        let server = IngestServer::bind("127.0.0.1:0", IngestConfig::default(), out).unwrap();
        let addr = server.local_addr();
        let handle = server.handle();
        let (tx, rx) = mpsc::channel();
        let tx = Mutex::new(tx);
        let join = std::thread::spawn(move || server.run(move |r| tx.lock().unwrap().send(r).unwrap()));

        // Two complete sessions on separate connections.
        for id in ["a", "b"] {
            let mut c = TcpStream::connect(addr).unwrap();
            c.write_all(header(id).as_bytes()).unwrap();
            c.write_all(b"{\"type\":\"end\",\"t\":0}\n").unwrap();
        }
        let mut done: Vec<String> = (0..2).map(|_| rx.recv().unwrap().result.unwrap().session_id).collect();
        done.sort();
        assert_eq!(done, ["a", "b"]);

        // A session left open is truncated by shutdown.
        let mut open = TcpStream::connect(addr).unwrap();
        open.write_all(header("open").as_bytes()).unwrap();
        std::thread::sleep(std::time::Duration::from_millis(100));
        handle.shutdown();
        join.join().unwrap().unwrap();
        let r = rx.recv().unwrap();
        assert!(matches!(r.result, Err(IngestError::StreamTruncated { .. })), "{:?}", r.result);
        assert!(dir.path().join("open").join("manifest.json").exists());
    }
}
