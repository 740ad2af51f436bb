//! Edge node: accepts any number of device connections and feeds their
//! requests to a single inference worker, one at a time.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use tokenbridge_core::harness::{EdgeService, OffloadRequest, OffloadResponse};

use crate::codec::{
    codes, read_message, write_message, Message, WireError, MIN_PROTOCOL_VERSION, PROTOCOL_VERSION,
};

type Reply = Result<OffloadResponse, (u16, String)>;
type Job = (OffloadRequest, Sender<Reply>);

pub struct EdgeServer {
    listener: TcpListener,
    service: EdgeService,
    stop: Arc<AtomicBool>,
    peers: Arc<Mutex<Vec<TcpStream>>>,
}

/// Background server started by [`EdgeServer::spawn`].
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    peers: Arc<Mutex<Vec<TcpStream>>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, drops open connections and waits for the acceptor.
    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop_now()
    }

    fn stop_now(&mut self) -> io::Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        for s in self.peers.lock().expect("peer list").drain(..) {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|p| std::panic::resume_unwind(p)),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_now();
    }
}

fn worker(service: EdgeService, jobs: Receiver<Job>) {
    for (req, reply) in jobs {
        let r = service.handle(&req).map_err(|e| {
            log::warn!("query {}: {e}", req.query_id);
            (e.code(), e.to_string())
        });
        let _ = reply.send(r);
    }
}

fn send(stream: &mut TcpStream, msg: &Message) -> bool {
    match write_message(stream, msg) {
        Ok(()) => true,
        Err(e) => {
            log::debug!("write failed: {e}");
            false
        }
    }
}

fn error(query_id: u64, code: u16, message: impl Into<String>) -> Message {
    Message::Error {
        query_id,
        code,
        message: message.into(),
    }
}

fn handshake(stream: &mut TcpStream) -> Option<u16> {
    match read_message(stream) {
        Ok(Message::Hello { version }) if version >= MIN_PROTOCOL_VERSION => {
            let agreed = version.min(PROTOCOL_VERSION);
            send(stream, &Message::HelloAck { version: agreed }).then_some(agreed)
        }
        Ok(Message::Hello { version }) => {
            send(
                stream,
                &error(
                    0,
                    codes::UNSUPPORTED_VERSION,
                    format!("version {version} is below {MIN_PROTOCOL_VERSION}"),
                ),
            );
            None
        }
        Ok(other) => {
            send(
                stream,
                &error(
                    other.query_id(),
                    codes::UNEXPECTED_MESSAGE,
                    "expected Hello",
                ),
            );
            None
        }
        Err(e) => {
            if !e.is_fatal() {
                send(stream, &error(0, codes::MALFORMED_FRAME, e.to_string()));
            }
            None
        }
    }
}

fn connection(mut stream: TcpStream, jobs: Sender<Job>) {
    let peer = stream.peer_addr().ok();
    let Some(version) = handshake(&mut stream) else {
        return;
    };
    log::info!("device {peer:?} connected, protocol v{version}");
    loop {
        let msg = match read_message(&mut stream) {
            Ok(m) => m,
            Err(WireError::Closed) => break,
            Err(e) if e.is_fatal() => {
                log::debug!("device {peer:?}: {e}");
                break;
            }
            Err(e) => {
                if !send(
                    &mut stream,
                    &error(0, codes::MALFORMED_FRAME, e.to_string()),
                ) {
                    break;
                }
                continue;
            }
        };
        let out = match msg {
            Message::OffloadRequest(req) => {
                let qid = req.query_id;
                let (tx, rx) = channel();
                if jobs.send((req, tx)).is_err() {
                    break;
                }
                match rx.recv() {
                    Ok(Ok(resp)) => Message::OffloadResponse(resp),
                    Ok(Err((code, message))) => error(qid, code, message),
                    Err(_) => error(qid, codes::INTERNAL, "worker stopped"),
                }
            }
            Message::Ping { nonce } => Message::Pong { nonce },
            other => error(
                other.query_id(),
                codes::UNEXPECTED_MESSAGE,
                format!("{:?} from a device", other.kind()),
            ),
        };
        if !send(&mut stream, &out) {
            break;
        }
    }
    log::info!("device {peer:?} disconnected");
}

impl EdgeServer {
    pub fn bind(addr: impl ToSocketAddrs, service: EdgeService) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            service,
            stop: Arc::new(AtomicBool::new(false)),
            peers: Arc::new(Mutex::new(Vec::new())),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until stopped; each gets its own reader thread
    /// while inference stays on one worker.
    pub fn serve(self) -> io::Result<()> {
        let (jobs, rx) = channel::<Job>();
        let service = self.service;
        thread::Builder::new()
            .name("edge-worker".into())
            .spawn(move || worker(service, rx))?;
        for stream in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let _ = stream.set_nodelay(true);
            if let Ok(c) = stream.try_clone() {
                let mut peers = self.peers.lock().expect("peer list");
                peers.retain(|p| p.peer_addr().is_ok());
                peers.push(c);
            }
            let jobs = jobs.clone();
            thread::Builder::new()
                .name("edge-conn".into())
                .spawn(move || connection(stream, jobs))?;
        }
        Ok(())
    }

    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let (stop, peers) = (self.stop.clone(), self.peers.clone());
        let thread = thread::Builder::new()
            .name("edge-accept".into())
            .spawn(move || self.serve())?;
        Ok(ServerHandle {
            addr,
            stop,
            peers,
            thread: Some(thread),
        })
    }
}
