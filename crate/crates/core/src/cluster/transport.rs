//! How round requests reach workers: in-process threads or TCP sockets.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::protocol::{read_frame, write_frame, Message, RoundReply, RoundRequest, WireError};
use super::worker::Worker;
use crate::error::{Error, Result};

/// A reply that has been requested but not yet collected.
pub struct Pending {
    wait: Box<dyn FnOnce() -> Result<RoundReply> + Send>,
}

impl Pending {
    pub fn wait(self) -> Result<RoundReply> {
        (self.wait)()
    }
}

/// Routes a request to the worker owning `request.block_id`.
pub trait Transport: Send + Sync {
    fn submit(&self, request: RoundRequest) -> Result<Pending>;
}

fn worker_failure(req_round: u64, chain: usize, block: usize, message: impl Into<String>) -> Error {
    Error::Worker {
        round: req_round,
        chain,
        block,
        message: message.into(),
    }
}

type Job = (RoundRequest, mpsc::Sender<Result<RoundReply>>);

/// One thread per worker; requests are queued per worker and served in
/// arrival order.
pub struct InProcessTransport {
    senders: Vec<mpsc::Sender<Job>>,
    handles: Vec<JoinHandle<()>>,
    timeout: Option<Duration>,
}

impl InProcessTransport {
    pub fn new(workers: Vec<Worker>) -> Self {
        let mut senders = Vec::with_capacity(workers.len());
        let mut handles = Vec::with_capacity(workers.len());
        for (k, worker) in workers.into_iter().enumerate() {
            let (tx, rx) = mpsc::channel::<Job>();
            senders.push(tx);
            let handle = thread::Builder::new()
                .name(format!("worker-{k}"))
                .spawn(move || {
                    for (req, reply_tx) in rx {
                        let _ = reply_tx.send(worker.round(&req));
                    }
                })
                .expect("spawning worker thread");
            handles.push(handle);
        }
        InProcessTransport {
            senders,
            handles,
            timeout: None,
        }
    }

    /// Replies slower than `timeout` fail the round.
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }
}

impl Transport for InProcessTransport {
    fn submit(&self, request: RoundRequest) -> Result<Pending> {
        let (round, chain, block) = (request.round, request.chain_id, request.block_id);
        let sender = self.senders.get(block).ok_or(Error::Index {
            what: "worker",
            index: block,
            bound: self.senders.len(),
        })?;
        let (tx, rx) = mpsc::channel();
        sender
            .send((request, tx))
            .map_err(|_| worker_failure(round, chain, block, "worker thread has stopped"))?;
        let timeout = self.timeout;
        Ok(Pending {
            wait: Box::new(move || {
                let got = match timeout {
                    Some(t) => rx.recv_timeout(t).map_err(|e| match e {
                        mpsc::RecvTimeoutError::Timeout => {
                            worker_failure(round, chain, block, format!("no reply within {t:?}"))
                        }
                        mpsc::RecvTimeoutError::Disconnected => {
                            worker_failure(round, chain, block, "worker dropped the request")
                        }
                    })?,
                    None => rx.recv().map_err(|_| {
                        worker_failure(round, chain, block, "worker dropped the request")
                    })?,
                };
                got
            }),
        })
    }
}

impl Drop for InProcessTransport {
    fn drop(&mut self) {
        self.senders.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

/// Length-prefixed frames over TCP, one connection per (chain, worker).
pub struct SocketTransport {
    addrs: Vec<SocketAddr>,
    pool: Arc<Mutex<HashMap<(usize, usize), TcpStream>>>,
    timeout: Option<Duration>,
}

impl SocketTransport {
    /// `addrs[k]` is the listening address of the worker owning block `k`.
    pub fn new(addrs: Vec<SocketAddr>, timeout: Option<Duration>) -> Self {
        SocketTransport {
            addrs,
            pool: Arc::new(Mutex::new(HashMap::new())),
            timeout,
        }
    }

    fn connection(&self, chain: usize, block: usize) -> Result<TcpStream> {
        if let Some(s) = self.pool.lock().unwrap().remove(&(chain, block)) {
            return Ok(s);
        }
        let addr = self.addrs.get(block).ok_or(Error::Index {
            what: "worker",
            index: block,
            bound: self.addrs.len(),
        })?;
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(self.timeout)?;
        Ok(stream)
    }
}

impl Transport for SocketTransport {
    fn submit(&self, request: RoundRequest) -> Result<Pending> {
        let (round, chain, block) = (request.round, request.chain_id, request.block_id);
        let mut stream = self
            .connection(chain, block)
            .map_err(|e| worker_failure(round, chain, block, e.to_string()))?;
        write_frame(&mut stream, &Message::Request(request))
            .map_err(|e| worker_failure(round, chain, block, e.to_string()))?;
        let pool = Arc::clone(&self.pool);
        Ok(Pending {
            wait: Box::new(move || {
                let msg = read_frame(&mut stream)
                    .map_err(|e| worker_failure(round, chain, block, e.to_string()))?;
                match msg {
                    Some(Message::Reply(r)) => {
                        pool.lock().unwrap().insert((chain, block), stream);
                        Ok(r)
                    }
                    Some(Message::Error(w)) => {
                        pool.lock().unwrap().insert((chain, block), stream);
                        Err(w.into_error())
                    }
                    Some(other) => Err(Error::Protocol(format!(
                        "unexpected message from worker: {other:?}"
                    ))),
                    None => Err(worker_failure(round, chain, block, "connection closed")),
                }
            }),
        })
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        if let Ok(mut pool) = self.pool.lock() {
            for (_, mut s) in pool.drain() {
                let _ = write_frame(&mut s, &Message::Shutdown);
            }
        }
    }
}

/// Answers requests on one connection until Shutdown or end of stream.
/// Returns true when the peer asked for shutdown.
pub fn serve_connection(stream: &mut TcpStream, worker: &Worker) -> Result<bool> {
    stream.set_nodelay(true)?;
    loop {
        match read_frame(stream)? {
            Some(Message::Request(req)) => {
                let out = match worker.round(&req) {
                    Ok(reply) => Message::Reply(reply),
                    Err(e) => Message::Error(WireError::from_error(
                        &e,
                        req.chain_id,
                        req.block_id,
                        req.round,
                    )),
                };
                write_frame(stream, &out)?;
            }
            Some(Message::Shutdown) => return Ok(true),
            Some(other) => {
                return Err(Error::Protocol(format!(
                    "worker received unexpected message {other:?}"
                )));
            }
            None => return Ok(false),
        }
    }
}

/// Accepts connections, one thread each, until some peer sends Shutdown.
pub fn serve(listener: TcpListener, worker: Arc<Worker>) -> Result<()> {
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false)?;
                let worker = Arc::clone(&worker);
                let stop = Arc::clone(&stop);
                thread::spawn(move || {
                    if let Ok(true) = serve_connection(&mut stream, &worker) {
                        stop.store(true, Ordering::SeqCst);
                    }
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(5))
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}
