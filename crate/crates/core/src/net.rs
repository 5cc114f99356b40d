//! TCP front end: a threaded server driving a shared [`Node`], a pooled
//! client transport for forwarding and replication, and a small blocking
//! client.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};
use crate::node::{Node, Outcome, Transport};
use crate::protocol::{parse_request, read_response, Request, Response, Verb};

/// Milliseconds since the Unix epoch.
pub fn wall_clock_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// A blocking connection speaking the line protocol.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> std::io::Result<Client> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "address did not resolve"))?;
        let stream = TcpStream::connect_timeout(&addr, timeout)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(Client { reader: BufReader::new(stream.try_clone()?), writer: stream })
    }

    /// Sends a raw line (LF appended) and reads one response.
    pub fn send_line(&mut self, line: &str) -> std::io::Result<Response> {
        self.writer.write_all(format!("{line}\n").as_bytes())?;
        self.writer.flush()?;
        read_response(&mut self.reader)?
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "connection closed"))
    }

    pub fn send(&mut self, via: Option<&str>, req: &Request) -> std::io::Result<Response> {
        let mut text = String::new();
        if let Some(origin) = via {
            text.push_str(&Request::new(Verb::Via, [origin]).to_line());
            text.push('\n');
        }
        text.push_str(&req.to_line());
        text.push('\n');
        self.writer.write_all(text.as_bytes())?;
        self.writer.flush()?;
        read_response(&mut self.reader)?
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "connection closed"))
    }
}

/// Keeps one connection per peer address. Requests to one peer are
/// serialized; a broken connection is dropped and reopened on next use.
pub struct TcpTransport {
    timeout: Duration,
    conns: Mutex<HashMap<String, Arc<Mutex<Option<Client>>>>>,
}

impl TcpTransport {
    pub fn new(timeout: Duration) -> TcpTransport {
        TcpTransport { timeout, conns: Mutex::new(HashMap::new()) }
    }

    fn slot(&self, addr: &str) -> Arc<Mutex<Option<Client>>> {
        self.conns.lock().expect("pool lock").entry(addr.to_string()).or_default().clone()
    }
}

impl Transport for TcpTransport {
    fn call(&self, addr: &str, via: Option<&str>, req: &Request) -> Result<Vec<String>> {
        let slot = self.slot(addr);
        let mut guard = slot.lock().expect("connection lock");
        // A pooled connection may have been closed by the peer; reads are
        // safe to retry once on a fresh one.
        let attempts = if req.verb.is_mutating() { 1 } else { 2 };
        let mut last_err = None;
        for _ in 0..attempts {
            if guard.is_none() {
                match Client::connect(addr, self.timeout) {
                    Ok(c) => *guard = Some(c),
                    Err(e) => {
                        last_err = Some(e);
                        break;
                    }
                }
            }
            let client = guard.as_mut().expect("connected above");
            match client.send(via, req) {
                Ok(resp) => return resp.into_result(),
                Err(e) => {
                    *guard = None;
                    last_err = Some(e);
                }
            }
        }
        tracing::debug!(%addr, error = ?last_err, "peer unreachable");
        Err(Error::OwnerUnreachable)
    }
}

/// A running server. Dropping it does not stop it; call [`Server::stop`].
pub struct Server {
    pub addr: std::net::SocketAddr,
    shutdown: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl Server {
    /// Binds `addr` and starts serving `node`. A background thread runs
    /// master housekeeping and the node's replicas.
    pub fn start(addr: &str, node: Node, transport: Arc<dyn Transport + Send + Sync>) -> std::io::Result<Server> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let node = Arc::new(Mutex::new(node));
        let shutdown = Arc::new(AtomicBool::new(false));
        let mut threads = Vec::new();

        let (n, t, stop) = (node.clone(), transport.clone(), shutdown.clone());
        threads.push(thread::spawn(move || accept_loop(listener, n, t, stop)));
        let (n, t, stop) = (node, transport, shutdown.clone());
        threads.push(thread::spawn(move || background_loop(n, t, stop)));
        Ok(Server { addr: local, shutdown, threads })
    }

    pub fn stop(self) {
        self.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads {
            let _ = t.join();
        }
    }
}

fn accept_loop(listener: TcpListener, node: Arc<Mutex<Node>>, transport: Arc<dyn Transport + Send + Sync>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let (n, t, s) = (node.clone(), transport.clone(), stop.clone());
                thread::spawn(move || {
                    if let Err(e) = serve_connection(stream, n, t, s) {
                        tracing::debug!(%peer, error = %e, "session ended");
                    }
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                thread::sleep(Duration::from_millis(100));
            }
        }
    }
}

fn background_loop(node: Arc<Mutex<Node>>, transport: Arc<dyn Transport + Send + Sync>, stop: Arc<AtomicBool>) {
    let mut last_tick = 0;
    while !stop.load(Ordering::SeqCst) {
        let now = wall_clock_ms();
        let outbound = {
            let mut n = node.lock().expect("node lock");
            if now.saturating_sub(last_tick) >= 250 {
                if let Err(e) = n.tick(now) {
                    tracing::warn!(error = %e, "housekeeping failed");
                }
                last_tick = now;
            }
            n.poll_replication(now)
        };
        for out in outbound {
            let result = transport.call(&out.master_addr, None, &out.request).map_err(|e| match e {
                Error::OwnerUnreachable => Error::MasterUnreachable,
                other => other,
            });
            node.lock().expect("node lock").replication_response(out.replica, wall_clock_ms(), result);
        }
        thread::sleep(Duration::from_millis(10));
    }
}

fn serve_connection(
    stream: TcpStream,
    node: Arc<Mutex<Node>>,
    transport: Arc<dyn Transport + Send + Sync>,
    stop: Arc<AtomicBool>,
) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_millis(200)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    let mut subs: HashSet<String> = HashSet::new();
    let mut via: Option<String> = None;
    let mut line = String::new();
    let result = loop {
        if stop.load(Ordering::SeqCst) {
            break Ok(());
        }
        match reader.read_line(&mut line) {
            Ok(0) => break Ok(()),
            Ok(_) if !line.ends_with('\n') => continue,
            Ok(_) => {}
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => continue,
            Err(e) => break Err(e),
        }
        let text = std::mem::take(&mut line);
        let req = match parse_request(&text) {
            Ok(r) => r,
            Err(e) => {
                writer.write_all(Response::from(e).encode().as_bytes())?;
                via = None;
                continue;
            }
        };
        if req.verb == Verb::Via {
            match req.args.as_slice() {
                [origin] if via.is_none() => {
                    via = Some(origin.clone());
                    continue;
                }
                _ => {
                    let e = Error::BadArguments("VIA takes one node id and precedes a request".into());
                    writer.write_all(Response::from(e).encode().as_bytes())?;
                    via = None;
                    continue;
                }
            }
        }
        if req.verb.is_replication() {
            if let Some(id) = req.args.first() {
                subs.insert(id.clone());
            }
        }
        let origin = via.take();
        let outcome = node.lock().expect("node lock").handle(&req, origin.as_deref(), wall_clock_ms());
        let response = match outcome {
            Outcome::Reply(r) => r,
            Outcome::Forward { addr, request, .. } => {
                let me = node.lock().expect("node lock").id().to_string();
                transport.call(&addr, Some(&me), &request).into()
            }
        };
        writer.write_all(response.encode().as_bytes())?;
        writer.flush()?;
        if req.verb == Verb::Quit {
            break Ok(());
        }
    };
    if !subs.is_empty() {
        node.lock().expect("node lock").session_closed(subs.iter(), wall_clock_ms());
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::node::NodeConfig;
    use crate::storage::Store;

    #[test]
    fn serve_ping_and_commands_over_tcp() {
        let node = Node::open(Store::memory(), &NodeConfig::new("A"), wall_clock_ms()).unwrap();
        let server = Server::start("127.0.0.1:0", node, Arc::new(TcpTransport::new(Duration::from_secs(2)))).unwrap();
        let mut c = Client::connect(server.addr, Duration::from_secs(2)).unwrap();
        assert_eq!(c.send_line("PING").unwrap(), Response::ok());
        assert_eq!(c.send_line("CREATEDIR /exp run:INT").unwrap(), Response::ok());
        assert_eq!(c.send_line("ADDENTRY /exp/f1 7").unwrap(), Response::ok());
        assert_eq!(c.send_line("GETATTR /exp/f1").unwrap(), Response::Ok(vec!["run 7".into()]));
        assert_eq!(c.send_line("BOGUS").unwrap(), Error::UnknownVerb.into());
        assert_eq!(c.send_line("QUIT").unwrap(), Response::ok());
        server.stop();
    }
}
