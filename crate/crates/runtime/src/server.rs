//! TCP front end. Each connection speaks NDJSON, or WebSocket text frames
//! when the client opens with an HTTP upgrade request.

use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{select, unbounded, Receiver, Sender};
use serde_json::Value;
use tungstenite::{Message, WebSocket};

use crate::protocol::{parse_request, ServerMessage};
use crate::session::SessionHandle;

/// How long a new connection may take to reveal an HTTP upgrade request.
const SNIFF_WINDOW: Duration = Duration::from_millis(250);
const POLL: Duration = Duration::from_millis(20);

pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn bind<A: ToSocketAddrs>(addr: A, session: SessionHandle) -> io::Result<Server> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = thread::Builder::new()
            .name("hydrolab-accept".into())
            .spawn(move || accept_loop(listener, session, flag))?;
        Ok(Server {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop accepting; open connections end when their peers disconnect or
    /// the session closes.
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

fn accept_loop(listener: TcpListener, session: SessionHandle, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let session = session.clone();
                let _ = thread::Builder::new().name("hydrolab-conn".into()).spawn(move || {
                    let _ = serve_connection(stream, session);
                });
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(_) => thread::sleep(POLL),
        }
    }
}

fn looks_like_http(stream: &TcpStream) -> io::Result<bool> {
    stream.set_read_timeout(Some(POLL))?;
    let deadline = Instant::now() + SNIFF_WINDOW;
    let mut buf = [0u8; 4];
    while Instant::now() < deadline {
        match stream.peek(&mut buf) {
            Ok(0) => return Ok(false),
            Ok(n) if n >= 4 => return Ok(&buf == b"GET "),
            Ok(n) => {
                if !b"GET ".starts_with(&buf[..n]) {
                    return Ok(false);
                }
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(false)
}

fn serve_connection(stream: TcpStream, session: SessionHandle) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    if looks_like_http(&stream)? {
        stream.set_read_timeout(None)?;
        let ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
        serve_websocket(ws, session)
    } else {
        serve_ndjson(stream, session)
    }
}

/// Reply to one request line.
fn answer(session: &SessionHandle, line: &str) -> ServerMessage {
    match parse_request(line) {
        Ok(req) => match session.apply(req.command) {
            Ok(step) => ServerMessage::Ack {
                ack: req.id,
                applied_at_step: step,
            },
            Err(e) => ServerMessage::Error {
                error: req.id,
                message: e.to_string(),
            },
        },
        Err((id, message)) => ServerMessage::Error { error: id, message },
    }
}

fn hello(session: &SessionHandle) -> ServerMessage {
    ServerMessage::Hello { hello: session.hello() }
}

fn serve_ndjson(stream: TcpStream, session: SessionHandle) -> io::Result<()> {
    stream.set_read_timeout(None)?;
    let (out_tx, out_rx): (Sender<String>, Receiver<String>) = unbounded();
    let writer_stream = stream.try_clone()?;
    let greeting = hello(&session).to_line();
    let feed = session.subscribe();
    let writer = thread::spawn(move || -> io::Result<()> {
        let mut w = io::BufWriter::new(writer_stream);
        writeln!(w, "{greeting}")?;
        loop {
            select! {
                recv(out_rx) -> msg => match msg {
                    Ok(line) => writeln!(w, "{line}")?,
                    Err(_) => break,
                },
                recv(feed.receiver()) -> snap => match snap {
                    Ok(s) => writeln!(w, "{}", ServerMessage::Snapshot { snapshot: (*s).clone() }.to_line())?,
                    Err(_) => break,
                },
                default(Duration::from_millis(200)) => {}
            }
            w.flush()?;
        }
        w.flush()
    });
    let reader = BufReader::new(stream.try_clone()?);
    for line in reader.lines() {
        let line = match line {
            Ok(l) => l,
            Err(_) => break,
        };
        if line.trim().is_empty() {
            continue;
        }
        let reply = answer(&session, &line);
        if out_tx.send(reply.to_line()).is_err() {
            break;
        }
    }
    drop(out_tx);
    let _ = stream.shutdown(std::net::Shutdown::Both);
    let _ = writer.join();
    Ok(())
}

fn serve_websocket(mut ws: WebSocket<TcpStream>, session: SessionHandle) -> io::Result<()> {
    let ws_err = |e: tungstenite::Error| io::Error::other(e.to_string());
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let feed = session.subscribe();
    ws.send(Message::text(hello(&session).to_line())).map_err(ws_err)?;
    loop {
        match ws.read() {
            Ok(Message::Text(text)) => {
                let reply = answer(&session, text.as_str());
                ws.send(Message::text(reply.to_line())).map_err(ws_err)?;
            }
            Ok(Message::Binary(_)) => {
                let reply = ServerMessage::Error {
                    error: Value::Null,
                    message: "binary frames are not supported".into(),
                };
                ws.send(Message::text(reply.to_line())).map_err(ws_err)?;
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => break,
            Err(e) => return Err(ws_err(e)),
        }
        while let Some(snap) = feed.try_recv() {
            let frame = ServerMessage::Snapshot {
                snapshot: (*snap).clone(),
            }
            .to_line();
            ws.write(Message::text(frame)).map_err(ws_err)?;
        }
        match ws.flush() {
            Ok(()) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => break,
            Err(e) => return Err(ws_err(e)),
        }
    }
    Ok(())
}
