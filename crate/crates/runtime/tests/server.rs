use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

use hydrolab_runtime::{Server, ServerMessage, SessionConfig, SessionHandle, Speed};
use serde_json::{json, Value};
use tungstenite::Message;

fn serve() -> (SessionHandle, Server) {
    let session = SessionHandle::start(SessionConfig {
        speed: Speed(50.0),
        ..SessionConfig::default()
    })
    .unwrap();
    let server = Server::bind("127.0.0.1:0", session.clone()).unwrap();
    (session, server)
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(server: &Server) -> Client {
        let stream = TcpStream::connect(server.local_addr()).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        Client {
            reader: BufReader::new(stream.try_clone().unwrap()),
            writer: stream,
        }
    }

    fn next(&mut self) -> Value {
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap_or_else(|e| panic!("{line:?}: {e}"))
    }

    fn send(&mut self, v: Value) {
        writeln!(self.writer, "{v}").unwrap();
    }

    /// Skip snapshot frames until a reply arrives.
    fn reply(&mut self) -> Value {
        loop {
            let v = self.next();
            if v.get("snapshot").is_none() {
                return v;
            }
        }
    }
}

#[test]
fn ndjson_hello_ack_error_and_snapshots() {
    let (session, server) = serve();
    let mut c = Client::connect(&server);
    let hello = c.next();
    assert_eq!(hello["hello"]["version"], json!("1"));
    assert_eq!(hello["hello"]["config"]["dt"], json!(0.1));
    assert!(hello["hello"]["config"]["rig"]["tank"]["capacitance"].is_number());

    c.send(json!({"cmd": "set_setpoint", "args": {"pct": 50}, "id": 1}));
    assert_eq!(c.reply(), json!({"ack": 1, "applied_at_step": 0}));

    c.send(json!({"cmd": "set_setpoint", "args": {"pct": 150}, "id": 2}));
    let err = c.reply();
    assert_eq!(err["error"], json!(2));
    assert!(err["message"].as_str().unwrap().contains("ValidationError"));

    c.send(json!({"cmd": "start", "id": 3}));
    assert_eq!(c.reply()["ack"], json!(3));
    let mut moving = 0;
    while moving < 5 {
        let v = c.next();
        if let Some(s) = v.get("snapshot") {
            assert_eq!(s["setpoint_pct"], json!(50.0));
            if s["t_s"].as_f64().unwrap() > 0.0 {
                moving += 1;
            }
        }
    }
    let parsed: ServerMessage = serde_json::from_value(c.next()).unwrap();
    assert!(matches!(parsed, ServerMessage::Snapshot { .. }));

    writeln!(c.writer, "garbage").unwrap();
    let bad = c.reply();
    assert_eq!(bad["error"], Value::Null);
    drop(c);
    server.shutdown();
    session.shutdown().unwrap();
}

#[test]
fn websocket_clients_get_the_same_protocol() {
    let (session, server) = serve();
    let url = format!("ws://{}/", server.local_addr());
    let (mut ws, _) = tungstenite::connect(url).unwrap();
    let first: Value = match ws.read().unwrap() {
        Message::Text(t) => serde_json::from_str(t.as_str()).unwrap(),
        other => panic!("{other:?}"),
    };
    assert!(first.get("hello").is_some());
    ws.send(Message::text(
        json!({"cmd": "set_mode", "args": {"mode": "pi"}, "id": 7}).to_string(),
    ))
    .unwrap();
    loop {
        let Message::Text(t) = ws.read().unwrap() else { continue };
        let v: Value = serde_json::from_str(t.as_str()).unwrap();
        if v.get("snapshot").is_some() {
            continue;
        }
        assert_eq!(v, json!({"ack": 7, "applied_at_step": 0}));
        break;
    }
    loop {
        let Message::Text(t) = ws.read().unwrap() else { continue };
        let v: Value = serde_json::from_str(t.as_str()).unwrap();
        if let Some(s) = v.get("snapshot") {
            if s["mode"] == json!("pi") {
                break;
            }
        }
    }
    ws.close(None).unwrap();
    server.shutdown();
    session.shutdown().unwrap();
}
