#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use icrl::regressor::remote::{Op, Reply, Request};
use icrl::regressor::{FittedRegressor, Knn, QDataset, Regressor};
use serde_json::{json, Value};

/// How the stand-in bridge misbehaves, if at all.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub enum Fault {
    #[default]
    None,
    /// Every reply carries a different id than its request.
    WrongId,
    /// The connection is closed after the ping handshake.
    HangUp,
    /// Fit requests are answered with an error.
    RejectFit,
}

/// A bridge stand-in that serves the k-NN backend over the wire protocol.
/// Each connection is its own session with its own context.
pub struct MockBridge {
    pub endpoint: String,
    fits: Arc<AtomicUsize>,
}

impl MockBridge {
    pub fn start(k: usize, embed: bool, fault: Fault) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let endpoint = listener.local_addr().unwrap().to_string();
        let fits = Arc::new(AtomicUsize::new(0));
        let counter = Arc::clone(&fits);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let counter = Arc::clone(&counter);
                thread::spawn(move || serve(stream, k, embed, fault, counter));
            }
        });
        Self { endpoint, fits }
    }

    /// Number of fit requests received over all sessions.
    pub fn fits(&self) -> usize {
        self.fits.load(Ordering::SeqCst)
    }
}

fn serve(stream: TcpStream, k: usize, embed: bool, fault: Fault, fits: Arc<AtomicUsize>) {
    let mut writer = stream.try_clone().unwrap();
    let reader = BufReader::new(stream);
    let mut model: Option<Arc<dyn FittedRegressor>> = None;
    for line in reader.lines() {
        let Ok(line) = line else { break };
        let reply = match Request::decode(&line) {
            Err(e) => Reply::failure(0, format!("malformed request: {e}")),
            Ok(req) => {
                let id = if fault == Fault::WrongId { req.id + 1 } else { req.id };
                let mut reply = handle(&req, k, embed, fault, &mut model, &fits);
                reply.id = id;
                reply
            }
        };
        let done = reply.ok && reply.result == Some(json!("bye"));
        writeln!(writer, "{}", reply.encode().unwrap()).unwrap();
        if done || (fault == Fault::HangUp && line.contains("\"ping\"")) {
            break;
        }
    }
}

fn handle(
    req: &Request,
    k: usize,
    embed: bool,
    fault: Fault,
    model: &mut Option<Arc<dyn FittedRegressor>>,
    fits: &AtomicUsize,
) -> Reply {
    let id = req.id;
    match req.op {
        Op::Ping => {
            let mut caps = vec!["fit", "predict", "ping", "shutdown"];
            if embed {
                caps.push("embed");
            }
            Reply::success(id, json!({"capabilities": caps, "max_rows": 10000, "max_features": 500}))
        }
        Op::Shutdown => Reply::success(id, json!("bye")),
        Op::Fit => {
            fits.fetch_add(1, Ordering::SeqCst);
            if fault == Fault::RejectFit {
                return Reply::failure(id, "context too large");
            }
            let (Some(x), Some(y)) = (req.payload.x.clone(), req.payload.y.clone()) else {
                return Reply::failure(id, "fit needs x and y");
            };
            match QDataset::new(x, y).and_then(|d| Knn::new(k).unwrap().fit(&d)) {
                Ok(m) => {
                    *model = Some(m);
                    Reply::success(id, Value::Null)
                }
                Err(e) => Reply::failure(id, e.to_string()),
            }
        }
        Op::Predict | Op::Embed => {
            let Some(m) = model.as_ref() else {
                return Reply::failure(id, "no context");
            };
            let x = req.payload.x.clone().unwrap_or_default();
            if req.op == Op::Predict {
                match m.predict(&x) {
                    Ok(p) => Reply::success(id, json!(p)),
                    Err(e) => Reply::failure(id, e.to_string()),
                }
            } else if !embed {
                Reply::failure(id, "embed not supported")
            } else {
                match m.embed(&x) {
                    Ok(e) => Reply::success(id, json!(e.rows)),
                    Err(e) => Reply::failure(id, e.to_string()),
                }
            }
        }
    }
}

/// Sends raw protocol lines on a fresh connection and returns the replies.
pub fn exchange(endpoint: &str, lines: &[&str]) -> Vec<Reply> {
    let stream = TcpStream::connect(endpoint).unwrap();
    let mut writer = stream.try_clone().unwrap();
    let mut reader = BufReader::new(stream);
    lines
        .iter()
        .map(|l| {
            writeln!(writer, "{l}").unwrap();
            let mut buf = String::new();
            reader.read_line(&mut buf).unwrap();
            Reply::decode(buf.trim_end()).unwrap()
        })
        .collect()
}
