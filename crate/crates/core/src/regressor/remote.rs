//! Client for the TabPFN bridge.
//!
//! Wire format: one JSON object per line over TCP. Requests carry
//! `{"op", "id", "payload"}` and every request gets exactly one reply
//! `{"id", "ok", "result" | "error"}` with the same id. `fit` replaces the
//! session context; `predict` returns one number per row; `embed` returns one
//! vector per row; `ping` returns the bridge's capabilities and limits.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{check_rows, EmbeddingMatrix, FittedRegressor, QDataset, Regressor};
use crate::error::{Error, Result};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Fit,
    Predict,
    Embed,
    Ping,
    Shutdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: Op,
    pub id: u64,
    #[serde(default)]
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub id: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Request {
    /// Serializes to a single line (no trailing newline). Non-finite numbers
    /// have no JSON representation and are rejected.
    pub fn encode(&self) -> Result<String> {
        let finite = self.payload.x.iter().flatten().flatten().all(|v| v.is_finite())
            && self.payload.y.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Protocol("payload contains a non-finite number".into()));
        }
        serde_json::to_string(self).map_err(|e| Error::Protocol(e.to_string()))
    }

    pub fn decode(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Protocol(format!("malformed request: {e}")))
    }
}

impl Reply {
    pub fn success(id: u64, result: Value) -> Self {
        Self {
            id,
            ok: true,
            result: Some(result),
            error: None,
        }
    }

    pub fn failure(id: u64, error: impl Into<String>) -> Self {
        Self {
            id,
            ok: false,
            result: None,
            error: Some(error.into()),
        }
    }

    pub fn encode(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Protocol(e.to_string()))
    }

    pub fn decode(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Protocol(format!("malformed reply: {e}")))
    }
}

/// One connection to the bridge. Requests are strictly sequential.
#[derive(Debug)]
pub struct BridgeClient {
    endpoint: String,
    session: Mutex<Session>,
}

/// Context limits advertised in the bridge's ping reply.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Limits {
    pub max_rows: Option<usize>,
    pub max_features: Option<usize>,
}

#[derive(Debug)]
struct Session {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
    capabilities: Vec<String>,
    limits: Limits,
    /// Generation of the context currently loaded on the bridge.
    loaded: Option<u64>,
}

impl BridgeClient {
    pub fn connect(endpoint: &str) -> Result<Self> {
        let conn_err = |source| Error::Connection {
            endpoint: endpoint.to_string(),
            source,
        };
        let addrs: Vec<_> = endpoint.to_socket_addrs().map_err(conn_err)?.collect();
        let mut last = std::io::Error::new(std::io::ErrorKind::NotFound, "no address resolved");
        let mut stream = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = e,
            }
        }
        let stream = stream.ok_or_else(|| conn_err(last))?;
        stream.set_nodelay(true).ok();
        let writer = stream.try_clone().map_err(conn_err)?;
        let client = Self {
            endpoint: endpoint.to_string(),
            session: Mutex::new(Session {
                reader: BufReader::new(stream),
                writer,
                next_id: 1,
                capabilities: Vec::new(),
                limits: Limits::default(),
                loaded: None,
            }),
        };
        let info = client.ping()?;
        let caps: Vec<String> = info
            .get("capabilities")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
            .unwrap_or_default();
        let limit = |key| info.get(key).and_then(Value::as_u64).map(|v| v as usize);
        let limits = Limits {
            max_rows: limit("max_rows"),
            max_features: limit("max_features"),
        };
        let mut s = client.lock();
        s.capabilities = caps;
        s.limits = limits;
        drop(s);
        Ok(client)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn supports(&self, op: &str) -> bool {
        self.lock().capabilities.iter().any(|c| c == op)
    }

    pub fn limits(&self) -> Limits {
        self.lock().limits
    }

    pub fn ping(&self) -> Result<Value> {
        let mut s = self.lock();
        self.call(&mut s, Op::Ping, Payload::default())
    }

    /// Ends the bridge session. The connection is unusable afterwards.
    pub fn shutdown(&self) -> Result<()> {
        let mut s = self.lock();
        self.call(&mut s, Op::Shutdown, Payload::default()).map(|_| ())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn call(&self, s: &mut Session, op: Op, payload: Payload) -> Result<Value> {
        let id = s.next_id;
        s.next_id += 1;
        let line = Request { op, id, payload }.encode()?;
        let io_err = |source| Error::Connection {
            endpoint: self.endpoint.clone(),
            source,
        };
        s.writer.write_all(line.as_bytes()).map_err(io_err)?;
        s.writer.write_all(b"\n").map_err(io_err)?;
        s.writer.flush().map_err(io_err)?;

        let mut buf = String::new();
        let n = s.reader.read_line(&mut buf).map_err(io_err)?;
        if n == 0 {
            return Err(io_err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "bridge closed the connection",
            )));
        }
        let reply = Reply::decode(buf.trim_end())?;
        if reply.id != id {
            return Err(Error::Protocol(format!("reply id {} does not match request id {id}", reply.id)));
        }
        if !reply.ok {
            return Err(Error::Remote(reply.error.unwrap_or_else(|| "unspecified error".into())));
        }
        Ok(reply.result.unwrap_or(Value::Null))
    }

    fn load(&self, s: &mut Session, generation: u64, context: &QDataset) -> Result<()> {
        if s.loaded == Some(generation) {
            return Ok(());
        }
        if let Some(max) = s.limits.max_rows.filter(|&m| context.len() > m) {
            return Err(Error::InvalidInput(format!(
                "context has {} rows, bridge accepts at most {max}",
                context.len()
            )));
        }
        if let Some(max) = s.limits.max_features.filter(|&m| context.width() > m) {
            return Err(Error::InvalidInput(format!(
                "context has {} features, bridge accepts at most {max}",
                context.width()
            )));
        }
        s.loaded = None;
        let payload = Payload {
            x: Some(context.features().to_vec()),
            y: Some(context.targets().to_vec()),
            layer: None,
        };
        self.call(s, Op::Fit, payload)?;
        s.loaded = Some(generation);
        Ok(())
    }
}

fn parse_numbers(value: &Value, expected: usize) -> Result<Vec<f64>> {
    let arr = value
        .as_array()
        .ok_or_else(|| Error::Protocol("expected an array of numbers".into()))?;
    if arr.len() != expected {
        return Err(Error::Protocol(format!("expected {expected} values, got {}", arr.len())));
    }
    arr.iter()
        .map(|v| {
            v.as_f64()
                .filter(|f| f.is_finite())
                .ok_or_else(|| Error::Protocol(format!("non-numeric value {v}")))
        })
        .collect()
}

/// Backend that delegates inference to a running bridge process.
#[derive(Debug)]
pub struct RemoteBackend {
    endpoint: String,
    embed_layer: Option<i64>,
    client: Mutex<Option<Arc<BridgeClient>>>,
    generation: AtomicU64,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, embed_layer: Option<i64>) -> Self {
        Self {
            endpoint: endpoint.into(),
            embed_layer,
            client: Mutex::new(None),
            generation: AtomicU64::new(0),
        }
    }

    fn client(&self) -> Result<Arc<BridgeClient>> {
        let mut slot = self.client.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(c) = slot.as_ref() {
            return Ok(Arc::clone(c));
        }
        let c = Arc::new(BridgeClient::connect(&self.endpoint)?);
        *slot = Some(Arc::clone(&c));
        Ok(c)
    }
}

impl Regressor for RemoteBackend {
    fn name(&self) -> &'static str {
        "remote"
    }

    fn fit(&self, context: &QDataset) -> Result<Arc<dyn FittedRegressor>> {
        if context.is_empty() {
            return Err(Error::EmptyContext);
        }
        let client = self.client()?;
        let generation = self.generation.fetch_add(1, Ordering::Relaxed) + 1;
        let context = Arc::new(context.clone());
        {
            let mut s = client.lock();
            client.load(&mut s, generation, &context)?;
        }
        Ok(Arc::new(RemoteFit {
            client,
            generation,
            context,
            embed_layer: self.embed_layer,
        }))
    }
}

/// A fitted remote handle. It keeps its own copy of the context and reloads
/// it onto the bridge whenever another handle has replaced the session
/// context, so predictions stay a pure function of this handle.
#[derive(Debug)]
pub struct RemoteFit {
    client: Arc<BridgeClient>,
    generation: u64,
    context: Arc<QDataset>,
    embed_layer: Option<i64>,
}

impl FittedRegressor for RemoteFit {
    fn backend(&self) -> &'static str {
        "remote"
    }

    fn width(&self) -> usize {
        self.context.width()
    }

    fn predict(&self, queries: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_rows(queries, self.width())?;
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let mut s = self.client.lock();
        self.client.load(&mut s, self.generation, &self.context)?;
        let payload = Payload {
            x: Some(queries.to_vec()),
            ..Payload::default()
        };
        let result = self.client.call(&mut s, Op::Predict, payload)?;
        parse_numbers(&result, queries.len())
    }

    fn embed(&self, rows: &[Vec<f64>]) -> Result<EmbeddingMatrix> {
        if !self.client.supports("embed") {
            return Err(Error::Capability("embeddings"));
        }
        check_rows(rows, self.width())?;
        let mut s = self.client.lock();
        self.client.load(&mut s, self.generation, &self.context)?;
        let payload = Payload {
            x: Some(rows.to_vec()),
            y: None,
            layer: self.embed_layer,
        };
        let result = self.client.call(&mut s, Op::Embed, payload)?;
        let arr = result
            .as_array()
            .ok_or_else(|| Error::Protocol("expected an array of embeddings".into()))?;
        if arr.len() != rows.len() {
            return Err(Error::Protocol(format!("expected {} embeddings, got {}", rows.len(), arr.len())));
        }
        let rows = arr
            .iter()
            .map(|r| {
                let len = r.as_array().map_or(0, Vec::len);
                parse_numbers(r, len)
            })
            .collect::<Result<Vec<_>>>()?;
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Protocol("embedding rows differ in width".into()));
        }
        Ok(EmbeddingMatrix { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn request_wire_shape() {
        let req = Request {
            op: Op::Fit,
            id: 7,
            payload: Payload {
                x: Some(vec![vec![0.1, 2.0]]),
                y: Some(vec![-1.5]),
                layer: None,
            },
        };
        assert_eq!(
            req.encode().unwrap(),
            r#"{"op":"fit","id":7,"payload":{"x":[[0.1,2.0]],"y":[-1.5]}}"#
        );
        let ping = Request::decode(r#"{"op":"ping","id":1}"#).unwrap();
        assert_eq!(ping.op, Op::Ping);
        assert_eq!(ping.payload, Payload::default());
    }

    #[test]
    fn reply_wire_shape() {
        assert_eq!(
            Reply::failure(3, "no context").encode().unwrap(),
            r#"{"id":3,"ok":false,"error":"no context"}"#
        );
        let ok = Reply::decode(r#"{"id":4,"ok":true,"result":[1.0,2.5]}"#).unwrap();
        assert_eq!(parse_numbers(ok.result.as_ref().unwrap(), 2).unwrap(), vec![1.0, 2.5]);
    }

    #[test]
    fn non_finite_payload_rejected() {
        let req = Request {
            op: Op::Predict,
            id: 1,
            payload: Payload {
                x: Some(vec![vec![f64::NAN]]),
                ..Payload::default()
            },
        };
        assert!(matches!(req.encode(), Err(Error::Protocol(_))));
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(Request::decode("{\"op\":\"train\",\"id\":1}").is_err());
        assert!(Request::decode("not json").is_err());
        assert!(Reply::decode("{\"ok\":true}").is_err());
    }

    #[test]
    fn unreachable_bridge_is_connection_error() {
        // bind then drop to obtain a port nobody listens on
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let backend = RemoteBackend::new(format!("127.0.0.1:{port}"), None);
        let ctx = QDataset::new(vec![vec![0.0]], vec![1.0]).unwrap();
        assert!(matches!(backend.fit(&ctx), Err(Error::Connection { .. })));
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![Just(Op::Fit), Just(Op::Predict), Just(Op::Embed), Just(Op::Ping), Just(Op::Shutdown)]
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
    }

    proptest! {
        #[test]
        fn request_round_trip(
            op in op(),
            id in any::<u64>(),
            x in prop::option::of(prop::collection::vec(prop::collection::vec(finite(), 0..4), 0..4)),
            y in prop::option::of(prop::collection::vec(finite(), 0..4)),
            layer in prop::option::of(-4i64..12),
        ) {
            let req = Request { op, id, payload: Payload { x, y, layer } };
            let line = req.encode().unwrap();
            prop_assert!(!line.contains('\n'));
            prop_assert_eq!(Request::decode(&line).unwrap(), req);
        }

        #[test]
        fn reply_round_trip(id in any::<u64>(), values in prop::collection::vec(finite(), 0..6), err in "[a-z ]{0,12}") {
            let ok = Reply::success(id, serde_json::json!(values));
            prop_assert_eq!(Reply::decode(&ok.encode().unwrap()).unwrap(), ok);
            let bad = Reply::failure(id, err);
            prop_assert_eq!(Reply::decode(&bad.encode().unwrap()).unwrap(), bad);
        }
    }
}
