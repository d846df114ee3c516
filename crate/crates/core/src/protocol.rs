//! Newline-delimited JSON protocol for remote evaluators, a blocking TCP
//! client implementing [`Evaluator`], and a mock server over any evaluator.
//!
//! One request object per line, one response object per line, UTF-8. Every
//! message carries `"v": 1`. Floats use the shortest decimal that round-trips.

use std::cell::{Cell, RefCell};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{EvalError, Evaluator, EvaluatorCaps, EvaluatorOutput, ScoredAction};
use crate::Token;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("response id {got:?} does not match request id {expected:?}")]
    IdMismatch { expected: String, got: String },
    #[error("server error: {0}")]
    Server(String),
    #[error("connection closed by peer")]
    Closed,
    #[error("invalid response: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRequest {
    pub v: u32,
    pub request_id: String,
    pub state_tokens: Vec<Token>,
    pub top_k: usize,
    pub want_reference: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireAction {
    pub token: Token,
    pub logp: f64,
    pub ref_logp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalResponse {
    pub v: u32,
    pub request_id: String,
    pub actions: Vec<WireAction>,
    pub value: f64,
    pub is_terminal: bool,
    /// Terminal reward, present only for terminal states on servers that have one.
    #[serde(default)]
    pub reward: Option<f64>,
    pub error: Option<String>,
}

impl EvalResponse {
    pub fn error(request_id: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            request_id: request_id.into(),
            actions: Vec::new(),
            value: 0.0,
            is_terminal: false,
            reward: None,
            error: Some(message.into()),
        }
    }

    /// Checks the wire invariants against the request it answers.
    pub fn validate(&self, request: &EvalRequest) -> Result<(), ProtocolError> {
        if self.v != PROTOCOL_VERSION {
            return Err(ProtocolError::Version(self.v));
        }
        if self.request_id != request.request_id {
            return Err(ProtocolError::IdMismatch {
                expected: request.request_id.clone(),
                got: self.request_id.clone(),
            });
        }
        if let Some(e) = &self.error {
            return Err(ProtocolError::Server(e.clone()));
        }
        if self.actions.len() > request.top_k {
            return Err(ProtocolError::Invalid(format!(
                "{} actions for top_k {}",
                self.actions.len(),
                request.top_k
            )));
        }
        if !self.value.is_finite() || self.reward.is_some_and(|r| !r.is_finite()) {
            return Err(ProtocolError::Invalid("non-finite value".into()));
        }
        for a in &self.actions {
            if !a.logp.is_finite() || a.ref_logp.is_some_and(|r| !r.is_finite()) {
                return Err(ProtocolError::Invalid(format!("non-finite log-prob for token {}", a.token)));
            }
            if request.want_reference && a.ref_logp.is_none() {
                return Err(ProtocolError::Invalid(format!("missing ref_logp for token {}", a.token)));
            }
        }
        Ok(())
    }
}

/// Encodes one message as a single line, newline included.
pub fn encode_line<T: Serialize>(message: &T) -> Result<String, ProtocolError> {
    let mut s = serde_json::to_string(message).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn decode_line<'a, T: Deserialize<'a>>(line: &'a str) -> Result<T, ProtocolError> {
    serde_json::from_str(line.trim_end_matches(['\n', '\r'])).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

/// Answers one request from an in-process evaluator. Actions are ordered by
/// descending log-prob, ties by ascending token, and cut to `top_k`.
pub fn handle_request<E: Evaluator + ?Sized>(evaluator: &E, request: &EvalRequest) -> EvalResponse {
    if request.v != PROTOCOL_VERSION {
        return EvalResponse::error(&request.request_id, format!("unsupported protocol version {}", request.v));
    }
    let caps = evaluator.caps();
    if request.want_reference && !caps.has_reference_policy {
        return EvalResponse::error(&request.request_id, "server has no reference policy");
    }
    let out = match evaluator.evaluate_state(&request.state_tokens, request.top_k) {
        Ok(out) => out,
        Err(e) => return EvalResponse::error(&request.request_id, e.to_string()),
    };
    let reward = if out.is_terminal_state && caps.has_terminal_reward {
        match evaluator.terminal_reward(&request.state_tokens) {
            Ok(r) => Some(r),
            Err(e) => return EvalResponse::error(&request.request_id, e.to_string()),
        }
    } else {
        None
    };
    let mut actions = out.actions;
    actions.sort_by(|a, b| {
        b.policy_logprob
            .total_cmp(&a.policy_logprob)
            .then(a.token.cmp(&b.token))
    });
    actions.truncate(request.top_k);
    EvalResponse {
        v: PROTOCOL_VERSION,
        request_id: request.request_id.clone(),
        actions: actions
            .into_iter()
            .map(|a| WireAction {
                token: a.token,
                logp: a.policy_logprob,
                ref_logp: if request.want_reference { a.ref_logprob } else { None },
            })
            .collect(),
        value: out.value,
        is_terminal: out.is_terminal_state,
        reward,
        error: None,
    }
}

/// Answers one raw line; unparseable input yields an error response.
pub fn handle_line<E: Evaluator + ?Sized>(evaluator: &E, line: &str) -> EvalResponse {
    match decode_line::<EvalRequest>(line) {
        Ok(req) => handle_request(evaluator, &req),
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("request_id").and_then(|i| i.as_str()).map(str::to_owned))
                .unwrap_or_default();
            EvalResponse::error(id, e.to_string())
        }
    }
}

/// Blocking client: one connection, one request in flight.
pub struct RemoteEvaluator {
    reader: RefCell<BufReader<TcpStream>>,
    writer: RefCell<TcpStream>,
    caps: EvaluatorCaps,
    timeout: Duration,
    next_id: Cell<u64>,
    // reward piggybacked on the last terminal response
    last_reward: RefCell<Option<(Vec<Token>, f64)>>,
}

impl RemoteEvaluator {
    pub fn connect(addr: impl ToSocketAddrs, caps: EvaluatorCaps) -> Result<Self, ProtocolError> {
        Self::connect_with_timeout(addr, caps, DEFAULT_TIMEOUT)
    }

    pub fn connect_with_timeout(
        addr: impl ToSocketAddrs,
        caps: EvaluatorCaps,
        timeout: Duration,
    ) -> Result<Self, ProtocolError> {
        let mut last = None;
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(timeout))?;
                    stream.set_write_timeout(Some(timeout))?;
                    stream.set_nodelay(true)?;
                    return Ok(Self {
                        reader: RefCell::new(BufReader::new(stream.try_clone()?)),
                        writer: RefCell::new(stream),
                        caps,
                        timeout,
                        next_id: Cell::new(0),
                        last_reward: RefCell::new(None),
                    });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last
            .unwrap_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))
            .into())
    }

    fn timed(&self, e: io::Error) -> ProtocolError {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => ProtocolError::Timeout(self.timeout),
            _ => ProtocolError::Io(e),
        }
    }

    /// Sends a request and reads its validated response.
    pub fn roundtrip(&self, request: &EvalRequest) -> Result<EvalResponse, ProtocolError> {
        let line = encode_line(request)?;
        self.writer
            .borrow_mut()
            .write_all(line.as_bytes())
            .map_err(|e| self.timed(e))?;
        let mut buf = String::new();
        let n = self.reader.borrow_mut().read_line(&mut buf).map_err(|e| self.timed(e))?;
        if n == 0 {
            return Err(ProtocolError::Closed);
        }
        let resp: EvalResponse = decode_line(&buf)?;
        resp.validate(request)?;
        Ok(resp)
    }

    fn fresh_id(&self) -> String {
        let id = self.next_id.get();
        self.next_id.set(id + 1);
        format!("r{id}")
    }
}

impl Evaluator for RemoteEvaluator {
    fn caps(&self) -> EvaluatorCaps {
        self.caps
    }

    fn evaluate_state(&self, state: &[Token], top_k: usize) -> Result<EvaluatorOutput, EvalError> {
        let req = EvalRequest {
            v: PROTOCOL_VERSION,
            request_id: self.fresh_id(),
            state_tokens: state.to_vec(),
            top_k,
            want_reference: self.caps.has_reference_policy,
        };
        let resp = self.roundtrip(&req)?;
        if let Some(r) = resp.reward {
            *self.last_reward.borrow_mut() = Some((state.to_vec(), r));
        }
        Ok(EvaluatorOutput {
            actions: resp
                .actions
                .into_iter()
                .map(|a| ScoredAction {
                    token: a.token,
                    policy_logprob: a.logp,
                    ref_logprob: a.ref_logp,
                })
                .collect(),
            value: resp.value,
            is_terminal_state: resp.is_terminal,
        })
    }

    fn terminal_reward(&self, state: &[Token]) -> Result<f64, EvalError> {
        if !self.caps.has_terminal_reward {
            return Err(EvalError::NoTerminalReward);
        }
        if let Some((s, r)) = self.last_reward.borrow().as_ref() {
            if s == state {
                return Ok(*r);
            }
        }
        let req = EvalRequest {
            v: PROTOCOL_VERSION,
            request_id: self.fresh_id(),
            state_tokens: state.to_vec(),
            top_k: 0,
            want_reference: false,
        };
        let resp = self.roundtrip(&req)?;
        match (resp.is_terminal, resp.reward) {
            (true, Some(r)) => Ok(r),
            (false, _) => Err(ProtocolError::Invalid("state is not terminal".into()).into()),
            (true, None) => Err(EvalError::NoTerminalReward),
        }
    }
}

/// Threaded TCP server answering requests from a shared evaluator, one
/// thread per connection. Stops accepting on [`MockServer::shutdown`] or drop.
pub struct MockServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn spawn<E>(evaluator: Arc<E>, addr: impl ToSocketAddrs) -> io::Result<Self>
    where
        E: Evaluator + Send + Sync + ?Sized + 'static,
    {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let ev = evaluator.clone();
                std::thread::spawn(move || {
                    if let Err(e) = serve_connection(&*ev, stream) {
                        log::debug!("connection ended: {e}");
                    }
                });
            }
        });
        Ok(Self {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        if let Some(h) = self.accept.take() {
            self.stop.store(true, Ordering::SeqCst);
            // wake the blocking accept
            if let Ok(s) = TcpStream::connect(self.addr) {
                let _ = s.shutdown(Shutdown::Both);
            }
            let _ = h.join();
        }
    }

    /// Blocks until the accept loop exits.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Serves requests on one stream until the peer disconnects.
pub fn serve_connection<E: Evaluator + ?Sized>(evaluator: &E, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_line(evaluator, &line);
        let out = encode_line(&resp).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        writer.write_all(out.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{RewardSpec, ToyEnv};
    use crate::evaluator::{TabularEvaluator, ValueTable};
    use crate::policy::{HashedLogits, Policy};

    fn evaluator() -> TabularEvaluator {
        let env = ToyEnv::new(5, 3, RewardSpec::SentimentProxy);
        let p: Arc<dyn Policy> = Arc::new(HashedLogits::new(5, 3, 1.0));
        let r: Arc<dyn Policy> = Arc::new(HashedLogits::new(5, 4, 1.0));
        TabularEvaluator::new(env, p, Some(r), Arc::new(|s: &[Token]| s.len() as f64 * 0.25)).unwrap()
    }

    fn req(state: Vec<Token>, top_k: usize) -> EvalRequest {
        EvalRequest {
            v: 1,
            request_id: "a".into(),
            state_tokens: state,
            top_k,
            want_reference: true,
        }
    }

    #[test]
    fn mock_orders_and_truncates() {
        let ev = evaluator();
        let resp = handle_request(&ev, &req(vec![1], 3));
        assert_eq!(resp.actions.len(), 3);
        assert!(resp.actions.windows(2).all(|w| w[0].logp >= w[1].logp));
        assert_eq!(resp.value, 0.25);
        resp.validate(&req(vec![1], 3)).unwrap();
        let full = handle_request(&ev, &req(vec![1], 100));
        assert_eq!(full.actions.len(), 5);
    }

    #[test]
    fn terminal_response_carries_reward() {
        let ev = evaluator();
        let resp = handle_request(&ev, &req(vec![0, 1, 4], 5));
        assert!(resp.is_terminal && resp.actions.is_empty());
        assert_eq!(resp.reward, Some(ev.terminal_reward(&[0, 1, 4]).unwrap()));
    }

    #[test]
    fn no_reference_means_null_ref_logp() {
        let ev = evaluator();
        let mut r = req(vec![], 2);
        r.want_reference = false;
        let resp = handle_request(&ev, &r);
        assert!(resp.actions.iter().all(|a| a.ref_logp.is_none()));
    }

    #[test]
    fn malformed_line_gives_error_response() {
        let ev = evaluator();
        let resp = handle_line(&ev, "{\"v\":1,\"request_id\":\"z\",\"state_tokens\":[");
        assert!(resp.error.is_some());
        let resp = handle_line(&ev, r#"{"v":1,"request_id":"q","state_tokens":[9],"top_k":2,"want_reference":true}"#);
        assert_eq!(resp.request_id, "q");
        assert!(resp.error.unwrap().contains("token"));
    }

    #[test]
    fn validate_rejects_bad_responses() {
        let r = req(vec![], 2);
        let mut resp = handle_request(&evaluator(), &r);
        resp.request_id = "b".into();
        assert!(matches!(resp.validate(&r), Err(ProtocolError::IdMismatch { .. })));
        let mut resp = handle_request(&evaluator(), &r);
        resp.value = f64::NAN;
        assert!(matches!(resp.validate(&r), Err(ProtocolError::Invalid(_))));
        let resp = EvalResponse::error("a", "boom");
        assert!(matches!(resp.validate(&r), Err(ProtocolError::Server(m)) if m == "boom"));
        let mut resp = handle_request(&evaluator(), &r);
        resp.v = 2;
        assert!(matches!(resp.validate(&r), Err(ProtocolError::Version(2))));
    }

    #[test]
    fn every_line_has_version() {
        let line = encode_line(&req(vec![1, 2], 4)).unwrap();
        assert!(line.ends_with('\n') && line.matches('\n').count() == 1);
        assert!(line.contains("\"v\":1"));
    }
}
