//! Moves frames between the edge and the head server.
//!
//! One [`Transport`] interface backs two implementations: a deterministic
//! in-process channel for analysis and tests, and a TCP client for real
//! two-process deployment. The server side is a plain state machine
//! ([`ServerState`]) shared by both, so the simulated path exercises exactly
//! the protocol the sockets speak.
//!
//! The type split enforces the deployment contract: an SC edge holds only a
//! [`BackboneSlice`], an SC server only a [`HeadsSlice`].

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

use crate::channel::{simulate_transfer, ChannelModel};
use crate::model::{BackboneSlice, HeadsSlice, ModelError, MtlModel};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::wire::{
    self, FrameBody, SplitFrame, TaskLogits, TensorPayload, WireError, ERR_INTERNAL, ERR_SHAPE,
    ERR_UNSUPPORTED_REQUEST, HEADER_LEN,
};

/// Upper bound on accepted body sizes (large enough for raw-image inputs).
pub const MAX_BODY_BYTES: u32 = 256 * 1024 * 1024;

/// Default per-request socket timeout.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connect to {addr} failed: {source}")]
    Connect { addr: String, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("request timed out")]
    Timeout,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("response id {got} does not match request id {sent}")]
    RequestIdMismatch { sent: u64, got: u64 },
    #[error("remote error {code}: {message}")]
    Remote { code: u16, message: String },
    #[error("unexpected response frame type {0}")]
    UnexpectedResponse(u8),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("edge endpoint is in the wrong mode: {0}")]
    WrongMode(&'static str),
}

/// One synchronous request/response exchange.
pub trait Transport {
    fn request(&mut self, frame: &SplitFrame) -> Result<SplitFrame, TransportError>;
}

// ── Server state machine ─────────────────────────────────────────────

enum ServerModel {
    /// Split: heads only; the backbone never leaves the edge.
    Sc(HeadsSlice),
    /// Remote-only: the whole model lives here.
    Roc(Box<MtlModel>),
}

/// Shared, read-only request handler.
pub struct ServerState {
    model: ServerModel,
}

impl ServerState {
    pub fn sc(heads: HeadsSlice) -> Self {
        ServerState {
            model: ServerModel::Sc(heads),
        }
    }

    pub fn roc(model: MtlModel) -> Self {
        ServerState {
            model: ServerModel::Roc(Box::new(model)),
        }
    }

    fn feature_len(&self) -> usize {
        match &self.model {
            ServerModel::Sc(h) => h.config.feature_len,
            ServerModel::Roc(m) => m.config.feature_len,
        }
    }

    fn heads_response(&self, request_id: u64, feature: &Tensor) -> SplitFrame {
        let mut tape = Tape::inference();
        let run = |j: usize, tape: &mut Tape| match &self.model {
            ServerModel::Sc(h) => h.head_forward(tape, j, feature),
            ServerModel::Roc(m) => m.head_forward(tape, j, feature),
        };
        let n_tasks = match &self.model {
            ServerModel::Sc(h) => h.config.n_tasks(),
            ServerModel::Roc(m) => m.config.n_tasks(),
        };
        let mut tasks = Vec::with_capacity(n_tasks);
        for j in 0..n_tasks {
            match run(j, &mut tape) {
                Ok(logits) => tasks.push(TaskLogits {
                    task_id: j as u8,
                    logits: logits.data().to_vec(),
                }),
                Err(e) => return SplitFrame::error(request_id, ERR_INTERNAL, e.to_string()),
            }
        }
        SplitFrame::prediction_response(request_id, tasks)
    }

    /// Answer one frame. Malformed or unsupported requests produce Error
    /// frames, never failures.
    pub fn handle_frame(&self, frame: &SplitFrame) -> SplitFrame {
        let id = frame.request_id;
        match &frame.body {
            FrameBody::FeatureRequest(payload) => {
                let expected = self.feature_len() as u64;
                if payload.element_count() != expected {
                    return SplitFrame::error(
                        id,
                        ERR_SHAPE,
                        format!(
                            "feature has {} elements, expected {expected}",
                            payload.element_count()
                        ),
                    );
                }
                let feature =
                    match Tensor::new(vec![1, expected as usize], payload.data.clone()) {
                        Ok(t) => t,
                        Err(e) => return SplitFrame::error(id, ERR_SHAPE, e.to_string()),
                    };
                self.heads_response(id, &feature)
            }
            FrameBody::RawInputRequest(payload) => match &self.model {
                ServerModel::Sc(_) => SplitFrame::error(
                    id,
                    ERR_UNSUPPORTED_REQUEST,
                    "split server holds no backbone for raw inputs",
                ),
                ServerModel::Roc(model) => {
                    let (w, h, c) = model.config.input_shape;
                    let dims: Vec<usize> = payload.dims.iter().map(|&d| d as usize).collect();
                    if dims != [w, h, c] {
                        return SplitFrame::error(
                            id,
                            ERR_SHAPE,
                            format!("raw input dims {dims:?}, expected [{w}, {h}, {c}]"),
                        );
                    }
                    let x = match Tensor::new(dims, payload.data.clone()) {
                        Ok(t) => t,
                        Err(e) => return SplitFrame::error(id, ERR_SHAPE, e.to_string()),
                    };
                    let mut tape = Tape::inference();
                    match model.backbone_forward(&mut tape, &x) {
                        Ok(feature) => self.heads_response(id, &feature),
                        Err(e) => SplitFrame::error(id, ERR_SHAPE, e.to_string()),
                    }
                }
            },
            FrameBody::PredictionResponse(_) | FrameBody::Error { .. } => SplitFrame::error(
                id,
                ERR_UNSUPPORTED_REQUEST,
                "server only accepts feature or raw-input requests",
            ),
        }
    }

    /// Byte-level entry point shared by the simulated channel: decode,
    /// handle, encode. Undecodable input gets an Error frame with id 0.
    pub fn handle_bytes(&self, bytes: &[u8]) -> Vec<u8> {
        let reply = match wire::decode(bytes) {
            Ok(frame) => self.handle_frame(&frame),
            Err(e) => SplitFrame::error(0, e.code(), e.to_string()),
        };
        wire::encode(&reply).expect("server responses always encode")
    }
}

// ── Simulated transport ──────────────────────────────────────────────

/// In-process transport over a [`ChannelModel`]: every exchange advances a
/// simulated clock by the modeled transfer times.
pub struct SimulatedTransport {
    server: Arc<ServerState>,
    channel: ChannelModel,
    rng: Rng,
    elapsed_s: f64,
    bytes_sent: u64,
    bytes_received: u64,
}

impl SimulatedTransport {
    pub fn new(server: Arc<ServerState>, channel: ChannelModel, seed: u64) -> Self {
        SimulatedTransport {
            server,
            channel,
            rng: Rng::for_purpose(seed, "channel-jitter"),
            elapsed_s: 0.0,
            bytes_sent: 0,
            bytes_received: 0,
        }
    }

    /// Simulated seconds spent on the wire so far.
    pub fn elapsed_seconds(&self) -> f64 {
        self.elapsed_s
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    pub fn bytes_received(&self) -> u64 {
        self.bytes_received
    }
}

impl Transport for SimulatedTransport {
    fn request(&mut self, frame: &SplitFrame) -> Result<SplitFrame, TransportError> {
        let bytes = wire::encode(frame)?;
        self.bytes_sent += bytes.len() as u64;
        self.elapsed_s += simulate_transfer(bytes.len() as u64, &self.channel, &mut self.rng);
        let reply = self.server.handle_bytes(&bytes);
        self.bytes_received += reply.len() as u64;
        self.elapsed_s += simulate_transfer(reply.len() as u64, &self.channel, &mut self.rng);
        Ok(wire::decode(&reply)?)
    }
}

// ── Socket transport ─────────────────────────────────────────────────

/// Length-delimited frames over one TCP connection.
#[derive(Debug)]
pub struct SocketTransport {
    stream: TcpStream,
}

impl SocketTransport {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, TransportError> {
        let resolved: Vec<SocketAddr> = addr
            .to_socket_addrs()
            .map_err(|source| TransportError::Connect {
                addr: addr.to_string(),
                source,
            })?
            .collect();
        let mut last_err = io::Error::new(io::ErrorKind::AddrNotAvailable, "no addresses");
        for candidate in resolved {
            match TcpStream::connect_timeout(&candidate, timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(timeout))?;
                    stream.set_write_timeout(Some(timeout))?;
                    stream.set_nodelay(true)?;
                    return Ok(SocketTransport { stream });
                }
                Err(e) => last_err = e,
            }
        }
        Err(TransportError::Connect {
            addr: addr.to_string(),
            source: last_err,
        })
    }

    fn read_frame(&mut self) -> Result<SplitFrame, TransportError> {
        let mut header = [0u8; HEADER_LEN];
        self.stream.read_exact(&mut header).map_err(map_timeout)?;
        let parsed = wire::decode_header(&header)?;
        if parsed.body_len > MAX_BODY_BYTES {
            return Err(WireError::Framing(format!(
                "declared body of {} bytes exceeds the {MAX_BODY_BYTES}-byte cap",
                parsed.body_len
            ))
            .into());
        }
        let mut body = vec![0u8; parsed.body_len as usize];
        self.stream.read_exact(&mut body).map_err(map_timeout)?;
        Ok(wire::decode_body(&parsed, &body)?)
    }
}

fn map_timeout(e: io::Error) -> TransportError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => TransportError::Timeout,
        _ => TransportError::Io(e),
    }
}

impl Transport for SocketTransport {
    fn request(&mut self, frame: &SplitFrame) -> Result<SplitFrame, TransportError> {
        let bytes = wire::encode(frame)?;
        self.stream.write_all(&bytes).map_err(map_timeout)?;
        self.read_frame()
    }
}

// ── Edge client ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeMode {
    Sc,
    Roc,
}

/// Edge-side endpoint: computes the shared feature locally in SC mode, or
/// ships raw inputs in RoC mode, then awaits per-task logits.
pub struct EdgeClient<T: Transport> {
    mode: EdgeMode,
    backbone: Option<BackboneSlice>,
    transport: T,
    next_request_id: u64,
}

impl<T: Transport> EdgeClient<T> {
    pub fn sc(backbone: BackboneSlice, transport: T) -> Self {
        EdgeClient {
            mode: EdgeMode::Sc,
            backbone: Some(backbone),
            transport,
            next_request_id: 0,
        }
    }

    pub fn roc(transport: T) -> Self {
        EdgeClient {
            mode: EdgeMode::Roc,
            backbone: None,
            transport,
            next_request_id: 0,
        }
    }

    pub fn mode(&self) -> EdgeMode {
        self.mode
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    /// Ids are assigned sequentially starting at 1.
    pub fn last_request_id(&self) -> u64 {
        self.next_request_id
    }

    /// Run one `[w,h,c]` input through the split pipeline; returns logits
    /// ordered by task id.
    pub fn infer(&mut self, x: &Tensor) -> Result<Vec<Tensor>, TransportError> {
        self.next_request_id += 1;
        let id = self.next_request_id;
        let request = match self.mode {
            EdgeMode::Sc => {
                let backbone = self
                    .backbone
                    .as_ref()
                    .ok_or(TransportError::WrongMode("SC edge without a backbone"))?;
                let mut tape = Tape::inference();
                let feature = backbone.forward(&mut tape, x).map_err(ModelError::from)?;
                SplitFrame::feature_request(
                    id,
                    TensorPayload::flat(crate::model::flatten_feature(&feature)),
                )
            }
            EdgeMode::Roc => {
                let dims: Vec<u32> = x.shape().iter().map(|&d| d as u32).collect();
                SplitFrame::raw_input_request(
                    id,
                    TensorPayload {
                        dims,
                        data: x.data().to_vec(),
                    },
                )
            }
        };

        let response = self.transport.request(&request)?;
        if response.request_id != id {
            return Err(TransportError::RequestIdMismatch {
                sent: id,
                got: response.request_id,
            });
        }
        match response.body {
            FrameBody::PredictionResponse(mut tasks) => {
                tasks.sort_by_key(|t| t.task_id);
                tasks
                    .into_iter()
                    .map(|t| {
                        let n = t.logits.len();
                        Tensor::new(vec![n], t.logits)
                            .map_err(|e| TransportError::Wire(WireError::Framing(e.to_string())))
                    })
                    .collect()
            }
            FrameBody::Error { code, message } => Err(TransportError::Remote { code, message }),
            other => Err(TransportError::UnexpectedResponse(other.msg_type())),
        }
    }
}

// ── Server loop ──────────────────────────────────────────────────────

/// Running server: address, stop flag, and the accept-loop thread.
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: JoinHandle<()>,
}

impl ServerHandle {
    /// Signal shutdown and wait for in-flight connections to drain.
    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.join.join();
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }
}

/// Bind and serve on a background thread. Bind failures surface here.
pub fn spawn_server(addr: &str, state: ServerState) -> Result<ServerHandle, TransportError> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let state = Arc::new(state);
    let loop_stop = stop.clone();
    let join = thread::spawn(move || serve_loop(listener, state, loop_stop));
    Ok(ServerHandle { addr, stop, join })
}

/// Accept loop: one handler thread per connection, all sharing the
/// read-only state. Returns once `stop` is set and handlers have drained.
pub fn serve_loop(listener: TcpListener, state: Arc<ServerState>, stop: Arc<AtomicBool>) {
    listener
        .set_nonblocking(true)
        .expect("listener supports non-blocking accept");
    let mut handlers: Vec<JoinHandle<()>> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let state = state.clone();
                let stop = stop.clone();
                handlers.push(thread::spawn(move || {
                    handle_connection(stream, state, stop);
                }));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(20));
            }
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(20));
            }
        }
        handlers.retain(|h| !h.is_finished());
    }
    for handler in handlers {
        let _ = handler.join();
    }
}

enum ReadOutcome {
    Full,
    Closed,
    Stopped,
}

/// `read_exact` that keeps polling across read timeouts so the stop flag
/// stays responsive.
fn read_with_stop(stream: &mut TcpStream, buf: &mut [u8], stop: &AtomicBool) -> ReadOutcome {
    let mut filled = 0;
    while filled < buf.len() {
        if stop.load(Ordering::SeqCst) && filled == 0 {
            return ReadOutcome::Stopped;
        }
        match stream.read(&mut buf[filled..]) {
            Ok(0) => return ReadOutcome::Closed,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock || e.kind() == io::ErrorKind::TimedOut =>
            {
                if stop.load(Ordering::SeqCst) {
                    return ReadOutcome::Stopped;
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(_) => return ReadOutcome::Closed,
        }
    }
    ReadOutcome::Full
}

fn send_frame(stream: &mut TcpStream, frame: &SplitFrame) -> io::Result<()> {
    let bytes = wire::encode(frame).expect("server frames always encode");
    stream.write_all(&bytes)
}

/// Per-connection loop. Requests are processed in order. Body-level
/// protocol errors answer with an Error frame and keep the connection;
/// header-level desync (bad magic, unknown version) answers and closes,
/// since the stream offset can no longer be trusted.
fn handle_connection(mut stream: TcpStream, state: Arc<ServerState>, stop: Arc<AtomicBool>) {
    if stream.set_read_timeout(Some(Duration::from_millis(100))).is_err() {
        return;
    }
    let mut header = [0u8; HEADER_LEN];
    loop {
        match read_with_stop(&mut stream, &mut header, &stop) {
            ReadOutcome::Full => {}
            ReadOutcome::Closed | ReadOutcome::Stopped => return,
        }
        let parsed = match wire::decode_header(&header) {
            Ok(h) => h,
            Err(e) => {
                let _ = send_frame(&mut stream, &SplitFrame::error(0, e.code(), e.to_string()));
                return;
            }
        };
        if parsed.body_len > MAX_BODY_BYTES {
            let _ = send_frame(
                &mut stream,
                &SplitFrame::error(
                    parsed.request_id,
                    wire::ERR_FRAMING,
                    format!("body of {} bytes exceeds the cap", parsed.body_len),
                ),
            );
            return;
        }
        let mut body = vec![0u8; parsed.body_len as usize];
        match read_with_stop(&mut stream, &mut body, &stop) {
            ReadOutcome::Full => {}
            ReadOutcome::Closed | ReadOutcome::Stopped => return,
        }
        let reply = match wire::decode_body(&parsed, &body) {
            Ok(frame) => state.handle_frame(&frame),
            Err(e) => SplitFrame::error(parsed.request_id, e.code(), e.to_string()),
        };
        if send_frame(&mut stream, &reply).is_err() {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TaskSpec};

    fn test_model() -> MtlModel {
        let config = ModelConfig {
            input_shape: (8, 8, 3),
            backbone_widths: vec![12],
            feature_len: 10,
            head_hidden_width: 6,
            tasks: vec![
                TaskSpec {
                    name: "hue".into(),
                    n_classes: 4,
                },
                TaskSpec {
                    name: "shape".into(),
                    n_classes: 3,
                },
            ],
        };
        let mut rng = Rng::seed_from_u64(31);
        MtlModel::init(config, &mut rng).unwrap()
    }

    fn random_input(rng: &mut Rng) -> Tensor {
        let data: Vec<f32> = (0..8 * 8 * 3).map(|_| rng.next_f32()).collect();
        Tensor::new(vec![8, 8, 3], data).unwrap()
    }

    fn logits_bits(logits: &[Tensor]) -> Vec<Vec<u32>> {
        logits
            .iter()
            .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn simulated_sc_matches_local_prediction_bitwise() {
        let model = test_model();
        let (backbone, heads) = model.split().unwrap();
        let server = Arc::new(ServerState::sc(heads));
        let transport = SimulatedTransport::new(server, ChannelModel::gigabit(), 7);
        let mut edge = EdgeClient::sc(backbone, transport);

        let mut rng = Rng::seed_from_u64(55);
        for _ in 0..20 {
            let x = random_input(&mut rng);
            let remote = edge.infer(&x).unwrap();
            let local = model.predict_one(&x).unwrap();
            assert_eq!(logits_bits(&remote), logits_bits(&local));
        }
        assert!(edge.transport().elapsed_seconds() > 0.0);
    }

    #[test]
    fn simulated_roc_matches_local_prediction_bitwise() {
        let model = test_model();
        let server = Arc::new(ServerState::roc(model.clone()));
        let transport = SimulatedTransport::new(server, ChannelModel::gigabit(), 7);
        let mut edge = EdgeClient::roc(transport);

        let mut rng = Rng::seed_from_u64(56);
        let x = random_input(&mut rng);
        let remote = edge.infer(&x).unwrap();
        let local = model.predict_one(&x).unwrap();
        assert_eq!(logits_bits(&remote), logits_bits(&local));
    }

    #[test]
    fn request_ids_count_up_and_match() {
        let model = test_model();
        let (backbone, heads) = model.split().unwrap();
        let server = Arc::new(ServerState::sc(heads));
        let transport = SimulatedTransport::new(server, ChannelModel::gigabit(), 7);
        let mut edge = EdgeClient::sc(backbone, transport);

        let mut rng = Rng::seed_from_u64(57);
        let mut previous = 0;
        for _ in 0..100 {
            let x = random_input(&mut rng);
            edge.infer(&x).unwrap();
            let id = edge.last_request_id();
            assert_eq!(id, previous + 1);
            previous = id;
        }
    }

    struct ErrorTransport;

    impl Transport for ErrorTransport {
        fn request(&mut self, frame: &SplitFrame) -> Result<SplitFrame, TransportError> {
            Ok(SplitFrame::error(frame.request_id, 7, "injected failure"))
        }
    }

    #[test]
    fn remote_error_frames_surface_with_their_code() {
        let model = test_model();
        let (backbone, _) = model.split().unwrap();
        let mut edge = EdgeClient::sc(backbone, ErrorTransport);
        let mut rng = Rng::seed_from_u64(58);
        let err = edge.infer(&random_input(&mut rng)).unwrap_err();
        match err {
            TransportError::Remote { code, message } => {
                assert_eq!(code, 7);
                assert_eq!(message, "injected failure");
            }
            other => panic!("expected remote error, got {other:?}"),
        }
    }

    struct WrongIdTransport;

    impl Transport for WrongIdTransport {
        fn request(&mut self, frame: &SplitFrame) -> Result<SplitFrame, TransportError> {
            Ok(SplitFrame::prediction_response(
                frame.request_id + 13,
                vec![],
            ))
        }
    }

    #[test]
    fn mismatched_request_id_is_a_protocol_error() {
        let model = test_model();
        let (backbone, _) = model.split().unwrap();
        let mut edge = EdgeClient::sc(backbone, WrongIdTransport);
        let mut rng = Rng::seed_from_u64(59);
        let err = edge.infer(&random_input(&mut rng)).unwrap_err();
        assert!(matches!(
            err,
            TransportError::RequestIdMismatch { sent: 1, got: 14 }
        ));
    }

    #[test]
    fn server_rejects_wrong_feature_length_and_raw_input_in_sc_mode() {
        let model = test_model();
        let (_, heads) = model.split().unwrap();
        let server = ServerState::sc(heads);

        let bad_len = SplitFrame::feature_request(5, TensorPayload::flat(vec![1.0; 3]));
        match server.handle_frame(&bad_len).body {
            FrameBody::Error { code, .. } => assert_eq!(code, ERR_SHAPE),
            other => panic!("expected error frame, got {other:?}"),
        }

        let raw = SplitFrame::raw_input_request(6, TensorPayload::flat(vec![0.0; 8 * 8 * 3]));
        match server.handle_frame(&raw).body {
            FrameBody::Error { code, .. } => assert_eq!(code, ERR_UNSUPPORTED_REQUEST),
            other => panic!("expected error frame, got {other:?}"),
        }
    }

    #[test]
    fn socket_round_trip_and_garbage_survival() {
        let model = test_model();
        let (backbone, heads) = model.split().unwrap();
        let handle = spawn_server("127.0.0.1:0", ServerState::sc(heads)).unwrap();
        let addr = handle.addr.to_string();

        // Garbage first: the server answers with an Error frame and stays up.
        {
            let mut raw = TcpStream::connect(&addr).unwrap();
            raw.set_read_timeout(Some(Duration::from_secs(2))).unwrap();
            raw.write_all(b"XXXXXXXXXXXXXXXXXXXXXXXXXXXX").unwrap();
            let mut reply = Vec::new();
            let _ = raw.read_to_end(&mut reply);
            let frame = wire::decode(&reply).unwrap();
            assert!(matches!(
                frame.body,
                FrameBody::Error {
                    code: wire::ERR_BAD_MAGIC,
                    ..
                }
            ));
        }

        // A fresh, well-formed connection is served normally.
        let transport = SocketTransport::connect(&addr, Duration::from_secs(2)).unwrap();
        let mut edge = EdgeClient::sc(backbone, transport);
        let mut rng = Rng::seed_from_u64(60);
        for _ in 0..5 {
            let x = random_input(&mut rng);
            let remote = edge.infer(&x).unwrap();
            let local = model.predict_one(&x).unwrap();
            assert_eq!(logits_bits(&remote), logits_bits(&local));
        }

        handle.shutdown();
    }

    #[test]
    fn body_level_errors_keep_the_connection_alive() {
        let model = test_model();
        let (_, heads) = model.split().unwrap();
        let feature_len = model.config.feature_len;
        let handle = spawn_server("127.0.0.1:0", ServerState::sc(heads)).unwrap();
        let addr = handle.addr.to_string();

        let mut transport = SocketTransport::connect(&addr, Duration::from_secs(2)).unwrap();

        // Corrupt the dtype byte inside an otherwise well-framed request.
        let good = SplitFrame::feature_request(1, TensorPayload::flat(vec![0.5; feature_len]));
        let mut bytes = wire::encode(&good).unwrap();
        bytes[HEADER_LEN + 5] = 9;
        transport.stream.write_all(&bytes).unwrap();
        let reply = transport.read_frame().unwrap();
        assert!(matches!(
            reply.body,
            FrameBody::Error {
                code: wire::ERR_UNSUPPORTED_DTYPE,
                ..
            }
        ));

        // Same connection serves the next well-formed request.
        let reply = transport
            .request(&SplitFrame::feature_request(
                2,
                TensorPayload::flat(vec![0.5; feature_len]),
            ))
            .unwrap();
        assert!(matches!(reply.body, FrameBody::PredictionResponse(_)));
        assert_eq!(reply.request_id, 2);

        handle.shutdown();
    }

    #[test]
    fn concurrent_clients_get_their_own_answers() {
        let model = test_model();
        let (backbone, heads) = model.split().unwrap();
        let handle = spawn_server("127.0.0.1:0", ServerState::sc(heads)).unwrap();
        let addr = handle.addr.to_string();

        let mut workers = Vec::new();
        for client_id in 0..2u64 {
            let addr = addr.clone();
            let backbone = backbone.clone();
            let model = model.clone();
            workers.push(thread::spawn(move || {
                let transport = SocketTransport::connect(&addr, Duration::from_secs(5)).unwrap();
                let mut edge = EdgeClient::sc(backbone, transport);
                let mut rng = Rng::seed_from_u64(100 + client_id);
                for _ in 0..50 {
                    let x = random_input(&mut rng);
                    let remote = edge.infer(&x).unwrap();
                    let local = model.predict_one(&x).unwrap();
                    assert_eq!(logits_bits(&remote), logits_bits(&local));
                }
            }));
        }
        for worker in workers {
            worker.join().unwrap();
        }
        handle.shutdown();
    }

    #[test]
    fn connecting_to_a_dead_address_fails_cleanly() {
        let err = SocketTransport::connect("127.0.0.1:1", Duration::from_millis(300)).unwrap_err();
        assert!(matches!(err, TransportError::Connect { .. }));
    }
}
