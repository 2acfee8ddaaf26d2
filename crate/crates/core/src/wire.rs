//! Bit-exact framing for the splitting point.
//!
//! Every frame is `magic "MTLS" | version u8 | msg_type u8 | request_id u64 |
//! body_len u32 | body`, all integers and floats little-endian, no padding.
//! Feature and raw-input bodies carry one f32 tensor; prediction bodies carry
//! per-task logits; error bodies carry a code and a UTF-8 message.
//!
//! Decoding is total: any byte string yields either a frame or a classified
//! [`WireError`], never a panic.

use thiserror::Error;

pub const WIRE_MAGIC: &[u8; 4] = b"MTLS";
pub const WIRE_VERSION: u8 = 1;
/// Fixed header size: magic + version + msg_type + request_id + body_len.
pub const HEADER_LEN: usize = 4 + 1 + 1 + 8 + 4;
pub const DTYPE_F32: u8 = 0;

pub const MSG_FEATURE_REQUEST: u8 = 0;
pub const MSG_PREDICTION_RESPONSE: u8 = 1;
pub const MSG_RAW_INPUT_REQUEST: u8 = 2;
pub const MSG_ERROR: u8 = 3;

// Remote error codes carried by Error frames.
pub const ERR_BAD_MAGIC: u16 = 1;
pub const ERR_UNKNOWN_VERSION: u16 = 2;
pub const ERR_UNKNOWN_TYPE: u16 = 3;
pub const ERR_FRAMING: u16 = 4;
pub const ERR_UNSUPPORTED_DTYPE: u16 = 5;
pub const ERR_SHAPE: u16 = 6;
pub const ERR_INTERNAL: u16 = 7;
pub const ERR_UNSUPPORTED_REQUEST: u16 = 8;

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unknown protocol version {0}")]
    UnknownVersion(u8),
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("framing: {0}")]
    Framing(String),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),
    #[error("cannot encode: {0}")]
    Encode(String),
}

impl WireError {
    /// Error-frame code for this decode failure.
    pub fn code(&self) -> u16 {
        match self {
            WireError::BadMagic(_) => ERR_BAD_MAGIC,
            WireError::UnknownVersion(_) => ERR_UNKNOWN_VERSION,
            WireError::UnknownMsgType(_) => ERR_UNKNOWN_TYPE,
            WireError::Framing(_) => ERR_FRAMING,
            WireError::UnsupportedDtype(_) => ERR_UNSUPPORTED_DTYPE,
            WireError::Encode(_) => ERR_INTERNAL,
        }
    }
}

/// One f32 tensor on the wire: dims then flat row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorPayload {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl TensorPayload {
    pub fn flat(data: Vec<f32>) -> Self {
        TensorPayload {
            dims: vec![data.len() as u32],
            data,
        }
    }

    pub fn element_count(&self) -> u64 {
        self.dims.iter().map(|&d| u64::from(d)).product()
    }
}

/// Logits for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLogits {
    pub task_id: u8,
    pub logits: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrameBody {
    FeatureRequest(TensorPayload),
    PredictionResponse(Vec<TaskLogits>),
    RawInputRequest(TensorPayload),
    Error { code: u16, message: String },
}

impl FrameBody {
    pub fn msg_type(&self) -> u8 {
        match self {
            FrameBody::FeatureRequest(_) => MSG_FEATURE_REQUEST,
            FrameBody::PredictionResponse(_) => MSG_PREDICTION_RESPONSE,
            FrameBody::RawInputRequest(_) => MSG_RAW_INPUT_REQUEST,
            FrameBody::Error { .. } => MSG_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitFrame {
    pub version: u8,
    pub request_id: u64,
    pub body: FrameBody,
}

impl SplitFrame {
    pub fn feature_request(request_id: u64, payload: TensorPayload) -> Self {
        SplitFrame {
            version: WIRE_VERSION,
            request_id,
            body: FrameBody::FeatureRequest(payload),
        }
    }

    pub fn raw_input_request(request_id: u64, payload: TensorPayload) -> Self {
        SplitFrame {
            version: WIRE_VERSION,
            request_id,
            body: FrameBody::RawInputRequest(payload),
        }
    }

    pub fn prediction_response(request_id: u64, tasks: Vec<TaskLogits>) -> Self {
        SplitFrame {
            version: WIRE_VERSION,
            request_id,
            body: FrameBody::PredictionResponse(tasks),
        }
    }

    pub fn error(request_id: u64, code: u16, message: impl Into<String>) -> Self {
        SplitFrame {
            version: WIRE_VERSION,
            request_id,
            body: FrameBody::Error {
                code,
                message: message.into(),
            },
        }
    }
}

fn encode_tensor_payload(out: &mut Vec<u8>, payload: &TensorPayload) -> Result<(), WireError> {
    if payload.dims.len() > u8::MAX as usize {
        return Err(WireError::Encode(format!(
            "{} dims exceed the u8 rank field",
            payload.dims.len()
        )));
    }
    if payload.element_count() != payload.data.len() as u64 {
        return Err(WireError::Encode(format!(
            "dims {:?} imply {} elements but {} were given",
            payload.dims,
            payload.element_count(),
            payload.data.len()
        )));
    }
    out.push(payload.dims.len() as u8);
    for &d in &payload.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(DTYPE_F32);
    for &v in &payload.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Deterministic byte encoding of a frame.
pub fn encode(frame: &SplitFrame) -> Result<Vec<u8>, WireError> {
    let mut body = Vec::new();
    match &frame.body {
        FrameBody::FeatureRequest(p) | FrameBody::RawInputRequest(p) => {
            encode_tensor_payload(&mut body, p)?;
        }
        FrameBody::PredictionResponse(tasks) => {
            if tasks.len() > u8::MAX as usize {
                return Err(WireError::Encode(format!(
                    "{} tasks exceed the u8 count field",
                    tasks.len()
                )));
            }
            body.push(tasks.len() as u8);
            for task in tasks {
                if task.logits.len() > u16::MAX as usize {
                    return Err(WireError::Encode(format!(
                        "{} logits exceed the u16 class field",
                        task.logits.len()
                    )));
                }
                body.push(task.task_id);
                body.extend_from_slice(&(task.logits.len() as u16).to_le_bytes());
                for &v in &task.logits {
                    body.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        FrameBody::Error { code, message } => {
            let bytes = message.as_bytes();
            if bytes.len() > u16::MAX as usize {
                return Err(WireError::Encode(format!(
                    "{}-byte message exceeds the u16 length field",
                    bytes.len()
                )));
            }
            body.extend_from_slice(&code.to_le_bytes());
            body.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
            body.extend_from_slice(bytes);
        }
    }
    if body.len() > u32::MAX as usize {
        return Err(WireError::Encode(format!("{}-byte body overflows u32", body.len())));
    }

    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(WIRE_MAGIC);
    out.push(frame.version);
    out.push(frame.body.msg_type());
    out.extend_from_slice(&frame.request_id.to_le_bytes());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Parsed fixed-size header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub version: u8,
    pub msg_type: u8,
    pub request_id: u64,
    pub body_len: u32,
}

/// Validate magic/version/type and read the declared body length.
pub fn decode_header(bytes: &[u8; HEADER_LEN]) -> Result<FrameHeader, WireError> {
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != WIRE_MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let version = bytes[4];
    if version != WIRE_VERSION {
        return Err(WireError::UnknownVersion(version));
    }
    let msg_type = bytes[5];
    if msg_type > MSG_ERROR {
        return Err(WireError::UnknownMsgType(msg_type));
    }
    Ok(FrameHeader {
        version,
        msg_type,
        request_id: u64::from_le_bytes(bytes[6..14].try_into().unwrap()),
        body_len: u32::from_le_bytes(bytes[14..18].try_into().unwrap()),
    })
}

struct BodyReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BodyReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.bytes.len() {
            return Err(WireError::Framing(format!(
                "body truncated at offset {} (wanted {n} bytes of {})",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>, WireError> {
        let raw = self.take(count.checked_mul(4).ok_or_else(|| {
            WireError::Framing("element count overflows".into())
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<(), WireError> {
        if self.pos != self.bytes.len() {
            return Err(WireError::Framing(format!(
                "{} trailing bytes in body",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn decode_tensor_payload(reader: &mut BodyReader) -> Result<TensorPayload, WireError> {
    let ndims = reader.u8()? as usize;
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(reader.u32()?);
    }
    let dtype = reader.u8()?;
    if dtype != DTYPE_F32 {
        return Err(WireError::UnsupportedDtype(dtype));
    }
    let count: u64 = dims.iter().map(|&d| u64::from(d)).product();
    let count = usize::try_from(count)
        .map_err(|_| WireError::Framing(format!("element count {count} overflows")))?;
    let data = reader.f32s(count)?;
    Ok(TensorPayload { dims, data })
}

/// Parse a body whose header was already validated.
pub fn decode_body(header: &FrameHeader, body: &[u8]) -> Result<SplitFrame, WireError> {
    if body.len() != header.body_len as usize {
        return Err(WireError::Framing(format!(
            "declared body length {} but {} bytes present",
            header.body_len,
            body.len()
        )));
    }
    let mut reader = BodyReader { bytes: body, pos: 0 };
    let frame_body = match header.msg_type {
        MSG_FEATURE_REQUEST => FrameBody::FeatureRequest(decode_tensor_payload(&mut reader)?),
        MSG_RAW_INPUT_REQUEST => FrameBody::RawInputRequest(decode_tensor_payload(&mut reader)?),
        MSG_PREDICTION_RESPONSE => {
            let n_tasks = reader.u8()? as usize;
            let mut tasks = Vec::with_capacity(n_tasks);
            for _ in 0..n_tasks {
                let task_id = reader.u8()?;
                let n_classes = reader.u16()? as usize;
                let logits = reader.f32s(n_classes)?;
                tasks.push(TaskLogits { task_id, logits });
            }
            FrameBody::PredictionResponse(tasks)
        }
        MSG_ERROR => {
            let code = reader.u16()?;
            let len = reader.u16()? as usize;
            let raw = reader.take(len)?;
            let message = String::from_utf8(raw.to_vec())
                .map_err(|_| WireError::Framing("error message is not UTF-8".into()))?;
            FrameBody::Error { code, message }
        }
        other => return Err(WireError::UnknownMsgType(other)),
    };
    reader.finish()?;
    Ok(SplitFrame {
        version: header.version,
        request_id: header.request_id,
        body: frame_body,
    })
}

/// Inverse of [`encode`] on valid input; classified error otherwise.
pub fn decode(bytes: &[u8]) -> Result<SplitFrame, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Framing(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    let header = decode_header(bytes[..HEADER_LEN].try_into().unwrap())?;
    decode_body(&header, &bytes[HEADER_LEN..])
}

/// Wire cost of a flat feature of `feature_len` f32 elements, split into
/// tensor payload bytes and fixed framing overhead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadSize {
    pub payload_bytes: u64,
    pub overhead_bytes: u64,
}

impl PayloadSize {
    pub fn total(&self) -> u64 {
        self.payload_bytes + self.overhead_bytes
    }
}

pub fn feature_payload_size(feature_len: u64) -> PayloadSize {
    PayloadSize {
        payload_bytes: 4 * feature_len,
        // header + ndims + one u32 dim + dtype
        overhead_bytes: HEADER_LEN as u64 + 1 + 4 + 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_feature_frame_layout_is_fixed() {
        let frame = SplitFrame::feature_request(0, TensorPayload::flat(vec![]));
        let bytes = encode(&frame).unwrap();
        let expected: Vec<u8> = vec![
            b'M', b'T', b'L', b'S', // magic
            1,    // version
            0,    // msg_type FeatureRequest
            0, 0, 0, 0, 0, 0, 0, 0, // request_id
            6, 0, 0, 0, // body_len = ndims + dims[0] + dtype
            1,    // ndims
            0, 0, 0, 0, // dims[0] = 0
            0,    // dtype f32
        ];
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len(), 24);
        assert_eq!(decode(&bytes).unwrap(), frame);
    }

    #[test]
    fn single_float_payload_bytes() {
        let frame = SplitFrame::feature_request(7, TensorPayload::flat(vec![1.0]));
        let bytes = encode(&frame).unwrap();
        // header(18) + ndims(1) + dim(4) + dtype(1) = 24, then the value.
        assert_eq!(&bytes[24..28], &[0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn bad_magic_is_classified() {
        let mut bytes = encode(&SplitFrame::error(1, 7, "x")).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(WireError::BadMagic(_))));
    }

    #[test]
    fn unknown_version_and_type_are_classified() {
        let mut bytes = encode(&SplitFrame::error(1, 7, "x")).unwrap();
        bytes[4] = 9;
        assert_eq!(decode(&bytes), Err(WireError::UnknownVersion(9)));

        let mut bytes = encode(&SplitFrame::error(1, 7, "x")).unwrap();
        bytes[5] = 42;
        assert_eq!(decode(&bytes), Err(WireError::UnknownMsgType(42)));
    }

    #[test]
    fn truncated_body_is_a_framing_error() {
        let mut bytes = encode(&SplitFrame::feature_request(
            3,
            TensorPayload::flat(vec![1.0, 2.0]),
        ))
        .unwrap();
        // Declare 100 body bytes while only 10 remain.
        bytes[14..18].copy_from_slice(&100u32.to_le_bytes());
        bytes.truncate(HEADER_LEN + 10);
        assert!(matches!(decode(&bytes), Err(WireError::Framing(_))));
    }

    #[test]
    fn wrong_dtype_is_classified() {
        let mut bytes = encode(&SplitFrame::feature_request(
            3,
            TensorPayload::flat(vec![1.0]),
        ))
        .unwrap();
        // dtype byte sits after header + ndims + one dim.
        bytes[HEADER_LEN + 5] = 2;
        assert_eq!(decode(&bytes), Err(WireError::UnsupportedDtype(2)));
    }

    #[test]
    fn inconsistent_payload_fails_to_encode() {
        let frame = SplitFrame::feature_request(
            0,
            TensorPayload {
                dims: vec![3],
                data: vec![1.0],
            },
        );
        assert!(matches!(encode(&frame), Err(WireError::Encode(_))));
    }

    #[test]
    fn feature_payload_sizes_match_table_rows() {
        let zero = feature_payload_size(0);
        assert_eq!(zero.payload_bytes, 0);

        // 55,300-element feature: 221,200 payload bytes, about 0.21 MiB.
        let small = feature_payload_size(55_300);
        assert_eq!(small.payload_bytes, 221_200);
        assert!((small.payload_bytes as f64 / 1024.0 / 1024.0 - 0.21).abs() < 0.005);

        // 406,060-element feature: 1,624,240 bytes, about 1.55 MiB.
        let large = feature_payload_size(406_060);
        assert_eq!(large.payload_bytes, 1_624_240);
        assert!((large.payload_bytes as f64 / 1024.0 / 1024.0 - 1.55).abs() < 0.01);
    }

    fn tensor_payload_strategy() -> impl Strategy<Value = TensorPayload> {
        // Dims with a bounded product so the data stays small; includes
        // empty and zero-dim cases.
        prop_oneof![
            Just(TensorPayload::flat(vec![])),
            proptest::collection::vec(any::<f32>(), 0..64).prop_map(TensorPayload::flat),
            (1usize..4, proptest::collection::vec(1u32..5, 1..3)).prop_map(|(_, dims)| {
                let count: u32 = dims.iter().product();
                TensorPayload {
                    data: (0..count).map(|i| i as f32 * 0.5 - 3.0).collect(),
                    dims,
                }
            }),
        ]
    }

    fn frame_strategy() -> impl Strategy<Value = SplitFrame> {
        let body = prop_oneof![
            tensor_payload_strategy().prop_map(FrameBody::FeatureRequest),
            tensor_payload_strategy().prop_map(FrameBody::RawInputRequest),
            proptest::collection::vec(
                (any::<u8>(), proptest::collection::vec(any::<f32>(), 0..20)),
                0..5
            )
            .prop_map(|tasks| {
                FrameBody::PredictionResponse(
                    tasks
                        .into_iter()
                        .map(|(task_id, logits)| TaskLogits { task_id, logits })
                        .collect(),
                )
            }),
            (any::<u16>(), ".{0,40}").prop_map(|(code, message)| FrameBody::Error {
                code,
                message,
            }),
        ];
        (any::<u64>(), body).prop_map(|(request_id, body)| SplitFrame {
            version: WIRE_VERSION,
            request_id,
            body,
        })
    }

    fn frames_equal_bitwise(a: &SplitFrame, b: &SplitFrame) -> bool {
        // PartialEq on f32 treats NaN != NaN; compare through the encoded
        // bytes instead, which is the identity that matters on the wire.
        encode(a).unwrap() == encode(b).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip_is_bitwise_lossless(frame in frame_strategy()) {
            let bytes = encode(&frame).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert!(frames_equal_bitwise(&frame, &back));
            prop_assert_eq!(back.request_id, frame.request_id);
        }

        #[test]
        fn decoding_arbitrary_bytes_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = decode(&bytes);
        }

        #[test]
        fn decoding_corrupted_valid_frames_never_panics(
            frame in frame_strategy(),
            flips in proptest::collection::vec((0usize..1000, any::<u8>()), 1..8),
            truncate_to in 0usize..1000,
        ) {
            let mut bytes = encode(&frame).unwrap();
            for (pos, value) in flips {
                if !bytes.is_empty() {
                    let idx = pos % bytes.len();
                    bytes[idx] = value;
                }
            }
            bytes.truncate(truncate_to.min(bytes.len()));
            let _ = decode(&bytes);
        }
    }
}
