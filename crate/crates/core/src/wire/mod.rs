//! Framed binary protocol between environment servers and actors.
//!
//! Every frame is a little-endian `u32` length (counting the type byte and
//! the payload), the message type byte, then the payload:
//!
//! | type | name   | payload |
//! |------|--------|---------|
//! | 0x01 | HELLO  | version `u32`, observation descriptor (dtype, ndim, dims), num_actions `u32` |
//! | 0x02 | STEP   | observation array, reward `f32`, done `u8`, episode_step `i64`, episode_return `f32` |
//! | 0x03 | ACTION | scalar `i64` array |
//! | 0x04 | BYE    | empty |
//! | 0x05 | ERROR  | code `u32`, message length `u32`, UTF-8 message |
//!
//! Arrays are a dtype code `u8` (0 = u8, 1 = i64, 2 = f32), `ndim: u8`,
//! `ndim` dims as `u32`, then raw little-endian row-major data.

mod session;

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::numerics::{DType, DynArray};
use crate::rollout::{EnvOutput, EnvSpec, SchemaError};

pub(crate) use session::run_session;
pub use session::{env_session, session_transcript, EnvClient, SessionEnd, SessionReport};

pub const PROTOCOL_VERSION: u32 = 1;
/// Largest accepted frame body (type byte + payload).
pub const MAX_FRAME_LEN: usize = 64 << 20;

pub const MSG_HELLO: u8 = 0x01;
pub const MSG_STEP: u8 = 0x02;
pub const MSG_ACTION: u8 = 0x03;
pub const MSG_BYE: u8 = 0x04;
pub const MSG_ERROR: u8 = 0x05;

/// Codes carried by ERROR frames.
pub mod error_code {
    pub const INVALID_ACTION: u32 = 1;
    pub const PROTOCOL_VIOLATION: u32 = 2;
    pub const SERVER_FULL: u32 = 3;
    pub const ENV_FAILURE: u32 = 4;
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Hello { version: u32, spec: EnvSpec },
    Step(EnvOutput),
    Action(i64),
    Bye,
    Error { code: u32, message: String },
}

impl WireMessage {
    pub fn hello(spec: EnvSpec) -> Self {
        WireMessage::Hello {
            version: PROTOCOL_VERSION,
            spec,
        }
    }

    pub fn msg_type(&self) -> u8 {
        match self {
            WireMessage::Hello { .. } => MSG_HELLO,
            WireMessage::Step(_) => MSG_STEP,
            WireMessage::Action(_) => MSG_ACTION,
            WireMessage::Bye => MSG_BYE,
            WireMessage::Error { .. } => MSG_ERROR,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WireMessage::Hello { .. } => "HELLO",
            WireMessage::Step(_) => "STEP",
            WireMessage::Action(_) => "ACTION",
            WireMessage::Bye => "BYE",
            WireMessage::Error { .. } => "ERROR",
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("truncated {what}: need {need} bytes, have {have}")]
    Truncated {
        what: &'static str,
        need: usize,
        have: usize,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("unknown or unsupported dtype code {0}")]
    UnknownDtype(u8),
    #[error("frame length {0} exceeds the {MAX_FRAME_LEN}-byte limit")]
    Oversize(usize),
    #[error("zero-length frame")]
    Empty,
    #[error("invalid payload: {0}")]
    Invalid(String),
    #[error("protocol version {got} not supported (expected {PROTOCOL_VERSION})")]
    Version { got: u32 },
    #[error("expected {expected}, received {got}")]
    UnexpectedMessage { expected: &'static str, got: &'static str },
    #[error("peer error {code}: {message}")]
    Remote { code: u32, message: String },
    #[error("peer closed the session")]
    Closed,
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

fn wire_dtype(code: u8) -> Result<DType, ProtocolError> {
    match DType::from_code(code) {
        Some(d @ (DType::U8 | DType::I64 | DType::F32)) => Ok(d),
        _ => Err(ProtocolError::UnknownDtype(code)),
    }
}

fn check_wire_dtype(dtype: DType) -> Result<(), ProtocolError> {
    wire_dtype(dtype.code()).map(|_| ())
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<(), ProtocolError> {
    let v = u32::try_from(v).map_err(|_| ProtocolError::Invalid(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_descriptor(out: &mut Vec<u8>, dtype: DType, dims: &[usize]) -> Result<(), ProtocolError> {
    check_wire_dtype(dtype)?;
    let ndim =
        u8::try_from(dims.len()).map_err(|_| ProtocolError::Invalid(format!("{} dims exceed 255", dims.len())))?;
    out.push(dtype.code());
    out.push(ndim);
    for &d in dims {
        put_u32(out, d, "dim")?;
    }
    Ok(())
}

fn put_array(out: &mut Vec<u8>, array: &DynArray) -> Result<(), ProtocolError> {
    put_descriptor(out, array.dtype(), array.dims())?;
    array.write_data_le(out);
    Ok(())
}

fn encode_payload(msg: &WireMessage, out: &mut Vec<u8>) -> Result<(), ProtocolError> {
    match msg {
        WireMessage::Hello { version, spec } => {
            out.extend_from_slice(&version.to_le_bytes());
            put_descriptor(out, spec.obs_dtype, &spec.obs_shape)?;
            put_u32(out, spec.num_actions, "num_actions")?;
        }
        WireMessage::Step(env) => {
            put_array(out, &env.observation)?;
            out.extend_from_slice(&env.reward.to_le_bytes());
            out.push(env.done as u8);
            out.extend_from_slice(&env.episode_step.to_le_bytes());
            out.extend_from_slice(&env.episode_return.to_le_bytes());
        }
        WireMessage::Action(a) => {
            out.push(DType::I64.code());
            out.push(0);
            out.extend_from_slice(&a.to_le_bytes());
        }
        WireMessage::Bye => {}
        WireMessage::Error { code, message } => {
            out.extend_from_slice(&code.to_le_bytes());
            put_u32(out, message.len(), "message length")?;
            out.extend_from_slice(message.as_bytes());
        }
    }
    Ok(())
}

/// Serializes one message into a complete frame.
pub fn encode_frame(msg: &WireMessage) -> Result<Vec<u8>, ProtocolError> {
    let mut out = vec![0u8; 4];
    out.push(msg.msg_type());
    encode_payload(msg, &mut out)?;
    let body = out.len() - 4;
    if body > MAX_FRAME_LEN {
        return Err(ProtocolError::Oversize(body));
    }
    out[..4].copy_from_slice(&(body as u32).to_le_bytes());
    Ok(out)
}

/// Bounds-checked reader over a frame payload.
struct Payload<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Payload<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ProtocolError> {
        let have = self.buf.len() - self.pos;
        if n > have {
            return Err(ProtocolError::Truncated { what, need: n, have });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, ProtocolError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i64(&mut self, what: &'static str) -> Result<i64, ProtocolError> {
        Ok(i64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32, ProtocolError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn descriptor(&mut self) -> Result<(DType, Vec<usize>), ProtocolError> {
        let dtype = wire_dtype(self.u8("dtype")?)?;
        let ndim = self.u8("ndim")? as usize;
        let dims = (0..ndim)
            .map(|_| self.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((dtype, dims))
    }

    fn array(&mut self) -> Result<DynArray, ProtocolError> {
        let (dtype, dims) = self.descriptor()?;
        let nbytes = dims
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| ProtocolError::Invalid(format!("array dims {dims:?} overflow")))?;
        let data = self.take(nbytes, "array data")?;
        DynArray::from_le_bytes(dtype, dims, data).map_err(|e| ProtocolError::Invalid(e.to_string()))
    }

    fn finish(self) -> Result<(), ProtocolError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(ProtocolError::TrailingBytes(n)),
        }
    }
}

/// Decodes a frame body (everything after the length prefix).
pub fn decode_body(body: &[u8]) -> Result<WireMessage, ProtocolError> {
    let (&msg_type, payload) = body.split_first().ok_or(ProtocolError::Empty)?;
    let mut p = Payload { buf: payload, pos: 0 };
    let msg = match msg_type {
        MSG_HELLO => {
            let version = p.u32("version")?;
            let (obs_dtype, obs_shape) = p.descriptor()?;
            let num_actions = p.u32("num_actions")? as usize;
            if num_actions == 0 {
                return Err(ProtocolError::Invalid("HELLO advertises zero actions".into()));
            }
            WireMessage::Hello {
                version,
                spec: EnvSpec {
                    obs_dtype,
                    obs_shape,
                    num_actions,
                },
            }
        }
        MSG_STEP => {
            let observation = p.array()?;
            let reward = p.f32("reward")?;
            let done = match p.u8("done")? {
                0 => false,
                1 => true,
                v => return Err(ProtocolError::Invalid(format!("done byte {v} is not 0 or 1"))),
            };
            WireMessage::Step(EnvOutput {
                observation,
                reward,
                done,
                episode_step: p.i64("episode_step")?,
                episode_return: p.f32("episode_return")?,
            })
        }
        MSG_ACTION => {
            let (dtype, dims) = p.descriptor()?;
            if dtype != DType::I64 || !dims.is_empty() {
                return Err(ProtocolError::Invalid(format!(
                    "ACTION must be a scalar i64, got {dtype} {dims:?}"
                )));
            }
            WireMessage::Action(p.i64("action")?)
        }
        MSG_BYE => WireMessage::Bye,
        MSG_ERROR => {
            let code = p.u32("error code")?;
            let len = p.u32("message length")? as usize;
            let bytes = p.take(len, "error message")?;
            let message = String::from_utf8(bytes.to_vec())
                .map_err(|_| ProtocolError::Invalid("ERROR message is not UTF-8".into()))?;
            WireMessage::Error { code, message }
        }
        other => return Err(ProtocolError::UnknownType(other)),
    };
    p.finish()?;
    Ok(msg)
}

/// Decodes exactly one complete frame; extra bytes are rejected.
pub fn decode_frame(bytes: &[u8]) -> Result<WireMessage, ProtocolError> {
    if bytes.len() < 4 {
        return Err(ProtocolError::Truncated {
            what: "length prefix",
            need: 4,
            have: bytes.len(),
        });
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::Oversize(len));
    }
    let body = &bytes[4..];
    if body.len() < len {
        return Err(ProtocolError::Truncated {
            what: "frame",
            need: len,
            have: body.len(),
        });
    }
    if body.len() > len {
        return Err(ProtocolError::TrailingBytes(body.len() - len));
    }
    decode_body(body)
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream before the
/// first length byte.
pub fn read_message<R: Read + ?Sized>(r: &mut R) -> Result<Option<WireMessage>, ProtocolError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(ProtocolError::Truncated {
                    what: "length prefix",
                    need: 4,
                    have: got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::Oversize(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Truncated {
            what: "frame",
            need: len,
            have: 0,
        },
        _ => e.into(),
    })?;
    decode_body(&body).map(Some)
}

pub fn write_message<W: Write + ?Sized>(w: &mut W, msg: &WireMessage) -> Result<(), ProtocolError> {
    w.write_all(&encode_frame(msg)?)?;
    w.flush()?;
    Ok(())
}
