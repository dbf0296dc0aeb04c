use std::io::{BufReader, Cursor, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Duration;

use log::{debug, warn};

use crate::envs::{Accounted, EnvError, Environment};
use crate::rollout::{EnvOutput, EnvSpec};

use super::{encode_frame, error_code, read_message, write_message, ProtocolError, WireMessage, PROTOCOL_VERSION};

/// Why a server-side session ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionEnd {
    /// Client sent BYE.
    Bye,
    /// Stream closed without BYE.
    Disconnected,
    /// Server stopped; BYE was sent.
    Stopped,
    InvalidAction,
    ProtocolViolation,
    EnvFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionReport {
    pub end: SessionEnd,
    pub steps: u64,
}

fn send_error<W: Write + ?Sized>(w: &mut W, code: u32, message: String) {
    if let Err(e) = write_message(w, &WireMessage::Error { code, message }) {
        debug!("could not deliver ERROR frame: {e}");
    }
}

fn ended(end: SessionEnd, steps: u64) -> Result<SessionReport, ProtocolError> {
    Ok(SessionReport { end, steps })
}

/// Serves one environment copy over a byte stream until BYE or disconnect.
pub fn env_session<R, W, E>(reader: &mut R, writer: &mut W, env: E) -> Result<SessionReport, ProtocolError>
where
    R: Read + ?Sized,
    W: Write + ?Sized,
    E: Environment,
{
    run_session(reader, writer, env, &AtomicBool::new(false), &AtomicU64::new(0))
}

/// Session body shared with the TCP server. `stop` turns an end of stream
/// into a server-initiated close (BYE sent); `steps` counts env steps live.
pub(crate) fn run_session<R, W, E>(
    reader: &mut R,
    writer: &mut W,
    env: E,
    stop: &AtomicBool,
    steps: &AtomicU64,
) -> Result<SessionReport, ProtocolError>
where
    R: Read + ?Sized,
    W: Write + ?Sized,
    E: Environment,
{
    let mut env = Accounted::new(env);
    let spec = env.spec();
    write_message(writer, &WireMessage::hello(spec.clone()))?;
    write_message(writer, &WireMessage::Step(env.initial()))?;
    let mut count = 0u64;
    loop {
        let msg = match read_message(reader) {
            Ok(Some(m)) => m,
            Ok(None) | Err(ProtocolError::Io(_)) if stop.load(Ordering::SeqCst) => {
                let _ = write_message(writer, &WireMessage::Bye);
                return ended(SessionEnd::Stopped, count);
            }
            Ok(None) => return ended(SessionEnd::Disconnected, count),
            Err(ProtocolError::Io(e)) => {
                debug!("session stream error: {e}");
                return ended(SessionEnd::Disconnected, count);
            }
            Err(e) => {
                send_error(writer, error_code::PROTOCOL_VIOLATION, e.to_string());
                return ended(SessionEnd::ProtocolViolation, count);
            }
        };
        let action = match msg {
            WireMessage::Action(a) => a,
            WireMessage::Bye => return ended(SessionEnd::Bye, count),
            other => {
                send_error(
                    writer,
                    error_code::PROTOCOL_VIOLATION,
                    format!("expected ACTION or BYE, received {}", other.name()),
                );
                return ended(SessionEnd::ProtocolViolation, count);
            }
        };
        let out = match env.step(action) {
            Ok(out) => out,
            Err(e @ EnvError::InvalidAction { .. }) => {
                send_error(writer, error_code::INVALID_ACTION, e.to_string());
                return ended(SessionEnd::InvalidAction, count);
            }
            Err(e) => {
                send_error(writer, error_code::ENV_FAILURE, e.to_string());
                return ended(SessionEnd::EnvFailure, count);
            }
        };
        if let Err(e) = spec.check_observation(&out.observation) {
            send_error(writer, error_code::ENV_FAILURE, e.to_string());
            return ended(SessionEnd::EnvFailure, count);
        }
        count += 1;
        steps.fetch_add(1, Ordering::Relaxed);
        if let Err(e) = write_message(writer, &WireMessage::Step(out)) {
            debug!("session write failed: {e}");
            return ended(SessionEnd::Disconnected, count);
        }
    }
}

/// Runs a scripted session in memory and returns every byte the server
/// wrote. The client side sends one ACTION per script entry, then BYE.
pub fn session_transcript<E: Environment>(env: E, actions: &[i64]) -> Result<Vec<u8>, ProtocolError> {
    let mut input = Vec::new();
    for &a in actions {
        input.extend(encode_frame(&WireMessage::Action(a))?);
    }
    input.extend(encode_frame(&WireMessage::Bye)?);
    let mut output = Vec::new();
    env_session(&mut Cursor::new(input), &mut output, env)?;
    Ok(output)
}

/// Actor-side connection to an environment server.
pub struct EnvClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    spec: EnvSpec,
    peer: SocketAddr,
}

impl EnvClient {
    /// Connects, reads HELLO and the initial STEP.
    pub fn connect<A: ToSocketAddrs>(addr: A, timeout: Duration) -> Result<(Self, EnvOutput), ProtocolError> {
        let mut last = None;
        for sa in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&sa, timeout) {
                Ok(stream) => return Self::handshake(stream),
                Err(e) => last = Some(e),
            }
        }
        Err(last
            .unwrap_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "address resolved to nothing"))
            .into())
    }

    pub fn handshake(stream: TcpStream) -> Result<(Self, EnvOutput), ProtocolError> {
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr()?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let spec = match read_message(&mut reader)? {
            Some(WireMessage::Hello { version, spec }) => {
                if version != PROTOCOL_VERSION {
                    return Err(ProtocolError::Version { got: version });
                }
                spec
            }
            other => return Err(unexpected("HELLO", other)),
        };
        let mut client = EnvClient {
            reader,
            writer: stream,
            spec,
            peer,
        };
        let first = client.read_step()?;
        Ok((client, first))
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    /// Caps how long a single read may block.
    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> Result<(), ProtocolError> {
        Ok(self.writer.set_read_timeout(timeout)?)
    }

    pub fn step(&mut self, action: i64) -> Result<EnvOutput, ProtocolError> {
        write_message(&mut self.writer, &WireMessage::Action(action))?;
        self.read_step()
    }

    fn read_step(&mut self) -> Result<EnvOutput, ProtocolError> {
        match read_message(&mut self.reader)? {
            Some(WireMessage::Step(out)) => {
                self.spec.check_observation(&out.observation)?;
                Ok(out)
            }
            other => Err(unexpected("STEP", other)),
        }
    }

    /// Sends BYE and closes the connection.
    pub fn close(mut self) {
        if let Err(e) = write_message(&mut self.writer, &WireMessage::Bye) {
            warn!("BYE to {} failed: {e}", self.peer);
        }
        let _ = self.writer.shutdown(Shutdown::Both);
    }
}

fn unexpected(expected: &'static str, got: Option<WireMessage>) -> ProtocolError {
    match got {
        None | Some(WireMessage::Bye) => ProtocolError::Closed,
        Some(WireMessage::Error { code, message }) => ProtocolError::Remote { code, message },
        Some(m) => ProtocolError::UnexpectedMessage {
            expected,
            got: m.name(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{BanditEnv, GridMaze};
    use crate::wire::decode_frame;

    fn frames(mut bytes: &[u8]) -> Vec<WireMessage> {
        let mut out = Vec::new();
        while let Some(m) = read_message(&mut bytes).unwrap() {
            out.push(m);
        }
        out
    }

    #[test]
    fn hello_then_done_step() {
        let out = session_transcript(GridMaze::new(5), &[]).unwrap();
        let msgs = frames(&out);
        assert_eq!(msgs.len(), 2);
        assert!(matches!(&msgs[0], WireMessage::Hello { version: 1, spec } if spec.num_actions == 4));
        match &msgs[1] {
            WireMessage::Step(s) => assert!(s.done && s.reward == 0.0 && s.episode_step == 0),
            m => panic!("unexpected {m:?}"),
        }
    }

    #[test]
    fn alternation() {
        let out = session_transcript(BanditEnv::new(), &[1, 0, 1]).unwrap();
        let msgs = frames(&out);
        assert_eq!(msgs.len(), 5);
        let rewards: Vec<f32> = msgs[2..]
            .iter()
            .map(|m| match m {
                WireMessage::Step(s) => s.reward,
                _ => panic!(),
            })
            .collect();
        assert_eq!(rewards, [1.0, 0.0, 1.0]);
    }

    #[test]
    fn invalid_action_gets_error_code_1() {
        let mut input = encode_frame(&WireMessage::Action(5)).unwrap();
        input.extend(encode_frame(&WireMessage::Action(0)).unwrap());
        let mut out = Vec::new();
        let report = env_session(&mut Cursor::new(input), &mut out, BanditEnv::new()).unwrap();
        assert_eq!(report.end, SessionEnd::InvalidAction);
        let msgs = frames(&out);
        assert_eq!(msgs.len(), 3);
        assert!(matches!(msgs[2], WireMessage::Error { code: 1, .. }));
    }

    #[test]
    fn wrong_message_gets_error_code_2() {
        let input = encode_frame(&WireMessage::hello(BanditEnv::new().spec())).unwrap();
        let mut out = Vec::new();
        let report = env_session(&mut Cursor::new(input), &mut out, BanditEnv::new()).unwrap();
        assert_eq!(report.end, SessionEnd::ProtocolViolation);
        assert!(matches!(frames(&out)[2], WireMessage::Error { code: 2, .. }));

        let mut out = Vec::new();
        let garbage = vec![1u8, 0, 0, 0, 0x7F];
        let report = env_session(&mut Cursor::new(garbage), &mut out, BanditEnv::new()).unwrap();
        assert_eq!(report.end, SessionEnd::ProtocolViolation);
    }

    #[test]
    fn disconnect_without_bye() {
        let input = encode_frame(&WireMessage::Action(1)).unwrap();
        let mut out = Vec::new();
        let report = env_session(&mut Cursor::new(input), &mut out, BanditEnv::new()).unwrap();
        assert_eq!(
            report,
            SessionReport {
                end: SessionEnd::Disconnected,
                steps: 1
            }
        );
    }

    #[test]
    fn first_frame_is_hello_bytes() {
        let out = session_transcript(BanditEnv::new(), &[]).unwrap();
        let hello = &out[..19];
        assert_eq!(hello, [0x0f, 0, 0, 0, 1, 1, 0, 0, 0, 2, 1, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert!(matches!(decode_frame(hello).unwrap(), WireMessage::Hello { .. }));
    }
}
