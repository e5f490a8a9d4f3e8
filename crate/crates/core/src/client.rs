//! Operator-side request/response over any [`Transport`].

use std::fs;
use std::io;
use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::coap::{code, decode, CoapError, CoapMessage, MessageType};
use crate::secure::{open, seal, Key, ReplayWindow, SecureError};
use crate::transport::Transport;

#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub target: String,
    pub sender_id: u32,
    pub psk: Key,
    /// Expected sender id of replies; any id is accepted when `None`.
    pub device_id: Option<u32>,
    /// Where the next sequence number is persisted between runs.
    pub seq_file: Option<PathBuf>,
    /// First attempt's timeout; doubled on each retransmission.
    pub timeout: Duration,
    /// Total attempts for a CON request.
    pub attempts: u32,
}

impl ClientConfig {
    pub fn new(target: impl Into<String>, sender_id: u32, psk: Key) -> Self {
        Self {
            target: target.into(),
            sender_id,
            psk,
            device_id: None,
            seq_file: None,
            timeout: Duration::from_secs(2),
            attempts: 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("no response after {0} attempts")]
    Timeout(u32),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad request: {0}")]
    Coap(#[from] CoapError),
    #[error("sequence file {0}: {1}")]
    SeqFile(PathBuf, String),
}

/// Monotonic sequence numbers, written back before each is used so a crash
/// can never cause reuse.
#[derive(Debug)]
pub struct SeqStore {
    path: Option<PathBuf>,
    next: u64,
}

impl SeqStore {
    pub fn in_memory(start: u64) -> Self {
        Self {
            path: None,
            next: start,
        }
    }

    pub fn open(path: PathBuf) -> Result<Self, ClientError> {
        let next = match fs::read_to_string(&path) {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|e| ClientError::SeqFile(path.clone(), format!("{e}")))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(ClientError::SeqFile(path, e.to_string())),
        };
        Ok(Self {
            path: Some(path),
            next,
        })
    }

    pub fn peek(&self) -> u64 {
        self.next
    }

    pub fn take(&mut self) -> Result<u64, ClientError> {
        let seq = self.next;
        if let Some(p) = &self.path {
            let tmp = p.with_extension("tmp");
            fs::write(&tmp, format!("{}\n", seq + 1))
                .and_then(|_| fs::rename(&tmp, p))
                .map_err(|e| ClientError::SeqFile(p.clone(), e.to_string()))?;
        }
        self.next = seq + 1;
        Ok(seq)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub message: CoapMessage,
    pub attempts: u32,
}

impl Response {
    pub fn code(&self) -> u8 {
        self.message.code
    }

    pub fn is_success(&self) -> bool {
        code::is_success(self.message.code)
    }
}

pub struct Client<T> {
    config: ClientConfig,
    transport: T,
    seq: SeqStore,
    window: ReplayWindow,
}

impl<T: Transport> Client<T> {
    pub fn new(config: ClientConfig, transport: T) -> Result<Self, ClientError> {
        let seq = match &config.seq_file {
            Some(p) => SeqStore::open(p.clone())?,
            None => SeqStore::in_memory(0),
        };
        Ok(Self {
            config,
            transport,
            seq,
            window: ReplayWindow::new(),
        })
    }

    pub fn with_seq(config: ClientConfig, transport: T, seq: SeqStore) -> Self {
        Self {
            config,
            transport,
            seq,
            window: ReplayWindow::new(),
        }
    }

    pub fn transport(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn next_seq(&self) -> u64 {
        self.seq.peek()
    }

    /// CON request with retransmission. Each attempt is sealed with a fresh
    /// sequence number but keeps the message id and token, so the device
    /// can recognise the retransmission.
    pub fn request(&mut self, method: u8, path: &str, payload: &[u8]) -> Result<Response, ClientError> {
        let first = self.seq.peek();
        let mid = first as u16;
        let token = (first as u32).to_be_bytes();
        let msg = CoapMessage::request(MessageType::Con, method, mid, path)
            .with_token(&token)
            .with_payload(payload.to_vec());
        let body = msg.encode()?;
        let mut timeout = self.config.timeout;
        for attempt in 1..=self.config.attempts.max(1) {
            let seq = self.seq.take()?;
            let env = seal(&self.config.psk, self.config.sender_id, seq, &body);
            if let Some(reply) = self.transport.exchange(&env, timeout)? {
                if let Some(m) = self.accept(&reply, mid, &token) {
                    return Ok(Response {
                        message: m,
                        attempts: attempt,
                    });
                }
            }
            timeout *= 2;
        }
        Err(ClientError::Timeout(self.config.attempts.max(1)))
    }

    fn accept(&mut self, reply: &[u8], mid: u16, token: &[u8]) -> Option<CoapMessage> {
        let mut w = self.window;
        let opened = match open(&self.config.psk, &mut w, reply) {
            Ok(o) => o,
            Err(SecureError::Replayed | SecureError::BadTag | SecureError::BadMagic | SecureError::Truncated) => {
                return None
            }
        };
        if self.config.device_id.is_some_and(|d| d != opened.sender) {
            return None;
        }
        let m = decode(&opened.body).ok()?;
        let matches = match m.mtype {
            MessageType::Ack => m.message_id == mid,
            MessageType::Non | MessageType::Con => m.token == token,
            MessageType::Rst => m.message_id == mid,
        };
        if matches {
            self.window = w;
            Some(m)
        } else {
            None
        }
    }

    pub fn get(&mut self, path: &str) -> Result<Response, ClientError> {
        self.request(code::GET, path, &[])
    }

    pub fn put(&mut self, path: &str, payload: &[u8]) -> Result<Response, ClientError> {
        self.request(code::PUT, path, payload)
    }

    pub fn post(&mut self, path: &str, payload: &[u8]) -> Result<Response, ClientError> {
        self.request(code::POST, path, payload)
    }

    pub fn delete(&mut self, path: &str) -> Result<Response, ClientError> {
        self.request(code::DELETE, path, &[])
    }
}
