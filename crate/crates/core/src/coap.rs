//! CoAP (RFC 7252) message codec, subset: no observe, no block-wise.

use std::fmt;

use thiserror::Error;

pub const VERSION: u8 = 1;
pub const PAYLOAD_MARKER: u8 = 0xFF;
pub const MAX_TOKEN_LEN: usize = 8;

pub const OPT_URI_PATH: u16 = 11;
pub const OPT_CONTENT_FORMAT: u16 = 12;

/// Largest delta or length expressible with the 14-nibble extension.
const MAX_EXT: usize = 65535 + 269;

/// Code bytes, `class << 5 | detail`.
pub mod code {
    pub const EMPTY: u8 = 0x00;
    pub const GET: u8 = 0x01;
    pub const POST: u8 = 0x02;
    pub const PUT: u8 = 0x03;
    pub const DELETE: u8 = 0x04;
    pub const CREATED: u8 = 0x41;
    pub const DELETED: u8 = 0x42;
    pub const CHANGED: u8 = 0x44;
    pub const CONTENT: u8 = 0x45;
    pub const BAD_REQUEST: u8 = 0x80;
    pub const UNAUTHORIZED: u8 = 0x81;
    pub const NOT_FOUND: u8 = 0x84;
    pub const METHOD_NOT_ALLOWED: u8 = 0x85;
    pub const REQUEST_ENTITY_TOO_LARGE: u8 = 0x8D;
    pub const INTERNAL_SERVER_ERROR: u8 = 0xA0;

    /// `"c.dd"` rendering, e.g. `0x45` -> `"2.05"`.
    pub fn to_string(code: u8) -> String {
        format!("{}.{:02}", code >> 5, code & 0x1F)
    }

    pub fn class(code: u8) -> u8 {
        code >> 5
    }

    pub fn is_request(code: u8) -> bool {
        class(code) == 0 && code != EMPTY
    }

    pub fn is_success(code: u8) -> bool {
        class(code) == 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageType {
    Con = 0,
    Non = 1,
    Ack = 2,
    Rst = 3,
}

impl MessageType {
    fn from_bits(b: u8) -> Self {
        match b & 3 {
            0 => MessageType::Con,
            1 => MessageType::Non,
            2 => MessageType::Ack,
            _ => MessageType::Rst,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoapOption {
    pub number: u16,
    pub value: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoapMessage {
    pub mtype: MessageType,
    pub code: u8,
    pub message_id: u16,
    pub token: Vec<u8>,
    /// Sorted by number; repeated numbers keep their relative order.
    pub options: Vec<CoapOption>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoapError {
    #[error("message truncated")]
    Truncated,
    #[error("unsupported CoAP version {0}")]
    BadVersion(u8),
    #[error("reserved option nibble 15")]
    ReservedOptionNibble,
    #[error("payload marker followed by empty payload")]
    StrayPayloadMarker,
    #[error("token longer than 8 bytes")]
    TokenTooLong,
    #[error("options not sorted by number")]
    OptionOutOfOrder,
    #[error("option value too long")]
    OptionTooLong,
    #[error("option number overflow")]
    OptionNumberOverflow,
    #[error("Uri-Path segment is not UTF-8")]
    NonUtf8Segment,
}

impl CoapMessage {
    pub fn new(mtype: MessageType, code: u8, message_id: u16) -> Self {
        Self {
            mtype,
            code,
            message_id,
            token: Vec::new(),
            options: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn request(mtype: MessageType, method: u8, message_id: u16, path: &str) -> Self {
        let mut m = Self::new(mtype, method, message_id);
        set_uri_path(&mut m, path.split('/').filter(|s| !s.is_empty()));
        m
    }

    pub fn with_token(mut self, token: &[u8]) -> Self {
        self.token = token.to_vec();
        self
    }

    pub fn with_payload(mut self, payload: impl Into<Vec<u8>>) -> Self {
        self.payload = payload.into();
        self
    }

    /// Insert an option, keeping the list sorted.
    pub fn add_option(&mut self, number: u16, value: impl Into<Vec<u8>>) {
        let at = self.options.partition_point(|o| o.number <= number);
        self.options.insert(
            at,
            CoapOption {
                number,
                value: value.into(),
            },
        );
    }

    pub fn option(&self, number: u16) -> Option<&[u8]> {
        self.options
            .iter()
            .find(|o| o.number == number)
            .map(|o| o.value.as_slice())
    }

    pub fn content_format(&self) -> Option<u32> {
        self.option(OPT_CONTENT_FORMAT)
            .map(|v| v.iter().fold(0u32, |acc, &b| (acc << 8) | b as u32))
    }

    pub fn set_content_format(&mut self, cf: u32) {
        self.options.retain(|o| o.number != OPT_CONTENT_FORMAT);
        self.add_option(OPT_CONTENT_FORMAT, encode_uint(cf));
    }

    pub fn encode(&self) -> Result<Vec<u8>, CoapError> {
        encode(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CoapError> {
        decode(bytes)
    }
}

impl fmt::Display for CoapMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} {} mid={} token={}",
            self.mtype,
            code::to_string(self.code),
            self.message_id,
            hex::encode(&self.token)
        )?;
        if let Ok(path) = uri_path(self) {
            if !path.is_empty() {
                write!(f, " /{}", path.join("/"))?;
            }
        }
        if !self.payload.is_empty() {
            write!(f, " payload={}B", self.payload.len())?;
        }
        Ok(())
    }
}

/// Minimal big-endian uint option value (zero is the empty string).
pub fn encode_uint(v: u32) -> Vec<u8> {
    let b = v.to_be_bytes();
    let skip = b.iter().take_while(|&&x| x == 0).count();
    b[skip..].to_vec()
}

fn nibble(v: usize) -> (u8, usize) {
    if v < 13 {
        (v as u8, 0)
    } else if v < 269 {
        (13, 1)
    } else {
        (14, 2)
    }
}

fn put_ext(out: &mut Vec<u8>, v: usize, len: usize) {
    match len {
        1 => out.push((v - 13) as u8),
        2 => out.extend_from_slice(&((v - 269) as u16).to_be_bytes()),
        _ => {}
    }
}

pub fn encode(msg: &CoapMessage) -> Result<Vec<u8>, CoapError> {
    if msg.token.len() > MAX_TOKEN_LEN {
        return Err(CoapError::TokenTooLong);
    }
    let mut out = Vec::with_capacity(
        4 + msg.token.len()
            + msg.options.iter().map(|o| o.value.len() + 5).sum::<usize>()
            + 1
            + msg.payload.len(),
    );
    out.push(VERSION << 6 | (msg.mtype as u8) << 4 | msg.token.len() as u8);
    out.push(msg.code);
    out.extend_from_slice(&msg.message_id.to_be_bytes());
    out.extend_from_slice(&msg.token);
    let mut prev = 0u16;
    for opt in &msg.options {
        if opt.number < prev {
            return Err(CoapError::OptionOutOfOrder);
        }
        if opt.value.len() > MAX_EXT {
            return Err(CoapError::OptionTooLong);
        }
        let delta = (opt.number - prev) as usize;
        let (dn, dl) = nibble(delta);
        let (ln, ll) = nibble(opt.value.len());
        out.push(dn << 4 | ln);
        put_ext(&mut out, delta, dl);
        put_ext(&mut out, opt.value.len(), ll);
        out.extend_from_slice(&opt.value);
        prev = opt.number;
    }
    if !msg.payload.is_empty() {
        out.push(PAYLOAD_MARKER);
        out.extend_from_slice(&msg.payload);
    }
    Ok(out)
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CoapError> {
        let end = self.at.checked_add(n).ok_or(CoapError::Truncated)?;
        let s = self.b.get(self.at..end).ok_or(CoapError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8, CoapError> {
        Ok(self.take(1)?[0])
    }

    fn ext(&mut self, nib: u8) -> Result<usize, CoapError> {
        Ok(match nib {
            0..=12 => nib as usize,
            13 => self.byte()? as usize + 13,
            14 => {
                let s = self.take(2)?;
                u16::from_be_bytes([s[0], s[1]]) as usize + 269
            }
            _ => return Err(CoapError::ReservedOptionNibble),
        })
    }

    fn rest(&self) -> &'a [u8] {
        &self.b[self.at..]
    }
}

pub fn decode(bytes: &[u8]) -> Result<CoapMessage, CoapError> {
    let mut c = Cursor { b: bytes, at: 0 };
    let h = c.take(4)?;
    let version = h[0] >> 6;
    if version != VERSION {
        return Err(CoapError::BadVersion(version));
    }
    let tkl = (h[0] & 0x0F) as usize;
    if tkl > MAX_TOKEN_LEN {
        return Err(CoapError::TokenTooLong);
    }
    let mtype = MessageType::from_bits(h[0] >> 4);
    let code = h[1];
    let message_id = u16::from_be_bytes([h[2], h[3]]);
    let token = c.take(tkl)?.to_vec();

    let mut options = Vec::new();
    let mut number = 0u32;
    let mut payload = Vec::new();
    while let Ok(b) = c.byte() {
        if b == PAYLOAD_MARKER {
            let rest = c.rest();
            if rest.is_empty() {
                return Err(CoapError::StrayPayloadMarker);
            }
            payload = rest.to_vec();
            break;
        }
        let delta = c.ext(b >> 4)?;
        let len = c.ext(b & 0x0F)?;
        number += delta as u32;
        if number > u16::MAX as u32 {
            return Err(CoapError::OptionNumberOverflow);
        }
        let value = c.take(len)?.to_vec();
        options.push(CoapOption {
            number: number as u16,
            value,
        });
    }
    Ok(CoapMessage {
        mtype,
        code,
        message_id,
        token,
        options,
        payload,
    })
}

/// Uri-Path segments in order.
pub fn uri_path(msg: &CoapMessage) -> Result<Vec<String>, CoapError> {
    msg.options
        .iter()
        .filter(|o| o.number == OPT_URI_PATH)
        .map(|o| String::from_utf8(o.value.clone()).map_err(|_| CoapError::NonUtf8Segment))
        .collect()
}

/// Replace all Uri-Path options.
pub fn set_uri_path<S: AsRef<str>>(msg: &mut CoapMessage, segments: impl IntoIterator<Item = S>) {
    msg.options.retain(|o| o.number != OPT_URI_PATH);
    let mut at = msg.options.partition_point(|o| o.number <= OPT_URI_PATH);
    for s in segments {
        msg.options.insert(
            at,
            CoapOption {
                number: OPT_URI_PATH,
                value: s.as_ref().as_bytes().to_vec(),
            },
        );
        at += 1;
    }
}
