//! Wire layer: the message envelope, canonical encoding, stdio and socket
//! framing, the human-tool call/response types, and the method registry.
//!
//! Stdio frames are `LEN dddddddd\n` (eight zero-padded decimal digits)
//! followed by exactly that many bytes of canonical JSON. Socket transports
//! carry one canonical JSON text per message.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Read, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::interaction::{Behavior, ResponseKind, Stage};
use crate::taskgraph::InvocationReason;

pub const PROTOCOL_VERSION: &str = "humantool/1";

const HEADER_PREFIX: &[u8] = b"LEN ";
const HEADER_DIGITS: usize = 8;
/// `LEN ` + eight digits + newline.
pub const HEADER_LEN: usize = HEADER_PREFIX.len() + HEADER_DIGITS + 1;
pub const MAX_FRAME_BODY: usize = 99_999_999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    InvalidMessage,
    UnknownMethod,
    UnknownCall,
    PastDeadline,
    DuplicateResponse,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 5] = [
        ErrorCode::InvalidMessage,
        ErrorCode::UnknownMethod,
        ErrorCode::UnknownCall,
        ErrorCode::PastDeadline,
        ErrorCode::DuplicateResponse,
    ];

    pub fn code(self) -> i64 {
        match self {
            ErrorCode::InvalidMessage => -32600,
            ErrorCode::UnknownMethod => -32601,
            ErrorCode::UnknownCall => 40404,
            ErrorCode::PastDeadline => 40801,
            ErrorCode::DuplicateResponse => 40901,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.code() == code)
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RequestId {
    Int(i64),
    Str(String),
}

impl From<&str> for RequestId {
    fn from(s: &str) -> Self {
        RequestId::Str(s.to_string())
    }
}

impl From<i64> for RequestId {
    fn from(n: i64) -> Self {
        RequestId::Int(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Request,
    Response,
    Error,
    Notification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: i64,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub protocol_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<RequestId>,
    pub kind: MessageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
    /// Unknown top-level fields, kept for forward compatibility.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl WireMessage {
    fn base(kind: MessageKind) -> Self {
        Self {
            protocol_version: PROTOCOL_VERSION.to_string(),
            id: None,
            kind,
            method: None,
            payload: None,
            error: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn request(id: impl Into<RequestId>, method: &str, payload: Value) -> Self {
        Self { id: Some(id.into()), method: Some(method.to_string()), payload: Some(payload), ..Self::base(MessageKind::Request) }
    }

    pub fn response(id: RequestId, payload: Value) -> Self {
        Self { id: Some(id), payload: Some(payload), ..Self::base(MessageKind::Response) }
    }

    pub fn notification(method: &str, payload: Value) -> Self {
        Self { method: Some(method.to_string()), payload: Some(payload), ..Self::base(MessageKind::Notification) }
    }

    pub fn error(id: Option<RequestId>, code: ErrorCode, message: impl Into<String>, data: Option<Value>) -> Self {
        Self {
            id,
            error: Some(WireError { code: code.code(), message: message.into(), data }),
            ..Self::base(MessageKind::Error)
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(format!("unsupported protocol_version `{}`", self.protocol_version));
        }
        match self.kind {
            MessageKind::Request => {
                if self.id.is_none() {
                    return Err("request without id".into());
                }
                if self.method.as_deref().map_or(true, str::is_empty) {
                    return Err("request without method".into());
                }
                if self.error.is_some() {
                    return Err("request carries an error".into());
                }
            }
            MessageKind::Response => {
                if self.id.is_none() {
                    return Err("response without id".into());
                }
                if self.method.is_some() || self.error.is_some() {
                    return Err("response carries method or error".into());
                }
            }
            MessageKind::Notification => {
                if self.id.is_some() {
                    return Err("notification with id".into());
                }
                if self.method.as_deref().map_or(true, str::is_empty) {
                    return Err("notification without method".into());
                }
                if self.error.is_some() {
                    return Err("notification carries an error".into());
                }
            }
            MessageKind::Error => {
                let Some(err) = &self.error else {
                    return Err("error message without error body".into());
                };
                if ErrorCode::from_code(err.code).is_none() {
                    return Err(format!("error code {} not in registry", err.code));
                }
                if self.method.is_some() || self.payload.is_some() {
                    return Err("error message carries method or payload".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("invalid message: {0}")]
    Invalid(String),
    #[error("frame body of {0} bytes exceeds the header's range")]
    TooLarge(usize),
    #[error("serialization failed: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameErrorKind {
    BadHeader,
    Truncated { expected: usize, available: usize },
    InvalidUtf8,
    InvalidJson(String),
    Schema(String),
    TrailingBytes,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("frame error at byte {offset}: {kind:?}")]
pub struct FrameError {
    pub offset: usize,
    pub kind: FrameErrorKind,
}

impl FrameError {
    pub fn code(&self) -> ErrorCode {
        ErrorCode::InvalidMessage
    }

    pub fn to_wire(&self) -> WireMessage {
        WireMessage::error(None, ErrorCode::InvalidMessage, self.to_string(), Some(serde_json::json!({ "offset": self.offset })))
    }
}

/// Canonical JSON text: sorted keys, compact, absent optionals omitted.
pub fn encode_text(message: &WireMessage) -> Result<String, EncodeError> {
    message.validate().map_err(EncodeError::Invalid)?;
    crate::canonical_json(message).map_err(|e| EncodeError::Json(e.to_string()))
}

/// Length-prefixed stdio frame.
pub fn encode(message: &WireMessage) -> Result<Vec<u8>, EncodeError> {
    let body = encode_text(message)?;
    if body.len() > MAX_FRAME_BODY {
        return Err(EncodeError::TooLarge(body.len()));
    }
    let mut out = format!("LEN {:08}\n", body.len()).into_bytes();
    out.extend_from_slice(body.as_bytes());
    Ok(out)
}

fn parse_body(body: &[u8], offset: usize) -> Result<WireMessage, FrameError> {
    let text = std::str::from_utf8(body).map_err(|e| FrameError { offset: offset + e.valid_up_to(), kind: FrameErrorKind::InvalidUtf8 })?;
    decode_text_at(text, offset)
}

fn decode_text_at(text: &str, offset: usize) -> Result<WireMessage, FrameError> {
    let value: Value = serde_json::from_str(text).map_err(|e| FrameError {
        offset: offset + byte_offset(text, e.line(), e.column()),
        kind: FrameErrorKind::InvalidJson(e.to_string()),
    })?;
    let msg: WireMessage = serde_json::from_value(value)
        .map_err(|e| FrameError { offset, kind: FrameErrorKind::Schema(e.to_string()) })?;
    msg.validate().map_err(|e| FrameError { offset, kind: FrameErrorKind::Schema(e) })?;
    Ok(msg)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut off = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (off + column.saturating_sub(1)).min(text.len());
        }
        off += l.len();
    }
    text.len()
}

/// Parses a frame header, returning the body length.
fn parse_header(bytes: &[u8]) -> Result<usize, FrameError> {
    for (i, &b) in bytes.iter().enumerate().take(HEADER_LEN) {
        let ok = match i {
            0..=3 => b == HEADER_PREFIX[i],
            12 => b == b'\n',
            _ => b.is_ascii_digit(),
        };
        if !ok {
            return Err(FrameError { offset: i, kind: FrameErrorKind::BadHeader });
        }
    }
    if bytes.len() < HEADER_LEN {
        return Err(FrameError {
            offset: bytes.len(),
            kind: FrameErrorKind::Truncated { expected: HEADER_LEN, available: bytes.len() },
        });
    }
    let digits = std::str::from_utf8(&bytes[4..12]).expect("ascii digits");
    Ok(digits.parse().expect("eight ascii digits fit usize"))
}

/// Decodes the first frame in `bytes`, returning the message and the number
/// of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(WireMessage, usize), FrameError> {
    let len = parse_header(bytes)?;
    let available = bytes.len() - HEADER_LEN;
    if available < len {
        return Err(FrameError { offset: bytes.len(), kind: FrameErrorKind::Truncated { expected: len, available } });
    }
    let msg = parse_body(&bytes[HEADER_LEN..HEADER_LEN + len], HEADER_LEN)?;
    Ok((msg, HEADER_LEN + len))
}

/// Decodes exactly one stdio frame.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, FrameError> {
    let (msg, used) = decode_frame(bytes)?;
    if used != bytes.len() {
        return Err(FrameError { offset: used, kind: FrameErrorKind::TrailingBytes });
    }
    Ok(msg)
}

/// Decodes one socket text message.
pub fn decode_text(text: &str) -> Result<WireMessage, FrameError> {
    decode_text_at(text, 0)
}

/// Reads frames from a byte stream. `Ok(None)` on clean end of stream.
pub fn read_frame<R: BufRead>(reader: &mut R) -> io::Result<Option<Result<WireMessage, FrameError>>> {
    let mut header = Vec::with_capacity(HEADER_LEN);
    let n = reader.by_ref().take(HEADER_LEN as u64).read_to_end(&mut header)?;
    if n == 0 {
        return Ok(None);
    }
    let len = match parse_header(&header) {
        Ok(len) => len,
        Err(e) => return Ok(Some(Err(e))),
    };
    let mut body = vec![0u8; len];
    let mut filled = 0;
    while filled < len {
        let got = reader.read(&mut body[filled..])?;
        if got == 0 {
            return Ok(Some(Err(FrameError {
                offset: HEADER_LEN + filled,
                kind: FrameErrorKind::Truncated { expected: len, available: filled },
            })));
        }
        filled += got;
    }
    Ok(Some(parse_body(&body, HEADER_LEN)))
}

pub fn write_frame<W: Write>(writer: &mut W, message: &WireMessage) -> io::Result<()> {
    let bytes = encode(message).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    writer.write_all(&bytes)?;
    writer.flush()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanToolCall {
    pub call_id: String,
    pub session_id: String,
    pub node_id: String,
    pub stage: Stage,
    pub behavior: Behavior,
    #[serde(default)]
    pub reason: Option<InvocationReason>,
    pub prompt_text: String,
    pub response_kind: ResponseKind,
    pub deadline: DateTime<Utc>,
    pub issued_at: DateTime<Utc>,
}

impl HumanToolCall {
    pub fn validate(&self) -> Result<(), String> {
        if self.deadline <= self.issued_at {
            return Err("deadline must be after issued_at".into());
        }
        if let ResponseKind::Choice { options } = &self.response_kind {
            if options.is_empty() {
                return Err("choice response kind needs options".into());
            }
        }
        if self.call_id.is_empty() {
            return Err("empty call_id".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum AnswerPayload {
    Text(String),
    Choice(usize),
    Approval(bool),
    /// Acknowledgment without content, for calls that allow it.
    Acknowledged,
}

impl AnswerPayload {
    pub fn matches(&self, kind: &ResponseKind) -> bool {
        match (self, kind) {
            (AnswerPayload::Text(_), ResponseKind::FreeText { .. }) => true,
            (AnswerPayload::Acknowledged, ResponseKind::FreeText { acknowledge_only_allowed }) => *acknowledge_only_allowed,
            (AnswerPayload::Approval(_), ResponseKind::Approval) => true,
            (AnswerPayload::Choice(i), ResponseKind::Choice { options }) => *i < options.len(),
            _ => false,
        }
    }

    pub fn as_text(&self, kind: &ResponseKind) -> String {
        match self {
            AnswerPayload::Text(t) => t.clone(),
            AnswerPayload::Choice(i) => match kind {
                ResponseKind::Choice { options } => options.get(*i).cloned().unwrap_or_else(|| format!("option {i}")),
                _ => format!("option {i}"),
            },
            AnswerPayload::Approval(true) => "approved".into(),
            AnswerPayload::Approval(false) => "rejected".into(),
            AnswerPayload::Acknowledged => "acknowledged".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ResponseOutcome {
    Answered { payload: AnswerPayload },
    Refused { reason_text: String },
    CounterProposal { proposal_text: String },
    TimedOut {},
}

impl ResponseOutcome {
    pub fn name(&self) -> &'static str {
        match self {
            ResponseOutcome::Answered { .. } => "answered",
            ResponseOutcome::Refused { .. } => "refused",
            ResponseOutcome::CounterProposal { .. } => "counter_proposal",
            ResponseOutcome::TimedOut {} => "timed_out",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanToolResponse {
    pub call_id: String,
    pub outcome: ResponseOutcome,
    pub received_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    ToolsList,
    ToolsCall,
    ToolsRespond,
    SessionStart,
    SessionEvents,
    SessionAbort,
}

/// Which side initiates a method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ConsoleToOrchestrator,
    OrchestratorToConsole,
    /// Pushed by the orchestrator as notifications; the console may also
    /// request a resend from a sequence number.
    Both,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::ToolsList,
        Method::ToolsCall,
        Method::ToolsRespond,
        Method::SessionStart,
        Method::SessionEvents,
        Method::SessionAbort,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ToolsList => "tools/list",
            Method::ToolsCall => "tools/call",
            Method::ToolsRespond => "tools/respond",
            Method::SessionStart => "session/start",
            Method::SessionEvents => "session/events",
            Method::SessionAbort => "session/abort",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Method::ToolsCall => Direction::OrchestratorToConsole,
            Method::SessionEvents => Direction::Both,
            _ => Direction::ConsoleToOrchestrator,
        }
    }

    /// Registry lookup; unknown names map to the unknown-method code.
    pub fn route(name: &str) -> Result<Method, ErrorCode> {
        Self::ALL.into_iter().find(|m| m.name() == name).ok_or(ErrorCode::UnknownMethod)
    }
}
