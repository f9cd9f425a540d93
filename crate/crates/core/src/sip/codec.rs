//! Text codec for the SIP subset: start line, one header per line, blank
//! line, opaque body. Lines are CRLF-terminated; folding is not supported.

use std::fmt;

use super::message::{is_token_char, is_value_char, Headers, Method, SipMessage, StartLine};
use super::{SipError, SIP_VERSION};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    MalformedStartLine,
    BadHeaderSyntax,
    UnsupportedMethod(String),
    BodyLengthMismatch { declared: usize, actual: usize },
    MissingHeader(&'static str),
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::MalformedStartLine => f.write_str("malformed start line"),
            ParseErrorKind::BadHeaderSyntax => f.write_str("bad header syntax"),
            ParseErrorKind::UnsupportedMethod(m) => write!(f, "unsupported method `{m}`"),
            ParseErrorKind::BodyLengthMismatch { declared, actual } => {
                write!(f, "body length mismatch: declared {declared}, got {actual}")
            }
            ParseErrorKind::MissingHeader(h) => write!(f, "missing {h} header"),
        }
    }
}

/// Where and why parsing stopped. `line` is 1-based, `offset` is the byte
/// offset of the offending line (or byte) in the input.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line} (offset {offset}): {kind}")]
pub struct ParseError {
    pub line: usize,
    pub offset: usize,
    pub kind: ParseErrorKind,
}

fn find_head_end(raw: &[u8]) -> Option<usize> {
    raw.windows(4).position(|w| w == b"\r\n\r\n")
}

fn parse_start_line(line: &str) -> Result<StartLine, ParseErrorKind> {
    if let Some(rest) = line.strip_prefix(SIP_VERSION) {
        let rest = rest.strip_prefix(' ').ok_or(ParseErrorKind::MalformedStartLine)?;
        let (code, reason) = rest.split_once(' ').unwrap_or((rest, ""));
        if code.len() != 3 || !code.bytes().all(|b| b.is_ascii_digit()) {
            return Err(ParseErrorKind::MalformedStartLine);
        }
        let status: u16 = code.parse().map_err(|_| ParseErrorKind::MalformedStartLine)?;
        if !(100..=699).contains(&status) || !reason.chars().all(is_value_char) {
            return Err(ParseErrorKind::MalformedStartLine);
        }
        return Ok(StartLine::Response {
            status,
            reason: reason.to_owned(),
        });
    }

    let parts: Vec<&str> = line.split(' ').collect();
    let [method, uri, version] = parts[..] else {
        return Err(ParseErrorKind::MalformedStartLine);
    };
    if version != SIP_VERSION || method.is_empty() || !method.chars().all(is_token_char) {
        return Err(ParseErrorKind::MalformedStartLine);
    }
    let method: Method = method
        .parse()
        .map_err(|_| ParseErrorKind::UnsupportedMethod(method.to_owned()))?;
    let uri = uri.parse().map_err(|_| ParseErrorKind::MalformedStartLine)?;
    Ok(StartLine::Request { method, uri })
}

/// Parse one message. Total over arbitrary input: every failure is a
/// [`ParseError`], never a panic.
pub fn parse_message(raw: &[u8]) -> Result<SipMessage, ParseError> {
    let fail = |line, offset, kind| ParseError { line, offset, kind };

    let head_end = find_head_end(raw);
    let head = &raw[..head_end.unwrap_or(raw.len())];

    let mut offset = 0usize;
    let mut lines = Vec::new();
    for (idx, chunk) in head.split(|&b| b == b'\n').enumerate() {
        let line_no = idx + 1;
        let is_last = offset + chunk.len() >= head.len();
        let content = if is_last && head_end.is_some() {
            chunk
        } else {
            match chunk.strip_suffix(b"\r") {
                Some(c) => c,
                None if is_last => chunk,
                None => {
                    let kind = if line_no == 1 {
                        ParseErrorKind::MalformedStartLine
                    } else {
                        ParseErrorKind::BadHeaderSyntax
                    };
                    return Err(fail(line_no, offset, kind));
                }
            }
        };
        if let Some(bad) = content.iter().position(|&b| !b.is_ascii() || b == b'\r' || b == 0) {
            let kind = if line_no == 1 {
                ParseErrorKind::MalformedStartLine
            } else {
                ParseErrorKind::BadHeaderSyntax
            };
            return Err(fail(line_no, offset + bad, kind));
        }
        // Safe: all bytes checked ASCII above.
        let text = std::str::from_utf8(content).unwrap_or_default();
        lines.push((line_no, offset, text));
        offset += chunk.len() + 1;
    }

    let Some(&(_, _, first)) = lines.first() else {
        return Err(fail(1, 0, ParseErrorKind::MalformedStartLine));
    };
    let start = parse_start_line(first).map_err(|k| fail(1, 0, k))?;

    let Some(head_end) = head_end else {
        let (line, off, _) = *lines.last().unwrap_or(&(1, 0, ""));
        return Err(fail(line, off, ParseErrorKind::BadHeaderSyntax));
    };

    let mut headers = Headers::new();
    for &(line_no, off, text) in &lines[1..] {
        let bad = || fail(line_no, off, ParseErrorKind::BadHeaderSyntax);
        let (name, value) = text.split_once(':').ok_or_else(bad)?;
        if name.is_empty() || !name.chars().all(is_token_char) {
            return Err(bad());
        }
        let value = value.trim_matches(|c| c == ' ' || c == '\t');
        if !value.chars().all(is_value_char) {
            return Err(bad());
        }
        headers.push(name, value);
    }

    let body = raw[head_end + 4..].to_vec();
    let msg = SipMessage {
        start,
        headers,
        body,
    };

    let header_line = |name: &str| -> (usize, usize) {
        lines[1..]
            .iter()
            .find(|(_, _, t)| {
                t.split_once(':')
                    .is_some_and(|(n, _)| n.eq_ignore_ascii_case(name))
            })
            .map(|&(l, o, _)| (l, o))
            .unwrap_or((1, 0))
    };

    if let Some(len) = msg.headers.get("Content-Length") {
        let (l, o) = header_line("Content-Length");
        let declared: usize = len
            .parse()
            .map_err(|_| fail(l, o, ParseErrorKind::BadHeaderSyntax))?;
        if declared != msg.body.len() {
            return Err(fail(
                l,
                o,
                ParseErrorKind::BodyLengthMismatch {
                    declared,
                    actual: msg.body.len(),
                },
            ));
        }
    }
    for required in super::REQUIRED_HEADERS {
        if msg.headers.get(required).is_none() {
            let l = lines.len() + 1;
            return Err(fail(l, head_end + 2, ParseErrorKind::MissingHeader(required)));
        }
    }
    if let Err(_reason) = msg.check(true) {
        let (l, o) = header_line("CSeq");
        return Err(fail(l, o, ParseErrorKind::BadHeaderSyntax));
    }
    Ok(msg)
}

/// Canonical wire form. Content-Length is rewritten from the body, or
/// appended after the last header when absent.
pub fn serialize_message(msg: &SipMessage) -> Result<Vec<u8>, SipError> {
    msg.check(false).map_err(SipError::InvalidMessage)?;

    let mut out = String::new();
    match &msg.start {
        StartLine::Request { method, uri } => {
            out.push_str(&format!("{method} {uri} {SIP_VERSION}\r\n"));
        }
        StartLine::Response { status, reason } => {
            out.push_str(&format!("{SIP_VERSION} {status} {reason}\r\n"));
        }
    }
    let body_len = msg.body.len().to_string();
    let mut wrote_length = false;
    for (name, value) in msg.headers.iter() {
        let value = if name.eq_ignore_ascii_case("Content-Length") {
            wrote_length = true;
            body_len.as_str()
        } else {
            value
        };
        out.push_str(name);
        out.push_str(": ");
        out.push_str(value);
        out.push_str("\r\n");
    }
    if !wrote_length {
        out.push_str(&format!("Content-Length: {body_len}\r\n"));
    }
    out.push_str("\r\n");

    let mut bytes = out.into_bytes();
    bytes.extend_from_slice(&msg.body);
    Ok(bytes)
}
