//! SIP message subset: REGISTER, INVITE, ACK, BYE and MESSAGE over a
//! CRLF-framed text encoding. One header per line; no folding, no
//! comma-joined multi-value headers, ASCII only.

mod codec;
pub mod generate;
mod message;
mod uri;

pub use codec::{parse_message, serialize_message, ParseError, ParseErrorKind};
pub use message::{
    branch_for, make_response, to_tag, CSeq, Headers, Method, NameAddr, SipMessage, StartLine,
    Via, BRANCH_MAGIC, REQUIRED_HEADERS, SIP_VERSION, VIA_TRANSPORT,
};
pub use uri::{SipUri, UriError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SipError {
    #[error("invalid message: {0}")]
    InvalidMessage(String),
}
