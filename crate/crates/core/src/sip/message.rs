use std::fmt;
use std::str::FromStr;

use hmac::{Hmac, Mac};
use sha2::Sha256;

use super::uri::{is_param_char, SipUri};
use super::SipError;

pub const SIP_VERSION: &str = "SIP/2.0";
/// Transport token used in Via headers on the simulated network.
pub const VIA_TRANSPORT: &str = "SIM";
pub const BRANCH_MAGIC: &str = "z9hG4bK";

const TO_TAG_KEY: &[u8] = b"mls-to-tag";

/// Mandatory headers of every valid message.
pub const REQUIRED_HEADERS: [&str; 5] = ["Via", "From", "To", "Call-ID", "CSeq"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Register,
    Invite,
    Ack,
    Bye,
    Message,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Register,
        Method::Invite,
        Method::Ack,
        Method::Bye,
        Method::Message,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Register => "REGISTER",
            Method::Invite => "INVITE",
            Method::Ack => "ACK",
            Method::Bye => "BYE",
            Method::Message => "MESSAGE",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StartLine {
    Request { method: Method, uri: SipUri },
    Response { status: u16, reason: String },
}

/// Ordered header multimap. Names keep their original spelling but are
/// matched case-insensitively.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Headers(Vec<(String, String)>);

impl Headers {
    pub fn new() -> Self {
        Headers(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(n, v)| (n.as_str(), v.as_str()))
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.0
            .iter()
            .filter(move |(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn count(&self, name: &str) -> usize {
        self.0.iter().filter(|(n, _)| n.eq_ignore_ascii_case(name)).count()
    }

    pub fn push(&mut self, name: &str, value: impl Into<String>) {
        self.0.push((name.to_owned(), value.into()));
    }

    /// Replace the first header with this name, or append if absent.
    pub fn set(&mut self, name: &str, value: impl Into<String>) {
        let value = value.into();
        match self.0.iter_mut().find(|(n, _)| n.eq_ignore_ascii_case(name)) {
            Some(slot) => slot.1 = value,
            None => self.0.push((name.to_owned(), value)),
        }
    }

    /// Insert before the first header with this name (or append).
    pub fn prepend(&mut self, name: &str, value: impl Into<String>) {
        let at = self
            .0
            .iter()
            .position(|(n, _)| n.eq_ignore_ascii_case(name))
            .unwrap_or(self.0.len());
        self.0.insert(at, (name.to_owned(), value.into()));
    }

    pub fn remove_first(&mut self, name: &str) -> Option<String> {
        let at = self.0.iter().position(|(n, _)| n.eq_ignore_ascii_case(name))?;
        Some(self.0.remove(at).1)
    }

    pub fn remove_all(&mut self, name: &str) {
        self.0.retain(|(n, _)| !n.eq_ignore_ascii_case(name));
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SipMessage {
    pub start: StartLine,
    pub headers: Headers,
    pub body: Vec<u8>,
}

pub(crate) fn is_token_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || "-.!%*_+`'~".contains(c)
}

pub(crate) fn is_value_char(c: char) -> bool {
    c == ' ' || c == '\t' || c.is_ascii_graphic()
}

impl SipMessage {
    pub fn request(method: Method, uri: SipUri) -> Self {
        SipMessage {
            start: StartLine::Request { method, uri },
            headers: Headers::new(),
            body: Vec::new(),
        }
    }

    pub fn response(status: u16, reason: &str) -> Self {
        SipMessage {
            start: StartLine::Response {
                status,
                reason: reason.to_owned(),
            },
            headers: Headers::new(),
            body: Vec::new(),
        }
    }

    pub fn header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.push(name, value);
        self
    }

    pub fn is_request(&self) -> bool {
        matches!(self.start, StartLine::Request { .. })
    }

    pub fn method(&self) -> Option<Method> {
        match self.start {
            StartLine::Request { method, .. } => Some(method),
            StartLine::Response { .. } => None,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self.start {
            StartLine::Response { status, .. } => Some(status),
            StartLine::Request { .. } => None,
        }
    }

    pub fn call_id(&self) -> Option<&str> {
        self.headers.get("Call-ID")
    }

    pub fn cseq(&self) -> Option<CSeq> {
        self.headers.get("CSeq")?.parse().ok()
    }

    pub fn top_via(&self) -> Option<Via> {
        self.headers.get("Via")?.parse().ok()
    }

    pub fn from_addr(&self) -> Option<NameAddr> {
        self.headers.get("From")?.parse().ok()
    }

    pub fn to_addr(&self) -> Option<NameAddr> {
        self.headers.get("To")?.parse().ok()
    }

    /// Checks every structural invariant. `check_length` is off when the
    /// caller is about to recompute Content-Length anyway.
    pub(crate) fn check(&self, check_length: bool) -> Result<(), String> {
        match &self.start {
            StartLine::Response { status, reason } => {
                if !(100..=699).contains(status) {
                    return Err(format!("status {status} out of range"));
                }
                if !reason.chars().all(is_value_char) {
                    return Err("reason phrase has illegal characters".into());
                }
            }
            StartLine::Request { .. } => {}
        }
        for (name, value) in self.headers.iter() {
            if name.is_empty() || !name.chars().all(is_token_char) {
                return Err(format!("bad header name `{name}`"));
            }
            if !value.chars().all(is_value_char) || value.trim() != value {
                return Err(format!("bad value for header `{name}`"));
            }
        }
        for required in REQUIRED_HEADERS {
            if self.headers.get(required).is_none() {
                return Err(format!("missing {required} header"));
            }
        }
        for single in ["From", "To", "Call-ID", "CSeq", "Content-Length"] {
            if self.headers.count(single) > 1 {
                return Err(format!("duplicate {single} header"));
            }
        }
        let cseq: CSeq = self
            .headers
            .get("CSeq")
            .unwrap_or_default()
            .parse()
            .map_err(|_| "malformed CSeq".to_string())?;
        if let Some(method) = self.method() {
            if cseq.method != method {
                return Err("CSeq method does not match request method".into());
            }
        }
        if check_length {
            if let Some(len) = self.headers.get("Content-Length") {
                let len: usize = len.parse().map_err(|_| "malformed Content-Length".to_string())?;
                if len != self.body.len() {
                    return Err("Content-Length does not match body".into());
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SipError> {
        self.check(true).map_err(SipError::InvalidMessage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CSeq {
    pub seq: u32,
    pub method: Method,
}

impl fmt::Display for CSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.seq, self.method)
    }
}

impl FromStr for CSeq {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (num, method) = s.split_once(' ').ok_or(())?;
        if num.is_empty() || !num.bytes().all(|b| b.is_ascii_digit()) {
            return Err(());
        }
        Ok(CSeq {
            seq: num.parse().map_err(|_| ())?,
            method: method.parse()?,
        })
    }
}

type Params = Vec<(String, Option<String>)>;

fn parse_params(raw: &str) -> Result<Params, ()> {
    let mut out = Vec::new();
    if raw.is_empty() {
        return Ok(out);
    }
    for p in raw.split(';') {
        let p = p.trim();
        let (n, v) = match p.split_once('=') {
            Some((n, v)) => (n.trim(), Some(v.trim())),
            None => (p, None),
        };
        if n.is_empty() || !n.chars().all(is_param_char) {
            return Err(());
        }
        if let Some(v) = v {
            if v.is_empty() || !v.chars().all(is_param_char) {
                return Err(());
            }
        }
        out.push((n.to_owned(), v.map(str::to_owned)));
    }
    Ok(out)
}

fn write_params(f: &mut fmt::Formatter<'_>, params: &Params) -> fmt::Result {
    for (n, v) in params {
        match v {
            Some(v) => write!(f, ";{n}={v}")?,
            None => write!(f, ";{n}")?,
        }
    }
    Ok(())
}

/// `From`/`To`/`Contact` value: `[display] <uri>;params` or bare `uri;params`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameAddr {
    pub display: Option<String>,
    pub uri: SipUri,
    pub params: Params,
}

impl NameAddr {
    pub fn new(uri: SipUri) -> Self {
        NameAddr {
            display: None,
            uri,
            params: Vec::new(),
        }
    }

    pub fn tag(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case("tag"))
            .and_then(|(_, v)| v.as_deref())
    }

    pub fn with_tag(mut self, tag: &str) -> Self {
        self.params.retain(|(n, _)| !n.eq_ignore_ascii_case("tag"));
        self.params.push(("tag".into(), Some(tag.into())));
        self
    }
}

impl fmt::Display for NameAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(d) = &self.display {
            write!(f, "{d} ")?;
        }
        write!(f, "<{}>", self.uri)?;
        write_params(f, &self.params)
    }
}

impl FromStr for NameAddr {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(open) = s.find('<') {
            let close = s[open..].find('>').ok_or(())? + open;
            let display = s[..open].trim();
            let uri = s[open + 1..close].parse().map_err(|_| ())?;
            let rest = s[close + 1..].trim();
            let params = match rest.strip_prefix(';') {
                Some(p) => parse_params(p)?,
                None if rest.is_empty() => Vec::new(),
                None => return Err(()),
            };
            Ok(NameAddr {
                display: (!display.is_empty()).then(|| display.to_owned()),
                uri,
                params,
            })
        } else {
            let (uri, params) = match s.split_once(';') {
                Some((u, p)) => (u, parse_params(p)?),
                None => (s, Vec::new()),
            };
            Ok(NameAddr {
                display: None,
                uri: uri.parse().map_err(|_| ())?,
                params,
            })
        }
    }
}

/// `SIP/2.0/<transport> host[:port];branch=...`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Via {
    pub transport: String,
    pub host: String,
    pub port: Option<u16>,
    pub params: Params,
}

impl Via {
    pub fn new(host: &str, branch: &str) -> Self {
        Via {
            transport: VIA_TRANSPORT.to_owned(),
            host: host.to_owned(),
            port: None,
            params: vec![("branch".into(), Some(branch.into()))],
        }
    }

    pub fn branch(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case("branch"))
            .and_then(|(_, v)| v.as_deref())
    }
}

impl fmt::Display for Via {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{SIP_VERSION}/{} {}", self.transport, self.host)?;
        if let Some(p) = self.port {
            write!(f, ":{p}")?;
        }
        write_params(f, &self.params)
    }
}

impl FromStr for Via {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rest = s.strip_prefix(SIP_VERSION).and_then(|r| r.strip_prefix('/')).ok_or(())?;
        let (transport, rest) = rest.split_once(' ').ok_or(())?;
        if transport.is_empty() || !transport.chars().all(is_token_char) {
            return Err(());
        }
        let (hostport, params) = match rest.trim().split_once(';') {
            Some((h, p)) => (h, parse_params(p)?),
            None => (rest.trim(), Vec::new()),
        };
        let (host, port) = match hostport.split_once(':') {
            Some((h, p)) => (h, Some(p.parse::<u16>().map_err(|_| ())?)),
            None => (hostport, None),
        };
        if host.is_empty() || !host.chars().all(super::uri::is_host_char) {
            return Err(());
        }
        Ok(Via {
            transport: transport.to_owned(),
            host: host.to_owned(),
            port,
            params,
        })
    }
}

fn keyed_hash(key: &[u8], data: &[u8]) -> [u8; 32] {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

/// Deterministic To-tag: first 8 hex chars of HMAC-SHA-256("mls-to-tag", Call-ID).
pub fn to_tag(call_id: &str) -> String {
    hex::encode(&keyed_hash(TO_TAG_KEY, call_id.as_bytes())[..4])
}

/// Deterministic Via branch for a hop: magic cookie plus 16 hex chars.
pub fn branch_for(host: &str, call_id: &str, cseq: &str, upstream: &str) -> String {
    let mut data = Vec::new();
    for part in [host, call_id, cseq, upstream] {
        data.extend_from_slice(part.as_bytes());
        data.push(0);
    }
    format!("{BRANCH_MAGIC}{}", hex::encode(&keyed_hash(b"mls-branch", &data)[..8]))
}

/// Build a response that mirrors the request's Via, From, To, Call-ID and CSeq.
/// Final responses (status >= 200) gain a To-tag derived from the Call-ID.
pub fn make_response(req: &SipMessage, status: u16, reason: &str) -> Result<SipMessage, SipError> {
    if !req.is_request() {
        return Err(SipError::InvalidMessage(
            "cannot build a response to a response".into(),
        ));
    }
    if !(100..=699).contains(&status) {
        return Err(SipError::InvalidMessage(format!("status {status} out of range")));
    }
    let mut resp = SipMessage::response(status, reason);
    for via in req.headers.get_all("Via") {
        resp.headers.push("Via", via);
    }
    for name in ["From", "To", "Call-ID", "CSeq"] {
        let Some(value) = req.headers.get(name) else {
            continue;
        };
        let value = if name == "To" && status >= 200 {
            match value.parse::<NameAddr>() {
                Ok(to) if to.tag().is_none() => {
                    let call_id = req.call_id().unwrap_or_default();
                    to.with_tag(&to_tag(call_id)).to_string()
                }
                _ => value.to_owned(),
            }
        } else {
            value.to_owned()
        };
        resp.headers.push(name, value);
    }
    resp.headers.push("Content-Length", "0");
    Ok(resp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn register() -> SipMessage {
        SipMessage::request(Method::Register, "sip:ims.kau.example".parse().unwrap())
            .header("Via", "SIP/2.0/SIM ue1.kau.example;branch=z9hG4bK1")
            .header("From", "<sip:s1001@ims.kau.example>;tag=ue")
            .header("To", "<sip:s1001@ims.kau.example>")
            .header("Call-ID", "a1")
            .header("CSeq", "1 REGISTER")
            .header("Content-Length", "0")
    }

    #[test]
    fn unauthorized_response_mirrors_dialog_headers() {
        let resp = make_response(&register(), 401, "Unauthorized").unwrap();
        assert_eq!(resp.call_id(), Some("a1"));
        assert_eq!(resp.headers.get("CSeq"), Some("1 REGISTER"));
        assert_eq!(resp.headers.get("Via"), register().headers.get("Via"));
        resp.validate().unwrap();
    }

    #[test]
    fn provisional_response_has_no_to_tag() {
        let mut invite = register();
        invite.start = StartLine::Request {
            method: Method::Invite,
            uri: "sip:mls@ims.kau.example".parse().unwrap(),
        };
        invite.headers.set("CSeq", "1 INVITE");
        let resp = make_response(&invite, 100, "Trying").unwrap();
        assert_eq!(resp.to_addr().unwrap().tag(), None);
    }

    #[test]
    fn final_response_tag_is_deterministic() {
        let a = make_response(&register(), 200, "OK").unwrap();
        let b = make_response(&register(), 200, "OK").unwrap();
        // Independently computed: HMAC-SHA-256(b"mls-to-tag", b"a1")[..4] in hex.
        assert_eq!(a.to_addr().unwrap().tag(), Some("f8572482"));
        assert_eq!(a, b);
        assert_eq!(to_tag("call-42@ue1.kau.example"), "2b325464");
    }

    #[test]
    fn existing_to_tag_is_kept() {
        let mut req = register();
        req.headers.set("To", "<sip:s1001@ims.kau.example>;tag=abc");
        let resp = make_response(&req, 200, "OK").unwrap();
        assert_eq!(resp.to_addr().unwrap().tag(), Some("abc"));
    }

    #[test]
    fn response_to_response_is_rejected() {
        let resp = make_response(&register(), 200, "OK").unwrap();
        assert!(matches!(
            make_response(&resp, 200, "OK"),
            Err(SipError::InvalidMessage(_))
        ));
    }

    #[test]
    fn validation_catches_invariant_breaks() {
        let mut m = register();
        m.headers.set("CSeq", "1 INVITE");
        assert!(m.validate().is_err());

        let mut m = register();
        m.headers.remove_first("Call-ID");
        assert!(m.validate().is_err());

        let mut m = register();
        m.body = b"x".to_vec();
        assert!(m.validate().is_err());
    }

    #[test]
    fn header_names_match_case_insensitively() {
        let m = register();
        assert_eq!(m.headers.get("call-id"), Some("a1"));
        assert_eq!(m.headers.get("CSEQ"), Some("1 REGISTER"));
    }

    #[test]
    fn name_addr_and_via_helpers() {
        let na: NameAddr = "\"Student\" <sip:s1@x.example>;tag=9".parse().unwrap();
        assert_eq!(na.display.as_deref(), Some("\"Student\""));
        assert_eq!(na.tag(), Some("9"));
        assert_eq!(na.to_string(), "\"Student\" <sip:s1@x.example>;tag=9");

        let bare: NameAddr = "sip:s1@x.example;tag=2".parse().unwrap();
        assert_eq!(bare.uri.params, vec![]);
        assert_eq!(bare.tag(), Some("2"));

        let via: Via = "SIP/2.0/SIM pcscf.ims.kau.example;branch=z9hG4bKab".parse().unwrap();
        assert_eq!(via.host, "pcscf.ims.kau.example");
        assert_eq!(via.branch(), Some("z9hG4bKab"));
        assert_eq!(via.to_string(), "SIP/2.0/SIM pcscf.ims.kau.example;branch=z9hG4bKab");
    }
}
