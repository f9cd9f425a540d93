//! Control layer: the S-CSCF registrar with AKA challenges, a minimal
//! INVITE/ACK/BYE dialog table, and the Via-based routing performed by the
//! P-CSCF and S-CSCF hops.
//!
//! Header grammars used on the wire:
//!
//! ```text
//! WWW-Authenticate: AKA nonce="<base64(RAND || AUTN)>"
//! Authorization: AKA impi="<impi>", nonce="<nonce>", response="<hex RES>"
//! Authorization: AKA impi="<impi>", nonce="<nonce>", auts="<hex 48-bit SQN>"
//! ```
//!
//! The `auts` form reports a sequence-number resynchronisation: the UE sends
//! the last SQN it accepted and the HSS continues from there. An empty
//! `response` is how a UE that rejected the network's AUTN answers.

use std::collections::{BTreeMap, HashMap, VecDeque};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;

use crate::aka::{generate_vector, verify_response, AuthVector, Autn, Rand, Res, Sqn};
use crate::hss::{HssError, HssStore};
use crate::netsim::SimTime;
use crate::rng::SplitMix64;
use crate::sip::{branch_for, make_response, Method, SipMessage, SipUri, Via};

pub const CHALLENGE_TTL_MS: SimTime = 60_000;
pub const MAX_EXPIRES_S: u32 = 3600;
/// Cached final responses outlive the longest client retransmission window.
pub const REPLAY_CACHE_TTL_MS: SimTime = 64_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Challenge {
    pub nonce: String,
    pub impi: String,
    pub vector: AuthVector,
    pub issued_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Proceeding,
    Confirmed,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecord {
    pub call_id: String,
    pub from_impu: SipUri,
    pub to_target: SipUri,
    pub state: SessionState,
}

pub fn encode_nonce(rand: &Rand, autn: &Autn) -> String {
    let mut raw = [0u8; 32];
    raw[..16].copy_from_slice(rand);
    raw[16..].copy_from_slice(autn);
    B64.encode(raw)
}

pub fn decode_nonce(nonce: &str) -> Option<(Rand, Autn)> {
    let raw = B64.decode(nonce).ok()?;
    if raw.len() != 32 {
        return None;
    }
    Some((raw[..16].try_into().ok()?, raw[16..].try_into().ok()?))
}

pub fn www_authenticate(nonce: &str) -> String {
    format!("AKA nonce=\"{nonce}\"")
}

fn auth_params(value: &str) -> Option<Vec<(&str, &str)>> {
    let rest = value.strip_prefix("AKA ")?;
    rest.split(',')
        .map(|p| {
            let (name, quoted) = p.trim().split_once('=')?;
            let v = quoted.strip_prefix('"')?.strip_suffix('"')?;
            (!v.contains('"')).then_some((name.trim(), v))
        })
        .collect()
}

pub fn parse_www_authenticate(value: &str) -> Option<String> {
    auth_params(value)?
        .into_iter()
        .find(|(n, _)| *n == "nonce")
        .map(|(_, v)| v.to_owned())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Credentials {
    Response(String),
    Resync(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Authorization {
    pub impi: String,
    pub nonce: String,
    pub credentials: Credentials,
}

impl Authorization {
    pub fn parse(value: &str) -> Option<Authorization> {
        let params = auth_params(value)?;
        let get = |name: &str| params.iter().find(|(n, _)| *n == name).map(|(_, v)| v.to_string());
        let credentials = match (get("response"), get("auts")) {
            (Some(r), None) => Credentials::Response(r),
            (None, Some(a)) => Credentials::Resync(a),
            _ => return None,
        };
        Some(Authorization {
            impi: get("impi")?,
            nonce: get("nonce")?,
            credentials,
        })
    }

    pub fn render(&self) -> String {
        let cred = match &self.credentials {
            Credentials::Response(r) => format!("response=\"{r}\""),
            Credentials::Resync(a) => format!("auts=\"{a}\""),
        };
        format!("AKA impi=\"{}\", nonce=\"{}\", {cred}", self.impi, self.nonce)
    }
}

fn with_header(mut resp: SipMessage, name: &str, value: impl Into<String>) -> SipMessage {
    let len = resp.headers.remove_first("Content-Length");
    resp.headers.push(name, value);
    if let Some(len) = len {
        resp.headers.push("Content-Length", len);
    }
    resp
}

fn reply(req: &SipMessage, status: u16, reason: &str) -> SipMessage {
    // Only called on requests that passed through parse/route, so Via etc. exist.
    make_response(req, status, reason).expect("request")
}

type ReplayKey = (String, u32, Method);

#[derive(Debug)]
pub struct ImsCore {
    pub hss: HssStore,
    challenges: BTreeMap<String, Challenge>,
    sessions: BTreeMap<String, SessionRecord>,
    replay: HashMap<ReplayKey, (SipMessage, SimTime)>,
    replay_order: VecDeque<(SimTime, ReplayKey)>,
    rng: SplitMix64,
}

impl ImsCore {
    pub fn new(hss: HssStore, seed: u64) -> Self {
        ImsCore {
            hss,
            challenges: BTreeMap::new(),
            sessions: BTreeMap::new(),
            replay: HashMap::new(),
            replay_order: VecDeque::new(),
            rng: SplitMix64::new(seed),
        }
    }

    pub fn challenges(&self) -> impl Iterator<Item = &Challenge> {
        self.challenges.values()
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SessionRecord> {
        self.sessions.values()
    }

    pub fn session(&self, call_id: &str) -> Option<&SessionRecord> {
        self.sessions.get(call_id)
    }

    /// Entry point of the S-CSCF for a request that has already been routed.
    /// Retransmitted requests (same Call-ID, CSeq and method) get the cached
    /// final response instead of being processed twice.
    pub fn dispatch(&mut self, msg: &SipMessage, now: SimTime) -> Vec<SipMessage> {
        let Some(method) = msg.method() else {
            return Vec::new();
        };
        if method == Method::Ack {
            return self.on_ack(msg, now);
        }
        let key = (
            msg.call_id().unwrap_or_default().to_owned(),
            msg.cseq().map(|c| c.seq).unwrap_or_default(),
            method,
        );
        if let Some((cached, _)) = self.replay.get(&key) {
            return vec![cached.clone()];
        }
        let out = match method {
            Method::Register => self.on_register(msg, now),
            Method::Invite => self.on_invite(msg, now),
            Method::Bye => self.on_bye(msg, now),
            Method::Message | Method::Ack => {
                vec![with_header(
                    reply(msg, 405, "Method Not Allowed"),
                    "Allow",
                    "REGISTER, INVITE, ACK, BYE",
                )]
            }
        };
        if let Some(last) = out.last() {
            self.replay_order.push_back((now, key.clone()));
            self.replay.insert(key, (last.clone(), now));
        }
        out
    }

    fn issue_challenge(&mut self, req: &SipMessage, impi: &str, now: SimTime) -> SipMessage {
        let sqn = match self.hss.advance_sqn(impi) {
            Ok(sqn) => sqn,
            Err(_) => return reply(req, 403, "Forbidden"),
        };
        let k = self.hss.lookup_by_impi(impi).expect("advance_sqn found it").k.clone();
        let mut nonce;
        let mut rand = [0u8; 16];
        loop {
            self.rng.fill_bytes(&mut rand);
            let vector = generate_vector(&k, sqn, rand);
            nonce = encode_nonce(&rand, &vector.autn);
            if !self.challenges.contains_key(&nonce) {
                self.challenges.insert(
                    nonce.clone(),
                    Challenge {
                        nonce: nonce.clone(),
                        impi: impi.to_owned(),
                        vector,
                        issued_at: now,
                    },
                );
                break;
            }
        }
        with_header(reply(req, 401, "Unauthorized"), "WWW-Authenticate", www_authenticate(&nonce))
    }

    /// Take a pending, unexpired challenge issued to `impi`. Any mismatch
    /// discards it.
    fn take_challenge(&mut self, nonce: &str, impi: &str, now: SimTime) -> Option<Challenge> {
        let ch = self.challenges.remove(nonce)?;
        (ch.impi == impi && now.saturating_sub(ch.issued_at) <= CHALLENGE_TTL_MS).then_some(ch)
    }

    pub fn on_register(&mut self, msg: &SipMessage, now: SimTime) -> Vec<SipMessage> {
        let bad = |reason| vec![reply(msg, 400, reason)];
        let forbidden = || vec![reply(msg, 403, "Forbidden")];

        let Some(to) = msg.to_addr() else {
            return bad("Bad To");
        };
        let impu = to.uri;
        let auth = match msg.headers.get("Authorization") {
            None => None,
            Some(v) => match Authorization::parse(v) {
                Some(a) => Some(a),
                None => return bad("Bad Authorization"),
            },
        };
        let requested = match msg.headers.get("Expires") {
            None => MAX_EXPIRES_S,
            Some(v) => match v.parse::<u32>() {
                Ok(e) => e,
                Err(_) => return bad("Bad Expires"),
            },
        };
        let granted = requested.min(MAX_EXPIRES_S);

        let impi = match &auth {
            Some(a) => a.impi.clone(),
            None => match self.hss.lookup_by_impu(&impu) {
                Some(sub) => sub.impi.clone(),
                None => return forbidden(),
            },
        };
        let Some(sub) = self.hss.lookup_by_impi(&impi) else {
            return forbidden();
        };
        if !sub.impus.iter().any(|u| u.aor() == impu.aor()) {
            return forbidden();
        }

        let Some(auth) = auth else {
            return vec![self.issue_challenge(msg, &impi, now)];
        };
        let Some(challenge) = self.take_challenge(&auth.nonce, &impi, now) else {
            return forbidden();
        };

        let res = match &auth.credentials {
            Credentials::Resync(auts) => {
                let ue_sqn = hex::decode(auts)
                    .ok()
                    .and_then(|b| <[u8; 6]>::try_from(b).ok())
                    .map(Sqn::from_bytes);
                let Some(ue_sqn) = ue_sqn else {
                    return bad("Bad auts");
                };
                if self.hss.resync_sqn(&impi, ue_sqn).is_err() {
                    return forbidden();
                }
                return vec![self.issue_challenge(msg, &impi, now)];
            }
            Credentials::Response(hex_res) => hex::decode(hex_res)
                .ok()
                .and_then(|b| Res::try_from(b).ok()),
        };
        let Some(res) = res else {
            return forbidden();
        };
        if !verify_response(&challenge.vector.xres, &res) {
            return forbidden();
        }

        let call_id = msg.call_id().unwrap_or_default();
        let cseq = msg.cseq().map(|c| c.seq).unwrap_or_default();
        let contact = msg
            .headers
            .get("Contact")
            .and_then(|c| c.parse::<crate::sip::NameAddr>().ok())
            .map(|c| c.uri);

        if granted == 0 {
            let targets: Vec<SipUri> = match contact {
                Some(c) => vec![c],
                None => self.hss.lookup_bindings(&impu).iter().map(|b| b.contact.clone()).collect(),
            };
            for c in &targets {
                if let Err(HssError::StaleCseq { .. }) = self.hss.unbind(&impu, c, call_id, cseq) {
                    return bad("Stale CSeq");
                }
            }
            return vec![with_header(reply(msg, 200, "OK"), "Expires", "0")];
        }

        let Some(contact) = contact else {
            return bad("Missing Contact");
        };
        let expires_at = now + u64::from(granted) * 1000;
        match self.hss.bind(&impu, &contact, expires_at, call_id, cseq, now) {
            Ok(()) => {}
            Err(HssError::StaleCseq { .. }) => return bad("Stale CSeq"),
            Err(_) => return forbidden(),
        }
        let resp = with_header(
            reply(msg, 200, "OK"),
            "Contact",
            format!("<{contact}>;expires={granted}"),
        );
        vec![with_header(resp, "Expires", granted.to_string())]
    }

    pub fn on_invite(&mut self, msg: &SipMessage, now: SimTime) -> Vec<SipMessage> {
        let (Some(from), Some(call_id)) = (msg.from_addr(), msg.call_id()) else {
            return vec![reply(msg, 400, "Bad Request")];
        };
        if !self.hss.is_registered(&from.uri, now) {
            return vec![reply(msg, 403, "Forbidden")];
        }
        let target = match &msg.start {
            crate::sip::StartLine::Request { uri, .. } => uri.clone(),
            _ => unreachable!("dispatch only passes requests"),
        };
        match self.sessions.get(call_id) {
            Some(s) if s.state != SessionState::Terminated => {}
            Some(_) => return vec![reply(msg, 481, "Call/Transaction Does Not Exist")],
            None => {
                self.sessions.insert(
                    call_id.to_owned(),
                    SessionRecord {
                        call_id: call_id.to_owned(),
                        from_impu: from.uri,
                        to_target: target,
                        state: SessionState::Proceeding,
                    },
                );
            }
        }
        vec![reply(msg, 200, "OK")]
    }

    pub fn on_ack(&mut self, msg: &SipMessage, _now: SimTime) -> Vec<SipMessage> {
        let session = msg.call_id().and_then(|c| self.sessions.get_mut(c));
        match session {
            Some(s) if s.state != SessionState::Terminated => {
                s.state = SessionState::Confirmed;
                Vec::new()
            }
            _ => vec![reply(msg, 481, "Call/Transaction Does Not Exist")],
        }
    }

    pub fn on_bye(&mut self, msg: &SipMessage, _now: SimTime) -> Vec<SipMessage> {
        let session = msg.call_id().and_then(|c| self.sessions.get_mut(c));
        match session {
            Some(s) if s.state != SessionState::Terminated => {
                s.state = SessionState::Terminated;
                vec![reply(msg, 200, "OK")]
            }
            _ => vec![reply(msg, 481, "Call/Transaction Does Not Exist")],
        }
    }

    /// Expire old challenges (older than 60 s), stale bindings and cached
    /// responses.
    pub fn tick(&mut self, now: SimTime) {
        self.challenges
            .retain(|_, c| now.saturating_sub(c.issued_at) <= CHALLENGE_TTL_MS);
        self.hss.purge_expired(now);
        while let Some((at, _)) = self.replay_order.front() {
            if now.saturating_sub(*at) <= REPLAY_CACHE_TTL_MS {
                break;
            }
            let (_, key) = self.replay_order.pop_front().expect("non-empty");
            self.replay.remove(&key);
        }
    }
}

/// Proxy step for a request: push this hop's Via on top. A request without
/// any Via cannot be answered along its path and is refused with 400.
#[allow(clippy::result_large_err)]
pub fn route_request(own_host: &str, msg: &SipMessage) -> Result<SipMessage, SipMessage> {
    let Some(top) = msg.headers.get("Via") else {
        let mut resp = SipMessage::response(400, "Missing Via");
        for name in ["From", "To", "Call-ID", "CSeq"] {
            if let Some(v) = msg.headers.get(name) {
                resp.headers.push(name, v);
            }
        }
        resp.headers.push("Content-Length", "0");
        return Err(resp);
    };
    let upstream = top
        .parse::<Via>()
        .ok()
        .and_then(|v| v.branch().map(str::to_owned))
        .unwrap_or_default();
    let branch = branch_for(
        own_host,
        msg.call_id().unwrap_or_default(),
        msg.headers.get("CSeq").unwrap_or_default(),
        &upstream,
    );
    let mut out = msg.clone();
    out.headers.prepend("Via", Via::new(own_host, &branch).to_string());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RouteError {
    #[error("top Via does not belong to {0}")]
    NotOurs(String),
    #[error("no Via left to route on")]
    Exhausted,
}

/// Proxy step for a response: pop our own Via, then the next hop is the
/// host in the Via now on top.
pub fn route_response(own_host: &str, msg: &SipMessage) -> Result<(SipMessage, String), RouteError> {
    let mut out = msg.clone();
    let top: Option<Via> = out.top_via();
    match top {
        Some(v) if v.host == own_host => {
            out.headers.remove_first("Via");
        }
        _ => return Err(RouteError::NotOurs(own_host.to_owned())),
    }
    let next = out.top_via().ok_or(RouteError::Exhausted)?;
    Ok((out, next.host))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aka::{ue_respond, SecretKey};
    use crate::hss::{Role, Subscriber};

    const K: [u8; 16] = [0x11; 16];

    fn core() -> ImsCore {
        let mut hss = HssStore::new();
        hss.provision(Subscriber {
            impi: "s1001@ims.kau.example".into(),
            impus: vec!["sip:s1001@ims.kau.example".parse().unwrap()],
            k: SecretKey::new(K),
            roles: [Role::Student].into(),
            student_id: "1001".into(),
            sqn: Sqn::ZERO,
        })
        .unwrap();
        ImsCore::new(hss, 42)
    }

    fn register(user: &str, cseq: u32) -> SipMessage {
        SipMessage::request(Method::Register, "sip:ims.kau.example".parse().unwrap())
            .header("Via", "SIP/2.0/SIM ue1.kau.example;branch=z9hG4bKue")
            .header("From", format!("<sip:{user}@ims.kau.example>;tag=u1"))
            .header("To", format!("<sip:{user}@ims.kau.example>"))
            .header("Call-ID", "reg-1")
            .header("CSeq", format!("{cseq} REGISTER"))
            .header("Contact", format!("<sip:{user}@ue1.kau.example>"))
            .header("Content-Length", "0")
    }

    fn answer(core_resp: &SipMessage, req: SipMessage, k: [u8; 16]) -> SipMessage {
        let nonce = parse_www_authenticate(core_resp.headers.get("WWW-Authenticate").unwrap()).unwrap();
        let (rand, autn) = decode_nonce(&nonce).unwrap();
        let res = ue_respond(&SecretKey::new(k), &rand, &autn, Sqn::ZERO)
            .map(|r| hex::encode(r.res))
            .unwrap_or_default();
        let auth = Authorization {
            impi: "s1001@ims.kau.example".into(),
            nonce,
            credentials: Credentials::Response(res),
        };
        let mut req = req;
        req.headers.set("Authorization", auth.render());
        req
    }

    fn statuses(out: &[SipMessage]) -> Vec<u16> {
        out.iter().filter_map(SipMessage::status).collect()
    }

    fn registered_core() -> ImsCore {
        let mut core = core();
        let r1 = core.dispatch(&register("s1001", 1), 0);
        let r2 = core.dispatch(&answer(&r1[0], register("s1001", 2), K), 10);
        assert_eq!(statuses(&r2), vec![200]);
        core
    }

    #[test]
    fn unknown_identity_is_forbidden() {
        let mut core = core();
        assert_eq!(statuses(&core.on_register(&register("nobody", 1), 0)), vec![403]);
    }

    #[test]
    fn two_step_registration() {
        let mut core = core();
        let r1 = core.dispatch(&register("s1001", 1), 0);
        assert_eq!(statuses(&r1), vec![401]);
        let nonce = parse_www_authenticate(r1[0].headers.get("WWW-Authenticate").unwrap()).unwrap();
        assert_eq!(B64.decode(&nonce).unwrap().len(), 32);
        assert_eq!(core.hss.lookup_by_impi("s1001@ims.kau.example").unwrap().sqn.value(), 1);

        let r2 = core.dispatch(&answer(&r1[0], register("s1001", 2), K), 10);
        assert_eq!(statuses(&r2), vec![200]);
        assert_eq!(r2[0].headers.get("Expires"), Some("3600"));
        let impu: SipUri = "sip:s1001@ims.kau.example".parse().unwrap();
        let bindings = core.hss.lookup_bindings(&impu);
        assert_eq!(bindings.len(), 1);
        assert_eq!(bindings[0].expires_at, 10 + 3_600_000);
        assert_eq!(core.challenges().count(), 0);
    }

    #[test]
    fn granted_expiry_is_capped() {
        let mut core = core();
        let mut req = register("s1001", 1);
        req.headers.set("Expires", "7200");
        let r1 = core.dispatch(&req, 0);
        let mut req2 = register("s1001", 2);
        req2.headers.set("Expires", "7200");
        let r2 = core.dispatch(&answer(&r1[0], req2, K), 0);
        assert_eq!(r2[0].headers.get("Expires"), Some("3600"));

        let mut core = core_with_short_expiry(600);
        let impu: SipUri = "sip:s1001@ims.kau.example".parse().unwrap();
        assert_eq!(core.hss.lookup_bindings(&impu)[0].expires_at, 600_000);
        core.tick(600_000);
        assert!(core.hss.lookup_bindings(&impu).is_empty());
    }

    fn core_with_short_expiry(secs: u32) -> ImsCore {
        let mut core = core();
        let mut req = register("s1001", 1);
        req.headers.set("Expires", secs.to_string());
        let r1 = core.dispatch(&req, 0);
        let mut req2 = register("s1001", 2);
        req2.headers.set("Expires", secs.to_string());
        let r2 = core.dispatch(&answer(&r1[0], req2, K), 0);
        assert_eq!(statuses(&r2), vec![200]);
        core
    }

    #[test]
    fn wrong_response_is_terminal() {
        let mut core = core();
        let r1 = core.dispatch(&register("s1001", 1), 0);
        let r2 = core.dispatch(&answer(&r1[0], register("s1001", 2), [0x22; 16]), 0);
        assert_eq!(statuses(&r2), vec![403]);
        assert_eq!(core.challenges().count(), 0, "challenge discarded");
    }

    #[test]
    fn accepted_nonce_cannot_be_replayed() {
        let mut core = core();
        let r1 = core.dispatch(&register("s1001", 1), 0);
        let good = answer(&r1[0], register("s1001", 2), K);
        assert_eq!(statuses(&core.dispatch(&good, 0)), vec![200]);
        // Same credentials, new transaction.
        let mut replay = good.clone();
        replay.headers.set("CSeq", "3 REGISTER");
        assert_eq!(statuses(&core.dispatch(&replay, 0)), vec![403]);
        // A retransmission of the original transaction replays the cached 200.
        assert_eq!(statuses(&core.dispatch(&good, 0)), vec![200]);
    }

    #[test]
    fn deregistration() {
        let mut core = registered_core();
        let mut dereg = register("s1001", 3);
        dereg.headers.set("Expires", "0");
        let r1 = core.dispatch(&dereg, 20);
        assert_eq!(statuses(&r1), vec![401]);
        let mut dereg2 = register("s1001", 4);
        dereg2.headers.set("Expires", "0");
        let r2 = core.dispatch(&answer(&r1[0], dereg2, K), 30);
        assert_eq!(statuses(&r2), vec![200]);
        let impu: SipUri = "sip:s1001@ims.kau.example".parse().unwrap();
        assert!(core.hss.lookup_bindings(&impu).is_empty());
    }

    #[test]
    fn resync_then_fresh_challenge() {
        let mut core = core();
        let r1 = core.dispatch(&register("s1001", 1), 0);
        let nonce = parse_www_authenticate(r1[0].headers.get("WWW-Authenticate").unwrap()).unwrap();
        let (rand, autn) = decode_nonce(&nonce).unwrap();
        // UE has already seen SQN 40.
        let last = Sqn::new(40).unwrap();
        assert!(ue_respond(&SecretKey::new(K), &rand, &autn, last).is_err());
        let mut req = register("s1001", 2);
        req.headers.set(
            "Authorization",
            Authorization {
                impi: "s1001@ims.kau.example".into(),
                nonce,
                credentials: Credentials::Resync(hex::encode(last.to_bytes())),
            }
            .render(),
        );
        let r2 = core.dispatch(&req, 0);
        assert_eq!(statuses(&r2), vec![401]);
        assert_eq!(core.hss.lookup_by_impi("s1001@ims.kau.example").unwrap().sqn.value(), 42);
        let nonce = parse_www_authenticate(r2[0].headers.get("WWW-Authenticate").unwrap()).unwrap();
        let (rand, autn) = decode_nonce(&nonce).unwrap();
        assert!(ue_respond(&SecretKey::new(K), &rand, &autn, last).is_ok());
    }

    #[test]
    fn malformed_authorization_is_400() {
        let mut core = core();
        let mut req = register("s1001", 1);
        req.headers.set("Authorization", "Digest username=x");
        assert_eq!(statuses(&core.dispatch(&req, 0)), vec![400]);
        let mut req = register("s1001", 2);
        req.headers.set("Expires", "soon");
        assert_eq!(statuses(&core.dispatch(&req, 0)), vec![400]);
    }

    #[test]
    fn challenge_ttl() {
        let mut core = core();
        core.dispatch(&register("s1001", 1), 1_000);
        core.tick(1_000 + 59_000);
        assert_eq!(core.challenges().count(), 1);
        core.tick(1_000 + 61_000);
        assert_eq!(core.challenges().count(), 0);
    }

    #[test]
    fn challenge_ttl_matches_brute_force_filter() {
        let mut rng = SplitMix64::new(5);
        let mut core = core();
        let mut issued = Vec::new();
        for i in 0..40 {
            let at = rng.below(100_000);
            let mut req = register("s1001", i + 1);
            req.headers.set("Call-ID", format!("c{i}"));
            core.dispatch(&req, at);
            issued.push(at);
        }
        let now = 100_000;
        core.tick(now);
        let mut expected: Vec<u64> = issued.into_iter().filter(|at| now - at <= CHALLENGE_TTL_MS).collect();
        let mut got: Vec<u64> = core.challenges().map(|c| c.issued_at).collect();
        expected.sort();
        got.sort();
        assert_eq!(got, expected);
    }

    fn invite(call_id: &str, cseq: u32, method: Method) -> SipMessage {
        SipMessage::request(method, "sip:mls@ims.kau.example".parse().unwrap())
            .header("Via", "SIP/2.0/SIM ue1.kau.example;branch=z9hG4bKi")
            .header("From", "<sip:s1001@ims.kau.example>;tag=u1")
            .header("To", "<sip:mls@ims.kau.example>")
            .header("Call-ID", call_id)
            .header("CSeq", format!("{cseq} {method}"))
            .header("Content-Length", "0")
    }

    #[test]
    fn invite_requires_registration() {
        let mut core = core();
        assert_eq!(statuses(&core.dispatch(&invite("s1", 1, Method::Invite), 0)), vec![403]);
        assert!(core.session("s1").is_none());
    }

    #[test]
    fn session_lifecycle() {
        let mut core = registered_core();
        assert_eq!(statuses(&core.dispatch(&invite("s1", 1, Method::Invite), 100)), vec![200]);
        assert_eq!(core.session("s1").unwrap().state, SessionState::Proceeding);
        assert!(core.dispatch(&invite("s1", 1, Method::Ack), 110).is_empty());
        assert_eq!(core.session("s1").unwrap().state, SessionState::Confirmed);
        assert_eq!(statuses(&core.dispatch(&invite("s1", 2, Method::Bye), 120)), vec![200]);
        assert_eq!(core.session("s1").unwrap().state, SessionState::Terminated);
    }

    #[test]
    fn proceeding_can_terminate_directly() {
        let mut core = registered_core();
        core.dispatch(&invite("s2", 1, Method::Invite), 100);
        assert_eq!(statuses(&core.dispatch(&invite("s2", 2, Method::Bye), 120)), vec![200]);
        assert_eq!(core.session("s2").unwrap().state, SessionState::Terminated);
        // No way back from terminated.
        assert_eq!(statuses(&core.dispatch(&invite("s2", 1, Method::Ack), 130)), vec![481]);
    }

    #[test]
    fn unknown_dialog_is_481() {
        let mut core = registered_core();
        // Scripted trace: BYE and ACK on calls that never existed, then a
        // BYE after termination.
        let script = [
            (invite("ghost", 1, Method::Bye), vec![481]),
            (invite("ghost", 1, Method::Ack), vec![481]),
            (invite("real", 1, Method::Invite), vec![200]),
            (invite("real", 2, Method::Bye), vec![200]),
            (invite("real", 3, Method::Bye), vec![481]),
        ];
        for (msg, want) in script {
            assert_eq!(statuses(&core.dispatch(&msg, 200)), want);
        }
    }

    #[test]
    fn message_method_not_allowed() {
        let mut core = registered_core();
        let resp = core.dispatch(&invite("m", 1, Method::Message), 0);
        assert_eq!(statuses(&resp), vec![405]);
        assert!(resp[0].headers.get("Allow").is_some());
    }

    #[test]
    fn routing_adds_one_via_per_hop_and_returns_in_reverse() {
        let req = register("s1001", 1);
        let at_p = route_request("pcscf.ims.kau.example", &req).unwrap();
        let at_s = route_request("scscf.ims.kau.example", &at_p).unwrap();
        assert_eq!(at_s.headers.count("Via"), req.headers.count("Via") + 2);
        assert_eq!(at_s.top_via().unwrap().host, "scscf.ims.kau.example");

        let resp = make_response(&at_s, 401, "Unauthorized").unwrap();
        let (resp, next) = route_response("scscf.ims.kau.example", &resp).unwrap();
        assert_eq!(next, "pcscf.ims.kau.example");
        let (resp, next) = route_response("pcscf.ims.kau.example", &resp).unwrap();
        assert_eq!(next, "ue1.kau.example");
        assert_eq!(resp.headers.get_all("Via").collect::<Vec<_>>(), req.headers.get_all("Via").collect::<Vec<_>>());
        assert_eq!(route_response("ue1.kau.example", &resp), Err(RouteError::Exhausted));
        assert!(matches!(route_response("elsewhere", &resp), Err(RouteError::NotOurs(_))));
    }

    #[test]
    fn missing_via_is_400() {
        let mut req = register("s1001", 1);
        req.headers.remove_all("Via");
        let resp = route_request("pcscf.ims.kau.example", &req).unwrap_err();
        assert_eq!(resp.status(), Some(400));
    }

    #[test]
    fn authorization_grammar() {
        let a = Authorization {
            impi: "s@x".into(),
            nonce: "AAAA+/==".into(),
            credentials: Credentials::Response("00ff".into()),
        };
        let text = a.render();
        assert_eq!(text, "AKA impi=\"s@x\", nonce=\"AAAA+/==\", response=\"00ff\"");
        assert_eq!(Authorization::parse(&text), Some(a));
        assert_eq!(Authorization::parse("AKA impi=\"s\", nonce=\"n\""), None);
        assert_eq!(parse_www_authenticate("AKA nonce=\"abc\""), Some("abc".into()));
    }

    /// Exhaustive small-alphabet fuzz: over every pair of REGISTERs drawn
    /// from a fixed alphabet, a 200 only ever follows a correct RES for a
    /// pending challenge of the same impi.
    #[test]
    fn no_registration_without_verified_response() {
        #[derive(Clone, Copy, Debug)]
        enum NonceChoice {
            None,
            Pending,
            Garbage,
            Consumed,
        }
        #[derive(Clone, Copy, Debug)]
        enum ResChoice {
            Correct,
            Wrong,
            Empty,
        }
        let impis = ["s1001@ims.kau.example", "s1002@ims.kau.example"];
        let nonces = [NonceChoice::None, NonceChoice::Pending, NonceChoice::Garbage, NonceChoice::Consumed];
        let results = [ResChoice::Correct, ResChoice::Wrong, ResChoice::Empty];
        let mut alphabet = Vec::new();
        for &impi in &impis {
            for &n in &nonces {
                for &r in &results {
                    alphabet.push((impi, n, r));
                }
            }
        }

        for a in &alphabet {
            for b in &alphabet {
                let mut core = core();
                core.hss
                    .provision(Subscriber {
                        impi: "s1002@ims.kau.example".into(),
                        impus: vec!["sip:s1002@ims.kau.example".parse().unwrap()],
                        k: SecretKey::new([0x33; 16]),
                        roles: [Role::Student].into(),
                        student_id: "1002".into(),
                        sqn: Sqn::ZERO,
                    })
                    .unwrap();
                // Seed state: one pending challenge for s1001 and one consumed nonce.
                let first = core.dispatch(&register("s1001", 1), 0);
                let consumed = answer(&first[0], register("s1001", 2), K);
                let consumed_nonce = Authorization::parse(consumed.headers.get("Authorization").unwrap()).unwrap().nonce;
                core.dispatch(&consumed, 0);
                let pending = core.dispatch(&register("s1001", 3), 0);
                let pending_nonce = parse_www_authenticate(pending[0].headers.get("WWW-Authenticate").unwrap()).unwrap();
                let pending_xres = core.challenges.get(&pending_nonce).unwrap().vector.xres;

                let mut used_pending = false;
                for (cseq, &(impi, nonce, res)) in (4..).zip([a, b]) {
                    let mut req = register("s1001", cseq);
                    let nonce_text = match nonce {
                        NonceChoice::None => None,
                        NonceChoice::Pending => Some(pending_nonce.clone()),
                        NonceChoice::Garbage => Some("AAAA".to_owned()),
                        NonceChoice::Consumed => Some(consumed_nonce.clone()),
                    };
                    let res_text = match res {
                        ResChoice::Correct => hex::encode(pending_xres),
                        ResChoice::Wrong => "0000000000000000".to_owned(),
                        ResChoice::Empty => String::new(),
                    };
                    if let Some(n) = &nonce_text {
                        req.headers.set(
                            "Authorization",
                            Authorization {
                                impi: impi.to_owned(),
                                nonce: n.clone(),
                                credentials: Credentials::Response(res_text),
                            }
                            .render(),
                        );
                    }
                    let out = core.dispatch(&req, 0);
                    let legit = matches!(nonce, NonceChoice::Pending)
                        && matches!(res, ResChoice::Correct)
                        && impi == impis[0]
                        && !used_pending;
                    // An impi that does not own the To identity is refused
                    // before the challenge is looked at.
                    if matches!(nonce, NonceChoice::Pending) && impi == impis[0] {
                        used_pending = true;
                    }
                    let got_200 = statuses(&out) == vec![200];
                    assert_eq!(got_200, legit, "{a:?} then {b:?}");
                }
            }
        }
    }
}
