//! Simulated user equipment: builds requests and answers AKA challenges
//! with the key held on its ISIM. Network I/O lives in [`crate::world`].

use std::fmt;

use crate::aka::{ue_respond, AuthFailure, SecretKey, Sqn};
use crate::ims::{decode_nonce, parse_www_authenticate, Authorization, Credentials};
use crate::netsim::TxnId;
use crate::sip::{branch_for, to_tag, Method, NameAddr, SipMessage, SipUri, Via};

/// One request/response exchange in a flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exchange {
    pub method: Method,
    pub txn: Option<TxnId>,
    /// `None` when the transaction timed out or the request was an ACK.
    pub status: Option<u16>,
}

impl fmt::Display for Exchange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.status {
            Some(s) => write!(f, "{} {s}", self.method),
            None if self.method == Method::Ack => write!(f, "ACK"),
            None => write!(f, "{} timeout", self.method),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialog {
    pub call_id: String,
    pub target: SipUri,
    pub cseq: u32,
}

#[derive(Debug, Clone)]
pub struct UeAgent {
    pub host: String,
    pub impi: String,
    pub impu: SipUri,
    k: SecretKey,
    /// Highest SQN this ISIM has accepted.
    pub last_sqn: Sqn,
    reg_call_id: String,
    reg_cseq: u32,
    calls: u32,
    pub dialog: Option<Dialog>,
    pub exchanges: Vec<Exchange>,
}

impl UeAgent {
    pub fn new(host: &str, impi: &str, impu: SipUri, k: SecretKey) -> Self {
        UeAgent {
            host: host.to_owned(),
            impi: impi.to_owned(),
            impu,
            k,
            last_sqn: Sqn::ZERO,
            reg_call_id: format!("reg-{impi}-{host}"),
            reg_cseq: 0,
            calls: 0,
            dialog: None,
            exchanges: Vec::new(),
        }
    }

    pub fn contact(&self) -> SipUri {
        SipUri::new(self.impu.user.as_deref(), &self.host)
    }

    fn caller(&self, call_id: &str) -> String {
        NameAddr::new(self.impu.clone())
            .with_tag(&to_tag(&format!("{}:{call_id}", self.host)))
            .to_string()
    }

    fn base(&self, method: Method, uri: SipUri, call_id: &str, cseq: u32, to: &SipUri) -> SipMessage {
        let cseq_text = format!("{cseq} {method}");
        let branch = branch_for(&self.host, call_id, &cseq_text, "");
        SipMessage::request(method, uri)
            .header("Via", Via::new(&self.host, &branch).to_string())
            .header("From", self.caller(call_id))
            .header("To", NameAddr::new(to.clone()).to_string())
            .header("Call-ID", call_id)
            .header("CSeq", cseq_text)
    }

    pub fn register_request(&mut self, expires: u32, auth: Option<&Authorization>) -> SipMessage {
        self.reg_cseq += 1;
        let registrar = SipUri::new(None, &self.impu.host);
        let mut msg = self
            .base(Method::Register, registrar, &self.reg_call_id.clone(), self.reg_cseq, &self.impu.clone())
            .header("Contact", NameAddr::new(self.contact()).to_string())
            .header("Expires", expires.to_string());
        if let Some(a) = auth {
            msg.headers.push("Authorization", a.render());
        }
        msg.header("Content-Length", "0")
    }

    /// Answer a 401. A forged or foreign AUTN is answered with an empty
    /// response so the registrar refuses it; a stale SQN asks for a resync.
    pub fn answer_challenge(&mut self, challenge: &SipMessage) -> Option<Authorization> {
        let nonce = parse_www_authenticate(challenge.headers.get("WWW-Authenticate")?)?;
        let (rand, autn) = decode_nonce(&nonce)?;
        let credentials = match ue_respond(&self.k, &rand, &autn, self.last_sqn) {
            Ok(r) => {
                self.last_sqn = r.sqn;
                Credentials::Response(hex::encode(r.res))
            }
            Err(AuthFailure::MacFailure) => Credentials::Response(String::new()),
            Err(AuthFailure::SyncFailure { last_sqn }) => Credentials::Resync(hex::encode(last_sqn.to_bytes())),
        };
        Some(Authorization {
            impi: self.impi.clone(),
            nonce,
            credentials,
        })
    }

    pub fn invite_request(&mut self, target: SipUri) -> SipMessage {
        self.calls += 1;
        let call_id = format!("call-{}@{}", self.calls, self.host);
        self.dialog = Some(Dialog {
            call_id: call_id.clone(),
            target: target.clone(),
            cseq: 1,
        });
        self.base(Method::Invite, target.clone(), &call_id, 1, &target)
            .header("Contact", NameAddr::new(self.contact()).to_string())
            .header("Content-Length", "0")
    }

    /// ACK for a 2xx carries the INVITE's CSeq number.
    pub fn ack_request(&self) -> Option<SipMessage> {
        let d = self.dialog.as_ref()?;
        Some(
            self.base(Method::Ack, d.target.clone(), &d.call_id, d.cseq, &d.target)
                .header("Content-Length", "0"),
        )
    }

    pub fn bye_request(&mut self) -> Option<SipMessage> {
        let d = self.dialog.as_mut()?;
        d.cseq += 1;
        let d = d.clone();
        Some(
            self.base(Method::Bye, d.target.clone(), &d.call_id, d.cseq, &d.target)
                .header("Content-Length", "0"),
        )
    }

    /// Human-readable trail of every exchange so far, e.g. `REGISTER 401`.
    pub fn trail(&self) -> Vec<String> {
        self.exchanges.iter().map(ToString::to_string).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sip::{parse_message, serialize_message};

    fn agent() -> UeAgent {
        UeAgent::new(
            "ue1.kau.example",
            "s1001@ims.kau.example",
            "sip:s1001@ims.kau.example".parse().unwrap(),
            SecretKey::new([7; 16]),
        )
    }

    #[test]
    fn requests_are_valid_and_round_trip() {
        let mut ue = agent();
        let reg = ue.register_request(3600, None);
        let inv = ue.invite_request("sip:mls@ims.kau.example".parse().unwrap());
        let ack = ue.ack_request().unwrap();
        let bye = ue.bye_request().unwrap();
        for msg in [reg, inv, ack, bye] {
            msg.validate().unwrap();
            let wire = serialize_message(&msg).unwrap();
            assert_eq!(parse_message(&wire).unwrap(), msg);
        }
    }

    #[test]
    fn cseq_advances() {
        let mut ue = agent();
        assert_eq!(ue.register_request(3600, None).cseq().unwrap().seq, 1);
        assert_eq!(ue.register_request(3600, None).cseq().unwrap().seq, 2);
        ue.invite_request("sip:mls@ims.kau.example".parse().unwrap());
        assert_eq!(ue.ack_request().unwrap().cseq().unwrap().seq, 1);
        assert_eq!(ue.bye_request().unwrap().cseq().unwrap().seq, 2);
    }

    #[test]
    fn no_dialog_no_bye() {
        assert!(agent().bye_request().is_none());
    }
}
