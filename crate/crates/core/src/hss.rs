//! Home Subscriber Server: identities, keys, roles, SQN counters and the
//! registrar's bindings.
//!
//! Subscribers persist to `subscribers.jsonl`, one JSON object per line:
//!
//! ```json
//! {"impi":"s1001@ims.kau.example","impus":["sip:s1001@ims.kau.example"],"k":"<32 hex>","roles":["student"],"student_id":"1001","sqn":0}
//! ```
//!
//! Keys are stored in plaintext hex; this is a simulation store. Bindings
//! are volatile registrar state and are not persisted.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aka::{SecretKey, Sqn};
use crate::netsim::SimTime;
use crate::sip::SipUri;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Faculty,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscriber {
    pub impi: String,
    pub impus: Vec<SipUri>,
    pub k: SecretKey,
    pub roles: BTreeSet<Role>,
    pub student_id: String,
    #[serde(default)]
    pub sqn: Sqn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistrationBinding {
    pub impu: SipUri,
    pub contact: SipUri,
    pub expires_at: SimTime,
    pub call_id: String,
    pub cseq: u32,
}

#[derive(Debug, Error)]
pub enum HssError {
    #[error("identity already provisioned: {0}")]
    DuplicateIdentity(String),
    #[error("unknown identity: {0}")]
    UnknownIdentity(String),
    #[error("stale CSeq {got} for call {call_id} (last {last})")]
    StaleCseq { call_id: String, last: u32, got: u32 },
    #[error("invalid subscriber: {0}")]
    InvalidSubscriber(&'static str),
    #[error("binding expiry {expires_at} is not after {now}")]
    InvalidExpiry { expires_at: SimTime, now: SimTime },
    #[error("sequence number space exhausted for {0}")]
    SqnExhausted(String),
    #[error("line {line}: {source}")]
    Format {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Default, Clone)]
pub struct HssStore {
    subscribers: BTreeMap<String, Subscriber>,
    impu_index: HashMap<String, String>,
    bindings: BTreeMap<(String, String), RegistrationBinding>,
    /// `(expires_at, aor, contact)` for every binding, oldest first.
    expiry: BTreeSet<(SimTime, String, String)>,
    last_cseq: HashMap<String, u32>,
}

/// Store contents are the provisioned subscribers; bindings are transient.
impl PartialEq for HssStore {
    fn eq(&self, other: &Self) -> bool {
        self.subscribers == other.subscribers
    }
}

impl HssStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn provision(&mut self, sub: Subscriber) -> Result<(), HssError> {
        if sub.impi.is_empty() {
            return Err(HssError::InvalidSubscriber("impi must not be empty"));
        }
        if sub.impus.is_empty() {
            return Err(HssError::InvalidSubscriber("at least one impu is required"));
        }
        if sub.roles.is_empty() {
            return Err(HssError::InvalidSubscriber("at least one role is required"));
        }
        if self.subscribers.contains_key(&sub.impi) {
            return Err(HssError::DuplicateIdentity(sub.impi));
        }
        let mut seen = BTreeSet::new();
        for impu in &sub.impus {
            let aor = impu.aor();
            if self.impu_index.contains_key(&aor) || !seen.insert(aor.clone()) {
                return Err(HssError::DuplicateIdentity(aor));
            }
        }
        for aor in seen {
            self.impu_index.insert(aor, sub.impi.clone());
        }
        self.subscribers.insert(sub.impi.clone(), sub);
        Ok(())
    }

    pub fn lookup_by_impi(&self, impi: &str) -> Option<&Subscriber> {
        self.subscribers.get(impi)
    }

    pub fn lookup_by_impu(&self, impu: &SipUri) -> Option<&Subscriber> {
        let impi = self.impu_index.get(&impu.aor())?;
        self.subscribers.get(impi)
    }

    pub fn subscribers(&self) -> impl Iterator<Item = &Subscriber> {
        self.subscribers.values()
    }

    pub fn len(&self) -> usize {
        self.subscribers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subscribers.is_empty()
    }

    fn check_cseq(&self, call_id: &str, cseq: u32) -> Result<(), HssError> {
        match self.last_cseq.get(call_id) {
            Some(&last) if cseq <= last => Err(HssError::StaleCseq {
                call_id: call_id.to_owned(),
                last,
                got: cseq,
            }),
            _ => Ok(()),
        }
    }

    /// Upsert the binding for `(impu, contact)`. CSeq must strictly
    /// increase per Call-ID.
    pub fn bind(
        &mut self,
        impu: &SipUri,
        contact: &SipUri,
        expires_at: SimTime,
        call_id: &str,
        cseq: u32,
        now: SimTime,
    ) -> Result<(), HssError> {
        if self.lookup_by_impu(impu).is_none() {
            return Err(HssError::UnknownIdentity(impu.aor()));
        }
        if expires_at <= now {
            return Err(HssError::InvalidExpiry { expires_at, now });
        }
        self.check_cseq(call_id, cseq)?;
        self.last_cseq.insert(call_id.to_owned(), cseq);
        let key = (impu.aor(), contact.to_string());
        self.expiry.insert((expires_at, key.0.clone(), key.1.clone()));
        let old = self.bindings.insert(
            key.clone(),
            RegistrationBinding {
                impu: impu.clone(),
                contact: contact.clone(),
                expires_at,
                call_id: call_id.to_owned(),
                cseq,
            },
        );
        if let Some(old) = old.filter(|o| o.expires_at != expires_at) {
            self.expiry.remove(&(old.expires_at, key.0, key.1));
        }
        Ok(())
    }

    /// Remove a binding; returns whether one existed.
    pub fn unbind(&mut self, impu: &SipUri, contact: &SipUri, call_id: &str, cseq: u32) -> Result<bool, HssError> {
        if self.lookup_by_impu(impu).is_none() {
            return Err(HssError::UnknownIdentity(impu.aor()));
        }
        self.check_cseq(call_id, cseq)?;
        self.last_cseq.insert(call_id.to_owned(), cseq);
        let key = (impu.aor(), contact.to_string());
        match self.bindings.remove(&key) {
            Some(b) => {
                self.expiry.remove(&(b.expires_at, key.0, key.1));
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn lookup_bindings(&self, impu: &SipUri) -> Vec<&RegistrationBinding> {
        let aor = impu.aor();
        self.bindings
            .range((aor.clone(), String::new())..)
            .take_while(|((a, _), _)| *a == aor)
            .map(|(_, b)| b)
            .collect()
    }

    pub fn bindings(&self) -> impl Iterator<Item = &RegistrationBinding> {
        self.bindings.values()
    }

    pub fn is_registered(&self, impu: &SipUri, now: SimTime) -> bool {
        self.lookup_bindings(impu).iter().any(|b| b.expires_at > now)
    }

    pub fn has_live_binding(&self, impu: &SipUri, contact: &SipUri, now: SimTime) -> bool {
        self.bindings
            .get(&(impu.aor(), contact.to_string()))
            .is_some_and(|b| b.expires_at > now)
    }

    pub fn purge_expired(&mut self, now: SimTime) -> usize {
        let mut purged = 0;
        while let Some(first) = self.expiry.first() {
            if first.0 > now {
                break;
            }
            let (_, aor, contact) = self.expiry.pop_first().expect("non-empty");
            self.bindings.remove(&(aor, contact));
            purged += 1;
        }
        purged
    }

    fn subscriber_mut(&mut self, impi: &str) -> Result<&mut Subscriber, HssError> {
        self.subscribers
            .get_mut(impi)
            .ok_or_else(|| HssError::UnknownIdentity(impi.to_owned()))
    }

    pub fn advance_sqn(&mut self, impi: &str) -> Result<Sqn, HssError> {
        let sub = self.subscriber_mut(impi)?;
        let next = sub
            .sqn
            .next()
            .ok_or_else(|| HssError::SqnExhausted(impi.to_owned()))?;
        sub.sqn = next;
        Ok(next)
    }

    /// After a UE reports it has seen `ue_sqn`, continue from `ue_sqn + 1`.
    /// Never moves the counter backwards.
    pub fn resync_sqn(&mut self, impi: &str, ue_sqn: Sqn) -> Result<(), HssError> {
        let sub = self.subscriber_mut(impi)?;
        let target = ue_sqn
            .next()
            .ok_or_else(|| HssError::SqnExhausted(impi.to_owned()))?;
        sub.sqn = sub.sqn.max(target);
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for sub in self.subscribers.values() {
            out.push_str(&serde_json::to_string(sub).expect("subscriber serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, HssError> {
        let mut store = HssStore::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let sub: Subscriber =
                serde_json::from_str(line).map_err(|source| HssError::Format { line: idx + 1, source })?;
            store.provision(sub)?;
        }
        Ok(store)
    }

    /// Write via a sibling temp file and rename, so readers never see a
    /// half-written store.
    pub fn save(&self, path: &Path) -> Result<(), HssError> {
        write_atomic(path, self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HssError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
