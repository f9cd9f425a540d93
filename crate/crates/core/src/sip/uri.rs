use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid SIP URI `{input}`: {reason}")]
pub struct UriError {
    pub input: String,
    pub reason: &'static str,
}

/// `sip:[user@]host[:port][;name[=value]]*`
///
/// Only the `sip` scheme is accepted. Parameters keep their order; a
/// parameter without `=` (e.g. `;lr`) has no value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SipUri {
    pub user: Option<String>,
    pub host: String,
    pub port: Option<u16>,
    pub params: Vec<(String, Option<String>)>,
}

pub(crate) fn is_user_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || "-_.!~*'+%".contains(c)
}

pub(crate) fn is_host_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '-' || c == '.'
}

pub(crate) fn is_param_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || "-_.!~*'+%".contains(c)
}

impl SipUri {
    pub fn new(user: Option<&str>, host: &str) -> Self {
        SipUri {
            user: user.map(str::to_owned),
            host: host.to_owned(),
            port: None,
            params: Vec::new(),
        }
    }

    pub fn with_param(mut self, name: &str, value: Option<&str>) -> Self {
        self.params.push((name.to_owned(), value.map(str::to_owned)));
        self
    }

    pub fn param(&self, name: &str) -> Option<Option<&str>> {
        self.params
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_deref())
    }

    /// Address-of-record: the URI without parameters, used as identity key.
    pub fn aor(&self) -> String {
        let mut bare = self.clone();
        bare.params.clear();
        bare.to_string()
    }
}

impl fmt::Display for SipUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("sip:")?;
        if let Some(user) = &self.user {
            write!(f, "{user}@")?;
        }
        f.write_str(&self.host)?;
        if let Some(port) = self.port {
            write!(f, ":{port}")?;
        }
        for (name, value) in &self.params {
            match value {
                Some(v) => write!(f, ";{name}={v}")?,
                None => write!(f, ";{name}")?,
            }
        }
        Ok(())
    }
}

impl FromStr for SipUri {
    type Err = UriError;

    fn from_str(input: &str) -> Result<Self, Self::Err> {
        let err = |reason| UriError {
            input: input.to_owned(),
            reason,
        };
        let rest = input.strip_prefix("sip:").ok_or_else(|| err("scheme must be sip"))?;
        let mut parts = rest.split(';');
        let addr = parts.next().unwrap_or_default();

        let (user, hostport) = match addr.split_once('@') {
            Some((u, hp)) => {
                if u.is_empty() || !u.chars().all(is_user_char) {
                    return Err(err("bad user part"));
                }
                (Some(u.to_owned()), hp)
            }
            None => (None, addr),
        };
        let (host, port) = match hostport.split_once(':') {
            Some((h, p)) => {
                if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(err("bad port"));
                }
                let port: u16 = p.parse().map_err(|_| err("port out of range"))?;
                if port == 0 {
                    return Err(err("port out of range"));
                }
                (h, Some(port))
            }
            None => (hostport, None),
        };
        if host.is_empty() || !host.chars().all(is_host_char) {
            return Err(err("bad host"));
        }

        let mut params = Vec::new();
        for raw in parts {
            let (name, value) = match raw.split_once('=') {
                Some((n, v)) => (n, Some(v)),
                None => (raw, None),
            };
            if name.is_empty() || !name.chars().all(is_param_char) {
                return Err(err("bad parameter name"));
            }
            if let Some(v) = value {
                if v.is_empty() || !v.chars().all(is_param_char) {
                    return Err(err("bad parameter value"));
                }
            }
            params.push((name.to_owned(), value.map(str::to_owned)));
        }

        Ok(SipUri {
            user,
            host: host.to_owned(),
            port,
            params,
        })
    }
}

impl Serialize for SipUri {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SipUri {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_uri() {
        let uri: SipUri = "sip:s1001@ims.kau.example:5060;transport=sim;lr".parse().unwrap();
        assert_eq!(uri.user.as_deref(), Some("s1001"));
        assert_eq!(uri.host, "ims.kau.example");
        assert_eq!(uri.port, Some(5060));
        assert_eq!(uri.param("transport"), Some(Some("sim")));
        assert_eq!(uri.param("LR"), Some(None));
        assert_eq!(uri.to_string(), "sip:s1001@ims.kau.example:5060;transport=sim;lr");
        assert_eq!(uri.aor(), "sip:s1001@ims.kau.example:5060");
    }

    #[test]
    fn rejects_bad_uris() {
        for bad in [
            "tel:+966",
            "sip:",
            "sip:@host",
            "sip:user@",
            "sip:host:0",
            "sip:host:70000",
            "sip:host:",
            "sip:host;=x",
            "sip:ho st",
            "sips:host",
        ] {
            assert!(bad.parse::<SipUri>().is_err(), "{bad} should be rejected");
        }
    }

    #[test]
    fn serde_as_string() {
        let uri = SipUri::new(Some("a"), "b.example");
        let json = serde_json::to_string(&uri).unwrap();
        assert_eq!(json, "\"sip:a@b.example\"");
        assert_eq!(serde_json::from_str::<SipUri>(&json).unwrap(), uri);
    }
}
