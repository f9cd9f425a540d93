//! Random structurally valid messages, for round-trip and fuzz testing.

use super::message::{Method, SipMessage, StartLine, Via};
use super::SipUri;
use crate::rng::SplitMix64;

const ALNUM: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
const EXTRA_NAMES: [&str; 6] = ["Contact", "Expires", "Max-Forwards", "User-Agent", "Subject", "Route"];
const REASONS: [&str; 6] = ["OK", "Trying", "Unauthorized", "Forbidden", "Call/Transaction Does Not Exist", ""];

fn word(rng: &mut SplitMix64, min: usize, max: usize) -> String {
    let len = min + rng.below((max - min + 1) as u64) as usize;
    (0..len)
        .map(|_| ALNUM[rng.below(ALNUM.len() as u64) as usize] as char)
        .collect()
}

fn host(rng: &mut SplitMix64) -> String {
    format!("{}.{}.example", word(rng, 1, 8), word(rng, 1, 5)).to_lowercase()
}

fn uri(rng: &mut SplitMix64) -> SipUri {
    let mut uri = SipUri::new(None, &host(rng));
    if rng.chance(0.8) {
        uri.user = Some(word(rng, 1, 10));
    }
    if rng.chance(0.3) {
        uri.port = Some(1 + rng.below(65535) as u16);
    }
    for _ in 0..rng.below(3) {
        let value = rng.chance(0.7).then(|| word(rng, 1, 6));
        uri.params.push((word(rng, 1, 6), value));
    }
    uri
}

/// Printable header value with no leading/trailing whitespace.
fn value(rng: &mut SplitMix64) -> String {
    let len = rng.below(40) as usize;
    let mut s: String = (0..len)
        .map(|_| (b' ' + rng.below(95) as u8) as char)
        .collect();
    s = s.trim().to_owned();
    s
}

pub fn random_message(rng: &mut SplitMix64) -> SipMessage {
    let method = Method::ALL[rng.below(Method::ALL.len() as u64) as usize];
    let start = if rng.chance(0.5) {
        StartLine::Request {
            method,
            uri: uri(rng),
        }
    } else {
        StartLine::Response {
            status: 100 + rng.below(600) as u16,
            reason: REASONS[rng.below(REASONS.len() as u64) as usize].to_owned(),
        }
    };

    let body_len = if rng.chance(0.5) { 0 } else { rng.below(64) as usize };
    let mut body = vec![0u8; body_len];
    rng.fill_bytes(&mut body);

    let mut headers: Vec<(String, String)> = Vec::new();
    for _ in 0..1 + rng.below(3) {
        let via = Via::new(&host(rng), &format!("z9hG4bK{}", word(rng, 4, 12)));
        headers.push(("Via".into(), via.to_string()));
    }
    headers.push(("From".into(), format!("<{}>;tag={}", uri(rng), word(rng, 4, 8))));
    headers.push(("To".into(), format!("<{}>", uri(rng))));
    headers.push(("Call-ID".into(), format!("{}@{}", word(rng, 4, 16), host(rng))));
    headers.push(("CSeq".into(), format!("{} {}", rng.below(1 << 31), method)));
    for _ in 0..rng.below(4) {
        let name = if rng.chance(0.5) {
            EXTRA_NAMES[rng.below(EXTRA_NAMES.len() as u64) as usize].to_owned()
        } else {
            format!("X-{}", word(rng, 1, 8))
        };
        headers.push((name, value(rng)));
    }
    headers.push(("Content-Length".into(), body_len.to_string()));

    // Fisher-Yates so header order itself is exercised.
    for i in (1..headers.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        headers.swap(i, j);
    }

    let mut msg = SipMessage {
        start,
        headers: Default::default(),
        body,
    };
    for (n, v) in headers {
        msg.headers.push(&n, v);
    }
    msg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_messages_are_valid() {
        let mut rng = SplitMix64::new(1);
        for _ in 0..500 {
            let m = random_message(&mut rng);
            m.validate().unwrap_or_else(|e| panic!("{e}: {m:?}"));
        }
    }
}
