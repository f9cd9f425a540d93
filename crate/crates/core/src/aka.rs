//! AKA challenge/response with HMAC-SHA-256 based f-functions.
//!
//! Each function is `f_i(K, data) = HMAC-SHA-256(K, [i] || data)`, truncated:
//!
//! | fn | input                  | output          |
//! |----|------------------------|-----------------|
//! | f1 | SQN(6) ‖ AMF(2) ‖ RAND | MAC, 8 bytes    |
//! | f2 | RAND                   | RES/XRES, 8     |
//! | f3 | RAND                   | CK, 16          |
//! | f4 | RAND                   | IK, 16          |
//! | f5 | RAND                   | AK, 6           |
//!
//! `AUTN = (SQN ⊕ AK) ‖ AMF ‖ MAC`, SQN big-endian, AMF fixed at `0x8000`.

use std::fmt;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::Sha256;
use thiserror::Error;

pub const AMF: [u8; 2] = [0x80, 0x00];
pub const SQN_MAX: u64 = (1 << 48) - 1;

pub type Rand = [u8; 16];
pub type Autn = [u8; 16];
pub type Res = [u8; 8];

/// 48-bit sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sqn(u64);

impl Sqn {
    pub const ZERO: Sqn = Sqn(0);

    pub fn new(value: u64) -> Option<Sqn> {
        (value <= SQN_MAX).then_some(Sqn(value))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn to_bytes(self) -> [u8; 6] {
        let b = self.0.to_be_bytes();
        [b[2], b[3], b[4], b[5], b[6], b[7]]
    }

    pub fn from_bytes(b: [u8; 6]) -> Sqn {
        Sqn(u64::from_be_bytes([0, 0, b[0], b[1], b[2], b[3], b[4], b[5]]))
    }

    pub fn next(self) -> Option<Sqn> {
        Sqn::new(self.0 + 1)
    }
}

impl fmt::Display for Sqn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SecretKey([u8; 16]);

impl SecretKey {
    pub fn new(bytes: [u8; 16]) -> Self {
        SecretKey(bytes)
    }

    pub fn from_hex(hex_str: &str) -> Result<Self, KeyError> {
        let bytes = hex::decode(hex_str).map_err(|_| KeyError)?;
        let arr: [u8; 16] = bytes.try_into().map_err(|_| KeyError)?;
        Ok(SecretKey(arr))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl Serialize for SecretKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for SecretKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        SecretKey::from_hex(&raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("secret key must be exactly 32 hex characters")]
pub struct KeyError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthVector {
    pub rand: Rand,
    pub xres: Res,
    pub autn: Autn,
    pub ck: [u8; 16],
    pub ik: [u8; 16],
    pub sqn: Sqn,
}

impl AuthVector {
    pub fn concealed_sqn(&self) -> [u8; 6] {
        self.autn[..6].try_into().expect("6 bytes")
    }

    pub fn amf(&self) -> [u8; 2] {
        self.autn[6..8].try_into().expect("2 bytes")
    }

    pub fn mac(&self) -> [u8; 8] {
        self.autn[8..].try_into().expect("8 bytes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UeResponse {
    pub res: Res,
    pub ck: [u8; 16],
    pub ik: [u8; 16],
    /// The network's SQN recovered from AUTN; the UE stores it as its new
    /// `last_sqn`.
    pub sqn: Sqn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AuthFailure {
    #[error("AUTN MAC does not verify; network not authentic")]
    MacFailure,
    #[error("sequence number not fresh (UE last saw {last_sqn})")]
    SyncFailure { last_sqn: Sqn },
}

fn f(k: &SecretKey, tag: u8, data: &[&[u8]]) -> [u8; 32] {
    let mut mac = Hmac::<Sha256>::new_from_slice(k.as_bytes()).expect("16-byte key");
    mac.update(&[tag]);
    for part in data {
        mac.update(part);
    }
    mac.finalize().into_bytes().into()
}

fn take<const N: usize>(digest: [u8; 32]) -> [u8; N] {
    digest[..N].try_into().expect("digest is 32 bytes")
}

fn f1_mac(k: &SecretKey, sqn: &[u8; 6], amf: &[u8; 2], rand: &Rand) -> [u8; 8] {
    take(f(k, 0x01, &[sqn, amf, rand]))
}

fn f2_res(k: &SecretKey, rand: &Rand) -> Res {
    take(f(k, 0x02, &[rand]))
}

fn f3_ck(k: &SecretKey, rand: &Rand) -> [u8; 16] {
    take(f(k, 0x03, &[rand]))
}

fn f4_ik(k: &SecretKey, rand: &Rand) -> [u8; 16] {
    take(f(k, 0x04, &[rand]))
}

fn f5_ak(k: &SecretKey, rand: &Rand) -> [u8; 6] {
    take(f(k, 0x05, &[rand]))
}

fn xor6(a: [u8; 6], b: [u8; 6]) -> [u8; 6] {
    std::array::from_fn(|i| a[i] ^ b[i])
}

/// Network side: build the quintuple for one challenge.
pub fn generate_vector(k: &SecretKey, sqn: Sqn, rand: Rand) -> AuthVector {
    let sqn_bytes = sqn.to_bytes();
    let mac = f1_mac(k, &sqn_bytes, &AMF, &rand);
    let ak = f5_ak(k, &rand);

    let mut autn = [0u8; 16];
    autn[..6].copy_from_slice(&xor6(sqn_bytes, ak));
    autn[6..8].copy_from_slice(&AMF);
    autn[8..].copy_from_slice(&mac);

    AuthVector {
        rand,
        xres: f2_res(k, &rand),
        autn,
        ck: f3_ck(k, &rand),
        ik: f4_ik(k, &rand),
        sqn,
    }
}

/// UE side: authenticate the network from AUTN, then answer the challenge.
pub fn ue_respond(
    k: &SecretKey,
    rand: &Rand,
    autn: &Autn,
    last_sqn: Sqn,
) -> Result<UeResponse, AuthFailure> {
    let ak = f5_ak(k, rand);
    let concealed: [u8; 6] = autn[..6].try_into().expect("6 bytes");
    let sqn_bytes = xor6(concealed, ak);
    let amf: [u8; 2] = autn[6..8].try_into().expect("2 bytes");
    let expected = f1_mac(k, &sqn_bytes, &amf, rand);
    if !constant_time_eq(&expected, &autn[8..]) {
        return Err(AuthFailure::MacFailure);
    }
    let sqn = Sqn::from_bytes(sqn_bytes);
    if sqn <= last_sqn {
        return Err(AuthFailure::SyncFailure { last_sqn });
    }
    Ok(UeResponse {
        res: f2_res(k, rand),
        ck: f3_ck(k, rand),
        ik: f4_ik(k, rand),
        sqn,
    })
}

pub fn verify_response(xres: &Res, res: &Res) -> bool {
    constant_time_eq(xres, res)
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}
