use std::collections::{BTreeSet, HashSet};

use chrono::{TimeZone, Utc};
use mls_core::aka::SecretKey;
use mls_core::gateway::{ApiRequest, Gateway, GatewayInit, LoginError};
use mls_core::hss::{HssStore, Role, Subscriber};
use mls_core::learning::{FixedLocations, LearningStore, Term};
use mls_core::rng::SplitMix64;
use mls_core::world::NetParams;
use serde_json::json;

fn key(i: u64) -> String {
    let mut rng = SplitMix64::new(0x6b65_7973 ^ i);
    let mut k = [0u8; 16];
    rng.fill_bytes(&mut k);
    hex::encode(k)
}

fn gateway(subscribers: u64, params: NetParams) -> Gateway {
    let mut hss = HssStore::new();
    for i in 0..subscribers {
        hss.provision(Subscriber {
            impi: format!("u{i}@ims.kau.example"),
            impus: vec![format!("sip:u{i}@ims.kau.example").parse().unwrap()],
            k: SecretKey::from_hex(&key(i)).unwrap(),
            roles: BTreeSet::from([Role::Student]),
            student_id: format!("{i}"),
            sqn: Default::default(),
        })
        .unwrap();
    }
    let term = Term {
        start: Utc.with_ymd_and_hms(2026, 9, 6, 0, 0, 0).unwrap(),
        add_drop_deadline: Utc.with_ymd_and_hms(2026, 9, 17, 23, 59, 59).unwrap(),
    };
    Gateway::new(GatewayInit {
        hss,
        learning: LearningStore::new(term).unwrap(),
        releases: vec![],
        params,
        odus_failure_prob: 0.0,
        locations: FixedLocations::default(),
    })
    .unwrap()
}

#[test]
fn tokens_never_repeat_across_1e5_logins() {
    const SUBSCRIBERS: u64 = 1000;
    const N: u64 = 100_000;
    let mut gw = gateway(SUBSCRIBERS, NetParams::default());
    gw.set_tracing(false);
    let mut tokens = HashSet::new();
    for n in 0..N {
        let i = n % SUBSCRIBERS;
        let s = gw.login(&format!("u{i}@ims.kau.example"), &key(i)).unwrap();
        assert_eq!(s.token.len(), 32);
        assert!(tokens.insert(s.token), "token repeated at login {n}");
    }
    assert_eq!(tokens.len() as u64, N);
}

#[test]
fn login_survives_loss() {
    let mut gw = gateway(
        1,
        NetParams {
            delay_ms: 10,
            loss_prob: 0.2,
            seed: 42,
        },
    );
    let s = gw.login("u0@ims.kau.example", &key(0)).unwrap();
    assert_eq!(gw.last_sip_trail(), ["REGISTER 401", "REGISTER 200"]);
    let r = gw.handle(&ApiRequest::get("/courses").token(&s.token));
    assert_eq!(r.status, 200);
}

#[test]
fn login_times_out_on_a_dead_link() {
    let mut gw = gateway(
        1,
        NetParams {
            delay_ms: 10,
            loss_prob: 1.0,
            seed: 42,
        },
    );
    assert_eq!(
        gw.login("u0@ims.kau.example", &key(0)).unwrap_err(),
        LoginError::AuthRejected(None)
    );
    let r = gw.handle(&ApiRequest::post("/session").json(json!({"impi": "u0@ims.kau.example", "k": key(0)})));
    assert_eq!(r.status, 403);
    assert_eq!(r.body["sip_status"], "timeout");
}
