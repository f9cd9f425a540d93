//! The simulated deployment: UEs attach to a P-CSCF, which forwards to the
//! S-CSCF hosting the registrar. The P-CSCF/S-CSCF link is lossless; each
//! UE link uses the configured delay and loss, seeded with `seed + n` for
//! the n-th UE (1-based).

use thiserror::Error;

use crate::hss::HssStore;
use crate::ims::{route_request, route_response, ImsCore};
use crate::netsim::{Delivery, LinkConfig, NetError, Network, NodeId, Occurrence, SimTime};
use crate::sip::{parse_message, serialize_message, Method, SipMessage, SipUri};
use crate::ue::{Exchange, UeAgent};

pub const IMS_DOMAIN: &str = "ims.kau.example";
pub const PCSCF_HOST: &str = "pcscf.ims.kau.example";
pub const SCSCF_HOST: &str = "scscf.ims.kau.example";
const CORE_LINK_DELAY_MS: u64 = 1;
const CORE_RNG_SALT: u64 = 0x6d6c_732d_636f_7265;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetParams {
    pub delay_ms: u64,
    pub loss_prob: f64,
    pub seed: u64,
}

impl Default for NetParams {
    fn default() -> Self {
        NetParams {
            delay_ms: 10,
            loss_prob: 0.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("{method} rejected with {status}")]
    Rejected { method: Method, status: u16 },
    #[error("{method} timed out")]
    TimedOut { method: Method },
    #[error("no dialog to end")]
    NoDialog,
    #[error("unreadable challenge")]
    BadChallenge,
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug)]
pub struct World {
    pub net: Network,
    pub core: ImsCore,
    pcscf: NodeId,
    scscf: NodeId,
    params: NetParams,
    ues: u64,
}

impl World {
    pub fn new(hss: HssStore, params: NetParams) -> Result<World, NetError> {
        LinkConfig::new(params.delay_ms, params.loss_prob, params.seed)?;
        let mut net = Network::new();
        let pcscf = net.add_node(PCSCF_HOST)?;
        let scscf = net.add_node(SCSCF_HOST)?;
        net.connect(pcscf, scscf, LinkConfig::new(CORE_LINK_DELAY_MS, 0.0, params.seed)?)?;
        Ok(World {
            net,
            core: ImsCore::new(hss, params.seed ^ CORE_RNG_SALT),
            pcscf,
            scscf,
            params,
            ues: 0,
        })
    }

    pub fn params(&self) -> NetParams {
        self.params
    }

    pub fn now(&self) -> SimTime {
        self.net.now()
    }

    pub fn add_ue(&mut self, host: &str) -> Result<NodeId, NetError> {
        let node = self.net.add_node(host)?;
        self.ues += 1;
        let cfg = LinkConfig::new(
            self.params.delay_ms,
            self.params.loss_prob,
            self.params.seed.wrapping_add(self.ues),
        )?;
        self.net.connect(node, self.pcscf, cfg)?;
        Ok(node)
    }

    fn forward(&mut self, from: NodeId, to: NodeId, msg: &SipMessage) {
        match serialize_message(msg) {
            Ok(wire) => {
                let now = self.net.now();
                if let Err(e) = self.net.send(from, to, wire, now) {
                    log::warn!("{} cannot forward: {e}", self.net.name(from));
                }
            }
            Err(e) => log::warn!("unserializable message dropped: {e}"),
        }
    }

    /// Run the proxy or registrar logic for a packet that reached a core
    /// node. Packets for UEs are ignored here.
    fn handle(&mut self, d: &Delivery) {
        if d.to != self.pcscf && d.to != self.scscf {
            return;
        }
        let msg = match parse_message(&d.payload) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("{} discards unparsable packet: {e}", self.net.name(d.to));
                return;
            }
        };
        let (own, own_host) = if d.to == self.pcscf {
            (self.pcscf, PCSCF_HOST)
        } else {
            (self.scscf, SCSCF_HOST)
        };

        if !msg.is_request() {
            match route_response(own_host, &msg) {
                Ok((out, next)) => match self.net.node(&next) {
                    Some(node) => self.forward(own, node, &out),
                    None => log::debug!("no node {next} for response"),
                },
                Err(e) => log::debug!("{own_host}: {e}"),
            }
            return;
        }

        let routed = match route_request(own_host, &msg) {
            Ok(m) => m,
            Err(refusal) => {
                self.forward(own, d.from, &refusal);
                return;
            }
        };
        if own == self.pcscf {
            self.forward(own, self.scscf, &routed);
            return;
        }
        let now = self.net.now();
        self.core.tick(now);
        for resp in self.core.dispatch(&routed, now) {
            match route_response(SCSCF_HOST, &resp) {
                Ok((out, _)) => self.forward(own, self.pcscf, &out),
                Err(e) => log::warn!("registrar produced unroutable response: {e}"),
            }
        }
    }

    /// Dispatch every event at or before `t`, then move the clock to `t`.
    pub fn run_until(&mut self, t: SimTime) {
        while self.net.next_event_at().is_some_and(|at| at <= t) {
            if let Some(Occurrence::Delivered(d)) = self.net.step() {
                self.handle(&d);
            }
        }
        self.net.advance_clock(t);
        self.core.tick(self.net.now());
    }

    /// Dispatch until nothing is pending.
    pub fn settle(&mut self) {
        while let Some(occ) = self.net.step() {
            if let Occurrence::Delivered(d) = occ {
                self.handle(&d);
            }
        }
    }

    fn ue_node(&self, ue: &UeAgent) -> Result<NodeId, NetError> {
        self.net.node(&ue.host).ok_or_else(|| NetError::NoRoute {
            from: ue.host.clone(),
            to: PCSCF_HOST.to_owned(),
        })
    }

    /// Send `req` reliably from the UE and run the world until its
    /// transaction completes or times out.
    pub fn transact(&mut self, ue: &mut UeAgent, req: SipMessage) -> Result<SipMessage, FlowError> {
        let method = req.method().expect("request");
        let node = self.ue_node(ue)?;
        let txn = self.net.send_reliable(node, self.pcscf, req)?;
        loop {
            match self.net.step() {
                Some(Occurrence::Delivered(d)) if d.completed == Some(txn) => {
                    let resp = parse_message(&d.payload).expect("matched responses parse");
                    ue.exchanges.push(Exchange {
                        method,
                        txn: Some(txn),
                        status: resp.status(),
                    });
                    return Ok(resp);
                }
                Some(Occurrence::Delivered(d)) => self.handle(&d),
                Some(Occurrence::TimedOut { txn: t, .. }) if t == txn => break,
                Some(Occurrence::TimedOut { .. }) => {}
                None => break,
            }
        }
        ue.exchanges.push(Exchange {
            method,
            txn: Some(txn),
            status: None,
        });
        Err(FlowError::TimedOut { method })
    }

    /// REGISTER, answer the 401, and expect 200; returns the granted
    /// expiry in seconds. One resync round is allowed if the ISIM reports a
    /// stale SQN.
    pub fn register(&mut self, ue: &mut UeAgent, expires: u32) -> Result<u32, FlowError> {
        let req = ue.register_request(expires, None);
        let mut resp = self.transact(ue, req)?;
        for round in 0..3 {
            match resp.status() {
                Some(200) => {
                    let granted = resp.headers.get("Expires").and_then(|e| e.parse().ok());
                    return Ok(granted.unwrap_or(expires));
                }
                Some(401) if round < 2 => {
                    let auth = ue.answer_challenge(&resp).ok_or(FlowError::BadChallenge)?;
                    let req = ue.register_request(expires, Some(&auth));
                    resp = self.transact(ue, req)?;
                }
                _ => break,
            }
        }
        Err(FlowError::Rejected {
            method: Method::Register,
            status: resp.status().unwrap_or_default(),
        })
    }

    pub fn invite(&mut self, ue: &mut UeAgent, target: SipUri) -> Result<(), FlowError> {
        let req = ue.invite_request(target);
        let resp = self.transact(ue, req)?;
        match resp.status() {
            Some(200) => {
                let ack = ue.ack_request().expect("dialog set by invite_request");
                let node = self.ue_node(ue)?;
                let now = self.net.now();
                self.net.send(node, self.pcscf, serialize_message(&ack).expect("valid ACK"), now)?;
                ue.exchanges.push(Exchange {
                    method: Method::Ack,
                    txn: None,
                    status: None,
                });
                Ok(())
            }
            status => {
                ue.dialog = None;
                Err(FlowError::Rejected {
                    method: Method::Invite,
                    status: status.unwrap_or_default(),
                })
            }
        }
    }

    pub fn bye(&mut self, ue: &mut UeAgent) -> Result<(), FlowError> {
        let req = ue.bye_request().ok_or(FlowError::NoDialog)?;
        let resp = self.transact(ue, req)?;
        ue.dialog = None;
        match resp.status() {
            Some(200) => Ok(()),
            status => Err(FlowError::Rejected {
                method: Method::Bye,
                status: status.unwrap_or_default(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aka::{SecretKey, Sqn};
    use crate::hss::{Role, Subscriber};
    use crate::ims::SessionState;
    use crate::netsim::Disposition;

    const K: [u8; 16] = [0x42; 16];

    fn hss() -> HssStore {
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
        hss
    }

    fn setup(params: NetParams, k: [u8; 16]) -> (World, UeAgent) {
        let mut world = World::new(hss(), params).unwrap();
        world.add_ue("ue1.kau.example").unwrap();
        let ue = UeAgent::new(
            "ue1.kau.example",
            "s1001@ims.kau.example",
            "sip:s1001@ims.kau.example".parse().unwrap(),
            SecretKey::new(k),
        );
        (world, ue)
    }

    #[test]
    fn register_invite_bye_over_lossless_links() {
        let (mut world, mut ue) = setup(NetParams::default(), K);
        world.register(&mut ue, 3600).unwrap();
        assert_eq!(ue.trail(), ["REGISTER 401", "REGISTER 200"]);
        world.invite(&mut ue, "sip:mls@ims.kau.example".parse().unwrap()).unwrap();
        world.settle();
        let call_id = ue.dialog.as_ref().unwrap().call_id.clone();
        assert_eq!(world.core.session(&call_id).unwrap().state, SessionState::Confirmed);
        world.bye(&mut ue).unwrap();
        assert_eq!(world.core.session(&call_id).unwrap().state, SessionState::Terminated);
        assert_eq!(
            ue.trail(),
            ["REGISTER 401", "REGISTER 200", "INVITE 200", "ACK", "BYE 200"]
        );
        // A round trip is 4 hops: UE->P, P->S, S->P, P->UE. Two REGISTER
        // round trips, INVITE, a one-way ACK and BYE.
        let trace = world.net.trace();
        assert_eq!(trace.len(), 4 + 4 + 4 + 2 + 4);
        assert!(trace.iter().all(|e| e.disposition == Disposition::Delivered));
    }

    #[test]
    fn wrong_key_is_refused() {
        let (mut world, mut ue) = setup(NetParams::default(), [0x43; 16]);
        let err = world.register(&mut ue, 3600).unwrap_err();
        assert!(matches!(err, FlowError::Rejected { status: 403, .. }), "{err}");
    }

    #[test]
    fn stale_isim_resyncs() {
        let (mut world, mut ue) = setup(NetParams::default(), K);
        ue.last_sqn = Sqn::new(500).unwrap();
        world.register(&mut ue, 3600).unwrap();
        assert_eq!(ue.trail(), ["REGISTER 401", "REGISTER 401", "REGISTER 200"]);
        assert_eq!(ue.last_sqn.value(), 502);
    }

    #[test]
    fn invite_before_register_is_forbidden() {
        let (mut world, mut ue) = setup(NetParams::default(), K);
        let err = world.invite(&mut ue, "sip:mls@ims.kau.example".parse().unwrap()).unwrap_err();
        assert!(matches!(err, FlowError::Rejected { status: 403, .. }));
        assert!(ue.dialog.is_none());
    }

    #[test]
    fn registration_survives_loss() {
        let params = NetParams {
            delay_ms: 10,
            loss_prob: 0.3,
            seed: 9,
        };
        let (mut world, mut ue) = setup(params, K);
        world.register(&mut ue, 3600).unwrap();
        assert!(world.net.trace().iter().any(|e| e.disposition == Disposition::Dropped));
    }

    #[test]
    fn total_loss_times_out_after_seven_attempts() {
        let params = NetParams {
            delay_ms: 10,
            loss_prob: 1.0,
            seed: 1,
        };
        let (mut world, mut ue) = setup(params, K);
        let err = world.register(&mut ue, 3600).unwrap_err();
        assert!(matches!(err, FlowError::TimedOut { method: Method::Register }));
        let txn = world.net.transaction(ue.exchanges[0].txn.unwrap());
        assert_eq!(txn.sent_at, [0, 500, 1500, 3500, 7500, 15500, 31500]);
        assert_eq!(txn.finished_at, Some(63_500));
    }

    #[test]
    fn binding_lapses_with_simulated_time() {
        let (mut world, mut ue) = setup(NetParams::default(), K);
        world.register(&mut ue, 60).unwrap();
        let start = world.now();
        world.run_until(start + 59_000);
        assert!(world.core.hss.is_registered(&ue.impu, world.now()));
        world.run_until(start + 61_000);
        assert!(!world.core.hss.is_registered(&ue.impu, world.now()));
        assert_eq!(world.core.hss.bindings().count(), 0);
    }
}
