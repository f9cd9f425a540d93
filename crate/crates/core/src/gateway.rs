//! JSON gateway. Each login embeds a fresh UE in the simulated network and
//! runs a real AKA registration through the IMS core; the session token is
//! only good while that registration is bound in the HSS.
//!
//! Transport-agnostic: the HTTP server hands [`ApiRequest`]s to
//! [`Gateway::handle`] and writes back the [`ApiResponse`].
//!
//! | method | path | action |
//! |--------|------|--------|
//! | POST   | /session | login, body `{"impi", "k"}` |
//! | DELETE | /session | logout |
//! | GET    | /courses | list courses |
//! | POST   | /courses/{code}/enrollment | add |
//! | DELETE | /courses/{code}/enrollment | drop |
//! | GET    | /courses/{code}/materials | materials |
//! | POST   | /courses/{code}/materials | faculty posts a material |
//! | GET    | /courses/{code}/assignments | assignments with `overdue` |
//! | POST   | /courses/{code}/assignments | faculty posts an assignment |
//! | GET    | /events?from=&to= | calendar window (default: next 7 days) |
//! | GET    | /buildings?q=&lat=&lon= | building search |
//! | GET    | /metrics/releases | release report |
//! | POST   | /admin/subscribers | provision a subscriber |
//!
//! Errors are `{"error": "<Name>"}`: 401 missing or dead session, 403 role
//! denied or login refused, 404 unknown route or course, 409 enrollment
//! rule violations, 422 malformed input.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Duration, Utc};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::aka::{SecretKey, Sqn};
use crate::hss::{HssError, HssStore, Role, Subscriber};
use crate::learning::{
    authorize, Action, Assignment, FixedLocations, GeoPoint, LearningError, LearningStore, LocationProvider, Material,
};
use crate::metrics::{render_report, trend_check, ReleaseRecord};
use crate::netsim::{NetError, NodeId, SimTime};
use crate::odus::{MockOdus, OdusBridge, SyncOp};
use crate::rng::SplitMix64;
use crate::sip::SipUri;
use crate::ue::UeAgent;
use crate::world::{FlowError, NetParams, World};

pub const SESSION_HEADER: &str = "X-Session";
pub const REGISTER_EXPIRES_S: u32 = 3600;
const TOKEN_SALT: u64 = 0x746f_6b65_6e73_2121;
const ODUS_SALT: u64 = 0x6f64_7573_2d6d_6f63;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Get,
    Post,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiRequest {
    pub verb: Verb,
    pub path: String,
    pub query: Vec<(String, String)>,
    pub token: Option<String>,
    pub body: Vec<u8>,
}

impl ApiRequest {
    pub fn new(verb: Verb, path: &str) -> Self {
        ApiRequest {
            verb,
            path: path.to_owned(),
            query: Vec::new(),
            token: None,
            body: Vec::new(),
        }
    }

    pub fn get(path: &str) -> Self {
        Self::new(Verb::Get, path)
    }

    pub fn post(path: &str) -> Self {
        Self::new(Verb::Post, path)
    }

    pub fn delete(path: &str) -> Self {
        Self::new(Verb::Delete, path)
    }

    pub fn token(mut self, token: &str) -> Self {
        self.token = Some(token.to_owned());
        self
    }

    pub fn query(mut self, name: &str, value: &str) -> Self {
        self.query.push((name.to_owned(), value.to_owned()));
        self
    }

    pub fn json(mut self, body: Value) -> Self {
        self.body = body.to_string().into_bytes();
        self
    }

    fn param(&self, name: &str) -> Option<&str> {
        self.query.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    fn ok(status: u16, body: Value) -> Self {
        ApiResponse { status, body }
    }

    fn error(status: u16, name: &str) -> Self {
        ApiResponse {
            status,
            body: json!({ "error": name }),
        }
    }

    pub fn error_name(&self) -> Option<&str> {
        self.body.get("error").and_then(Value::as_str)
    }
}

fn learning_error(e: &LearningError) -> ApiResponse {
    let status = match e {
        LearningError::UnknownCourse(_) => 404,
        LearningError::InvalidRange | LearningError::InvalidData(_) => 422,
        _ => 409,
    };
    ApiResponse::error(status, e.name())
}

#[derive(Debug, Clone)]
pub struct Session {
    pub token: String,
    pub impi: String,
    pub student_id: String,
    pub roles: BTreeSet<Role>,
    pub established_at: DateTime<Utc>,
    pub ue_node: NodeId,
    ue: UeAgent,
    refresh_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoginError {
    /// `Some(status)` for a SIP rejection, `None` for a transaction timeout.
    AuthRejected(Option<u16>),
    BadKey,
}

pub struct GatewayInit {
    pub hss: HssStore,
    pub learning: LearningStore,
    pub releases: Vec<ReleaseRecord>,
    pub params: NetParams,
    pub odus_failure_prob: f64,
    pub locations: FixedLocations,
}

pub struct Gateway {
    world: World,
    learning: LearningStore,
    releases: Vec<ReleaseRecord>,
    odus: OdusBridge<MockOdus>,
    locations: FixedLocations,
    sessions: HashMap<String, Session>,
    /// ISIM state survives across logins of the same identity.
    isim_sqn: HashMap<String, Sqn>,
    tokens: SplitMix64,
    issued: BTreeSet<String>,
    ue_count: u64,
    last_trail: Vec<String>,
}

impl Gateway {
    pub fn new(init: GatewayInit) -> Result<Gateway, NetError> {
        let mut learning = init.learning;
        for sub in init.hss.subscribers() {
            if sub.roles.contains(&Role::Student) {
                learning.add_student(&sub.student_id);
            }
        }
        let seed = init.params.seed;
        Ok(Gateway {
            world: World::new(init.hss, init.params)?,
            learning,
            releases: init.releases,
            odus: OdusBridge::new(MockOdus::new(init.odus_failure_prob, seed ^ ODUS_SALT)),
            locations: init.locations,
            sessions: HashMap::new(),
            isim_sqn: HashMap::new(),
            tokens: SplitMix64::new(seed ^ TOKEN_SALT),
            issued: BTreeSet::new(),
            ue_count: 0,
            last_trail: Vec::new(),
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn learning(&self) -> &LearningStore {
        &self.learning
    }

    pub fn odus(&self) -> &OdusBridge<MockOdus> {
        &self.odus
    }

    /// Exchanges of the most recent login or logout, e.g. `REGISTER 401`.
    pub fn last_sip_trail(&self) -> &[String] {
        &self.last_trail
    }

    pub fn session(&self, token: &str) -> Option<&Session> {
        self.sessions.get(token)
    }

    pub fn trace_dump(&self) -> String {
        self.world.net.dump(self.world.net.trace())
    }

    /// A long-running server turns tracing off once startup is logged.
    pub fn set_tracing(&mut self, on: bool) {
        self.world.net.set_tracing(on);
    }

    /// Simulated time as a calendar instant; simulation time 0 is the term
    /// start.
    pub fn instant(&self) -> DateTime<Utc> {
        self.learning.term().start + Duration::milliseconds(self.world.now() as i64)
    }

    /// Run the simulation forward to `t`, re-registering each session when
    /// 80% of its granted expiry has elapsed.
    pub fn advance_to(&mut self, t: SimTime) {
        loop {
            let due = self
                .sessions
                .values()
                .filter(|s| s.refresh_at <= t)
                .map(|s| (s.refresh_at, s.token.clone()))
                .min();
            let Some((at, token)) = due else {
                break;
            };
            self.world.run_until(at.max(self.world.now()));
            let session = self.sessions.get_mut(&token).expect("listed above");
            match self.world.register(&mut session.ue, REGISTER_EXPIRES_S) {
                Ok(granted) => {
                    session.refresh_at = self.world.now() + refresh_delay(granted);
                    self.isim_sqn.insert(session.impi.clone(), session.ue.last_sqn);
                }
                Err(e) => {
                    log::warn!("refresh for {} failed: {e}", session.impi);
                    self.isim_sqn.insert(session.impi.clone(), session.ue.last_sqn);
                    // The binding will lapse and the session with it.
                    session.refresh_at = SimTime::MAX;
                }
            }
        }
        self.world.run_until(t.max(self.world.now()));
    }

    fn new_token(&mut self) -> String {
        loop {
            let mut bytes = [0u8; 16];
            self.tokens.fill_bytes(&mut bytes);
            let token = hex::encode(bytes);
            if self.issued.insert(token.clone()) {
                return token;
            }
        }
    }

    pub fn login(&mut self, impi: &str, k_hex: &str) -> Result<Session, LoginError> {
        let k = SecretKey::from_hex(k_hex).map_err(|_| LoginError::BadKey)?;
        let (impu, student_id, roles) = match self.world.core.hss.lookup_by_impi(impi) {
            Some(sub) => (sub.impus[0].clone(), sub.student_id.clone(), sub.roles.clone()),
            // Unknown identities still go to the network, which refuses them.
            None => match format!("sip:{impi}").parse::<SipUri>() {
                Ok(uri) => (uri, String::new(), BTreeSet::new()),
                Err(_) => return Err(LoginError::AuthRejected(Some(403))),
            },
        };
        self.ue_count += 1;
        let host = format!("ue{}.kau.example", self.ue_count);
        let node = self
            .world
            .add_ue(&host)
            .expect("fresh UE host names never collide");
        let mut ue = UeAgent::new(&host, impi, impu, k);
        ue.last_sqn = self.isim_sqn.get(impi).copied().unwrap_or(Sqn::ZERO);

        let outcome = self.world.register(&mut ue, REGISTER_EXPIRES_S);
        self.isim_sqn.insert(impi.to_owned(), ue.last_sqn);
        self.last_trail = ue.trail();
        let granted = match outcome {
            Ok(g) => g,
            Err(FlowError::Rejected { status, .. }) => return Err(LoginError::AuthRejected(Some(status))),
            Err(_) => return Err(LoginError::AuthRejected(None)),
        };
        let session = Session {
            token: self.new_token(),
            impi: impi.to_owned(),
            student_id,
            roles,
            established_at: self.instant(),
            ue_node: node,
            ue,
            refresh_at: self.world.now() + refresh_delay(granted),
        };
        self.sessions.insert(session.token.clone(), session.clone());
        Ok(session)
    }

    /// A token is live iff it was issued and its UE is still bound.
    fn live_session(&mut self, token: Option<&str>) -> Option<Session> {
        let token = token?;
        let now = self.world.now();
        let s = self.sessions.get(token)?;
        let bound = self
            .world
            .core
            .hss
            .has_live_binding(&s.ue.impu, &s.ue.contact(), now);
        if bound {
            Some(s.clone())
        } else {
            self.sessions.remove(token);
            None
        }
    }

    pub fn logout(&mut self, token: &str) -> Result<(), &'static str> {
        let session = self.live_session(Some(token)).ok_or("UnknownToken")?;
        let mut s = self.sessions.remove(&session.token).expect("live");
        let before = s.ue.exchanges.len();
        let outcome = self.world.register(&mut s.ue, 0);
        self.isim_sqn.insert(s.impi.clone(), s.ue.last_sqn);
        self.last_trail = s.ue.trail().split_off(before);
        if let Err(e) = outcome {
            // The token is dead either way; the binding will lapse on expiry.
            log::warn!("deregistration of {} failed: {e}", s.impi);
        }
        Ok(())
    }

    pub fn handle(&mut self, req: &ApiRequest) -> ApiResponse {
        let segments: Vec<&str> = req.path.trim_matches('/').split('/').collect();
        use Verb::*;
        match (req.verb, segments.as_slice()) {
            (Post, ["session"]) => self.post_session(req),
            (Delete, ["session"]) => match req.token.as_deref().map(|t| self.logout(t)) {
                Some(Ok(())) => ApiResponse::ok(200, json!({ "logged_out": true })),
                _ => ApiResponse::error(401, "UnknownToken"),
            },
            (Get, ["courses"]) => self.gated(req, Action::ReadCourses, |gw, s| gw.list_courses(s)),
            (Post, ["courses", code, "enrollment"]) => {
                self.gated(req, Action::EnrollSelf, |gw, s| gw.enroll(s, code))
            }
            (Delete, ["courses", code, "enrollment"]) => {
                self.gated(req, Action::DropSelf, |gw, s| gw.drop_enrollment(s, code))
            }
            (Get, ["courses", code, "materials"]) => self.gated(req, Action::ReadCourses, |gw, _| {
                match gw.learning.get_materials(code) {
                    Ok(m) => ApiResponse::ok(200, json!(m)),
                    Err(e) => learning_error(&e),
                }
            }),
            (Post, ["courses", code, "materials"]) => self.gated(req, Action::PostContent, |gw, _| {
                match serde_json::from_slice::<Material>(&req.body) {
                    Ok(m) => match gw.learning.post_material(code, m.clone()) {
                        Ok(()) => ApiResponse::ok(201, json!(m)),
                        Err(e) => learning_error(&e),
                    },
                    Err(_) => ApiResponse::error(422, "MalformedBody"),
                }
            }),
            (Get, ["courses", code, "assignments"]) => self.gated(req, Action::ReadCourses, |gw, _| {
                match gw.learning.list_assignments(code, gw.instant()) {
                    Ok(a) => ApiResponse::ok(200, json!(a)),
                    Err(e) => learning_error(&e),
                }
            }),
            (Post, ["courses", code, "assignments"]) => self.gated(req, Action::PostContent, |gw, _| {
                match serde_json::from_slice::<Assignment>(&req.body) {
                    Ok(a) => match gw.learning.post_assignment(code, a.clone()) {
                        Ok(()) => ApiResponse::ok(201, json!(a)),
                        Err(e) => learning_error(&e),
                    },
                    Err(_) => ApiResponse::error(422, "MalformedBody"),
                }
            }),
            (Get, ["events"]) => self.gated(req, Action::ReadEvents, |gw, s| gw.events(s, req)),
            (Get, ["buildings"]) => self.gated(req, Action::ReadBuildings, |gw, s| gw.buildings(s, req)),
            (Get, ["metrics", "releases"]) => self.gated(req, Action::ReadMetrics, |gw, _| gw.releases()),
            (Post, ["admin", "subscribers"]) => self.gated(req, Action::Provision, |gw, _| gw.provision(req)),
            (
                _,
                ["session"]
                | ["courses"]
                | ["courses", _, "enrollment" | "materials" | "assignments"]
                | ["events"]
                | ["buildings"]
                | ["metrics", "releases"]
                | ["admin", "subscribers"],
            ) => ApiResponse::error(405, "MethodNotAllowed"),
            _ => ApiResponse::error(404, "NotFound"),
        }
    }

    fn gated(
        &mut self,
        req: &ApiRequest,
        action: Action,
        f: impl FnOnce(&mut Gateway, &Session) -> ApiResponse,
    ) -> ApiResponse {
        let Some(session) = self.live_session(req.token.as_deref()) else {
            return ApiResponse::error(401, "Unauthorized");
        };
        if !authorize(&session.roles, action) {
            return ApiResponse::error(403, "Forbidden");
        }
        f(self, &session)
    }

    fn post_session(&mut self, req: &ApiRequest) -> ApiResponse {
        #[derive(Deserialize)]
        struct Login {
            impi: String,
            k: String,
        }
        let Ok(body) = serde_json::from_slice::<Login>(&req.body) else {
            return ApiResponse::error(422, "MalformedBody");
        };
        match self.login(&body.impi, &body.k) {
            Ok(s) => ApiResponse::ok(
                201,
                json!({
                    "token": s.token,
                    "impi": s.impi,
                    "student_id": s.student_id,
                    "roles": s.roles,
                    "established_at": s.established_at,
                    "sip_trail": self.last_trail,
                }),
            ),
            Err(LoginError::BadKey) => ApiResponse::error(422, "MalformedKey"),
            Err(LoginError::AuthRejected(status)) => ApiResponse::ok(
                403,
                json!({
                    "error": "AuthRejected",
                    "sip_status": status.map_or(json!("timeout"), |s| json!(s)),
                    "sip_trail": self.last_trail,
                }),
            ),
        }
    }

    fn list_courses(&self, s: &Session) -> ApiResponse {
        let courses: Vec<Value> = self
            .learning
            .courses()
            .map(|c| {
                json!({
                    "code": c.code,
                    "title": c.title,
                    "capacity": c.capacity,
                    "enrolled_count": self.learning.enrolled_count(&c.code),
                    "enrolled": self.learning.is_enrolled(&s.student_id, &c.code),
                    "schedule": c.schedule,
                })
            })
            .collect();
        ApiResponse::ok(200, json!(courses))
    }

    fn sync(&mut self, op: SyncOp, student: &str, code: &str) {
        self.odus.record(op, student, code);
        if let Err(e) = self.odus.reconcile() {
            log::warn!("campus sync deferred: {e}");
        }
    }

    fn enroll(&mut self, s: &Session, code: &str) -> ApiResponse {
        let now = self.instant();
        match self.learning.add_course(&s.student_id, code, now) {
            Ok(e) => {
                self.sync(SyncOp::Add, &s.student_id, code);
                ApiResponse::ok(201, json!(e))
            }
            Err(e) => learning_error(&e),
        }
    }

    fn drop_enrollment(&mut self, s: &Session, code: &str) -> ApiResponse {
        let now = self.instant();
        match self.learning.drop_course(&s.student_id, code, now) {
            Ok(()) => {
                self.sync(SyncOp::Drop, &s.student_id, code);
                ApiResponse::ok(200, json!({ "dropped": code }))
            }
            Err(e) => learning_error(&e),
        }
    }

    fn events(&self, s: &Session, req: &ApiRequest) -> ApiResponse {
        let parse = |name: &str| -> Result<Option<DateTime<Utc>>, ()> {
            req.param(name).map(|v| v.parse::<DateTime<Utc>>().map_err(|_| ())).transpose()
        };
        let (Ok(from), Ok(to)) = (parse("from"), parse("to")) else {
            return ApiResponse::error(422, "MalformedTimestamp");
        };
        let from = from.unwrap_or_else(|| self.instant());
        let to = to.unwrap_or(from + Duration::days(7));
        match self.learning.upcoming_events(&s.student_id, from, to) {
            Ok(evs) => ApiResponse::ok(200, json!(evs)),
            Err(e) => learning_error(&e),
        }
    }

    fn buildings(&self, s: &Session, req: &ApiRequest) -> ApiResponse {
        let coord = |name: &str| req.param(name).map(|v| v.parse::<f64>());
        let pos = match (coord("lat"), coord("lon")) {
            (Some(Ok(lat)), Some(Ok(lon))) => GeoPoint::new(lat, lon),
            (None, None) => self.locations.position(&s.student_id),
            _ => None,
        };
        let Some(pos) = pos else {
            return ApiResponse::error(422, "MalformedPosition");
        };
        let hits: Vec<Value> = self
            .learning
            .locate_building(req.param("q").unwrap_or(""), pos)
            .into_iter()
            .map(|(b, d)| {
                json!({
                    "id": b.id,
                    "number": b.number,
                    "name": b.name,
                    "lat": b.lat,
                    "lon": b.lon,
                    "distance_m": d,
                })
            })
            .collect();
        ApiResponse::ok(200, json!(hits))
    }

    fn releases(&self) -> ApiResponse {
        let violations: Vec<Value> = match trend_check(&self.releases) {
            Ok(v) => v
                .into_iter()
                .map(|v| json!({ "series": v.series, "release": v.release }))
                .collect(),
            Err(_) => Vec::new(),
        };
        ApiResponse::ok(
            200,
            json!({
                "releases": self.releases,
                "report": render_report(&self.releases),
                "trend_ok": self.releases.len() >= 2 && violations.is_empty(),
                "violations": violations,
            }),
        )
    }

    fn provision(&mut self, req: &ApiRequest) -> ApiResponse {
        let Ok(sub) = serde_json::from_slice::<Subscriber>(&req.body) else {
            return ApiResponse::error(422, "MalformedBody");
        };
        let student = sub.roles.contains(&Role::Student).then(|| sub.student_id.clone());
        let impi = sub.impi.clone();
        match self.world.core.hss.provision(sub) {
            Ok(()) => {
                if let Some(id) = student {
                    self.learning.add_student(&id);
                }
                ApiResponse::ok(201, json!({ "impi": impi }))
            }
            Err(HssError::DuplicateIdentity(_)) => ApiResponse::error(409, "DuplicateIdentity"),
            Err(_) => ApiResponse::error(422, "InvalidSubscriber"),
        }
    }

    /// Sessions by token, for inspection.
    pub fn sessions(&self) -> BTreeMap<&str, &Session> {
        self.sessions.iter().map(|(k, v)| (k.as_str(), v)).collect()
    }
}

fn refresh_delay(granted_s: u32) -> SimTime {
    u64::from(granted_s) * 800
}
