//! Student-facing services: course add/drop, course material and
//! assignments, the event calendar, building search, and the role matrix.
//!
//! All instants are UTC. Weekly lectures are expanded from the term start:
//! a slot on weekday `d` occurs on every date `>= term_start` that falls on
//! `d`, from `start_min` to `end_min` minutes past midnight.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, NaiveTime, Utc, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hss::Role;
use crate::jsonl::{self, JsonlError};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub day: Weekday,
    pub start_min: u16,
    pub end_min: u16,
    pub building_id: String,
    pub room: String,
}

impl Slot {
    /// Half-open overlap on the same weekday, so back-to-back slots are fine.
    pub fn overlaps(&self, other: &Slot) -> bool {
        self.day == other.day && self.start_min < other.end_min && other.start_min < self.end_min
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Material {
    pub id: String,
    pub title: String,
    pub href: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub id: String,
    pub title: String,
    pub due: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Course {
    pub code: String,
    pub title: String,
    pub capacity: u32,
    pub schedule: Vec<Slot>,
    #[serde(default)]
    pub materials: Vec<Material>,
    #[serde(default)]
    pub assignments: Vec<Assignment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enrollment {
    pub student_id: String,
    pub course_code: String,
    pub enrolled_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Option<GeoPoint> {
        ((-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon)).then_some(GeoPoint { lat, lon })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub id: String,
    pub number: String,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
}

impl Building {
    pub fn position(&self) -> GeoPoint {
        GeoPoint {
            lat: self.lat,
            lon: self.lon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Exam,
    Lecture,
    Homework,
    Enrollment,
    Social,
}

impl EventKind {
    pub fn is_global(self) -> bool {
        matches!(self, EventKind::Enrollment | EventKind::Social)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub id: String,
    pub kind: EventKind,
    pub title: String,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub course_code: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssignmentStatus {
    #[serde(flatten)]
    pub assignment: Assignment,
    pub overdue: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LearningError {
    #[error("unknown course {0}")]
    UnknownCourse(String),
    #[error("unknown student {0}")]
    UnknownStudent(String),
    #[error("add/drop deadline has passed")]
    DeadlinePassed,
    #[error("already enrolled in {0}")]
    AlreadyEnrolled(String),
    #[error("course {0} is full")]
    CourseFull(String),
    #[error("schedule conflicts with {0}")]
    ScheduleConflict(String),
    #[error("not enrolled in {0}")]
    NotEnrolled(String),
    #[error("window start is after its end")]
    InvalidRange,
    #[error("invalid data: {0}")]
    InvalidData(String),
}

impl LearningError {
    /// Variant name, used verbatim as the API error code.
    pub fn name(&self) -> &'static str {
        match self {
            LearningError::UnknownCourse(_) => "UnknownCourse",
            LearningError::UnknownStudent(_) => "UnknownStudent",
            LearningError::DeadlinePassed => "DeadlinePassed",
            LearningError::AlreadyEnrolled(_) => "AlreadyEnrolled",
            LearningError::CourseFull(_) => "CourseFull",
            LearningError::ScheduleConflict(_) => "ScheduleConflict",
            LearningError::NotEnrolled(_) => "NotEnrolled",
            LearningError::InvalidRange => "InvalidRange",
            LearningError::InvalidData(_) => "InvalidData",
        }
    }
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("{file}: {source}")]
    Format {
        file: String,
        #[source]
        source: JsonlError,
    },
    #[error("{file}: {source}")]
    Invalid {
        file: String,
        #[source]
        source: LearningError,
    },
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub start: DateTime<Utc>,
    pub add_drop_deadline: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    EnrollSelf,
    DropSelf,
    ReadCourses,
    ReadEvents,
    ReadBuildings,
    ReadMetrics,
    PostContent,
    Provision,
}

impl Action {
    pub const ALL: [Action; 8] = [
        Action::EnrollSelf,
        Action::DropSelf,
        Action::ReadCourses,
        Action::ReadEvents,
        Action::ReadBuildings,
        Action::ReadMetrics,
        Action::PostContent,
        Action::Provision,
    ];
}

fn role_allows(role: Role, action: Action) -> bool {
    use Action::*;
    match role {
        Role::Student => matches!(action, EnrollSelf | DropSelf | ReadCourses | ReadEvents | ReadBuildings),
        Role::Faculty => matches!(action, ReadCourses | ReadEvents | ReadBuildings | PostContent),
        Role::Admin => true,
    }
}

/// Allowed iff any of the user's roles allows the action.
pub fn authorize(roles: &BTreeSet<Role>, action: Action) -> bool {
    roles.iter().any(|r| role_allows(*r, action))
}

pub fn haversine(p: GeoPoint, q: GeoPoint) -> f64 {
    let (phi1, phi2) = (p.lat.to_radians(), q.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (q.lon - p.lon).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.clamp(0.0, 1.0).sqrt().asin()
}

/// Source of a student's current position.
pub trait LocationProvider {
    fn position(&self, student_id: &str) -> Option<GeoPoint>;
}

/// Positions from a fixed table.
#[derive(Debug, Clone, Default)]
pub struct FixedLocations(pub BTreeMap<String, GeoPoint>);

impl LocationProvider for FixedLocations {
    fn position(&self, student_id: &str) -> Option<GeoPoint> {
        self.0.get(student_id).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LocationRow {
    student_id: String,
    lat: f64,
    lon: f64,
}

impl FixedLocations {
    /// `locations.jsonl`: `{"student_id", "lat", "lon"}` per line.
    pub fn load(dir: &Path) -> Result<Self, FixtureError> {
        let text = std::fs::read_to_string(dir.join(LOCATIONS_FILE)).map_err(|source| FixtureError::Io {
            file: LOCATIONS_FILE.to_owned(),
            source,
        })?;
        let rows: Vec<LocationRow> = jsonl::parse(&text).map_err(|source| FixtureError::Format {
            file: LOCATIONS_FILE.to_owned(),
            source,
        })?;
        let mut map = BTreeMap::new();
        for r in rows {
            let p = GeoPoint::new(r.lat, r.lon).ok_or_else(|| FixtureError::Invalid {
                file: LOCATIONS_FILE.to_owned(),
                source: invalid(format!("position of {} out of range", r.student_id)),
            })?;
            map.insert(r.student_id, p);
        }
        Ok(FixedLocations(map))
    }

    pub fn to_jsonl(&self) -> String {
        let rows: Vec<LocationRow> = self
            .0
            .iter()
            .map(|(id, p)| LocationRow {
                student_id: id.clone(),
                lat: p.lat,
                lon: p.lon,
            })
            .collect();
        jsonl::render(&rows)
    }
}

#[derive(Debug, Clone)]
pub struct LearningStore {
    term: Term,
    courses: BTreeMap<String, Course>,
    buildings: BTreeMap<String, Building>,
    events: BTreeMap<String, Event>,
    students: BTreeSet<String>,
    enrollments: BTreeMap<(String, String), Enrollment>,
}

fn invalid(msg: impl Into<String>) -> LearningError {
    LearningError::InvalidData(msg.into())
}

impl LearningStore {
    pub fn new(term: Term) -> Result<Self, LearningError> {
        if term.add_drop_deadline < term.start {
            return Err(invalid("add/drop deadline precedes term start"));
        }
        Ok(LearningStore {
            term,
            courses: BTreeMap::new(),
            buildings: BTreeMap::new(),
            events: BTreeMap::new(),
            students: BTreeSet::new(),
            enrollments: BTreeMap::new(),
        })
    }

    pub fn term(&self) -> Term {
        self.term
    }

    pub fn add_student(&mut self, student_id: &str) {
        self.students.insert(student_id.to_owned());
    }

    pub fn has_student(&self, student_id: &str) -> bool {
        self.students.contains(student_id)
    }

    pub fn insert_course(&mut self, course: Course) -> Result<(), LearningError> {
        if course.capacity < 1 {
            return Err(invalid(format!("{}: capacity must be at least 1", course.code)));
        }
        if let Some(s) = course.schedule.iter().find(|s| s.start_min >= s.end_min || s.end_min > 24 * 60) {
            return Err(invalid(format!("{}: bad slot {}-{}", course.code, s.start_min, s.end_min)));
        }
        if self.courses.contains_key(&course.code) {
            return Err(invalid(format!("duplicate course {}", course.code)));
        }
        self.courses.insert(course.code.clone(), course);
        Ok(())
    }

    pub fn insert_building(&mut self, b: Building) -> Result<(), LearningError> {
        if GeoPoint::new(b.lat, b.lon).is_none() {
            return Err(invalid(format!("{}: coordinates out of range", b.id)));
        }
        if self.buildings.contains_key(&b.id) {
            return Err(invalid(format!("duplicate building {}", b.id)));
        }
        self.buildings.insert(b.id.clone(), b);
        Ok(())
    }

    pub fn insert_event(&mut self, e: Event) -> Result<(), LearningError> {
        if e.start > e.end {
            return Err(invalid(format!("{}: ends before it starts", e.id)));
        }
        match (&e.course_code, e.kind.is_global()) {
            (None, false) => return Err(invalid(format!("{}: {:?} event needs a course", e.id, e.kind))),
            (Some(code), _) if !self.courses.contains_key(code) => {
                return Err(LearningError::UnknownCourse(code.clone()))
            }
            _ => {}
        }
        if self.events.contains_key(&e.id) {
            return Err(invalid(format!("duplicate event {}", e.id)));
        }
        self.events.insert(e.id.clone(), e);
        Ok(())
    }

    pub fn courses(&self) -> impl Iterator<Item = &Course> {
        self.courses.values()
    }

    pub fn course(&self, code: &str) -> Result<&Course, LearningError> {
        self.courses
            .get(code)
            .ok_or_else(|| LearningError::UnknownCourse(code.to_owned()))
    }

    pub fn buildings(&self) -> impl Iterator<Item = &Building> {
        self.buildings.values()
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.events.values()
    }

    pub fn enrolled_count(&self, code: &str) -> usize {
        self.enrollments.keys().filter(|(_, c)| c == code).count()
    }

    pub fn enrollments(&self) -> impl Iterator<Item = &Enrollment> {
        self.enrollments.values()
    }

    pub fn enrollments_of<'a>(&'a self, student_id: &'a str) -> impl Iterator<Item = &'a Enrollment> + 'a {
        self.enrollments
            .range((student_id.to_owned(), String::new())..)
            .take_while(move |((s, _), _)| s == student_id)
            .map(|(_, e)| e)
    }

    pub fn is_enrolled(&self, student_id: &str, code: &str) -> bool {
        self.enrollments
            .contains_key(&(student_id.to_owned(), code.to_owned()))
    }

    /// Checks run in a fixed order and the first failure wins; the deadline
    /// is checked before anything else.
    pub fn add_course(&mut self, student_id: &str, code: &str, now: DateTime<Utc>) -> Result<Enrollment, LearningError> {
        if now > self.term.add_drop_deadline {
            return Err(LearningError::DeadlinePassed);
        }
        if !self.students.contains(student_id) {
            return Err(LearningError::UnknownStudent(student_id.to_owned()));
        }
        let course = self.course(code)?;
        if self.is_enrolled(student_id, code) {
            return Err(LearningError::AlreadyEnrolled(code.to_owned()));
        }
        if self.enrolled_count(code) >= course.capacity as usize {
            return Err(LearningError::CourseFull(code.to_owned()));
        }
        for e in self.enrollments_of(student_id) {
            let other = &self.courses[&e.course_code];
            if course.schedule.iter().any(|s| other.schedule.iter().any(|o| s.overlaps(o))) {
                return Err(LearningError::ScheduleConflict(other.code.clone()));
            }
        }
        let enrollment = Enrollment {
            student_id: student_id.to_owned(),
            course_code: code.to_owned(),
            enrolled_at: now,
        };
        self.enrollments
            .insert((student_id.to_owned(), code.to_owned()), enrollment.clone());
        Ok(enrollment)
    }

    pub fn drop_course(&mut self, student_id: &str, code: &str, now: DateTime<Utc>) -> Result<(), LearningError> {
        if now > self.term.add_drop_deadline {
            return Err(LearningError::DeadlinePassed);
        }
        if !self.students.contains(student_id) {
            return Err(LearningError::UnknownStudent(student_id.to_owned()));
        }
        self.course(code)?;
        self.enrollments
            .remove(&(student_id.to_owned(), code.to_owned()))
            .map(|_| ())
            .ok_or_else(|| LearningError::NotEnrolled(code.to_owned()))
    }

    pub fn get_materials(&self, code: &str) -> Result<&[Material], LearningError> {
        Ok(&self.course(code)?.materials)
    }

    pub fn list_assignments(&self, code: &str, now: DateTime<Utc>) -> Result<Vec<AssignmentStatus>, LearningError> {
        Ok(self
            .course(code)?
            .assignments
            .iter()
            .map(|a| AssignmentStatus {
                assignment: a.clone(),
                overdue: a.due < now,
            })
            .collect())
    }

    pub fn post_material(&mut self, code: &str, m: Material) -> Result<(), LearningError> {
        let course = self
            .courses
            .get_mut(code)
            .ok_or_else(|| LearningError::UnknownCourse(code.to_owned()))?;
        if course.materials.iter().any(|x| x.id == m.id) {
            return Err(invalid(format!("duplicate material {}", m.id)));
        }
        course.materials.push(m);
        Ok(())
    }

    pub fn post_assignment(&mut self, code: &str, a: Assignment) -> Result<(), LearningError> {
        let course = self
            .courses
            .get_mut(code)
            .ok_or_else(|| LearningError::UnknownCourse(code.to_owned()))?;
        if course.assignments.iter().any(|x| x.id == a.id) {
            return Err(invalid(format!("duplicate assignment {}", a.id)));
        }
        course.assignments.push(a);
        Ok(())
    }

    fn lectures(&self, course: &Course, from: DateTime<Utc>, to: DateTime<Utc>) -> Vec<Event> {
        let mut out = Vec::new();
        let first = from.max(self.term.start).date_naive();
        let last = to.date_naive();
        let mut day = first;
        while day <= last {
            for slot in course.schedule.iter().filter(|s| s.day == day.weekday()) {
                let midnight = day.and_time(NaiveTime::MIN).and_utc();
                let start = midnight + Duration::minutes(slot.start_min.into());
                if start < self.term.start || start < from || start > to {
                    continue;
                }
                out.push(Event {
                    id: format!("lecture:{}:{}", course.code, start.format("%Y%m%dT%H%M")),
                    kind: EventKind::Lecture,
                    title: format!("{} ({} {})", course.title, slot.building_id, slot.room),
                    start,
                    end: midnight + Duration::minutes(slot.end_min.into()),
                    course_code: Some(course.code.clone()),
                });
            }
            day = day.succ_opt().expect("date in range");
        }
        out
    }

    /// Global events, events tied to the student's courses, and their
    /// weekly lectures, with `start` in `[from, to]`, ordered by start then id.
    pub fn upcoming_events(
        &self,
        student_id: &str,
        from: DateTime<Utc>,
        to: DateTime<Utc>,
    ) -> Result<Vec<Event>, LearningError> {
        if from > to {
            return Err(LearningError::InvalidRange);
        }
        if !self.students.contains(student_id) {
            return Err(LearningError::UnknownStudent(student_id.to_owned()));
        }
        let enrolled: BTreeSet<&str> = self.enrollments_of(student_id).map(|e| e.course_code.as_str()).collect();
        let mut out: Vec<Event> = self
            .events
            .values()
            .filter(|e| {
                e.kind.is_global() || e.course_code.as_deref().is_some_and(|c| enrolled.contains(c))
            })
            .filter(|e| from <= e.start && e.start <= to)
            .cloned()
            .collect();
        for code in &enrolled {
            out.extend(self.lectures(&self.courses[*code], from, to));
        }
        out.sort_by(|a, b| (a.start, &a.id).cmp(&(b.start, &b.id)));
        out.dedup_by(|a, b| a.id == b.id);
        Ok(out)
    }

    /// Buildings whose number or name contains `query` (case-insensitive),
    /// nearest first, ties broken by id.
    pub fn locate_building(&self, query: &str, from: GeoPoint) -> Vec<(Building, f64)> {
        let q = query.to_lowercase();
        let mut hits: Vec<(Building, f64)> = self
            .buildings
            .values()
            .filter(|b| b.number.to_lowercase().contains(&q) || b.name.to_lowercase().contains(&q))
            .map(|b| (b.clone(), haversine(from, b.position())))
            .collect();
        hits.sort_by(|(a, da), (b, db)| da.total_cmp(db).then_with(|| a.id.cmp(&b.id)));
        hits
    }

    /// Load `courses.jsonl`, `buildings.jsonl` and `events.jsonl` from `dir`.
    pub fn load_fixtures(&mut self, dir: &Path) -> Result<(), FixtureError> {
        fn read(dir: &Path, file: &str) -> Result<String, FixtureError> {
            std::fs::read_to_string(dir.join(file)).map_err(|source| FixtureError::Io {
                file: file.to_owned(),
                source,
            })
        }
        fn records<T: serde::de::DeserializeOwned>(dir: &Path, file: &str) -> Result<Vec<T>, FixtureError> {
            jsonl::parse(&read(dir, file)?).map_err(|source| FixtureError::Format {
                file: file.to_owned(),
                source,
            })
        }
        let wrap = |file: &str| {
            let file = file.to_owned();
            move |source| FixtureError::Invalid { file, source }
        };
        for c in records::<Course>(dir, COURSES_FILE)? {
            self.insert_course(c).map_err(wrap(COURSES_FILE))?;
        }
        for b in records::<Building>(dir, BUILDINGS_FILE)? {
            self.insert_building(b).map_err(wrap(BUILDINGS_FILE))?;
        }
        for e in records::<Event>(dir, EVENTS_FILE)? {
            self.insert_event(e).map_err(wrap(EVENTS_FILE))?;
        }
        Ok(())
    }

    /// Canonical fixture text, one entry per file name.
    pub fn dump_fixtures(&self) -> Vec<(&'static str, String)> {
        vec![
            (COURSES_FILE, jsonl::render(self.courses.values())),
            (BUILDINGS_FILE, jsonl::render(self.buildings.values())),
            (EVENTS_FILE, jsonl::render(self.events.values())),
        ]
    }
}

pub const COURSES_FILE: &str = "courses.jsonl";
pub const BUILDINGS_FILE: &str = "buildings.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const LOCATIONS_FILE: &str = "locations.jsonl";

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventKind::Exam => "exam",
            EventKind::Lecture => "lecture",
            EventKind::Homework => "homework",
            EventKind::Enrollment => "enrollment",
            EventKind::Social => "social",
        };
        f.write_str(s)
    }
}
