//! Scripted UE sessions, one command per line:
//!
//! ```text
//! # comment
//! register [expires]
//! invite [sip-uri]
//! bye
//! wait <ms>
//! ```
//!
//! `invite` with no target calls the learning service AS.

use thiserror::Error;

use crate::sip::SipUri;
use crate::ue::UeAgent;
use crate::world::{FlowError, World, IMS_DOMAIN};

pub const DEFAULT_EXPIRES: u32 = 3600;

pub fn service_uri() -> SipUri {
    SipUri::new(Some("mls"), IMS_DOMAIN)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Register { expires: u32 },
    Invite { target: SipUri },
    Bye,
    Wait { ms: u64 },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

pub fn parse_script(text: &str) -> Result<Vec<(usize, Command)>, ScriptError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |message: String| ScriptError { line, message };
        let words: Vec<&str> = body.split_whitespace().collect();
        let cmd = match words.as_slice() {
            ["register"] => Command::Register {
                expires: DEFAULT_EXPIRES,
            },
            ["register", e] => Command::Register {
                expires: e.parse().map_err(|_| err(format!("bad expires {e:?}")))?,
            },
            ["invite"] => Command::Invite {
                target: service_uri(),
            },
            ["invite", uri] => Command::Invite {
                target: uri.parse().map_err(|e| err(format!("{e}")))?,
            },
            ["bye"] => Command::Bye,
            ["wait", ms] => Command::Wait {
                ms: ms.parse().map_err(|_| err(format!("bad duration {ms:?}")))?,
            },
            _ => return Err(err(format!("unknown command {body:?}"))),
        };
        out.push((line, cmd));
    }
    Ok(out)
}

#[derive(Debug)]
pub struct ScriptReport {
    pub trail: Vec<String>,
    /// The first failing command and why; later commands are not run.
    pub failure: Option<(usize, FlowError)>,
}

pub fn run_script(world: &mut World, ue: &mut UeAgent, commands: &[(usize, Command)]) -> ScriptReport {
    let mut failure = None;
    for (line, cmd) in commands {
        let result = match cmd {
            Command::Register { expires } => world.register(ue, *expires).map(|_| ()),
            Command::Invite { target } => world.invite(ue, target.clone()),
            Command::Bye => world.bye(ue),
            Command::Wait { ms } => {
                let t = world.now() + ms;
                world.run_until(t);
                Ok(())
            }
        };
        if let Err(e) = result {
            failure = Some((*line, e));
            break;
        }
    }
    world.settle();
    ScriptReport {
        trail: ue.trail(),
        failure,
    }
}
