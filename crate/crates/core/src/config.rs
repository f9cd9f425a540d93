use std::path::PathBuf;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learning::Term;
use crate::world::NetParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data_dir: PathBuf,
    pub http_port: u32,
    pub sim_seed: u64,
    pub link_delay_ms: u64,
    pub link_loss: f64,
    pub term_start: DateTime<Utc>,
    pub add_drop_deadline: DateTime<Utc>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data_dir: PathBuf::from("fixtures/data"),
            http_port: 8080,
            sim_seed: 42,
            link_delay_ms: 10,
            link_loss: 0.0,
            term_start: Utc.with_ymd_and_hms(2026, 9, 6, 0, 0, 0).unwrap(),
            add_drop_deadline: Utc.with_ymd_and_hms(2026, 9, 17, 23, 59, 59).unwrap(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("http_port {0} is not a valid TCP port")]
    BadPort(u32),
    #[error("link_loss {0} is outside [0, 1]")]
    BadLoss(f64),
    #[error("add_drop_deadline is before term_start")]
    DeadlineBeforeTerm,
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=65535).contains(&self.http_port) {
            return Err(ConfigError::BadPort(self.http_port));
        }
        if !(0.0..=1.0).contains(&self.link_loss) {
            return Err(ConfigError::BadLoss(self.link_loss));
        }
        if self.add_drop_deadline < self.term_start {
            return Err(ConfigError::DeadlineBeforeTerm);
        }
        Ok(())
    }

    pub fn net_params(&self) -> NetParams {
        NetParams {
            delay_ms: self.link_delay_ms,
            loss_prob: self.link_loss,
            seed: self.sim_seed,
        }
    }

    pub fn term(&self) -> Term {
        Term {
            start: self.term_start,
            add_drop_deadline: self.add_drop_deadline,
        }
    }
}
