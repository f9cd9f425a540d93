//! Core of the IMS-based mobile learning platform.
//!
//! Layering follows the IMS split: [`netsim`] is the transport layer,
//! [`ims`] (with [`aka`] and [`hss`]) the control layer, and
//! [`learning`], [`odus`], [`metrics`] the service layer. [`gateway`] is the
//! web/business tier that ties a student session to an IMS registration.

pub mod aka;
pub mod config;
pub mod gateway;
pub mod hss;
pub mod ims;
pub mod jsonl;
pub mod learning;
pub mod metrics;
pub mod netsim;
pub mod odus;
pub mod rng;
pub mod script;
pub mod sip;
pub mod ue;
pub mod world;
