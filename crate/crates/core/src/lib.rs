//! Deterministic simulator for self-adaptive microservice control.
//!
//! The crate models a small cluster API ([`store`]), a TeaStore-like workload
//! ([`sim`]), a level-based controller runtime ([`engine`]), the low-power and
//! blue-green operators ([`operators`]), an architecture-based MAPE-K loop
//! ([`rainbow`]), per-request context layers ([`layers`]) and a scenario
//! harness with fault injection ([`harness`]).

pub mod clock;
pub mod engine;
pub mod harness;
pub mod layers;
pub mod operators;
pub mod rainbow;
pub mod request;
pub mod rng;
pub mod sim;
pub mod store;
pub mod trace;
