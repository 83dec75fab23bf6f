//! Cycle-level simulator for a data-parallel MAC accelerator that skips
//! ineffectual multiply-accumulates during training.
//!
//! The scheduler in [`sched`] picks up to one effectual pair per lane per
//! cycle from a small lookahead window; [`pe`] and [`tile`] build processing
//! elements and tiles on top of it, [`trainops`] and [`lower`] turn the three
//! training convolutions into operand streams, and [`energy`] turns event
//! counts into energy.

pub mod compress;
pub mod energy;
pub mod error;
pub mod experiment;
pub mod lower;
pub mod pe;
pub mod sched;
pub mod tensor;
pub mod tile;
pub mod synth;
pub mod trace;
pub mod trainops;

pub use error::{Error, Result};
