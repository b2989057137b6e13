//! Trial mechanics: success evaluation, the adaptive staircase used to
//! measure skill, and flow-probe scheduling.

mod probes;
mod staircase;
mod trial;

pub use probes::{schedule_probes, ProbeSchedule};
pub use staircase::{StaircaseEntry, StaircaseParams, StaircaseState};
pub use trial::{evaluate_trial, ForceTrace, TrialConfig, TrialEvent, TrialRecord, TrialStepper};
