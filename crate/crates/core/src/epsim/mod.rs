//! Ground-truth electrophysiology: Aliev-Panfilov propagation on the mesh
//! graph, sparse sensor observations, and multi-subject datasets.

mod bank;
mod model;
mod observe;
mod simulate;

pub use bank::{make_subject_bank, DatasetSpec, ScarConfig, ScarRegion, SensorSpec, StimulusSpec, Subject, SubjectBank};
pub use model::{ap_rhs, ApParams, TissueField};
pub use observe::{observe, sensor_layout, Observation};
pub use simulate::{activation_frames, simulate, stimulus_at, SimParams, SimulationRecord, Stimulus, STABILITY_LIMIT, U_MAX, U_MIN};
