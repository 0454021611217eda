//! Diagonal SSM layers and the plain (tape-free) recurrence.

mod layer;
mod scan;

pub use layer::{dt_bias_init, inverse_softplus, AnySsm, S4Params, SsmLayer, SsmLayerParams, StepCoeffs};
pub use scan::{discretize, s4_scan, s6_scan, scan, Discretized, ScanHooks, ScanTrace};
