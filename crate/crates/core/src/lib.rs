//! Open-pit mine fleet dispatch: a deterministic discrete-event haulage
//! simulator, the classic rule-based dispatchers, and a policy-gradient
//! trainer with time-delta-corrected advantage estimation and adaptive
//! teacher-policy guidance.

pub mod cli;
pub mod dispatchers;
pub mod obs;
pub mod policy;
pub mod reward;
pub mod scenario;
pub mod sim;
pub mod trainer;
