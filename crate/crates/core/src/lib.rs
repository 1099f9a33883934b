//! Autotuning of reservoir simulation numerical controls inside an ensemble
//! history-matching loop.

pub mod esmda;
pub mod logfeat;
pub mod oracle;
pub mod searchspace;
pub mod simkernel;
pub mod workflow;
