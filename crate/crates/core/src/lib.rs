// SPDX-License-Identifier: Apache-2.0

//! Energy measurement of scientific workflows from RAPL counters.

pub mod accounting;
pub mod counter;
pub mod sampler;
pub mod signal;
pub mod trace;
pub mod sim;
pub mod orchestrator;
