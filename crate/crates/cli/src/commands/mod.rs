// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod analyze;
pub mod causal;
pub mod eval;
pub mod extract;
pub mod report;
pub mod similarity;
