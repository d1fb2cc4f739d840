//! Deep asset-liability management for a runoff portfolio.
//!
//! A monthly balance sheet is rolled forward along simulated yield-curve and
//! equity paths. A stack of per-month feed-forward policies is trained by
//! differentiating a terminal-equity objective through whole episodes, and
//! compared against a static benchmark on held-out scenarios.

pub mod balance_sheet;
pub mod cli;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod pipeline;
pub mod scenarios;
pub mod strategies;
pub mod termstructure;
pub mod training;
