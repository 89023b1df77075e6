//! Multi-seed experiment campaigns, their ledger and the recipe search.

pub mod autoresearch;
pub mod ledger;
pub mod runner;

pub use ledger::{Ledger, RunRecord, RunStatusTag};
pub use runner::{run_campaign, run_compute_matched, run_pair, run_single, CampaignSpec, ExperimentConfig, Recipe};
