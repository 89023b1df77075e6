//! Top-k% layer selection and adapter plans.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::ProbeReport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Percentage of layers to keep, in (0, 100].
    pub percent: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { percent: 50.0 }
    }
}

impl SelectionConfig {
    pub fn new(percent: f64) -> Result<Self> {
        if !(percent > 0.0 && percent <= 100.0) {
            return Err(Error::config(format!("select percent {percent} outside (0, 100]")));
        }
        Ok(SelectionConfig { percent })
    }
}

/// `ceil(k·L/100)`, clamped to `[1, L]`.
///
/// A relative slack of 1e-9 absorbs representation error in `k` (so `k = 70, L = 10`
/// stays at 7 even if the product lands a hair above an integer).
pub fn selection_count(percent: f64, n_layers: usize) -> usize {
    let exact = percent * n_layers as f64 / 100.0;
    let count = (exact - exact.abs() * 1e-9).ceil() as usize;
    count.clamp(1, n_layers.max(1))
}

/// The first `ceil(k·L/100)` layers of the probe ranking, as a sorted set.
pub fn select_layers(report: &ProbeReport, config: &SelectionConfig, n_layers: usize) -> Result<BTreeSet<usize>> {
    if n_layers == 0 {
        return Err(Error::config("cannot select from a model with zero layers"));
    }
    SelectionConfig::new(config.percent)?;
    if report.layers != n_layers || report.ranking.len() != n_layers {
        return Err(Error::config(format!("probe report covers {} layers, model has {n_layers}", report.layers)));
    }
    let count = selection_count(config.percent, n_layers);
    Ok(report.ranking[..count].iter().copied().collect())
}

/// Which projections of a block receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoraTargets {
    pub q: bool,
    pub k: bool,
    pub v: bool,
    pub o: bool,
    pub up: bool,
    pub down: bool,
}

impl Default for LoraTargets {
    /// q, v, o attention projections and both MLP projections.
    fn default() -> Self {
        LoraTargets { q: true, k: false, v: true, o: true, up: true, down: true }
    }
}

impl LoraTargets {
    pub fn attention_only() -> Self {
        LoraTargets { up: false, down: false, ..Self::default() }
    }

    pub fn mlp_only() -> Self {
        LoraTargets { q: false, k: false, v: false, o: false, up: true, down: true }
    }

    pub fn any(&self) -> bool {
        self.q || self.k || self.v || self.o || self.up || self.down
    }

    pub fn any_attention(&self) -> bool {
        self.q || self.k || self.v || self.o
    }

    pub fn any_mlp(&self) -> bool {
        self.up || self.down
    }

    pub fn label(&self) -> &'static str {
        match (self.any_attention(), self.any_mlp()) {
            (true, true) => "attn+mlp",
            (true, false) => "attn",
            (false, true) => "mlp",
            (false, false) => "none",
        }
    }
}

/// Selected layers plus per-module-class ranks and the shared scaling numerator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPlan {
    pub selected: BTreeSet<usize>,
    pub attn_rank: usize,
    pub mlp_rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub targets: LoraTargets,
}

pub fn build_plan(selected: BTreeSet<usize>, attn_rank: usize, mlp_rank: usize, alpha: f64) -> Result<LoraPlan> {
    LoraPlan::new(selected, attn_rank, mlp_rank, alpha, LoraTargets::default())
}

impl LoraPlan {
    pub fn new(selected: BTreeSet<usize>, attn_rank: usize, mlp_rank: usize, alpha: f64, targets: LoraTargets) -> Result<Self> {
        if selected.is_empty() {
            return Err(Error::config("lora plan selects no layers"));
        }
        if attn_rank == 0 || mlp_rank == 0 {
            return Err(Error::config(format!("lora ranks must be >= 1 (attn {attn_rank}, mlp {mlp_rank})")));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::config(format!("lora alpha must be positive, got {alpha}")));
        }
        if !targets.any() {
            return Err(Error::config("lora plan targets no projection"));
        }
        Ok(LoraPlan { selected, attn_rank, mlp_rank, alpha, targets })
    }

    /// Adapters on every layer: the standard-LoRA baseline.
    pub fn all_layers(n_layers: usize, attn_rank: usize, mlp_rank: usize, alpha: f64, targets: LoraTargets) -> Result<Self> {
        Self::new((0..n_layers).collect(), attn_rank, mlp_rank, alpha, targets)
    }
}
