//! Per-layer gradient-norm probe.
//!
//! For each layer ℓ the probe accumulates `g_ℓ = Σ_b ‖∇_{θ_ℓ} L(x_b)‖₂` over `B` probe
//! batches, where the norm is taken over the concatenation of every parameter tagged
//! ℓ. Layers are processed in chunks: while a chunk `[start, end)` is being probed only
//! its parameters are trainable, which bounds the adjoint state held at once. Every
//! chunk sees the same `B` batches, so the result does not depend on the chunk size.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

/// A model whose parameters are grouped into tagged layers and that can produce a
/// scalar loss for a batch.
pub trait LayeredModel<F: Real> {
    type Batch;

    fn n_layers(&self) -> usize;
    fn params(&self) -> &ParamStore<F>;
    fn params_mut(&mut self) -> &mut ParamStore<F>;
    fn batch_loss(&self, g: &mut Graph<'_, F>, batch: &Self::Batch) -> Result<Var>;

    /// Loss that may resume from the residual stream entering layer `resume.0`, and may
    /// report the residual entering layer `capture`.
    ///
    /// Models that cannot split their forward pass keep the default, which ignores
    /// `resume` and captures nothing; the probe then recomputes the full forward pass.
    fn batch_loss_resumable(
        &self,
        g: &mut Graph<'_, F>,
        batch: &Self::Batch,
        resume: Option<(usize, Tensor<F>)>,
        capture: Option<usize>,
    ) -> Result<(Var, Option<Var>)> {
        let _ = (resume, capture);
        Ok((self.batch_loss(g, batch)?, None))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub n_batches: usize,
    pub chunk_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { n_batches: 5, chunk_size: 8 }
    }
}

/// Raw accumulated norms, their sum-to-one normalization and the descending ranking.
///
/// Serializes as `{"layers": L, "g": [...], "normalized": [...], "ranking": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layers: usize,
    pub g: Vec<f64>,
    pub normalized: Vec<f64>,
    pub ranking: Vec<usize>,
}

impl ProbeReport {
    /// Build a report from raw norms. Ties rank the lower layer index first.
    pub fn from_norms(g: Vec<f64>) -> Self {
        let total: f64 = g.iter().sum();
        let normalized = if total > 0.0 { g.iter().map(|x| x / total).collect() } else { vec![0.0; g.len()] };
        let mut ranking: Vec<usize> = (0..g.len()).collect();
        ranking.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));
        ProbeReport { layers: g.len(), g, normalized, ranking }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn gradient_probe<F: Real, M: LayeredModel<F>>(model: &mut M, batches: &[M::Batch], config: &ProbeConfig) -> Result<ProbeReport> {
    let n_layers = model.n_layers();
    if n_layers == 0 {
        return Err(Error::config("cannot probe a model with zero layers"));
    }
    if config.n_batches == 0 || config.chunk_size == 0 {
        return Err(Error::config("probe needs n_batches >= 1 and chunk_size >= 1"));
    }
    if batches.len() < config.n_batches {
        return Err(Error::NotEnoughBatches { needed: config.n_batches, got: batches.len() });
    }
    let saved = model.params().trainable_flags();
    let result = probe_chunks(model, &batches[..config.n_batches], config.chunk_size, n_layers);
    let params = model.params_mut();
    params.restore_trainable_flags(&saved);
    params.zero_grads();
    result.map(ProbeReport::from_norms)
}

/// Layers below a chunk are frozen, so their contribution to the forward pass is
/// identical across chunks. Each chunk therefore records the residual entering the
/// next chunk, and the next chunk resumes from it instead of re-running the prefix.
fn probe_chunks<F: Real, M: LayeredModel<F>>(model: &mut M, batches: &[M::Batch], chunk: usize, n_layers: usize) -> Result<Vec<f64>> {
    let mut g = vec![0.0; n_layers];
    let mut residuals: Vec<Option<Tensor<F>>> = vec![None; batches.len()];
    for start in (0..n_layers).step_by(chunk) {
        let end = (start + chunk).min(n_layers);
        let params = model.params_mut();
        params.set_all_trainable(false);
        params.set_trainable(&(start..end).collect::<BTreeSet<_>>(), true)?;

        for (batch, residual) in batches.iter().zip(residuals.iter_mut()) {
            let params = model.params();
            let mut graph = Graph::with_params(params);
            let resume = residual.take().map(|r| (start, r));
            let capture = (end < n_layers).then_some(end);
            let (loss, captured) = model.batch_loss_resumable(&mut graph, batch, resume, capture)?;
            *residual = captured.map(|v| graph.value(v).clone());
            let grads = graph.backward(loss)?;
            let mut sum_sq = vec![0.0; end - start];
            for (id, grad) in grads.params() {
                if let Some(l) = params.get(id).layer_id.filter(|l| (start..end).contains(l)) {
                    sum_sq[l - start] += grad.sum_sq().as_f64();
                }
            }
            for (acc, s) in g[start..end].iter_mut().zip(sum_sq) {
                *acc += s.sqrt();
            }
        }
    }
    Ok(g)
}

/// `probe / (probe + train)`.
pub fn probe_overhead_fraction(probe_time_s: f64, total_train_time_s: f64) -> Result<f64> {
    if !(probe_time_s > 0.0 && total_train_time_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "probe overhead needs positive times, got probe {probe_time_s}, train {total_train_time_s}"
        )));
    }
    Ok(probe_time_s / (probe_time_s + total_train_time_s))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `loss = sum(w1 · w0 · x)` over a column vector `x`; each weight is its own layer.
    struct LinearToy {
        params: ParamStore<f64>,
    }

    impl LinearToy {
        fn new(w0: [f64; 4], w1: [f64; 2]) -> Self {
            let mut params = ParamStore::new();
            params.push("w0", Tensor::from_f64([2, 2], &w0).unwrap(), Some(0), false);
            params.push("w1", Tensor::from_f64([1, 2], &w1).unwrap(), Some(1), false);
            LinearToy { params }
        }
    }

    impl LayeredModel<f64> for LinearToy {
        type Batch = [f64; 2];

        fn n_layers(&self) -> usize {
            2
        }
        fn params(&self) -> &ParamStore<f64> {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamStore<f64> {
            &mut self.params
        }
        fn batch_loss(&self, g: &mut Graph<'_, f64>, x: &[f64; 2]) -> Result<Var> {
            let w0 = g.param(self.params.find("w0").unwrap());
            let w1 = g.param(self.params.find("w1").unwrap());
            let xv = g.input(Tensor::from_f64([2, 1], x).unwrap());
            let h = g.matmul(w0, xv)?;
            let y = g.matmul(w1, h)?;
            Ok(g.sum(y))
        }
    }

    #[test]
    fn linear_toy_matches_closed_form() {
        let (w0, w1) = ([0.5, -1.0, 2.0, 0.25], [3.0, -0.5]);
        let batches = [[1.0, 2.0], [-0.5, 4.0], [3.0, 0.0]];
        let mut toy = LinearToy::new(w0, w1);
        let cfg = ProbeConfig { n_batches: 3, chunk_size: 1 };
        let report = gradient_probe(&mut toy, &batches, &cfg).unwrap();

        // dL/dW0 = w1ᵀ xᵀ  => ‖·‖ = ‖w1‖·‖x‖;  dL/dW1 = (W0 x)ᵀ => ‖·‖ = ‖W0 x‖.
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut want = [0.0, 0.0];
        for x in &batches {
            want[0] += norm(&w1) * norm(x);
            let h = [w0[0] * x[0] + w0[1] * x[1], w0[2] * x[0] + w0[3] * x[1]];
            want[1] += norm(&h);
        }
        for (l, w) in want.iter().enumerate() {
            assert!((report.g[l] - w).abs() <= 1e-10 * w, "layer {l}: {} vs {w}", report.g[l]);
        }
    }

    #[test]
    fn flags_restored_and_grads_zeroed() {
        let mut toy = LinearToy::new([1.0, 0.0, 0.0, 1.0], [1.0, 1.0]);
        let before = toy.params.trainable_flags();
        gradient_probe(&mut toy, &[[1.0, 1.0]], &ProbeConfig { n_batches: 1, chunk_size: 1 }).unwrap();
        assert_eq!(toy.params.trainable_flags(), before);
        assert!(toy.params.iter().all(|(_, p)| p.grad.max_abs() == 0.0));
    }

    #[test]
    fn too_few_batches() {
        let mut toy = LinearToy::new([1.0; 4], [1.0; 2]);
        let err = gradient_probe(&mut toy, &[[1.0, 1.0]], &ProbeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NotEnoughBatches { needed: 5, got: 1 }));
    }

    #[test]
    fn ranking_and_normalization() {
        let r = ProbeReport::from_norms(vec![1.0, 3.0, 3.0, 0.0]);
        assert_eq!(r.ranking, vec![1, 2, 0, 3]);
        assert!((r.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let json = r.to_json().unwrap();
        let keys: Vec<_> = ["\"layers\"", "\"g\"", "\"normalized\"", "\"ranking\""].iter().map(|k| json.find(k).unwrap()).collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn overhead_arithmetic() {
        assert!((probe_overhead_fraction(1.0, 99.0).unwrap() - 0.01).abs() < 1e-15);
        assert!(probe_overhead_fraction(1e-4, 1e6).unwrap() < 1.1e-10);
        assert!(probe_overhead_fraction(0.0, 1.0).is_err());
        assert!(probe_overhead_fraction(1.0, -1.0).is_err());
    }
}
