//! Pre-norm causal transformer with optional low-rank adapters.
//!
//! Initialization (all Gaussian, one ChaCha stream per parameter name):
//! token embedding std 1, position embedding std 0.5, block projections std
//! `1/sqrt(fan_in)`, output head std `0.5/sqrt(d_model)`, norm gains 1. Adapter `A`
//! matrices are drawn with std 0.02 and `B` starts at zero.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::data::{Batch, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::probe::LayeredModel;
use crate::rng;
use crate::select::{LoraPlan, LoraTargets};
use crate::tensor::{Real, Tensor};

pub const LORA_INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 12,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 32,
            max_seq: 16,
            seed: 0,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers < 2 {
            return fail(format!("n_layers {} < 2", self.n_layers));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size < 8 {
            return fail(format!("vocab_size {} < 8", self.vocab_size));
        }
        if self.d_ff == 0 || self.max_seq == 0 {
            return fail("d_ff and max_seq must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HostModule {
    Attention,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 6] = [Projection::Q, Projection::K, Projection::V, Projection::O, Projection::Up, Projection::Down];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
            Projection::Up => "up",
            Projection::Down => "down",
        }
    }

    pub fn host(self) -> HostModule {
        match self {
            Projection::Up | Projection::Down => HostModule::Mlp,
            _ => HostModule::Attention,
        }
    }

    pub fn targeted(self, t: &LoraTargets) -> bool {
        match self {
            Projection::Q => t.q,
            Projection::K => t.k,
            Projection::V => t.v,
            Projection::O => t.o,
            Projection::Up => t.up,
            Projection::Down => t.down,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone)]
struct Block {
    attn_norm: ParamId,
    mlp_norm: ParamId,
    proj: [ParamId; 6],
    adapters: [Option<usize>; 6],
}

/// Low-rank update `(alpha / r) · B·(A·x)` attached to one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `[r, d_in]`.
    pub a: ParamId,
    /// `[d_out, r]`.
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub projection: Projection,
    pub layer_id: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl LoraAdapter {
    pub fn host_module(&self) -> HostModule {
        self.projection.host()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerModel<F: Real = f64> {
    config: ModelConfig,
    params: ParamStore<F>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    final_norm: ParamId,
    head: ParamId,
    adapters: Vec<LoraAdapter>,
    plan: Option<LoraPlan>,
}

fn gaussian<F: Real>(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor<F> {
    let mut r = rng::stream(seed, name, &[]);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            F::of(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub fn build_model<F: Real>(config: &ModelConfig) -> Result<TransformerModel<F>> {
    TransformerModel::new(config)
}

impl<F: Real> TransformerModel<F> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (d, ff, seed) = (c.d_model, c.d_ff, c.seed);
        let mut params = ParamStore::new();
        let init = |params: &mut ParamStore<F>, name: String, shape: &[usize], std: f64, layer: Option<usize>| {
            let t = gaussian(seed, &name, shape, std);
            params.push(name, t, layer, false)
        };
        let tok_emb = init(&mut params, "tok_emb".into(), &[c.vocab_size, d], 1.0, None);
        let pos_emb = init(&mut params, "pos_emb".into(), &[c.max_seq, d], 0.5, None);
        let mut blocks = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let attn_norm = params.push(format!("layers.{l}.attn_norm"), Tensor::full([d], F::one()), Some(l), false);
            let mlp_norm = params.push(format!("layers.{l}.mlp_norm"), Tensor::full([d], F::one()), Some(l), false);
            let proj = Projection::ALL.map(|p| {
                let (out, inp) = match p {
                    Projection::Up => (ff, d),
                    Projection::Down => (d, ff),
                    _ => (d, d),
                };
                init(&mut params, format!("layers.{l}.{}", p.name()), &[out, inp], 1.0 / (inp as f64).sqrt(), Some(l))
            });
            blocks.push(Block { attn_norm, mlp_norm, proj, adapters: [None; 6] });
        }
        let final_norm = params.push("final_norm", Tensor::full([d], F::one()), None, false);
        let head = init(&mut params, "head".into(), &[c.vocab_size, d], 0.5 / (d as f64).sqrt(), None);
        Ok(TransformerModel { config: c.clone(), params, tok_emb, pos_emb, blocks, final_norm, head, adapters: Vec::new(), plan: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn plan(&self) -> Option<&LoraPlan> {
        self.plan.as_ref()
    }

    pub fn head(&self) -> ParamId {
        self.head
    }

    pub fn projection(&self, layer: usize, p: Projection) -> ParamId {
        self.blocks[layer].proj[p.index()]
    }

    pub fn is_adapter_param(&self, id: ParamId) -> bool {
        self.adapters.iter().any(|a| a.a == id || a.b == id)
    }

    /// SHA-256 over the base (non-adapter) parameters.
    pub fn base_digest(&self) -> String {
        let adapter_names: std::collections::HashSet<String> =
            self.adapters.iter().flat_map(|a| [self.params.get(a.a).name.clone(), self.params.get(a.b).name.clone()]).collect();
        self.params.digest_where(|p| !adapter_names.contains(&p.name))
    }

    /// Attach adapters to the targeted projections of every selected layer.
    ///
    /// Base parameters become frozen and adapter parameters trainable. `B` starts at
    /// zero, so logits are unchanged until training moves it.
    pub fn inject_lora(&mut self, plan: &LoraPlan) -> Result<()> {
        if self.plan.is_some() {
            return Err(Error::DuplicateInjection);
        }
        let plan = LoraPlan::new(plan.selected.clone(), plan.attn_rank, plan.mlp_rank, plan.alpha, plan.targets)?;
        if let Some(&bad) = plan.selected.iter().find(|&&l| l >= self.config.n_layers) {
            return Err(Error::UnknownLayer(bad));
        }
        self.params.set_all_trainable(false);
        for &l in &plan.selected {
            for p in Projection::ALL.into_iter().filter(|p| p.targeted(&plan.targets)) {
                let rank = match p.host() {
                    HostModule::Attention => plan.attn_rank,
                    HostModule::Mlp => plan.mlp_rank,
                };
                let shape = self.params.get(self.blocks[l].proj[p.index()]).value.shape().to_vec();
                let (d_out, d_in) = (shape[0], shape[1]);
                let a_name = format!("layers.{l}.{}.lora_a", p.name());
                let a_val = gaussian(self.config.seed, &a_name, &[rank, d_in], LORA_INIT_STD);
                let a = self.params.push(a_name, a_val, Some(l), true);
                let b = self.params.push(format!("layers.{l}.{}.lora_b", p.name()), Tensor::zeros([d_out, rank]), Some(l), true);
                self.blocks[l].adapters[p.index()] = Some(self.adapters.len());
                self.adapters.push(LoraAdapter { a, b, rank, alpha: plan.alpha, projection: p, layer_id: l, d_in, d_out });
            }
        }
        self.plan = Some(plan);
        Ok(())
    }

    /// Exact number of scalar parameters with `trainable == true`.
    pub fn count_trainable(&self) -> usize {
        self.params.count_trainable()
    }

    /// Closed form `Σ r·(d_in + d_out)` over the injected adapters.
    pub fn adapter_param_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::param_count).sum()
    }

    fn project(&self, g: &mut Graph<'_, F>, layer: usize, p: Projection, x: Var) -> Result<Var> {
        let block = &self.blocks[layer];
        let w = g.param(block.proj[p.index()]);
        let y = g.matmul_nt(x, w)?;
        let Some(ai) = block.adapters[p.index()] else { return Ok(y) };
        let ad = &self.adapters[ai];
        let (a, b) = (g.param(ad.a), g.param(ad.b));
        let down = g.matmul_nt(x, a)?;
        let up = g.matmul_nt(down, b)?;
        let scaled = g.scale(up, F::of(ad.scaling()));
        g.add(y, scaled)
    }

    /// Logits `[batch * seq, vocab]` for row-major `inputs` of `batch` sequences.
    pub fn forward(&self, g: &mut Graph<'_, F>, inputs: &[usize], batch: usize, seq: usize) -> Result<Var> {
        self.forward_from(g, inputs, batch, seq, None, None).map(|(logits, _)| logits)
    }

    /// Forward pass that may start from a precomputed residual stream and may report
    /// the residual entering layer `capture`.
    ///
    /// `resume = Some((layer, x))` skips the embeddings and layers below `layer`,
    /// feeding `x` (shape `[batch * seq, d_model]`) as a constant.
    fn forward_from(
        &self,
        g: &mut Graph<'_, F>,
        inputs: &[usize],
        batch: usize,
        seq: usize,
        resume: Option<(usize, Tensor<F>)>,
        capture: Option<usize>,
    ) -> Result<(Var, Option<Var>)> {
        let c = &self.config;
        if seq == 0 || seq > c.max_seq || inputs.len() != batch * seq {
            return Err(Error::ShapeMismatch { op: "forward", lhs: vec![inputs.len()], rhs: vec![batch, seq, c.max_seq] });
        }
        let (first, mut x) = match resume {
            Some((layer, residual)) => {
                if residual.shape() != [batch * seq, c.d_model] || layer > c.n_layers {
                    return Err(Error::ShapeMismatch {
                        op: "forward_from",
                        lhs: residual.shape().to_vec(),
                        rhs: vec![batch * seq, c.d_model],
                    });
                }
                (layer, g.input(residual))
            }
            None => {
                let tok_table = g.param(self.tok_emb);
                let tok = g.embedding(tok_table, inputs)?;
                let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
                let pos_table = g.param(self.pos_emb);
                let pos = g.embedding(pos_table, &positions)?;
                (0, g.add(tok, pos)?)
            }
        };
        let mut captured = None;
        for l in first..c.n_layers {
            if capture == Some(l) {
                captured = Some(x);
            }
            let gain = g.param(self.blocks[l].attn_norm);
            let h = g.rms_norm(x, gain, NORM_EPS)?;
            let q = self.project(g, l, Projection::Q, h)?;
            let k = self.project(g, l, Projection::K, h)?;
            let v = self.project(g, l, Projection::V, h)?;
            let att = g.causal_attention(q, k, v, batch, seq, c.n_heads)?;
            let o = self.project(g, l, Projection::O, att)?;
            x = g.add(x, o)?;

            let gain = g.param(self.blocks[l].mlp_norm);
            let h = g.rms_norm(x, gain, NORM_EPS)?;
            let u = self.project(g, l, Projection::Up, h)?;
            let act = g.activation(u, c.activation);
            let dn = self.project(g, l, Projection::Down, act)?;
            x = g.add(x, dn)?;
        }
        let gain = g.param(self.final_norm);
        let x = g.rms_norm(x, gain, NORM_EPS)?;
        let head = g.param(self.head);
        Ok((g.matmul_nt(x, head)?, captured))
    }

    /// Masked causal-LM cross-entropy for one batch.
    pub fn loss(&self, g: &mut Graph<'_, F>, batch: &Batch) -> Result<Var> {
        let logits = self.forward(g, &batch.inputs, batch.batch_size, batch.seq_len)?;
        g.cross_entropy(logits, &batch.targets, IGNORE_INDEX)
    }

    /// Logits without recording adjoint state.
    pub fn logits(&self, inputs: &[usize], batch: usize, seq: usize) -> Result<Tensor<F>> {
        let mut g = Graph::inference(&self.params);
        let out = self.forward(&mut g, inputs, batch, seq)?;
        Ok(g.value(out).clone())
    }
}

impl<F: Real> LayeredModel<F> for TransformerModel<F> {
    type Batch = Batch;

    fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    fn batch_loss(&self, g: &mut Graph<'_, F>, batch: &Batch) -> Result<Var> {
        self.loss(g, batch)
    }

    fn batch_loss_resumable(
        &self,
        g: &mut Graph<'_, F>,
        batch: &Batch,
        resume: Option<(usize, Tensor<F>)>,
        capture: Option<usize>,
    ) -> Result<(Var, Option<Var>)> {
        let (logits, captured) = self.forward_from(g, &batch.inputs, batch.batch_size, batch.seq_len, resume, capture)?;
        Ok((g.cross_entropy(logits, &batch.targets, IGNORE_INDEX)?, captured))
    }
}
