//! Central-difference validation of the autodiff adjoints.
//!
//! Each op is wrapped in a scalar objective `Σ w ⊙ op(inputs)` with a fixed random `w`,
//! so every output element contributes a distinct upstream gradient.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;

/// Every differentiable op, including both broadcast forms of `add` and `mul`.
pub const OPS: [&str; 14] = [
    "matmul",
    "matmul_nt",
    "add",
    "add_broadcast",
    "mul",
    "mul_broadcast",
    "scale",
    "gelu",
    "silu",
    "rms_norm",
    "embedding",
    "attention",
    "cross_entropy",
    "sum",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Elements whose analytic gradient is below this magnitude are not compared.
    pub skip_below: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { step: 1e-5, tolerance: 1e-4, skip_below: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub compared: usize,
    pub max_rel_err: f64,
    pub failures: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.compared > 0
    }
}

/// A randomly drawn instance: differentiable inputs plus whatever integer data the op needs.
struct Instance {
    inputs: Vec<Tensor<f64>>,
    ids: Vec<usize>,
    dims: [usize; 3],
}

fn normal(r: &mut impl Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(r)).collect()).expect("shape matches")
}

fn draw(op: &str, r: &mut impl Rng) -> Instance {
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    let mut ids = Vec::new();
    let mut dims = [0; 3];
    let inputs = match op {
        "matmul" => vec![normal(r, vec![m, k]), normal(r, vec![k, n])],
        "matmul_nt" => vec![normal(r, vec![2, m, k]), normal(r, vec![n, k])],
        "add" | "mul" => vec![normal(r, vec![m, k]), normal(r, vec![m, k])],
        "add_broadcast" | "mul_broadcast" => vec![normal(r, vec![m, n, k]), normal(r, vec![k])],
        "scale" | "gelu" | "silu" | "sum" => vec![normal(r, vec![m, k])],
        // A single feature normalizes to ±gain, leaving only an ε-sized gradient.
        "rms_norm" => vec![normal(r, vec![m, k + 1]), normal(r, vec![k + 1])],
        "embedding" => {
            ids = (0..n + 1).map(|_| r.random_range(0..m)).collect();
            vec![normal(r, vec![m, k])]
        }
        "attention" => {
            let (batch, seq, heads) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..3));
            let d = heads * r.random_range(1..4);
            dims = [batch, seq, heads];
            (0..3).map(|_| normal(r, vec![batch * seq, d])).collect()
        }
        "cross_entropy" => {
            let vocab = k + 1;
            ids = (0..m + 1).map(|_| r.random_range(0..vocab + 1)).collect();
            ids[0] = 0;
            vec![normal(r, vec![m + 1, vocab])]
        }
        other => panic!("unknown op {other}"),
    };
    Instance { inputs, ids, dims }
}

/// Apply `op` to the given leaves. Cross-entropy ignores targets equal to the vocab size.
fn apply(op: &str, g: &mut Graph<'_, f64>, x: &[Var], inst: &Instance) -> Result<Var> {
    Ok(match op {
        "matmul" => g.matmul(x[0], x[1])?,
        "matmul_nt" => g.matmul_nt(x[0], x[1])?,
        "add" | "add_broadcast" => g.add(x[0], x[1])?,
        "mul" | "mul_broadcast" => g.mul(x[0], x[1])?,
        "scale" => g.scale(x[0], -1.7),
        "gelu" => g.gelu(x[0]),
        "silu" => g.silu(x[0]),
        "sum" => g.sum(x[0]),
        "rms_norm" => g.rms_norm(x[0], x[1], 1e-6)?,
        "embedding" => g.embedding(x[0], &inst.ids)?,
        "attention" => {
            let [b, s, h] = inst.dims;
            g.causal_attention(x[0], x[1], x[2], b, s, h)?
        }
        "cross_entropy" => {
            let vocab = inst.inputs[0].last_dim();
            g.cross_entropy(x[0], &inst.ids, vocab)?
        }
        other => panic!("unknown op {other}"),
    })
}

fn objective(op: &str, inst: &Instance, weights: &Tensor<f64>, with_grad: bool) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut g = Graph::<f64>::new();
    let x: Vec<Var> = inst.inputs.iter().map(|t| if with_grad { g.input_with_grad(t.clone()) } else { g.input(t.clone()) }).collect();
    let y = apply(op, &mut g, &x, inst)?;
    let w = g.input(weights.clone());
    let prod = g.mul(y, w)?;
    let loss = g.sum(prod);
    let value = g.value(loss).item();
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    let shape_of = |t: &Tensor<f64>| Tensor::zeros(t.shape().to_vec());
    Ok((value, x.iter().zip(&inst.inputs).map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| shape_of(t))).collect()))
}

fn output_shape(op: &str, inst: &Instance) -> Result<Vec<usize>> {
    let mut g = Graph::<f64>::new();
    let x: Vec<Var> = inst.inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = apply(op, &mut g, &x, inst)?;
    Ok(g.value(y).shape().to_vec())
}

/// Check `op` on `instances` random draws.
pub fn check_op(op: &'static str, instances: usize, seed: u64, cfg: &CheckConfig) -> Result<OpCheck> {
    let mut r = rng::stream(seed, "gradcheck", &[OPS.iter().position(|o| *o == op).unwrap_or(99) as u64]);
    let mut report = OpCheck { op, instances, compared: 0, max_rel_err: 0.0, failures: 0 };
    for _ in 0..instances {
        let mut inst = draw(op, &mut r);
        let weights = normal(&mut r, output_shape(op, &inst)?);
        let (_, analytic) = objective(op, &inst, &weights, true)?;
        for (i, grad) in analytic.iter().enumerate() {
            for (j, &a) in grad.data().iter().enumerate() {
                if a.abs() < cfg.skip_below {
                    continue;
                }
                let orig = inst.inputs[i].data()[j];
                inst.inputs[i].data_mut()[j] = orig + cfg.step;
                let (plus, _) = objective(op, &inst, &weights, false)?;
                inst.inputs[i].data_mut()[j] = orig - cfg.step;
                let (minus, _) = objective(op, &inst, &weights, false)?;
                inst.inputs[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * cfg.step);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                report.compared += 1;
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= cfg.tolerance {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}

/// Run [`check_op`] on every op in [`OPS`].
pub fn check_all(instances: usize, seed: u64, cfg: &CheckConfig) -> Result<Vec<OpCheck>> {
    OPS.iter().map(|op| check_op(op, instances, seed, cfg)).collect()
}
