//! Deterministic synthetic instruction data.
//!
//! Every example is a templated prompt→response pair over a small grammar:
//!
//! ```text
//! [TASK] x_1 .. x_n [SEP] y_1 .. y_n [PAD]*
//! ```
//!
//! where `y = f_TASK(x)` is a copy, a reversal, or a pairwise sum modulo the payload
//! alphabet. Only the response tokens are scored; every other target is masked with
//! [`IGNORE_INDEX`]. All examples of a dataset share the same layout, so every
//! sequence contributes exactly `n` scored positions.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const TASK_COPY: usize = 2;
pub const TASK_REVERSE: usize = 3;
pub const TASK_MODADD: usize = 4;
/// First payload symbol; tokens below this are reserved.
pub const FIRST_SYMBOL: usize = 5;
pub const IGNORE_INDEX: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reverse,
    ModAdd,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Copy, Task::Reverse, Task::ModAdd];

    pub fn token(self) -> usize {
        match self {
            Task::Copy => TASK_COPY,
            Task::Reverse => TASK_REVERSE,
            Task::ModAdd => TASK_MODADD,
        }
    }

    /// Response for payload `x` (symbol indices in `0..alphabet`).
    pub fn respond(self, x: &[usize], alphabet: usize) -> Vec<usize> {
        match self {
            Task::Copy => x.to_vec(),
            Task::Reverse => x.iter().rev().copied().collect(),
            Task::ModAdd => (0..x.len()).map(|i| (x[i] + x[(i + 1) % x.len()]) % alphabet).collect(),
        }
    }
}

/// Which generator produces the training stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskGrammar {
    /// Uniform mixture of copy, reverse and modular-add.
    #[default]
    InstructMix,
    Copy,
    Reverse,
    ModAdd,
}

impl TaskGrammar {
    fn tasks(self) -> &'static [Task] {
        match self {
            TaskGrammar::InstructMix => &Task::ALL,
            TaskGrammar::Copy => &[Task::Copy],
            TaskGrammar::Reverse => &[Task::Reverse],
            TaskGrammar::ModAdd => &[Task::ModAdd],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Model input length; each raw sequence carries one extra token for the shifted target.
    pub seq_len: usize,
    pub task_grammar_id: TaskGrammar,
    pub vocab_size: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { seed: 0, n_train: 2048, n_eval: 128, seq_len: 16, task_grammar_id: TaskGrammar::InstructMix, vocab_size: 32 }
    }
}

/// Layout shared by every example of a given `seq_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub seq_len: usize,
    /// Payload and response length.
    pub n: usize,
}

impl Template {
    pub const MIN_SEQ_LEN: usize = 3;

    pub fn new(seq_len: usize) -> Result<Self> {
        if seq_len < Self::MIN_SEQ_LEN {
            return Err(Error::config(format!("seq_len {seq_len} is shorter than the minimum template length {}", Self::MIN_SEQ_LEN)));
        }
        Ok(Template { seq_len, n: (seq_len - 1) / 2 })
    }

    /// Number of tokens up to and including SEP.
    pub fn prompt_len(&self) -> usize {
        self.n + 2
    }

    pub fn render(&self, task: Task, x: &[usize], y: &[usize]) -> Vec<usize> {
        let mut tokens = Vec::with_capacity(self.seq_len + 1);
        tokens.push(task.token());
        tokens.extend(x.iter().map(|s| s + FIRST_SYMBOL));
        tokens.push(SEP);
        tokens.extend(y.iter().map(|s| s + FIRST_SYMBOL));
        tokens.resize(self.seq_len + 1, PAD);
        tokens
    }

    /// Whether the target at input position `t` (i.e. token `t + 1`) is a scored response token.
    pub fn scored(&self, t: usize) -> bool {
        (self.n + 1..=2 * self.n).contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub task: Task,
    /// `seq_len + 1` tokens.
    pub tokens: Vec<usize>,
}

/// A micro-batch: `batch_size` sequences of `seq_len` inputs with shifted, masked targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn from_examples(examples: &[&Example], template: &Template) -> Self {
        let seq_len = template.seq_len;
        let mut inputs = Vec::with_capacity(examples.len() * seq_len);
        let mut targets = Vec::with_capacity(examples.len() * seq_len);
        for ex in examples {
            inputs.extend_from_slice(&ex.tokens[..seq_len]);
            for t in 0..seq_len {
                targets.push(if template.scored(t) { ex.tokens[t + 1] } else { IGNORE_INDEX });
            }
        }
        Batch { inputs, targets, batch_size: examples.len(), seq_len }
    }

    pub fn scored_count(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE_INDEX).count()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub template: Template,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

/// Payload alphabet size for a vocabulary.
pub fn alphabet(vocab_size: usize) -> usize {
    vocab_size.saturating_sub(FIRST_SYMBOL)
}

pub(crate) fn sample_example<R: Rng>(rng: &mut R, task: Task, template: &Template, alphabet: usize) -> Example {
    let x: Vec<usize> = (0..template.n).map(|_| rng.random_range(0..alphabet)).collect();
    let y = task.respond(&x, alphabet);
    Example { task, tokens: template.render(task, &x, &y) }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let template = Template::new(spec.seq_len)?;
    if spec.vocab_size < 8 {
        return Err(Error::config(format!("vocab_size {} < 8", spec.vocab_size)));
    }
    if spec.n_train == 0 || spec.n_eval == 0 {
        return Err(Error::config("dataset needs at least one train and one eval example"));
    }
    let alphabet = alphabet(spec.vocab_size);
    let tasks = spec.task_grammar_id.tasks();
    let capacity = (alphabet as f64).powi(template.n as i32) * tasks.len() as f64;
    if capacity < (spec.n_train + spec.n_eval) as f64 * 1.5 {
        return Err(Error::config(format!(
            "grammar admits only {capacity} distinct sequences; too few for {} + {}",
            spec.n_train, spec.n_eval
        )));
    }

    let mut rng = rng::stream(spec.seed, "dataset", &[]);
    let mut seen = HashSet::new();
    let mut draw = |count: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let task = tasks[out.len() % tasks.len()];
            let ex = sample_example(rng, task, &template, alphabet);
            if seen.insert(ex.tokens.clone()) {
                out.push(ex);
            }
        }
        out
    };
    let train = draw(spec.n_train, &mut rng);
    let eval = draw(spec.n_eval, &mut rng);
    Ok(Dataset { spec: spec.clone(), template, train, eval })
}

impl Dataset {
    pub fn eval_batches(&self, batch_size: usize) -> Vec<Batch> {
        self.eval.chunks(batch_size.max(1)).map(|c| Batch::from_examples(&c.iter().collect::<Vec<_>>(), &self.template)).collect()
    }

    /// The seeded training stream: examples are visited in an order reshuffled every
    /// epoch, and consecutive micro-batches take consecutive slices of that order.
    pub fn stream(&self, batch_size: usize, seed: u64) -> DataStream<'_> {
        DataStream { data: self, batch_size, seed, epoch: 0, order: Vec::new(), cursor: 0 }
    }
}

pub struct DataStream<'a> {
    data: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl DataStream<'_> {
    fn next_index(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.data.train.len()).collect();
            self.order.shuffle(&mut rng::stream(self.seed, "data-order", &[self.epoch]));
            self.epoch += 1;
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn next_batch(&mut self) -> Batch {
        let idx: Vec<usize> = (0..self.batch_size).map(|_| self.next_index()).collect();
        let examples: Vec<&Example> = idx.iter().map(|&i| &self.data.train[i]).collect();
        Batch::from_examples(&examples, &self.data.template)
    }
}

impl Iterator for DataStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec { n_train: 200, n_eval: 50, ..Default::default() }
    }

    #[test]
    fn same_spec_same_first_batch() {
        let a = generate_dataset(&spec()).unwrap();
        let b = generate_dataset(&spec()).unwrap();
        assert_eq!(a.stream(8, 3).next_batch(), b.stream(8, 3).next_batch());
        assert_eq!(a.train, b.train);
    }

    #[test]
    fn targets_in_range_or_ignored() {
        let d = generate_dataset(&spec()).unwrap();
        for batch in d.stream(16, 1).take(20) {
            assert!(batch.targets.iter().all(|&t| t == IGNORE_INDEX || t < d.spec.vocab_size));
            assert!(batch.inputs.iter().all(|&t| t < d.spec.vocab_size));
            assert_eq!(batch.scored_count(), 16 * d.template.n);
        }
    }

    #[test]
    fn train_and_eval_disjoint() {
        let d = generate_dataset(&spec()).unwrap();
        let train: HashSet<_> = d.train.iter().map(|e| &e.tokens).collect();
        assert!(d.eval.iter().all(|e| !train.contains(&e.tokens)));
        assert_eq!(train.len(), d.train.len());
    }

    #[test]
    fn too_short_sequence_rejected() {
        let s = DatasetSpec { seq_len: 2, ..spec() };
        assert!(generate_dataset(&s).is_err());
    }

    #[test]
    fn responses_follow_grammar() {
        assert_eq!(Task::Reverse.respond(&[1, 2, 3], 5), vec![3, 2, 1]);
        assert_eq!(Task::ModAdd.respond(&[1, 2, 4], 5), vec![3, 1, 0]);
        let tpl = Template::new(8).unwrap();
        let toks = tpl.render(Task::Copy, &[0, 1, 2], &[0, 1, 2]);
        assert_eq!(toks, vec![TASK_COPY, 5, 6, 7, SEP, 5, 6, 7, PAD]);
        let scored: Vec<_> = (0..8).filter(|&t| tpl.scored(t)).collect();
        assert_eq!(scored, vec![4, 5, 6]);
    }

    #[test]
    fn consecutive_micro_batches_concatenate() {
        let d = generate_dataset(&spec()).unwrap();
        let mut small = d.stream(4, 9);
        let mut big = d.stream(8, 9);
        let (a, b) = (small.next_batch(), small.next_batch());
        let whole = big.next_batch();
        assert_eq!([a.inputs, b.inputs].concat(), whole.inputs);
    }
}
