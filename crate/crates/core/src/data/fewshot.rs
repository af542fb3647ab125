use rand::seq::index::sample;
use rand::Rng;

use super::task::{Task, TaskExample};
use super::vocab::{tokenize, X, Y};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FewShotSet {
    pub examples: Vec<TaskExample>,
    pub definition: Option<String>,
}

impl FewShotSet {
    pub fn new(examples: Vec<TaskExample>, definition: Option<String>) -> Self {
        Self { examples, definition }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// `X def` (optional) followed by `X input Y target` per example, limited to
/// `max_len` tokens. Overflow drops whole trailing examples; if not even the
/// first piece fits, that piece is cut on the right.
pub fn format_fewshot(set: &FewShotSet, max_len: usize) -> Result<Vec<usize>> {
    if set.examples.is_empty() && set.definition.is_none() {
        return Err(Error::Data("few-shot set has neither examples nor a definition".into()));
    }
    let mut pieces = Vec::with_capacity(set.examples.len() + 1);
    if let Some(def) = &set.definition {
        let mut p = vec![X];
        p.extend(tokenize(def));
        pieces.push(p);
    }
    for ex in &set.examples {
        let mut p = vec![X];
        p.extend(tokenize(&ex.input));
        p.push(Y);
        p.extend(tokenize(&ex.target));
        pieces.push(p);
    }
    let has_def = set.definition.is_some();
    let mut out = Vec::new();
    for (i, piece) in pieces.iter().enumerate() {
        if out.len() + piece.len() <= max_len {
            out.extend_from_slice(piece);
            continue;
        }
        // Keep at least one example when there is room after the definition.
        let first_example = i == usize::from(has_def);
        if i == 0 || first_example {
            let room = max_len - out.len();
            out.extend_from_slice(&piece[..room]);
        }
        break;
    }
    Ok(out)
}

/// Few-shot context followed by `X` and the query tokens, for models that read
/// examples in their input. The context takes at most `max_ctx - 1` tokens so
/// the total stays within `max_ctx + x.len()`. Without shots or a definition
/// the query is returned unchanged.
pub fn fewshot_input(set: &FewShotSet, x: &[usize], max_ctx: usize) -> Result<Vec<usize>> {
    if (set.examples.is_empty() && set.definition.is_none()) || max_ctx < 2 {
        return Ok(x.to_vec());
    }
    let mut out = format_fewshot(set, max_ctx - 1)?;
    out.push(X);
    out.extend_from_slice(x);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct MtfSample {
    pub task: usize,
    pub target: TaskExample,
    pub shots: FewShotSet,
}

/// Picks a task uniformly, a target from its train split, and up to `k_max`
/// other distinct train examples as shots. Tasks with a single example and no
/// definition cannot provide shots and are skipped.
pub fn sample_mtf_batch<R: Rng>(tasks: &[Task], k_max: usize, rng: &mut R) -> Result<MtfSample> {
    let usable: Vec<usize> = (0..tasks.len())
        .filter(|&i| {
            let t = &tasks[i];
            t.train.len() >= 2 || (t.train.len() == 1 && t.definition().is_some())
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Data("no task can provide a target and shots".into()));
    }
    let task = usable[rng.random_range(0..usable.len())];
    let t = &tasks[task];
    let n = t.train.len();
    let target_idx = rng.random_range(0..n);
    let k = k_max.min(n - 1);
    let shots = sample(rng, n - 1, k)
        .into_iter()
        .map(|j| if j >= target_idx { j + 1 } else { j })
        .map(|j| t.train[j].clone())
        .collect();
    Ok(MtfSample {
        task,
        target: t.train[target_idx].clone(),
        shots: FewShotSet::new(shots, t.definition().map(str::to_string)),
    })
}
