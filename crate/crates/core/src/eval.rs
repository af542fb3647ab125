//! Scoring and metrics: rank classification over options, greedy decoding,
//! ROUGE-L, Macro-F1, per-task evaluation with cached adapters, and reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::vocab::{self, tokenize, EOS, PAD};
use crate::data::{fewshot_input, stream_rng, FewShotSet, Metric, Task};
use crate::error::{Error, Result};
use crate::hyper::HyperModel;
use crate::model::{DownstreamModel, PeftVars};
use crate::par::parallel_map;
use crate::peft::{PeftHandle, PeftKind, PeftParams};
use crate::tensor::{Graph, ParamStore, Var};

/// PEFT parameters applied during one evaluation.
#[derive(Clone, Copy)]
pub enum Adapter<'a> {
    None,
    Params(&'a PeftParams),
    Store(&'a PeftHandle),
    /// Regenerated inside every forward pass from few-shot tokens.
    Generate { hyper: &'a HyperModel, tokens: &'a [usize] },
}

impl Adapter<'_> {
    pub fn inject(&self, g: &mut Graph, n_layers: usize) -> Result<PeftVars> {
        match self {
            Adapter::None => Ok(PeftVars::none(n_layers)),
            Adapter::Params(p) => p.inject(g),
            Adapter::Store(h) => h.inject(g),
            Adapter::Generate { hyper, tokens } => hyper.generate(g, tokens),
        }
    }
}

/// Index of the option with the lowest mean token NLL given `input`; ties go
/// to the lowest index.
pub fn rank_classify(
    store: &ParamStore,
    model: &DownstreamModel,
    input: &[usize],
    options: &[Vec<usize>],
    adapter: Adapter,
) -> Result<usize> {
    Ok(option_scores(store, model, input, options, adapter)?.0)
}

/// `(argmin, per-option mean NLL)`.
pub fn option_scores(
    store: &ParamStore,
    model: &DownstreamModel,
    input: &[usize],
    options: &[Vec<usize>],
    adapter: Adapter,
) -> Result<(usize, Vec<f64>)> {
    if options.is_empty() {
        return Err(Error::Data("rank classification needs at least one option".into()));
    }
    let mut g = Graph::new(store).without_frozen_grads();
    let peft = adapter.inject(&mut g, model.config.n_layers)?;
    let enc = model.encode(&mut g, input, &peft)?;
    let mut scores = Vec::with_capacity(options.len());
    for opt in options {
        let (dec_in, mut labels) = model.teacher_forcing(opt);
        // score the option's own tokens, not the end marker
        if let Some(last) = labels.last_mut() {
            *last = PAD;
        }
        let logits = model.decode(&mut g, &dec_in, enc, &peft, model.config.decoder_causal)?;
        let loss = g.cross_entropy(logits, &labels, PAD)?;
        scores.push(g.value(loss).item()?);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

/// Greedy decoding from BOS until EOS or `max_len` output tokens.
pub fn generate_greedy(
    store: &ParamStore,
    model: &DownstreamModel,
    input: &[usize],
    adapter: Adapter,
    max_len: usize,
) -> Result<Vec<usize>> {
    let max_len = max_len.min(model.config.max_tgt_len.saturating_sub(1));
    let mut g = Graph::new(store).without_frozen_grads();
    let peft = adapter.inject(&mut g, model.config.n_layers)?;
    let enc = model.encode(&mut g, input, &peft)?;
    let mut dec = vec![vocab::BOS];
    let mut out = Vec::new();
    while out.len() < max_len {
        let logits = model.decode(&mut g, &dec, enc, &peft, model.config.decoder_causal)?;
        let t = g.value(logits);
        let v = t.shape()[1];
        let row = &t.data()[(dec.len() - 1) * v..dec.len() * v];
        let mut next = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[next] {
                next = j;
            }
        }
        if next == EOS {
            break;
        }
        out.push(next);
        dec.push(next);
    }
    Ok(out)
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 over whitespace tokens.
pub fn rouge_l(pred: &str, reference: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    match (p.is_empty(), r.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lcs = lcs_len(&p, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let (prec, rec) = (lcs / p.len() as f64, lcs / r.len() as f64);
    2.0 * prec * rec / (prec + rec)
}

/// Unweighted mean of per-class F1 over every label seen in either list.
pub fn macro_f1<T: Ord + Clone>(preds: &[T], refs: &[T]) -> Result<f64> {
    if preds.len() != refs.len() || preds.is_empty() {
        return Err(Error::Data(format!(
            "macro_f1 needs equal non-empty lists, got {} and {}",
            preds.len(),
            refs.len()
        )));
    }
    let classes: BTreeSet<&T> = preds.iter().chain(refs).collect();
    let mut total = 0.0;
    for c in &classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, r) in preds.iter().zip(refs) {
            match (p == *c, r == *c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp > 0 {
            let p = tp as f64 / (tp + fp) as f64;
            let r = tp as f64 / (tp + fn_) as f64;
            total += 2.0 * p * r / (p + r);
        }
    }
    Ok(total / classes.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterSource {
    None,
    SharedPeft,
    HyperGenerated,
    Finetuned,
}

impl AdapterSource {
    pub fn name(self) -> &'static str {
        match self {
            AdapterSource::None => "none",
            AdapterSource::SharedPeft => "shared_peft",
            AdapterSource::HyperGenerated => "hyper_generated",
            AdapterSource::Finetuned => "finetuned",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: String,
    pub metric: Metric,
    pub value: f64,
    pub n: usize,
    pub adapter: AdapterSource,
    pub seed: u64,
    /// Chosen option or generated text per test example.
    pub predictions: Vec<String>,
}

/// Everything an evaluation may draw on. `fewshot_context` prepends formatted
/// shots (up to that many tokens) to each input, for models trained that way.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub store: &'a ParamStore,
    pub down: &'a DownstreamModel,
    pub hyper: Option<&'a HyperModel>,
    pub shared: Option<&'a PeftHandle>,
    pub finetuned: Option<&'a PeftParams>,
    pub max_len_down: usize,
    pub max_len_tgt: usize,
    pub fewshot_context: Option<usize>,
}

/// Stable per-task stream id so shot sampling does not depend on task order.
fn task_stream(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// `k` distinct examples from `task.train`, fixed by `(seed, task name)`.
pub fn eval_shots(task: &Task, k: usize, seed: u64) -> FewShotSet {
    let mut rng = stream_rng(seed, task_stream(&task.name));
    let k = k.min(task.train.len());
    let mut idx = sample(&mut rng, task.train.len(), k).into_vec();
    idx.sort_unstable();
    FewShotSet::new(idx.into_iter().map(|i| task.train[i].clone()).collect(), task.definition().map(str::to_string))
}

/// Model input for a test example: `tok(x)` cut to `max_len_down`, optionally
/// preceded by formatted shots and X.
pub fn model_input(ctx: &EvalContext, shots: Option<&FewShotSet>, x: &str) -> Result<Vec<usize>> {
    let mut x = tokenize(x);
    x.truncate(ctx.max_len_down);
    match (ctx.fewshot_context, shots) {
        (Some(max_ctx), Some(shots)) => fewshot_input(shots, &x, max_ctx),
        _ => Ok(x),
    }
}

/// Scores every test example of `task` under `adapter`.
pub fn eval_with_adapter(ctx: &EvalContext, task: &Task, adapter: Adapter, shots: Option<&FewShotSet>) -> Result<(f64, Vec<String>)> {
    if task.test.is_empty() {
        return Err(Error::Data(format!("task {} has no test examples", task.name)));
    }
    let preds: Vec<String> = parallel_map(&task.test, |ex| {
        let input = model_input(ctx, shots, &ex.input)?;
        match &ex.options {
            Some(opts) => {
                let toks: Vec<Vec<usize>> = opts.iter().map(|o| tokenize(o)).collect();
                let i = rank_classify(ctx.store, ctx.down, &input, &toks, adapter)?;
                Ok(opts[i].clone())
            }
            None => {
                let out = generate_greedy(ctx.store, ctx.down, &input, adapter, ctx.max_len_tgt)?;
                Ok(vocab::detokenize(&out))
            }
        }
    })?;
    let refs: Vec<&str> = task.test.iter().map(|e| e.target.as_str()).collect();
    let value = match task.metric {
        Metric::Accuracy => preds.iter().zip(&refs).filter(|(p, r)| p == *r).count() as f64 / refs.len() as f64,
        Metric::RougeL => preds.iter().zip(&refs).map(|(p, r)| rouge_l(p, r)).sum::<f64>() / refs.len() as f64,
        Metric::MacroF1 => {
            let p: Vec<&str> = preds.iter().map(String::as_str).collect();
            macro_f1(&p, &refs)?
        }
    };
    Ok((value, preds))
}

/// Evaluates `task` with the adapter named by `source`. Hypermodel adapters
/// are generated once from `k` train shots and reused for every test example.
pub fn eval_task(ctx: &EvalContext, task: &Task, source: AdapterSource, k: usize, seed: u64) -> Result<EvalRow> {
    let shots = eval_shots(task, k, seed);
    let missing = |what: &str| Error::Contract(format!("{} evaluation needs {what}", source.name()));
    let generated;
    let adapter = match source {
        AdapterSource::None => Adapter::None,
        AdapterSource::SharedPeft => Adapter::Store(ctx.shared.ok_or_else(|| missing("shared PEFT parameters"))?),
        AdapterSource::Finetuned => Adapter::Params(ctx.finetuned.ok_or_else(|| missing("fine-tuned parameters"))?),
        AdapterSource::HyperGenerated => {
            let hyper = ctx.hyper.ok_or_else(|| missing("a hypermodel"))?;
            let kind = if hyper.config.target.kind == PeftKind::Lora { PeftKind::Lora } else { PeftKind::PrefixFlat };
            generated = hyper.generate_params(ctx.store, &shots, kind)?;
            Adapter::Params(&generated)
        }
    };
    let (value, predictions) = eval_with_adapter(ctx, task, adapter, Some(&shots))?;
    Ok(EvalRow {
        task: task.name.clone(),
        metric: task.metric,
        value,
        n: task.test.len(),
        adapter: source,
        seed,
        predictions,
    })
}

/// Mean NLL of the targets of `task.test` under `adapter`.
pub fn eval_loss(ctx: &EvalContext, task: &Task, adapter: Adapter, shots: Option<&FewShotSet>) -> Result<f64> {
    let losses = parallel_map(&task.test, |ex| {
        let input = model_input(ctx, shots, &ex.input)?;
        let mut tgt = tokenize(&ex.target);
        tgt.truncate(ctx.max_len_tgt);
        let mut g = Graph::new(ctx.store).without_frozen_grads();
        let peft = adapter.inject(&mut g, ctx.down.config.n_layers)?;
        let loss: Var = ctx.down.seq_loss(&mut g, &input, &tgt, &peft)?;
        g.value(loss).item()
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn mean(&self) -> f64 {
        self.rows.iter().map(|r| r.value).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,metric,value,n,adapter,seed\n");
        for r in &self.rows {
            writeln!(s, "{},{},{:.6},{},{},{}", r.task, r.metric.name(), r.value, r.n, r.adapter.name(), r.seed).unwrap();
        }
        if let Some(first) = self.rows.first() {
            let metrics: BTreeSet<&str> = self.rows.iter().map(|r| r.metric.name()).collect();
            let metric = if metrics.len() == 1 { first.metric.name() } else { "mixed" };
            let n: usize = self.rows.iter().map(|r| r.n).sum();
            let seeds: BTreeSet<u64> = self.rows.iter().map(|r| r.seed).collect();
            let seed = if seeds.len() == 1 { first.seed.to_string() } else { "mixed".into() };
            writeln!(s, "AVG,{metric},{:.6},{n},{},{seed}", self.mean(), first.adapter.name()).unwrap();
        }
        s
    }
}

/// Writes the CSV to `path` and a JSON sidecar (`path` with a `.json`
/// extension) holding the config, seeds and a content-derived run id.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let csv = report.to_csv();
    std::fs::write(path, &csv)?;
    let config_bytes = serde_json::to_vec(&report.config)?;
    let mut h = Sha256::new();
    h.update(&config_bytes);
    h.update(csv.as_bytes());
    let run_id = hex::encode(&h.finalize()[..6]);
    let sidecar = serde_json::json!({
        "config": report.config,
        "seeds": report.seeds,
        "run_id": run_id,
    });
    std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}
