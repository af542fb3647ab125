use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hyperpeft::checkpoint::{load_checkpoint, load_params, save_checkpoint, HYPT_VERSION};
use hyperpeft::data::{
    load_tasks_jsonl, stream_rng, synth_corpus, synth_tasks, vocab, write_tasks_jsonl, Corpus, FewShotSet, Task, TaskExample,
};
use hyperpeft::eval::{eval_loss, eval_shots, eval_task, write_report, Adapter, AdapterSource, EvalReport};
use hyperpeft::hyper::HYPER_PREFIX;
use hyperpeft::peft::{init_peft, load_peft, save_peft, InitScheme, PeftKind, HPFT_VERSION};
use hyperpeft::tensor::grad_check_store;
use hyperpeft::train::{
    checkpoint_steps, metrics_csv, peft_finetune, InitKind, Mode, Models, Objective, StepMetrics, TrainState, Trainer,
    DOWN_PREFIX, INIT_STREAM, PEFT_PREFIX,
};
use hyperpeft::{Error, Graph, Result, Tensor};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, Split};

/// Stream for randomly initialized shared PEFT parameters.
const SHARED_INIT_STREAM: u64 = INIT_STREAM - 2;

/// What a command produced, recorded in its manifest.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Outcome {
    pub artifacts: BTreeMap<String, PathBuf>,
    pub summary: Value,
}

impl Outcome {
    fn artifact(&mut self, key: &str, path: PathBuf) {
        self.artifacts.insert(key.to_string(), path);
    }
}

fn config_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        msg: msg.into(),
    }
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.io.out_dir.join(name)
}

/// Held-in and held-out tasks from the task file or the synthetic suite.
pub fn task_split(cfg: &RunConfig) -> Result<(Vec<Task>, Vec<Task>)> {
    match &cfg.data.task_file {
        Some(path) => {
            let tasks = load_tasks_jsonl(path)?;
            for name in &cfg.data.held_out_tasks {
                if !tasks.iter().any(|t| &t.name == name) {
                    return Err(config_err("data.held_out_tasks", format!("no task named {name} in the task file")));
                }
            }
            Ok(tasks.into_iter().partition(|t| !cfg.data.held_out_tasks.contains(&t.name)))
        }
        None => {
            let suite = synth_tasks(cfg.data.synth_seed);
            Ok((suite.held_in, suite.held_out))
        }
    }
}

fn pick(cfg: &RunConfig, split: Split) -> Result<Vec<Task>> {
    let (held_in, held_out) = task_split(cfg)?;
    Ok(match split {
        Split::HeldIn => held_in,
        Split::HeldOut => held_out,
        Split::All => held_in.into_iter().chain(held_out).collect(),
    })
}

fn corpus(cfg: &RunConfig) -> Corpus {
    synth_corpus(cfg.data.corpus_seed, cfg.data.corpus_tokens)
}

/// Builds the downstream model plus the requested components, then copies in
/// whatever `io.init_checkpoint` holds for each of them. The hypermodel is
/// added after the downstream weights load, so a fresh hypermodel backbone
/// starts from the loaded downstream model.
pub fn build_models(cfg: &RunConfig, hyper: bool, shared: bool) -> Result<Models> {
    let seed = cfg.train.seed;
    let init = cfg.io.init_checkpoint.as_deref();
    let mut m = Models::new(cfg.model.clone(), seed)?;
    if let Some(path) = init {
        if load_params(path, &mut m.store, DOWN_PREFIX)? == 0 {
            return Err(config_err("io.init_checkpoint", "holds no downstream parameters"));
        }
    }
    if hyper {
        m.add_hyper(cfg.hyper.clone(), seed)?;
        if let Some(path) = init {
            let n = load_params(path, &mut m.store, HYPER_PREFIX)?;
            log::info!("hypermodel: {}", if n > 0 { "loaded from checkpoint" } else { "fresh" });
        }
    }
    if shared {
        let p = init_peft(&cfg.peft, &cfg.model, InitScheme::Rand, &mut stream_rng(seed, SHARED_INIT_STREAM))?;
        m.add_shared(&p)?;
        if let Some(path) = init {
            let n = load_params(path, &mut m.store, PEFT_PREFIX)?;
            log::info!("shared PEFT parameters: {}", if n > 0 { "loaded from checkpoint" } else { "fresh" });
        }
    }
    Ok(m)
}

/// Runs `objective` to `train.steps`, continuing from `io.resume` if set, and
/// saves `{name}.hypt` plus a checkpoint at each step in `marks`.
fn train(
    cfg: &RunConfig,
    models: &mut Models,
    objective: Objective,
    name: &str,
    marks: &[usize],
    out: &mut Outcome,
) -> Result<Vec<StepMetrics>> {
    let snapshot = serde_json::to_value(cfg)?;
    let seed = cfg.train.seed;
    let mut trainer = match &cfg.io.resume {
        Some(path) => {
            let (state, meta) = load_checkpoint(path, &mut models.store)?;
            if meta.seed != seed {
                return Err(config_err("train.seed", format!("resume checkpoint was trained with seed {}", meta.seed)));
            }
            Trainer::resume(cfg.train.clone(), objective, state)?
        }
        None => Trainer::new(cfg.train.clone(), objective)?,
    };
    let save = |step: usize, models: &Models, state: &TrainState| -> Result<PathBuf> {
        let path = out_path(cfg, &format!("{name}_step{step}.hypt"));
        save_checkpoint(&path, &models.store, state, seed, snapshot.clone())?;
        Ok(path)
    };
    let mut saved = Vec::new();
    if marks.contains(&0) && trainer.state.step == 0 {
        saved.push((0, save(0, models, &trainer.state)?));
    }
    let until = cfg.io.stop_at.unwrap_or(cfg.train.steps);
    let metrics = trainer.run_until(models, until, |m, models, state| {
        if marks.contains(&(m.step + 1)) {
            saved.push((m.step + 1, save(m.step + 1, models, state)?));
        }
        Ok(())
    })?;
    for (step, path) in saved {
        out.artifact(&format!("checkpoint_step{step}"), path);
    }
    let path = out_path(cfg, &format!("{name}.hypt"));
    save_checkpoint(&path, &models.store, &trainer.state, seed, snapshot)?;
    out.artifact("checkpoint", path);
    let csv = out_path(cfg, &format!("{name}_metrics.csv"));
    fs::write(&csv, metrics_csv(&metrics))?;
    out.artifact("metrics", csv);
    let tail = &metrics[metrics.len() - metrics.len().div_ceil(10)..];
    let final_loss = (!tail.is_empty()).then(|| tail.iter().map(|m| m.loss).sum::<f64>() / tail.len() as f64);
    out.summary = json!({
        "steps": trainer.state.step,
        "final_loss_mean": final_loss,
        "param_hash": models.store.hash(),
    });
    Ok(metrics)
}

pub fn cmd_synth_data(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let (held_in, held_out) = task_split(cfg)?;
    for (name, tasks) in [("held_in", &held_in), ("held_out", &held_out)] {
        let path = out_path(cfg, &format!("tasks_{name}.jsonl"));
        write_tasks_jsonl(tasks, &path)?;
        out.artifact(name, path);
    }
    let corpus = corpus(cfg);
    let mut text = String::new();
    for &(s, e) in &corpus.docs {
        writeln!(text, "{}", vocab::detokenize(&corpus.tokens[s..e])).unwrap();
    }
    let path = out_path(cfg, "corpus.txt");
    fs::write(&path, text)?;
    out.artifact("corpus", path);
    out.summary = json!({
        "held_in": held_in.iter().map(|t| &t.name).collect::<Vec<_>>(),
        "held_out": held_out.iter().map(|t| &t.name).collect::<Vec<_>>(),
        "corpus_tokens": corpus.tokens.len(),
        "corpus_docs": corpus.docs.len(),
    });
    Ok(out)
}

/// Continuation training of the downstream model on the corpus.
pub fn cmd_lm_adapt(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let mut models = build_models(cfg, false, false)?;
    let corpus = corpus(cfg);
    train(cfg, &mut models, Objective::LmAdapt { corpus: &corpus }, "lm", &[], &mut out)?;
    Ok(out)
}

pub fn cmd_hyperpretrain(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let mut models = build_models(cfg, true, false)?;
    let corpus = corpus(cfg);
    let marks = checkpoint_steps(cfg.train.steps, &cfg.io.checkpoint_marks);
    let objective = Objective::Hyperpretrain {
        corpus: &corpus,
        lens: cfg.data.caclm,
    };
    train(cfg, &mut models, objective, "hyperpretrain", &marks, &mut out)?;
    Ok(out)
}

/// Multi-task training on the held-in tasks in `train.mode`.
pub fn cmd_mtf(cfg: &RunConfig) -> Result<Outcome> {
    let mode = cfg.train.mode;
    if mode == Mode::PeftOnly {
        return Err(config_err("train.mode", "peft_only is a fine-tuning mode; use peft-finetune"));
    }
    let mut out = Outcome::default();
    let mut models = build_models(cfg, mode.uses_hyper(), mode == Mode::SharedPeft)?;
    let (held_in, _) = task_split(cfg)?;
    train(cfg, &mut models, Objective::Tasks { tasks: &held_in }, "mtf", &[], &mut out)?;
    if let Some(h) = &models.shared {
        let path = out_path(cfg, "shared.hpft");
        save_peft(&h.extract(&models.store)?, &path)?;
        out.artifact("shared_peft", path);
    }
    Ok(out)
}

/// Loads the adapter given by `io.adapter`, naming the field on failure.
fn adapter_file(cfg: &RunConfig) -> Result<&Path> {
    cfg.io
        .adapter
        .as_deref()
        .ok_or_else(|| config_err("io.adapter", "an HPFT path is required"))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Outcome> {
    let source = cfg.eval.adapter;
    let mut out = Outcome::default();
    let models = build_models(
        cfg,
        source == AdapterSource::HyperGenerated,
        source == AdapterSource::SharedPeft,
    )?;
    let finetuned = match source {
        AdapterSource::Finetuned => Some(load_peft(adapter_file(cfg)?)?),
        _ => None,
    };
    let ctx = hyperpeft::eval::EvalContext {
        finetuned: finetuned.as_ref(),
        ..models.eval_context(&cfg.train)
    };
    let tasks = pick(cfg, cfg.eval.split)?;
    let mut rows = Vec::new();
    let mut losses = String::from("task,adapter,seed,loss\n");
    let mut loss_sum = 0.0;
    for &seed in &cfg.eval.seeds {
        for task in &tasks {
            let row = eval_task(&ctx, task, source, cfg.eval.k, seed)?;
            log::info!("{} seed {}: {} {:.4}", task.name, seed, row.metric.name(), row.value);
            rows.push(row);
            if cfg.eval.loss {
                let shots = eval_shots(task, cfg.eval.k, seed);
                let generated;
                let adapter = match source {
                    AdapterSource::None => Adapter::None,
                    AdapterSource::SharedPeft => Adapter::Store(models.shared.as_ref().expect("built with shared")),
                    AdapterSource::Finetuned => Adapter::Params(finetuned.as_ref().expect("loaded")),
                    AdapterSource::HyperGenerated => {
                        let hyper = models.hyper.as_ref().expect("built with hyper");
                        let kind = if hyper.config.target.kind == PeftKind::Lora { PeftKind::Lora } else { PeftKind::PrefixFlat };
                        generated = hyper.generate_params(&models.store, &shots, kind)?;
                        Adapter::Params(&generated)
                    }
                };
                let loss = eval_loss(&ctx, task, adapter, Some(&shots))?;
                loss_sum += loss;
                writeln!(losses, "{},{},{},{:.6}", task.name, source.name(), seed, loss).unwrap();
            }
        }
    }
    let report = EvalReport {
        rows,
        config: serde_json::to_value(cfg)?,
        seeds: cfg.eval.seeds.clone(),
    };
    let path = out_path(cfg, "eval.csv");
    write_report(&report, &path)?;
    out.artifact("report", path);
    let mut per_task: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &report.rows {
        per_task.entry(&r.task).or_default().push(r.value);
    }
    let per_task: BTreeMap<&str, f64> = per_task
        .into_iter()
        .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    out.summary = json!({ "mean": report.mean(), "per_task": per_task });
    if cfg.eval.loss {
        let path = out_path(cfg, "eval_loss.csv");
        fs::write(&path, losses)?;
        out.artifact("loss", path);
        out.summary["loss_mean"] = json!(loss_sum / report.rows.len() as f64);
    }
    Ok(out)
}

/// Reads few-shot examples, one JSON object per line with `input` and
/// `target` (and optionally `definition`).
pub fn load_shots(path: &Path) -> Result<FewShotSet> {
    let text = fs::read_to_string(path)?;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let ex: TaskExample = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        examples.push(ex);
    }
    let definition = examples.iter().find_map(|e| e.definition.clone());
    Ok(FewShotSet::new(examples, definition))
}

/// Generates one adapter from a few-shot file and writes it as HPFT.
pub fn cmd_gen_adapter(cfg: &RunConfig) -> Result<Outcome> {
    let shots_path = cfg
        .io
        .shots_file
        .as_deref()
        .ok_or_else(|| config_err("io.shots_file", "a few-shot JSONL path is required"))?;
    let shots = load_shots(shots_path)?;
    let models = build_models(cfg, true, false)?;
    let hyper = models.hyper.as_ref().expect("built with hyper");
    let params = hyper.generate_params(&models.store, &shots, cfg.peft.kind)?;
    let path = cfg.io.adapter.clone().unwrap_or_else(|| out_path(cfg, "adapter.hpft"));
    save_peft(&params, &path)?;
    let mut out = Outcome::default();
    out.artifact("adapter", path);
    out.summary = json!({ "kind": params.kind().name(), "shots": shots.examples.len() });
    Ok(out)
}

pub fn cmd_peft_finetune(cfg: &RunConfig) -> Result<Outcome> {
    let inits = &cfg.finetune.inits;
    if inits.is_empty() {
        return Err(config_err("finetune.inits", "needs at least one init kind"));
    }
    let models = build_models(cfg, inits.contains(&InitKind::Hyper), inits.contains(&InitKind::Shared))?;
    let tasks = pick(cfg, cfg.finetune.split)?;
    let mut csv = String::from("task,init,lr,seed,step,value\n");
    let mut reports = Vec::new();
    for task in &tasks {
        for &init in inits {
            let r = peft_finetune(&models, &cfg.peft, task, init, &cfg.finetune.protocol)?;
            for c in &r.curves {
                for &(step, v) in &c.points {
                    writeln!(csv, "{},{},{:e},{},{},{:.6}", r.task, init_name(init), c.lr, c.seed, step, v).unwrap();
                }
            }
            log::info!(
                "{} {}: step0 {:.4}, best lr {:e} final {:.4}",
                r.task,
                init_name(init),
                r.step0_mean,
                r.best_lr,
                r.best_final_mean
            );
            reports.push(r);
        }
    }
    let mut out = Outcome::default();
    let path = out_path(cfg, "finetune.csv");
    fs::write(&path, csv)?;
    out.artifact("curves", path);
    out.summary = json!(reports
        .iter()
        .map(|r| json!({
            "task": r.task,
            "init": init_name(r.init),
            "step0_mean": r.step0_mean,
            "best_lr": r.best_lr,
            "best_final_mean": r.best_final_mean,
        }))
        .collect::<Vec<_>>());
    Ok(out)
}

fn init_name(init: InitKind) -> &'static str {
    match init {
        InitKind::Rand => "rand",
        InitKind::Shared => "shared",
        InitKind::Hyper => "hyper",
    }
}

/// Finite-difference check of the hypermodel gradients through the whole
/// shots -> hypermodel -> generated parameters -> frozen downstream loss path.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let gc = &cfg.gradcheck;
    let mut models = build_models(cfg, true, false)?;
    if cfg.io.init_checkpoint.is_none() {
        let mut rng = stream_rng(gc.seed, 0);
        let ids: Vec<_> = models
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("hyper.head.") && (p.name.ends_with(".w2") || p.name.ends_with(".b2")))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let shape = models.store.value(id).shape().to_vec();
            models.store.set(id, Tensor::randn(&shape, gc.head_std, &mut rng))?;
        }
    }
    let (held_in, _) = task_split(cfg)?;
    let task = held_in.first().ok_or_else(|| Error::Data("no held-in tasks".into()))?;
    let shots = eval_shots(task, gc.shots, gc.seed);
    let hyper = models.hyper.as_ref().expect("built with hyper");
    let tokens = hyper.format(&shots)?;
    let ex = &task.test[0];
    let mut src = vocab::tokenize(&ex.input);
    src.truncate(cfg.train.max_len_down);
    let mut tgt = vocab::tokenize(&ex.target);
    tgt.truncate(cfg.train.max_len_tgt);
    let ids: Vec<_> = models.store.ids_with_prefix(HYPER_PREFIX).collect();
    let down = &models.down;
    let f = |g: &mut Graph| {
        let vars = hyper.generate(g, &tokens)?;
        down.seq_loss(g, &src, &tgt, &vars)
    };
    let report = grad_check_store(&models.store, &ids, f, gc.eps, gc.coords, gc.seed)?;
    println!("gradcheck: max rel err {:.3e} over {} coordinates", report.max_rel_error, report.checked);
    let mut out = Outcome::default();
    out.summary = json!({
        "max_rel_error": report.max_rel_error,
        "checked": report.checked,
        "worst": report.worst.as_ref().map(|w| json!({"param": w.0, "index": w.1, "analytic": w.2, "numeric": w.3})),
        "target": cfg.peft.kind.name(),
        "passed": report.max_rel_error < gc.tol,
    });
    Ok(out)
}

pub fn versions() -> Value {
    json!({
        "hyperpeft": env!("CARGO_PKG_VERSION"),
        "checkpoint_format": HYPT_VERSION,
        "peft_format": HPFT_VERSION,
    })
}
