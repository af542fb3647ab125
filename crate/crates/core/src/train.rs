//! Optimizer, learning-rate schedule and the training regimes: downstream LM
//! adaptation, hyperpretraining on the corpus, multi-task fine-tuning in six
//! modes and single-task PEFT fine-tuning from different initializations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::tokenize;
use crate::data::{caclm_split, fewshot_input, sample_mtf_batch, stream_rng, Corpus, SegmentLens, Task};
use crate::error::{Error, Result};
use crate::eval::{eval_shots, eval_with_adapter, Adapter, EvalContext};
use crate::hyper::{HyperModel, HyperModelConfig, HYPER_PREFIX};
use crate::model::{DownstreamModel, ModelConfig, PeftVars};
use crate::par::parallel_map;
use crate::peft::{init_peft, InitScheme, PeftConfig, PeftHandle, PeftParams};
use crate::tensor::{Grads, Graph, ParamStore, Precision, Tensor};

pub const DOWN_PREFIX: &str = "down.";
/// Shared PEFT parameters trained across tasks.
pub const PEFT_PREFIX: &str = "peft.";
/// Per-task PEFT parameters trained by single-task fine-tuning.
pub const FT_PREFIX: &str = "ft.";

/// RNG stream used to build models, kept apart from per-step data streams.
pub const INIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Hypermodel generates parameters from shots; only the hypermodel trains.
    HyperFrozen,
    /// As `HyperFrozen`, with the downstream model trained too.
    HyperJoint,
    /// Downstream model trained on (x, y) pairs.
    FullMtf,
    /// Downstream model trained on shots, X and x concatenated.
    FewshotMtf,
    /// One PEFT parameter set shared by every task.
    SharedPeft,
    /// Per-task PEFT parameters (single-task fine-tuning).
    PeftOnly,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::HyperFrozen,
        Mode::HyperJoint,
        Mode::FullMtf,
        Mode::FewshotMtf,
        Mode::SharedPeft,
        Mode::PeftOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::HyperFrozen => "hyper_frozen",
            Mode::HyperJoint => "hyper_joint",
            Mode::FullMtf => "full_mtf",
            Mode::FewshotMtf => "fewshot_mtf",
            Mode::SharedPeft => "shared_peft",
            Mode::PeftOnly => "peft_only",
        }
    }

    /// Name prefixes of the parameters this mode updates.
    pub fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            Mode::HyperFrozen => &[HYPER_PREFIX],
            Mode::HyperJoint => &[HYPER_PREFIX, DOWN_PREFIX],
            Mode::FullMtf | Mode::FewshotMtf => &[DOWN_PREFIX],
            Mode::SharedPeft => &[PEFT_PREFIX],
            Mode::PeftOnly => &[FT_PREFIX],
        }
    }

    pub fn uses_hyper(self) -> bool {
        matches!(self, Mode::HyperFrozen | Mode::HyperJoint)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    LinearDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub k_max: usize,
    pub max_len_hyper: usize,
    pub max_len_down: usize,
    pub max_len_tgt: usize,
    pub mode: Mode,
    pub precision: Precision,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 1e-3,
            schedule: Schedule::LinearDecay,
            seed: 0,
            k_max: 16,
            max_len_hyper: 256,
            max_len_down: 64,
            max_len_tgt: 32,
            mode: Mode::HyperFrozen,
            precision: Precision::F64,
            clip_norm: 1.0,
        }
    }

    /// Full-size multi-task settings.
    pub fn paper() -> Self {
        Self {
            steps: 10_000,
            batch_size: 256,
            lr: 5e-5,
            k_max: 16,
            max_len_hyper: 1024,
            max_len_down: 384,
            max_len_tgt: 128,
            ..Self::desk()
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let fail = |field: &str, msg: &str| Err(Error::config(format!("{path}.{field}"), msg));
        if self.steps < 1 {
            return fail("steps", "must be >= 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("lr", "must be a positive finite number");
        }
        if self.batch_size < 1 {
            return fail("batch_size", "must be >= 1");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return fail("clip_norm", "must be a positive finite number");
        }
        if self.max_len_hyper < 1 || self.max_len_down < 1 || self.max_len_tgt < 1 {
            return fail("max_len_down", "maximum lengths must be >= 1");
        }
        Ok(())
    }
}

/// Learning rate after `step` updates: linear decay from `lr` to 0 at `steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    match config.schedule {
        Schedule::LinearDecay => (config.lr * (1.0 - step as f64 / config.steps as f64)).max(0.0),
    }
}

/// Adam moments keyed by parameter name. Frozen parameters never enter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// Scales `grads` so their global norm over trainable parameters is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grads(grads: &mut Grads, store: &ParamStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm(store);
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One bias-corrected Adam update of every trainable parameter. Parameters
/// without a gradient entry are treated as having a zero gradient.
pub fn adam_step(store: &mut ParamStore, grads: &Grads, state: &mut Adam, lr: f64, precision: Precision) {
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let shape = store.value(id).shape().to_vec();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        let v = state.v.entry(name).or_insert_with(|| Tensor::zeros(&shape));
        let g = grads.get(id);
        let p = store.value_mut(id);
        for i in 0..p.numel() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + state.eps);
        }
        if precision == Precision::F32 {
            p.round_to_f32();
        }
    }
}

/// Progress of a training run: completed steps and optimizer state. Together
/// with the config, this is all a resumed run needs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub adam: Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mode: String,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step,mode,loss,lr,wall_ms";

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{:.6},{:e},{:.1}", r.step, r.mode, r.loss, r.lr, r.wall_ms).unwrap();
    }
    s
}

/// The downstream model plus whatever else a regime needs, all in one store.
#[derive(Clone, Debug)]
pub struct Models {
    pub store: ParamStore,
    pub down: DownstreamModel,
    pub hyper: Option<HyperModel>,
    /// Shared PEFT parameters under `peft.`.
    pub shared: Option<PeftHandle>,
    /// Single-task PEFT parameters under `ft.`.
    pub finetune: Option<PeftHandle>,
}

impl Models {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, INIT_STREAM);
        let down = DownstreamModel::new_lm(config, &mut store, DOWN_PREFIX, &mut rng)?;
        Ok(Self {
            store,
            down,
            hyper: None,
            shared: None,
            finetune: None,
        })
    }

    /// Adds a hypermodel whose backbone starts as a copy of the downstream
    /// weights wherever names and shapes agree.
    pub fn add_hyper(&mut self, config: HyperModelConfig, seed: u64) -> Result<()> {
        if self.hyper.is_some() {
            return Err(Error::Contract("models already contain a hypermodel".into()));
        }
        if config.downstream != self.down.config {
            return Err(Error::config("hyper.downstream", "does not match the downstream model config"));
        }
        let mut rng = stream_rng(seed, INIT_STREAM - 1);
        let hyper = HyperModel::new(config, &mut self.store, &mut rng)?;
        let src = self.store.clone();
        hyper.init_backbone_from(&mut self.store, &src, DOWN_PREFIX);
        self.hyper = Some(hyper);
        Ok(())
    }

    pub fn add_shared(&mut self, params: &PeftParams) -> Result<()> {
        self.shared = Some(self.install(params, PEFT_PREFIX)?);
        Ok(())
    }

    pub fn add_finetune(&mut self, params: &PeftParams) -> Result<()> {
        self.finetune = Some(self.install(params, FT_PREFIX)?);
        Ok(())
    }

    fn install(&mut self, params: &PeftParams, prefix: &str) -> Result<PeftHandle> {
        if params.n_layers != self.down.config.n_layers || params.d_model != self.down.config.d_model {
            return Err(Error::config("peft", "parameters do not fit the downstream model"));
        }
        params.install(&mut self.store, prefix)
    }

    /// Freezes everything, then unfreezes parameters under `prefixes`.
    pub fn set_trainable(&mut self, prefixes: &[&str]) {
        self.store.set_frozen_all(true);
        for p in prefixes {
            self.store.set_frozen(p, false);
        }
    }

    pub fn eval_context(&self, config: &TrainConfig) -> EvalContext<'_> {
        EvalContext {
            store: &self.store,
            down: &self.down,
            hyper: self.hyper.as_ref(),
            shared: self.shared.as_ref(),
            finetuned: None,
            max_len_down: config.max_len_down,
            max_len_tgt: config.max_len_tgt,
            fewshot_context: (config.mode == Mode::FewshotMtf).then_some(config.max_len_hyper),
        }
    }
}

/// What a training run optimizes.
#[derive(Clone, Copy)]
pub enum Objective<'a> {
    /// Downstream continuation: predict the next tokens of a corpus window.
    LmAdapt { corpus: &'a Corpus },
    /// Hypermodel reads `S0 A S1 D`; the frozen downstream predicts C from B.
    Hyperpretrain { corpus: &'a Corpus, lens: SegmentLens },
    /// Multi-task or single-task fine-tuning in `TrainConfig::mode`.
    Tasks { tasks: &'a [Task] },
}

impl Objective<'_> {
    pub fn name(&self, config: &TrainConfig) -> &'static str {
        match self {
            Objective::LmAdapt { .. } => "lm_adapt",
            Objective::Hyperpretrain { .. } => "hyperpretrain",
            Objective::Tasks { .. } => config.mode.name(),
        }
    }

    pub fn trainable_prefixes(&self, config: &TrainConfig) -> &'static [&'static str] {
        match self {
            Objective::LmAdapt { .. } => &[DOWN_PREFIX],
            Objective::Hyperpretrain { .. } => &[HYPER_PREFIX],
            Objective::Tasks { .. } => config.mode.trainable_prefixes(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Injection {
    None,
    Hyper,
    Shared,
    Finetune,
}

struct Example {
    hyper_tokens: Vec<usize>,
    src: Vec<usize>,
    tgt: Vec<usize>,
    /// Corpus offset of the window, or the sampled task index.
    origin: u64,
}

fn window_offset(corpus: &Corpus, window: &[usize]) -> u64 {
    ((window.as_ptr() as usize - corpus.tokens.as_ptr() as usize) / std::mem::size_of::<usize>()) as u64
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub objective: Objective<'a>,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, objective: Objective<'a>) -> Result<Self> {
        Self::resume(config, objective, TrainState::default())
    }

    pub fn resume(config: TrainConfig, objective: Objective<'a>, state: TrainState) -> Result<Self> {
        config.validate("train")?;
        if let Objective::Tasks { tasks } = objective {
            if tasks.is_empty() {
                return Err(Error::Data("no training tasks".into()));
            }
        }
        Ok(Self {
            config,
            objective,
            state,
        })
    }

    fn injection(&self) -> Injection {
        match self.objective {
            Objective::LmAdapt { .. } => Injection::None,
            Objective::Hyperpretrain { .. } => Injection::Hyper,
            Objective::Tasks { .. } => match self.config.mode {
                Mode::HyperFrozen | Mode::HyperJoint => Injection::Hyper,
                Mode::FullMtf | Mode::FewshotMtf => Injection::None,
                Mode::SharedPeft => Injection::Shared,
                Mode::PeftOnly => Injection::Finetune,
            },
        }
    }

    fn check_models(&self, models: &Models) -> Result<()> {
        let missing = |what: &str| Err(Error::Contract(format!("{} training needs {what}", self.objective.name(&self.config))));
        match self.injection() {
            Injection::Hyper if models.hyper.is_none() => return missing("a hypermodel"),
            Injection::Shared if models.shared.is_none() => return missing("shared PEFT parameters"),
            Injection::Finetune if models.finetune.is_none() => return missing("fine-tuning PEFT parameters"),
            _ => {}
        }
        if self.config.mode == Mode::FewshotMtf && matches!(self.objective, Objective::Tasks { .. }) {
            let need = self.config.max_len_hyper + self.config.max_len_down;
            if models.down.config.max_src_len < need {
                return Err(Error::config(
                    "model.max_src_len",
                    format!("few-shot inputs need {need} tokens, model allows {}", models.down.config.max_src_len),
                ));
            }
        }
        Ok(())
    }

    fn sample(&self, models: &Models, rng: &mut impl Rng) -> Result<Example> {
        let cfg = &self.config;
        let max_tgt = cfg.max_len_tgt.min(models.down.config.max_tgt_len - 1);
        let max_src = cfg.max_len_down.min(models.down.config.max_src_len);
        match self.objective {
            Objective::LmAdapt { corpus } => {
                let n_src = rng.random_range(1..=max_src);
                let window = corpus
                    .sample_window(n_src + max_tgt, rng)
                    .ok_or_else(|| Error::Data(format!("no document holds {} tokens", n_src + max_tgt)))?;
                Ok(Example {
                    hyper_tokens: Vec::new(),
                    src: window[..n_src].to_vec(),
                    tgt: window[n_src..].to_vec(),
                    origin: window_offset(corpus, window),
                })
            }
            Objective::Hyperpretrain { corpus, lens } => {
                let window = corpus
                    .sample_window(lens.total(), rng)
                    .ok_or_else(|| Error::Data(format!("no document holds {} tokens", lens.total())))?;
                let ex = caclm_split(window, lens)?;
                let mut hyper_tokens = ex.hyper_input;
                hyper_tokens.truncate(cfg.max_len_hyper);
                let mut src = ex.downstream_input;
                src.truncate(max_src);
                let mut tgt = ex.target;
                tgt.truncate(max_tgt);
                Ok(Example {
                    hyper_tokens,
                    src,
                    tgt,
                    origin: window_offset(corpus, window),
                })
            }
            Objective::Tasks { tasks } => {
                let k = if self.config.mode == Mode::PeftOnly { 0 } else { cfg.k_max };
                let s = sample_mtf_batch(tasks, k, rng)?;
                let mut x = tokenize(&s.target.input);
                x.truncate(max_src);
                let mut tgt = tokenize(&s.target.target);
                tgt.truncate(max_tgt);
                let (hyper_tokens, src) = match cfg.mode {
                    Mode::HyperFrozen | Mode::HyperJoint => {
                        let hyper = models.hyper.as_ref().expect("checked");
                        let max = cfg.max_len_hyper.min(hyper.config.backbone.max_src_len);
                        (crate::data::format_fewshot(&s.shots, max)?, x)
                    }
                    Mode::FewshotMtf => (Vec::new(), fewshot_input(&s.shots, &x, cfg.max_len_hyper)?),
                    _ => (Vec::new(), x),
                };
                Ok(Example {
                    hyper_tokens,
                    src,
                    tgt,
                    origin: s.task as u64,
                })
            }
        }
    }

    fn example_grads(&self, models: &Models, ex: &Example, inj: Injection) -> Result<(f64, Grads)> {
        let mut g = Graph::new(&models.store).without_frozen_grads();
        let peft = match inj {
            Injection::None => PeftVars::none(models.down.config.n_layers),
            Injection::Hyper => models.hyper.as_ref().expect("checked").generate(&mut g, &ex.hyper_tokens)?,
            Injection::Shared => models.shared.as_ref().expect("checked").inject(&mut g)?,
            Injection::Finetune => models.finetune.as_ref().expect("checked").inject(&mut g)?,
        };
        let loss = models.down.seq_loss(&mut g, &ex.src, &ex.tgt, &peft)?;
        let value = g.value(loss).item()?;
        let mut grads = Grads::new(&models.store);
        if value.is_finite() {
            g.backward(loss, &mut grads)?;
        }
        Ok((value, grads))
    }

    /// Mean loss and mean gradient of the batch for `step`, without updating
    /// anything. The batch depends only on `(seed, step)`.
    pub fn batch_grads(&self, models: &mut Models, step: usize) -> Result<(f64, Grads)> {
        self.check_models(models)?;
        models.set_trainable(self.objective.trainable_prefixes(&self.config));
        let mut rng = stream_rng(self.config.seed, step as u64);
        let examples = (0..self.config.batch_size)
            .map(|_| self.sample(models, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let inj = self.injection();
        let models = &*models;
        let results = parallel_map(&examples, |ex| {
            self.example_grads(models, ex, inj).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss {
                    step,
                    window: ex.origin,
                },
                e => e,
            })
        })?;
        let mut total = Grads::new(&models.store);
        let mut loss = 0.0;
        for ((l, g), ex) in results.iter().zip(&examples) {
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    window: ex.origin,
                });
            }
            loss += l;
            total.add(g);
        }
        let n = examples.len() as f64;
        total.scale(1.0 / n);
        Ok((loss / n, total))
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self, models: &mut Models) -> Result<StepMetrics> {
        let step = self.state.step;
        if step >= self.config.steps {
            return Err(Error::Contract(format!("training already finished {} steps", self.config.steps)));
        }
        let start = Instant::now();
        let (loss, mut grads) = self.batch_grads(models, step)?;
        let grad_norm = clip_grads(&mut grads, &models.store, self.config.clip_norm);
        let lr = lr_at(step, &self.config);
        adam_step(&mut models.store, &grads, &mut self.state.adam, lr, self.config.precision);
        self.state.step += 1;
        Ok(StepMetrics {
            step,
            mode: self.objective.name(&self.config).to_string(),
            loss,
            lr,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs until `until` steps are complete (capped at the configured total),
    /// calling `on_step` after each one.
    pub fn run_until(
        &mut self,
        models: &mut Models,
        until: usize,
        mut on_step: impl FnMut(&StepMetrics, &Models, &TrainState) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        let until = until.min(self.config.steps);
        let mut out = Vec::new();
        while self.state.step < until {
            let m = self.step(models)?;
            log::debug!("{} step {} loss {:.4} lr {:.2e}", m.mode, m.step, m.loss, m.lr);
            on_step(&m, models, &self.state)?;
            out.push(m);
        }
        Ok(out)
    }

    pub fn run(&mut self, models: &mut Models) -> Result<Vec<StepMetrics>> {
        self.run_until(models, self.config.steps, |_, _, _| Ok(()))
    }
}

/// Step counts at the given percentages of `steps`, sorted and deduplicated.
pub fn checkpoint_steps(steps: usize, percents: &[u32]) -> Vec<usize> {
    let mut out: Vec<usize> = percents.iter().map(|&p| (steps * p.min(100) as usize).div_ceil(100)).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Hyperpretrains the hypermodel against the frozen downstream model and
/// calls `on_mark` at each step in `marks` (0 means before the first update).
pub fn hyperpretrain(
    models: &mut Models,
    corpus: &Corpus,
    lens: SegmentLens,
    config: &TrainConfig,
    marks: &[usize],
    mut on_mark: impl FnMut(usize, &Models, &TrainState) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    let mut trainer = Trainer::new(config.clone(), Objective::Hyperpretrain { corpus, lens })?;
    if marks.contains(&0) {
        on_mark(0, models, &trainer.state)?;
    }
    trainer.run_until(models, config.steps, |m, models, state| {
        if marks.contains(&(m.step + 1)) {
            on_mark(m.step + 1, models, state)?;
        }
        Ok(())
    })
}

/// Multi-task fine-tuning in `config.mode`.
pub fn mtf_train(models: &mut Models, tasks: &[Task], config: &TrainConfig) -> Result<Vec<StepMetrics>> {
    Trainer::new(config.clone(), Objective::Tasks { tasks })?.run(models)
}

/// Continuation training of the downstream model on the corpus.
pub fn lm_adapt(models: &mut Models, corpus: &Corpus, config: &TrainConfig) -> Result<Vec<StepMetrics>> {
    Trainer::new(config.clone(), Objective::LmAdapt { corpus })?.run(models)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Rand,
    Shared,
    Hyper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub batch_size: usize,
    /// Steps at which the test metric is recorded; 0 is the initialization.
    pub eval_marks: Vec<usize>,
    /// Shots given to the hypermodel for Hyper initialization.
    pub n_shots: usize,
    pub max_len_down: usize,
    pub max_len_tgt: usize,
}

impl FinetuneConfig {
    pub fn desk() -> Self {
        Self {
            lrs: vec![1e-3, 1e-4, 1e-5],
            seeds: vec![0, 1, 2],
            steps: 50,
            batch_size: 8,
            eval_marks: vec![0, 25, 50],
            n_shots: 16,
            max_len_down: 64,
            max_len_tgt: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub lr: f64,
    pub seed: u64,
    /// `(step, metric)` at each eval mark.
    pub points: Vec<(usize, f64)>,
}

impl Curve {
    pub fn final_value(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub task: String,
    pub init: InitKind,
    pub curves: Vec<Curve>,
    /// Mean over seeds of the step-0 metric.
    pub step0_mean: f64,
    pub best_lr: f64,
    /// Mean over seeds of the final metric at `best_lr`.
    pub best_final_mean: f64,
}

/// Trains fresh PEFT parameters on `task.train` for every (lr, seed) pair and
/// records the test metric at each eval mark. `base` must hold a hypermodel
/// for Hyper init and shared parameters for Shared init.
pub fn peft_finetune(
    base: &Models,
    peft: &PeftConfig,
    task: &Task,
    init: InitKind,
    config: &FinetuneConfig,
) -> Result<FinetuneReport> {
    if config.lrs.is_empty() || config.seeds.is_empty() {
        return Err(Error::config("finetune", "needs at least one learning rate and one seed"));
    }
    let shared = match (init, &base.shared) {
        (InitKind::Shared, Some(h)) => Some(h.extract(&base.store)?),
        (InitKind::Shared, None) => return Err(Error::Contract("Shared init needs shared PEFT parameters".into())),
        _ => None,
    };
    let tasks = std::slice::from_ref(task);
    let mut curves = Vec::new();
    for &lr in &config.lrs {
        for &seed in &config.seeds {
            let mut rng = stream_rng(seed, INIT_STREAM);
            let shots = eval_shots(task, config.n_shots, seed);
            let scheme = match init {
                InitKind::Rand => InitScheme::Rand,
                InitKind::Shared => InitScheme::Shared(shared.as_ref().expect("extracted")),
                InitKind::Hyper => {
                    let hyper = base
                        .hyper
                        .as_ref()
                        .ok_or_else(|| Error::Contract("Hyper init needs a hypermodel".into()))?;
                    InitScheme::Hyper {
                        model: hyper,
                        store: &base.store,
                        shots: &shots,
                    }
                }
            };
            let params = init_peft(peft, &base.down.config, scheme, &mut rng)?;
            let mut models = base.clone();
            models.finetune = None;
            models.add_finetune(&params)?;
            let train = TrainConfig {
                steps: config.steps.max(1),
                batch_size: config.batch_size,
                lr,
                seed,
                k_max: 0,
                max_len_down: config.max_len_down,
                max_len_tgt: config.max_len_tgt,
                mode: Mode::PeftOnly,
                ..TrainConfig::desk()
            };
            let mut trainer = Trainer::new(train.clone(), Objective::Tasks { tasks })?;
            let mut points = Vec::new();
            let mut marks: Vec<usize> = config.eval_marks.iter().map(|&m| m.min(config.steps)).collect();
            marks.sort_unstable();
            marks.dedup();
            for mark in marks {
                if mark > 0 {
                    trainer.run_until(&mut models, mark, |_, _, _| Ok(()))?;
                }
                let ctx = EvalContext {
                    fewshot_context: None,
                    ..models.eval_context(&train)
                };
                let handle = models.finetune.as_ref().expect("installed");
                let (value, _) = eval_with_adapter(&ctx, task, Adapter::Store(handle), None)?;
                points.push((mark, value));
            }
            curves.push(Curve { lr, seed, points });
        }
    }
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let step0_mean = mean(&mut curves.iter().filter(|c| c.lr == config.lrs[0]).map(|c| c.points.first().map_or(f64::NAN, |p| p.1)));
    let mut best_lr = config.lrs[0];
    let mut best_final_mean = f64::NEG_INFINITY;
    for &lr in &config.lrs {
        let m = mean(&mut curves.iter().filter(|c| c.lr == lr).map(Curve::final_value));
        if m > best_final_mean {
            best_final_mean = m;
            best_lr = lr;
        }
    }
    Ok(FinetuneReport {
        task: task.name.clone(),
        init,
        curves,
        step0_mean,
        best_lr,
        best_final_mean,
    })
}
