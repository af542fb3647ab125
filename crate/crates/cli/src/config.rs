//! Run configuration: one JSON document with every section, filled from
//! defaults, an optional file and `--a.b=value` overrides.

use std::path::{Path, PathBuf};

use hyperpeft::data::SegmentLens;
use hyperpeft::eval::AdapterSource;
use hyperpeft::hyper::HyperModelConfig;
use hyperpeft::model::ModelConfig;
use hyperpeft::peft::{PeftConfig, PeftKind};
use hyperpeft::train::{FinetuneConfig, InitKind, TrainConfig};
use hyperpeft::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub hyper: HyperModelConfig,
    pub peft: PeftConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub io: IoConfig,
    pub eval: EvalConfig,
    pub finetune: FinetuneSection,
    pub gradcheck: GradcheckConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub corpus_seed: u64,
    pub corpus_tokens: usize,
    pub synth_seed: u64,
    /// Task JSONL replacing the synthetic suite.
    pub task_file: Option<PathBuf>,
    /// Names of held-out tasks in `task_file`; the rest are held in.
    pub held_out_tasks: Vec<String>,
    pub caclm: SegmentLens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    /// Percentages of `train.steps` at which hyperpretraining checkpoints are kept.
    pub checkpoint_marks: Vec<u32>,
    /// Parameters to start from. Components missing from the file keep their
    /// fresh initialization.
    pub init_checkpoint: Option<PathBuf>,
    /// Full training state to continue from.
    pub resume: Option<PathBuf>,
    /// Stop once this many steps are complete; the schedule still spans
    /// `train.steps`, so the run can be resumed later.
    pub stop_at: Option<usize>,
    /// HPFT file: read by `eval` with the finetuned adapter, written by `gen-adapter`.
    pub adapter: Option<PathBuf>,
    /// JSONL few-shot examples for `gen-adapter`.
    pub shots_file: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    HeldIn,
    HeldOut,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub adapter: AdapterSource,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub split: Split,
    /// Also report the mean target NLL per task.
    pub loss: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSection {
    pub inits: Vec<InitKind>,
    pub split: Split,
    #[serde(flatten)]
    pub protocol: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub coords: usize,
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
    pub shots: usize,
    /// Std of the random values written into the hypermodel output heads when
    /// no checkpoint is given; zero heads would hide upstream gradients.
    pub head_std: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        let peft = PeftConfig::prefix(PeftKind::PrefixFlat, 8);
        let mut hyper = HyperModelConfig::desk(&model, peft.clone());
        hyper.backbone.max_src_len = 128;
        let train = TrainConfig {
            max_len_hyper: 128,
            ..TrainConfig::desk()
        };
        Self {
            model,
            hyper,
            peft,
            train,
            data: DataConfig {
                corpus_seed: 0,
                corpus_tokens: 200_000,
                synth_seed: 0,
                task_file: None,
                held_out_tasks: Vec::new(),
                caclm: SegmentLens::desk(),
            },
            io: IoConfig {
                out_dir: PathBuf::from("runs/default"),
                checkpoint_marks: vec![25, 50, 75, 100],
                init_checkpoint: None,
                resume: None,
                stop_at: None,
                adapter: None,
                shots_file: None,
            },
            eval: EvalConfig {
                adapter: AdapterSource::HyperGenerated,
                k: 16,
                seeds: vec![0, 1, 2],
                split: Split::HeldOut,
                loss: false,
            },
            finetune: FinetuneSection {
                inits: vec![InitKind::Rand, InitKind::Hyper],
                split: Split::HeldOut,
                protocol: FinetuneConfig::desk(),
            },
            gradcheck: GradcheckConfig {
                coords: 200,
                eps: 1e-5,
                tol: 1e-4,
                seed: 0,
                shots: 4,
                head_std: 0.3,
            },
        }
    }
}

fn config_err(path: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

/// Writes `src` over `dst`, rejecting keys that `dst` does not have.
fn merge(dst: &mut Value, src: Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = d.get_mut(&k).ok_or_else(|| config_err(&sub, "unknown field"))?;
                merge(slot, v, &sub)?;
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

/// Sets the value at a dotted path, which must already exist.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    for key in path.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(key),
            Value::Array(a) => key.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| config_err(path, "unknown field"))?;
    }
    *cur = value;
    Ok(())
}

/// Parses `--a.b=value`. The value is read as JSON, or as a plain string if
/// it is not valid JSON.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let body = arg
        .strip_prefix("--")
        .ok_or_else(|| config_err(arg, "overrides look like --section.field=value"))?;
    let (path, raw) = body
        .split_once('=')
        .ok_or_else(|| config_err(body, "override needs =value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.to_string(), value))
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides`. A file holding a run manifest
    /// contributes the config recorded in it.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(file) = file {
            let text = std::fs::read_to_string(file)?;
            let mut doc: Value = serde_json::from_str(&text).map_err(|e| config_err(file.display().to_string(), e.to_string()))?;
            if doc.get("command").is_some() {
                if let Some(cfg) = doc.get_mut("config") {
                    doc = cfg.take();
                }
            }
            merge(&mut value, doc, "")?;
        }
        for arg in overrides {
            let (path, v) = parse_override(arg)?;
            set_path(&mut value, &path, v)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| config_err(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate("model")?;
        self.peft.validate("peft")?;
        self.hyper.validate("hyper")?;
        self.train.validate("train")?;
        if self.hyper.target != self.peft {
            return Err(config_err("hyper.target", "must equal peft"));
        }
        if self.hyper.downstream != self.model {
            return Err(config_err("hyper.downstream", "must equal model"));
        }
        if self.hyper.backbone.d_model != self.model.d_model || self.hyper.backbone.n_layers != self.model.n_layers {
            return Err(config_err("hyper.backbone", "must match the downstream width and depth"));
        }
        if self.train.max_len_hyper > self.hyper.backbone.max_src_len {
            return Err(config_err("train.max_len_hyper", "exceeds hyper.backbone.max_src_len"));
        }
        if self.train.max_len_down > self.model.max_src_len {
            return Err(config_err("train.max_len_down", "exceeds model.max_src_len"));
        }
        if self.train.max_len_tgt >= self.model.max_tgt_len {
            return Err(config_err("train.max_len_tgt", "must leave room for EOS within model.max_tgt_len"));
        }
        if self.data.corpus_tokens < self.data.caclm.total() {
            return Err(config_err("data.corpus_tokens", "smaller than one pretraining window"));
        }
        if self.eval.seeds.is_empty() {
            return Err(config_err("eval.seeds", "needs at least one seed"));
        }
        if self.finetune.protocol.lrs.is_empty() {
            return Err(config_err("finetune.lrs", "needs at least one learning rate"));
        }
        if self.finetune.protocol.seeds.is_empty() {
            return Err(config_err("finetune.seeds", "needs at least one seed"));
        }
        if self.gradcheck.coords < 1 {
            return Err(config_err("gradcheck.coords", "must be >= 1"));
        }
        Ok(())
    }
}
