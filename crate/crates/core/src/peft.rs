//! PEFT parameters: flat prefixes, MLP-reparameterized prefixes and gated
//! LoRA deltas. Values live in [`PeftParams`], a named-tensor container; for
//! training they are installed into a [`ParamStore`] and injected into a
//! forward pass through [`PeftHandle`].

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{self, Dtype};
use crate::data::FewShotSet;
use crate::error::{Error, Result};
use crate::hyper::HyperModel;
use crate::model::{AttentionInjection, LoraDelta, ModelConfig, PeftVars, NORM_EPS};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const HPFT_MAGIC: &[u8; 4] = b"HPFT";
pub const HPFT_VERSION: u32 = 1;

/// Standard deviation of randomly initialized prefixes and LoRA down maps.
pub const RAND_STD: f64 = 0.02;
/// Raw gate of a freshly initialized LoRA adapter (effective gate tanh(1)).
/// With `up = 0` the adapter is still an exact no-op, but a zero gate would
/// also zero every gradient reaching `up` and `down`.
pub const RAND_LORA_RAW_GATE: f64 = 1.0;

/// Attention types carrying LoRA deltas, in row-block order.
pub const ATTN_TYPES: [&str; 3] = ["enc", "dec", "cross"];
pub const LORA_MAPS: [&str; 2] = ["q", "v"];
/// Prefix heads in `[L, 2, 2, P, H]` order: (stack, key/value).
pub const PREFIX_HEADS: [&str; 4] = ["enc_k", "enc_v", "dec_k", "dec_v"];
pub const HEAD_PARTS: [&str; 5] = ["norm", "w1", "b1", "w2", "b2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftKind {
    PrefixFlat,
    PrefixMlp,
    Lora,
}

impl PeftKind {
    pub fn name(self) -> &'static str {
        match self {
            PeftKind::PrefixFlat => "prefix_flat",
            PeftKind::PrefixMlp => "prefix_mlp",
            PeftKind::Lora => "lora",
        }
    }

    pub fn is_prefix(self) -> bool {
        self != PeftKind::Lora
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeftConfig {
    pub kind: PeftKind,
    /// Prefix length P (prefix kinds).
    pub prefix_len: usize,
    /// LoRA rank R.
    pub rank: usize,
    /// Hidden width of the prefix reparameterization heads.
    pub reparam_hidden: usize,
}

impl PeftConfig {
    pub fn prefix(kind: PeftKind, prefix_len: usize) -> Self {
        Self {
            kind,
            prefix_len,
            rank: 4,
            reparam_hidden: 32,
        }
    }

    pub fn lora(rank: usize) -> Self {
        Self {
            kind: PeftKind::Lora,
            prefix_len: 8,
            rank,
            reparam_hidden: 32,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        match self.kind {
            PeftKind::PrefixFlat | PeftKind::PrefixMlp if self.prefix_len < 1 => {
                Err(Error::config(format!("{path}.prefix_len"), "must be >= 1 for prefix kinds"))
            }
            PeftKind::PrefixMlp if self.reparam_hidden < 1 => {
                Err(Error::config(format!("{path}.reparam_hidden"), "must be >= 1"))
            }
            PeftKind::Lora if self.rank < 1 => Err(Error::config(format!("{path}.rank"), "must be >= 1")),
            _ => Ok(()),
        }
    }
}

pub fn lora_name(t: &str, m: &str, layer: usize, part: &str) -> String {
    format!("lora.{t}.{m}.{layer}.{part}")
}

pub fn lora_gate_name(t: &str, m: &str) -> String {
    format!("lora.{t}.{m}.raw_gate")
}

pub fn head_param_name(prefix: &str, head: &str, part: &str) -> String {
    format!("{prefix}{head}.{part}")
}

/// Number of trainable scalars for `config` on a downstream model.
pub fn peft_param_count(config: &PeftConfig, model: &ModelConfig) -> usize {
    let (l, h) = (model.n_layers, model.d_model);
    match config.kind {
        PeftKind::PrefixFlat => l * 2 * 2 * config.prefix_len * h,
        PeftKind::PrefixMlp if config.prefix_len == 0 => 0,
        PeftKind::PrefixMlp => {
            let f = config.reparam_hidden;
            2 * config.prefix_len * h + 4 * (h + h * f + f + f * l * h + l * h)
        }
        PeftKind::Lora => ATTN_TYPES.len() * LORA_MAPS.len() * (l * 2 * config.rank * h + l),
    }
}

/// One set of PEFT parameters for a downstream model with `n_layers` layers
/// and width `d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct PeftParams {
    pub config: PeftConfig,
    pub n_layers: usize,
    pub d_model: usize,
    tensors: BTreeMap<String, Tensor>,
}

impl PeftParams {
    /// Fields of `config` that do not apply to its kind are zeroed, and the
    /// Prefix-MLP hidden width is read from the tensors.
    pub fn new(mut config: PeftConfig, n_layers: usize, d_model: usize, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        match config.kind {
            PeftKind::Lora => (config.prefix_len, config.reparam_hidden) = (0, 0),
            PeftKind::PrefixFlat => (config.rank, config.reparam_hidden) = (0, 0),
            PeftKind::PrefixMlp => {
                config.rank = 0;
                let w1 = tensors.get(&head_param_name("prefix_mlp.", "enc_k", "w1"));
                config.reparam_hidden = w1.and_then(|t| t.shape().get(1).copied()).unwrap_or(0);
            }
        }
        let p = Self {
            config,
            n_layers,
            d_model,
            tensors,
        };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        let (l, h) = (self.n_layers, self.d_model);
        let mut expected: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        match self.config.kind {
            PeftKind::PrefixFlat => {
                expected.insert("prefix".into(), vec![l, 2, 2, self.config.prefix_len, h]);
            }
            PeftKind::Lora => {
                let r = self.config.rank;
                for t in ATTN_TYPES {
                    for m in LORA_MAPS {
                        for layer in 0..l {
                            expected.insert(lora_name(t, m, layer, "down"), vec![r, h]);
                            expected.insert(lora_name(t, m, layer, "up"), vec![r, h]);
                        }
                        expected.insert(lora_gate_name(t, m), vec![l]);
                    }
                }
            }
            PeftKind::PrefixMlp => {
                // Input width E and hidden width F are taken from the tensors.
                let emb = self.get("prefix_mlp.emb")?;
                let e = emb.shape().get(1).copied().unwrap_or(0);
                let f = self.get(&head_param_name("prefix_mlp.", "enc_k", "w1"))?.shape().get(1).copied().unwrap_or(0);
                expected.insert("prefix_mlp.emb".into(), vec![2 * self.config.prefix_len, e]);
                for head in PREFIX_HEADS {
                    for (part, shape) in HEAD_PARTS.iter().zip(head_shapes(e, f, l * h)) {
                        expected.insert(head_param_name("prefix_mlp.", head, part), shape);
                    }
                }
            }
        }
        let names: Vec<&String> = self.tensors.keys().collect();
        if names != expected.keys().collect::<Vec<_>>() {
            return Err(Error::Format(format!(
                "{} parameters have names {names:?}, expected {:?}",
                self.config.kind.name(),
                expected.keys().collect::<Vec<_>>()
            )));
        }
        for (name, shape) in &expected {
            let got = self.tensors[name].shape();
            if got != shape.as_slice() {
                return Err(Error::shape("peft", (name, shape), got));
            }
            if !self.tensors[name].is_finite() {
                return Err(Error::NonFinite { op: "peft" });
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> PeftKind {
        self.config.kind
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing PEFT tensor {name}")))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn bitwise_eq(&self, other: &PeftParams) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, x), (b, y))| a == b && x.bitwise_eq(y))
    }

    /// Rounds every value to the nearest f32, the precision of PEFT files.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.round_to_f32();
        }
    }

    /// Injections for a forward pass, with every tensor a graph constant.
    pub fn inject(&self, g: &mut Graph) -> Result<PeftVars> {
        let mut fetch = |g: &mut Graph, name: &str| -> Result<Var> { Ok(g.constant(self.get(name)?.clone())) };
        build_vars(g, &self.config, self.n_layers, self.d_model, &mut fetch)
    }

    /// Registers every tensor in `store` under `prefix` (e.g. `peft.`).
    pub fn install(&self, store: &mut ParamStore, prefix: &str) -> Result<PeftHandle> {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.tensors {
            ids.insert(name.clone(), store.add(format!("{prefix}{name}"), t.clone())?);
        }
        Ok(PeftHandle {
            config: self.config.clone(),
            n_layers: self.n_layers,
            d_model: self.d_model,
            prefix: prefix.to_string(),
            ids,
        })
    }
}

fn head_shapes(e: usize, f: usize, out: usize) -> [Vec<usize>; 5] {
    [vec![e], vec![e, f], vec![f], vec![f, out], vec![out]]
}

/// PEFT parameters registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct PeftHandle {
    pub config: PeftConfig,
    pub n_layers: usize,
    pub d_model: usize,
    prefix: String,
    ids: BTreeMap<String, ParamId>,
}

impl PeftHandle {
    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids.values().copied()
    }

    pub fn inject(&self, g: &mut Graph) -> Result<PeftVars> {
        let mut fetch = |g: &mut Graph, name: &str| -> Result<Var> {
            let id = self
                .ids
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing PEFT tensor {name}")))?;
            Ok(g.param(*id))
        };
        build_vars(g, &self.config, self.n_layers, self.d_model, &mut fetch)
    }

    /// Current values as a standalone [`PeftParams`].
    pub fn extract(&self, store: &ParamStore) -> Result<PeftParams> {
        let tensors = self.ids.iter().map(|(n, &id)| (n.clone(), store.value(id).clone())).collect();
        PeftParams::new(self.config.clone(), self.n_layers, self.d_model, tensors)
    }
}

type Fetch<'a> = dyn FnMut(&mut Graph, &str) -> Result<Var> + 'a;

fn build_vars(g: &mut Graph, config: &PeftConfig, l: usize, h: usize, fetch: &mut Fetch) -> Result<PeftVars> {
    match config.kind {
        PeftKind::PrefixFlat => {
            let prefix = fetch(g, "prefix")?;
            prefix_injections(g, prefix, l, config.prefix_len, h)
        }
        PeftKind::PrefixMlp => {
            let emb = fetch(g, "prefix_mlp.emb")?;
            let heads = PREFIX_HEADS.map(|head| HeadVars::fetch(g, "prefix_mlp.", head, fetch));
            let [a, b, c, d] = heads;
            let prefix = prefix_mlp_graph(g, emb, &[a?, b?, c?, d?], l, config.prefix_len, h)?;
            prefix_injections(g, prefix, l, config.prefix_len, h)
        }
        PeftKind::Lora => {
            let mut lv = LoraVars::default();
            for (ti, t) in ATTN_TYPES.iter().enumerate() {
                for (mi, m) in LORA_MAPS.iter().enumerate() {
                    for layer in 0..l {
                        lv.down[ti][mi].push(fetch(g, &lora_name(t, m, layer, "down"))?);
                        lv.up[ti][mi].push(fetch(g, &lora_name(t, m, layer, "up"))?);
                    }
                    lv.raw_gate[ti][mi] = Some(fetch(g, &lora_gate_name(t, m))?);
                }
            }
            lora_injections(g, &lv, l)
        }
    }
}

/// Graph handles of one head MLP: norm → linear → tanh → linear.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub norm: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl HeadVars {
    fn fetch(g: &mut Graph, prefix: &str, head: &str, fetch: &mut Fetch) -> Result<Self> {
        let [norm, w1, b1, w2, b2] = HEAD_PARTS.map(|part| fetch(g, &head_param_name(prefix, head, part)));
        Ok(Self {
            norm: norm?,
            w1: w1?,
            b1: b1?,
            w2: w2?,
            b2: b2?,
        })
    }

    pub fn from_store(g: &mut Graph, ids: &HeadIds) -> Self {
        Self {
            norm: g.param(ids.norm),
            w1: g.param(ids.w1),
            b1: g.param(ids.b1),
            w2: g.param(ids.w2),
            b2: g.param(ids.b2),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub norm: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl HeadIds {
    /// Registers a head named `{prefix}{head}.*`. The first linear is
    /// N(0, 1/in), the final linear N(0, out_std²) with zero bias.
    pub fn add<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        head: &str,
        dims: (usize, usize, usize),
        out_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (e, f, out) = dims;
        let name = |part: &str| head_param_name(prefix, head, part);
        Ok(Self {
            norm: store.add(name("norm"), Tensor::full(&[e], 1.0))?,
            w1: store.add(name("w1"), Tensor::randn(&[e, f], 1.0 / (e as f64).sqrt(), rng))?,
            b1: store.add(name("b1"), Tensor::zeros(&[f]))?,
            w2: store.add(name("w2"), Tensor::randn(&[f, out], out_std, rng))?,
            b2: store.add(name("b2"), Tensor::zeros(&[out]))?,
        })
    }
}

/// Applies a head to each row of `x: [N, E]`, giving `[N, out]`.
pub fn head_forward(g: &mut Graph, head: &HeadVars, x: Var) -> Result<Var> {
    let y = g.rms_norm(x, head.norm, NORM_EPS)?;
    let y = g.matmul(y, head.w1)?;
    let y = g.add_bias(y, head.b1)?;
    let y = g.tanh(y)?;
    let y = g.matmul(y, head.w2)?;
    g.add_bias(y, head.b2)
}

/// Runs the four prefix heads over `emb: [2P, E]` (rows `0..P` to the encoder
/// heads, `P..2P` to the decoder heads) and lays the outputs out as
/// `[L, 2, 2, P, H]`.
pub fn prefix_mlp_graph(g: &mut Graph, emb: Var, heads: &[HeadVars; 4], l: usize, p: usize, h: usize) -> Result<Var> {
    let shape = g.shape(emb).to_vec();
    if shape.len() != 2 || shape[0] != 2 * p {
        return Err(Error::shape("prefix_mlp", format!("[{}, E]", 2 * p), shape));
    }
    let enc_rows = g.slice_rows(emb, 0, p)?;
    let dec_rows = g.slice_rows(emb, p, 2 * p)?;
    let mut outs = Vec::with_capacity(4);
    for (i, head) in heads.iter().enumerate() {
        let rows = if i < 2 { enc_rows } else { dec_rows };
        let o = head_forward(g, head, rows)?;
        if g.shape(o) != [p, l * h] {
            return Err(Error::shape("prefix head", [p, l * h], g.shape(o)));
        }
        outs.push(o);
    }
    let stacked = g.concat_rows(&outs)?;
    let lh = l * h;
    let mut index = Vec::with_capacity(l * 4 * p * h);
    for layer in 0..l {
        for slot in 0..4 {
            for row in 0..p {
                let src_row = slot * p + row;
                index.extend((0..h).map(|c| src_row * lh + layer * h + c));
            }
        }
    }
    g.gather(stacked, index, vec![l, 2, 2, p, h])
}

/// Splits `prefix: [L, 2, 2, P, H]` into per-layer key/value prefixes for the
/// encoder and decoder self-attention.
pub fn prefix_injections(g: &mut Graph, prefix: Var, l: usize, p: usize, h: usize) -> Result<PeftVars> {
    if g.shape(prefix) != [l, 2, 2, p, h] {
        return Err(Error::shape("prefix", [l, 2, 2, p, h], g.shape(prefix)));
    }
    let mut out = PeftVars::none(l);
    let block = p * h;
    for layer in 0..l {
        for stack in 0..2 {
            let base = (layer * 2 + stack) * 2 * block;
            let k = g.slice_flat(prefix, base, &[p, h])?;
            let v = g.slice_flat(prefix, base + block, &[p, h])?;
            let target = if stack == 0 { &mut out.enc } else { &mut out.dec };
            target[layer].prefix = Some((k, v));
        }
    }
    Ok(out)
}

/// LoRA tensors indexed `[attention type][map][layer]`, gates `[type][map]`.
#[derive(Debug, Default)]
pub struct LoraVars {
    pub down: [[Vec<Var>; 2]; 3],
    pub up: [[Vec<Var>; 2]; 3],
    pub raw_gate: [[Option<Var>; 2]; 3],
}

pub fn lora_injections(g: &mut Graph, lv: &LoraVars, l: usize) -> Result<PeftVars> {
    let mut out = PeftVars::none(l);
    for ti in 0..3 {
        for mi in 0..2 {
            let raw = lv.raw_gate[ti][mi].ok_or_else(|| Error::Contract("missing LoRA gate".into()))?;
            if g.shape(raw) != [l] {
                return Err(Error::shape("lora gate", [l], g.shape(raw)));
            }
            for layer in 0..l {
                let r = g.slice_flat(raw, layer, &[1])?;
                let gate = g.tanh(r)?;
                let delta = LoraDelta {
                    down: lv.down[ti][mi][layer],
                    up: lv.up[ti][mi][layer],
                    gate,
                };
                let inj: &mut AttentionInjection = match ti {
                    0 => &mut out.enc[layer],
                    1 => &mut out.dec[layer],
                    _ => &mut out.cross[layer],
                };
                if mi == 0 {
                    inj.lora_q = Some(delta);
                } else {
                    inj.lora_v = Some(delta);
                }
            }
        }
    }
    Ok(out)
}

/// Where initial PEFT parameters come from.
pub enum InitScheme<'a> {
    Rand,
    /// Copy of multi-task-trained shared parameters. A Prefix-MLP source
    /// initializes Prefix-Flat parameters through [`flatten_reparam`].
    Shared(&'a PeftParams),
    /// Generated by a hypermodel from a few-shot set.
    Hyper {
        model: &'a HyperModel,
        store: &'a ParamStore,
        shots: &'a FewShotSet,
    },
}

pub fn init_peft<R: Rng>(config: &PeftConfig, model: &ModelConfig, scheme: InitScheme, rng: &mut R) -> Result<PeftParams> {
    config.validate("peft")?;
    let (l, h) = (model.n_layers, model.d_model);
    let out = match scheme {
        InitScheme::Rand => rand_init(config, l, h, rng)?,
        InitScheme::Shared(src) => match (src.kind(), config.kind) {
            (PeftKind::PrefixMlp, PeftKind::PrefixFlat) => flatten_reparam(src)?,
            (a, b) if a == b => src.clone(),
            (a, b) => {
                return Err(Error::config(
                    "peft.kind",
                    format!("shared {} parameters cannot initialize {}", a.name(), b.name()),
                ))
            }
        },
        InitScheme::Hyper { model, store, shots } => model.generate_params(store, shots, config.kind)?,
    };
    if out.n_layers != l || out.d_model != h {
        return Err(Error::config(
            "peft",
            format!("parameters built for L={} H={}, model has L={l} H={h}", out.n_layers, out.d_model),
        ));
    }
    if out.kind() != config.kind
        || (config.kind.is_prefix() && out.config.prefix_len != config.prefix_len)
        || (config.kind == PeftKind::Lora && out.config.rank != config.rank)
    {
        return Err(Error::config("peft", "initial parameters do not match the PEFT config"));
    }
    Ok(out)
}

fn rand_init<R: Rng>(config: &PeftConfig, l: usize, h: usize, rng: &mut R) -> Result<PeftParams> {
    let mut t = BTreeMap::new();
    match config.kind {
        PeftKind::PrefixFlat => {
            t.insert("prefix".into(), Tensor::randn(&[l, 2, 2, config.prefix_len, h], RAND_STD, rng));
        }
        PeftKind::Lora => {
            let r = config.rank;
            for ty in ATTN_TYPES {
                for m in LORA_MAPS {
                    for layer in 0..l {
                        t.insert(lora_name(ty, m, layer, "down"), Tensor::randn(&[r, h], RAND_STD, rng));
                        t.insert(lora_name(ty, m, layer, "up"), Tensor::zeros(&[r, h]));
                    }
                    t.insert(lora_gate_name(ty, m), Tensor::full(&[l], RAND_LORA_RAW_GATE));
                }
            }
        }
        PeftKind::PrefixMlp => {
            let f = config.reparam_hidden;
            t.insert("prefix_mlp.emb".into(), Tensor::randn(&[2 * config.prefix_len, h], 1.0, rng));
            let mut tmp = ParamStore::new();
            for head in PREFIX_HEADS {
                HeadIds::add(&mut tmp, "prefix_mlp.", head, (h, f, l * h), RAND_STD, rng)?;
            }
            for (_, p) in tmp.iter() {
                t.insert(p.name.clone(), p.value.clone());
            }
        }
    }
    PeftParams::new(config.clone(), l, h, t)
}

/// Evaluates the Prefix-MLP reparameterization, giving `[L, 2, 2, P, H]`.
pub fn prefix_mlp_forward(reparam: &PeftParams) -> Result<Tensor> {
    if reparam.kind() != PeftKind::PrefixMlp {
        return Err(Error::KindMismatch {
            expected: PeftKind::PrefixMlp.name().into(),
            found: reparam.kind().name().into(),
        });
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let mut fetch = |g: &mut Graph, name: &str| -> Result<Var> { Ok(g.constant(reparam.get(name)?.clone())) };
    let emb = fetch(&mut g, "prefix_mlp.emb")?;
    let [a, b, c, d] = PREFIX_HEADS.map(|head| HeadVars::fetch(&mut g, "prefix_mlp.", head, &mut fetch));
    let out = prefix_mlp_graph(&mut g, emb, &[a?, b?, c?, d?], reparam.n_layers, reparam.config.prefix_len, reparam.d_model)?;
    Ok(g.value(out).clone())
}

/// Standalone Prefix-Flat parameters holding the reparameterization's output.
pub fn flatten_reparam(reparam: &PeftParams) -> Result<PeftParams> {
    let prefix = prefix_mlp_forward(reparam)?;
    let config = PeftConfig {
        kind: PeftKind::PrefixFlat,
        ..reparam.config.clone()
    };
    PeftParams::new(config, reparam.n_layers, reparam.d_model, BTreeMap::from([("prefix".to_string(), prefix)]))
}

fn header_meta(p: &PeftParams) -> serde_json::Value {
    let mut meta = json!({
        "kind": p.kind().name(),
        "L": p.n_layers,
        "H": p.d_model,
    });
    match p.kind() {
        PeftKind::Lora => meta["R"] = json!(p.config.rank),
        kind => {
            meta["P"] = json!(p.config.prefix_len);
            if kind == PeftKind::PrefixMlp {
                meta["reparam_hidden"] = json!(p.config.reparam_hidden);
            }
        }
    }
    meta
}

pub fn encode_peft(params: &PeftParams) -> Result<Vec<u8>> {
    let tensors: Vec<(&str, &Tensor)> = params.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    container::encode(HPFT_MAGIC, HPFT_VERSION, Dtype::F32, header_meta(params), &tensors)
}

/// Writes an HPFT file. Values are stored as f32.
pub fn save_peft(params: &PeftParams, path: &Path) -> Result<()> {
    container::write(path, &encode_peft(params)?)
}

pub fn decode_peft(bytes: &[u8]) -> Result<PeftParams> {
    let d = container::decode(bytes, HPFT_MAGIC, HPFT_VERSION)?;
    let meta = &d.meta;
    let field = |k: &str| -> Result<usize> {
        meta[k]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Error::Format(format!("PEFT header lacks {k}")))
    };
    let kind: PeftKind = serde_json::from_value(meta["kind"].clone()).map_err(|e| Error::Format(format!("PEFT kind: {e}")))?;
    let config = match kind {
        PeftKind::Lora => PeftConfig::lora(field("R")?),
        PeftKind::PrefixFlat => PeftConfig::prefix(kind, field("P")?),
        PeftKind::PrefixMlp => PeftConfig {
            reparam_hidden: field("reparam_hidden")?,
            ..PeftConfig::prefix(kind, field("P")?)
        },
    };
    PeftParams::new(config, field("L")?, field("H")?, d.tensors.into_iter().collect())
}

pub fn load_peft(path: &Path) -> Result<PeftParams> {
    decode_peft(&std::fs::read(path)?)
}

/// Loads an HPFT file, requiring parameters of `kind`.
pub fn load_peft_as(path: &Path, kind: PeftKind) -> Result<PeftParams> {
    let p = load_peft(path)?;
    if p.kind() != kind {
        return Err(Error::KindMismatch {
            expected: kind.name().into(),
            found: p.kind().name().into(),
        });
    }
    Ok(p)
}
