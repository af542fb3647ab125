//! The hypermodel: an encoder over few-shot tokens, a non-causal decoder run
//! over a fixed set of learned query vectors, and MLP heads that turn the
//! decoder outputs into prefix or LoRA parameters.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{format_fewshot, FewShotSet};
use crate::error::{Error, Result};
use crate::model::{EncoderDecoder, ModelConfig, PeftVars};
use crate::peft::{
    head_forward, head_param_name, lora_gate_name, lora_injections, lora_name, prefix_injections, prefix_mlp_graph,
    HeadIds, HeadVars, LoraVars, PeftConfig, PeftKind, PeftParams, ATTN_TYPES, HEAD_PARTS, LORA_MAPS, PREFIX_HEADS,
    RAND_LORA_RAW_GATE, RAND_STD,
};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const HYPER_PREFIX: &str = "hyper.";
/// Standard deviation of the learned decoder queries.
pub const QUERY_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperModelConfig {
    pub backbone: ModelConfig,
    pub target: PeftConfig,
    pub downstream: ModelConfig,
}

impl HyperModelConfig {
    /// Backbone matching `downstream` in width and depth, reading up to 256
    /// few-shot tokens.
    pub fn desk(downstream: &ModelConfig, target: PeftConfig) -> Self {
        let backbone = ModelConfig {
            max_src_len: 256,
            decoder_causal: false,
            ..downstream.clone()
        };
        Self {
            backbone,
            target,
            downstream: downstream.clone(),
        }
    }

    pub fn num_queries(&self) -> usize {
        match self.target.kind {
            PeftKind::Lora => 3 * self.downstream.n_layers,
            _ => 2 * self.target.prefix_len,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        self.backbone.validate(&format!("{path}.backbone"))?;
        self.downstream.validate(&format!("{path}.downstream"))?;
        self.target.validate(&format!("{path}.target"))?;
        if self.backbone.decoder_causal {
            return Err(Error::config(
                format!("{path}.backbone.decoder_causal"),
                "the hypermodel decoder must be non-causal",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HyperModel {
    pub config: HyperModelConfig,
    pub backbone: EncoderDecoder,
    queries: ParamId,
    /// Prefix targets: enc_k, enc_v, dec_k, dec_v. LoRA targets: the six
    /// (type, map) heads in `ATTN_TYPES` × `LORA_MAPS` order.
    heads: Vec<HeadIds>,
    /// LoRA targets only, `[type][map]`, each of shape `[L]`.
    raw_gates: Vec<[ParamId; 2]>,
}

fn lora_head_name(t: &str, m: &str) -> String {
    format!("{t}_{m}")
}

impl HyperModel {
    /// Registers a hypermodel under `hyper.`. Final head layers start at zero
    /// except the `down` half of LoRA heads, which is random so that
    /// gradients reach the generated `up` maps from the first step.
    pub fn new<R: Rng>(config: HyperModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate("hyper")?;
        let backbone = EncoderDecoder::new_backbone(config.backbone.clone(), store, HYPER_PREFIX, rng)?;
        let hh = config.backbone.d_model;
        let (l, h) = (config.downstream.n_layers, config.downstream.d_model);
        let queries = store.add(
            format!("{HYPER_PREFIX}queries"),
            Tensor::randn(&[config.num_queries(), hh], QUERY_STD, rng),
        )?;
        let head_prefix = format!("{HYPER_PREFIX}head.");
        let mut heads = Vec::new();
        let mut raw_gates = Vec::new();
        if config.target.kind.is_prefix() {
            for head in PREFIX_HEADS {
                let ids = HeadIds::add(store, &head_prefix, head, (hh, hh, l * h), 0.0, rng)?;
                heads.push(ids);
            }
        } else {
            let rh = config.target.rank * h;
            for t in ATTN_TYPES {
                let mut gates = Vec::with_capacity(2);
                for m in LORA_MAPS {
                    let ids = HeadIds::add(store, &head_prefix, &lora_head_name(t, m), (hh, hh, 2 * rh), 0.0, rng)?;
                    let noise = Tensor::randn(&[hh, rh], RAND_STD, rng);
                    let w2 = store.value_mut(ids.w2);
                    for (row, src) in w2.data_mut().chunks_exact_mut(2 * rh).zip(noise.data().chunks_exact(rh)) {
                        row[rh..].copy_from_slice(src);
                    }
                    heads.push(ids);
                    gates.push(store.add(
                        format!("{HYPER_PREFIX}{}", lora_gate_name(t, m)),
                        Tensor::full(&[l], RAND_LORA_RAW_GATE),
                    )?);
                }
                raw_gates.push([gates[0], gates[1]]);
            }
        }
        Ok(Self {
            config,
            backbone,
            queries,
            heads,
            raw_gates,
        })
    }

    pub fn freeze(&self, store: &mut ParamStore, frozen: bool) {
        store.set_frozen(HYPER_PREFIX, frozen);
    }

    /// Copies backbone weights with matching names and shapes from a model
    /// registered under `src_prefix` (e.g. the downstream `down.`).
    pub fn init_backbone_from(&self, store: &mut ParamStore, src: &ParamStore, src_prefix: &str) -> usize {
        store.copy_matching(src, src_prefix, HYPER_PREFIX)
    }

    /// Decoder outputs `[Q, H]` for a formatted few-shot sequence.
    pub fn hyper_encode(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Data("hypermodel input is empty".into()));
        }
        let none = PeftVars::none(self.config.backbone.n_layers);
        let enc = self.backbone.encode(g, tokens, &none)?;
        let q = g.param(self.queries);
        self.backbone.decode_hidden(g, q, enc, &none, false)
    }

    fn head_vars(&self, g: &mut Graph) -> Vec<HeadVars> {
        self.heads.iter().map(|ids| HeadVars::from_store(g, ids)).collect()
    }

    /// Generated prefix tensor `[L, 2, 2, P, H]` on the graph.
    pub fn generate_prefix(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        if !self.config.target.kind.is_prefix() {
            return Err(Error::KindMismatch {
                expected: "prefix".into(),
                found: self.config.target.kind.name().into(),
            });
        }
        let hidden = self.hyper_encode(g, tokens)?;
        let heads = self.head_vars(g);
        let heads: [HeadVars; 4] = heads.try_into().expect("four prefix heads");
        let (l, h) = (self.config.downstream.n_layers, self.config.downstream.d_model);
        prefix_mlp_graph(g, hidden, &heads, l, self.config.target.prefix_len, h)
    }

    /// Generated LoRA tensors on the graph. Rows `[0, L)` of the decoder
    /// output feed the encoder heads, `[L, 2L)` the decoder heads and
    /// `[2L, 3L)` the cross-attention heads; each head row is read as
    /// `[2, R, H]` with index 0 the up map and index 1 the down map.
    pub fn generate_lora(&self, g: &mut Graph, tokens: &[usize]) -> Result<LoraVars> {
        if self.config.target.kind != PeftKind::Lora {
            return Err(Error::KindMismatch {
                expected: "lora".into(),
                found: self.config.target.kind.name().into(),
            });
        }
        let hidden = self.hyper_encode(g, tokens)?;
        let heads = self.head_vars(g);
        let (l, h, r) = (self.config.downstream.n_layers, self.config.downstream.d_model, self.config.target.rank);
        let rh = r * h;
        let mut lv = LoraVars::default();
        for ti in 0..3 {
            let rows = g.slice_rows(hidden, ti * l, (ti + 1) * l)?;
            for mi in 0..2 {
                let out = head_forward(g, &heads[ti * 2 + mi], rows)?;
                for layer in 0..l {
                    let base = layer * 2 * rh;
                    lv.up[ti][mi].push(g.slice_flat(out, base, &[r, h])?);
                    lv.down[ti][mi].push(g.slice_flat(out, base + rh, &[r, h])?);
                }
                lv.raw_gate[ti][mi] = Some(g.param(self.raw_gates[ti][mi]));
            }
        }
        Ok(lv)
    }

    /// Downstream injections generated from `tokens`, differentiable with
    /// respect to every hypermodel parameter.
    pub fn generate(&self, g: &mut Graph, tokens: &[usize]) -> Result<PeftVars> {
        let l = self.config.downstream.n_layers;
        if self.config.target.kind == PeftKind::Lora {
            let lv = self.generate_lora(g, tokens)?;
            lora_injections(g, &lv, l)
        } else {
            let prefix = self.generate_prefix(g, tokens)?;
            prefix_injections(g, prefix, l, self.config.target.prefix_len, self.config.downstream.d_model)
        }
    }

    pub fn format(&self, shots: &FewShotSet) -> Result<Vec<usize>> {
        format_fewshot(shots, self.config.backbone.max_src_len)
    }

    /// Generates standalone PEFT parameters of `kind` from a few-shot set.
    /// Prefix hypermodels can emit Prefix-Flat parameters or a Prefix-MLP
    /// whose embeddings are the decoder outputs and whose heads are copies of
    /// the hypermodel heads.
    pub fn generate_params(&self, store: &ParamStore, shots: &FewShotSet, kind: PeftKind) -> Result<PeftParams> {
        self.generate_params_from_tokens(store, &self.format(shots)?, kind)
    }

    pub fn generate_params_from_tokens(&self, store: &ParamStore, tokens: &[usize], kind: PeftKind) -> Result<PeftParams> {
        let target = self.config.target.kind;
        if kind.is_prefix() != target.is_prefix() {
            return Err(Error::config(
                "peft.kind",
                format!("a {} hypermodel cannot generate {} parameters", target.name(), kind.name()),
            ));
        }
        let (l, h) = (self.config.downstream.n_layers, self.config.downstream.d_model);
        let mut g = Graph::new(store).without_frozen_grads();
        let mut tensors = BTreeMap::new();
        match kind {
            PeftKind::PrefixFlat => {
                let p = self.generate_prefix(&mut g, tokens)?;
                tensors.insert("prefix".to_string(), g.value(p).clone());
            }
            PeftKind::PrefixMlp => {
                let hidden = self.hyper_encode(&mut g, tokens)?;
                tensors.insert("prefix_mlp.emb".to_string(), g.value(hidden).clone());
                for (head, ids) in PREFIX_HEADS.iter().zip(&self.heads) {
                    let parts = [ids.norm, ids.w1, ids.b1, ids.w2, ids.b2];
                    for (part, id) in HEAD_PARTS.iter().zip(parts) {
                        tensors.insert(head_param_name("prefix_mlp.", head, part), store.value(id).clone());
                    }
                }
            }
            PeftKind::Lora => {
                let lv = self.generate_lora(&mut g, tokens)?;
                for (ti, t) in ATTN_TYPES.iter().enumerate() {
                    for (mi, m) in LORA_MAPS.iter().enumerate() {
                        for layer in 0..l {
                            tensors.insert(lora_name(t, m, layer, "down"), g.value(lv.down[ti][mi][layer]).clone());
                            tensors.insert(lora_name(t, m, layer, "up"), g.value(lv.up[ti][mi][layer]).clone());
                        }
                        tensors.insert(lora_gate_name(t, m), store.value(self.raw_gates[ti][mi]).clone());
                    }
                }
            }
        }
        PeftParams::new(PeftConfig { kind, ..self.config.target.clone() }, l, h, tensors)
    }
}
