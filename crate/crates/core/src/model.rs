//! T5-style encoder-decoder with prefix and LoRA injection points.
//!
//! The same network serves as the frozen downstream LM and as the backbone of
//! the hypermodel. Blocks are pre-norm (RMS), residual, with a ReLU FFN and
//! learned absolute positions. Inputs are processed one sequence at a time, so
//! no padding mask is needed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub decoder_causal: bool,
}

impl ModelConfig {
    /// Small downstream config used for tests and the default CLI runs.
    pub fn desk() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            vocab_size: vocab::VOCAB_SIZE,
            max_src_len: 64,
            max_tgt_len: 40,
            decoder_causal: true,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Checks structural invariants; `path` prefixes field names in errors.
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::config(format!("{path}.n_layers"), "must be >= 1"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                format!("{path}.n_heads"),
                format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.max_src_len < 1 || self.max_tgt_len < 1 {
            return Err(Error::config(format!("{path}.max_src_len"), "max lengths must be >= 1"));
        }
        if self.vocab_size < 1 {
            return Err(Error::config(format!("{path}.vocab_size"), "must be >= 1"));
        }
        Ok(())
    }
}

/// LoRA delta on one linear map: `gate · (x · downᵀ) · up`.
#[derive(Clone, Copy, Debug)]
pub struct LoraDelta {
    pub down: Var,
    pub up: Var,
    /// Effective gate, already squashed (single element).
    pub gate: Var,
}

/// PEFT hooks for a single attention call.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttentionInjection {
    /// `(key_prefix, value_prefix)`, each `[P, H]`.
    pub prefix: Option<(Var, Var)>,
    pub lora_q: Option<LoraDelta>,
    pub lora_v: Option<LoraDelta>,
}

/// Injections for every attention call of one forward pass, indexed by layer.
#[derive(Clone, Debug)]
pub struct PeftVars {
    pub enc: Vec<AttentionInjection>,
    pub dec: Vec<AttentionInjection>,
    pub cross: Vec<AttentionInjection>,
}

impl PeftVars {
    pub fn none(n_layers: usize) -> Self {
        Self {
            enc: vec![AttentionInjection::default(); n_layers],
            dec: vec![AttentionInjection::default(); n_layers],
            cross: vec![AttentionInjection::default(); n_layers],
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttnWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Debug)]
struct Ffn {
    w1: ParamId,
    w2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: ParamId,
    attn: AttnWeights,
    norm_ffn: ParamId,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: ParamId,
    self_attn: AttnWeights,
    norm_cross: ParamId,
    cross_attn: AttnWeights,
    norm_ffn: ParamId,
    ffn: Ffn,
}

/// Parameter layout of an encoder-decoder registered in a [`ParamStore`]
/// under a name prefix (e.g. `down.`).
#[derive(Clone, Debug)]
pub struct EncoderDecoder {
    pub config: ModelConfig,
    prefix: String,
    tok_emb: ParamId,
    enc_pos: ParamId,
    dec_pos: Option<ParamId>,
    enc_layers: Vec<EncoderLayer>,
    enc_norm: ParamId,
    dec_layers: Vec<DecoderLayer>,
    dec_norm: ParamId,
    lm_head: Option<ParamId>,
}

/// The frozen language model adapted by PEFT parameters.
pub type DownstreamModel = EncoderDecoder;

struct Init<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    prefix: &'a str,
}

impl<R: Rng> Init<'_, R> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, self.rng);
        self.store.add(format!("{}{name}", self.prefix), t)
    }

    fn ones(&mut self, name: &str, n: usize) -> Result<ParamId> {
        self.store.add(format!("{}{name}", self.prefix), Tensor::full(&[n], 1.0))
    }

    fn attn(&mut self, name: &str, h: usize) -> Result<AttnWeights> {
        let std = 1.0 / (h as f64).sqrt();
        Ok(AttnWeights {
            wq: self.normal(&format!("{name}.wq"), &[h, h], std)?,
            wk: self.normal(&format!("{name}.wk"), &[h, h], std)?,
            wv: self.normal(&format!("{name}.wv"), &[h, h], std)?,
            wo: self.normal(&format!("{name}.wo"), &[h, h], std)?,
        })
    }

    fn ffn(&mut self, name: &str, h: usize, f: usize) -> Result<Ffn> {
        Ok(Ffn {
            w1: self.normal(&format!("{name}.w1"), &[h, f], 1.0 / (h as f64).sqrt())?,
            w2: self.normal(&format!("{name}.w2"), &[f, h], 1.0 / (f as f64).sqrt())?,
        })
    }
}

impl EncoderDecoder {
    /// A language model: token-embedded decoder with positions and LM head.
    pub fn new_lm<R: Rng>(config: ModelConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        Self::build(config, store, prefix, rng, true)
    }

    /// A backbone whose decoder is fed externally supplied input vectors
    /// (no decoder positions, no LM head).
    pub fn new_backbone<R: Rng>(config: ModelConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        Self::build(config, store, prefix, rng, false)
    }

    fn build<R: Rng>(config: ModelConfig, store: &mut ParamStore, prefix: &str, rng: &mut R, lm: bool) -> Result<Self> {
        config.validate("model")?;
        let (h, f) = (config.d_model, config.d_ff);
        let mut init = Init { store, rng, prefix };
        let tok_emb = init.normal("tok_emb", &[config.vocab_size, h], 1.0)?;
        let enc_pos = init.normal("enc_pos", &[config.max_src_len, h], 0.5)?;
        let dec_pos = if lm {
            Some(init.normal("dec_pos", &[config.max_tgt_len, h], 0.5)?)
        } else {
            None
        };
        let mut enc_layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            enc_layers.push(EncoderLayer {
                norm_attn: init.ones(&format!("enc.{l}.norm_attn"), h)?,
                attn: init.attn(&format!("enc.{l}.attn"), h)?,
                norm_ffn: init.ones(&format!("enc.{l}.norm_ffn"), h)?,
                ffn: init.ffn(&format!("enc.{l}.ffn"), h, f)?,
            });
        }
        let enc_norm = init.ones("enc.norm", h)?;
        let mut dec_layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            dec_layers.push(DecoderLayer {
                norm_self: init.ones(&format!("dec.{l}.norm_self"), h)?,
                self_attn: init.attn(&format!("dec.{l}.self_attn"), h)?,
                norm_cross: init.ones(&format!("dec.{l}.norm_cross"), h)?,
                cross_attn: init.attn(&format!("dec.{l}.cross_attn"), h)?,
                norm_ffn: init.ones(&format!("dec.{l}.norm_ffn"), h)?,
                ffn: init.ffn(&format!("dec.{l}.ffn"), h, f)?,
            });
        }
        let dec_norm = init.ones("dec.norm", h)?;
        let lm_head = if lm {
            Some(init.normal("lm_head", &[h, config.vocab_size], 1.0 / (h as f64).sqrt())?)
        } else {
            None
        };
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            tok_emb,
            enc_pos,
            dec_pos,
            enc_layers,
            enc_norm,
            dec_layers,
            dec_norm,
            lm_head,
        })
    }

    /// Name prefix of every parameter of this model.
    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn freeze(&self, store: &mut ParamStore, frozen: bool) {
        store.set_frozen(&self.prefix, frozen);
    }

    fn check_tokens(&self, tokens: &[usize], max_len: usize, what: &str) -> Result<()> {
        if tokens.len() > max_len {
            return Err(Error::Contract(format!(
                "{what} length {} exceeds maximum {max_len}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Contract(format!("{what} token {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Encoder stack over `tokens`, returning `[T, H]`.
    ///
    /// Padding ids are dropped. A sequence that is empty afterwards is encoded
    /// as a single pad token so attention always has one visible key.
    pub fn encode(&self, g: &mut Graph, tokens: &[usize], peft: &PeftVars) -> Result<Var> {
        let mut toks: Vec<usize> = tokens.iter().copied().filter(|&t| t != vocab::PAD).collect();
        if toks.is_empty() {
            log::warn!("encoding an empty sequence; substituting a single pad token");
            toks.push(vocab::PAD);
        }
        self.check_tokens(&toks, self.config.max_src_len, "source")?;
        let emb = g.param(self.tok_emb);
        let x = g.embed(emb, &toks)?;
        let pos = g.param(self.enc_pos);
        let pos = g.slice_rows(pos, 0, toks.len())?;
        let mut x = g.add(x, pos)?;
        for (l, layer) in self.enc_layers.iter().enumerate() {
            let gain = g.param(layer.norm_attn);
            let h = g.rms_norm(x, gain, NORM_EPS)?;
            let a = attention(g, &layer.attn, h, h, &peft.enc[l], false, self.config.n_heads)?;
            x = g.add(x, a)?;
            let gain = g.param(layer.norm_ffn);
            let h = g.rms_norm(x, gain, NORM_EPS)?;
            let f = ffn(g, &layer.ffn, h)?;
            x = g.add(x, f)?;
        }
        let gain = g.param(self.enc_norm);
        g.rms_norm(x, gain, NORM_EPS)
    }

    /// Decoder stack over already-embedded inputs `x: [T, H]`; returns the
    /// final-normed hidden states.
    pub fn decode_hidden(&self, g: &mut Graph, mut x: Var, enc_out: Var, peft: &PeftVars, causal: bool) -> Result<Var> {
        for (l, layer) in self.dec_layers.iter().enumerate() {
            let gain = g.param(layer.norm_self);
            let h = g.rms_norm(x, gain, NORM_EPS)?;
            let a = attention(g, &layer.self_attn, h, h, &peft.dec[l], causal, self.config.n_heads)?;
            x = g.add(x, a)?;
            let gain = g.param(layer.norm_cross);
            let h = g.rms_norm(x, gain, NORM_EPS)?;
            let a = attention(g, &layer.cross_attn, h, enc_out, &peft.cross[l], false, self.config.n_heads)?;
            x = g.add(x, a)?;
            let gain = g.param(layer.norm_ffn);
            let h = g.rms_norm(x, gain, NORM_EPS)?;
            let f = ffn(g, &layer.ffn, h)?;
            x = g.add(x, f)?;
        }
        let gain = g.param(self.dec_norm);
        g.rms_norm(x, gain, NORM_EPS)
    }

    /// Token decoder returning logits `[T, V]`.
    pub fn decode(&self, g: &mut Graph, tokens: &[usize], enc_out: Var, peft: &PeftVars, causal: bool) -> Result<Var> {
        let (Some(dec_pos), Some(lm_head)) = (self.dec_pos, self.lm_head) else {
            return Err(Error::Contract("backbone has no token decoder".into()));
        };
        if tokens.is_empty() {
            return Err(Error::Contract("decoder input is empty".into()));
        }
        self.check_tokens(tokens, self.config.max_tgt_len, "decoder input")?;
        let emb = g.param(self.tok_emb);
        let x = g.embed(emb, tokens)?;
        let pos = g.param(dec_pos);
        let pos = g.slice_rows(pos, 0, tokens.len())?;
        let x = g.add(x, pos)?;
        let h = self.decode_hidden(g, x, enc_out, peft, causal)?;
        let w = g.param(lm_head);
        g.matmul(h, w)
    }

    /// Teacher-forced decoder input and labels for `target`: labels are the
    /// target ids followed by EOS (truncated to fit), inputs are BOS followed
    /// by the labels shifted right.
    pub fn teacher_forcing(&self, target: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let keep = target.len().min(self.config.max_tgt_len - 1);
        let mut labels: Vec<usize> = target[..keep].to_vec();
        labels.push(vocab::EOS);
        let mut inputs = Vec::with_capacity(labels.len());
        inputs.push(vocab::BOS);
        inputs.extend_from_slice(&labels[..labels.len() - 1]);
        (inputs, labels)
    }

    /// Mean token cross-entropy of `tgt` given `src`.
    pub fn seq_loss(&self, g: &mut Graph, src: &[usize], tgt: &[usize], peft: &PeftVars) -> Result<Var> {
        let enc = self.encode(g, src, peft)?;
        let (dec_in, labels) = self.teacher_forcing(tgt);
        let logits = self.decode(g, &dec_in, enc, peft, self.config.decoder_causal)?;
        g.cross_entropy(logits, &labels, vocab::PAD)
    }
}

fn ffn(g: &mut Graph, w: &Ffn, x: Var) -> Result<Var> {
    let w1 = g.param(w.w1);
    let h = g.matmul(x, w1)?;
    let h = g.relu(h)?;
    let w2 = g.param(w.w2);
    g.matmul(h, w2)
}

fn lora_apply(g: &mut Graph, x: Var, base: Var, delta: &LoraDelta, h: usize) -> Result<Var> {
    let (ds, us) = (g.shape(delta.down).to_vec(), g.shape(delta.up).to_vec());
    if ds.len() != 2 || ds[1] != h || ds != us || ds[0] == 0 {
        return Err(Error::shape("lora", format!("[R>=1, {h}] down and up"), (ds, us)));
    }
    let low = g.matmul_t(x, delta.down)?;
    let d = g.matmul(low, delta.up)?;
    let d = g.scale_by(d, delta.gate)?;
    g.add(base, d)
}

/// Multi-head attention with optional key/value prefixes and LoRA deltas on
/// the query and value maps. Prefix rows are prepended to the keys/values and
/// are visible to every query even when `causal` is set.
pub fn attention(
    g: &mut Graph,
    w: &AttnWeights,
    x_q: Var,
    x_kv: Var,
    inj: &AttentionInjection,
    causal: bool,
    n_heads: usize,
) -> Result<Var> {
    let h = g.shape(x_q)[1];
    let dh = h / n_heads;

    let wq = g.param(w.wq);
    let mut q = g.matmul(x_q, wq)?;
    if let Some(d) = &inj.lora_q {
        q = lora_apply(g, x_q, q, d, h)?;
    }
    let wk = g.param(w.wk);
    let mut k = g.matmul(x_kv, wk)?;
    let wv = g.param(w.wv);
    let mut v = g.matmul(x_kv, wv)?;
    if let Some(d) = &inj.lora_v {
        v = lora_apply(g, x_kv, v, d, h)?;
    }

    let mut n_prefix = 0;
    if let Some((kp, vp)) = inj.prefix {
        let (ks, vs) = (g.shape(kp).to_vec(), g.shape(vp).to_vec());
        if ks.len() != 2 || ks[1] != h || ks != vs {
            return Err(Error::shape("prefix", format!("[P, {h}] key and value"), (ks, vs)));
        }
        n_prefix = ks[0];
        if n_prefix > 0 {
            k = g.concat_rows(&[kp, k])?;
            v = g.concat_rows(&[vp, v])?;
        }
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, i * dh, (i + 1) * dh)?,
                g.slice_cols(k, i * dh, (i + 1) * dh)?,
                g.slice_cols(v, i * dh, (i + 1) * dh)?,
            )
        };
        let s = g.matmul_t(qh, kh)?;
        let s = g.scale(s, scale)?;
        let p = if causal {
            g.softmax_causal(s, n_prefix)?
        } else {
            g.softmax(s)?
        };
        heads.push(g.matmul(p, vh)?);
    }
    let merged = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let wo = g.param(w.wo);
    g.matmul(merged, wo)
}
