//! Pre-norm decoder-only transformer with low-rank adapters and
//! introspection (attention maps, per-module hidden states).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax_at, Checkpoint, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::util::fnv1a;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const FFN_MULT: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            context_len: 256,
            seed: 44,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.vocab_size < 2 {
            v.push(format!("vocab_size must be >= 2 (got {})", self.vocab_size));
        }
        if self.d_model == 0 {
            v.push("d_model must be positive".to_string());
        }
        if self.n_layers == 0 {
            v.push("n_layers must be positive".to_string());
        }
        if self.n_heads == 0 {
            v.push("n_heads must be positive".to_string());
        } else if !self.d_model.is_multiple_of(self.n_heads) {
            v.push(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.context_len == 0 {
            v.push("context_len must be positive".to_string());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn module_ids(&self) -> Vec<ModuleId> {
        (0..self.n_layers)
            .flat_map(|l| {
                [
                    ModuleId {
                        layer: l,
                        kind: ModuleKind::Attn,
                    },
                    ModuleId {
                        layer: l,
                        kind: ModuleKind::Ffn,
                    },
                ]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleKind {
    Attn,
    Ffn,
}

/// An addressable sub-layer output: `attn_out_L` or `ffn_out_L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModuleId {
    pub layer: usize,
    pub kind: ModuleKind,
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ModuleKind::Attn => write!(f, "attn_out_{}", self.layer),
            ModuleKind::Ffn => write!(f, "ffn_out_{}", self.layer),
        }
    }
}

impl FromStr for ModuleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = if let Some(r) = s.strip_prefix("attn_out_") {
            (ModuleKind::Attn, r)
        } else if let Some(r) = s.strip_prefix("ffn_out_") {
            (ModuleKind::Ffn, r)
        } else {
            return Err(Error::UnknownModule(s.to_string()));
        };
        let layer = rest
            .parse()
            .map_err(|_| Error::UnknownModule(s.to_string()))?;
        Ok(ModuleId { layer, kind })
    }
}

impl Serialize for ModuleId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModuleId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub target_module_ids: Vec<String>,
}

impl LoraConfig {
    /// Adapters on every attention output projection.
    pub fn attention_outputs(cfg: &ModelConfig) -> Self {
        LoraConfig {
            rank: 16,
            alpha: 16.0,
            dropout: 0.05,
            target_module_ids: (0..cfg.n_layers).map(|l| format!("attn_out_{l}")).collect(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Debug)]
struct Adapter {
    module: ModuleId,
    a: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Layer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    lora: Option<LoraConfig>,
    adapters: Vec<Adapter>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<Layer>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    lm_head: ParamId,
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub logits: Var,
    /// `attentions[layer][head]`, each `T x T`.
    pub attentions: Vec<Vec<Var>>,
    pub module_outputs: Vec<(ModuleId, Var)>,
}

/// Materialized forward results.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T = f32> {
    pub logits: Tensor<T>,
    pub attentions: Vec<Vec<Tensor<T>>>,
    pub module_outputs: Vec<(ModuleId, Tensor<T>)>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn module(&self, id: ModuleId) -> Option<&Tensor<T>> {
        self.module_outputs.iter().find(|(m, _)| *m == id).map(|(_, t)| t)
    }
}

fn layer_names(l: usize) -> [String; 13] {
    let p = format!("layers.{l}");
    [
        format!("{p}.ln1.g"),
        format!("{p}.ln1.b"),
        format!("{p}.attn.wq"),
        format!("{p}.attn.wk"),
        format!("{p}.attn.wv"),
        format!("{p}.attn.wo"),
        format!("{p}.attn.bo"),
        format!("{p}.ln2.g"),
        format!("{p}.ln2.b"),
        format!("{p}.ffn.w1"),
        format!("{p}.ffn.b1"),
        format!("{p}.ffn.w2"),
        format!("{p}.ffn.b2"),
    ]
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization. Projections into the residual stream are scaled
    /// down by `sqrt(2 * n_layers)`.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let h = d * FFN_MULT;
        let resid_std = INIT_STD / ((2 * cfg.n_layers) as f64).sqrt();
        let mut store = ParamStore::new();
        let add = |store: &mut ParamStore<T>, name: String, t: Tensor<T>| store.insert(name, t, true);
        add(&mut store, "tok_emb".into(), Tensor::randn(&[cfg.vocab_size, d], INIT_STD, &mut rng))?;
        add(&mut store, "pos_emb".into(), Tensor::randn(&[cfg.context_len, d], INIT_STD, &mut rng))?;
        for l in 0..cfg.n_layers {
            let n = layer_names(l);
            add(&mut store, n[0].clone(), Tensor::full(&[d], T::one()))?;
            add(&mut store, n[1].clone(), Tensor::zeros(&[d]))?;
            add(&mut store, n[2].clone(), Tensor::randn(&[d, d], INIT_STD, &mut rng))?;
            add(&mut store, n[3].clone(), Tensor::randn(&[d, d], INIT_STD, &mut rng))?;
            add(&mut store, n[4].clone(), Tensor::randn(&[d, d], INIT_STD, &mut rng))?;
            add(&mut store, n[5].clone(), Tensor::randn(&[d, d], resid_std, &mut rng))?;
            add(&mut store, n[6].clone(), Tensor::zeros(&[d]))?;
            add(&mut store, n[7].clone(), Tensor::full(&[d], T::one()))?;
            add(&mut store, n[8].clone(), Tensor::zeros(&[d]))?;
            add(&mut store, n[9].clone(), Tensor::randn(&[d, h], INIT_STD, &mut rng))?;
            add(&mut store, n[10].clone(), Tensor::zeros(&[h]))?;
            add(&mut store, n[11].clone(), Tensor::randn(&[h, d], resid_std, &mut rng))?;
            add(&mut store, n[12].clone(), Tensor::zeros(&[d]))?;
        }
        add(&mut store, "ln_f.g".into(), Tensor::full(&[d], T::one()))?;
        add(&mut store, "ln_f.b".into(), Tensor::zeros(&[d]))?;
        add(&mut store, "lm_head".into(), Tensor::randn(&[d, cfg.vocab_size], INIT_STD, &mut rng))?;
        Self::bind(cfg, store)
    }

    /// Resolves parameter handles for a store laid out by [`Model::init`].
    fn bind(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let get = |name: &str| {
            params
                .id(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = layer_names(l);
            layers.push(Layer {
                ln1_g: get(&n[0])?,
                ln1_b: get(&n[1])?,
                wq: get(&n[2])?,
                wk: get(&n[3])?,
                wv: get(&n[4])?,
                wo: get(&n[5])?,
                bo: get(&n[6])?,
                ln2_g: get(&n[7])?,
                ln2_b: get(&n[8])?,
                w1: get(&n[9])?,
                b1: get(&n[10])?,
                w2: get(&n[11])?,
                b2: get(&n[12])?,
            });
        }
        Ok(Model {
            tok_emb: get("tok_emb")?,
            pos_emb: get("pos_emb")?,
            lnf_g: get("ln_f.g")?,
            lnf_b: get("ln_f.b")?,
            lm_head: get("lm_head")?,
            layers,
            adapters: Vec::new(),
            lora: None,
            config,
            params,
        })
    }

    pub fn module_ids(&self) -> Vec<ModuleId> {
        self.config.module_ids()
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn adapted_modules(&self) -> Vec<ModuleId> {
        self.adapters.iter().map(|a| a.module).collect()
    }

    /// Adds low-rank adapters to the listed modules and freezes every base
    /// parameter. Adapter `a` factors are seeded from `seed`; `b` factors start
    /// at zero so the adapted model initially computes exactly the base model.
    pub fn apply_lora_seeded(mut self, lc: LoraConfig, seed: u64) -> Result<Self> {
        let mut v = Vec::new();
        if lc.rank == 0 {
            v.push("lora rank must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&lc.dropout) {
            v.push(format!("lora dropout {} outside [0, 1)", lc.dropout));
        }
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        if self.lora.is_some() {
            return Err(Error::invalid("model already carries adapters"));
        }
        let known = self.module_ids();
        let mut targets = Vec::new();
        for name in &lc.target_module_ids {
            let id: ModuleId = name.parse()?;
            if !known.contains(&id) {
                return Err(Error::UnknownModule(name.clone()));
            }
            if !targets.contains(&id) {
                targets.push(id);
            }
        }
        targets.sort();
        self.params.set_requires_grad(false);
        let d = self.config.d_model;
        for module in targets {
            let d_in = match module.kind {
                ModuleKind::Attn => d,
                ModuleKind::Ffn => d * FFN_MULT,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(module.to_string().as_bytes()));
            let a = Tensor::randn(&[d_in, lc.rank], 1.0 / (d_in as f64).sqrt(), &mut rng);
            let a = self.params.insert(format!("lora.{module}.a"), a, true)?;
            let b = self
                .params
                .insert(format!("lora.{module}.b"), Tensor::zeros(&[lc.rank, d]), true)?;
            self.adapters.push(Adapter { module, a, b });
        }
        self.lora = Some(lc);
        Ok(self)
    }

    pub fn apply_lora(self, lc: LoraConfig) -> Result<Self> {
        let seed = self.config.seed;
        self.apply_lora_seeded(lc, seed)
    }

    fn adapter(&self, module: ModuleId) -> Option<&Adapter> {
        self.adapters.iter().find(|a| a.module == module)
    }

    /// `x @ w + b`, plus the adapter path when `module` carries one.
    fn projection(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        w: ParamId,
        b: ParamId,
        module: ModuleId,
        dropout: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let wv = tape.param(&self.params, w)?;
        let bv = tape.param(&self.params, b)?;
        let y = tape.matmul(x, wv)?;
        let mut y = tape.add(y, bv)?;
        if let (Some(ad), Some(lc)) = (self.adapter(module), self.lora.as_ref()) {
            let mut xin = x;
            if lc.dropout > 0.0 {
                if let Some(rng) = dropout.as_deref_mut() {
                    let shape = tape.value(x).shape().to_vec();
                    let keep = 1.0 - lc.dropout;
                    let n: usize = shape.iter().product();
                    let mask: Vec<T> = (0..n)
                        .map(|_| {
                            if rng.random::<f64>() < keep {
                                T::from_f64(1.0 / keep)
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    let m = tape.leaf(Tensor::new(shape, mask)?, false)?;
                    xin = tape.mul(x, m)?;
                }
            }
            let av = tape.param(&self.params, ad.a)?;
            let bv = tape.param(&self.params, ad.b)?;
            let h = tape.matmul(xin, av)?;
            let h = tape.matmul(h, bv)?;
            let h = tape.scale(h, T::from_f64(lc.scale()))?;
            y = tape.add(y, h)?;
        }
        Ok(y)
    }

    /// Records a forward pass over `tokens` on `tape`. Passing an rng enables
    /// adapter dropout (training mode).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<TapeForward> {
        let cfg = &self.config;
        if tokens.len() > cfg.context_len {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                limit: cfg.context_len,
            });
        }
        if tokens.is_empty() {
            return Err(Error::invalid("forward on an empty token sequence"));
        }
        let t = tokens.len();
        let hd = cfg.head_dim();
        let inv_sqrt = T::from_f64(1.0 / (hd as f64).sqrt());
        let positions: Vec<usize> = (0..t).collect();

        let te = tape.param(&self.params, self.tok_emb)?;
        let pe = tape.param(&self.params, self.pos_emb)?;
        let xt = tape.embedding(te, tokens)?;
        let xp = tape.embedding(pe, &positions)?;
        let mut x = tape.add(xt, xp)?;

        let mut attentions = Vec::with_capacity(cfg.n_layers);
        let mut module_outputs = Vec::with_capacity(2 * cfg.n_layers);
        for (l, layer) in self.layers.iter().enumerate() {
            let g = tape.param(&self.params, layer.ln1_g)?;
            let b = tape.param(&self.params, layer.ln1_b)?;
            let h = tape.layer_norm(x, g, b, LN_EPS)?;
            let wq = tape.param(&self.params, layer.wq)?;
            let wk = tape.param(&self.params, layer.wk)?;
            let wv = tape.param(&self.params, layer.wv)?;
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            let mut probs = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let (s, e) = (head * hd, (head + 1) * hd);
                let qh = tape.slice(q, 1, s, e)?;
                let kh = tape.slice(k, 1, s, e)?;
                let vh = tape.slice(v, 1, s, e)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, inv_sqrt)?;
                let p = tape.softmax_lastdim(scores, true)?;
                probs.push(p);
                heads.push(tape.matmul(p, vh)?);
            }
            attentions.push(probs);
            let o = tape.concat(&heads, 1)?;
            let attn_id = ModuleId {
                layer: l,
                kind: ModuleKind::Attn,
            };
            let attn_out = self.projection(tape, o, layer.wo, layer.bo, attn_id, &mut dropout)?;
            module_outputs.push((attn_id, attn_out));
            x = tape.add(x, attn_out)?;

            let g = tape.param(&self.params, layer.ln2_g)?;
            let b = tape.param(&self.params, layer.ln2_b)?;
            let h = tape.layer_norm(x, g, b, LN_EPS)?;
            let w1 = tape.param(&self.params, layer.w1)?;
            let b1 = tape.param(&self.params, layer.b1)?;
            let f = tape.matmul(h, w1)?;
            let f = tape.add(f, b1)?;
            let f = tape.gelu(f)?;
            let ffn_id = ModuleId {
                layer: l,
                kind: ModuleKind::Ffn,
            };
            let ffn_out = self.projection(tape, f, layer.w2, layer.b2, ffn_id, &mut dropout)?;
            module_outputs.push((ffn_id, ffn_out));
            x = tape.add(x, ffn_out)?;
        }
        let g = tape.param(&self.params, self.lnf_g)?;
        let b = tape.param(&self.params, self.lnf_b)?;
        let h = tape.layer_norm(x, g, b, LN_EPS)?;
        let w = tape.param(&self.params, self.lm_head)?;
        let logits = tape.matmul(h, w)?;
        Ok(TapeForward {
            logits,
            attentions,
            module_outputs,
        })
    }

    /// Inference forward pass. Attention maps and module outputs are copied
    /// out only when `want_trace` is set.
    pub fn forward(&self, tokens: &[usize], want_trace: bool) -> Result<ForwardTrace<T>> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, tokens, None)?;
        let logits = tape.value(out.logits).clone();
        if !want_trace {
            return Ok(ForwardTrace {
                logits,
                attentions: Vec::new(),
                module_outputs: Vec::new(),
            });
        }
        Ok(ForwardTrace {
            logits,
            attentions: out
                .attentions
                .iter()
                .map(|hs| hs.iter().map(|&v| tape.value(v).clone()).collect())
                .collect(),
            module_outputs: out
                .module_outputs
                .iter()
                .map(|(m, v)| (*m, tape.value(*v).clone()))
                .collect(),
        })
    }

    /// Teacher-forced `sum_i log p(target_i | prompt, target_<i)`.
    pub fn sequence_logprob(&self, prompt: &[usize], target: &[usize]) -> Result<f64> {
        self.sequence_logprob_with(prompt, target, false)
    }

    /// As [`Model::sequence_logprob`]; `length_normalized` divides by the
    /// target length.
    pub fn sequence_logprob_with(&self, prompt: &[usize], target: &[usize], length_normalized: bool) -> Result<f64> {
        if target.is_empty() {
            return Err(Error::invalid("sequence_logprob: empty target"));
        }
        if prompt.is_empty() {
            return Err(Error::invalid("sequence_logprob: empty prompt"));
        }
        let tokens: Vec<usize> = prompt.iter().chain(target).copied().collect();
        let trace = self.forward(&tokens, false)?;
        let total = target_logprobs(&trace.logits, prompt.len(), target)
            .iter()
            .sum::<f64>();
        Ok(if length_normalized {
            total / target.len() as f64
        } else {
            total
        })
    }

    /// Appends `n` argmax tokens.
    pub fn greedy_decode(&self, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
        let mut toks = prompt.to_vec();
        for _ in 0..n {
            let tr = self.forward(&toks, false)?;
            let last = tr.logits.row(toks.len() - 1);
            let best = argmax(last);
            toks.push(best);
        }
        Ok(toks[prompt.len()..].to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            lora: self.lora.clone(),
            adapters: self.adapters.clone(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            layers: self.layers.clone(),
            lnf_g: self.lnf_g,
            lnf_b: self.lnf_b,
            lm_head: self.lm_head,
        }
    }
}

/// Log-probabilities of `target` tokens given logits of the concatenated
/// sequence where the target starts at position `start`.
pub fn target_logprobs<T: Scalar>(logits: &Tensor<T>, start: usize, target: &[usize]) -> Vec<f64> {
    target
        .iter()
        .enumerate()
        .map(|(i, &tok)| log_softmax_at(logits.row(start + i - 1), tok))
        .collect()
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl Model<f32> {
    /// Base weights (non-adapter tensors).
    pub fn base_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let tensors = self
            .params
            .iter()
            .filter(|(_, p)| !p.name.starts_with("lora."))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        Checkpoint {
            config_hash: config_hash.to_string(),
            seed: self.config.seed,
            meta: serde_json::json!({ "model_config": self.config }),
            tensors,
        }
    }

    /// Adapter tensors only, all prefixed `lora.`.
    pub fn adapter_checkpoint(&self, config_hash: &str, seed: u64) -> Checkpoint {
        let tensors = self
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with("lora."))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        Checkpoint {
            config_hash: config_hash.to_string(),
            seed,
            meta: serde_json::json!({ "lora_config": self.lora }),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(ck.meta["model_config"].clone())?;
        let mut model = Model::<f32>::init(cfg)?;
        for (name, t) in &ck.tensors {
            if name.starts_with("lora.") {
                continue;
            }
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint tensor `{name}` unknown to model")))?;
            let p = model.params.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::shape(
                    "load",
                    format!("{name}: {:?} vs {:?}", p.value.shape(), t.shape()),
                ));
            }
            p.value = t.clone();
        }
        Ok(model)
    }

    /// Applies adapters stored by [`Model::adapter_checkpoint`].
    pub fn load_adapters(self, ck: &Checkpoint) -> Result<Self> {
        let lc: LoraConfig = serde_json::from_value(ck.meta["lora_config"].clone())?;
        let mut model = self.apply_lora_seeded(lc, 0)?;
        for (name, t) in &ck.tensors {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::invalid(format!("adapter tensor `{name}` unknown to model")))?;
            model.params.get_mut(id).value = t.clone();
        }
        Ok(model)
    }
}
