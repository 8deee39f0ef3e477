//! Base-model pretraining on the fact corpus and adapter fine-tuning with
//! periodic multiple-choice evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{insert_tags, FqaSample, McItem, PromptTemplate, TokenizedSample, Tokenizer};
use crate::error::{Error, Result};
use crate::eval::evaluate_mc;
use crate::losses::{f2_on_tape, Coefficients, LossSettings, PreparedSample, Variant};
use crate::model::{argmax, LoraConfig, Model, ModelConfig, ModuleId, ModuleKind};
use crate::nn::{AdamW, Tape};
use crate::spans::{extract_attention_spans, extract_entity_spans, PageRankConfig};
use crate::util::{config_hash, tensor_hash};

/// Linear warmup to `lr`, then constant. `step` is 1-based.
pub fn schedule(step: usize, warmup_steps: usize, lr: f64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        lr
    } else {
        lr * step as f64 / warmup_steps as f64
    }
}

/// Linear warmup followed by cosine decay to zero at `total_steps`.
pub fn cosine_schedule(step: usize, warmup_steps: usize, total_steps: usize, lr: f64) -> f64 {
    if step < warmup_steps {
        return schedule(step, warmup_steps, lr);
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let t = ((step - warmup_steps) as f64 / span).min(1.0);
    lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

// ---------------------------------------------------------------------------
// Pretraining

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: ModelConfig::default(),
            epochs: 60,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 50,
            weight_decay: 0.0,
            seed: 44,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
}

/// Causal language modelling over every position of every sequence. Each
/// sequence should start with `<bos>`. The learning rate warms up linearly
/// and then follows a cosine decay to zero at the last step of `epochs`.
/// `on_epoch` returning true stops training early.
pub fn pretrain(cfg: &PretrainConfig, sequences: &[Vec<usize>], mut on_epoch: impl FnMut(&PretrainEpoch, &Model<f32>) -> bool) -> Result<(Model<f32>, Vec<PretrainEpoch>)> {
    if sequences.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config(vec!["batch_size must be >= 1".into()]));
    }
    let mut model = Model::<f32>::init(cfg.model.clone())?;
    let mut opt = AdamW::new((0.9, 0.999), 1e-8, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut step = 0;
    let total_steps = cfg.epochs * sequences.len().div_ceil(cfg.batch_size);
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut tokens = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            model.params.zero_grad();
            let n_tok: usize = batch.iter().map(|&i| sequences[i].len() - 1).sum();
            for &i in batch {
                let seq = &sequences[i];
                let mut tape = Tape::new();
                let fwd = model.forward_on_tape(&mut tape, seq, None)?;
                let rows: Vec<usize> = (0..seq.len() - 1).collect();
                let w = vec![1.0 / n_tok as f32; rows.len()];
                let loss = tape.weighted_nll(fwd.logits, &rows, &seq[1..], &w)?;
                total += tape.value(loss).item() as f64 * n_tok as f64;
                tape.backward(loss, &mut model.params)?;
            }
            tokens += n_tok;
            opt.step(&mut model.params, cosine_schedule(step, cfg.warmup_steps, total_steps, cfg.lr), step as u64)?;
        }
        let rec = PretrainEpoch {
            epoch,
            loss: total / tokens as f64,
        };
        let stop = on_epoch(&rec, &model);
        history.push(rec);
        if stop {
            break;
        }
    }
    Ok((model, history))
}

/// Teacher-forced argmax accuracy on the object tokens of `(prefix, object)`
/// fact probes.
pub fn fact_token_accuracy(model: &Model<f32>, tok: &Tokenizer, probes: &[(String, String)]) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (prefix, object) in probes {
        let mut ids = vec![tok.bos_id()];
        ids.extend(tok.tokenize(prefix));
        let start = ids.len();
        ids.extend(tok.tokenize(object));
        let trace = model.forward(&ids, false)?;
        for i in start..ids.len() {
            total += 1;
            if argmax(trace.logits.row(i - 1)) == ids[i] {
                hit += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

// ---------------------------------------------------------------------------
// Fine-tuning

/// Which modules receive adapters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModuleSelection {
    All,
    AttentionOutputs,
    Listed(Vec<ModuleId>),
}

impl ModuleSelection {
    pub fn resolve(&self, cfg: &ModelConfig) -> Vec<ModuleId> {
        match self {
            ModuleSelection::All => cfg.module_ids(),
            ModuleSelection::AttentionOutputs => cfg.module_ids().into_iter().filter(|m| m.kind == ModuleKind::Attn).collect(),
            ModuleSelection::Listed(v) => v.clone(),
        }
    }
}

impl fmt::Display for ModuleSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModuleSelection::All => f.write_str("all"),
            ModuleSelection::AttentionOutputs => f.write_str("attn"),
            ModuleSelection::Listed(v) => {
                let s: Vec<String> = v.iter().map(|m| m.to_string()).collect();
                f.write_str(&s.join(","))
            }
        }
    }
}

impl FromStr for ModuleSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(ModuleSelection::All),
            "attn" => Ok(ModuleSelection::AttentionOutputs),
            _ => Ok(ModuleSelection::Listed(
                s.split(',').map(|p| p.trim().parse()).collect::<Result<Vec<_>>>()?,
            )),
        }
    }
}

impl Serialize for ModuleSelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ModuleSelection::Listed(v) => v.serialize(s),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for ModuleSelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            List(Vec<ModuleId>),
        }
        match Raw::deserialize(d)? {
            Raw::Name(n) => n.parse().map_err(serde::de::Error::custom),
            Raw::List(v) => Ok(ModuleSelection::Listed(v)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSettings {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for AdapterSettings {
    fn default() -> Self {
        AdapterSettings {
            rank: 16,
            alpha: 16.0,
            dropout: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub alpha: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub lora: AdapterSettings,
    pub selected_modules: ModuleSelection,
    pub batch_size: usize,
    pub micro_batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub eval_step: usize,
    pub seed: u64,
    pub cutoff_len: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    /// Attention spans are recomputed every this many epochs.
    pub span_refresh_epochs: usize,
    pub coefficients: Coefficients,
    pub pagerank: PageRankConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::F2,
            alpha: 1.1,
            k: 30,
            lora: AdapterSettings::default(),
            selected_modules: ModuleSelection::AttentionOutputs,
            batch_size: 16,
            micro_batch: 4,
            epochs: 6,
            lr: 1e-3,
            warmup_steps: 20,
            eval_step: 10,
            seed: 44,
            cutoff_len: 256,
            max_steps: None,
            span_refresh_epochs: 1,
            coefficients: Coefficients::default(),
            pagerank: PageRankConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.micro_batch == 0 || self.batch_size % self.micro_batch != 0 {
            v.push(format!(
                "micro_batch ({}) must divide batch_size ({})",
                self.micro_batch, self.batch_size
            ));
        }
        if self.eval_step == 0 {
            v.push("eval_step must be >= 1".into());
        }
        if !(self.alpha > 0.0) {
            v.push(format!("alpha must be positive (got {})", self.alpha));
        }
        if self.lora.rank == 0 {
            v.push("lora rank must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.lora.dropout) {
            v.push(format!("lora dropout {} outside [0, 1)", self.lora.dropout));
        }
        if self.span_refresh_epochs == 0 {
            v.push("span_refresh_epochs must be >= 1".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn lora_config(&self, model: &ModelConfig) -> LoraConfig {
        LoraConfig {
            rank: self.lora.rank,
            alpha: self.lora.alpha,
            dropout: self.lora.dropout,
            target_module_ids: self.selected_modules.resolve(model).iter().map(|m| m.to_string()).collect(),
        }
    }

    fn loss_settings(&self) -> LossSettings {
        LossSettings {
            alpha: self.alpha,
            coefficients: self.coefficients,
        }
    }
}

/// Tokenizes samples in plain and tagged form and fills entity spans.
pub fn prepare_samples(tok: &Tokenizer, template: &PromptTemplate, samples: &[FqaSample]) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            let mut plain = TokenizedSample::new(tok, template, s)?;
            plain.span_ent = extract_entity_spans(&plain)?;
            let mut tagged = TokenizedSample::new(tok, template, &insert_tags(s)?)?;
            tagged.span_ent = extract_entity_spans(&tagged)?;
            Ok(PreparedSample { plain, tagged })
        })
        .collect()
}

/// Recomputes attention spans of the variant's sample form under `model`.
pub fn refresh_attention_spans(model: &Model<f32>, samples: &mut [PreparedSample], variant: Variant, k: usize, pr: &PageRankConfig) -> Result<()> {
    for s in samples.iter_mut() {
        let ts = if variant.tagged() { &mut s.tagged } else { &mut s.plain };
        let trace = model.forward(&ts.retrieval.ids, true)?;
        ts.span_attn = extract_attention_spans(&trace, ts, k, pr)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub mc1: f64,
    pub mc2: f64,
    pub mc3: f64,
    /// Mean component losses over the steps since the previous eval point.
    pub losses: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestPoint {
    pub step: usize,
    pub mc1: f64,
    pub mc2: f64,
    pub mc3: f64,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub variant: Variant,
    pub selected_modules: Vec<ModuleId>,
    pub steps: usize,
    pub base_hash: String,
    pub evals: Vec<EvalPoint>,
    pub best_mc1: BestPoint,
    pub best_mc2: BestPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

/// Hash over every non-adapter tensor, for checking the base stays frozen.
pub fn base_hash(model: &Model<f32>) -> String {
    let parts: Vec<String> = model
        .params
        .iter()
        .filter(|(_, p)| !p.name.starts_with("lora."))
        .map(|(_, p)| format!("{}:{}", p.name, tensor_hash(&p.value)))
        .collect();
    crate::util::sha256_hex(parts.join("\n").as_bytes())
}

pub struct FinetuneOutput {
    pub record: RunRecord,
    pub model: Model<f32>,
    pub log: Vec<StepLog>,
}

fn best_point(p: &EvalPoint, checkpoint: Option<String>) -> BestPoint {
    BestPoint {
        step: p.step,
        mc1: p.mc1,
        mc2: p.mc2,
        mc3: p.mc3,
        checkpoint,
    }
}

/// Fine-tunes adapters on `train` and evaluates on `val` every `eval_step`
/// optimizer steps (and at steps 0 and final). With `out_dir` set, best-MC1
/// and best-MC2 adapters, the final adapters and the step log are written
/// there. A non-finite loss aborts the run after saving the last good
/// adapters.
pub fn finetune(
    base: &Model<f32>,
    tok: &Tokenizer,
    template: &PromptTemplate,
    train: &[PreparedSample],
    val: &[McItem],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("fine-tuning corpus is empty"));
    }
    let hash = config_hash(cfg);
    let base_digest = base_hash(base);
    let lc = cfg.lora_config(&base.config);
    let selected = cfg.selected_modules.resolve(&base.config);
    let mut model = base.clone().apply_lora_seeded(lc, cfg.seed)?;
    let settings = cfg.loss_settings();
    let mut samples = train.to_vec();
    let mut opt = AdamW::default();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d0d0);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).min(cfg.max_steps.unwrap_or(usize::MAX));

    let ck_dir = out_dir.map(|d| d.join("checkpoints"));
    let mut log_file = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Some(fs::File::create(d.join("train_log.jsonl"))?)
        }
        None => None,
    };

    let mut evals: Vec<EvalPoint> = Vec::new();
    let mut best1: Option<BestPoint> = None;
    let mut best2: Option<BestPoint> = None;
    let mut log = Vec::new();
    let mut window: BTreeMap<String, (f64, usize)> = BTreeMap::new();

    let mut evaluate = |model: &Model<f32>, step: usize, window: &mut BTreeMap<String, (f64, usize)>| -> Result<()> {
        let rep = evaluate_mc(model, tok, template, val)?;
        let point = EvalPoint {
            step,
            mc1: rep.mc1,
            mc2: rep.mc2,
            mc3: rep.mc3,
            losses: window.iter().map(|(k, (s, n))| (k.clone(), s / *n as f64)).collect(),
        };
        window.clear();
        if best1.as_ref().is_none_or(|b| point.mc1 > b.mc1) {
            let ck = save_adapters(model, &hash, cfg.seed, ck_dir.as_deref(), "best_mc1")?;
            best1 = Some(best_point(&point, ck));
        }
        if best2.as_ref().is_none_or(|b| point.mc2 > b.mc2) {
            let ck = save_adapters(model, &hash, cfg.seed, ck_dir.as_deref(), "best_mc2")?;
            best2 = Some(best_point(&point, ck));
        }
        evals.push(point);
        Ok(())
    };

    evaluate(&model, 0, &mut window)?;
    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        if step >= total_steps {
            break;
        }
        if cfg.variant.needs_attention_spans() && epoch % cfg.span_refresh_epochs == 0 {
            refresh_attention_spans(&model, &mut samples, cfg.variant, cfg.k, &cfg.pagerank)?;
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break 'outer;
            }
            step += 1;
            let lr = schedule(step, cfg.warmup_steps, cfg.lr);
            model.params.zero_grad();
            let inv_b = 1.0 / batch.len() as f32;
            let mut comps: BTreeMap<String, f64> = BTreeMap::new();
            let mut total = 0.0;
            for micro in batch.chunks(cfg.micro_batch) {
                let mut tape = Tape::new();
                let mut acc = None;
                for &i in micro {
                    let r = f2_on_tape(&mut tape, &model, &samples[i], cfg.variant, &settings, Some(&mut dropout_rng));
                    let (loss, bd) = match r {
                        Ok(v) => v,
                        Err(e @ Error::NonFinite { .. }) => {
                            save_adapters(&model, &hash, cfg.seed, ck_dir.as_deref(), "last_good")?;
                            return Err(e);
                        }
                        Err(e) => return Err(e),
                    };
                    for (k, v) in bd.components {
                        *comps.entry(k).or_default() += v / batch.len() as f64;
                    }
                    total += bd.total / batch.len() as f64;
                    acc = Some(match acc {
                        None => loss,
                        Some(a) => tape.add(a, loss)?,
                    });
                }
                let loss = tape.scale(acc.expect("non-empty micro-batch"), inv_b)?;
                tape.backward(loss, &mut model.params)?;
            }
            if !total.is_finite() {
                save_adapters(&model, &hash, cfg.seed, ck_dir.as_deref(), "last_good")?;
                return Err(Error::NonFinite { op: "loss" });
            }
            if let Err(e) = opt.step(&mut model.params, lr, step as u64) {
                if matches!(e, Error::NonFinite { .. }) {
                    save_adapters(&model, &hash, cfg.seed, ck_dir.as_deref(), "last_good")?;
                }
                return Err(e);
            }
            for (k, v) in &comps {
                let e = window.entry(k.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
            let entry = StepLog {
                step,
                lr,
                total,
                components: comps,
            };
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&entry)?)?;
            }
            log.push(entry);
            if step % cfg.eval_step == 0 || step == total_steps {
                evaluate(&model, step, &mut window)?;
            }
        }
    }
    if let Some(d) = ck_dir.as_deref() {
        save_adapters(&model, &hash, cfg.seed, Some(d), "final")?;
    }
    let record = RunRecord {
        config_hash: hash,
        seed: cfg.seed,
        variant: cfg.variant,
        selected_modules: selected,
        steps: step,
        base_hash: base_digest,
        evals,
        best_mc1: best1.expect("step-0 evaluation always runs"),
        best_mc2: best2.expect("step-0 evaluation always runs"),
    };
    Ok(FinetuneOutput { record, model, log })
}

fn save_adapters(model: &Model<f32>, hash: &str, seed: u64, dir: Option<&Path>, name: &str) -> Result<Option<String>> {
    let Some(dir) = dir else {
        return Ok(None);
    };
    let path = dir.join(name);
    model.adapter_checkpoint(hash, seed).save(&path)?;
    Ok(Some(format!("checkpoints/{name}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule(20, 20, 1e-3), 1e-3);
        assert_eq!(schedule(10, 20, 1e-3), 5e-4);
        assert_eq!(schedule(500, 20, 1e-3), 1e-3);
        assert_eq!(schedule(3, 0, 0.5), 0.5);
    }

    #[test]
    fn schedule_matches_closed_form_table() {
        let table: Vec<f64> = (1..=8).map(|s| schedule(s, 4, 2.0)).collect();
        assert_eq!(table, vec![0.5, 1.0, 1.5, 2.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_schedule(2, 4, 12, 2.0), 1.0);
        assert_eq!(cosine_schedule(4, 4, 12, 2.0), 2.0);
        assert!((cosine_schedule(8, 4, 12, 2.0) - 1.0).abs() < 1e-12);
        assert!(cosine_schedule(12, 4, 12, 2.0).abs() < 1e-12);
        assert!(cosine_schedule(40, 4, 12, 2.0).abs() < 1e-12);
    }

    #[test]
    fn micro_batch_must_divide_batch() {
        let cfg = TrainConfig {
            batch_size: 10,
            micro_batch: 4,
            eval_step: 0,
            ..Default::default()
        };
        let Err(Error::Config(v)) = cfg.validate() else {
            panic!("expected config error")
        };
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn module_selection_parses_and_serializes() {
        let s: ModuleSelection = "attn_out_1,ffn_out_3".parse().unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"["attn_out_1","ffn_out_3"]"#);
        assert_eq!(serde_json::from_str::<ModuleSelection>(&json).unwrap(), s);
        assert_eq!(serde_json::from_str::<ModuleSelection>(r#""all""#).unwrap(), ModuleSelection::All);
        assert!("bogus_1".parse::<ModuleSelection>().is_err());
    }
}
