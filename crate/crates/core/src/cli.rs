//! Command-line driver.
//!
//! Every subcommand reads one [`ExperimentConfig`] (defaults, then the
//! `--config` file, then `F2_SEED`, then `--set`/flag overrides in argument
//! order) and writes its artifacts under `<runs-dir>/<hash>/`, where the hash
//! covers exactly the config sections the stage depends on. Missing upstream
//! stages (world, base checkpoint, probe ranking, fine-tuning run) are built
//! on demand and reused when already present.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{generate_world, GeneratedWorld, PromptTemplate, Tokenizer, TokenizedSample, WorldConfig, WORLD_FORMAT};
use crate::error::{Error, Result};
use crate::eval::{evaluate_mc, factor_accuracy, observation_experiment};
use crate::losses::Variant;
use crate::model::{Model, ModelConfig};
use crate::nn::Checkpoint;
use crate::probing::{collect_features, probe_modules, shuffled_baseline, ProbeConfig, RankingFile, Split};
use crate::training::{fact_token_accuracy, finetune, prepare_samples, pretrain, ModuleSelection, PretrainConfig, RunRecord, TrainConfig};
use crate::util::{canonicalize, config_hash};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Shape of the toy transformer; the vocabulary size comes from the world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelShape {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            context_len: m.context_len,
            seed: m.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Training stops early once fact accuracy reaches this value.
    pub target_accuracy: f64,
    /// Fact accuracy is measured every this many epochs.
    pub check_every: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            epochs: 120,
            batch_size: 4,
            lr: 3e-3,
            warmup_steps: 50,
            weight_decay: 0.0,
            seed: 44,
            target_accuracy: 0.99,
            check_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    /// Number of modules to keep.
    pub n: usize,
    pub val_fraction: f64,
    /// Label permutations used for the shuffled-label baseline.
    pub baseline_permutations: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        let p = ProbeConfig::default();
        ProbeSettings {
            lr: p.lr,
            epochs: p.epochs,
            l2: p.l2,
            n: 4,
            val_fraction: 0.3,
            baseline_permutations: 3,
        }
    }
}

impl ProbeSettings {
    fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            lr: self.lr,
            epochs: self.epochs,
            l2: self.l2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Leading multiple-choice items used for validation during fine-tuning.
    pub val_items: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { val_items: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserveSettings {
    pub n: usize,
}

impl Default for ObserveSettings {
    fn default() -> Self {
        ObserveSettings { n: 300 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSettings {
    pub variants: Vec<Variant>,
}

impl Default for AblateSettings {
    fn default() -> Self {
        AblateSettings {
            variants: vec![Variant::Qa, Variant::QaFqa, Variant::QaFqaR, Variant::QaFqaE, Variant::F2],
        }
    }
}

/// Everything a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds fine-tuning, probing and the observation sample. `train.seed`
    /// is overwritten with this value.
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelShape,
    pub pretrain: PretrainSettings,
    pub shots: usize,
    pub train: TrainConfig,
    /// Replace `train.selected_modules` with the probe ranking's top-N.
    pub select_from_probe: bool,
    pub probe: ProbeSettings,
    pub eval: EvalSettings,
    pub observe: ObserveSettings,
    pub ablate: AblateSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 44,
            world: WorldConfig::default(),
            model: ModelShape::default(),
            pretrain: PretrainSettings::default(),
            shots: PromptTemplate::default().shots,
            train: TrainConfig::default(),
            select_from_probe: false,
            probe: ProbeSettings::default(),
            eval: EvalSettings::default(),
            observe: ObserveSettings::default(),
            ablate: AblateSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Loads `path` (or defaults) and applies `overrides` in order. Each
    /// override is `dotted.key=value` where the value is parsed as JSON and
    /// falls back to a plain string.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(ExperimentConfig::default())?;
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", p.display())]))?;
            let file: Value = serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", p.display())]))?;
            merge(&mut v, file);
        }
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if let Err(Error::Config(mut e)) = self.train.validate() {
            v.append(&mut e);
        }
        if self.shots > 4 {
            v.push(format!("shots must be <= 4 (got {})", self.shots));
        }
        if self.pretrain.batch_size == 0 || self.pretrain.check_every == 0 {
            v.push("pretrain.batch_size and pretrain.check_every must be >= 1".into());
        }
        if self.model.n_heads == 0 || !self.model.d_model.is_multiple_of(self.model.n_heads) {
            v.push(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.model.d_model, self.model.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.probe.val_fraction) || self.probe.val_fraction == 0.0 {
            v.push(format!("probe.val_fraction {} outside (0, 1)", self.probe.val_fraction));
        }
        if let ModuleSelection::Listed(ids) = &self.train.selected_modules {
            for id in ids {
                if id.layer >= self.model.n_layers {
                    v.push(format!("module `{id}` does not exist in a {}-layer model", self.model.n_layers));
                }
            }
        }
        if self.probe.n == 0 || self.probe.n > 2 * self.model.n_layers {
            v.push(format!("probe.n must be in 1..={} (got {})", 2 * self.model.n_layers, self.probe.n));
        }
        if self.eval.val_items == 0 {
            v.push("eval.val_items must be >= 1".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    fn world_key(&self) -> Value {
        json!({ "stage": "world", "format": WORLD_FORMAT, "world": self.world })
    }

    fn base_key(&self) -> Value {
        json!({ "stage": "pretrain", "world": self.world_key(), "model": self.model, "pretrain": self.pretrain })
    }

    fn probe_key(&self) -> Value {
        json!({ "stage": "probe", "base": self.base_key(), "shots": self.shots, "probe": self.probe, "seed": self.seed })
    }

    fn finetune_key(&self) -> Value {
        let modules = if self.select_from_probe {
            json!({ "ranked": self.probe_key() })
        } else {
            serde_json::to_value(&self.train.selected_modules).expect("serializes")
        };
        json!({
            "stage": "finetune",
            "base": self.base_key(),
            "shots": self.shots,
            "train": self.train,
            "modules": modules,
            "val_items": self.eval.val_items,
        })
    }

    fn observe_key(&self) -> Value {
        json!({
            "stage": "observe",
            "base": self.base_key(),
            "shots": self.shots,
            "observe": self.observe,
            "seed": self.seed,
            "alpha": self.train.alpha,
            "K": self.train.k,
            "pagerank": self.train.pagerank,
        })
    }

    fn ablate_key(&self) -> Value {
        let runs: Vec<Value> = self.ablate.variants.iter().map(|v| self.with_variant(*v).finetune_key()).collect();
        json!({ "stage": "ablate", "runs": runs })
    }

    fn with_variant(&self, v: Variant) -> ExperimentConfig {
        let mut c = self.clone();
        c.train.variant = v;
        c
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn apply_override(v: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(vec![format!("override `{assignment}` is not of the form key=value")]))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = v;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(vec![format!("unknown config key `{key}`")]))?;
    }
    *slot = value;
    Ok(())
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Parser, Debug)]
#[command(name = "f2", version, about = "Faithful fine-tuning experiments on a toy transformer")]
struct Cli {
    /// JSON experiment config. Omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that holds run artifacts.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    /// Config override `dotted.key=value`; repeatable, later ones win.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Overrides the experiment seed (and `F2_SEED`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Default)]
struct RunFlags {
    /// Fine-tuning objective (qa, qa+fqa, qa+fqa+r, qa+fqa+e, tag:qa+fqa+e, f2).
    #[arg(long)]
    variant: Option<String>,
    /// Optimizer step budget.
    #[arg(long)]
    steps: Option<usize>,
    /// Adapter targets: `all`, `attn`, `ranked` or a comma list like `attn_out_0,ffn_out_1`.
    #[arg(long)]
    modules: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic world and its record files.
    GenWorld,
    /// Pretrain the base model on the world corpus.
    Pretrain,
    /// Rank modules by linear-probe accuracy.
    Probe {
        /// Number of modules to select.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fine-tune adapters.
    Finetune {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Multiple-choice evaluation on every held-out item.
    EvalMc {
        #[command(flatten)]
        run: RunFlags,
        /// base, final, best_mc1 or best_mc2.
        #[arg(long, default_value = "final")]
        model: String,
    },
    /// FACTOR-style completion accuracy.
    EvalFactor {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value = "final")]
        model: String,
    },
    /// Entropy-indicator correlation study.
    Observe {
        /// Number of sampled cases.
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value = "base")]
        model: String,
    },
    /// Fine-tune every configured variant and tabulate them.
    Ablate {
        /// Comma-separated variant list.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        modules: Option<String>,
    },
}

fn run_overrides(run: &RunFlags, out: &mut Vec<String>) -> Result<()> {
    if let Some(v) = &run.variant {
        let parsed: Variant = v.parse()?;
        out.push(format!("train.variant={}", json!(parsed)));
    }
    if let Some(s) = run.steps {
        out.push(format!("train.max_steps={s}"));
    }
    if let Some(m) = &run.modules {
        if m == "ranked" {
            out.push("select_from_probe=true".into());
        } else {
            let sel: ModuleSelection = m.parse()?;
            out.push(format!("train.selected_modules={}", json!(sel)));
            out.push("select_from_probe=false".into());
        }
    }
    Ok(())
}

/// Runs the CLI on `argv` (program name first) and returns the exit code:
/// 0 on success, 1 on usage or validation errors, 2 on a numeric abort.
pub fn run_command(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<Vec<PathBuf>> {
    let mut overrides = Vec::new();
    if let Ok(s) = std::env::var("F2_SEED") {
        let seed: u64 = s
            .parse()
            .map_err(|_| Error::Config(vec![format!("F2_SEED `{s}` is not an unsigned integer")]))?;
        overrides.push(format!("seed={seed}"));
    }
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(cli.sets.iter().cloned());
    match &cli.command {
        Command::Probe { n: Some(n) } => overrides.push(format!("probe.n={n}")),
        Command::Finetune { run } | Command::EvalMc { run, .. } | Command::EvalFactor { run, .. } => run_overrides(run, &mut overrides)?,
        Command::Observe { n, run, .. } => {
            if let Some(n) = n {
                overrides.push(format!("observe.n={n}"));
            }
            run_overrides(run, &mut overrides)?;
        }
        Command::Ablate { variants, steps, modules } => {
            if let Some(vs) = variants {
                let parsed = vs.split(',').map(|v| v.trim().parse()).collect::<Result<Vec<Variant>>>()?;
                overrides.push(format!("ablate.variants={}", json!(parsed)));
            }
            run_overrides(
                &RunFlags {
                    variant: None,
                    steps: *steps,
                    modules: modules.clone(),
                },
                &mut overrides,
            )?;
        }
        _ => {}
    }
    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &overrides)?;
    let ctx = Context {
        cfg,
        runs: cli.runs_dir.clone(),
        overrides,
    };
    match &cli.command {
        Command::GenWorld => Ok(vec![ctx.world()?.0]),
        Command::Pretrain => Ok(vec![ctx.pretrain()?.dir]),
        Command::Probe { .. } => Ok(vec![ctx.probe(true)?.0]),
        Command::Finetune { .. } => Ok(vec![ctx.finetune(true)?.0]),
        Command::EvalMc { model, .. } => Ok(vec![ctx.eval_mc(model)?]),
        Command::EvalFactor { model, .. } => Ok(vec![ctx.eval_factor(model)?]),
        Command::Observe { model, .. } => Ok(vec![ctx.observe(model)?]),
        Command::Ablate { .. } => ctx.ablate(),
    }
}

// ---------------------------------------------------------------------------
// Stages

struct Context {
    cfg: ExperimentConfig,
    runs: PathBuf,
    overrides: Vec<String>,
}

/// Pretrained base model plus what was needed to build it.
pub struct Base {
    pub dir: PathBuf,
    pub world: GeneratedWorld,
    pub tokenizer: Tokenizer,
    pub model: Model<f32>,
}

/// Loads the base model for `cfg` from `runs`, pretraining it first when no
/// checkpoint with a matching config hash exists.
pub fn base_model(cfg: &ExperimentConfig, runs: &Path) -> Result<Base> {
    let ctx = Context {
        cfg: cfg.clone(),
        runs: runs.to_path_buf(),
        overrides: Vec::new(),
    };
    ctx.base()
}

/// Vocabulary over every text the pipeline renders.
pub fn build_tokenizer(gw: &GeneratedWorld, cutoff: usize) -> Tokenizer {
    let mut texts = PromptTemplate::scaffold_texts();
    texts.extend(gw.corpus.iter().cloned());
    for s in &gw.fqa {
        texts.push(s.question.clone());
        texts.push(s.answer.clone());
    }
    for m in &gw.mc {
        texts.push(m.question.clone());
        texts.extend(m.true_answers.iter().cloned());
        texts.extend(m.false_answers.iter().cloned());
    }
    let markers: Vec<String> = crate::data::EntityType::ALL.iter().map(|t| t.marker()).collect();
    let refs: Vec<&str> = markers.iter().map(String::as_str).collect();
    Tokenizer::build(texts.iter().map(String::as_str), &refs).with_cutoff(cutoff)
}

/// Declarative pretraining sequences, BOS-prefixed.
pub fn corpus_sequences(gw: &GeneratedWorld, tok: &Tokenizer) -> Vec<Vec<usize>> {
    gw.corpus
        .iter()
        .map(|s| {
            let mut v = vec![tok.bos_id()];
            v.extend(tok.tokenize(s));
            v
        })
        .collect()
}

fn hash_of(key: &Value) -> String {
    config_hash(&canonicalize(key))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(v)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

fn note(msg: impl AsRef<str>) {
    eprintln!("[f2] {}", msg.as_ref());
}

impl Context {
    /// `p` relative to the runs directory, so reports do not depend on
    /// where the runs live.
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.runs).unwrap_or(p).display().to_string()
    }

    fn stage_dir(&self, key: &Value) -> (PathBuf, String) {
        let h = hash_of(key);
        (self.runs.join(&h), h)
    }

    /// Common report header.
    fn report(&self, command: &str, hash: &str, key: &Value, body: Value) -> Value {
        let mut v = json!({
            "tool": "f2",
            "tool_version": TOOL_VERSION,
            "command": command,
            "config_hash": hash,
            "seed": self.cfg.seed,
            "overrides": self.overrides,
            "config": key,
        });
        merge(&mut v, body);
        v
    }

    fn world(&self) -> Result<(PathBuf, GeneratedWorld)> {
        let key = self.cfg.world_key();
        let (dir, hash) = self.stage_dir(&key);
        let gw = generate_world(&self.cfg.world)?;
        let wdir = dir.join("world");
        gw.write(&wdir)?;
        let body = json!({
            "entities": gw.world.entities.len(),
            "facts": gw.world.facts.len(),
            "train_facts": gw.world.train_facts.len(),
            "eval_facts": gw.world.eval_facts.len(),
            "fqa": gw.fqa.len(),
            "mc": gw.mc.len(),
            "factor": gw.factor.len(),
        });
        write_json(&dir.join("world.json"), &self.report("gen-world", &hash, &key, body))?;
        Ok((wdir, gw))
    }

    fn tokenizer(&self, gw: &GeneratedWorld) -> Tokenizer {
        build_tokenizer(gw, self.cfg.train.cutoff_len)
    }

    fn model_config(&self, tok: &Tokenizer) -> ModelConfig {
        let m = &self.cfg.model;
        ModelConfig {
            vocab_size: tok.vocab_size(),
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            context_len: m.context_len,
            seed: m.seed,
        }
    }

    fn pretrain(&self) -> Result<Base> {
        let key = self.cfg.base_key();
        let (dir, hash) = self.stage_dir(&key);
        let gw = generate_world(&self.cfg.world)?;
        let tok = self.tokenizer(&gw);
        let seqs = corpus_sequences(&gw, &tok);
        let ps = &self.cfg.pretrain;
        let pc = PretrainConfig {
            model: self.model_config(&tok),
            epochs: ps.epochs,
            batch_size: ps.batch_size,
            lr: ps.lr,
            warmup_steps: ps.warmup_steps,
            weight_decay: ps.weight_decay,
            seed: ps.seed,
        };
        let probes = gw.fact_probes();
        let mut checks: Vec<Value> = Vec::new();
        let mut err = None;
        let (model, history) = pretrain(&pc, &seqs, |e, m| {
            if e.epoch % ps.check_every != 0 && e.epoch != ps.epochs {
                return false;
            }
            match fact_token_accuracy(m, &tok, &probes) {
                Ok(acc) => {
                    note(format!("pretrain epoch {} loss {:.4} fact accuracy {:.4}", e.epoch, e.loss, acc));
                    checks.push(json!({ "epoch": e.epoch, "fact_accuracy": acc }));
                    acc >= ps.target_accuracy
                }
                Err(x) => {
                    err = Some(x);
                    true
                }
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        let final_acc = fact_token_accuracy(&model, &tok, &probes)?;
        if !history.iter().all(|h| h.loss.is_finite()) {
            return Err(Error::NonFinite { op: "pretraining loss" });
        }
        model.base_checkpoint(&hash).save(&dir.join("checkpoints").join("base"))?;
        let body = json!({
            "vocab_size": tok.vocab_size(),
            "sequences": seqs.len(),
            "epochs_run": history.len(),
            "history": history,
            "accuracy_checks": checks,
            "fact_accuracy": final_acc,
            "reached_target": final_acc >= ps.target_accuracy,
        });
        write_json(&dir.join("pretrain.json"), &self.report("pretrain", &hash, &key, body))?;
        if final_acc < ps.target_accuracy {
            note(format!(
                "warning: fact accuracy {final_acc:.4} is below the target {}",
                ps.target_accuracy
            ));
        }
        Ok(Base {
            dir,
            world: gw,
            tokenizer: tok,
            model,
        })
    }

    /// Loads the base checkpoint, pretraining first when it is missing.
    fn base(&self) -> Result<Base> {
        let (dir, _) = self.stage_dir(&self.cfg.base_key());
        let ck_dir = dir.join("checkpoints").join("base");
        if !ck_dir.join("manifest.json").exists() {
            note("base checkpoint missing; pretraining");
            return self.pretrain();
        }
        let gw = generate_world(&self.cfg.world)?;
        let tok = self.tokenizer(&gw);
        let model = Model::from_checkpoint(&Checkpoint::load(&ck_dir)?)?;
        if model.config != self.model_config(&tok) {
            return Err(Error::invalid(format!("checkpoint at {} does not match the config", ck_dir.display())));
        }
        Ok(Base {
            dir,
            world: gw,
            tokenizer: tok,
            model,
        })
    }

    fn template(&self) -> Result<PromptTemplate> {
        PromptTemplate::new(self.cfg.shots)
    }

    fn plain_samples(&self, base: &Base) -> Result<Vec<TokenizedSample>> {
        let template = self.template()?;
        base.world
            .fqa
            .iter()
            .map(|s| TokenizedSample::new(&base.tokenizer, &template, s))
            .collect()
    }

    /// Probes the base model. With `force` unset an existing ranking is reused.
    fn probe(&self, force: bool) -> Result<(PathBuf, RankingFile)> {
        let key = self.cfg.probe_key();
        let (dir, hash) = self.stage_dir(&key);
        let path = dir.join("ranking.json");
        if !force && path.exists() {
            let v: Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
            return Ok((path, serde_json::from_value(v["ranking"].clone())?));
        }
        let base = self.base()?;
        let samples = self.plain_samples(&base)?;
        let ps = &self.cfg.probe;
        let ds = collect_features(&base.model, &samples, self.cfg.seed, ps.val_fraction)?;
        let pc = ps.probe_config();
        let (report, _) = probe_modules(&ds, &pc, self.cfg.seed, ps.n)?;
        let labels: Vec<u8> = ds.rows.iter().map(|r| r.label).collect();
        let splits: Vec<Split> = ds.rows.iter().map(|r| r.split).collect();
        let perm_seeds: Vec<u64> = (0..ps.baseline_permutations as u64).map(|i| self.cfg.seed.wrapping_add(1 + i)).collect();
        let mut baseline = std::collections::BTreeMap::new();
        if !perm_seeds.is_empty() {
            for (m, feats) in ds.modules.iter().zip(&ds.features) {
                baseline.insert(m.to_string(), shuffled_baseline(feats, &labels, &splits, &pc, &perm_seeds)?);
            }
        }
        let ranking = RankingFile {
            config_hash: hash.clone(),
            seed: self.cfg.seed,
            probe: pc,
            n: ps.n,
            report,
            shuffled_baseline: baseline,
            rows: ds.rows.len(),
            skipped: ds.skipped,
        };
        let body = json!({ "ranking": ranking });
        write_json(&path, &self.report("probe", &hash, &key, body))?;
        Ok((path, ranking))
    }

    /// Fine-tunes with the current config. With `force` unset an existing
    /// run is reused.
    fn finetune(&self, force: bool) -> Result<(PathBuf, RunRecord, Base)> {
        let key = self.cfg.finetune_key();
        let (dir, hash) = self.stage_dir(&key);
        let path = dir.join("run.json");
        if !force && path.exists() {
            let v: Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
            return Ok((path, serde_json::from_value(v["run"].clone())?, self.base()?));
        }
        let mut train_cfg = self.cfg.train.clone();
        if self.cfg.select_from_probe {
            let (_, ranking) = self.probe(false)?;
            train_cfg.selected_modules = ModuleSelection::Listed(ranking.report.selected_top_n.clone());
        }
        let base = self.base()?;
        let template = self.template()?;
        let prepared = prepare_samples(&base.tokenizer, &template, &base.world.fqa)?;
        let val_n = self.cfg.eval.val_items.min(base.world.mc.len());
        note(format!(
            "fine-tuning {} on {} samples, validating on {} items",
            train_cfg.variant,
            prepared.len(),
            val_n
        ));
        let out = finetune(
            &base.model,
            &base.tokenizer,
            &template,
            &prepared,
            &base.world.mc[..val_n],
            &train_cfg,
            Some(&dir),
        )?;
        let body = json!({ "run": out.record, "train_config": train_cfg });
        write_json(&path, &self.report("finetune", &hash, &key, body))?;
        Ok((path, out.record, base))
    }

    /// Base model with the requested adapters applied, and the directory
    /// evaluation reports go to.
    fn load_model(&self, which: &str) -> Result<(Model<f32>, Base, PathBuf, String, Value)> {
        match which {
            "base" => {
                let base = self.base()?;
                let key = self.cfg.base_key();
                let (dir, hash) = self.stage_dir(&key);
                Ok((base.model.clone(), base, dir, hash, key))
            }
            "final" | "best_mc1" | "best_mc2" => {
                let key = self.cfg.finetune_key();
                let (dir, hash) = self.stage_dir(&key);
                let ck_dir = dir.join("checkpoints").join(which);
                let base = if ck_dir.join("manifest.json").exists() {
                    self.base()?
                } else {
                    note("fine-tuning run missing; training it first");
                    self.finetune(false)?.2
                };
                let model = base.model.clone().load_adapters(&Checkpoint::load(&ck_dir)?)?;
                Ok((model, base, dir, hash, key))
            }
            other => Err(Error::Config(vec![format!(
                "--model must be base, final, best_mc1 or best_mc2 (got `{other}`)"
            )])),
        }
    }

    fn eval_mc(&self, which: &str) -> Result<PathBuf> {
        let (model, base, dir, hash, key) = self.load_model(which)?;
        let template = self.template()?;
        let rep = evaluate_mc(&model, &base.tokenizer, &template, &base.world.mc)?;
        let body = json!({ "model": which, "items": base.world.mc.len(), "mc": rep });
        let path = dir.join(format!("eval_mc_{which}.json"));
        write_json(&path, &self.report("eval-mc", &hash, &key, body))?;
        Ok(path)
    }

    fn eval_factor(&self, which: &str) -> Result<PathBuf> {
        let (model, base, dir, hash, key) = self.load_model(which)?;
        let rep = factor_accuracy(&model, &base.tokenizer, &base.world.factor)?;
        let body = json!({ "model": which, "items": base.world.factor.len(), "factor": rep });
        let path = dir.join(format!("eval_factor_{which}.json"));
        write_json(&path, &self.report("eval-factor", &hash, &key, body))?;
        Ok(path)
    }

    fn observe(&self, which: &str) -> Result<PathBuf> {
        let (model, base, model_dir, _, _) = self.load_model(which)?;
        let samples = self.plain_samples(&base)?;
        let t = &self.cfg.train;
        let rep = observation_experiment(&model, &samples, self.cfg.observe.n, self.cfg.seed, t.alpha, t.k, &t.pagerank)?;
        let key = self.cfg.observe_key();
        let (dir, hash) = self.stage_dir(&key);
        let body = json!({ "model": which, "model_dir": self.rel(&model_dir), "observation": rep });
        let path = dir.join(format!("observe_{which}.json"));
        write_json(&path, &self.report("observe", &hash, &key, body))?;
        Ok(path)
    }

    fn ablate(&self) -> Result<Vec<PathBuf>> {
        let mut rows = Vec::new();
        let mut paths = Vec::new();
        for v in &self.cfg.ablate.variants {
            let sub = Context {
                cfg: self.cfg.with_variant(*v),
                runs: self.runs.clone(),
                overrides: self.overrides.clone(),
            };
            let (path, rec, _) = sub.finetune(true)?;
            rows.push(json!({
                "variant": v,
                "run": self.rel(&path),
                "best_mc1": rec.best_mc1.mc1,
                "best_mc1_step": rec.best_mc1.step,
                "best_mc2": rec.best_mc2.mc2,
                "best_mc2_step": rec.best_mc2.step,
            }));
            paths.push(path);
        }
        let key = self.cfg.ablate_key();
        let (dir, hash) = self.stage_dir(&key);
        let mut table = String::from("| variant | best MC1 | best MC2 | run |\n|---|---|---|---|\n");
        for r in &rows {
            table.push_str(&format!(
                "| {} | {:.4} | {:.4} | {} |\n",
                r["variant"].as_str().unwrap_or_default(),
                r["best_mc1"].as_f64().unwrap_or(f64::NAN),
                r["best_mc2"].as_f64().unwrap_or(f64::NAN),
                r["run"].as_str().unwrap_or_default()
            ));
        }
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("ablation.md"), &table)?;
        let body = json!({ "rows": rows });
        let path = dir.join("ablation.json");
        write_json(&path, &self.report("ablate", &hash, &key, body))?;
        paths.push(path);
        Ok(paths)
    }
}
