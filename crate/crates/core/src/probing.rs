//! Linear probes on module outputs, used to rank modules by how well their
//! hidden states separate correct from hallucinated answers.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TokenizedRender, TokenizedSample};
use crate::error::{Error, Result};
use crate::model::{Model, ModuleId};
use crate::nn::{AdamW, ParamStore, Scalar, Tape, Tensor};
use crate::util::fnv1a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// One probe row: a continuation of one sample with its label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub sample_id: String,
    /// 0 for the correct answer, 1 for the hallucinated one.
    pub label: u8,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub modules: Vec<ModuleId>,
    pub rows: Vec<ProbeRow>,
    /// `features[m][r]` is the feature vector of row `r` for module `m`.
    pub features: Vec<Vec<Vec<f64>>>,
    /// Samples without a hallucinated answer.
    pub skipped: usize,
}

/// Assigns a sample to the validation split by a seeded hash of its id.
pub fn split_of(id: &str, seed: u64, val_fraction: f64) -> Split {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(id.as_bytes());
    let bucket = (fnv1a(&bytes) % 10_000) as f64 / 10_000.0;
    if bucket < val_fraction {
        Split::Validation
    } else {
        Split::Train
    }
}

fn final_token_features<T: Scalar>(model: &Model<T>, r: &TokenizedRender, modules: &[ModuleId]) -> Result<Vec<Vec<f64>>> {
    let trace = model.forward(&r.ids, true)?;
    let pos = r.target.1 - 1;
    modules
        .iter()
        .map(|&m| {
            let t = trace.module(m).ok_or_else(|| Error::UnknownModule(m.to_string()))?;
            Ok(t.row(pos).iter().map(|v| v.as_f64()).collect())
        })
        .collect()
}

/// Final answer-token module outputs under the QA render, one truthful and
/// one hallucinated row per sample.
pub fn collect_features<T: Scalar>(
    model: &Model<T>,
    samples: &[TokenizedSample],
    seed: u64,
    val_fraction: f64,
) -> Result<ProbeDataset> {
    let modules = model.module_ids();
    let mut rows = Vec::new();
    let mut features = vec![Vec::new(); modules.len()];
    let mut skipped = 0;
    for s in samples {
        let Some(h) = &s.qa_hallucinated else {
            skipped += 1;
            continue;
        };
        let split = split_of(&s.id, seed, val_fraction);
        for (label, render) in [(0u8, &s.qa), (1u8, h)] {
            let f = final_token_features(model, render, &modules)?;
            for (m, v) in f.into_iter().enumerate() {
                features[m].push(v);
            }
            rows.push(ProbeRow {
                sample_id: s.id.clone(),
                label,
                split,
            });
        }
    }
    Ok(ProbeDataset {
        modules,
        rows,
        features,
        skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 1e-2,
            epochs: 200,
            l2: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    /// Feature standardization fitted on the training rows.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Two-class logit weights, `[d, 2]` row-major, and bias.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub val_accuracy: f64,
}

impl Probe {
    pub fn predict(&self, x: &[f64]) -> u8 {
        let mut z = [self.bias[0], self.bias[1]];
        for (j, v) in x.iter().enumerate() {
            let xs = (v - self.mean[j]) / self.std[j];
            z[0] += xs * self.weights[j * 2];
            z[1] += xs * self.weights[j * 2 + 1];
        }
        u8::from(z[1] > z[0])
    }
}

/// Full-batch logistic regression with an L2 penalty on the weights,
/// optimized with AdamW. Accuracy is measured on the validation rows.
pub fn train_probe(x: &[Vec<f64>], labels: &[u8], splits: &[Split], cfg: &ProbeConfig, seed: u64) -> Result<Probe> {
    if x.len() != labels.len() || x.len() != splits.len() {
        return Err(Error::shape("train_probe", format!("{} rows, {} labels, {} splits", x.len(), labels.len(), splits.len())));
    }
    let train: Vec<usize> = (0..x.len()).filter(|&i| splits[i] == Split::Train).collect();
    let val: Vec<usize> = (0..x.len()).filter(|&i| splits[i] == Split::Validation).collect();
    let n_pos = train.iter().filter(|&&i| labels[i] == 1).count();
    if n_pos == 0 || n_pos == train.len() {
        return Err(Error::invalid("train_probe: training rows contain a single class"));
    }
    if val.is_empty() {
        return Err(Error::invalid("train_probe: no validation rows"));
    }
    let d = x[0].len();
    let nt = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|&i| x[i][j]).sum::<f64>() / nt).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let var = train.iter().map(|&i| (x[i][j] - mean[j]).powi(2)).sum::<f64>() / nt;
            var.sqrt().max(1e-8)
        })
        .collect();
    let xs: Vec<f64> = train
        .iter()
        .flat_map(|&i| (0..d).map(|j| (x[i][j] - mean[j]) / std[j]).collect::<Vec<_>>())
        .collect();
    let xs = Tensor::new(vec![train.len(), d], xs)?;
    let targets: Vec<usize> = train.iter().map(|&i| labels[i] as usize).collect();
    let rows: Vec<usize> = (0..train.len()).collect();
    let inv_n = vec![1.0 / nt; train.len()];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let w_id = store.insert("probe.w", Tensor::randn(&[d, 2], 0.01, &mut rng), true)?;
    let b_id = store.insert("probe.b", Tensor::zeros(&[2]), true)?;
    let mut opt = AdamW::default();
    for epoch in 1..=cfg.epochs {
        store.zero_grad();
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(xs.clone(), false)?;
        let w = tape.param(&store, w_id)?;
        let b = tape.param(&store, b_id)?;
        let z = tape.matmul(xv, w)?;
        let z = tape.add(z, b)?;
        let nll = tape.weighted_nll(z, &rows, &targets, &inv_n)?;
        let sq = tape.mul(w, w)?;
        let reg = tape.sum(sq)?;
        let reg = tape.scale(reg, cfg.l2)?;
        let loss = tape.add(nll, reg)?;
        tape.backward(loss, &mut store)?;
        opt.step(&mut store, cfg.lr, epoch as u64)?;
    }
    let mut probe = Probe {
        mean,
        std,
        weights: store.get(w_id).value.data().to_vec(),
        bias: store.get(b_id).value.data().to_vec(),
        val_accuracy: 0.0,
    };
    let correct = val.iter().filter(|&&i| probe.predict(&x[i]) == labels[i]).count();
    probe.val_accuracy = correct as f64 / val.len() as f64;
    Ok(probe)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleAccuracy {
    pub module: ModuleId,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleProbeReport {
    /// Sorted by accuracy, descending; ties by layer, then attention before FFN.
    pub ranking: Vec<ModuleAccuracy>,
    pub selected_top_n: Vec<ModuleId>,
}

pub fn rank_and_select(accuracies: &[ModuleAccuracy], n: usize) -> ModuleProbeReport {
    let mut ranking = accuracies.to_vec();
    ranking.sort_by(|a, b| {
        b.accuracy
            .total_cmp(&a.accuracy)
            .then(a.module.layer.cmp(&b.module.layer))
            .then(a.module.kind.cmp(&b.module.kind))
    });
    let selected_top_n = ranking.iter().take(n).map(|m| m.module).collect();
    ModuleProbeReport { ranking, selected_top_n }
}

/// Contents of ranking.json.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingFile {
    pub config_hash: String,
    pub seed: u64,
    pub probe: ProbeConfig,
    pub n: usize,
    pub report: ModuleProbeReport,
    /// Mean and standard deviation of validation accuracy with shuffled
    /// training labels, per module.
    pub shuffled_baseline: BTreeMap<String, (f64, f64)>,
    pub rows: usize,
    pub skipped: usize,
}

/// Validation accuracy of a probe trained on randomly permuted labels, over
/// `seeds` permutations.
pub fn shuffled_baseline(x: &[Vec<f64>], labels: &[u8], splits: &[Split], cfg: &ProbeConfig, seeds: &[u64]) -> Result<(f64, f64)> {
    let mut accs = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let mut perm = labels.to_vec();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        accs.push(train_probe(x, &perm, splits, cfg, s)?.val_accuracy);
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, var.sqrt()))
}

/// Probes every module of `ds` and ranks them.
pub fn probe_modules(ds: &ProbeDataset, cfg: &ProbeConfig, seed: u64, n: usize) -> Result<(ModuleProbeReport, Vec<Probe>)> {
    let labels: Vec<u8> = ds.rows.iter().map(|r| r.label).collect();
    let splits: Vec<Split> = ds.rows.iter().map(|r| r.split).collect();
    let mut accs = Vec::with_capacity(ds.modules.len());
    let mut probes = Vec::with_capacity(ds.modules.len());
    for (m, feats) in ds.modules.iter().zip(&ds.features) {
        let p = train_probe(feats, &labels, &splits, cfg, seed)?;
        accs.push(ModuleAccuracy {
            module: *m,
            accuracy: p.val_accuracy,
        });
        probes.push(p);
    }
    Ok((rank_and_select(&accs, n), probes))
}
