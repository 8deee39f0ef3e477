//! Truthfulness metrics and the entropy-indicator observation study.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{FactorItem, McItem, PromptTemplate, TokenizedSample, Tokenizer};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{softmax_f64, Scalar};
use crate::spans::{extract_attention_spans, extract_entity_spans, make_weights, relative, PageRankConfig, SpanSource};

/// Per-item multiple-choice scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McItemScore {
    pub id: String,
    pub mc1: f64,
    pub mc2: f64,
    pub mc3: f64,
    pub true_logliks: Vec<f64>,
    pub false_logliks: Vec<f64>,
}

/// Scores from candidate log-likelihoods. MC1 requires the best true answer
/// to beat every false one strictly.
pub fn mc_from_logliks(true_ll: &[f64], false_ll: &[f64], best_index: usize) -> Result<(f64, f64, f64)> {
    if true_ll.is_empty() || false_ll.is_empty() {
        return Err(Error::invalid("mc scores need at least one true and one false candidate"));
    }
    let best = *true_ll
        .get(best_index)
        .ok_or_else(|| Error::invalid(format!("best_index {best_index} out of range")))?;
    let max_false = false_ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mc1 = if best > max_false { 1.0 } else { 0.0 };
    let masses = normalized_masses(true_ll, false_ll);
    let mc2 = masses[..true_ll.len()].iter().sum();
    let mc3 = true_ll.iter().filter(|&&t| t > max_false).count() as f64 / true_ll.len() as f64;
    Ok((mc1, mc2, mc3))
}

/// `exp(ll)` over all candidates, normalized with max subtraction; true
/// candidates first.
pub fn normalized_masses(true_ll: &[f64], false_ll: &[f64]) -> Vec<f64> {
    let all: Vec<f64> = true_ll.iter().chain(false_ll).copied().collect();
    softmax_f64(&all)
}

fn prompt_ids(tok: &Tokenizer, text: &str) -> Vec<usize> {
    let mut ids = vec![tok.bos_id()];
    ids.extend(tok.tokenize_with_offsets(text).into_iter().map(|(id, _, _)| id));
    ids
}

fn candidate_ids(tok: &Tokenizer, text: &str) -> Vec<usize> {
    tok.tokenize_with_offsets(text).into_iter().map(|(id, _, _)| id).collect()
}

/// Scores one item under the few-shot QA prompt.
pub fn mc_scores<T: Scalar>(model: &Model<T>, tok: &Tokenizer, template: &PromptTemplate, item: &McItem) -> Result<McItemScore> {
    let prompt = prompt_ids(tok, &template.qa_prefix(&item.question, true));
    let ll = |c: &String| model.sequence_logprob(&prompt, &candidate_ids(tok, c));
    let true_ll = item.true_answers.iter().map(ll).collect::<Result<Vec<_>>>()?;
    let false_ll = item.false_answers.iter().map(ll).collect::<Result<Vec<_>>>()?;
    let (mc1, mc2, mc3) = mc_from_logliks(&true_ll, &false_ll, item.best_index)?;
    Ok(McItemScore {
        id: item.id.clone(),
        mc1,
        mc2,
        mc3,
        true_logliks: true_ll,
        false_logliks: false_ll,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub mc1: f64,
    pub mc2: f64,
    pub mc3: f64,
    pub items: Vec<McItemScore>,
}

pub fn evaluate_mc<T: Scalar>(model: &Model<T>, tok: &Tokenizer, template: &PromptTemplate, items: &[McItem]) -> Result<McReport> {
    if items.is_empty() {
        return Err(Error::invalid("no multiple-choice items to evaluate"));
    }
    let scores = items
        .iter()
        .map(|it| mc_scores(model, tok, template, it))
        .collect::<Result<Vec<_>>>()?;
    let n = scores.len() as f64;
    Ok(McReport {
        mc1: scores.iter().map(|s| s.mc1).sum::<f64>() / n,
        mc2: scores.iter().map(|s| s.mc2).sum::<f64>() / n,
        mc3: scores.iter().map(|s| s.mc3).sum::<f64>() / n,
        items: scores,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorItemScore {
    pub id: String,
    pub correct: bool,
    pub factual_loglik: f64,
    pub nonfactual_logliks: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorReport {
    pub accuracy: f64,
    pub items: Vec<FactorItemScore>,
}

/// Fraction of items whose factual completion is strictly the most likely.
pub fn factor_accuracy<T: Scalar>(model: &Model<T>, tok: &Tokenizer, items: &[FactorItem]) -> Result<FactorReport> {
    if items.is_empty() {
        return Err(Error::invalid("no completion items to evaluate"));
    }
    let mut scores = Vec::with_capacity(items.len());
    for it in items {
        let prompt = prompt_ids(tok, &it.prefix);
        let fact = model.sequence_logprob(&prompt, &candidate_ids(tok, &it.factual_completion))?;
        let others = it
            .nonfactual_completions
            .iter()
            .map(|c| model.sequence_logprob(&prompt, &candidate_ids(tok, c)))
            .collect::<Result<Vec<_>>>()?;
        scores.push(FactorItemScore {
            id: it.id.clone(),
            correct: others.iter().all(|&o| fact > o),
            factual_loglik: fact,
            nonfactual_logliks: others,
        });
    }
    Ok(FactorReport {
        accuracy: scores.iter().filter(|s| s.correct).count() as f64 / scores.len() as f64,
        items: scores,
    })
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    pub id: String,
    /// 1 when the hallucinated answer is more likely than the correct one.
    pub y: u8,
    pub avg_h: f64,
    pub avg_e_h: f64,
    pub avg_ae_h: f64,
}

fn weighted_mean(h: &[f64], w: &[f64]) -> f64 {
    h.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>()
}

/// Knowledge-position entropies under the retrieval render and the
/// hallucination label from QA-render likelihoods.
pub fn entropy_indicators<T: Scalar>(
    model: &Model<T>,
    s: &TokenizedSample,
    alpha: f64,
    k: usize,
    pr: &PageRankConfig,
) -> Result<ObservationRow> {
    let h_render = s
        .qa_hallucinated
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("sample `{}` has no hallucinated answer", s.id)))?;
    let trace = model.forward(&s.retrieval.ids, true)?;
    let region = s.knowledge_region();
    let h: Vec<f64> = (region.0..region.1)
        .map(|i| entropy(&softmax_f64(trace.logits.row(i - 1))))
        .collect();
    let len = h.len();
    let ent = relative(&extract_entity_spans(s)?, region);
    let attn = if k == 0 {
        Default::default()
    } else {
        relative(&extract_attention_spans(&trace, s, k, pr)?, region)
    };
    let w_e = make_weights(&[&ent], alpha, len, SpanSource::Ent)?;
    let w_ae = make_weights(&[&ent, &attn], alpha, len, SpanSource::EntAttn)?;

    let qa_prompt = &s.qa.ids[..s.qa.target.0];
    let right = model.sequence_logprob(qa_prompt, s.qa.target_ids())?;
    let wrong = model.sequence_logprob(&h_render.ids[..h_render.target.0], h_render.target_ids())?;
    Ok(ObservationRow {
        id: s.id.clone(),
        y: u8::from(right < wrong),
        avg_h: h.iter().sum::<f64>() / len as f64,
        avg_e_h: weighted_mean(&h, &w_e.weights),
        avg_ae_h: weighted_mean(&h, &w_ae.weights),
    })
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho with tie correction and a two-sided t-approximation
/// p-value on `n - 2` degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::invalid(format!(
            "spearman needs equal lengths of at least 3 (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("spearman undefined: an input has zero variance"));
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = n - 2.0;
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok((rho, p))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationReport {
    pub n: usize,
    pub seed: u64,
    pub alpha: f64,
    pub k: usize,
    pub hallucination_rate: f64,
    pub avg_h: Correlation,
    pub avg_e_h: Correlation,
    pub avg_ae_h: Correlation,
    pub rows: Vec<ObservationRow>,
}

/// Samples `n` cases (all of them, in order, when `n` equals the
/// population) and correlates the label with each indicator.
pub fn observation_experiment<T: Scalar>(
    model: &Model<T>,
    samples: &[TokenizedSample],
    n: usize,
    seed: u64,
    alpha: f64,
    k: usize,
    pr: &PageRankConfig,
) -> Result<ObservationReport> {
    let pool: Vec<&TokenizedSample> = samples.iter().filter(|s| s.qa_hallucinated.is_some()).collect();
    if n > pool.len() || n < 3 {
        return Err(Error::invalid(format!(
            "observation needs 3 <= n <= {} samples with hallucinated answers (asked for {n})",
            pool.len()
        )));
    }
    let chosen: Vec<&TokenizedSample> = if n == pool.len() {
        pool
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..pool.len()).collect::<Vec<_>>().choose_multiple(&mut rng, n).copied().collect();
        idx.sort();
        idx.into_iter().map(|i| pool[i]).collect()
    };
    let rows = chosen
        .into_iter()
        .map(|s| entropy_indicators(model, s, alpha, k, pr))
        .collect::<Result<Vec<_>>>()?;
    let y: Vec<f64> = rows.iter().map(|r| r.y as f64).collect();
    let corr = |f: fn(&ObservationRow) -> f64| -> Result<Correlation> {
        let x: Vec<f64> = rows.iter().map(f).collect();
        let (rho, p) = spearman(&y, &x)?;
        Ok(Correlation { rho, p })
    };
    Ok(ObservationReport {
        n,
        seed,
        alpha,
        k,
        hallucination_rate: y.iter().sum::<f64>() / n as f64,
        avg_h: corr(|r| r.avg_h)?,
        avg_e_h: corr(|r| r.avg_e_h)?,
        avg_ae_h: corr(|r| r.avg_ae_h)?,
        rows,
    })
}
