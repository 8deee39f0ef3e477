//! Training objectives: answer loss without knowledge, knowledge retrieval
//! (optionally span-weighted), knowledge-grounded answer loss, and their sums.
//!
//! Every objective is a weighted negative log-likelihood over one target
//! region. Predictions for token `i` come from logits row `i - 1`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TokenizedRender, TokenizedSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{log_softmax_at, Scalar, Tape, Tensor, Var};
use crate::spans::{make_weights, relative, SpanSource, TokenWeightVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Divide by the sum of weights.
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn divisor(self, w: &TokenWeightVector) -> f64 {
        match self {
            Reduction::Mean => w.weights.iter().sum(),
            Reduction::Sum => 1.0,
        }
    }
}

fn check_region(op: &'static str, len: usize, region: (usize, usize), w: &TokenWeightVector) -> Result<()> {
    if region.0 == 0 || region.0 >= region.1 || region.1 > len {
        return Err(Error::invalid(format!(
            "{op}: region {}..{} invalid for a sequence of {len}",
            region.0, region.1
        )));
    }
    if w.len() != region.1 - region.0 {
        return Err(Error::shape(
            op,
            format!("{} weights for a region of {}", w.len(), region.1 - region.0),
        ));
    }
    Ok(())
}

/// Weighted cross-entropy on the tape.
pub fn wce_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    ids: &[usize],
    region: (usize, usize),
    w: &TokenWeightVector,
    reduction: Reduction,
) -> Result<Var> {
    check_region("wce", ids.len(), region, w)?;
    let rows: Vec<usize> = (region.0 - 1..region.1 - 1).collect();
    let weights: Vec<T> = w.weights.iter().map(|&x| T::from_f64(x)).collect();
    let nll = tape.weighted_nll(logits, &rows, &ids[region.0..region.1], &weights)?;
    tape.scale(nll, T::from_f64(1.0 / reduction.divisor(w)))
}

/// Weighted cross-entropy of `ids[region]` under precomputed logits.
pub fn wce<T: Scalar>(
    logits: &Tensor<T>,
    ids: &[usize],
    region: (usize, usize),
    w: &TokenWeightVector,
    reduction: Reduction,
) -> Result<f64> {
    check_region("wce", ids.len(), region, w)?;
    if logits.rows() < region.1 - 1 {
        return Err(Error::shape("wce", format!("{} logit rows for region end {}", logits.rows(), region.1)));
    }
    let total: f64 = (region.0..region.1)
        .zip(&w.weights)
        .map(|(i, wi)| -wi * log_softmax_at(logits.row(i - 1), ids[i]))
        .sum();
    Ok(total / reduction.divisor(w))
}

fn render_loss<T: Scalar>(model: &Model<T>, r: &TokenizedRender, region: (usize, usize), w: &TokenWeightVector, reduction: Reduction) -> Result<f64> {
    let trace = model.forward(&r.ids, false)?;
    wce(&trace.logits, &r.ids, region, w, reduction)
}

/// Answer loss under the few-shot QA render, mean over answer tokens.
pub fn loss_qa<T: Scalar>(model: &Model<T>, s: &TokenizedSample) -> Result<f64> {
    render_loss(model, &s.qa, s.qa.target, &TokenWeightVector::unit(s.qa.target_len()), Reduction::Mean)
}

/// Knowledge loss under the retrieval render with weights `w`.
pub fn loss_retrieval<T: Scalar>(model: &Model<T>, s: &TokenizedSample, w: &TokenWeightVector, reduction: Reduction) -> Result<f64> {
    render_loss(model, &s.retrieval, s.retrieval.target, w, reduction)
}

/// Answer loss with the knowledge in context.
pub fn loss_fqa<T: Scalar>(model: &Model<T>, s: &TokenizedSample) -> Result<f64> {
    render_loss(model, &s.fqa, s.fqa.target, &TokenWeightVector::unit(s.fqa.target_len()), Reduction::Mean)
}

/// Loss variants, from the answer loss alone up to the full tagged objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Qa,
    QaFqa,
    QaFqaR,
    QaFqaE,
    TagQaFqaE,
    F2,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Qa,
        Variant::QaFqa,
        Variant::QaFqaR,
        Variant::QaFqaE,
        Variant::TagQaFqaE,
        Variant::F2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Qa => "qa",
            Variant::QaFqa => "qa+fqa",
            Variant::QaFqaR => "qa+fqa+r",
            Variant::QaFqaE => "qa+fqa+e",
            Variant::TagQaFqaE => "tag:qa+fqa+e",
            Variant::F2 => "f2",
        }
    }

    /// Whether knowledge-bearing renders use the tagged knowledge.
    pub fn tagged(self) -> bool {
        matches!(self, Variant::TagQaFqaE | Variant::F2)
    }

    pub fn uses_fqa(self) -> bool {
        self != Variant::Qa
    }

    /// Weighting of the retrieval component, if the variant has one.
    pub fn retrieval_source(self) -> Option<SpanSource> {
        match self {
            Variant::Qa | Variant::QaFqa => None,
            Variant::QaFqaR => Some(SpanSource::Unit),
            Variant::QaFqaE | Variant::TagQaFqaE => Some(SpanSource::Ent),
            Variant::F2 => Some(SpanSource::EntAttn),
        }
    }

    pub fn needs_attention_spans(self) -> bool {
        matches!(self.retrieval_source(), Some(SpanSource::Attn | SpanSource::EntAttn))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown variant `{s}` (expected one of {})",
                    Variant::ALL.map(|v| v.as_str()).join(", ")
                ))
            })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Retrieval weights for a sample from its precomputed span sets.
pub fn retrieval_weights(s: &TokenizedSample, source: SpanSource, alpha: f64) -> Result<TokenWeightVector> {
    let region = s.knowledge_region();
    let len = region.1 - region.0;
    let ent = relative(&s.span_ent, region);
    let attn = relative(&s.span_attn, region);
    match source {
        SpanSource::Unit => Ok(TokenWeightVector::unit(len)),
        SpanSource::Ent => make_weights(&[&ent], alpha, len, source),
        SpanSource::Attn => make_weights(&[&attn], alpha, len, source),
        SpanSource::EntAttn => make_weights(&[&ent, &attn], alpha, len, source),
    }
}

/// Per-component multipliers for the summed objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Coefficients {
    pub qa: f64,
    pub fqa: f64,
    pub retrieval: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Coefficients {
            qa: 1.0,
            fqa: 1.0,
            retrieval: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub token_count: BTreeMap<String, usize>,
}

/// A training sample in both plain and tagged form. Span sets on `tagged`
/// refer to the tagged retrieval render.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub plain: TokenizedSample,
    pub tagged: TokenizedSample,
}

impl PreparedSample {
    pub fn for_variant(&self, v: Variant) -> &TokenizedSample {
        if v.tagged() {
            &self.tagged
        } else {
            &self.plain
        }
    }
}

/// Settings shared by every objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub alpha: f64,
    pub coefficients: Coefficients,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            alpha: 1.1,
            coefficients: Coefficients::default(),
        }
    }
}

/// Records the variant's objective on `tape` and returns the total loss
/// node with its breakdown. The knowledge and answer losses share one
/// forward pass over the FQA render, which extends the retrieval render.
pub fn f2_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    sample: &PreparedSample,
    variant: Variant,
    settings: &LossSettings,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<(Var, LossBreakdown)> {
    let s = sample.for_variant(variant);
    let c = settings.coefficients;
    let mut components = BTreeMap::new();
    let mut token_count = BTreeMap::new();
    let mut terms = Vec::new();

    let qa_fwd = model.forward_on_tape(tape, &s.qa.ids, dropout.as_deref_mut())?;
    let unit = TokenWeightVector::unit(s.qa.target_len());
    let qa = wce_on_tape(tape, qa_fwd.logits, &s.qa.ids, s.qa.target, &unit, Reduction::Mean)?;
    components.insert("qa".to_string(), tape.value(qa).item().as_f64());
    token_count.insert("qa".to_string(), s.qa.target_len());
    terms.push((qa, c.qa));

    if variant.uses_fqa() {
        let fwd = model.forward_on_tape(tape, &s.fqa.ids, dropout)?;
        let unit = TokenWeightVector::unit(s.fqa.target_len());
        let fqa = wce_on_tape(tape, fwd.logits, &s.fqa.ids, s.fqa.target, &unit, Reduction::Mean)?;
        components.insert("fqa".to_string(), tape.value(fqa).item().as_f64());
        token_count.insert("fqa".to_string(), s.fqa.target_len());
        terms.push((fqa, c.fqa));
        if let Some(source) = variant.retrieval_source() {
            let region = s.knowledge_region();
            if s.fqa.knowledge != Some(region) || s.fqa.ids[..s.retrieval.ids.len()] != s.retrieval.ids[..] {
                return Err(Error::invalid(format!(
                    "sample `{}`: FQA render does not extend the retrieval render",
                    s.id
                )));
            }
            let w = retrieval_weights(s, source, settings.alpha)?;
            let r = wce_on_tape(tape, fwd.logits, &s.fqa.ids, region, &w, Reduction::Mean)?;
            components.insert("weighted_retrieval".to_string(), tape.value(r).item().as_f64());
            token_count.insert("weighted_retrieval".to_string(), region.1 - region.0);
            terms.push((r, c.retrieval));
        }
    }

    let mut total = None;
    for (v, coef) in terms {
        let v = if coef == 1.0 { v } else { tape.scale(v, T::from_f64(coef))? };
        total = Some(match total {
            None => v,
            Some(t) => tape.add(t, v)?,
        });
    }
    let total = total.expect("at least the QA term");
    let breakdown = LossBreakdown {
        total: tape.value(total).item().as_f64(),
        components,
        token_count,
    };
    Ok((total, breakdown))
}

/// Value-only evaluation of the variant's objective.
pub fn loss_f2<T: Scalar>(model: &Model<T>, sample: &PreparedSample, variant: Variant, settings: &LossSettings) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    Ok(f2_on_tape(&mut tape, model, sample, variant, settings, None)?.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointIdentity {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
}

/// Compares sum-reduced retrieval plus FQA losses (each from its own render)
/// with the NLL of knowledge then answer under the single composed render.
pub fn joint_identity_check<T: Scalar>(model: &Model<T>, s: &TokenizedSample) -> Result<JointIdentity> {
    let r = &s.retrieval;
    let f = &s.fqa;
    if f.ids.len() <= r.ids.len() || f.ids[..r.ids.len()] != r.ids[..] || f.knowledge != Some(r.target) {
        return Err(Error::invalid(format!(
            "sample `{}`: retrieval and FQA renders do not compose",
            s.id
        )));
    }
    let lr = loss_retrieval(model, s, &TokenWeightVector::unit(r.target_len()), Reduction::Sum)?;
    let lf = render_loss(model, f, f.target, &TokenWeightVector::unit(f.target_len()), Reduction::Sum)?;
    let lhs = lr + lf;

    let prompt = &f.ids[..r.target.0];
    let k = &f.ids[r.target.0..r.target.1];
    let between = &f.ids[r.target.1..f.target.0];
    let a = f.target_ids();
    // log p(k, a | q) = log p(k | q) + log p(a | q, k); the scaffold between
    // them is conditioned on but not scored.
    let mut ctx = prompt.to_vec();
    let mut rhs = -model.sequence_logprob(&ctx, k)?;
    ctx.extend_from_slice(k);
    ctx.extend_from_slice(between);
    rhs -= model.sequence_logprob(&ctx, a)?;
    Ok(JointIdentity {
        lhs,
        rhs,
        abs_diff: (lhs - rhs).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn weighted_sum_example() {
        let lp1: f64 = -1.0;
        let lp2: f64 = -2.0;
        // The row [0, ln((1 - p) / p)] gives probability p to index 0.
        let row = |lp: f64| {
            let p: f64 = lp.exp();
            vec![0.0, ((1.0 - p) / p).ln()]
        };
        let mut data = row(lp1);
        data.extend(row(lp2));
        data.extend([0.0, 0.0]);
        let logits = Tensor::new(vec![3, 2], data).unwrap();
        let w = TokenWeightVector {
            weights: vec![1.0, 1.1],
            alpha: 1.1,
            source: SpanSource::Ent,
        };
        let v = wce(&logits, &[0, 0, 0], (1, 3), &w, Reduction::Sum).unwrap();
        assert!((v - 3.2).abs() < 1e-12, "{v}");
    }

    #[test]
    fn unit_weights_equal_masked_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::<f64>::randn(&[6, 5], 2.0, &mut rng);
        let ids: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
        let w = TokenWeightVector::unit(3);
        let got = wce(&logits, &ids, (2, 5), &w, Reduction::Mean).unwrap();
        let mut ce = 0.0;
        for i in 2..5 {
            let row = logits.row(i - 1);
            let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
            ce += lse - row[ids[i]];
        }
        assert!((got - ce / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tape_and_value_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
        let ids = vec![1, 2, 3, 4, 5];
        let w = TokenWeightVector {
            weights: vec![1.0, 1.1, 1.1],
            alpha: 1.1,
            source: SpanSource::Ent,
        };
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone(), true).unwrap();
        let v = wce_on_tape(&mut tape, l, &ids, (2, 5), &w, Reduction::Mean).unwrap();
        let direct = wce(&logits, &ids, (2, 5), &w, Reduction::Mean).unwrap();
        assert!((tape.value(v).item() - direct).abs() < 1e-12);
    }

    #[test]
    fn weight_length_mismatch_is_an_error() {
        let logits = Tensor::<f64>::zeros(&[4, 3]);
        assert!(wce(&logits, &[0, 1, 2, 0], (1, 3), &TokenWeightVector::unit(3), Reduction::Mean).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("qa+r".parse::<Variant>().is_err());
    }
}
