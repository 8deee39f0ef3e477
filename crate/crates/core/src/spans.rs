//! Hotspot spans in the knowledge text and the loss weights built from them.
//!
//! Two sources of spans exist. Entity spans project annotated entity
//! character ranges onto retrieval-render tokens. Attention spans rank tokens
//! by PageRank over a graph whose edges are the max-pooled attention weights
//! (query position to key position), keeping the top K inside the knowledge
//! region. Indices in span sets are absolute positions in the retrieval ids.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::TokenizedSample;
use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::nn::{Scalar, Tensor};

/// Token indices of annotated entities that fall inside the knowledge region.
pub fn extract_entity_spans(sample: &TokenizedSample) -> Result<BTreeSet<usize>> {
    let r = &sample.retrieval;
    let (ks, ke) = sample.knowledge_region();
    let mut out = BTreeSet::new();
    for e in &sample.entities {
        let starts = r.offsets.iter().skip(1).any(|o| o.0 == e.start);
        let ends = r.offsets.iter().skip(1).any(|o| o.1 == e.end);
        if !starts || !ends {
            return Err(Error::invalid(format!(
                "entity {} span {}..{} in sample `{}` does not align with token boundaries",
                e.etype, e.start, e.end, sample.id
            )));
        }
        for (i, o) in r.offsets.iter().enumerate().skip(1) {
            if o.0 >= e.start && o.1 <= e.end && (ks..ke).contains(&i) {
                out.insert(i);
            }
        }
    }
    Ok(out)
}

/// Elementwise maximum over every layer and head.
pub fn pool_attention<T: Scalar>(trace: &ForwardTrace<T>) -> Result<Tensor<f64>> {
    let first = trace
        .attentions
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::invalid("pool_attention: trace holds no attention maps"))?;
    let shape = first.shape().to_vec();
    let mut pooled = vec![f64::NEG_INFINITY; first.len()];
    for a in trace.attentions.iter().flatten() {
        if a.shape() != shape.as_slice() {
            return Err(Error::shape(
                "pool_attention",
                format!("{:?} vs {:?}", a.shape(), shape),
            ));
        }
        for (p, &v) in pooled.iter_mut().zip(a.data()) {
            *p = p.max(v.as_f64());
        }
    }
    Tensor::new(shape, pooled)
}

/// Weighted digraph over token positions; `weights[i * n + j]` is the edge
/// from query `i` to key `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGraph {
    pub n: usize,
    pub weights: Vec<f64>,
}

impl AttentionGraph {
    pub fn new(n: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != n * n {
            return Err(Error::shape("attention_graph", format!("{} weights for {n} nodes", weights.len())));
        }
        if let Some(i) = weights.iter().position(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid(format!(
                "edge {}->{} has invalid weight {}",
                i / n,
                i % n,
                weights[i]
            )));
        }
        Ok(AttentionGraph { n, weights })
    }

    pub fn from_pooled(pooled: &Tensor<f64>) -> Result<Self> {
        let n = pooled.rows();
        if pooled.cols() != n {
            return Err(Error::shape("attention_graph", format!("pooled matrix {:?} is not square", pooled.shape())));
        }
        AttentionGraph::new(n, pooled.data().to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PageRankConfig {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PageRankConfig {
    fn default() -> Self {
        PageRankConfig {
            damping: 0.85,
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageRank {
    pub scores: Vec<f64>,
    pub iterations: usize,
    /// False when `max_iter` was reached before the L1 change fell below `tol`.
    pub converged: bool,
}

/// Damped power iteration with out-weight normalization. Nodes without
/// outgoing weight spread their mass uniformly.
pub fn pagerank(g: &AttentionGraph, cfg: &PageRankConfig) -> Result<PageRank> {
    let n = g.n;
    if n == 0 {
        return Err(Error::invalid("pagerank on an empty graph"));
    }
    if !(cfg.damping > 0.0 && cfg.damping < 1.0) {
        return Err(Error::invalid(format!("damping {} outside (0, 1)", cfg.damping)));
    }
    let out: Vec<f64> = (0..n).map(|i| g.weights[i * n..(i + 1) * n].iter().sum()).collect();
    let nf = n as f64;
    let mut r = vec![1.0 / nf; n];
    let mut next = vec![0.0; n];
    for it in 1..=cfg.max_iter {
        let dangling: f64 = (0..n).filter(|&i| out[i] == 0.0).map(|i| r[i]).sum();
        let base = (1.0 - cfg.damping) / nf + cfg.damping * dangling / nf;
        next.iter_mut().for_each(|x| *x = base);
        for i in 0..n {
            if out[i] == 0.0 {
                continue;
            }
            let share = cfg.damping * r[i] / out[i];
            for (x, &w) in next.iter_mut().zip(&g.weights[i * n..(i + 1) * n]) {
                *x += share * w;
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        let delta: f64 = r.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut r, &mut next);
        if delta < cfg.tol {
            return Ok(PageRank {
                scores: r,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(PageRank {
        scores: r,
        iterations: cfg.max_iter,
        converged: false,
    })
}

/// Scores closer than this are treated as tied so the lower index wins
/// regardless of rounding noise.
const TIE_EPS: f64 = 1e-12;

/// Top-`k` indices of `region` by score, ties to the lower index.
pub fn top_k_in_region(scores: &[f64], region: (usize, usize), k: usize) -> BTreeSet<usize> {
    let mut idx: Vec<usize> = (region.0..region.1.min(scores.len())).collect();
    idx.sort_by(|&a, &b| {
        if (scores[a] - scores[b]).abs() <= TIE_EPS {
            a.cmp(&b)
        } else {
            scores[b].total_cmp(&scores[a])
        }
    });
    idx.into_iter().take(k).collect()
}

/// Attention spans from an already pooled matrix.
pub fn attention_spans_from_pooled(
    pooled: &Tensor<f64>,
    region: (usize, usize),
    k: usize,
    cfg: &PageRankConfig,
) -> Result<(BTreeSet<usize>, PageRank)> {
    let pr = pagerank(&AttentionGraph::from_pooled(pooled)?, cfg)?;
    Ok((top_k_in_region(&pr.scores, region, k), pr))
}

/// Top-`k` knowledge tokens by PageRank over the pooled attention of a
/// retrieval-render trace.
pub fn extract_attention_spans<T: Scalar>(
    trace: &ForwardTrace<T>,
    sample: &TokenizedSample,
    k: usize,
    cfg: &PageRankConfig,
) -> Result<BTreeSet<usize>> {
    let pooled = pool_attention(trace)?;
    if pooled.rows() != sample.retrieval.ids.len() {
        return Err(Error::shape(
            "extract_attention_spans",
            format!(
                "trace covers {} tokens, retrieval render has {}",
                pooled.rows(),
                sample.retrieval.ids.len()
            ),
        ));
    }
    Ok(attention_spans_from_pooled(&pooled, sample.knowledge_region(), k, cfg)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpanSource {
    #[serde(rename = "unit")]
    Unit,
    #[serde(rename = "ent")]
    Ent,
    #[serde(rename = "attn")]
    Attn,
    #[serde(rename = "ent+attn")]
    EntAttn,
}

/// Per-target-token loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenWeightVector {
    pub weights: Vec<f64>,
    pub alpha: f64,
    pub source: SpanSource,
}

impl TokenWeightVector {
    pub fn unit(len: usize) -> Self {
        TokenWeightVector {
            weights: vec![1.0; len],
            alpha: 1.0,
            source: SpanSource::Unit,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Converts absolute indices to offsets within `region`, dropping any outside it.
pub fn relative(set: &BTreeSet<usize>, region: (usize, usize)) -> BTreeSet<usize> {
    set.iter()
        .filter(|&&i| i >= region.0 && i < region.1)
        .map(|&i| i - region.0)
        .collect()
}

/// `alpha` at every index in the union of `sets`, 1 elsewhere. Indices are
/// relative to the region.
pub fn make_weights(sets: &[&BTreeSet<usize>], alpha: f64, region_len: usize, source: SpanSource) -> Result<TokenWeightVector> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive (got {alpha})")));
    }
    let mut weights = vec![1.0; region_len];
    for set in sets {
        for &i in set.iter() {
            if i >= region_len {
                return Err(Error::IndexOutOfBounds {
                    op: "make_weights",
                    index: i,
                    limit: region_len,
                });
            }
            weights[i] = alpha;
        }
    }
    Ok(TokenWeightVector { weights, alpha, source })
}

/// Per-sample record of how attention spans were chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanDebug {
    pub id: String,
    pub pooled_hash: String,
    pub scores: Vec<f64>,
    pub converged: bool,
    pub span_attn: Vec<usize>,
    pub span_ent: Vec<usize>,
}

pub fn debug_record<T: Scalar>(
    trace: &ForwardTrace<T>,
    sample: &TokenizedSample,
    k: usize,
    cfg: &PageRankConfig,
) -> Result<SpanDebug> {
    let pooled = pool_attention(trace)?;
    let bytes: Vec<u8> = pooled.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let (attn, pr) = attention_spans_from_pooled(&pooled, sample.knowledge_region(), k, cfg)?;
    Ok(SpanDebug {
        id: sample.id.clone(),
        pooled_hash: crate::util::sha256_hex(&bytes),
        scores: pr.scores,
        converged: pr.converged,
        span_attn: attn.into_iter().collect(),
        span_ent: extract_entity_spans(sample)?.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EntitySpan, EntityType, FqaSample, PromptTemplate, Tokenizer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(entities: Vec<EntitySpan>) -> TokenizedSample {
        let s = FqaSample {
            id: "s".into(),
            knowledge: "X was born in Y.".into(),
            question: "Where was X born?".into(),
            answer: "Y.".into(),
            hallucinated_answer: Some("Z.".into()),
            entities,
        };
        let mut texts = PromptTemplate::scaffold_texts();
        texts.push("Where was X born? X was born in Y. Z.".into());
        let tok = Tokenizer::build(texts.iter().map(String::as_str), &[]);
        TokenizedSample::new(&tok, &PromptTemplate::default(), &s).unwrap()
    }

    fn xy() -> Vec<EntitySpan> {
        vec![
            EntitySpan {
                start: 0,
                end: 1,
                etype: EntityType::Person,
            },
            EntitySpan {
                start: 14,
                end: 15,
                etype: EntityType::City,
            },
        ]
    }

    #[test]
    fn no_entities_no_spans() {
        assert!(extract_entity_spans(&sample(vec![])).unwrap().is_empty());
    }

    #[test]
    fn entity_spans_are_the_entity_tokens() {
        let ts = sample(xy());
        // <bos> Q : Where was X born ? Knowledge : | X was born in Y .
        let (ks, _) = ts.knowledge_region();
        assert_eq!(ks, 10);
        let got = extract_entity_spans(&ts).unwrap();
        assert_eq!(got, BTreeSet::from([ks, ks + 4]));
    }

    #[test]
    fn misaligned_entity_is_an_error() {
        let ts = sample(vec![EntitySpan {
            start: 2,
            end: 4,
            etype: EntityType::Person,
        }]);
        let err = extract_entity_spans(&ts).unwrap_err().to_string();
        assert!(err.contains("PERSON"), "{err}");
    }

    fn trace(maps: Vec<Vec<Tensor<f64>>>) -> ForwardTrace<f64> {
        ForwardTrace {
            logits: Tensor::zeros(&[1, 1]),
            attentions: maps,
            module_outputs: vec![],
        }
    }

    #[test]
    fn pooling_singleton_and_zero_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        assert_eq!(pool_attention(&trace(vec![vec![a.clone()]])).unwrap(), a.clone());
        let pos = Tensor::new(vec![3, 3], a.data().iter().map(|v| v.abs()).collect()).unwrap();
        let z = Tensor::zeros(&[3, 3]);
        assert_eq!(pool_attention(&trace(vec![vec![z, pos.clone()]])).unwrap(), pos);
        assert!(pool_attention(&trace(vec![])).is_err());
    }

    #[test]
    fn pooling_matches_nested_loop_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let maps: Vec<Vec<Tensor<f64>>> = (0..3)
            .map(|_| (0..2).map(|_| Tensor::randn(&[4, 4], 1.0, &mut rng)).collect())
            .collect();
        let pooled = pool_attention(&trace(maps.clone())).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut m = f64::MIN;
                for l in &maps {
                    for h in l {
                        if h.at(i, j) > m {
                            m = h.at(i, j);
                        }
                    }
                }
                assert_eq!(pooled.at(i, j), m);
            }
        }
    }

    #[test]
    fn pagerank_symmetric_graphs_are_uniform() {
        for n in [1, 2, 5, 13] {
            let w: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 0.0 } else { 1.0 }).collect();
            let pr = pagerank(&AttentionGraph::new(n, w).unwrap(), &PageRankConfig::default()).unwrap();
            for s in &pr.scores {
                assert!((s - 1.0 / n as f64).abs() < 1e-9);
            }
        }
        let pr = pagerank(&AttentionGraph::new(2, vec![0.0, 2.0, 2.0, 0.0]).unwrap(), &PageRankConfig::default()).unwrap();
        assert!((pr.scores[0] - 0.5).abs() < 1e-12 && (pr.scores[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pagerank_rejects_negative_weights() {
        assert!(AttentionGraph::new(2, vec![0.0, -1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn pagerank_flags_non_convergence() {
        let w = vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let cfg = PageRankConfig {
            max_iter: 2,
            tol: 0.0,
            ..Default::default()
        };
        let pr = pagerank(&AttentionGraph::new(3, w).unwrap(), &cfg).unwrap();
        assert!(!pr.converged);
        assert_eq!(pr.iterations, 2);
    }

    #[test]
    fn pagerank_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let cfg = PageRankConfig::default();
        let a = pagerank(&AttentionGraph::new(8, w.clone()).unwrap(), &cfg).unwrap();
        let b = pagerank(&AttentionGraph::new(8, w.iter().map(|x| x * 37.5).collect()).unwrap(), &cfg).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((a.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_attention_picks_lowest_indices() {
        let n = 10;
        let pooled = Tensor::full(&[n, n], 0.1);
        let (got, _) = attention_spans_from_pooled(&pooled, (4, 10), 3, &PageRankConfig::default()).unwrap();
        assert_eq!(got, BTreeSet::from([4, 5, 6]));
        let (all, _) = attention_spans_from_pooled(&pooled, (4, 10), 30, &PageRankConfig::default()).unwrap();
        assert_eq!(all, (4..10).collect());
    }

    #[test]
    fn weights_examples() {
        let empty = BTreeSet::new();
        assert_eq!(make_weights(&[&empty], 1.1, 3, SpanSource::Ent).unwrap().weights, vec![1.0; 3]);
        let s = BTreeSet::from([1, 3]);
        assert_eq!(
            make_weights(&[&s], 1.1, 5, SpanSource::Ent).unwrap().weights,
            vec![1.0, 1.1, 1.0, 1.1, 1.0]
        );
        let a = BTreeSet::from([1, 2]);
        let b = BTreeSet::from([2, 3]);
        assert_eq!(
            make_weights(&[&a, &b], 2.0, 5, SpanSource::EntAttn).unwrap().weights,
            vec![1.0, 2.0, 2.0, 2.0, 1.0]
        );
        assert!(make_weights(&[&s], 1.1, 3, SpanSource::Ent).is_err());
    }

    #[test]
    fn full_region_coverage_gives_alpha_everywhere() {
        let region: BTreeSet<usize> = (0..6).collect();
        let w = make_weights(&[&region, &BTreeSet::from([0])], 1.1, 6, SpanSource::EntAttn).unwrap();
        assert!(w.weights.iter().all(|&x| x == 1.1));
    }
}
