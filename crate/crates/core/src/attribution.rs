//! Feature-ablation attribution: how much the target log-probability drops
//! when a span of the input is replaced by MASK tokens of the same length.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{PromptInstance, TokenId, MASK};
use crate::error::{GdrtError, Result};
use crate::model::{score_tokens, ModelParams};
use crate::stats;

/// Anything that assigns log-probabilities to chosen next tokens of a
/// sequence.
pub trait SequenceScorer: Sync {
    fn log_probs(&self, tokens: &[TokenId], predictions: &[(usize, TokenId)]) -> Result<Vec<f64>>;
}

impl SequenceScorer for ModelParams {
    fn log_probs(&self, tokens: &[TokenId], predictions: &[(usize, TokenId)]) -> Result<Vec<f64>> {
        score_tokens(self, tokens, predictions)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Task,
    History,
    /// The first generated target token, judged by its effect on the second.
    Prefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub instance_id: usize,
    pub span: SpanKind,
    /// `None` when the instance has no such span to ablate.
    pub attribution: Option<f64>,
}

/// Mean log-prob of `predictions` with and without `span` masked.
pub fn ablate_range<S: SequenceScorer + ?Sized>(
    scorer: &S,
    tokens: &[TokenId],
    span: Range<usize>,
    predictions: &[(usize, TokenId)],
) -> Result<f64> {
    if span.end > tokens.len() {
        return Err(GdrtError::InvalidConfig(format!(
            "span {span:?} outside sequence of length {}",
            tokens.len()
        )));
    }
    if span.is_empty() {
        return Ok(0.0);
    }
    let base = stats::mean(&scorer.log_probs(tokens, predictions)?);
    let mut masked = tokens.to_vec();
    masked[span].fill(MASK);
    let ablated = stats::mean(&scorer.log_probs(&masked, predictions)?);
    Ok(base - ablated)
}

pub fn ablate_span<S: SequenceScorer + ?Sized>(
    scorer: &S,
    instance: &PromptInstance,
    kind: SpanKind,
) -> Result<AttributionResult> {
    let seq = instance.full_sequence();
    let preds = instance.target_predictions();
    let attribution = match kind {
        SpanKind::Task => Some(ablate_range(scorer, &seq, instance.task_span(), &preds)?),
        SpanKind::History => Some(ablate_range(scorer, &seq, instance.history_span(), &preds)?),
        SpanKind::Prefix => {
            if preds.len() < 2 {
                None
            } else {
                let start = instance.target_span().start;
                Some(ablate_range(scorer, &seq, start..start + 1, &preds[1..2])?)
            }
        }
    };
    Ok(AttributionResult {
        instance_id: instance.instance_id,
        span: kind,
        attribution,
    })
}

mod ratio_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_infinite() && *x > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Num(*x).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad ratio `{t}`"))),
        }
    }
}

/// Dataset-level means of absolute attributions and their ratios to the
/// history span. A zero history mean gives an infinite ratio, written as
/// `"inf"` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub instances: usize,
    pub mean_abs_task: f64,
    pub mean_abs_history: f64,
    pub mean_abs_prefix: f64,
    #[serde(with = "ratio_serde")]
    pub task_history_ratio: f64,
    #[serde(with = "ratio_serde")]
    pub prefix_history_ratio: f64,
    /// Instances whose history attribution is exactly zero.
    pub zero_history: usize,
    /// Instances with no prefix span.
    pub prefix_skipped: usize,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

pub fn attribution_results<S: SequenceScorer + ?Sized>(
    scorer: &S,
    instances: &[PromptInstance],
) -> Result<Vec<[AttributionResult; 3]>> {
    instances
        .par_iter()
        .map(|inst| {
            Ok([
                ablate_span(scorer, inst, SpanKind::Task)?,
                ablate_span(scorer, inst, SpanKind::History)?,
                ablate_span(scorer, inst, SpanKind::Prefix)?,
            ])
        })
        .collect()
}

pub fn attribution_ratios<S: SequenceScorer + ?Sized>(
    scorer: &S,
    instances: &[PromptInstance],
) -> Result<AttributionSummary> {
    if instances.is_empty() {
        return Err(GdrtError::EmptyInput("attribution instances".into()));
    }
    let results = attribution_results(scorer, instances)?;
    let abs_of = |k: usize| -> Vec<f64> { results.iter().filter_map(|r| r[k].attribution).map(f64::abs).collect() };
    let (task, history, prefix) = (abs_of(0), abs_of(1), abs_of(2));
    let mean_or_zero = |xs: &[f64]| if xs.is_empty() { 0.0 } else { stats::mean(xs) };
    let (mt, mh, mp) = (mean_or_zero(&task), mean_or_zero(&history), mean_or_zero(&prefix));
    Ok(AttributionSummary {
        instances: instances.len(),
        mean_abs_task: mt,
        mean_abs_history: mh,
        mean_abs_prefix: mp,
        task_history_ratio: ratio(mt, mh),
        prefix_history_ratio: ratio(mp, mh),
        zero_history: history.iter().filter(|&&h| h == 0.0).count(),
        prefix_skipped: instances.len() - prefix.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, Corpus, CorpusConfig};
    use crate::model::ModelConfig;

    /// Unnormalised bag-of-tokens score: the output at position `p` for
    /// token `y` is the sum of `w[x_j][y]` over `j <= p`.
    struct BagOfTokens {
        vocab: usize,
        w: Vec<f64>,
    }

    impl BagOfTokens {
        fn weight(&self, x: TokenId, y: TokenId) -> f64 {
            self.w[x as usize * self.vocab + y as usize]
        }
    }

    impl SequenceScorer for BagOfTokens {
        fn log_probs(&self, tokens: &[TokenId], predictions: &[(usize, TokenId)]) -> Result<Vec<f64>> {
            Ok(predictions
                .iter()
                .map(|&(p, y)| tokens[..=p].iter().map(|&x| self.weight(x, y)).sum())
                .collect())
        }
    }

    fn corpus() -> Corpus {
        generate_corpus(&CorpusConfig {
            num_users: 30,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn uniform_model_attributions_vanish() {
        let c = corpus();
        let mut p = ModelParams::init(&ModelConfig::new(64, 64, 3)).unwrap();
        p.zero_output_head();
        let s = attribution_ratios(&p, &c.train).unwrap();
        assert_eq!(s.mean_abs_task, 0.0);
        assert_eq!(s.mean_abs_history, 0.0);
        assert!(s.task_history_ratio.is_infinite());
        assert_eq!(s.zero_history, c.train.len());
        let json = serde_json::to_string(&s).unwrap();
        let back: AttributionSummary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn empty_span_and_causal_masking() {
        let c = corpus();
        let p = ModelParams::init(&ModelConfig::new(64, 64, 8)).unwrap();
        let inst = &c.train[0];
        let seq = inst.full_sequence();
        let preds = inst.target_predictions();
        assert_eq!(ablate_range(&p, &seq, 3..3, &preds).unwrap(), 0.0);
        // the last token is never visible to any prediction
        let n = seq.len();
        assert_eq!(ablate_range(&p, &seq, n - 1..n, &preds).unwrap(), 0.0);
        let mut no_hist = inst.clone();
        no_hist.history_tokens.clear();
        assert_eq!(
            ablate_span(&p, &no_hist, SpanKind::History).unwrap().attribution,
            Some(0.0)
        );
    }

    #[test]
    fn deterministic_and_sign_free() {
        let c = corpus();
        let p = ModelParams::init(&ModelConfig::new(64, 64, 8)).unwrap();
        let a = attribution_ratios(&p, &c.train).unwrap();
        assert_eq!(attribution_ratios(&p, &c.train).unwrap(), a);
        assert!(a.task_history_ratio.is_finite() && a.task_history_ratio >= 0.0);
    }

    #[test]
    fn linear_surrogate_is_additive() {
        let c = corpus();
        let vocab = 64;
        let w: Vec<f64> = (0..vocab * vocab)
            .map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5)
            .collect();
        let bag = BagOfTokens { vocab, w };
        for inst in &c.train[..10] {
            let seq = inst.full_sequence();
            let preds = inst.target_predictions();
            for (kind, span) in [
                (SpanKind::Task, inst.task_span()),
                (SpanKind::History, inst.history_span()),
            ] {
                let got = ablate_span(&bag, inst, kind).unwrap().attribution.unwrap();
                let closed: f64 = preds
                    .iter()
                    .map(|&(p, y)| {
                        span.clone()
                            .filter(|&j| j <= p)
                            .map(|j| bag.weight(seq[j], y) - bag.weight(MASK, y))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / preds.len() as f64;
                assert!((got - closed).abs() < 1e-9);
            }
            let start = inst.target_span().start;
            let (p2, y2) = preds[1];
            let closed = bag.weight(seq[start], y2) - bag.weight(MASK, y2);
            assert!(p2 >= start);
            let got = ablate_span(&bag, inst, SpanKind::Prefix).unwrap().attribution.unwrap();
            assert!((got - closed).abs() < 1e-9);
        }
    }
}
