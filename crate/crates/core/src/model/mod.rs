//! Tiny causal transformer over token ids with hand-written reverse mode.
//!
//! One or two pre-norm blocks (multi-head causal self-attention, then a
//! GELU feed-forward), learned position embeddings, a final layer norm and
//! a linear output head. Everything is `f64`.

mod checkpoint;
mod optim;
mod transformer;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{PromptInstance, TokenId};
use crate::error::{GdrtError, Result};

pub use checkpoint::{Checkpoint, NamedSlice, RngState};
pub use optim::{clip_global_norm, AdamConfig, AdamState};
pub use transformer::{
    backward, backward_trace, forward, forward_trace, score_tokens, DecodeState, ForwardTrace, LogProbMatrix,
    LossGraph, LossTerm,
};

fn default_ff_mult() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub context_len: usize,
    pub seed: u64,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, context_len: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 32,
            num_layers: 1,
            num_heads: 2,
            context_len,
            seed,
            ff_mult: default_ff_mult(),
        }
    }

    pub fn ff_dim(&self) -> usize {
        self.embed_dim * self.ff_mult
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GdrtError::InvalidConfig(m));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.context_len == 0 {
            return bad("vocab_size, embed_dim and context_len must be positive".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 || self.ff_mult == 0 {
            return bad("num_layers and ff_mult must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct BlockLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Offsets of every named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ParamLayout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub total: usize,
    pub named: Vec<(String, Range<usize>, Vec<usize>)>,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let (v, d, f, l) = (config.vocab_size, config.embed_dim, config.ff_dim(), config.context_len);
        let mut named = Vec::new();
        let mut cursor = 0;
        let mut take = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            let range = cursor..cursor + len;
            cursor += len;
            named.push((name, range.clone(), shape));
            range
        };
        let tok_emb = take("tok_emb".into(), vec![v, d]);
        let pos_emb = take("pos_emb".into(), vec![l, d]);
        let blocks = (0..config.num_layers)
            .map(|i| BlockLayout {
                ln1_g: take(format!("block{i}.ln1.gain"), vec![d]),
                ln1_b: take(format!("block{i}.ln1.bias"), vec![d]),
                wq: take(format!("block{i}.attn.wq"), vec![d, d]),
                wk: take(format!("block{i}.attn.wk"), vec![d, d]),
                wv: take(format!("block{i}.attn.wv"), vec![d, d]),
                wo: take(format!("block{i}.attn.wo"), vec![d, d]),
                ln2_g: take(format!("block{i}.ln2.gain"), vec![d]),
                ln2_b: take(format!("block{i}.ln2.bias"), vec![d]),
                w1: take(format!("block{i}.ff.w1"), vec![d, f]),
                b1: take(format!("block{i}.ff.b1"), vec![f]),
                w2: take(format!("block{i}.ff.w2"), vec![f, d]),
                b2: take(format!("block{i}.ff.b2"), vec![d]),
            })
            .collect();
        let lnf_g = take("ln_f.gain".into(), vec![d]);
        let lnf_b = take("ln_f.bias".into(), vec![d]);
        let head_w = take("head.w".into(), vec![d, v]);
        let head_b = take("head.b".into(), vec![v]);
        ParamLayout {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            total: cursor,
            named,
        }
    }
}

/// Flat parameter vector plus the config that fixes its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub data: Vec<f64>,
    pub(crate) layout: ParamLayout,
}

impl ModelParams {
    /// Seeded random initialisation: embeddings N(0, 0.1²), projections
    /// scaled by fan-in, layer-norm gains 1, output head N(0, 0.02²).
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim as f64;
        let f = config.ff_dim() as f64;
        let mut fill = |range: &Range<usize>, std: f64, rng: &mut ChaCha8Rng| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in &mut data[range.clone()] {
                *x = normal.sample(rng);
            }
        };
        fill(&layout.tok_emb, 0.1, &mut rng);
        fill(&layout.pos_emb, 0.1, &mut rng);
        let depth_scale = (2.0 * config.num_layers as f64).sqrt();
        for block in &layout.blocks {
            fill(&block.wq, 1.0 / d.sqrt(), &mut rng);
            fill(&block.wk, 1.0 / d.sqrt(), &mut rng);
            fill(&block.wv, 1.0 / d.sqrt(), &mut rng);
            fill(&block.wo, 1.0 / (d.sqrt() * depth_scale), &mut rng);
            fill(&block.w1, 1.0 / d.sqrt(), &mut rng);
            fill(&block.w2, 1.0 / (f.sqrt() * depth_scale), &mut rng);
        }
        fill(&layout.head_w, 0.02, &mut rng);
        let mut params = ModelParams {
            config: config.clone(),
            data,
            layout,
        };
        params.reset_norms();
        Ok(params)
    }

    pub fn from_data(config: &ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        if data.len() != layout.total {
            return Err(GdrtError::ShapeMismatch(format!(
                "parameter vector has {} entries, config needs {}",
                data.len(),
                layout.total
            )));
        }
        Ok(ModelParams {
            config: config.clone(),
            data,
            layout,
        })
    }

    fn reset_norms(&mut self) {
        let mut gains = vec![self.layout.lnf_g.clone()];
        let mut biases = vec![self.layout.lnf_b.clone()];
        for b in &self.layout.blocks {
            gains.extend([b.ln1_g.clone(), b.ln2_g.clone()]);
            biases.extend([b.ln1_b.clone(), b.ln2_b.clone()]);
        }
        for r in gains {
            self.data[r].fill(1.0);
        }
        for r in biases {
            self.data[r].fill(0.0);
        }
    }

    /// Zeroes the output head; the model then predicts a uniform distribution.
    pub fn zero_output_head(&mut self) {
        self.data[self.layout.head_w.clone()].fill(0.0);
        self.data[self.layout.head_b.clone()].fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(name, shape, range)` for every tensor, in storage order.
    pub fn named_slices(&self) -> impl Iterator<Item = (&str, &[usize], Range<usize>)> {
        self.layout
            .named
            .iter()
            .map(|(n, r, s)| (n.as_str(), s.as_slice(), r.clone()))
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .named
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, r, _)| &self.data[r.clone()])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_sequence(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.config.context_len {
            return Err(GdrtError::SequenceTooLong {
                len: tokens.len(),
                context_len: self.config.context_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(GdrtError::OutOfVocab {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }
}

/// Negative log-probability of one gold target token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenNll {
    /// 1-based index inside the target span.
    pub t: usize,
    /// Index into the full sequence whose output predicts the token.
    pub position: usize,
    pub token: TokenId,
    pub nll: f64,
}

/// Teacher-forced NLL of every target token (title tokens and EOS); prompt
/// positions are never scored.
pub fn nll_per_token(params: &ModelParams, instance: &PromptInstance) -> Result<Vec<TokenNll>> {
    let seq = instance.full_sequence();
    let preds = instance.target_predictions();
    let lps = score_tokens(params, &seq, &preds)?;
    Ok(preds
        .iter()
        .zip(lps)
        .enumerate()
        .map(|(k, (&(position, token), lp))| TokenNll {
            t: k + 1,
            position,
            token,
            nll: -lp,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_covers_vector() {
        let config = ModelConfig::new(64, 48, 1);
        let params = ModelParams::init(&config).unwrap();
        let covered: usize = params.named_slices().map(|(_, _, r)| r.len()).sum();
        assert_eq!(covered, params.len());
        let mut end = 0;
        for (_, shape, r) in params.named_slices() {
            assert_eq!(r.start, end);
            assert_eq!(r.len(), shape.iter().product::<usize>());
            end = r.end;
        }
    }

    #[test]
    fn init_is_seeded() {
        let config = ModelConfig::new(64, 48, 7);
        assert_eq!(ModelParams::init(&config).unwrap(), ModelParams::init(&config).unwrap());
        let other = ModelConfig { seed: 8, ..config };
        assert_ne!(
            ModelParams::init(&other).unwrap().data,
            ModelParams::init(&ModelConfig::new(64, 48, 7)).unwrap().data
        );
    }

    #[test]
    fn rejects_indivisible_heads() {
        let config = ModelConfig {
            num_heads: 3,
            ..ModelConfig::new(64, 16, 0)
        };
        assert!(ModelParams::init(&config).is_err());
    }
}
