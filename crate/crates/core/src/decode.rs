//! Constrained beam search over a prefix tree of catalog titles.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ItemCatalog, PromptInstance, TokenId, EOS};
use crate::error::{GdrtError, Result};
use crate::io;
use crate::model::{DecodeState, ModelParams};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TrieNode {
    children: BTreeMap<TokenId, usize>,
    item: Option<usize>,
    /// Smallest item id reachable below this node; used for tie-breaks.
    min_item: usize,
}

/// Prefix tree over `title + EOS` for every catalog item. Only nodes reached
/// through EOS are terminal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemTrie {
    nodes: Vec<TrieNode>,
    terminals: usize,
}

impl ItemTrie {
    pub const ROOT: usize = 0;

    pub fn num_terminals(&self) -> usize {
        self.terminals
    }

    pub fn is_empty(&self) -> bool {
        self.terminals == 0
    }

    pub fn children(&self, node: usize) -> impl Iterator<Item = (TokenId, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&t, &n)| (t, n))
    }

    pub fn item_at(&self, node: usize) -> Option<usize> {
        self.nodes[node].item
    }

    /// Item spelled by `tokens` (which must end with EOS), if any.
    pub fn lookup(&self, tokens: &[TokenId]) -> Option<usize> {
        let mut node = Self::ROOT;
        for t in tokens {
            node = *self.nodes[node].children.get(t)?;
        }
        self.nodes[node].item
    }
}

pub fn build_trie(catalog: &ItemCatalog) -> Result<ItemTrie> {
    let mut nodes = vec![TrieNode {
        children: BTreeMap::new(),
        item: None,
        min_item: usize::MAX,
    }];
    let mut seen = HashSet::new();
    for item in &catalog.items {
        if !seen.insert(&item.title) {
            return Err(GdrtError::DuplicateTitle { item_id: item.item_id });
        }
        let mut node = ItemTrie::ROOT;
        nodes[node].min_item = nodes[node].min_item.min(item.item_id);
        for &tok in item.title.iter().chain(std::iter::once(&EOS)) {
            let next = match nodes[node].children.get(&tok) {
                Some(&n) => n,
                None => {
                    nodes.push(TrieNode {
                        children: BTreeMap::new(),
                        item: None,
                        min_item: usize::MAX,
                    });
                    let n = nodes.len() - 1;
                    nodes[node].children.insert(tok, n);
                    n
                }
            };
            node = next;
            nodes[node].min_item = nodes[node].min_item.min(item.item_id);
        }
        nodes[node].item = Some(item.item_id);
    }
    Ok(ItemTrie {
        terminals: catalog.items.len(),
        nodes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub top_k: usize,
    /// Rank finished hypotheses by mean instead of total log-prob.
    #[serde(default)]
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 10,
            top_k: 10,
            length_normalize: false,
        }
    }
}

/// Ranked items with their sequence log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub instance_id: usize,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

struct Hypothesis {
    state: DecodeState,
    node: usize,
    score: f64,
    len: usize,
}

/// Beam search where each step may only follow trie edges. Finished
/// hypotheses leave the beam; the search ends when no open hypothesis is
/// left, then the finished ones are ranked by score with ties going to the
/// smaller item id.
pub fn beam_search(
    params: &ModelParams,
    prompt: &[TokenId],
    trie: &ItemTrie,
    config: &BeamConfig,
) -> Result<Vec<(usize, f64)>> {
    if config.beam_size == 0 {
        return Err(GdrtError::InvalidConfig("beam_size must be at least 1".into()));
    }
    if config.top_k > config.beam_size {
        return Err(GdrtError::InvalidConfig(format!(
            "top_k {} exceeds beam_size {}",
            config.top_k, config.beam_size
        )));
    }
    if trie.is_empty() {
        return Err(GdrtError::EmptyInput("item trie".into()));
    }
    let mut open = vec![Hypothesis {
        state: DecodeState::new(params, prompt)?,
        node: ItemTrie::ROOT,
        score: 0.0,
        len: 0,
    }];
    let mut finished: Vec<(usize, f64, usize)> = Vec::new();
    while !open.is_empty() {
        // (score, min reachable item, parent, token, child node)
        let mut candidates: Vec<(f64, usize, usize, TokenId, usize)> = Vec::new();
        for (h_idx, h) in open.iter().enumerate() {
            let lp = h.state.next_log_probs();
            for (tok, child) in trie.children(h.node) {
                candidates.push((
                    h.score + lp[tok as usize],
                    trie.nodes[child].min_item,
                    h_idx,
                    tok,
                    child,
                ));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        candidates.truncate(config.beam_size);
        let mut next = Vec::with_capacity(candidates.len());
        for (score, _, parent, tok, child) in candidates {
            let len = open[parent].len + 1;
            if let Some(item) = trie.item_at(child) {
                finished.push((item, score, len));
            } else {
                let mut state = open[parent].state.clone();
                state.push(params, tok)?;
                next.push(Hypothesis {
                    state,
                    node: child,
                    score,
                    len,
                });
            }
        }
        open = next;
    }
    let key = |&(_, s, len): &(usize, f64, usize)| if config.length_normalize { s / len as f64 } else { s };
    finished.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.0.cmp(&b.0)));
    finished.truncate(config.top_k);
    Ok(finished.into_iter().map(|(item, s, _)| (item, s)).collect())
}

/// Decodes every instance's full prompt in parallel.
pub fn recommend(
    params: &ModelParams,
    instances: &[PromptInstance],
    trie: &ItemTrie,
    config: &BeamConfig,
) -> Result<Vec<Recommendation>> {
    instances
        .par_iter()
        .map(|inst| {
            let ranked = beam_search(params, &inst.prompt(), trie, config)?;
            Ok(Recommendation {
                instance_id: inst.instance_id,
                items: ranked.iter().map(|r| r.0).collect(),
                scores: ranked.iter().map(|r| r.1).collect(),
            })
        })
        .collect()
}

pub fn write_recommendations(path: &Path, recs: &[Recommendation]) -> Result<()> {
    io::write_jsonl(path, recs)
}

pub fn read_recommendations(path: &Path) -> Result<Vec<Recommendation>> {
    io::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig, Item, VocabLayout};
    use crate::model::{score_tokens, ModelConfig};

    fn catalog_of(titles: &[&[TokenId]]) -> ItemCatalog {
        let layout = VocabLayout::from_config(&CorpusConfig::default());
        ItemCatalog {
            layout,
            items: titles
                .iter()
                .enumerate()
                .map(|(i, t)| Item {
                    item_id: i,
                    title: t.to_vec(),
                    category: 0,
                    hype: false,
                })
                .collect(),
        }
    }

    #[test]
    fn trie_shapes() {
        let one = build_trie(&catalog_of(&[&[9, 10]])).unwrap();
        assert_eq!(one.num_terminals(), 1);
        assert_eq!(one.children(ItemTrie::ROOT).count(), 1);
        assert_eq!(one.lookup(&[9, 10, EOS]), Some(0));
        assert_eq!(one.lookup(&[9, 10]), None);

        let shared = build_trie(&catalog_of(&[&[5, 6], &[5, 7]])).unwrap();
        let roots: Vec<_> = shared.children(ItemTrie::ROOT).collect();
        assert_eq!(roots.len(), 1);
        assert_eq!(roots[0].0, 5);
        assert_eq!(shared.children(roots[0].1).count(), 2);

        // a title that is a prefix of another stays distinguishable via EOS
        let prefix = build_trie(&catalog_of(&[&[5, 6], &[5, 6, 7]])).unwrap();
        assert_eq!(prefix.lookup(&[5, 6, EOS]), Some(0));
        assert_eq!(prefix.lookup(&[5, 6, 7, EOS]), Some(1));

        assert!(matches!(
            build_trie(&catalog_of(&[&[5, 6], &[5, 6]])),
            Err(GdrtError::DuplicateTitle { item_id: 1 })
        ));
    }

    #[test]
    fn uniform_model_ties_break_by_item_id() {
        let mut p = ModelParams::init(&ModelConfig::new(64, 32, 1)).unwrap();
        p.zero_output_head();
        let cat = catalog_of(&[&[30, 31], &[20, 21], &[25, 26], &[30, 33]]);
        let trie = build_trie(&cat).unwrap();
        let cfg = BeamConfig {
            beam_size: 4,
            top_k: 4,
            length_normalize: false,
        };
        let ranked = beam_search(&p, &[1, 5, 6], &trie, &cfg).unwrap();
        assert_eq!(ranked.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_bad_config() {
        let p = ModelParams::init(&ModelConfig::new(64, 32, 1)).unwrap();
        let trie = build_trie(&catalog_of(&[&[30, 31]])).unwrap();
        let bad = |beam_size, top_k| BeamConfig {
            beam_size,
            top_k,
            length_normalize: false,
        };
        assert!(beam_search(&p, &[1], &trie, &bad(0, 0)).is_err());
        assert!(beam_search(&p, &[1], &trie, &bad(2, 3)).is_err());
        let empty = build_trie(&catalog_of(&[])).unwrap();
        assert!(beam_search(&p, &[1], &empty, &bad(2, 1)).is_err());
    }

    #[test]
    fn wide_beam_equals_exhaustive_scoring() {
        let corpus = generate_corpus(&CorpusConfig {
            num_users: 10,
            num_items: 30,
            ..CorpusConfig::default()
        })
        .unwrap();
        let trie = build_trie(&corpus.catalog).unwrap();
        let p = ModelParams::init(&ModelConfig::new(64, 64, 21)).unwrap();
        let prompt = corpus.train[0].prompt();
        let cfg = BeamConfig {
            beam_size: 30,
            top_k: 30,
            length_normalize: false,
        };
        let ranked = beam_search(&p, &prompt, &trie, &cfg).unwrap();
        let mut exhaustive: Vec<(usize, f64)> = corpus
            .catalog
            .items
            .iter()
            .map(|it| {
                let mut seq = prompt.clone();
                let target = corpus.catalog.target_tokens(it.item_id);
                seq.extend_from_slice(&target);
                let preds: Vec<_> = target
                    .iter()
                    .enumerate()
                    .map(|(t, &tok)| (prompt.len() + t - 1, tok))
                    .collect();
                let lps = score_tokens(&p, &seq, &preds).unwrap();
                (it.item_id, lps.iter().sum())
            })
            .collect();
        exhaustive.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        assert_eq!(ranked, exhaustive);
    }

    #[test]
    fn outputs_are_catalog_items_and_sorted() {
        let corpus = generate_corpus(&CorpusConfig {
            num_users: 20,
            ..CorpusConfig::default()
        })
        .unwrap();
        let trie = build_trie(&corpus.catalog).unwrap();
        let p = ModelParams::init(&ModelConfig::new(64, 64, 4)).unwrap();
        let recs = recommend(&p, &corpus.train, &trie, &BeamConfig::default()).unwrap();
        for r in &recs {
            assert_eq!(r.items.len(), 10);
            assert!(r.items.iter().all(|&i| i < corpus.catalog.len()));
            assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
            let distinct: HashSet<_> = r.items.iter().collect();
            assert_eq!(distinct.len(), r.items.len());
        }
        assert_eq!(
            recommend(&p, &corpus.train, &trie, &BeamConfig::default()).unwrap(),
            recs
        );
    }
}
