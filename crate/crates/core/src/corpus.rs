//! Synthetic sequential-recommendation corpus with a controllable shortcut.
//!
//! Every user has a latent preference over item categories. History items
//! are drawn from that preference, and so is the target, except that with
//! probability `shortcut_strength` the target is swapped for a uniformly
//! drawn *hype* item. Hype items share a small pool of first title tokens,
//! so the swap plants a label-side correlation between the constant task
//! preamble and those tokens that has nothing to do with the user.
//!
//! Sequence layout fed to the model:
//!
//! ```text
//! BOS task.. title_1 SEP title_2 SEP .. title_n SEP target.. EOS
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::ops::Range;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GdrtError, Result};
use crate::io;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
/// The "N/A" placeholder used whenever a span is masked out.
pub const MASK: TokenId = 3;
pub const SEP: TokenId = 4;
pub const NUM_RESERVED: TokenId = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = GdrtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(GdrtError::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

fn default_task_len() -> usize {
    4
}
fn default_hype_pool_size() -> usize {
    2
}
fn default_title_len_min() -> usize {
    2
}
fn default_title_len_max() -> usize {
    4
}
fn default_primary_preference() -> f64 {
    0.7
}
fn default_secondary_preference() -> f64 {
    0.2
}
fn default_shortcut_splits() -> Vec<Split> {
    vec![Split::Train]
}

/// Missing fields take their default values when deserialising.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub num_users: usize,
    pub history_len: usize,
    pub num_items: usize,
    pub num_categories: usize,
    pub vocab_size: usize,
    pub shortcut_strength: f64,
    pub hype_fraction: f64,
    pub train_ratio: f64,
    pub valid_ratio: f64,
    pub test_ratio: f64,
    #[serde(default = "default_task_len")]
    pub task_len: usize,
    #[serde(default = "default_hype_pool_size")]
    pub hype_pool_size: usize,
    #[serde(default = "default_title_len_min")]
    pub title_len_min: usize,
    #[serde(default = "default_title_len_max")]
    pub title_len_max: usize,
    /// Probability mass a user puts on their primary category.
    #[serde(default = "default_primary_preference")]
    pub primary_preference: f64,
    #[serde(default = "default_secondary_preference")]
    pub secondary_preference: f64,
    /// Splits whose targets are subject to hype replacement.
    #[serde(default = "default_shortcut_splits")]
    pub shortcut_splits: Vec<Split>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 42,
            num_users: 2000,
            history_len: 10,
            num_items: 100,
            num_categories: 10,
            vocab_size: 64,
            shortcut_strength: 0.9,
            hype_fraction: 0.2,
            train_ratio: 0.8,
            valid_ratio: 0.1,
            test_ratio: 0.1,
            task_len: default_task_len(),
            hype_pool_size: default_hype_pool_size(),
            title_len_min: default_title_len_min(),
            title_len_max: default_title_len_max(),
            primary_preference: default_primary_preference(),
            secondary_preference: default_secondary_preference(),
            shortcut_splits: default_shortcut_splits(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GdrtError::InvalidConfig(msg));
        if !(0.0..=1.0).contains(&self.shortcut_strength) {
            return bad(format!("shortcut_strength {} not in [0,1]", self.shortcut_strength));
        }
        if !(self.hype_fraction > 0.0 && self.hype_fraction < 1.0) {
            return bad(format!("hype_fraction {} not in (0,1)", self.hype_fraction));
        }
        let ratios = [self.train_ratio, self.valid_ratio, self.test_ratio];
        if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios {ratios:?} must be non-negative and sum to 1"));
        }
        if self.history_len < 1 {
            return bad("history_len must be at least 1".into());
        }
        if self.num_users == 0 {
            return bad("num_users must be positive".into());
        }
        if self.num_categories == 0 {
            return bad("num_categories must be positive".into());
        }
        if self.num_items < self.num_categories {
            return bad(format!(
                "num_items {} < num_categories {}",
                self.num_items, self.num_categories
            ));
        }
        if self.hype_pool_size == 0 || self.task_len == 0 {
            return bad("hype_pool_size and task_len must be positive".into());
        }
        if self.title_len_min < 1 || self.title_len_min > self.title_len_max {
            return bad(format!(
                "title length range [{}, {}] is empty",
                self.title_len_min, self.title_len_max
            ));
        }
        let p = self.primary_preference + self.secondary_preference;
        if self.primary_preference < 0.0 || self.secondary_preference < 0.0 || p > 1.0 + 1e-12 {
            return bad("preference masses must be non-negative and sum to at most 1".into());
        }
        let layout = VocabLayout::from_config(self);
        if self.vocab_size < layout.words.start as usize + 1 {
            return bad(format!(
                "vocab_size {} leaves no room for title words (need > {})",
                self.vocab_size, layout.words.start
            ));
        }
        Ok(())
    }

    pub fn num_hype_items(&self) -> usize {
        ((self.hype_fraction * self.num_items as f64).round() as usize).clamp(1, self.num_items)
    }
}

/// Token id ranges carved out of the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub vocab_size: usize,
    pub task: Range<TokenId>,
    pub hype: Range<TokenId>,
    pub categories: Range<TokenId>,
    pub words: Range<TokenId>,
}

impl VocabLayout {
    pub fn from_config(config: &CorpusConfig) -> Self {
        let task = NUM_RESERVED..NUM_RESERVED + config.task_len as TokenId;
        let hype = task.end..task.end + config.hype_pool_size as TokenId;
        let categories = hype.end..hype.end + config.num_categories as TokenId;
        let words = categories.end..(config.vocab_size as TokenId).max(categories.end);
        VocabLayout {
            vocab_size: config.vocab_size,
            task,
            hype,
            categories,
            words,
        }
    }

    pub fn task_tokens(&self) -> Vec<TokenId> {
        self.task.clone().collect()
    }

    pub fn is_hype_token(&self, id: TokenId) -> bool {
        self.hype.contains(&id)
    }

    pub fn surface(&self, id: TokenId) -> String {
        match id {
            PAD => "<pad>".into(),
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            MASK => "N/A".into(),
            SEP => "<sep>".into(),
            id if self.task.contains(&id) => format!("task{}", id - self.task.start),
            id if self.hype.contains(&id) => format!("hype{}", id - self.hype.start),
            id if self.categories.contains(&id) => format!("cat{}", id - self.categories.start),
            id => format!("w{}", id - self.words.start),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: usize,
    pub title: Vec<TokenId>,
    pub category: usize,
    pub hype: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemCatalog {
    pub layout: VocabLayout,
    pub items: Vec<Item>,
}

impl ItemCatalog {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn title(&self, item_id: usize) -> &[TokenId] {
        &self.items[item_id].title
    }

    /// Title followed by EOS, the form the model is trained to emit.
    pub fn target_tokens(&self, item_id: usize) -> Vec<TokenId> {
        let mut tokens = self.items[item_id].title.clone();
        tokens.push(EOS);
        tokens
    }

    pub fn hype_items(&self) -> Vec<usize> {
        self.items.iter().filter(|i| i.hype).map(|i| i.item_id).collect()
    }

    pub fn items_in_category(&self, category: usize) -> Vec<usize> {
        self.items
            .iter()
            .filter(|i| i.category == category)
            .map(|i| i.item_id)
            .collect()
    }

    pub fn num_categories(&self) -> usize {
        self.items.iter().map(|i| i.category + 1).max().unwrap_or(0)
    }

    pub fn max_title_len(&self) -> usize {
        self.items.iter().map(|i| i.title.len()).max().unwrap_or(0)
    }

    /// Checks the catalog invariants: dense ids, reserved-free unique titles,
    /// hype flags consistent with the hype pool.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (idx, item) in self.items.iter().enumerate() {
            if item.item_id != idx {
                return Err(GdrtError::InvalidConfig(format!(
                    "item ids not dense: position {idx} holds id {}",
                    item.item_id
                )));
            }
            if item
                .title
                .iter()
                .any(|&t| t < NUM_RESERVED || t as usize >= self.layout.vocab_size)
            {
                return Err(GdrtError::InvalidConfig(format!(
                    "item {idx} title uses reserved or out-of-vocab tokens"
                )));
            }
            if item.title.is_empty() {
                return Err(GdrtError::InvalidConfig(format!("item {idx} has an empty title")));
            }
            if item.hype != self.layout.is_hype_token(item.title[0]) {
                return Err(GdrtError::InvalidConfig(format!(
                    "item {idx} hype flag disagrees with its first token"
                )));
            }
            if !seen.insert(item.title.clone()) {
                return Err(GdrtError::DuplicateTitle { item_id: idx });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub instance_id: usize,
    pub task_tokens: Vec<TokenId>,
    pub history_tokens: Vec<TokenId>,
    pub history_items: Vec<usize>,
    pub target_item: usize,
    pub target_tokens: Vec<TokenId>,
    /// True when the target was swapped for a hype item.
    #[serde(default)]
    pub shortcut: bool,
}

impl PromptInstance {
    pub fn prompt_len(&self) -> usize {
        1 + self.task_tokens.len() + self.history_tokens.len()
    }

    pub fn prompt(&self) -> Vec<TokenId> {
        let mut seq = Vec::with_capacity(self.prompt_len());
        seq.push(BOS);
        seq.extend_from_slice(&self.task_tokens);
        seq.extend_from_slice(&self.history_tokens);
        seq
    }

    /// Prompt followed by the gold target (title + EOS).
    pub fn full_sequence(&self) -> Vec<TokenId> {
        let mut seq = self.prompt();
        seq.extend_from_slice(&self.target_tokens);
        seq
    }

    pub fn task_span(&self) -> Range<usize> {
        1..1 + self.task_tokens.len()
    }

    pub fn history_span(&self) -> Range<usize> {
        let start = 1 + self.task_tokens.len();
        start..start + self.history_tokens.len()
    }

    pub fn target_span(&self) -> Range<usize> {
        let start = self.prompt_len();
        start..start + self.target_tokens.len()
    }

    /// `(position, token)` for each target token, where `position` is the
    /// index in `full_sequence()` whose output distribution predicts it.
    pub fn target_predictions(&self) -> Vec<(usize, TokenId)> {
        let start = self.prompt_len();
        self.target_tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| (start + t - 1, tok))
            .collect()
    }
}

/// Replaces the history span by a single MASK token.
pub fn mask_history(instance: &PromptInstance) -> PromptInstance {
    PromptInstance {
        history_tokens: vec![MASK],
        ..instance.clone()
    }
}

/// Next-item instances drawn from histories alone: the first `n - 1`
/// history items form the prompt and the last one is the target. Nothing
/// here depends on how targets were chosen, so the shortcut is absent.
/// Instances with fewer than two history items are skipped.
pub fn continuation_instances(instances: &[PromptInstance], catalog: &ItemCatalog) -> Vec<PromptInstance> {
    instances
        .iter()
        .filter(|i| i.history_items.len() >= 2)
        .map(|i| {
            let (prefix, last) = i.history_items.split_at(i.history_items.len() - 1);
            let mut history_tokens = Vec::new();
            for &item in prefix {
                history_tokens.extend_from_slice(catalog.title(item));
                history_tokens.push(SEP);
            }
            PromptInstance {
                instance_id: i.instance_id,
                task_tokens: i.task_tokens.clone(),
                history_tokens,
                history_items: prefix.to_vec(),
                target_item: last[0],
                target_tokens: catalog.target_tokens(last[0]),
                shortcut: false,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub catalog: ItemCatalog,
    pub train: Vec<PromptInstance>,
    pub valid: Vec<PromptInstance>,
    pub test: Vec<PromptInstance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[PromptInstance] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn all_instances(&self) -> impl Iterator<Item = &PromptInstance> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Longest full sequence in the corpus, for sizing the model context.
    pub fn max_sequence_len(&self) -> usize {
        self.all_instances()
            .map(|i| i.prompt_len().max(1 + i.task_tokens.len() + 1) + i.target_tokens.len())
            .max()
            .unwrap_or(0)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        io::write_json(&dir.join("config.json"), &self.config)?;
        let rows: Vec<CatalogRow> = self.catalog.items.iter().map(CatalogRow::from).collect();
        io::write_jsonl(&dir.join("catalog.jsonl"), &rows)?;
        for split in Split::ALL {
            let rows: Vec<InstanceRow> = self.split(split).iter().map(InstanceRow::from).collect();
            io::write_jsonl(&dir.join(format!("{}.jsonl", split.name())), &rows)?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Corpus> {
        let config: CorpusConfig = io::read_json(&dir.join("config.json"))?;
        let catalog = read_catalog(&dir.join("catalog.jsonl"), &config)?;
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            let rows: Vec<InstanceRow> = io::read_jsonl(&dir.join(format!("{}.jsonl", split.name())))?;
            splits.insert(split, rows.into_iter().map(PromptInstance::from).collect::<Vec<_>>());
        }
        Ok(Corpus {
            config,
            catalog,
            train: splits.remove(&Split::Train).unwrap_or_default(),
            valid: splits.remove(&Split::Valid).unwrap_or_default(),
            test: splits.remove(&Split::Test).unwrap_or_default(),
        })
    }
}

pub fn read_catalog(path: &Path, config: &CorpusConfig) -> Result<ItemCatalog> {
    let rows: Vec<CatalogRow> = io::read_jsonl(path)?;
    let catalog = ItemCatalog {
        layout: VocabLayout::from_config(config),
        items: rows.into_iter().map(Item::from).collect(),
    };
    catalog.validate()?;
    Ok(catalog)
}

/// One line of `catalog.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogRow {
    pub item_id: usize,
    pub title: Vec<TokenId>,
    pub category: usize,
    pub hype: bool,
}

impl From<&Item> for CatalogRow {
    fn from(item: &Item) -> Self {
        CatalogRow {
            item_id: item.item_id,
            title: item.title.clone(),
            category: item.category,
            hype: item.hype,
        }
    }
}

impl From<CatalogRow> for Item {
    fn from(row: CatalogRow) -> Self {
        Item {
            item_id: row.item_id,
            title: row.title,
            category: row.category,
            hype: row.hype,
        }
    }
}

/// One line of `{train,valid,test}.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRow {
    pub instance_id: usize,
    pub task: Vec<TokenId>,
    pub history: Vec<TokenId>,
    pub history_items: Vec<usize>,
    pub target_item: usize,
    pub target: Vec<TokenId>,
    #[serde(default)]
    pub shortcut: bool,
}

impl From<&PromptInstance> for InstanceRow {
    fn from(i: &PromptInstance) -> Self {
        InstanceRow {
            instance_id: i.instance_id,
            task: i.task_tokens.clone(),
            history: i.history_tokens.clone(),
            history_items: i.history_items.clone(),
            target_item: i.target_item,
            target: i.target_tokens.clone(),
            shortcut: i.shortcut,
        }
    }
}

impl From<InstanceRow> for PromptInstance {
    fn from(r: InstanceRow) -> Self {
        PromptInstance {
            instance_id: r.instance_id,
            task_tokens: r.task,
            history_tokens: r.history,
            history_items: r.history_items,
            target_item: r.target_item,
            target_tokens: r.target,
            shortcut: r.shortcut,
        }
    }
}

fn build_catalog(config: &CorpusConfig, rng: &mut ChaCha8Rng) -> Result<ItemCatalog> {
    let layout = VocabLayout::from_config(config);
    let num_words = (layout.words.end - layout.words.start) as usize;

    let mut order: Vec<usize> = (0..config.num_items).collect();
    order.shuffle(rng);
    let hype_set: BTreeSet<usize> = order[..config.num_hype_items()].iter().copied().collect();

    let first_tokens: Vec<TokenId> = {
        let mut hype_rank = 0;
        (0..config.num_items)
            .map(|id| {
                if hype_set.contains(&id) {
                    let tok = layout.hype.start + (hype_rank % config.hype_pool_size) as TokenId;
                    hype_rank += 1;
                    tok
                } else {
                    layout.categories.start + (id % config.num_categories) as TokenId
                }
            })
            .collect()
    };

    // Each first token needs enough distinct suffixes for its items.
    let capacity: f64 = (config.title_len_min - 1..config.title_len_max)
        .map(|l| (num_words as f64).powi(l as i32))
        .sum();
    let mut demand: BTreeMap<TokenId, usize> = BTreeMap::new();
    for &tok in &first_tokens {
        *demand.entry(tok).or_default() += 1;
    }
    if let Some((tok, need)) = demand.iter().find(|(_, &n)| n as f64 > capacity) {
        return Err(GdrtError::InvalidConfig(format!(
            "vocab_size {} too small: first token {tok} needs {need} unique titles, only {capacity} possible",
            config.vocab_size
        )));
    }

    let mut seen: HashSet<Vec<TokenId>> = HashSet::new();
    let mut items = Vec::with_capacity(config.num_items);
    for (id, &first) in first_tokens.iter().enumerate() {
        let mut title = None;
        for _ in 0..10_000 {
            let len = rng.random_range(config.title_len_min..=config.title_len_max);
            let mut candidate = vec![first];
            for _ in 1..len {
                candidate.push(layout.words.start + rng.random_range(0..num_words) as TokenId);
            }
            if seen.insert(candidate.clone()) {
                title = Some(candidate);
                break;
            }
        }
        let title = title.ok_or_else(|| {
            GdrtError::InvalidConfig(format!(
                "vocab_size {} too small to find a unique title for item {id}",
                config.vocab_size
            ))
        })?;
        items.push(Item {
            item_id: id,
            title,
            category: id % config.num_categories,
            hype: hype_set.contains(&id),
        });
    }
    let catalog = ItemCatalog { layout, items };
    catalog.validate()?;
    Ok(catalog)
}

fn category_preference(config: &CorpusConfig, primary: usize, secondary: usize) -> Vec<f64> {
    let c = config.num_categories;
    if c == 1 {
        return vec![1.0];
    }
    let rest_mass = 1.0 - config.primary_preference - config.secondary_preference;
    let others = c.saturating_sub(2);
    let mut pref = vec![0.0; c];
    for (k, p) in pref.iter_mut().enumerate() {
        if k == primary {
            *p = config.primary_preference;
        } else if k == secondary {
            *p = config.secondary_preference;
        } else if others > 0 {
            *p = rest_mass / others as f64;
        }
    }
    if others == 0 {
        pref[primary] += rest_mass;
    }
    pref
}

fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Generates catalog and splits deterministically from `config.seed`.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let catalog = build_catalog(config, &mut rng)?;
    let layout = &catalog.layout;
    let task_tokens = layout.task_tokens();
    let by_category: Vec<Vec<usize>> = (0..config.num_categories)
        .map(|c| catalog.items_in_category(c))
        .collect();
    let hype_items = catalog.hype_items();

    let n_train = (config.train_ratio * config.num_users as f64).round() as usize;
    let n_valid = ((config.valid_ratio * config.num_users as f64).round() as usize)
        .min(config.num_users - n_train.min(config.num_users));
    let mut user_order: Vec<usize> = (0..config.num_users).collect();
    user_order.shuffle(&mut rng);
    let mut split_of = vec![Split::Test; config.num_users];
    for (rank, &u) in user_order.iter().enumerate() {
        split_of[u] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }

    let mut corpus = Corpus {
        config: config.clone(),
        catalog: catalog.clone(),
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };

    for user in 0..config.num_users {
        let primary = rng.random_range(0..config.num_categories);
        let secondary = if config.num_categories > 1 {
            (primary + rng.random_range(1..config.num_categories)) % config.num_categories
        } else {
            primary
        };
        let pref = category_preference(config, primary, secondary);
        let draw_preferred = |rng: &mut ChaCha8Rng| {
            let c = sample_index(&pref, rng);
            *by_category[c].choose(rng).expect("every category holds an item")
        };

        let history_items: Vec<usize> = (0..config.history_len).map(|_| draw_preferred(&mut rng)).collect();
        // All three draws happen regardless of the outcome, so changing the
        // shortcut strength leaves everything else in the corpus unchanged.
        let coin = rng.random::<f64>();
        let preferred = draw_preferred(&mut rng);
        let hype = *hype_items.choose(&mut rng).expect("catalog has hype items");
        let split = split_of[user];
        let shortcut = config.shortcut_splits.contains(&split) && coin < config.shortcut_strength;
        let target_item = if shortcut { hype } else { preferred };

        let mut history_tokens = Vec::new();
        for &item in &history_items {
            history_tokens.extend_from_slice(catalog.title(item));
            history_tokens.push(SEP);
        }
        let instance = PromptInstance {
            instance_id: user,
            task_tokens: task_tokens.clone(),
            history_tokens,
            history_items,
            target_item,
            target_tokens: catalog.target_tokens(target_item),
            shortcut,
        };
        match split {
            Split::Train => corpus.train.push(instance),
            Split::Valid => corpus.valid.push(instance),
            Split::Test => corpus.test.push(instance),
        }
    }
    Ok(corpus)
}

/// Mean within-category hype share: the hype rate of preference-driven draws.
pub fn expected_preference_hype_rate(catalog: &ItemCatalog) -> f64 {
    let c = catalog.num_categories();
    (0..c)
        .map(|k| {
            let items = catalog.items_in_category(k);
            items.iter().filter(|&&i| catalog.items[i].hype).count() as f64 / items.len() as f64
        })
        .sum::<f64>()
        / c as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairClassRate {
    /// Distinct (member, target token) pairs observed at least once.
    pub pairs: usize,
    pub mean_rate: f64,
}

/// Co-occurrence of token pairs with target tokens, one row per pair class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceReport {
    pub task: PairClassRate,
    pub prefix: PairClassRate,
    pub history: PairClassRate,
    /// Prefix pairs whose prefix member is a hype-pool token.
    pub hype_prefix: PairClassRate,
}

/// For a pair `(a, y)` the rate is `#(instances where a co-occurs with target
/// token y) / #(instances whose target contains y)`; each class reports the
/// mean rate over its observed pairs. EOS is not treated as a target token.
pub fn cooccurrence_report(instances: &[PromptInstance], catalog: &ItemCatalog) -> Result<CooccurrenceReport> {
    if instances.is_empty() {
        return Err(GdrtError::EmptyInput("co-occurrence needs instances".into()));
    }
    let mut target_count: BTreeMap<TokenId, usize> = BTreeMap::new();
    let mut task_pairs: BTreeMap<(TokenId, TokenId), usize> = BTreeMap::new();
    let mut prefix_pairs: BTreeMap<(TokenId, TokenId), usize> = BTreeMap::new();
    let mut history_pairs: BTreeMap<(TokenId, TokenId), usize> = BTreeMap::new();

    for inst in instances {
        let targets: Vec<TokenId> = inst.target_tokens.iter().copied().filter(|&t| t != EOS).collect();
        let target_set: BTreeSet<TokenId> = targets.iter().copied().collect();
        let task_set: BTreeSet<TokenId> = inst.task_tokens.iter().copied().collect();
        let history_set: BTreeSet<TokenId> = inst
            .history_tokens
            .iter()
            .copied()
            .filter(|&t| t >= NUM_RESERVED)
            .collect();
        let mut prefix_set: BTreeSet<(TokenId, TokenId)> = BTreeSet::new();
        for (t, &y) in targets.iter().enumerate() {
            for &a in &targets[..t] {
                prefix_set.insert((a, y));
            }
        }
        for &y in &target_set {
            *target_count.entry(y).or_default() += 1;
            for &a in &task_set {
                *task_pairs.entry((a, y)).or_default() += 1;
            }
            for &h in &history_set {
                *history_pairs.entry((h, y)).or_default() += 1;
            }
        }
        for pair in prefix_set {
            *prefix_pairs.entry(pair).or_default() += 1;
        }
    }

    let summarize = |pairs: &BTreeMap<(TokenId, TokenId), usize>, keep: &dyn Fn(TokenId) -> bool| {
        let rates: Vec<f64> = pairs
            .iter()
            .filter(|((a, _), _)| keep(*a))
            .map(|((_, y), &n)| n as f64 / target_count[y] as f64)
            .collect();
        PairClassRate {
            pairs: rates.len(),
            mean_rate: if rates.is_empty() {
                0.0
            } else {
                rates.iter().sum::<f64>() / rates.len() as f64
            },
        }
    };
    let layout = &catalog.layout;
    Ok(CooccurrenceReport {
        task: summarize(&task_pairs, &|_| true),
        prefix: summarize(&prefix_pairs, &|_| true),
        history: summarize(&history_pairs, &|_| true),
        hype_prefix: summarize(&prefix_pairs, &|a| layout.is_hype_token(a)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            num_users: 100,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn instance_count_and_history_length() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let all: Vec<_> = corpus.all_instances().collect();
        assert_eq!(all.len(), 100);
        for inst in all {
            assert_eq!(inst.history_items.len(), 10);
            assert_eq!(inst.history_tokens.iter().filter(|&&t| t == SEP).count(), 10);
        }
    }

    #[test]
    fn continuation_drops_last_history_item() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let cont = continuation_instances(&corpus.train, &corpus.catalog);
        assert_eq!(cont.len(), corpus.train.len());
        for (c, i) in cont.iter().zip(&corpus.train) {
            assert_eq!(c.history_items, i.history_items[..9]);
            assert_eq!(c.target_item, i.history_items[9]);
            assert_eq!(c.target_tokens, corpus.catalog.target_tokens(c.target_item));
            assert!(!c.shortcut);
        }
    }

    #[test]
    fn zero_strength_never_replaces() {
        let config = CorpusConfig {
            shortcut_strength: 0.0,
            shortcut_splits: Split::ALL.to_vec(),
            ..small_config()
        };
        let corpus = generate_corpus(&config).unwrap();
        assert!(corpus.all_instances().all(|i| !i.shortcut));
    }

    #[test]
    fn full_strength_always_hype() {
        let config = CorpusConfig {
            shortcut_strength: 1.0,
            shortcut_splits: Split::ALL.to_vec(),
            ..small_config()
        };
        let corpus = generate_corpus(&config).unwrap();
        assert!(corpus.all_instances().all(|i| corpus.catalog.items[i.target_item].hype));
    }

    #[test]
    fn shortcut_only_touches_configured_splits() {
        let config = CorpusConfig {
            shortcut_strength: 1.0,
            ..small_config()
        };
        let corpus = generate_corpus(&config).unwrap();
        assert!(corpus.train.iter().all(|i| i.shortcut));
        assert!(corpus.valid.iter().chain(&corpus.test).all(|i| !i.shortcut));
    }

    #[test]
    fn rejects_bad_configs() {
        let too_few_items = CorpusConfig {
            num_items: 5,
            num_categories: 10,
            ..small_config()
        };
        assert!(generate_corpus(&too_few_items).is_err());

        let tiny_vocab = CorpusConfig {
            vocab_size: 22,
            title_len_max: 2,
            ..small_config()
        };
        assert!(matches!(generate_corpus(&tiny_vocab), Err(GdrtError::InvalidConfig(_))));

        let bad_split = CorpusConfig {
            train_ratio: 0.5,
            ..small_config()
        };
        assert!(generate_corpus(&bad_split).is_err());

        let bad_rho = CorpusConfig {
            shortcut_strength: 1.5,
            ..small_config()
        };
        assert!(generate_corpus(&bad_rho).is_err());
    }

    #[test]
    fn catalog_invariants_hold() {
        let corpus = generate_corpus(&small_config()).unwrap();
        corpus.catalog.validate().unwrap();
        for item in &corpus.catalog.items {
            assert!((2..=4).contains(&item.title.len()));
        }
        assert_eq!(corpus.catalog.hype_items().len(), 20);
    }

    #[test]
    fn targets_match_catalog_titles() {
        let corpus = generate_corpus(&small_config()).unwrap();
        for inst in corpus.all_instances() {
            assert_eq!(inst.target_tokens, corpus.catalog.target_tokens(inst.target_item));
            assert_eq!(inst.task_tokens, corpus.all_instances().next().unwrap().task_tokens);
        }
    }

    #[test]
    fn mask_history_replaces_only_history() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let inst = &corpus.train[0];
        let masked = mask_history(inst);
        assert_eq!(masked.history_tokens, vec![MASK]);
        assert_eq!(masked.task_tokens, inst.task_tokens);
        assert_eq!(masked.target_tokens, inst.target_tokens);
        assert_eq!(mask_history(&masked), masked);

        let empty = PromptInstance {
            history_tokens: vec![],
            ..inst.clone()
        };
        let masked_empty = mask_history(&empty);
        assert_eq!(
            masked_empty,
            PromptInstance {
                history_tokens: vec![MASK],
                ..empty
            }
        );
    }

    #[test]
    fn task_cooccurrence_is_one() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let report = cooccurrence_report(&corpus.train, &corpus.catalog).unwrap();
        assert_eq!(report.task.mean_rate, 1.0);
        assert!(cooccurrence_report(&[], &corpus.catalog).is_err());
    }

    #[test]
    fn saturated_history_rate_is_one() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let shared_history = corpus.train[0].history_tokens.clone();
        let instances: Vec<_> = corpus
            .train
            .iter()
            .map(|i| PromptInstance {
                history_tokens: shared_history.clone(),
                ..i.clone()
            })
            .collect();
        let report = cooccurrence_report(&instances, &corpus.catalog).unwrap();
        assert!((report.history.mean_rate - 1.0).abs() < 1e-15);
    }

    #[test]
    fn write_read_round_trip() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.write_dir(dir.path()).unwrap();
        assert_eq!(Corpus::read_dir(dir.path()).unwrap(), corpus);
    }
}
