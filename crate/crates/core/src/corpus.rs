//! Data ingestion: item catalogs, relationship pairs, vocabulary, pretrained
//! embeddings, negative sampling and dataset splitting.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token ↔ id mapping. Ids are dense; `0` is PAD and `1` is UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self {
            token_to_id: HashMap::new(),
            id_to_token: vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()],
        }
    }

    /// Rebuilds a vocabulary from its id-ordered token list, as stored in
    /// checkpoints. The first two entries must be the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Data(
                "vocabulary must start with <pad>, <unk>".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate().skip(2) {
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token: tokens,
        })
    }

    /// Number of ids including the two specials.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Returns the id of `token`, adding it if absent.
    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(id) = self.get(token) {
            return id;
        }
        let id = self.id_to_token.len() as u32;
        self.id_to_token.push(token.to_owned());
        self.token_to_id.insert(token.to_owned(), id);
        id
    }

    /// Encodes tokens against a frozen vocabulary; unseen tokens become UNK.
    pub fn encode<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vec<u32> {
        tokens
            .into_iter()
            .map(|t| self.get(t).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabMode {
    /// Grow the vocabulary with every token seen.
    Build,
    /// Keep the vocabulary fixed; unseen tokens map to UNK.
    Frozen,
}

/// Items in file order, each with a non-empty token-id title.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemCatalog {
    ids: Vec<String>,
    titles: Vec<Vec<u32>>,
    index: HashMap<String, usize>,
}

impl ItemCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: String, title: Vec<u32>) -> Result<usize> {
        if title.is_empty() {
            return Err(Error::Data(format!("item {id:?} has an empty title")));
        }
        if self.index.contains_key(&id) {
            return Err(Error::Data(format!("duplicate item id {id:?}")));
        }
        let idx = self.ids.len();
        self.index.insert(id.clone(), idx);
        self.ids.push(id);
        self.titles.push(title);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub fn title(&self, idx: usize) -> &[u32] {
        &self.titles[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u32])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.titles.iter().map(Vec::as_slice))
    }
}

/// A labelled ordered pair `(query → candidate)` of catalog positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairExample {
    pub query: usize,
    pub cand: usize,
    pub label: u8,
}

impl PairExample {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<PairExample>,
    pub validation: Vec<PairExample>,
    pub test: Vec<PairExample>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        message: message.into(),
    }
}

/// Loads `item_id<TAB>token token ...` lines.
///
/// In [`VocabMode::Build`] the vocabulary starts from `existing` (or empty)
/// and grows; in [`VocabMode::Frozen`] `existing` is required and unseen
/// tokens encode as UNK.
pub fn load_items(
    path: &Path,
    mode: VocabMode,
    existing: Option<Vocabulary>,
) -> Result<(ItemCatalog, Vocabulary)> {
    let text = read_text(path)?;
    parse_items(&text, path, mode, existing)
}

pub(crate) fn parse_items(
    text: &str,
    path: &Path,
    mode: VocabMode,
    existing: Option<Vocabulary>,
) -> Result<(ItemCatalog, Vocabulary)> {
    let mut vocab = match (mode, existing) {
        (_, Some(v)) => v,
        (VocabMode::Build, None) => Vocabulary::new(),
        (VocabMode::Frozen, None) => {
            return Err(Error::Config(
                "frozen vocabulary mode needs an existing vocabulary".into(),
            ))
        }
    };
    let mut catalog = ItemCatalog::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        let (id, title) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, lineno, "expected item_id<TAB>title"))?;
        if id.is_empty() {
            return Err(parse_err(path, lineno, "empty item id"));
        }
        let tokens: Vec<&str> = title.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(parse_err(
                path,
                lineno,
                format!("item {id:?} has an empty title"),
            ));
        }
        let ids = match mode {
            VocabMode::Build => tokens.iter().map(|t| vocab.insert(t)).collect(),
            VocabMode::Frozen => vocab.encode(tokens),
        };
        if catalog.position(id).is_some() {
            return Err(parse_err(path, lineno, format!("duplicate item id {id:?}")));
        }
        catalog.push(id.to_owned(), ids)?;
    }
    Ok((catalog, vocab))
}

/// Loads `query_id<TAB>cand_id<TAB>0|1` lines against a catalog.
pub fn load_pairs(path: &Path, catalog: &ItemCatalog) -> Result<Vec<PairExample>> {
    let text = read_text(path)?;
    parse_pairs(&text, path, catalog)
}

pub(crate) fn parse_pairs(
    text: &str,
    path: &Path,
    catalog: &ItemCatalog,
) -> Result<Vec<PairExample>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        let fields: Vec<&str> = line.split('\t').collect();
        let [q, c, label] = fields[..] else {
            return Err(parse_err(
                path,
                lineno,
                "expected query_id<TAB>cand_id<TAB>label",
            ));
        };
        let resolve = |id: &str| {
            catalog
                .position(id)
                .ok_or_else(|| parse_err(path, lineno, format!("unknown item id {id:?}")))
        };
        let query = resolve(q)?;
        let cand = resolve(c)?;
        let label = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("label must be 0 or 1, got {other:?}"),
                ))
            }
        };
        out.push(PairExample { query, cand, label });
    }
    Ok(out)
}

/// Draws one label-0 ordered pair per positive, uniformly from
/// `catalog × catalog` minus self-pairs, positives, and already drawn pairs.
pub fn sample_negatives(
    positives: &[PairExample],
    catalog: &ItemCatalog,
    seed: u64,
) -> Result<Vec<PairExample>> {
    if positives.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(p) = positives.iter().find(|p| p.label != 1) {
        return Err(Error::Data(format!(
            "negative sampling expects positives only, found label {} for ({}, {})",
            p.label,
            catalog.id(p.query),
            catalog.id(p.cand)
        )));
    }
    let n = catalog.len();
    let taken: HashSet<(usize, usize)> = positives.iter().map(|p| (p.query, p.cand)).collect();
    let available =
        (n * n.saturating_sub(1)).saturating_sub(taken.iter().filter(|(q, c)| q != c).count());
    if available < positives.len() {
        return Err(Error::Data(format!(
            "catalog of {n} items admits only {available} non-positive pairs, {} needed",
            positives.len()
        )));
    }

    let mut rng = rng::stream(seed, &[rng::tags::NEGATIVES]);
    let mut drawn = HashSet::with_capacity(positives.len());
    let mut out = Vec::with_capacity(positives.len());
    let max_attempts = 100 * positives.len();
    let mut attempts = 0;
    while out.len() < positives.len() {
        if attempts >= max_attempts {
            return Err(Error::Data(format!(
                "negative sampling gave up after {attempts} draws with {} of {} negatives",
                out.len(),
                positives.len()
            )));
        }
        attempts += 1;
        let q = rng.gen_range(0..n);
        let c = rng.gen_range(0..n);
        if q == c || taken.contains(&(q, c)) || !drawn.insert((q, c)) {
            continue;
        }
        out.push(PairExample {
            query: q,
            cand: c,
            label: 0,
        });
    }
    Ok(out)
}

/// Shuffles by seed, then cuts validation and test with floor rounding; the
/// remainder goes to train.
pub fn split_dataset(
    examples: &[PairExample],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || ((tr + va + te) - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios must be in [0,1] and sum to 1, got {ratios:?}"
        )));
    }
    if examples.len() < 3 {
        return Err(Error::Data(format!(
            "need at least 3 examples to split, got {}",
            examples.len()
        )));
    }
    let mut shuffled = examples.to_vec();
    let mut rng = rng::stream(seed, &[rng::tags::SPLIT]);
    shuffled.shuffle(&mut rng);

    let total = shuffled.len() as f64;
    // small epsilon so e.g. 0.1 * 1000 floors to 100, not 99
    let n_val = (va * total + 1e-9).floor() as usize;
    let n_test = (te * total + 1e-9).floor() as usize;
    let n_train = shuffled.len() - n_val - n_test;

    let test = shuffled.split_off(n_train + n_val);
    let validation = shuffled.split_off(n_train);
    Ok(DatasetSplit {
        train: shuffled,
        validation,
        test,
    })
}

/// Vectors read from a word-embedding text file, restricted to the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedTable {
    pub dim: usize,
    pub vectors: Vec<(u32, Vec<f32>)>,
    /// Fraction of non-special vocabulary tokens found in the file.
    pub coverage: f64,
}

/// Reads `count dim` followed by `token v1 ... vd` lines.
pub fn load_pretrained_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
) -> Result<PretrainedTable> {
    let text = read_text(path)?;
    parse_pretrained(&text, path, vocab, dim)
}

pub(crate) fn parse_pretrained(
    text: &str,
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
) -> Result<PretrainedTable> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing `count dim` header"))?;
    let header: Vec<&str> = header.split_whitespace().collect();
    let file_dim: usize = match header[..] {
        [count, d] => {
            count
                .parse::<usize>()
                .map_err(|_| parse_err(path, 1, format!("bad count {count:?}")))?;
            d.parse()
                .map_err(|_| parse_err(path, 1, format!("bad dimension {d:?}")))?
        }
        _ => return Err(parse_err(path, 1, "expected `count dim` header")),
    };
    if file_dim != dim {
        return Err(Error::Config(format!(
            "{}: embedding dimension {file_dim} does not match configured {dim}",
            path.display()
        )));
    }

    let mut seen = HashSet::new();
    let mut vectors = Vec::new();
    for (n, line) in lines {
        let lineno = n + 1;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|v| {
                v.parse::<f32>()
                    .map_err(|_| parse_err(path, lineno, format!("non-numeric value {v:?}")))
            })
            .collect::<Result<Vec<f32>>>()?;
        if values.len() != dim {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        if let Some(id) = vocab.get(token) {
            if seen.insert(id) {
                vectors.push((id, values));
            }
        }
    }
    let regular = vocab.len() - 2;
    let coverage = if regular == 0 {
        0.0
    } else {
        vectors.len() as f64 / regular as f64
    };
    Ok(PretrainedTable {
        dim,
        vectors,
        coverage,
    })
}
