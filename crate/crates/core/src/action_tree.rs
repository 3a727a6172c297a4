//! Instruction compiler: lexicon extraction, verb/preposition tries,
//! fixed-width slot embeddings and the clause decomposition baseline.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wm_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WordKind {
    Verb,
    Prep,
}

/// Lowercases and strips leading/trailing punctuation from whitespace-split words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(normalize_word)
        .filter(|t| !t.is_empty())
        .collect()
}

fn normalize_word(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

fn check_token(token: &str) -> Result<()> {
    if token.is_empty() || token.chars().any(char::is_whitespace) || token.to_lowercase() != token {
        return Err(Error::BadToken(token.to_string()));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub verbs: Vec<String>,
    pub prepositions: Vec<String>,
}

impl Lexicon {
    pub fn new(verbs: Vec<String>, prepositions: Vec<String>) -> Result<Self> {
        for t in verbs.iter().chain(&prepositions) {
            check_token(t)?;
        }
        let verb_set: HashSet<&str> = verbs.iter().map(String::as_str).collect();
        if let Some(t) = prepositions.iter().find(|p| verb_set.contains(p.as_str())) {
            return Err(Error::LexiconConflict(t.clone()));
        }
        let mut lex = Self::default();
        for v in verbs {
            if !lex.verbs.contains(&v) {
                lex.verbs.push(v);
            }
        }
        for p in prepositions {
            if !lex.prepositions.contains(&p) {
                lex.prepositions.push(p);
            }
        }
        Ok(lex)
    }

    pub fn kind(&self, token: &str) -> Option<WordKind> {
        if self.verbs.iter().any(|v| v == token) {
            Some(WordKind::Verb)
        } else if self.prepositions.iter().any(|p| p == token) {
            Some(WordKind::Prep)
        } else {
            None
        }
    }

    /// Verbs then prepositions, the order used for embedding tables.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.verbs.iter().chain(&self.prepositions).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.verbs.is_empty() && self.prepositions.is_empty()
    }

    /// Action words of `text` in order of occurrence.
    pub fn action_words(&self, text: &str) -> Vec<(String, WordKind)> {
        tokenize(text)
            .into_iter()
            .filter_map(|t| self.kind(&t).map(|k| (t, k)))
            .collect()
    }

    /// Pairs up the action words of `text` without consulting a tree.
    pub fn sequence(&self, text: &str) -> Result<ActionSequence> {
        pair_up(text, &self.action_words(text))
    }
}

/// Keeps the provided tokens that occur in the corpus, in provided order.
pub fn build_lexicon<S: AsRef<str>>(corpus: &[S], verbs: &[&str], preps: &[&str]) -> Result<Lexicon> {
    let full = Lexicon::new(
        verbs.iter().map(|s| s.to_string()).collect(),
        preps.iter().map(|s| s.to_string()).collect(),
    )?;
    let seen: HashSet<String> = corpus.iter().flat_map(|s| tokenize(s.as_ref())).collect();
    Ok(Lexicon {
        verbs: full.verbs.into_iter().filter(|t| seen.contains(t)).collect(),
        prepositions: full.prepositions.into_iter().filter(|t| seen.contains(t)).collect(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSequence {
    pub pairs: Vec<(String, Option<String>)>,
}

impl ActionSequence {
    pub fn n(&self) -> usize {
        self.pairs.len()
    }

    /// Flattened action words: verb, prep, verb, ...
    pub fn words(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for (v, p) in &self.pairs {
            out.push(v.as_str());
            if let Some(p) = p {
                out.push(p.as_str());
            }
        }
        out
    }
}

fn pair_up(instruction: &str, words: &[(String, WordKind)]) -> Result<ActionSequence> {
    let mut pairs: Vec<(String, Option<String>)> = Vec::new();
    let mut prev: Option<WordKind> = None;
    for (tok, kind) in words {
        match (prev, kind) {
            (None, WordKind::Prep) => {
                return Err(Error::PrepositionFirst {
                    instruction: instruction.to_string(),
                    token: tok.clone(),
                })
            }
            (Some(WordKind::Verb), WordKind::Verb) | (Some(WordKind::Prep), WordKind::Prep) => {
                return Err(Error::NotAlternating {
                    instruction: instruction.to_string(),
                })
            }
            (_, WordKind::Verb) => pairs.push((tok.clone(), None)),
            (_, WordKind::Prep) => pairs.last_mut().expect("verb precedes").1 = Some(tok.clone()),
        }
        prev = Some(*kind);
    }
    Ok(ActionSequence { pairs })
}

#[derive(Clone, Debug)]
pub struct Node {
    pub token: String,
    /// `None` for the root sentinel; verbs sit on even layers.
    pub layer: Option<usize>,
    pub children: Vec<usize>,
    pub terminal: bool,
}

/// Trie over action-word sequences with alternating verb/preposition layers.
#[derive(Clone, Debug)]
pub struct ActionTree {
    lexicon: Lexicon,
    nodes: Vec<Node>,
}

impl ActionTree {
    pub fn new(lexicon: Lexicon) -> Self {
        Self {
            lexicon,
            nodes: vec![Node {
                token: String::new(),
                layer: None,
                children: Vec::new(),
                terminal: false,
            }],
        }
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Node count excluding the root.
    pub fn node_count(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn depth(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| n.layer)
            .map(|l| l + 1)
            .max()
            .unwrap_or(0)
    }

    fn child(&self, node: usize, token: &str) -> Option<usize> {
        self.nodes[node]
            .children
            .iter()
            .copied()
            .find(|&c| self.nodes[c].token == token)
    }

    /// Inserts a validated sequence; returns the leaf node.
    pub fn insert(&mut self, seq: &ActionSequence) -> usize {
        let mut node = 0;
        for (layer, word) in seq.words().into_iter().enumerate() {
            node = match self.child(node, word) {
                Some(c) => c,
                None => {
                    self.nodes.push(Node {
                        token: word.to_string(),
                        layer: Some(layer),
                        children: Vec::new(),
                        terminal: false,
                    });
                    let id = self.nodes.len() - 1;
                    self.nodes[node].children.push(id);
                    id
                }
            };
        }
        self.nodes[node].terminal = true;
        node
    }

    pub fn contains_path(&self, words: &[&str]) -> bool {
        let mut node = 0;
        for w in words {
            match self.child(node, w) {
                Some(c) => node = c,
                None => return false,
            }
        }
        true
    }

    /// Action-word sequences of all inserted instructions, depth-first.
    pub fn paths(&self) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::<String>::new())];
        while let Some((node, path)) = stack.pop() {
            if self.nodes[node].terminal {
                out.push(path.clone());
            }
            for &c in self.nodes[node].children.iter().rev() {
                let mut p = path.clone();
                p.push(self.nodes[c].token.clone());
                stack.push((c, p));
            }
        }
        out
    }

    pub fn from_paths(lexicon: Lexicon, paths: &[Vec<String>]) -> Result<Self> {
        let mut tree = Self::new(lexicon);
        for p in paths {
            let text = p.join(" ");
            let words = tree.lexicon.action_words(&text);
            if words.len() != p.len() {
                return Err(Error::Input(format!("path [{text}] contains non-lexicon tokens")));
            }
            let seq = pair_up(&text, &words)?;
            tree.insert(&seq);
        }
        Ok(tree)
    }
}

pub fn build_tree<S: AsRef<str>>(corpus: &[S], lexicon: &Lexicon) -> Result<ActionTree> {
    let mut tree = ActionTree::new(lexicon.clone());
    for instruction in corpus {
        let instruction = instruction.as_ref();
        let words = lexicon.action_words(instruction);
        if !words.iter().any(|(_, k)| *k == WordKind::Verb) {
            return Err(Error::NoVerb(instruction.to_string()));
        }
        let seq = pair_up(instruction, &words)?;
        tree.insert(&seq);
    }
    Ok(tree)
}

/// Walks the tree along the instruction's action words.
pub fn parse_instruction(instruction: &str, tree: &ActionTree) -> Result<ActionSequence> {
    let words = tree.lexicon.action_words(instruction);
    match words.first() {
        None => return Err(Error::NoVerb(instruction.to_string())),
        Some((tok, WordKind::Prep)) => {
            return Err(Error::PrepositionFirst {
                instruction: instruction.to_string(),
                token: tok.clone(),
            })
        }
        _ => {}
    }
    let mut node = 0;
    let mut matched = Vec::new();
    for (tok, _) in &words {
        match tree.child(node, tok) {
            Some(c) => {
                node = c;
                matched.push(tok.clone());
            }
            None => {
                return Err(Error::UnknownComposition {
                    instruction: instruction.to_string(),
                    matched,
                })
            }
        }
    }
    pair_up(instruction, &words)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seeded token vectors; each token's vector depends only on (seed, token).
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Tensor<f32>,
    seed: u64,
}

impl EmbeddingTable {
    pub fn new<'a>(tokens: impl IntoIterator<Item = &'a str>, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        let tokens: Vec<String> = tokens.into_iter().map(str::to_string).collect();
        let mut data = Vec::with_capacity(tokens.len() * dim);
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate token `{t}` in embedding table")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(t));
            let v = Tensor::<f32>::randn(&[dim], 1.0 / (dim as f64).sqrt(), &mut rng);
            data.extend_from_slice(v.data());
        }
        let rows = tokens.len().max(1);
        if tokens.is_empty() {
            data.resize(dim, 0.0);
        }
        let vectors = Tensor::new(&[rows, dim], data)?;
        let table = Self {
            tokens,
            index,
            vectors,
            seed,
        };
        for i in 0..table.tokens.len() {
            for j in 0..i {
                if table.row(i) == table.row(j) {
                    return Err(Error::Input(format!(
                        "tokens `{}` and `{}` collide",
                        table.tokens[i], table.tokens[j]
                    )));
                }
            }
        }
        Ok(table)
    }

    pub fn from_lexicon(lexicon: &Lexicon, dim: usize, seed: u64) -> Result<Self> {
        Self::new(lexicon.tokens(), dim, seed)
    }

    pub fn dim(&self) -> usize {
        self.vectors.dims()[1]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.vectors.data()[i * d..(i + 1) * d]
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.index_of(token).map(|i| self.row(i))
    }

    /// `[len, dim]` matrix of all vectors (one zero row when empty).
    pub fn vectors(&self) -> &Tensor<f32> {
        &self.vectors
    }
}

/// Slot layout verb₁, prep₁, verb₂, prep₂, ...; `None` marks a zero slot.
pub fn slot_rows(seq: &ActionSequence, table: &EmbeddingTable, n_max: usize) -> Result<Vec<Option<usize>>> {
    if seq.n() > n_max {
        return Err(Error::Capacity { n: seq.n(), n_max });
    }
    let lookup = |t: &str| table.index_of(t).ok_or_else(|| Error::UnknownToken(t.to_string()));
    let mut rows = vec![None; 2 * n_max];
    for (i, (v, p)) in seq.pairs.iter().enumerate() {
        rows[2 * i] = Some(lookup(v)?);
        if let Some(p) = p {
            rows[2 * i + 1] = Some(lookup(p)?);
        }
    }
    Ok(rows)
}

/// `[2·n_max, d]` slot matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionTreeEmbedding {
    pub slots: Tensor<f32>,
    pub n_max: usize,
}

impl ActionTreeEmbedding {
    pub fn width(&self) -> usize {
        self.slots.numel()
    }

    pub fn flat(&self) -> &[f32] {
        self.slots.data()
    }
}

pub fn embed_instruction(seq: &ActionSequence, table: &EmbeddingTable, n_max: usize) -> Result<ActionTreeEmbedding> {
    if n_max == 0 {
        return Err(Error::Config("n_max must be positive".into()));
    }
    let rows = slot_rows(seq, table, n_max)?;
    let d = table.dim();
    let mut data = vec![0.0f32; 2 * n_max * d];
    for (slot, row) in rows.iter().enumerate() {
        if let Some(r) = row {
            data[slot * d..(slot + 1) * d].copy_from_slice(table.row(*r));
        }
    }
    Ok(ActionTreeEmbedding {
        slots: Tensor::new(&[2 * n_max, d], data)?,
        n_max,
    })
}

const CONNECTIVES: &[&str] = &["and", "then"];

/// Splits a multi-verb instruction into one clause per verb.
pub fn decompose_primitives(instruction: &str, lexicon: &Lexicon) -> Result<Vec<String>> {
    let seq = lexicon.sequence(instruction)?;
    if seq.n() == 0 {
        return Err(Error::NoVerb(instruction.to_string()));
    }
    if seq.n() == 1 {
        return Ok(vec![instruction.trim().to_string()]);
    }
    let words: Vec<&str> = instruction.split_whitespace().collect();
    let starts: Vec<usize> = words
        .iter()
        .enumerate()
        .filter(|(_, w)| lexicon.kind(&normalize_word(w)) == Some(WordKind::Verb))
        .map(|(i, _)| i)
        .collect();
    let mut out = Vec::with_capacity(starts.len());
    for (k, &s) in starts.iter().enumerate() {
        let begin = if k == 0 { 0 } else { s };
        let end = starts.get(k + 1).copied().unwrap_or(words.len());
        let mut clause: Vec<&str> = words[begin..end].to_vec();
        while clause
            .last()
            .is_some_and(|w| CONNECTIVES.contains(&normalize_word(w).as_str()) || normalize_word(w).is_empty())
        {
            clause.pop();
        }
        let mut text = clause.join(" ");
        if k + 1 < starts.len() {
            text = text.trim_end_matches([',', ';']).to_string();
        }
        out.push(text);
    }
    Ok(out)
}

/// On-disk lexicon document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconFile {
    pub verbs: Vec<String>,
    pub prepositions: Vec<String>,
    pub n_max: usize,
    pub embed_dim: usize,
    pub seed: u64,
    /// Optional tree paths so `encode` can validate compositions.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paths: Vec<Vec<String>>,
}

impl LexiconFile {
    pub fn from_corpus<S: AsRef<str>>(
        corpus: &[S],
        verbs: &[&str],
        preps: &[&str],
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let lexicon = build_lexicon(corpus, verbs, preps)?;
        let tree = build_tree(corpus, &lexicon)?;
        let n_max = corpus
            .iter()
            .map(|s| lexicon.sequence(s.as_ref()).map(|q| q.n()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(0);
        Ok(Self {
            verbs: lexicon.verbs,
            prepositions: lexicon.prepositions,
            n_max,
            embed_dim,
            seed,
            paths: tree.paths(),
        })
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        Lexicon::new(self.verbs.clone(), self.prepositions.clone())
    }

    pub fn table(&self) -> Result<EmbeddingTable> {
        EmbeddingTable::from_lexicon(&self.lexicon()?, self.embed_dim, self.seed)
    }

    /// The stored tree, or `None` when the file carries no paths.
    pub fn tree(&self) -> Result<Option<ActionTree>> {
        if self.paths.is_empty() {
            return Ok(None);
        }
        ActionTree::from_paths(self.lexicon()?, &self.paths).map(Some)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Parses (against the stored tree when present) and embeds.
    pub fn encode(&self, instruction: &str) -> Result<ActionTreeEmbedding> {
        let seq = match self.tree()? {
            Some(tree) => parse_instruction(instruction, &tree)?,
            None => self.lexicon()?.sequence(instruction)?,
        };
        if seq.n() == 0 {
            return Err(Error::NoVerb(instruction.to_string()));
        }
        embed_instruction(&seq, &self.table()?, self.n_max.max(1))
    }
}
