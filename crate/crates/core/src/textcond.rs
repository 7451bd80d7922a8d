//! Concept vocabulary, prompt construction, token binding, and the frozen
//! text encoder.
//!
//! A prompt is a fixed-length token sequence in which every position carries
//! a [`Binding`]: either the class whose mask confines that token's attention,
//! or `Global` for tokens that may attend everywhere (specials, padding, and
//! free text such as style words).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use fsn_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::layout::LabelMap;

pub const DEFAULT_SEQ_LEN: usize = 16;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Specials {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
}

/// On-disk vocabulary: `{"words": {..}, "concepts": {..}, "specials": {..}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub words: BTreeMap<String, TokenId>,
    pub concepts: BTreeMap<u8, String>,
    pub specials: Specials,
}

impl Vocabulary {
    /// Validates and wraps the three tables.
    pub fn new(
        words: BTreeMap<String, TokenId>,
        concepts: BTreeMap<u8, String>,
        specials: Specials,
    ) -> Result<Self> {
        let v = Self { words, concepts, specials };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<TokenId> = self.words.values().copied().collect();
        ids.extend([self.specials.pad, self.specials.bos, self.specials.eos]);
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(i, &id)| id as usize != i) {
            return Err(Error::Format("token ids must be unique and dense in [0, V)".into()));
        }
        for (class, concept) in &self.concepts {
            if *class == crate::layout::UNLABELED {
                return Err(Error::Format(format!("class {class} is reserved for unlabeled pixels")));
            }
            let words: Vec<&str> = concept.split_whitespace().collect();
            if words.is_empty() {
                return Err(Error::Format(format!("class {class} has an empty concept")));
            }
            if let Some(w) = words.iter().find(|w| !self.words.contains_key(&w.to_lowercase())) {
                return Err(Error::Format(format!("concept {concept:?} uses unknown word {w:?}")));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.words.len() + 3
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.words.get(word).copied()
    }

    /// Word for an id; specials render as `<pad>`, `<bos>`, `<eos>`.
    pub fn word(&self, id: TokenId) -> Option<&str> {
        match id {
            x if x == self.specials.pad => Some("<pad>"),
            x if x == self.specials.bos => Some("<bos>"),
            x if x == self.specials.eos => Some("<eos>"),
            _ => self.words.iter().find(|(_, &v)| v == id).map(|(k, _)| k.as_str()),
        }
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.specials.pad || id == self.specials.bos || id == self.specials.eos
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Vocabulary = serde_json::from_str(&text)?;
        v.validate()?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Lowercased whitespace split, each word looked up.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    text.split_whitespace()
        .map(|w| {
            let w = w.to_lowercase();
            vocab.id(&w).ok_or(Error::OutOfVocabulary(w))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Binding {
    /// Attention confined to the mask of this class.
    Concept(u8),
    /// Unrectified: the layout channel is all ones.
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub token_ids: Vec<TokenId>,
    pub bindings: Vec<Binding>,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn positions_of(&self, id: TokenId) -> Vec<usize> {
        self.token_ids.iter().enumerate().filter(|(_, &t)| t == id).map(|(i, _)| i).collect()
    }

    /// Classes referenced by concept bindings, ascending.
    pub fn bound_classes(&self) -> BTreeSet<u8> {
        self.bindings
            .iter()
            .filter_map(|b| match b {
                Binding::Concept(c) => Some(*c),
                Binding::Global => None,
            })
            .collect()
    }

    /// Human-readable `(position, word, binding)` rows.
    pub fn binding_table(&self, vocab: &Vocabulary) -> Vec<(usize, String, Binding)> {
        self.token_ids
            .iter()
            .zip(&self.bindings)
            .enumerate()
            .map(|(i, (&t, &b))| (i, vocab.word(t).unwrap_or("?").to_string(), b))
            .collect()
    }
}

fn finish(
    mut tokens: Vec<TokenId>,
    mut bindings: Vec<Binding>,
    vocab: &Vocabulary,
    seq_len: usize,
) -> Result<Prompt> {
    tokens.push(vocab.specials.eos);
    bindings.push(Binding::Global);
    if tokens.len() > seq_len {
        return Err(Error::PromptOverflow { needed: tokens.len(), max: seq_len });
    }
    tokens.resize(seq_len, vocab.specials.pad);
    bindings.resize(seq_len, Binding::Global);
    Ok(Prompt { token_ids: tokens, bindings })
}

/// `BOS, concept words of each class present (ascending id), extra_text, EOS,
/// PAD…`. Concept words are bound to their class; everything else is Global.
/// Unlabeled pixels contribute no concept.
pub fn build_prompt_from_layout(
    label_map: &LabelMap,
    vocab: &Vocabulary,
    extra_text: &str,
    seq_len: usize,
) -> Result<Prompt> {
    let mut tokens = vec![vocab.specials.bos];
    let mut bindings = vec![Binding::Global];
    for class in label_map.classes() {
        let concept = vocab.concepts.get(&class).ok_or(Error::MissingConcept(class))?;
        for id in tokenize(concept, vocab)? {
            tokens.push(id);
            bindings.push(Binding::Concept(class));
        }
    }
    for id in tokenize(extra_text, vocab)? {
        tokens.push(id);
        bindings.push(Binding::Global);
    }
    finish(tokens, bindings, vocab, seq_len)
}

/// Free-text prompt with every position Global (the unrectified form used
/// when no layout is given).
pub fn build_prompt_from_text(text: &str, vocab: &Vocabulary, seq_len: usize) -> Result<Prompt> {
    let mut tokens = vec![vocab.specials.bos];
    tokens.extend(tokenize(text, vocab)?);
    let bindings = vec![Binding::Global; tokens.len()];
    finish(tokens, bindings, vocab, seq_len)
}

/// All-PAD, all-Global prompt: the unconditional input for guidance.
pub fn null_prompt(vocab: &Vocabulary, seq_len: usize) -> Prompt {
    Prompt { token_ids: vec![vocab.specials.pad; seq_len], bindings: vec![Binding::Global; seq_len] }
}

/// Replaces the bindings in `range`. Special-token positions cannot be
/// rebound.
pub fn rebind(prompt: &Prompt, range: std::ops::Range<usize>, binding: Binding, vocab: &Vocabulary) -> Result<Prompt> {
    if range.end > prompt.len() || range.start > range.end {
        return Err(contract(format!("rebind range {range:?} outside prompt of length {}", prompt.len())));
    }
    if let Some(p) = range.clone().find(|&p| vocab.is_special(prompt.token_ids[p])) {
        return Err(contract(format!("rebind range {range:?} touches special token at position {p}")));
    }
    let mut out = prompt.clone();
    out.bindings[range].iter_mut().for_each(|b| *b = binding);
    Ok(out)
}

/// `φ_T` for one prompt: S×D values, never trained.
#[derive(Debug, Clone)]
pub struct TextEmbeddings {
    pub values: Tensor,
}

/// Frozen word + positional embedding tables drawn from a recorded seed.
///
/// The tables are plain vectors rather than trainable tensors, so no loss can
/// ever accumulate a gradient into them.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub seed: u64,
    word: Vec<f64>,
    position: Vec<f64>,
}

const POSITION_SCALE: f64 = 0.1;

impl TextEncoder {
    pub fn new(vocab_size: usize, seq_len: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let word = (0..vocab_size * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let position =
            (0..seq_len * dim).map(|_| POSITION_SCALE * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { vocab_size, seq_len, dim, seed, word, position }
    }

    pub fn word_table(&self) -> &[f64] {
        &self.word
    }

    pub fn position_table(&self) -> &[f64] {
        &self.position
    }

    fn rows(&self, prompt: &Prompt, out: &mut Vec<f64>) -> Result<()> {
        if prompt.len() != self.seq_len {
            return Err(contract(format!("prompt length {} != encoder length {}", prompt.len(), self.seq_len)));
        }
        for (s, &tok) in prompt.token_ids.iter().enumerate() {
            let t = tok as usize;
            if t >= self.vocab_size {
                return Err(contract(format!("token id {t} outside vocabulary of {}", self.vocab_size)));
            }
            let w = &self.word[t * self.dim..(t + 1) * self.dim];
            let p = &self.position[s * self.dim..(s + 1) * self.dim];
            out.extend(w.iter().zip(p).map(|(a, b)| a + b));
        }
        Ok(())
    }

    /// `values[s] = word[token_ids[s]] + position[s]`.
    pub fn encode(&self, prompt: &Prompt) -> Result<TextEmbeddings> {
        let mut data = Vec::with_capacity(self.seq_len * self.dim);
        self.rows(prompt, &mut data)?;
        Ok(TextEmbeddings { values: Tensor::new(data, &[self.seq_len, self.dim])? })
    }

    /// Stacked `[B, S, D]` embeddings.
    pub fn encode_batch(&self, prompts: &[&Prompt]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(prompts.len() * self.seq_len * self.dim);
        for p in prompts {
            self.rows(p, &mut data)?;
        }
        Ok(Tensor::new(data, &[prompts.len(), self.seq_len, self.dim])?)
    }
}
