//! Prompt assembly, learnable per-identity tokens, token masking, and the
//! text encoder.
//!
//! A prompt for identity `i` reads `<sos> a photo of a [S]1 .. [S]M person <eos>`.
//! The `[S]m` slots are rows of the [`PromptBank`]; every other position is a
//! fixed word embedding owned by the [`TextEncoder`]. Masking swaps chosen
//! slots for the `<mask>` embedding, which is drawn once and never trained,
//! so gradients reach only the slots that survive.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Block, LayerNorm};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub const BANK_TAG: u16 = 1;
pub const TEXT_TAG: u16 = 2;

pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const MASK: &str = "<mask>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    #[default]
    Person,
    Vehicle,
}

impl Template {
    /// Words before the learnable slots.
    pub fn head(self) -> &'static [&'static str] {
        &["a", "photo", "of", "a"]
    }

    /// Words after the learnable slots.
    pub fn tail(self) -> &'static [&'static str] {
        match self {
            Template::Person => &["person"],
            Template::Vehicle => &["vehicle"],
        }
    }

    pub fn word_count(self) -> usize {
        self.head().len() + self.tail().len()
    }
}

/// Bijective token-to-id map. Reserved tokens come first: `<sos>`, `<eos>`,
/// `<mask>`, then one marker per slot (`<s1>`..), then the template words in
/// sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
    slots: usize,
}

const WORDS: [&str; 5] = ["a", "of", "person", "photo", "vehicle"];

impl Vocabulary {
    pub fn new(slots: usize) -> Self {
        let mut tokens: Vec<String> = vec![SOS.into(), EOS.into(), MASK.into()];
        tokens.extend((1..=slots).map(|m| format!("<s{m}>")));
        tokens.extend(WORDS.iter().map(|w| w.to_string()));
        Self::from_tokens(tokens, slots).expect("built-in vocabulary is bijective")
    }

    fn from_tokens(tokens: Vec<String>, slots: usize) -> Result<Self> {
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t}")));
            }
        }
        Ok(Self { tokens, ids, slots })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Ids at or above this value are ordinary words.
    pub fn first_word_id(&self) -> u32 {
        (3 + self.slots) as u32
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        id < self.first_word_id()
    }

    /// `token<TAB>id` lines in id order.
    pub fn to_tsv(&self) -> String {
        self.tokens.iter().enumerate().map(|(i, t)| format!("{t}\t{i}\n")).collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("vocabulary line {}: missing tab", line_no + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("vocabulary line {}: bad id", line_no + 1)))?;
            if id != tokens.len() {
                return Err(Error::Format(format!("vocabulary ids must be dense, got {id}")));
            }
            tokens.push(tok.to_string());
        }
        let slots = tokens.iter().filter(|t| t.starts_with("<s") && t.as_str() != SOS).count();
        Self::from_tokens(tokens, slots)
    }
}

/// Learnable `[S]1..[S]M` vectors for every identity, shape `[N, M, d_word]`.
#[derive(Clone, Debug)]
pub struct PromptBank<T> {
    pub store: ParamStore<T>,
    tokens: ParamId,
    identities: usize,
    slots: usize,
    dim: usize,
}

impl<T: Real> PromptBank<T> {
    pub fn new(identities: usize, slots: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if identities == 0 || slots == 0 || dim == 0 {
            return Err(Error::InvalidArgument("prompt bank extents must be positive".into()));
        }
        let mut store = ParamStore::new(BANK_TAG);
        let tokens = store.add("prompt.tokens", normal_tensor(&[identities, slots, dim], 0.02, rng), true);
        Ok(Self { store, tokens, identities, slots, dim })
    }

    pub fn identities(&self) -> usize {
        self.identities
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &Tensor<T> {
        &self.store.get(self.tokens).value
    }

    /// The `M` slot vectors of one identity.
    pub fn slot_vector(&self, identity: usize, slot: usize) -> &[T] {
        self.tokens().row(identity * self.slots + slot)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.store.set_trainable(trainable);
    }

    pub(crate) fn var(&self, tape: &mut Tape<T>) -> Result<Var> {
        tape.param(&self.store, self.tokens)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptToken {
    Word(u32),
    Slot(usize),
    Mask,
}

/// A prompt as a recipe of token sources; [`EmbeddedPrompt::materialize`]
/// turns it into vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddedPrompt {
    pub identity: usize,
    pub tokens: Vec<PromptToken>,
    /// Slot indices (0-based `m`) replaced by the mask embedding, ascending.
    pub masked: Vec<usize>,
}

impl EmbeddedPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Sequence positions that hold slot `m` (masked or not), in slot order.
    pub fn slot_positions(&self) -> Vec<usize> {
        let first = self
            .tokens
            .iter()
            .position(|t| matches!(t, PromptToken::Slot(_) | PromptToken::Mask))
            .unwrap_or(0);
        let count = self
            .tokens
            .iter()
            .filter(|t| matches!(t, PromptToken::Slot(_) | PromptToken::Mask))
            .count();
        (first..first + count).collect()
    }

    pub fn materialize<T: Real>(&self, bank: &PromptBank<T>, encoder: &TextEncoder<T>) -> Tensor<T> {
        let table = encoder.word_table();
        let mask_id = encoder.vocab.id(MASK).expect("mask token") as usize;
        let mut data = Vec::with_capacity(self.len() * bank.dim());
        for t in &self.tokens {
            match *t {
                PromptToken::Word(id) => data.extend_from_slice(table.row(id as usize)),
                PromptToken::Mask => data.extend_from_slice(table.row(mask_id)),
                PromptToken::Slot(m) => data.extend_from_slice(bank.slot_vector(self.identity, m)),
            }
        }
        Tensor::from_parts(vec![self.len(), bank.dim()], data)
    }
}

pub fn assemble_prompt<T: Real>(
    identity: usize,
    bank: &PromptBank<T>,
    vocab: &Vocabulary,
    template: Template,
) -> Result<EmbeddedPrompt> {
    if identity >= bank.identities() {
        return Err(Error::UnknownIdentity(identity));
    }
    let word = |w: &str| {
        vocab
            .id(w)
            .map(PromptToken::Word)
            .ok_or_else(|| Error::InvalidArgument(format!("word {w} missing from vocabulary")))
    };
    let mut tokens = vec![word(SOS)?];
    for w in template.head() {
        tokens.push(word(w)?);
    }
    tokens.extend((0..bank.slots()).map(PromptToken::Slot));
    for w in template.tail() {
        tokens.push(word(w)?);
    }
    tokens.push(word(EOS)?);
    Ok(EmbeddedPrompt { identity, tokens, masked: Vec::new() })
}

/// Replaces `floor(alpha * M)` slots, drawn uniformly without replacement,
/// with the mask embedding.
pub fn mask_prompt(y: &EmbeddedPrompt, alpha: f64, rng: &mut Rng) -> Result<EmbeddedPrompt> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("mask fraction {alpha} outside [0, 1]")));
    }
    let positions = y.slot_positions();
    let m = positions.len();
    let count = masked_count(alpha, m);
    let mut out = y.clone();
    if count == 0 {
        return Ok(out);
    }
    let mut chosen: Vec<usize> = sample(rng, m, count).into_vec();
    chosen.sort_unstable();
    for &slot in &chosen {
        out.tokens[positions[slot]] = PromptToken::Mask;
    }
    out.masked.extend(chosen);
    out.masked.sort_unstable();
    out.masked.dedup();
    Ok(out)
}

pub fn masked_count(alpha: f64, slots: usize) -> usize {
    ((alpha * slots as f64).floor() as usize).min(slots)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub word_dim: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub mlp_ratio: usize,
    pub prompt_tokens: usize,
    pub template: Template,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            word_dim: 32,
            embed_dim: 32,
            layers: 2,
            heads: 2,
            context: 16,
            mlp_ratio: 4,
            prompt_tokens: 4,
            template: Template::Person,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T> {
    pub vector: Vec<T>,
    pub identity: usize,
}

/// Small transformer over supplied token embeddings, pooled at `<eos>`.
#[derive(Clone, Debug)]
pub struct TextEncoder<T> {
    pub cfg: TextConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    word_table: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    proj: ParamId,
}

impl<T: Real> TextEncoder<T> {
    pub fn new(cfg: TextConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.prompt_tokens == 0 || cfg.word_dim == 0 || cfg.embed_dim == 0 {
            return Err(Error::InvalidArgument("text encoder extents must be positive".into()));
        }
        if cfg.heads == 0 || cfg.word_dim % cfg.heads != 0 {
            return Err(Error::InvalidArgument("word_dim must be divisible by heads".into()));
        }
        let len = cfg.template.word_count() + cfg.prompt_tokens + 2;
        if len > cfg.context {
            return Err(Error::SequenceTooLong { len, context: cfg.context });
        }
        let vocab = Vocabulary::new(cfg.prompt_tokens);
        let d = cfg.word_dim;
        let mut store = ParamStore::new(TEXT_TAG);
        // word table and mask filler are never trained
        let word_table = store.add("text.words", normal_tensor(&[vocab.len(), d], 0.02, rng), false);
        let positions = store.add("text.positions", normal_tensor(&[cfg.context, d], 0.01, rng), true);
        let blocks = (0..cfg.layers)
            .map(|l| Block::new(&mut store, &format!("text.block{l}"), d, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let ln_final = LayerNorm::new(&mut store, "text.ln_final", d);
        let proj = store.add(
            "text.proj",
            normal_tensor(&[d, cfg.embed_dim], 1.0 / (d as f64).sqrt(), rng),
            true,
        );
        Ok(Self { cfg, vocab, store, word_table, positions, blocks, ln_final, proj })
    }

    pub fn word_table(&self) -> &Tensor<T> {
        &self.store.get(self.word_table).value
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.store.set_trainable(trainable);
        self.store.get_mut(self.word_table).trainable = false;
    }

    pub fn prompt_len(&self) -> usize {
        self.cfg.template.word_count() + self.cfg.prompt_tokens + 2
    }

    /// Encodes prompts (all of one length) into a `[prompts, embed_dim]`
    /// matrix of unit rows. Gradients reach the bank's surviving slots.
    pub fn encode_batch(&self, tape: &mut Tape<T>, bank: &PromptBank<T>, prompts: &[EmbeddedPrompt]) -> Result<Var> {
        let first = prompts
            .first()
            .ok_or_else(|| Error::InvalidArgument("no prompts to encode".into()))?;
        let len = first.len();
        if len > self.cfg.context {
            return Err(Error::SequenceTooLong { len, context: self.cfg.context });
        }
        if prompts.iter().any(|p| p.len() != len) {
            return Err(Error::InvalidArgument("prompts in a batch must share one length".into()));
        }
        if bank.dim() != self.cfg.word_dim {
            return Err(Error::Shape(format!(
                "bank dim {} != word dim {}",
                bank.dim(),
                self.cfg.word_dim
            )));
        }
        let vocab_rows = self.vocab.len();
        let mask_row = self.vocab.id(MASK).expect("mask token") as usize;
        let mut idx = Vec::with_capacity(prompts.len() * len);
        for p in prompts {
            if p.identity >= bank.identities() {
                return Err(Error::UnknownIdentity(p.identity));
            }
            for t in &p.tokens {
                idx.push(match *t {
                    PromptToken::Word(id) => id as usize,
                    PromptToken::Mask => mask_row,
                    PromptToken::Slot(m) => vocab_rows + p.identity * bank.slots() + m,
                });
            }
        }
        let words = tape.param(&self.store, self.word_table)?;
        let slots = bank.var(tape)?;
        let table = tape.concat_rows(&[words, slots])?;
        let x = tape.gather_rows(table, &idx)?;
        let pos_idx: Vec<usize> = (0..prompts.len()).flat_map(|_| 0..len).collect();
        let pos = tape.param(&self.store, self.positions)?;
        let pos = tape.gather_rows(pos, &pos_idx)?;
        let mut h = tape.add(x, pos)?;
        for b in &self.blocks {
            h = b.forward(tape, &self.store, h, prompts.len(), len)?;
        }
        let eos: Vec<usize> = (0..prompts.len()).map(|s| s * len + len - 1).collect();
        let pooled = tape.gather_rows(h, &eos)?;
        let pooled = self.ln_final.forward(tape, &self.store, pooled)?;
        let proj = tape.param(&self.store, self.proj)?;
        let out = tape.matmul(pooled, proj)?;
        tape.l2_normalize_rows(out)
    }

    pub fn encode(&self, prompt: &EmbeddedPrompt, bank: &PromptBank<T>) -> Result<TextEmbedding<T>> {
        let mut tape = Tape::new();
        let v = self.encode_batch(&mut tape, bank, std::slice::from_ref(prompt))?;
        Ok(TextEmbedding { vector: tape.value(v).data().to_vec(), identity: prompt.identity })
    }

    /// Unmasked text feature of every identity, `[N, embed_dim]`.
    pub fn identity_features(&self, bank: &PromptBank<T>) -> Result<Tensor<T>> {
        let prompts = (0..bank.identities())
            .map(|i| assemble_prompt(i, bank, &self.vocab, self.cfg.template))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let v = self.encode_batch(&mut tape, bank, &prompts)?;
        Ok(tape.value(v).clone())
    }
}
