use serde::{Deserialize, Serialize};

use super::posemb::extend_positional_embeddings;
use super::transformer;
use super::EncodedText;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng;

pub const SOT: usize = 0;
pub const EOT: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    /// Hashed word buckets, including the two special tokens.
    pub vocab_size: usize,
    pub max_len: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2048,
            max_len: 77,
            depth: 2,
            width: 32,
            heads: 4,
            embed_dim: 32,
            seed: 1,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab must hold SOT, EOT and at least one word".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must be at least 3".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) || self.depth == 0 || self.embed_dim == 0 {
            return Err(Error::Config("invalid text encoder width/heads/depth".into()));
        }
        Ok(())
    }
}

/// Word-level tokenizer: lowercase alphanumeric runs hashed into buckets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    pub vocab_size: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokens {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

impl Tokenizer {
    pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
    }

    pub fn word_id(&self, word: &str) -> usize {
        2 + (rng::hash_str(word) % (self.vocab_size as u64 - 2)) as usize
    }

    /// `[SOT] words… [EOT]`, truncated to `max_len`.
    pub fn encode(&self, text: &str) -> Result<Tokens> {
        let words: Vec<usize> = Self::words(text).map(|w| self.word_id(&w)).collect();
        if words.is_empty() {
            return Err(Error::invalid(format!("text {text:?} has no tokens")));
        }
        let room = self.max_len - 2;
        let truncated = words.len() > room;
        if truncated {
            log::warn!(
                "text truncated from {} to {} tokens",
                words.len() + 2,
                self.max_len
            );
        }
        let mut ids = Vec::with_capacity(words.len().min(room) + 2);
        ids.push(SOT);
        ids.extend(words.into_iter().take(room));
        ids.push(EOT);
        Ok(Tokens { ids, truncated })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub params: ParamSet,
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, "init/text");
        let mut p = ParamSet::new();
        let w = config.width;
        p.normal("text.token_embed", (config.vocab_size, w), 0.02, &mut rng);
        p.normal("text.pos_embed", (config.max_len, w), 0.01, &mut rng);
        for i in 0..config.depth {
            transformer::init_block(&mut p, &format!("text.blocks.{i}"), w, config.depth, &mut rng);
        }
        transformer::init_layer_norm(&mut p, "text.ln_final", w);
        p.normal("text.proj.w", (w, config.embed_dim), (w as f64).powf(-0.5), &mut rng);
        p.zeros("text.proj.b", (1, config.embed_dim));
        Ok(Self { config, params: p })
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer {
            vocab_size: self.config.vocab_size,
            max_len: self.config.max_len,
        }
    }

    /// Returns the `1 x e` embedding at the EOT position.
    pub fn forward(&self, g: &mut Graph, b: &Bound, text: &str) -> Result<(Var, bool)> {
        let tokens = self.tokenizer().encode(text)?;
        let n = tokens.ids.len();
        let tok = g.gather_rows(b.get("text.token_embed"), &tokens.ids);
        let pos = g.slice_rows(b.get("text.pos_embed"), 0, n);
        let mut x = g.add(tok, pos);
        for i in 0..self.config.depth {
            x = transformer::block_forward(g, b, &format!("text.blocks.{i}"), x, self.config.heads, true);
        }
        let eot = g.slice_rows(x, n - 1, 1);
        let h = transformer::layer_norm(g, b, "text.ln_final", eot);
        Ok((transformer::linear(g, b, "text.proj", h), tokens.truncated))
    }

    pub fn encode_text(&self, text: &str) -> Result<EncodedText> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let (v, truncated) = self.forward(&mut g, &b, text)?;
        Ok(EncodedText {
            cls: g.value(v).row(0).to_owned(),
            truncated,
        })
    }

    /// Stretches the positional table to `target_len` rows.
    pub fn extend_context(&mut self, target_len: usize) -> Result<()> {
        let table = self.params.get("text.pos_embed").clone();
        let extended = extend_positional_embeddings(&table, target_len)?;
        self.params.insert("text.pos_embed", extended);
        self.config.max_len = target_len;
        Ok(())
    }
}
