//! Training examples: story tokenization, stochastic masking, the catalog
//! corpus and the seeded story/catalog mixture.

use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::CatalogIndex;
use crate::error::{Error, Result};
use crate::grammar::{serialize, StoryTransform};
use crate::story::{Surface, UserStory};
use crate::vocab::{TokenClass, TokenId, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub p_carousel_mask: f64,
    pub p_item_unk: f64,
    pub rng_seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { p_carousel_mask: 0.1, p_item_unk: 0.001, rng_seed: 0 }
    }
}

impl MaskingConfig {
    pub fn none() -> Self {
        Self { p_carousel_mask: 0.0, p_item_unk: 0.0, rng_seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_carousel_mask", self.p_carousel_mask), ("p_item_unk", self.p_item_unk)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truncate {
    /// Keep the first tokens.
    #[default]
    Head,
    /// Keep the last tokens.
    Tail,
}

impl FromStr for Truncate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Truncate::Head),
            "tail" => Ok(Truncate::Tail),
            other => Err(Error::config(format!("unknown truncation `{other}` (expected head or tail)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub story_weight: u32,
    pub catalog_weight: u32,
    pub context_length: usize,
    pub rng_seed: u64,
    pub truncate: Truncate,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self { story_weight: 20, catalog_weight: 1, context_length: 256, rng_seed: 0, truncate: Truncate::Head }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.story_weight == 0 || self.catalog_weight == 0 {
            return Err(Error::config("mixture weights must be positive integers"));
        }
        if self.context_length < 2 {
            return Err(Error::config("context_length must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Story,
    Catalog,
}

impl Origin {
    fn flag(self) -> u8 {
        match self {
            Origin::Story => 0,
            Origin::Catalog => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub token_ids: Vec<TokenId>,
    pub origin: Origin,
}

/// A generator for one masking or sampling stream. Streams are addressed by
/// index so results do not depend on evaluation order.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Serializes a story (after `transform`) and tokenizes it.
pub fn encode_story(story: &UserStory, transform: &StoryTransform, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let text = if transform.is_identity() { serialize(story)? } else { serialize(&transform.apply(story))? };
    vocab.tokenize(text.as_str())
}

/// Applies training-time masking to one tokenized story.
///
/// Per watch, the surface and carousel pair becomes
/// `<|surface=home|><|carousel(MASK)|>` with probability `p_carousel_mask`;
/// per item token, it becomes `<|id(UNK)|>` with probability `p_item_unk`.
/// Draws happen in token order from stream `stream`.
pub fn apply_masking(ids: &[TokenId], vocab: &Vocabulary, cfg: &MaskingConfig, stream: u64) -> Vec<TokenId> {
    let mut out = ids.to_vec();
    if cfg.p_carousel_mask == 0.0 && cfg.p_item_unk == 0.0 {
        return out;
    }
    let mut rng = stream_rng(cfg.rng_seed, stream);
    let home = vocab.surface_id(Surface::Home);
    let mask = vocab.mask_carousel_id();
    let unk = vocab.unknown_item_id();
    let mut i = 0;
    while i < out.len() {
        match vocab.class(out[i]) {
            Some(TokenClass::Surface) if i + 1 < out.len() && is_carousel_slot(vocab, out[i + 1]) => {
                if rng.gen_bool(cfg.p_carousel_mask) {
                    out[i] = home;
                    out[i + 1] = mask;
                }
                i += 2;
                continue;
            }
            Some(TokenClass::Item) => {
                if rng.gen_bool(cfg.p_item_unk) {
                    out[i] = unk;
                }
            }
            _ => {}
        }
        i += 1;
    }
    out
}

fn is_carousel_slot(vocab: &Vocabulary, id: TokenId) -> bool {
    vocab.class(id) == Some(TokenClass::Carousel) || id == vocab.empty_carousel_id() || id == vocab.mask_carousel_id()
}

/// One statement per item (`<item> has title T`) and per carousel
/// (`<carousel> has name N`).
pub fn build_catalog_corpus(catalog: &CatalogIndex, vocab: &Vocabulary) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::with_capacity(catalog.items().len() + catalog.carousels().len());
    for item in catalog.items() {
        let id = vocab
            .item_token_id(&item.item_id)
            .ok_or_else(|| Error::invalid(format!("item `{}` has no vocabulary token", item.item_id)))?;
        let mut ids = vec![id];
        vocab.tokenize_into(&format!(" has title {}", item.title), &mut ids)?;
        out.push(TrainingExample { token_ids: ids, origin: Origin::Catalog });
    }
    for c in catalog.carousels() {
        let id = vocab
            .carousel_token_id(&c.carousel_id)
            .ok_or_else(|| Error::invalid(format!("carousel `{}` has no vocabulary token", c.carousel_id)))?;
        let mut ids = vec![id];
        vocab.tokenize_into(&format!(" has name {}", c.name), &mut ids)?;
        out.push(TrainingExample { token_ids: ids, origin: Origin::Catalog });
    }
    Ok(out)
}

pub fn truncate(ids: &mut Vec<TokenId>, len: usize, how: Truncate) {
    if ids.len() > len {
        match how {
            Truncate::Head => ids.truncate(len),
            Truncate::Tail => {
                ids.drain(..ids.len() - len);
            }
        }
    }
}

/// Counter-based sampler over the story/catalog mixture: draw `i` is a pure
/// function of the configs, the corpora and `i`.
pub struct MixtureSampler<'a> {
    stories: &'a [Vec<TokenId>],
    catalog: &'a [TrainingExample],
    vocab: &'a Vocabulary,
    mixture: MixtureConfig,
    masking: MaskingConfig,
}

impl<'a> MixtureSampler<'a> {
    pub fn new(
        stories: &'a [Vec<TokenId>],
        catalog: &'a [TrainingExample],
        vocab: &'a Vocabulary,
        mixture: MixtureConfig,
        masking: MaskingConfig,
    ) -> Result<Self> {
        mixture.validate()?;
        masking.validate()?;
        if stories.is_empty() || catalog.is_empty() {
            return Err(Error::invalid("mixture sampling needs a non-empty story corpus and catalog corpus"));
        }
        Ok(Self { stories, catalog, vocab, mixture, masking })
    }

    pub fn draw(&self, i: u64) -> TrainingExample {
        let mut rng = stream_rng(self.mixture.rng_seed, i);
        let total = self.mixture.story_weight + self.mixture.catalog_weight;
        let mut ex = if rng.gen_range(0..total) < self.mixture.story_weight {
            let pick = rng.gen_range(0..self.stories.len());
            let ids = apply_masking(&self.stories[pick], self.vocab, &self.masking, i);
            TrainingExample { token_ids: ids, origin: Origin::Story }
        } else {
            self.catalog[rng.gen_range(0..self.catalog.len())].clone()
        };
        truncate(&mut ex.token_ids, self.mixture.context_length, self.mixture.truncate);
        ex
    }
}

/// Draws `n` examples (indices `0..n`).
pub fn sample_mixture(
    stories: &[Vec<TokenId>],
    catalog: &[TrainingExample],
    vocab: &Vocabulary,
    mixture: MixtureConfig,
    masking: MaskingConfig,
    n: i64,
) -> Result<Vec<TrainingExample>> {
    if n <= 0 {
        return Err(Error::invalid(format!("number of draws must be positive, got {n}")));
    }
    let sampler = MixtureSampler::new(stories, catalog, vocab, mixture, masking)?;
    Ok((0..n as u64).map(|i| sampler.draw(i)).collect())
}

/// Writes records as `[origin u8][len u32 LE][ids u32 LE ...]`.
pub fn write_corpus(mut w: impl Write, examples: &[TrainingExample]) -> Result<()> {
    for ex in examples {
        w.write_all(&[ex.origin.flag()])?;
        let len = u32::try_from(ex.token_ids.len()).map_err(|_| Error::invalid("record too long"))?;
        w.write_all(&len.to_le_bytes())?;
        for id in &ex.token_ids {
            w.write_all(&id.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_corpus(mut r: impl Read) -> Result<Vec<TrainingExample>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut out = Vec::new();
    let mut pos = 0;
    let truncated = |pos: usize| Error::invalid(format!("corpus file truncated at byte {pos}"));
    while pos < buf.len() {
        let origin = match buf[pos] {
            0 => Origin::Story,
            1 => Origin::Catalog,
            other => return Err(Error::invalid(format!("bad origin flag {other} at byte {pos}"))),
        };
        let len_bytes = buf.get(pos + 1..pos + 5).ok_or_else(|| truncated(pos))?;
        let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
        let body = buf.get(pos + 5..pos + 5 + 4 * len).ok_or_else(|| truncated(pos))?;
        let token_ids = body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push(TrainingExample { token_ids, origin });
        pos += 5 + 4 * len;
    }
    Ok(out)
}
