//! Mixed vocabulary: byte-level subwords with optional merges, followed by
//! atomic domain tokens.
//!
//! Layout by id: 256 bytes, learned merges, the four event markers, the four
//! surfaces, one token per catalog carousel, one per catalog item, then the
//! specials `<|carousel(MASK)|>`, `<|id(UNK)|>` and `<|carousel()|>`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::catalog::CatalogIndex;
use crate::error::{Error, Result};
use crate::grammar::{carousel_token, item_token, surface_token, CAROUSEL_EMPTY, CAROUSEL_MASK, ITEM_UNKNOWN, MARKERS};
use crate::story::{CarouselRef, Surface};

pub type TokenId = u32;

const DOMAIN_OPEN: &[u8] = b"<|";
const DOMAIN_CLOSE: &[u8] = b"|>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Byte,
    Merge,
    Marker,
    Surface,
    Carousel,
    Item,
    Special,
}

impl TokenClass {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenClass::Byte => "byte",
            TokenClass::Merge => "merge",
            TokenClass::Marker => "marker",
            TokenClass::Surface => "surface",
            TokenClass::Carousel => "carousel",
            TokenClass::Item => "item",
            TokenClass::Special => "special",
        }
    }

    pub fn is_domain(self) -> bool {
        !matches!(self, TokenClass::Byte | TokenClass::Merge)
    }
}

impl fmt::Display for TokenClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "byte" => TokenClass::Byte,
            "merge" => TokenClass::Merge,
            "marker" => TokenClass::Marker,
            "surface" => TokenClass::Surface,
            "carousel" => TokenClass::Carousel,
            "item" => TokenClass::Item,
            "special" => TokenClass::Special,
            other => return Err(Error::invalid(format!("unknown token class `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Entry {
    class: TokenClass,
    bytes: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    entries: Vec<Entry>,
    /// Merge token surface bytes to token id; lower id merges first.
    merges: HashMap<Vec<u8>, TokenId>,
    domain: HashMap<String, TokenId>,
    items: HashMap<String, TokenId>,
    carousels: HashMap<String, TokenId>,
    item_ids: Vec<TokenId>,
    carousel_ids: Vec<TokenId>,
    domain_start: TokenId,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Vocabulary {
    /// Builds the vocabulary. `merges` pair merges are learned greedily over
    /// the non-domain text of `merge_text`.
    pub fn build<S: AsRef<str>>(catalog: &CatalogIndex, merges: usize, merge_text: &[S]) -> Result<Self> {
        let mut entries: Vec<Entry> = (0..=255u8).map(|b| Entry { class: TokenClass::Byte, bytes: vec![b] }).collect();
        for bytes in learn_merges(merges, merge_text) {
            entries.push(Entry { class: TokenClass::Merge, bytes });
        }
        let mut push = |class, s: String| entries.push(Entry { class, bytes: s.into_bytes() });
        for marker in MARKERS {
            push(TokenClass::Marker, marker.to_string());
        }
        for surface in Surface::ALL {
            push(TokenClass::Surface, surface_token(surface));
        }
        for c in catalog.carousels() {
            push(TokenClass::Carousel, carousel_token(&CarouselRef::new(c.carousel_id.clone())));
        }
        for item in catalog.items() {
            push(TokenClass::Item, item_token(&item.item_ref()));
        }
        for special in [CAROUSEL_MASK, ITEM_UNKNOWN, CAROUSEL_EMPTY] {
            push(TokenClass::Special, special.to_string());
        }
        Self::from_entries(entries)
    }

    fn from_entries(entries: Vec<Entry>) -> Result<Self> {
        let mut merges = HashMap::new();
        let mut domain = HashMap::new();
        let mut items = HashMap::new();
        let mut carousels = HashMap::new();
        let mut item_ids = Vec::new();
        let mut carousel_ids = Vec::new();
        let mut domain_start = None;
        let mut seen: HashMap<&[u8], TokenId> = HashMap::new();

        for (i, e) in entries.iter().enumerate() {
            let id = i as TokenId;
            if let Some(prev) = seen.insert(&e.bytes, id) {
                return Err(Error::invalid(format!("tokens {prev} and {id} share a surface form")));
            }
            match e.class {
                TokenClass::Byte => {
                    if i >= 256 || e.bytes != [i as u8] {
                        return Err(Error::invalid(format!("token {id}: byte tokens must be ids 0..256 in order")));
                    }
                }
                TokenClass::Merge => {
                    if domain_start.is_some() || e.bytes.len() < 2 {
                        return Err(Error::invalid(format!("token {id}: misplaced merge token")));
                    }
                    merges.insert(e.bytes.clone(), id);
                }
                class => {
                    domain_start.get_or_insert(id);
                    let s = std::str::from_utf8(&e.bytes)
                        .map_err(|_| Error::invalid(format!("token {id}: domain token is not UTF-8")))?;
                    if !s.starts_with("<|") || !s.ends_with("|>") || s[2..s.len() - 2].contains("|>") {
                        return Err(Error::invalid(format!("token {id}: malformed domain token `{s}`")));
                    }
                    match class {
                        TokenClass::Item => {
                            let inner = s.strip_prefix("<|id(").and_then(|r| r.strip_suffix(")|>"));
                            let item_id = inner.and_then(|r| r.split_once('|')).map(|(id, _)| id);
                            let item_id = item_id.ok_or_else(|| Error::invalid(format!("token {id}: malformed item `{s}`")))?;
                            items.insert(item_id.to_string(), id);
                            item_ids.push(id);
                        }
                        TokenClass::Carousel => {
                            let inner = s.strip_prefix("<|carousel(").and_then(|r| r.strip_suffix(")|>"));
                            let cid = inner.ok_or_else(|| Error::invalid(format!("token {id}: malformed carousel `{s}`")))?;
                            carousels.insert(cid.to_string(), id);
                            carousel_ids.push(id);
                        }
                        _ => {}
                    }
                    domain.insert(s.to_string(), id);
                }
            }
            if domain_start.is_some() && !e.class.is_domain() {
                return Err(Error::invalid(format!("token {id}: base token after the domain range")));
            }
        }
        let domain_start = domain_start.unwrap_or(entries.len() as TokenId);
        let vocab = Self { entries, merges, domain, items, carousels, item_ids, carousel_ids, domain_start };
        for required in MARKERS.iter().copied().chain([CAROUSEL_MASK, ITEM_UNKNOWN, CAROUSEL_EMPTY]) {
            vocab.domain_id(required)?;
        }
        for surface in Surface::ALL {
            vocab.domain_id(&surface_token(surface))?;
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    /// First id of the domain range; all ids below are subword tokens.
    pub fn domain_start(&self) -> TokenId {
        self.domain_start
    }

    pub fn class(&self, id: TokenId) -> Option<TokenClass> {
        self.entries.get(id as usize).map(|e| e.class)
    }

    pub fn surface_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.entries.get(id as usize).map(|e| e.bytes.as_slice())
    }

    pub fn domain_id(&self, surface: &str) -> Result<TokenId> {
        self.domain
            .get(surface)
            .copied()
            .ok_or_else(|| Error::UnknownDomainToken { span: surface.to_string(), offset: 0 })
    }

    pub fn marker_id(&self, marker: &str) -> TokenId {
        self.domain[marker]
    }

    pub fn surface_id(&self, surface: Surface) -> TokenId {
        self.domain[&surface_token(surface)]
    }

    pub fn mask_carousel_id(&self) -> TokenId {
        self.domain[CAROUSEL_MASK]
    }

    pub fn empty_carousel_id(&self) -> TokenId {
        self.domain[CAROUSEL_EMPTY]
    }

    pub fn unknown_item_id(&self) -> TokenId {
        self.domain[ITEM_UNKNOWN]
    }

    pub fn item_token_id(&self, item_id: &str) -> Option<TokenId> {
        self.items.get(item_id).copied()
    }

    pub fn carousel_token_id(&self, carousel_id: &str) -> Option<TokenId> {
        if carousel_id.is_empty() {
            return Some(self.empty_carousel_id());
        }
        self.carousels.get(carousel_id).copied()
    }

    /// Catalog item tokens in id order.
    pub fn item_token_ids(&self) -> &[TokenId] {
        &self.item_ids
    }

    /// Catalog carousel tokens in id order (excludes mask and empty).
    pub fn carousel_token_ids(&self) -> &[TokenId] {
        &self.carousel_ids
    }

    /// The item id behind an item token.
    pub fn item_id_of(&self, id: TokenId) -> Option<&str> {
        if self.class(id)? != TokenClass::Item {
            return None;
        }
        let s = std::str::from_utf8(&self.entries[id as usize].bytes).ok()?;
        s.strip_prefix("<|id(")?.split_once('|').map(|(item, _)| item)
    }

    pub fn carousel_id_of(&self, id: TokenId) -> Option<&str> {
        if self.class(id)? != TokenClass::Carousel {
            return None;
        }
        let s = std::str::from_utf8(&self.entries[id as usize].bytes).ok()?;
        s.strip_prefix("<|carousel(")?.strip_suffix(")|>")
    }

    pub fn is_item(&self, id: TokenId) -> bool {
        self.class(id) == Some(TokenClass::Item)
    }

    /// Encodes text: every `<|...|>` span becomes its domain token, the
    /// rest goes through the byte/merge layer.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::with_capacity(text.len() / 3);
        self.tokenize_into(text, &mut out)?;
        Ok(out)
    }

    pub fn tokenize_into(&self, text: &str, out: &mut Vec<TokenId>) -> Result<()> {
        let bytes = text.as_bytes();
        let mut pos = 0;
        while pos < bytes.len() {
            match find(&bytes[pos..], DOMAIN_OPEN) {
                None => {
                    self.encode_base(&bytes[pos..], out);
                    break;
                }
                Some(rel) => {
                    let start = pos + rel;
                    self.encode_base(&bytes[pos..start], out);
                    let end = find(&bytes[start + 2..], DOMAIN_CLOSE).map(|r| start + 2 + r + 2);
                    let span = &text[start..end.unwrap_or(bytes.len())];
                    match (end, self.domain.get(span)) {
                        (Some(end), Some(&id)) => {
                            out.push(id);
                            pos = end;
                        }
                        _ => return Err(Error::UnknownDomainToken { span: span.to_string(), offset: start }),
                    }
                }
            }
        }
        Ok(())
    }

    fn encode_base(&self, bytes: &[u8], out: &mut Vec<TokenId>) {
        if self.merges.is_empty() || bytes.len() < 2 {
            out.extend(bytes.iter().map(|&b| TokenId::from(b)));
            return;
        }
        // parts are byte ranges; repeatedly merge the adjacent pair whose
        // concatenation is the earliest-learned merge
        let mut parts: Vec<(usize, usize)> = (0..bytes.len()).map(|i| (i, i + 1)).collect();
        loop {
            let mut best: Option<(TokenId, usize)> = None;
            for i in 0..parts.len() - 1 {
                let joined = &bytes[parts[i].0..parts[i + 1].1];
                if let Some(&id) = self.merges.get(joined) {
                    if best.map_or(true, |(b, _)| id < b) {
                        best = Some((id, i));
                    }
                }
            }
            let Some((_, i)) = best else { break };
            parts[i].1 = parts[i + 1].1;
            parts.remove(i + 1);
            if parts.len() < 2 {
                break;
            }
        }
        for (a, b) in parts {
            let piece = &bytes[a..b];
            out.push(if piece.len() == 1 { TokenId::from(piece[0]) } else { self.merges[piece] });
        }
    }

    pub fn detokenize_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            let e = self
                .entries
                .get(id as usize)
                .ok_or_else(|| Error::invalid(format!("token id {id} outside vocabulary of {}", self.len())))?;
            out.extend_from_slice(&e.bytes);
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        String::from_utf8(self.detokenize_bytes(ids)?).map_err(|_| Error::invalid("token sequence is not valid UTF-8"))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(w, "{i}\t{}\t{}", e.class, escape(&e.bytes))?;
        }
        Ok(())
    }

    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = || Error::invalid(format!("vocabulary line {}: expected `id<TAB>class<TAB>surface`", n + 1));
            let mut cols = line.splitn(3, '\t');
            let (Some(id), Some(class), Some(surface)) = (cols.next(), cols.next(), cols.next()) else {
                return Err(bad());
            };
            if id.parse::<usize>().map_err(|_| bad())? != entries.len() {
                return Err(Error::invalid(format!("vocabulary line {}: ids must be contiguous from 0", n + 1)));
            }
            let bytes = unescape(surface).ok_or_else(bad)?;
            entries.push(Entry { class: class.parse()?, bytes });
        }
        Self::from_entries(entries)
    }

    /// SHA-256 of the vocabulary file, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_bytes()))
    }
}

/// Replaces item tokens whose item is absent from `known` with the
/// unknown-item token. Returns the new sequence and the replacement count.
pub fn map_unknown_items(ids: &[TokenId], vocab: &Vocabulary, known: &CatalogIndex) -> (Vec<TokenId>, usize) {
    let unk = vocab.unknown_item_id();
    let mut replaced = 0;
    let out = ids
        .iter()
        .map(|&id| match vocab.item_id_of(id) {
            Some(item) if !known.contains_item(item) => {
                replaced += 1;
                unk
            }
            _ => id,
        })
        .collect();
    (out, replaced)
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Printable ASCII is written as is, backslash as `\\`, other bytes as `\xNN`.
pub fn escape(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\\' => s.push_str("\\\\"),
            0x20..=0x7e => s.push(b as char),
            _ => s.push_str(&format!("\\x{b:02x}")),
        }
    }
    s
}

pub fn unescape(s: &str) -> Option<Vec<u8>> {
    let b = s.as_bytes();
    let mut out = Vec::with_capacity(b.len());
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'\\' {
            match b.get(i + 1)? {
                b'\\' => {
                    out.push(b'\\');
                    i += 2;
                }
                b'x' => {
                    let hex = s.get(i + 2..i + 4)?;
                    out.push(u8::from_str_radix(hex, 16).ok()?);
                    i += 4;
                }
                _ => return None,
            }
        } else {
            out.push(b[i]);
            i += 1;
        }
    }
    Some(out)
}

/// Splits text into its non-domain spans.
fn base_spans(text: &str) -> Vec<&[u8]> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        match find(&bytes[pos..], DOMAIN_OPEN) {
            None => {
                spans.push(&bytes[pos..]);
                break;
            }
            Some(rel) => {
                spans.push(&bytes[pos..pos + rel]);
                let open = pos + rel + 2;
                match find(&bytes[open..], DOMAIN_CLOSE) {
                    Some(r) => pos = open + r + 2,
                    None => break,
                }
            }
        }
    }
    spans.retain(|s| s.len() > 1);
    spans
}

/// Greedy pair merging over distinct spans weighted by frequency. Ties go
/// to the lexicographically smallest merged byte string. A pair whose
/// concatenation already exists as a token is skipped.
fn learn_merges<S: AsRef<str>>(n: usize, texts: &[S]) -> Vec<Vec<u8>> {
    if n == 0 {
        return Vec::new();
    }
    let mut counts: HashMap<&[u8], u64> = HashMap::new();
    for t in texts {
        for span in base_spans(t.as_ref()) {
            *counts.entry(span).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<Vec<u8>>, u64)> =
        counts.into_iter().map(|(span, c)| (span.iter().map(|&b| vec![b]).collect(), c)).collect();
    words.sort();

    let mut learned: Vec<Vec<u8>> = Vec::new();
    let mut known: std::collections::HashSet<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    while learned.len() < n {
        let mut pair_counts: HashMap<Vec<u8>, u64> = HashMap::new();
        for (parts, c) in &words {
            for w in parts.windows(2) {
                let joined = [w[0].as_slice(), w[1].as_slice()].concat();
                if !known.contains(&joined) {
                    *pair_counts.entry(joined).or_default() += c;
                }
            }
        }
        let Some((best, _)) = pair_counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0))) else {
            break;
        };
        for (parts, _) in &mut words {
            let mut i = 0;
            while i + 1 < parts.len() {
                if parts[i].len() + parts[i + 1].len() == best.len() && [parts[i].as_slice(), parts[i + 1].as_slice()].concat() == best {
                    let next = parts.remove(i + 1);
                    parts[i].extend_from_slice(&next);
                }
                i += 1;
            }
        }
        known.insert(best.clone());
        learned.push(best);
    }
    learned
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{CatalogCarousel, CatalogItem};

    fn catalog(items: usize, carousels: usize) -> CatalogIndex {
        let items = (0..items)
            .map(|i| CatalogItem { item_id: format!("SYN{}", 201 + i), title: format!("Title {i}"), genre: None })
            .collect();
        let carousels = (0..carousels)
            .map(|i| CatalogCarousel { carousel_id: format!("row_{i}"), name: format!("Row {i}") })
            .collect();
        CatalogIndex::new(items, carousels).unwrap()
    }

    #[test]
    fn sizes_count_the_fixed_inventory() {
        // bytes + markers + surfaces + carousels + items + mask/unk/empty-carousel
        let v = Vocabulary::build::<&str>(&catalog(3, 2), 0, &[]).unwrap();
        assert_eq!(v.len(), 256 + 4 + 4 + 2 + 3 + 3);
        let v = Vocabulary::build::<&str>(&CatalogIndex::default(), 0, &[]).unwrap();
        assert_eq!(v.len(), 256 + 4 + 4 + 3);
        assert_eq!(v.domain_start(), 256);
    }

    #[test]
    fn watch_prefix_tokenizes_to_markers_and_bytes() {
        let v = Vocabulary::build::<&str>(&catalog(1, 1), 0, &[]).unwrap();
        let ids = v.tokenize("<|watch|> hour=3 <|surface=search|>").unwrap();
        let mut expected = vec![v.marker_id("<|watch|>")];
        expected.extend(b" hour=3 ".iter().map(|&b| TokenId::from(b)));
        expected.push(v.surface_id(Surface::Search));
        assert_eq!(ids, expected);
        assert!(v.tokenize("").unwrap().is_empty());
    }

    #[test]
    fn unknown_span_is_named() {
        let v = Vocabulary::build::<&str>(&catalog(1, 1), 0, &[]).unwrap();
        match v.tokenize("x <|id(SYN999|Gone)|> y") {
            Err(Error::UnknownDomainToken { span, offset }) => {
                assert_eq!(span, "<|id(SYN999|Gone)|>");
                assert_eq!(offset, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(v.tokenize("dangling <|watch").is_err());
    }

    #[test]
    fn merges_roundtrip_and_shorten() {
        let text = ["a=1 <|watch|> hour=3 hour=4 <|search|> hour=5 lan"; 3];
        let v = Vocabulary::build(&catalog(2, 1), 20, &text).unwrap();
        // the text runs out of pairs before 20 merges
        assert!(v.merge_count() > 5 && v.merge_count() <= 20);
        let plain = Vocabulary::build::<&str>(&catalog(2, 1), 0, &[]).unwrap();
        let ids = v.tokenize(text[0]).unwrap();
        assert!(ids.len() < plain.tokenize(text[0]).unwrap().len());
        assert_eq!(v.detokenize(&ids).unwrap(), text[0]);
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let text = ["caf\u{e9}\tx\\y hour=1 hour=2"];
        let v = Vocabulary::build(&catalog(3, 2), 6, &text).unwrap();
        let bytes = v.to_file_bytes();
        let back = Vocabulary::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_file_bytes(), bytes);
        assert_eq!(back.hash(), v.hash());
        assert_eq!(back.tokenize(text[0]).unwrap(), v.tokenize(text[0]).unwrap());
    }

    #[test]
    fn unknown_items_map_to_unk() {
        let v = Vocabulary::build::<&str>(&catalog(3, 0), 0, &[]).unwrap();
        let known = catalog(2, 0);
        let retired = v.item_token_id("SYN203").unwrap();
        let kept = v.item_token_id("SYN201").unwrap();
        let ids = vec![kept, 32, retired, retired];
        let (out, n) = map_unknown_items(&ids, &v, &known);
        assert_eq!(n, 2);
        assert_eq!(out, vec![kept, 32, v.unknown_item_id(), v.unknown_item_id()]);
        let (same, n) = map_unknown_items(&[kept, 32], &v, &known);
        assert_eq!((same, n), (vec![kept, 32], 0));
    }

    #[test]
    fn escaping_roundtrips_every_byte() {
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(unescape(&escape(&all)).unwrap(), all);
        assert!(!escape(&all).contains('\t'));
    }
}
