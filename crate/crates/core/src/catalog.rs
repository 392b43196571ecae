//! The item and carousel inventory that domain tokens are minted from.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::story::{carousel_id_ok, item_id_ok, title_ok, ItemRef};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub item_id: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genre: Option<String>,
}

impl CatalogItem {
    pub fn item_ref(&self) -> ItemRef {
        ItemRef::new(self.item_id.clone(), self.title.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogCarousel {
    pub carousel_id: String,
    pub name: String,
}

/// One line of the catalog file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CatalogRecord {
    Item(CatalogItem),
    Carousel(CatalogCarousel),
}

#[derive(Clone, Debug, Default)]
pub struct CatalogIndex {
    items: Vec<CatalogItem>,
    carousels: Vec<CatalogCarousel>,
    item_pos: HashMap<String, usize>,
    carousel_pos: HashMap<String, usize>,
}

impl PartialEq for CatalogIndex {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items && self.carousels == other.carousels
    }
}

impl CatalogIndex {
    pub fn new(items: Vec<CatalogItem>, carousels: Vec<CatalogCarousel>) -> Result<Self> {
        let mut item_pos = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if let Some(rule) = item_id_ok(&item.item_id) {
                return Err(Error::invalid(format!("catalog item `{}`: {rule}", item.item_id)));
            }
            if let Some(rule) = title_ok(&item.title) {
                return Err(Error::invalid(format!("catalog item `{}`: {rule}", item.item_id)));
            }
            if item_pos.insert(item.item_id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate catalog item id `{}`", item.item_id)));
            }
        }
        let mut carousel_pos = HashMap::with_capacity(carousels.len());
        for (i, c) in carousels.iter().enumerate() {
            if c.carousel_id.is_empty() {
                return Err(Error::invalid("catalog carousel id is empty"));
            }
            if let Some(rule) = carousel_id_ok(&c.carousel_id) {
                return Err(Error::invalid(format!("catalog carousel `{}`: {rule}", c.carousel_id)));
            }
            if title_ok(&c.name).is_some() {
                return Err(Error::invalid(format!("catalog carousel `{}` has a reserved name", c.carousel_id)));
            }
            if carousel_pos.insert(c.carousel_id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate catalog carousel id `{}`", c.carousel_id)));
            }
        }
        Ok(Self { items, carousels, item_pos, carousel_pos })
    }

    pub fn items(&self) -> &[CatalogItem] {
        &self.items
    }

    pub fn carousels(&self) -> &[CatalogCarousel] {
        &self.carousels
    }

    pub fn item(&self, item_id: &str) -> Option<&CatalogItem> {
        self.item_pos.get(item_id).map(|&i| &self.items[i])
    }

    pub fn carousel(&self, carousel_id: &str) -> Option<&CatalogCarousel> {
        self.carousel_pos.get(carousel_id).map(|&i| &self.carousels[i])
    }

    pub fn contains_item(&self, item_id: &str) -> bool {
        self.item_pos.contains_key(item_id)
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut items = Vec::new();
        let mut carousels = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CatalogRecord = serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("catalog line {}: {e}", n + 1)))?;
            match record {
                CatalogRecord::Item(item) => items.push(item),
                CatalogRecord::Carousel(c) => carousels.push(c),
            }
        }
        Self::new(items, carousels)
    }

    /// Items first, then carousels, in index order.
    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<()> {
        for item in &self.items {
            serde_json::to_writer(&mut writer, item)?;
            writer.write_all(b"\n")?;
        }
        for c in &self.carousels {
            serde_json::to_writer(&mut writer, c)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}
