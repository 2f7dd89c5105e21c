use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VildError};

pub type CategoryId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    Rare,
    Common,
    Frequent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    pub split: Split,
    pub frequency: Frequency,
}

/// Ordered category list. The order is the index order of every score
/// vector and text-embedding matrix built from this vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    categories: Vec<Category>,
    /// Named attribute lists used for vocabulary expansion.
    pub attribute_sets: BTreeMap<String, Vec<String>>,
}

impl Vocabulary {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &categories {
            if c.name.is_empty() {
                return Err(VildError::invalid(format!("category {} has empty name", c.id)));
            }
            if !seen.insert(c.id) {
                return Err(VildError::invalid(format!("duplicate category id {}", c.id)));
            }
        }
        Ok(Vocabulary {
            categories,
            attribute_sets: BTreeMap::new(),
        })
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn get(&self, id: CategoryId) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn index_of(&self, id: CategoryId) -> Option<usize> {
        self.categories.iter().position(|c| c.id == id)
    }

    pub fn ids(&self) -> Vec<CategoryId> {
        self.categories.iter().map(|c| c.id).collect()
    }

    pub fn ids_where(&self, pred: impl Fn(&Category) -> bool) -> Vec<CategoryId> {
        self.categories.iter().filter(|c| pred(c)).map(|c| c.id).collect()
    }

    pub fn base_ids(&self) -> Vec<CategoryId> {
        self.ids_where(|c| c.split == Split::Base)
    }

    pub fn novel_ids(&self) -> Vec<CategoryId> {
        self.ids_where(|c| c.split == Split::Novel)
    }

    /// True when every novel category is rare and every rare one novel.
    pub fn novel_is_rare(&self) -> bool {
        self.categories
            .iter()
            .all(|c| (c.split == Split::Novel) == (c.frequency == Frequency::Rare))
    }
}
