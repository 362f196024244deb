//! Label-to-text mappings: the naive modality template and the
//! expert-knowledge description ensembles, plus the category registry.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Position, Result};

pub const CLS_TOKEN: &str = "[CLS]";
pub const DEFAULT_NAIVE_TEMPLATE: &str = "A fundus photograph of [CLS]";

const BUILTIN_BANK: &str = include_str!("../data/prompt_bank.json");
const BUILTIN_REGISTRY: &str = include_str!("../data/categories.json");

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
    pub abbreviation: String,
}

impl Category {
    pub fn new(id: usize, name: impl Into<String>, abbreviation: impl Into<String>) -> Self {
        Category {
            id,
            name: name.into(),
            abbreviation: abbreviation.into(),
        }
    }

    /// Builds a dense vocabulary from names, using each name as its own abbreviation.
    pub fn vocabulary<S: AsRef<str>>(names: &[S]) -> Vec<Category> {
        names
            .iter()
            .enumerate()
            .map(|(id, n)| Category::new(id, n.as_ref(), n.as_ref()))
            .collect()
    }
}

/// Static abbreviation registry. Ids are the position in the registry file.
#[derive(Debug, Clone)]
pub struct CategoryRegistry {
    categories: Vec<Category>,
    by_abbreviation: HashMap<String, usize>,
    by_name: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct RegistryFile {
    categories: Vec<RegistryEntry>,
}

#[derive(Deserialize)]
struct RegistryEntry {
    abbreviation: String,
    name: String,
}

impl CategoryRegistry {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_REGISTRY).expect("builtin registry is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RegistryFile = serde_json::from_str(text).map_err(|e| json_error("category registry", &e))?;
        let pairs: Vec<(String, String)> = file
            .categories
            .into_iter()
            .map(|e| (e.abbreviation, e.name))
            .collect();
        Self::from_pairs(pairs)
    }

    /// Builds a registry from `(abbreviation, name)` pairs.
    pub fn from_pairs<A: Into<String>, N: Into<String>>(pairs: impl IntoIterator<Item = (A, N)>) -> Result<Self> {
        let mut categories = Vec::new();
        let mut by_abbreviation = HashMap::new();
        let mut by_name = HashMap::new();
        for (id, (abbr, name)) in pairs.into_iter().enumerate() {
            let (abbr, name) = (abbr.into(), name.into());
            if by_abbreviation.insert(abbr.clone(), id).is_some() {
                return Err(Error::Validation(format!("duplicate abbreviation `{abbr}` in registry")));
            }
            if by_name.insert(name.clone(), id).is_some() {
                return Err(Error::Validation(format!("duplicate category name `{name}` in registry")));
            }
            categories.push(Category::new(id, name, abbr));
        }
        Ok(CategoryRegistry {
            categories,
            by_abbreviation,
            by_name,
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

    pub fn get(&self, id: usize) -> Option<&Category> {
        self.categories.get(id)
    }

    /// Resolves an abbreviation (preferred) or a canonical name.
    pub fn resolve(&self, label: &str) -> Option<&Category> {
        self.by_abbreviation
            .get(label)
            .or_else(|| self.by_name.get(label))
            .map(|&id| &self.categories[id])
    }

    pub fn resolve_or_err(&self, label: &str) -> Result<&Category> {
        self.resolve(label).ok_or_else(|| Error::Lookup {
            kind: "category",
            name: label.to_string(),
        })
    }
}

/// Category name to prompt descriptions, in file order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptBank {
    naive_template: String,
    entries: Vec<(String, Vec<String>)>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

/// Ordered map that rejects duplicate keys instead of keeping the last one.
struct OrderedEntries(Vec<(String, Vec<String>)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping category names to lists of descriptions")
            }

            fn visit_map<M: MapAccess<'de>>(self, mut map: M) -> std::result::Result<Self::Value, M::Error> {
                let mut out: Vec<(String, Vec<String>)> = Vec::new();
                while let Some(key) = map.next_key::<String>()? {
                    if out.iter().any(|(k, _)| *k == key) {
                        return Err(serde::de::Error::custom(format!("duplicate category key `{key}`")));
                    }
                    let value: Vec<String> = map.next_value()?;
                    out.push((key, value));
                }
                Ok(OrderedEntries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

#[derive(Deserialize)]
struct BankFile {
    naive_template: Option<String>,
    categories: OrderedEntries,
}

fn json_error(context: &str, e: &serde_json::Error) -> Error {
    let message = e.to_string();
    // serde_json already appends "at line X column Y"; keep the bare message.
    let message = match message.rfind(" at line ") {
        Some(i) => message[..i].to_string(),
        None => message,
    };
    Error::format(
        context,
        Position::Line {
            line: e.line(),
            column: Some(e.column()),
        },
        message,
    )
}

impl PromptBank {
    pub fn new(naive_template: impl Into<String>, entries: Vec<(String, Vec<String>)>) -> Result<Self> {
        let naive_template = naive_template.into();
        let cls_count = naive_template.matches(CLS_TOKEN).count();
        if cls_count != 1 {
            return Err(Error::Validation(format!(
                "naive template must contain exactly one {CLS_TOKEN} token, found {cls_count}"
            )));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (name, descriptions)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate category key `{name}`")));
            }
            if let Some(k) = descriptions.iter().position(|d| d.is_empty()) {
                return Err(Error::Validation(format!(
                    "category `{name}`: description {k} is empty"
                )));
            }
        }
        Ok(PromptBank {
            naive_template,
            entries,
            index,
        })
    }

    /// The expert-knowledge bank shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_BANK).expect("builtin prompt bank is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BankFile = serde_json::from_str(text).map_err(|e| {
            if e.to_string().contains("duplicate category key") {
                Error::Validation(e.to_string())
            } else {
                json_error("prompt bank", &e)
            }
        })?;
        let template = file
            .naive_template
            .unwrap_or_else(|| DEFAULT_NAIVE_TEMPLATE.to_string());
        Self::new(template, file.categories.0)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut categories = serde_json::Map::new();
        for (name, descriptions) in &self.entries {
            categories.insert(name.clone(), serde_json::json!(descriptions));
        }
        let doc = serde_json::json!({
            "naive_template": self.naive_template,
            "categories": categories,
        });
        serde_json::to_string_pretty(&doc).expect("bank serializes")
    }

    pub fn naive_template(&self) -> &str {
        &self.naive_template
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn category_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn naive_prompt(&self, category: &Category) -> String {
        self.naive_template.replacen(CLS_TOKEN, &category.name, 1)
    }

    pub fn ek_prompts(&self, category: &Category) -> Result<&[String]> {
        self.index
            .get(&category.name)
            .map(|&i| self.entries[i].1.as_slice())
            .ok_or_else(|| Error::Lookup {
                kind: "prompt-bank category",
                name: category.name.clone(),
            })
    }

    /// Draws uniformly from the naive prompt and the category's descriptions.
    /// Categories absent from the bank only have the naive prompt.
    pub fn sample_training_prompt<R: Rng + ?Sized>(&self, category: &Category, rng: &mut R) -> String {
        let ek = self.ek_prompts(category).unwrap_or(&[]);
        let k = rng.random_range(0..=ek.len());
        if k == 0 {
            self.naive_prompt(category)
        } else {
            ek[k - 1].clone()
        }
    }
}
