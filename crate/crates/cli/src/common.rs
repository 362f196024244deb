use std::collections::HashSet;
use std::path::Path;

use ekclip_core::io::{read_embeddings, read_manifest, LookupFeaturizer, ModelFile, Precision};
use ekclip_core::{Category, CategoryRegistry, Error, PromptBank, Result, SurrogateFeaturizer, TextFeaturizer, TripletRecord};
use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};

use crate::{DataArgs, GlobalArgs, PrecisionArg, TextArgs};

pub fn precision(global: &GlobalArgs, fallback: Precision) -> Precision {
    match global.precision {
        Some(PrecisionArg::F32) => Precision::F32,
        Some(PrecisionArg::F64) => Precision::F64,
        None => fallback,
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| {
        Error::format(
            path.display().to_string(),
            ekclip_core::Position::Line {
                line: e.line(),
                column: Some(e.column()),
            },
            e.to_string(),
        )
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl(path: &Path, lines: &[Value]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn load_registry(path: Option<&Path>) -> Result<CategoryRegistry> {
    match path {
        Some(p) => CategoryRegistry::from_json(&read_text(p)?),
        None => Ok(CategoryRegistry::builtin()),
    }
}

pub fn load_bank(path: Option<&Path>) -> Result<PromptBank> {
    match path {
        Some(p) => PromptBank::load(p),
        None => Ok(PromptBank::builtin()),
    }
}

pub struct Loaded {
    pub registry: CategoryRegistry,
    pub bank: PromptBank,
    pub records: Vec<TripletRecord>,
    pub images: Array2<f64>,
}

pub fn load_data(args: &DataArgs) -> Result<Loaded> {
    let registry = load_registry(args.registry.as_deref())?;
    let bank = load_bank(args.prompt_bank.as_deref())?;
    let images = read_embeddings(&args.image_emb)?;
    let records = read_manifest(&args.manifest, &registry, Some(images.nrows()))?;
    if records.is_empty() {
        return Err(Error::Validation(format!("{} has no records", args.manifest.display())));
    }
    Ok(Loaded {
        registry,
        bank,
        records,
        images,
    })
}

/// The text featurizer: a lookup table if given, else the surrogate stored
/// with the model, else a fresh surrogate from the flags.
pub fn text_featurizer(args: &TextArgs, stored: Option<SurrogateFeaturizer>) -> Result<(Box<dyn TextFeaturizer>, Option<SurrogateFeaturizer>)> {
    match (&args.text_emb, &args.text_index) {
        (Some(emb), Some(index)) => {
            let prompts: Vec<String> = read_json(index)?;
            let rows = read_embeddings(emb)?;
            Ok((Box::new(LookupFeaturizer::from_rows(&prompts, &rows)?), None))
        }
        _ => {
            let s = match stored {
                Some(s) => s,
                None => SurrogateFeaturizer::new(args.text_dim, args.text_seed)?,
            };
            Ok((Box::new(s), Some(s)))
        }
    }
}

/// Classes from a comma-separated list, or the distinct manifest labels in registry order.
pub fn resolve_classes(registry: &CategoryRegistry, list: Option<&str>, records: &[TripletRecord]) -> Result<Vec<Category>> {
    match list {
        Some(list) => {
            let mut seen = HashSet::new();
            let mut out = Vec::new();
            for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let c = registry.resolve_or_err(name)?;
                if !seen.insert(c.id) {
                    return Err(Error::Config(format!("class `{name}` listed twice")));
                }
                out.push(c.clone());
            }
            if out.is_empty() {
                return Err(Error::Config("empty class list".into()));
            }
            Ok(out)
        }
        None => {
            let present: HashSet<usize> = records.iter().map(|r| r.label).collect();
            Ok(registry
                .categories()
                .iter()
                .filter(|c| present.contains(&c.id))
                .cloned()
                .collect())
        }
    }
}

pub fn model_summary(file: &ModelFile) -> String {
    format!(
        "joint dim {}, vision {} -> {}, text {} -> {}, tau {:.4}",
        file.model.d_joint(),
        file.model.vision_head.d_in(),
        file.model.vision_head.d_out(),
        file.model.text_head.d_in(),
        file.model.text_head.d_out(),
        file.model.tau()
    )
}

pub fn prediction_line(id: &str, classes: &[String], class: usize, probabilities: &Array1<f64>, fold: Option<usize>) -> Value {
    let mut probs = Map::new();
    for (name, p) in classes.iter().zip(probabilities) {
        probs.insert(name.clone(), json!(p));
    }
    let mut line = Map::new();
    line.insert("id".into(), json!(id));
    line.insert("class".into(), json!(classes[class]));
    line.insert("probabilities".into(), Value::Object(probs));
    if let Some(f) = fold {
        line.insert("fold".into(), json!(f));
    }
    Value::Object(line)
}

/// First record per sample id, in manifest order.
pub fn unique_samples(records: &[TripletRecord]) -> Vec<&TripletRecord> {
    let mut seen = HashSet::new();
    records.iter().filter(|r| seen.insert(r.sample_id.as_str())).collect()
}
