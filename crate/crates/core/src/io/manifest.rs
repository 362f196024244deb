//! JSON-lines dataset manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Position, Result};
use crate::prompt_bank::CategoryRegistry;

/// One (sample, image feature, label, optional text) entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub sample_id: String,
    pub image_feature_index: usize,
    pub label: usize,
    pub raw_text: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    label: Option<String>,
    labels: Option<Vec<String>>,
    embedding_index: u64,
    text: Option<String>,
}

/// Parses manifest text. Multi-label lines expand to one record per label.
pub fn parse_manifest(
    text: &str,
    context: &str,
    registry: &CategoryRegistry,
    embedding_rows: Option<usize>,
) -> Result<Vec<TripletRecord>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let at = |column: Option<usize>, msg: String| {
            Error::format(context, Position::Line { line: lineno, column }, msg)
        };
        let parsed: ManifestLine = serde_json::from_str(line).map_err(|e| {
            let msg = e.to_string();
            let msg = msg.rfind(" at line ").map(|i| msg[..i].to_string()).unwrap_or(msg);
            at(Some(e.column()), msg)
        })?;
        let labels: Vec<String> = match (parsed.label, parsed.labels) {
            (Some(l), None) => vec![l],
            (None, Some(ls)) if !ls.is_empty() => ls,
            (None, Some(_)) => return Err(at(None, "empty \"labels\" list".into())),
            (Some(_), Some(_)) => return Err(at(None, "both \"label\" and \"labels\" given".into())),
            (None, None) => return Err(at(None, "missing \"label\" or \"labels\"".into())),
        };
        let index = usize::try_from(parsed.embedding_index)
            .map_err(|_| at(None, format!("embedding_index {} out of range", parsed.embedding_index)))?;
        if let Some(rows) = embedding_rows {
            if index >= rows {
                return Err(at(
                    None,
                    format!("embedding_index {index} out of range for {rows} embedding rows"),
                ));
            }
        }
        for label in labels {
            let category = registry
                .resolve(&label)
                .ok_or_else(|| at(None, format!("unknown label `{label}`")))?;
            out.push(TripletRecord {
                sample_id: parsed.id.clone(),
                image_feature_index: index,
                label: category.id,
                raw_text: parsed.text.clone(),
            });
        }
    }
    Ok(out)
}

pub fn read_manifest(
    path: impl AsRef<Path>,
    registry: &CategoryRegistry,
    embedding_rows: Option<usize>,
) -> Result<Vec<TripletRecord>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let context = path.display().to_string();
    let text = std::str::from_utf8(&bytes).map_err(|e| {
        let offset = e.valid_up_to();
        let line = bytes[..offset].iter().filter(|&&b| b == b'\n').count() + 1;
        Error::format(&context, Position::Line { line, column: None }, "invalid UTF-8")
    })?;
    parse_manifest(text, &context, registry, embedding_rows)
}

/// Writes records back as JSON lines using registry abbreviations.
pub fn write_manifest(path: impl AsRef<Path>, records: &[TripletRecord], registry: &CategoryRegistry) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        let cat = registry
            .get(r.label)
            .ok_or_else(|| Error::Validation(format!("label id {} not in registry", r.label)))?;
        let mut obj = serde_json::Map::new();
        obj.insert("id".into(), r.sample_id.clone().into());
        obj.insert("label".into(), cat.abbreviation.clone().into());
        obj.insert("embedding_index".into(), r.image_feature_index.into());
        if let Some(t) = &r.raw_text {
            obj.insert("text".into(), t.clone().into());
        }
        out.push_str(&serde_json::Value::Object(obj).to_string());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<TripletRecord>> {
        parse_manifest(text, "test", &CategoryRegistry::builtin(), Some(10))
    }

    #[test]
    fn single_label_line() {
        let r = parse(r#"{"id":"a","label":"mildDR","embedding_index":0}"#).unwrap();
        let reg = CategoryRegistry::builtin();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].label, reg.resolve("mildDR").unwrap().id);
        assert_eq!(r[0].sample_id, "a");
        assert_eq!(r[0].raw_text, None);
    }

    #[test]
    fn multi_label_expansion() {
        let text = "{\"id\":\"b\",\"labels\":[\"MA\",\"HE\"],\"embedding_index\":3,\"text\":\"t\"}\n\n{\"id\":\"c\",\"label\":\"N\",\"embedding_index\":4}\n";
        let r = parse(text).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[0].sample_id, r[1].sample_id);
        assert_eq!(r[0].image_feature_index, 3);
        assert_eq!(r[1].image_feature_index, 3);
        assert_ne!(r[0].label, r[1].label);
        assert_eq!(r[0].raw_text.as_deref(), Some("t"));
    }

    #[test]
    fn unknown_label_names_line_and_label() {
        let text = "{\"id\":\"a\",\"label\":\"N\",\"embedding_index\":0}\n{\"id\":\"b\",\"label\":\"XYZ\",\"embedding_index\":1}";
        let e = parse(text).unwrap_err();
        assert_eq!(e.position(), Some(Position::Line { line: 2, column: None }));
        assert!(e.to_string().contains("XYZ"));
    }

    #[test]
    fn out_of_range_index() {
        let e = parse(r#"{"id":"a","label":"N","embedding_index":10}"#).unwrap_err();
        assert!(e.to_string().contains("out of range"));
        assert!(e.position().is_some());
    }

    #[test]
    fn malformed_json_has_column() {
        let e = parse("{\"id\": 3}").unwrap_err();
        assert!(matches!(e.position(), Some(Position::Line { line: 1, column: Some(_) })));
        assert!(parse(r#"{"id":"a","embedding_index":0}"#).is_err());
        assert!(parse(r#"{"id":"a","label":"N","labels":["N"],"embedding_index":0}"#).is_err());
    }
}
