use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use clap::Args;
use ekclip_core::evalkit::{aggregate, evaluate_fold, FoldPredictions, Task};
use ekclip_core::io::read_manifest;
use ekclip_core::zeroshot::{is_normal_category, ANOMALY_PROMPTS};
use ekclip_core::{Category, Error, Position, Result};
use serde::Deserialize;
use serde_json::Map;

use crate::common::{load_registry, read_text, write_text};
use crate::GlobalArgs;

#[derive(Args)]
pub struct EvalArgs {
    /// Predictions JSON lines from zeroshot or adapt.
    #[arg(long)]
    predictions: PathBuf,
    /// Manifest holding the true labels.
    #[arg(long)]
    labels: PathBuf,
    /// multiclass, ordinal or binary.
    #[arg(long, default_value = "multiclass")]
    task: Task,
    /// Category registry JSON (default: the built-in registry).
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Deserialize)]
struct PredictionLine {
    id: String,
    class: String,
    probabilities: Map<String, serde_json::Value>,
    #[serde(default)]
    fold: usize,
}

pub fn run(_global: &GlobalArgs, args: EvalArgs) -> Result<()> {
    let registry = load_registry(args.registry.as_deref())?;
    let records = read_manifest(&args.labels, &registry, None)?;
    let mut truth: HashMap<&str, Vec<&Category>> = HashMap::new();
    for r in &records {
        let c = registry.get(r.label).expect("manifest labels come from the registry");
        truth.entry(r.sample_id.as_str()).or_default().push(c);
    }

    let context = args.predictions.display().to_string();
    let text = read_text(&args.predictions)?;
    let mut classes: Option<Vec<String>> = None;
    let mut folds: BTreeMap<usize, FoldPredictions> = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::format(&context, Position::Line { line: k + 1, column: None }, msg);
        let p: PredictionLine = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        let names: Vec<String> = p.probabilities.keys().cloned().collect();
        let classes = classes.get_or_insert_with(|| names.clone());
        if *classes != names {
            return Err(at("class list differs from the first line".into()));
        }
        let anomaly = classes.iter().map(String::as_str).eq(ANOMALY_PROMPTS);
        let predicted = classes
            .iter()
            .position(|c| *c == p.class)
            .ok_or_else(|| at(format!("class `{}` missing from probabilities", p.class)))?;
        let labels = truth
            .get(p.id.as_str())
            .ok_or_else(|| at(format!("sample `{}` has no label", p.id)))?;
        let actual = if anomaly {
            usize::from(labels.iter().any(|c| !is_normal_category(c)))
        } else {
            if labels.len() != 1 {
                return Err(at(format!("sample `{}` has {} labels", p.id, labels.len())));
            }
            classes
                .iter()
                .position(|c| *c == labels[0].name)
                .ok_or_else(|| at(format!("label `{}` is not a predicted class", labels[0].name)))?
        };
        let score = if classes.len() == 2 {
            p.probabilities[&classes[1]]
                .as_f64()
                .ok_or_else(|| at("non-numeric probability".into()))?
        } else {
            0.0
        };
        let fold = folds.entry(p.fold).or_default();
        fold.y_true.push(actual);
        fold.y_pred.push(predicted);
        fold.scores.get_or_insert_with(Vec::new).push(score);
    }
    let classes = classes.ok_or_else(|| Error::Validation(format!("{context} holds no predictions")))?;
    let categories = Category::vocabulary(&classes);
    let metrics = folds
        .values()
        .map(|f| evaluate_fold(args.task, &categories, f))
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(metrics)?;
    eprintln!(
        "ACA {:.4} ± {:.4} over {} fold(s)",
        report.mean.aca,
        report.std.aca,
        report.folds.len()
    );
    write_text(&args.out, &serde_json::to_string_pretty(&report).expect("report serializes"))
}
