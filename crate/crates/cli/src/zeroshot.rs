use std::path::PathBuf;

use clap::Args;
use ekclip_core::io::load_model;
use ekclip_core::zeroshot::{class_prototypes, is_normal_category, predict_batch, PromptMode};
use ekclip_core::{Error, Result};
use ndarray::Axis;
use serde_json::Value;

use crate::common::{load_data, prediction_line, resolve_classes, text_featurizer, unique_samples, write_jsonl};
use crate::{DataArgs, GlobalArgs, TextArgs};

#[derive(Args)]
pub struct ZeroshotArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    text: TextArgs,
    #[arg(long)]
    model: PathBuf,
    /// naive, ek or anomaly.
    #[arg(long, default_value = "ek")]
    mode: PromptMode,
    /// Comma-separated class names or abbreviations (default: labels in the manifest).
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(_global: &GlobalArgs, args: ZeroshotArgs) -> Result<()> {
    let file = load_model(&args.model, None)?;
    let data = load_data(&args.data)?;
    let (featurizer, _) = text_featurizer(&args.text, file.text_featurizer)?;
    if featurizer.dim() != file.model.text_head.d_in() {
        return Err(Error::shape(format!(
            "text features have dimension {}, model expects {}",
            featurizer.dim(),
            file.model.text_head.d_in()
        )));
    }
    let classes = resolve_classes(&data.registry, args.classes.as_deref(), &data.records)?;
    let prototypes = class_prototypes(&data.bank, featurizer.as_ref(), &file.model, &classes, args.mode)?;
    let names: Vec<String> = prototypes.iter().map(|p| p.category.name.clone()).collect();

    let samples = unique_samples(&data.records);
    let rows: Vec<usize> = samples.iter().map(|r| r.image_feature_index).collect();
    let preds = predict_batch(&file.model, &data.images.select(Axis(0), &rows), &prototypes)?;
    let lines: Vec<Value> = samples
        .iter()
        .zip(&preds)
        .map(|(r, p)| prediction_line(&r.sample_id, &names, p.class, &p.probabilities, None))
        .collect();
    write_jsonl(&args.out, &lines)?;

    let truth = |label: usize| -> Option<usize> {
        match args.mode {
            PromptMode::Anomaly => data.registry.get(label).map(|c| usize::from(!is_normal_category(c))),
            _ => classes.iter().position(|c| c.id == label),
        }
    };
    let scored: Vec<bool> = samples
        .iter()
        .zip(&preds)
        .filter_map(|(r, p)| truth(r.label).map(|t| t == p.class))
        .collect();
    if !scored.is_empty() {
        let hits = scored.iter().filter(|&&h| h).count();
        eprintln!(
            "{} predictions; accuracy {:.4} on {} labeled samples",
            preds.len(),
            hits as f64 / scored.len() as f64,
            scored.len()
        );
    }
    Ok(())
}
