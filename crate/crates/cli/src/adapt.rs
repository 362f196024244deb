use std::path::PathBuf;

use clap::Args;
use ekclip_core::adapters::{fit_adapter, AdapterConfig, AdapterContext, AdapterMethod, FeatureChoice, FittedAdapter};
use ekclip_core::evalkit::{evaluate_fold, fold_seed, make_splits, FoldPredictions, Regime, SplitPlan, Task};
use ekclip_core::io::load_model;
use ekclip_core::zeroshot::{class_prototypes, PromptMode};
use ekclip_core::{Error, Result};
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::common::{load_data, prediction_line, read_json, resolve_classes, text_featurizer, write_jsonl, write_text};
use crate::{DataArgs, GlobalArgs, TextArgs};

#[derive(Args)]
#[command(group(clap::ArgGroup::new("regime").required(true).args(["shots", "fraction"])))]
pub struct AdaptArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    text: TextArgs,
    #[arg(long)]
    model: PathBuf,
    /// lp, clip-adapter, tip-adapter, tip-adapter-f or zero-shot.
    #[arg(long)]
    method: AdapterMethod,
    /// Support samples per class.
    #[arg(long)]
    shots: Option<usize>,
    /// Support fraction of the train pool.
    #[arg(long)]
    fraction: Option<f64>,
    /// Linear-probe features: vision, proj or proj-norm.
    #[arg(long, default_value = "vision")]
    features: FeatureChoice,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Prompt mode for the class prototypes.
    #[arg(long, default_value = "ek")]
    mode: PromptMode,
    /// Comma-separated class names or abbreviations (default: labels in the manifest).
    #[arg(long)]
    classes: Option<String>,
    /// Adapter configuration JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fitted adapters, one per fold.
    #[arg(long)]
    out: PathBuf,
    /// Test-set predictions (JSON lines with a fold field).
    #[arg(long)]
    predictions: PathBuf,
}

#[derive(Serialize)]
struct FoldRecord {
    fold: usize,
    support_ids: Vec<String>,
    adapter: FittedAdapter,
}

#[derive(Serialize)]
struct AdapterFile {
    method: AdapterMethod,
    classes: Vec<String>,
    config: AdapterConfig,
    plan: SplitPlan,
    folds: Vec<FoldRecord>,
}

pub fn run(global: &GlobalArgs, args: AdaptArgs) -> Result<()> {
    let mut config: AdapterConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => AdapterConfig::default(),
    };
    config.features = args.features;
    let seed = global.seed.unwrap_or(config.fit.seed);
    let regime = match (args.shots, args.fraction) {
        (Some(k), None) => Regime::Shots(k),
        (None, Some(p)) => Regime::Fraction(p),
        _ => return Err(Error::Config("give exactly one of --shots and --fraction".into())),
    };
    let plan = SplitPlan {
        test_fraction: args.test_fraction,
        regime,
        folds: args.folds,
        seed,
    };

    let file = load_model(&args.model, None)?;
    let data = load_data(&args.data)?;
    let classes = resolve_classes(&data.registry, args.classes.as_deref(), &data.records)?;
    let records: Vec<_> = data
        .records
        .iter()
        .filter_map(|r| classes.iter().position(|c| c.id == r.label).map(|y| (r, y)))
        .collect();
    if records.is_empty() {
        return Err(Error::Validation("no manifest records carry the selected classes".into()));
    }
    let rows: Vec<usize> = records.iter().map(|(r, _)| r.image_feature_index).collect();
    let features: Array2<f64> = data.images.select(Axis(0), &rows);
    let labels: Vec<usize> = records.iter().map(|(_, y)| *y).collect();

    let prototypes = if args.method == AdapterMethod::Lp {
        Vec::new()
    } else {
        let (featurizer, _) = text_featurizer(&args.text, file.text_featurizer)?;
        class_prototypes(&data.bank, featurizer.as_ref(), &file.model, &classes, args.mode)?
    };
    let ctx = AdapterContext {
        model: &file.model,
        prototypes: &prototypes,
    };
    let names: Vec<String> = classes.iter().map(|c| c.name.clone()).collect();
    let folds = make_splits(&labels, &classes, &plan)?;

    let fitted: Vec<(FoldRecord, Vec<Value>, f64)> = folds
        .par_iter()
        .map(|f| {
            let mut cfg = config;
            cfg.fit.seed = fold_seed(seed, f.fold);
            let x = features.select(Axis(0), &f.support);
            let y: Vec<usize> = f.support.iter().map(|&i| labels[i]).collect();
            let adapter = fit_adapter(args.method, ctx, &x, &y, classes.len(), &cfg)?;
            let out = adapter.predict_rows(ctx, &features.select(Axis(0), &f.test))?;
            let lines = f
                .test
                .iter()
                .zip(&out)
                .map(|(&i, (c, p))| prediction_line(&records[i].0.sample_id, &names, *c, p, Some(f.fold)))
                .collect();
            let preds = FoldPredictions {
                y_true: f.test.iter().map(|&i| labels[i]).collect(),
                y_pred: out.iter().map(|o| o.0).collect(),
                scores: None,
            };
            let aca = evaluate_fold(Task::Multiclass, &classes, &preds)?.aca;
            let record = FoldRecord {
                fold: f.fold,
                support_ids: f.support.iter().map(|&i| records[i].0.sample_id.clone()).collect(),
                adapter,
            };
            Ok((record, lines, aca))
        })
        .collect::<Result<_>>()?;

    let mut lines = Vec::new();
    let mut fold_records = Vec::new();
    for (record, l, aca) in fitted {
        eprintln!("fold {}: {} support, test ACA {aca:.4}", record.fold, record.support_ids.len());
        lines.extend(l);
        fold_records.push(record);
    }
    write_jsonl(&args.predictions, &lines)?;
    let out = AdapterFile {
        method: args.method,
        classes: names,
        config,
        plan,
        folds: fold_records,
    };
    write_text(&args.out, &serde_json::to_string_pretty(&out).expect("adapter file serializes"))
}
