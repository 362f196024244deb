use std::path::PathBuf;

use clap::Args;
use ekclip_core::io::{save_model, ModelFile};
use ekclip_core::trainer::{train, TrainConfig, TrainData};
use ekclip_core::{ModelState, Result};
use serde_json::Value;

use crate::common::{load_data, model_summary, precision, read_json, text_featurizer, write_jsonl};
use crate::{DataArgs, GlobalArgs, TextArgs};

#[derive(Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    text: TextArgs,
    /// Training configuration JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    joint_dim: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Epoch log (JSON lines); printed to stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
}

pub fn run(global: &GlobalArgs, args: PretrainArgs) -> Result<()> {
    let mut config: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = global.seed {
        config.seed = s;
    }
    config.precision = precision(global, config.precision);
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    if let Some(lr) = args.lr {
        config.base_lr = lr;
    }
    config.validate()?;

    let data = load_data(&args.data)?;
    let (featurizer, surrogate) = text_featurizer(&args.text, None)?;
    let init = ModelState::init(data.images.ncols(), featurizer.dim(), args.joint_dim, config.seed);
    let outcome = train(
        &TrainData {
            records: &data.records,
            image_features: &data.images,
            categories: data.registry.categories(),
            bank: &data.bank,
            featurizer: featurizer.as_ref(),
        },
        &config,
        init,
    )?;

    let file = ModelFile {
        model: outcome.model,
        precision: config.precision,
        text_featurizer: surrogate,
    };
    save_model(&args.out, &file)?;
    let lines: Vec<Value> = outcome
        .trace
        .iter()
        .map(|l| serde_json::to_value(l).expect("epoch log serializes"))
        .collect();
    match &args.log {
        Some(p) => write_jsonl(p, &lines)?,
        None => {
            for l in &lines {
                println!("{l}");
            }
        }
    }
    eprintln!(
        "trained {} records for {} epochs; {}",
        data.records.len(),
        config.epochs,
        model_summary(&file)
    );
    Ok(())
}
