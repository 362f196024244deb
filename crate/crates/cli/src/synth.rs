use std::path::PathBuf;

use clap::Args;
use ekclip_core::evalkit::{synth_dataset, synth_prompts};
use ekclip_core::io::{write_embeddings, write_manifest};
use ekclip_core::{CategoryRegistry, Error, Result};
use serde_json::json;

use crate::common::write_text;
use crate::GlobalArgs;

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Distance of each class center from the origin.
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    /// Per-coordinate standard deviation of image features.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 3)]
    prompts_per_class: usize,
    /// Expected norm of the noise added to each prompt's text feature.
    #[arg(long, default_value_t = 0.3)]
    prompt_noise: f64,
    /// Directory receiving images.emb, manifest.jsonl, registry.json,
    /// prompt_bank.json, text.emb and text_index.json.
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn run(global: &GlobalArgs, args: SynthArgs) -> Result<()> {
    let seed = global.seed.unwrap_or(0);
    let ds = synth_dataset(args.classes, args.per_class, args.dim, args.separation, args.noise, seed)?;
    let sp = synth_prompts(&ds, args.prompts_per_class, args.prompt_noise, seed)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let dir = &args.out_dir;

    let registry = CategoryRegistry::from_pairs(ds.data.categories.iter().map(|c| (c.abbreviation.clone(), c.name.clone())))?;
    let entries: Vec<_> = ds
        .data
        .categories
        .iter()
        .map(|c| json!({"abbreviation": c.abbreviation, "name": c.name}))
        .collect();
    write_text(
        &dir.join("registry.json"),
        &serde_json::to_string_pretty(&json!({ "categories": entries })).expect("registry serializes"),
    )?;
    let all: Vec<usize> = (0..ds.data.len()).collect();
    write_manifest(dir.join("manifest.jsonl"), &ds.data.records(&all), &registry)?;
    write_embeddings(dir.join("images.emb"), &ds.data.features)?;
    write_text(&dir.join("prompt_bank.json"), &sp.bank.to_json())?;
    let (prompts, rows) = sp.featurizer.to_rows();
    write_embeddings(dir.join("text.emb"), &rows)?;
    write_text(
        &dir.join("text_index.json"),
        &serde_json::to_string_pretty(&prompts).expect("prompt list serializes"),
    )?;
    eprintln!(
        "wrote {} samples over {} classes and {} prompts to {}",
        ds.data.len(),
        args.classes,
        prompts.len(),
        dir.display()
    );
    Ok(())
}
