use std::path::PathBuf;

use clap::Args;
use ekclip_core::contrastive::{gradient_check, RandomProblem};
use ekclip_core::{Error, Result};
use rayon::prelude::*;
use serde_json::json;

use crate::common::write_text;
use crate::GlobalArgs;

#[derive(Args)]
pub struct GradcheckArgs {
    /// Number of random configurations.
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 6)]
    max_batch: usize,
    #[arg(long, default_value_t = 8)]
    max_dim: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    /// Largest accepted per-coordinate relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Summary JSON; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(global: &GlobalArgs, args: GradcheckArgs) -> Result<()> {
    if args.trials == 0 || args.h.is_nan() || args.h <= 0.0 {
        return Err(Error::Config("trials and h must be positive".into()));
    }
    let seed = global.seed.unwrap_or(0);
    let reports: Vec<(u64, _)> = (0..args.trials as u64)
        .into_par_iter()
        .map(|t| {
            let p = RandomProblem::generate(seed.wrapping_add(t), args.max_batch, args.max_dim);
            gradient_check(&p.model, p.batch(), args.h).map(|r| (t, r))
        })
        .collect::<Result<_>>()?;
    let (worst_trial, worst) = reports
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .expect("at least one trial");
    let coordinates: usize = reports.iter().map(|r| r.1.coordinates).sum();
    let passed = worst.max_rel_error < args.tol;
    let summary = json!({
        "trials": args.trials,
        "coordinates": coordinates,
        "max_rel_error": worst.max_rel_error,
        "worst_trial": worst_trial,
        "worst_block": worst.worst_block,
        "tolerance": args.tol,
        "passed": passed,
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    match &args.out {
        Some(p) => write_text(p, &text)?,
        None => println!("{text}"),
    }
    if passed {
        Ok(())
    } else {
        Err(Error::numerical(format!(
            "relative gradient error {:.3e} exceeds {:.1e} (trial {worst_trial}, {})",
            worst.max_rel_error, args.tol, worst.worst_block
        )))
    }
}
