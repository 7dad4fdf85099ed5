mod args;
mod config_file;

use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use log::info;
use yolocam_core::pipeline::{cmd_batch, cmd_explain, cmd_renormalize, BatchOptions, Model};

use args::{BatchArgs, Cli, Command, ExplainArgs, ModelArgs, RenormalizeArgs};

fn load_model(m: &ModelArgs) -> Result<Model> {
    let model = Model::load(&m.model, &m.weights)
        .with_context(|| format!("cannot load model {} with weights {}", m.model.display(), m.weights.display()))?;
    info!("loaded {} layers, {} classes", model.spec.layers.len(), model.num_classes());
    Ok(model)
}

fn explain(args: ExplainArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let report = cmd_explain(&model, &args.image, &args.out, &args.flags.options())?;
    for d in &report.detections {
        let b = &d.detection.bbox;
        println!(
            "d{:03} {} conf {:.3} box [{:.1}, {:.1}, {:.1}, {:.1}]",
            d.index, d.class_name, d.detection.confidence, b.x_min, b.y_min, b.x_max, b.y_max
        );
    }
    println!(
        "{} detections, {} overlays in {}",
        report.detections.len(),
        report.png_count(),
        args.out.display()
    );
    Ok(())
}

fn batch(args: BatchArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let workers = args
        .workers
        .map(usize::from)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let opts = BatchOptions {
        explain: args.flags.options(),
        workers,
    };
    let summary = cmd_batch(&model, &args.images, &args.out, &opts)?;
    for image in &summary.images {
        println!("{image}");
    }
    let timing = summary
        .mean_seconds_per_explanation()
        .map_or_else(String::new, |s| format!(", {:.1} ms per explanation", s * 1e3));
    println!(
        "{} images ({} failed), {} records{timing}; manifest {}",
        summary.images.len(),
        summary.failed(),
        summary.manifest.records.len(),
        summary.manifest_path.display()
    );
    Ok(())
}

fn renormalize(args: RenormalizeArgs) -> Result<()> {
    let outputs = cmd_renormalize(&args.manifest, args.scope, &args.out, &args.style.style(), args.separate_targets)?;
    println!("{} overlays at {} scope in {}", outputs.len(), args.scope, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let argv = match config_file::expand_args(std::env::args_os().collect()) {
        Ok(argv) => argv,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Explain(a) => explain(a),
        Command::Batch(a) => batch(a),
        Command::Renormalize(a) => renormalize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
