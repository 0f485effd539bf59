use std::fs;
use std::path::Path;

use splitq_core::eval::{evaluate, run_ablation, weight_error_deciles};
use splitq_core::io::{load_batch, load_matrix, save_batch, save_matrix};
use splitq_core::{
    build_partition, calibrate as calibrate_layer, generate, generate_weight, stability_report,
    ActivationBatch, ChannelPartition, ModalityTag, SplitQLayer,
};

use crate::config::RunConfig;
use crate::error::CliError;

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<fs::File>, CliError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(header)?;
    Ok(w)
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    announce(path);
    Ok(())
}

fn partition_for(cfg: &RunConfig, batch: &ActivationBatch) -> Result<ChannelPartition, CliError> {
    if cfg.mocd {
        Ok(build_partition(batch, &cfg.mocd())?)
    } else {
        Ok(ChannelPartition::trivial(batch.channels()))
    }
}

pub fn gen(cfg: &RunConfig) -> Result<(), CliError> {
    let batch = generate(&cfg.synth())?;
    let w = generate_weight(&cfg.weight())?;
    fs::create_dir_all(&cfg.out)?;
    let (a, b) = (cfg.activations_path(), cfg.weights_path());
    save_batch(&a, &batch)?;
    announce(&a);
    save_matrix(&b, &w)?;
    announce(&b);
    Ok(())
}

pub fn select(cfg: &RunConfig) -> Result<(), CliError> {
    let batch = load_batch(cfg.activations_path())?;
    let partition = partition_for(cfg, &batch)?;
    fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join("partition.json"), &partition)?;

    let path = cfg.out.join("channel_stats.csv");
    let mut w = csv_writer(
        &path,
        &["seed", "channel", "text_max_abs", "vision_max_abs", "assignment"],
    )?;
    let peak = |tag| {
        let rows = batch.rows_with(tag);
        let x = batch.data().select_rows(&rows);
        (0..x.cols())
            .map(|j| x.column(j).iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect::<Vec<_>>()
    };
    let (text, vision) = (peak(ModalityTag::Text), peak(ModalityTag::Vision));
    for c in 0..batch.channels() {
        let assignment = if partition.text().contains(&c) {
            "text"
        } else if partition.vision().contains(&c) {
            "vision"
        } else {
            "main"
        };
        w.write_record([
            cfg.seed.to_string(),
            c.to_string(),
            text[c].to_string(),
            vision[c].to_string(),
            assignment.to_string(),
        ])?;
    }
    w.flush()?;
    announce(&path);
    Ok(())
}

pub fn calibrate(cfg: &RunConfig) -> Result<(), CliError> {
    let batch = load_batch(cfg.activations_path())?;
    let w = load_matrix(cfg.weights_path())?;
    let partition = partition_for(cfg, &batch)?;
    let layer = SplitQLayer::build(&w, &batch, partition, &cfg.layer()?)?;
    let (layer, trace) = calibrate_layer(&layer, &batch, &cfg.calib())?;
    fs::create_dir_all(&cfg.out)?;
    let dir = cfg.layer_path();
    layer.save(&dir)?;
    announce(&dir);

    let path = cfg.out.join("loss_trace.csv");
    let mut out = csv_writer(&path, &["seed", "step", "loss", "best"])?;
    for (step, loss) in trace.losses.iter().enumerate() {
        out.write_record([
            cfg.seed.to_string(),
            step.to_string(),
            loss.to_string(),
            u8::from(step == trace.best_step).to_string(),
        ])?;
    }
    out.flush()?;
    announce(&path);
    println!(
        "initial loss {} best loss {} at step {}",
        trace.initial_loss(),
        trace.best_loss,
        trace.best_step
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let batch = load_batch(cfg.activations_path())?;
    let layer = SplitQLayer::load(cfg.layer_path())?;
    let report = evaluate(&layer, &batch)?;
    fs::create_dir_all(&cfg.out)?;

    let path = cfg.out.join("report.csv");
    let mut w = csv_writer(&path, &["seed", "metric", "value"])?;
    for (name, v) in [
        ("mse", report.mse),
        ("mse_text", report.mse_text),
        ("mse_vision", report.mse_vision),
    ] {
        w.write_record([cfg.seed.to_string(), name.to_string(), v.to_string()])?;
    }
    w.flush()?;
    announce(&path);

    if layer.d_in() >= 10 {
        let path = cfg.out.join("weight_error_deciles.csv");
        let mut w = csv_writer(&path, &["seed", "decile", "mean_abs_error"])?;
        for (k, v) in weight_error_deciles(&layer)?.iter().enumerate() {
            w.write_record([cfg.seed.to_string(), (k + 1).to_string(), v.to_string()])?;
        }
        w.flush()?;
        announce(&path);
    }

    if cfg.ablation {
        let weight = load_matrix(cfg.weights_path())?;
        let rows = run_ablation(&weight, &batch, &cfg.mocd(), &cfg.layer()?, &cfg.calib())?;
        let path = cfg.out.join("ablation.csv");
        let mut w = csv_writer(&path, &["seed", "variant", "initial_mse", "mse"])?;
        for r in rows {
            w.write_record([
                cfg.seed.to_string(),
                r.variant.name().to_string(),
                r.initial_mse.to_string(),
                r.mse.to_string(),
            ])?;
        }
        w.flush()?;
        announce(&path);
    }
    Ok(())
}

pub fn stability(cfg: &RunConfig) -> Result<(), CliError> {
    let batch = load_batch(cfg.activations_path())?;
    let s = &cfg.stability;
    let reference = s.reference_size.unwrap_or(batch.tokens());
    let rows = stability_report(
        &batch,
        &cfg.mocd(),
        &s.subset_sizes,
        reference,
        s.trials,
        cfg.seed,
    )?;
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("stability.csv");
    let mut w = csv_writer(&path, &["seed", "subset_size", "mean_jaccard", "std"])?;
    for r in rows {
        w.write_record([
            cfg.seed.to_string(),
            r.subset_size.to_string(),
            r.mean_jaccard.to_string(),
            r.std.to_string(),
        ])?;
    }
    w.flush()?;
    announce(&path);
    Ok(())
}
