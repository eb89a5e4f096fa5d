//! `train`: fit the model on the manifest's train split.

use std::time::Instant;

use prunefire_core::rng::Rng;
use prunefire_core::train::train;

use crate::commands::{build_model, STREAM_SPLIT, STREAM_TRAIN};
use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::runio::{load_dataset_dir, save_checkpoint, train_dataset, write_history_csv};

pub fn run(cfg: &RunConfig) -> Result<()> {
    let data = load_dataset_dir(&cfg.data_dir)?;
    let dataset = train_dataset(&data)?.filter_min_images(cfg.train.min_images_per_class);
    if dataset.n_classes() < 2 {
        return Err(AppError::Data(format!(
            "{} classes left after the min-images filter; need at least 2",
            dataset.n_classes()
        )));
    }
    let mut split_rng = Rng::with_stream(cfg.seed, STREAM_SPLIT);
    let (train_idx, val_idx) = dataset.split_train_val(cfg.train.val_fraction, &mut split_rng)?;
    println!(
        "train: {} classes, {} train / {} val images",
        dataset.n_classes(),
        train_idx.len(),
        val_idx.len()
    );

    let mut model = build_model(cfg, dataset.n_classes())?;
    let started = Instant::now();
    let mut clock = move || started.elapsed().as_secs_f64();
    let report = train(
        &mut model,
        &dataset,
        &train_idx,
        &val_idx,
        &cfg.train,
        &mut Rng::with_stream(cfg.seed, STREAM_TRAIN),
        &mut clock,
    )?;
    for row in &report.history {
        println!(
            "epoch {:>3} lr {:<7} train {:.4} val {:.4} acc {:.3}",
            row.epoch, row.lr, row.train_loss, row.val_loss, row.val_acc
        );
    }
    for (epoch, lr) in &report.lr_steps {
        println!("lr stepped to {} after epoch {}", lr, epoch);
    }

    save_checkpoint(&model, &cfg.out_dir.join("model.bin"))?;
    write_history_csv(&report.history, &cfg.out_dir.join("history.csv"))?;
    let last = report.history.last();
    println!(
        "train: saved {} (final val acc {:.3})",
        cfg.out_dir.join("model.bin").display(),
        last.map(|r| r.val_acc).unwrap_or(0.0)
    );
    Ok(())
}
