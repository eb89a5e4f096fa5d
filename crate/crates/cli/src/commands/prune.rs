//! `prune`: the iterative prune/retrain session with per-iteration
//! checkpoints, an append-only iteration log, and crash-safe resume.

use std::path::PathBuf;

use prunefire_core::model::ModelGraph;
use prunefire_core::pruning::{prune_session, PruneHooks, PruneIteration};
use prunefire_core::rng::Rng;

use crate::commands::{verification_summaries, STREAM_PRUNE, STREAM_SPLIT};
use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::runio::{
    append_line, load_checkpoint, load_dataset_dir, prune_log_header, prune_log_row,
    read_prune_state, save_checkpoint, test_image_tensors, train_dataset, write_prune_state,
    PruneState,
};

pub fn eval_column_names(per_template: &[usize]) -> Vec<String> {
    per_template
        .iter()
        .map(|pt| format!("eer_{}v{}_pooled", pt, pt))
        .collect()
}

pub fn iter_checkpoint_path(out: &std::path::Path, iteration: usize) -> PathBuf {
    out.join("prune").join(format!("iter_{:03}.bin", iteration))
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let data = load_dataset_dir(&cfg.data_dir)?;
    let dataset = train_dataset(&data)?.filter_min_images(cfg.train.min_images_per_class);
    let mut split_rng = Rng::with_stream(cfg.seed, STREAM_SPLIT);
    let (train_idx, val_idx) = dataset.split_train_val(cfg.train.val_fraction, &mut split_rng)?;

    let prune_dir = cfg.out_dir.join("prune");
    std::fs::create_dir_all(&prune_dir)?;
    let state_path = prune_dir.join("state.json");
    let log_path = prune_dir.join("iterations.csv");
    let extra_columns = eval_column_names(&cfg.per_template);

    let mut schedule = cfg.prune.clone();
    schedule.retrain = Some(cfg.retrain_config());

    // resume from the last completed iteration when state exists
    let (mut model, start_iteration, original_filters, mut rng) =
        match read_prune_state(&state_path)? {
            Some(state) if state.completed_iterations > 0 => {
                let ckpt = iter_checkpoint_path(&cfg.out_dir, state.completed_iterations);
                let model = load_checkpoint(&ckpt)?;
                println!(
                    "prune: resuming after iteration {} from {}",
                    state.completed_iterations,
                    ckpt.display()
                );
                (
                    model,
                    state.completed_iterations,
                    state.original_filters,
                    Rng::from_state_words(state.rng_state.0, state.rng_state.1),
                )
            }
            _ => {
                let ckpt = cfg
                    .checkpoint
                    .clone()
                    .unwrap_or_else(|| cfg.out_dir.join("model.bin"));
                let model = load_checkpoint(&ckpt)?;
                let original = model.count_stats().total_filters;
                // fresh session: drop any log left by an aborted run
                crate::runio::atomic_write(&log_path, prune_log_header(&extra_columns).as_bytes())?;
                (model, 0, original, Rng::with_stream(cfg.seed, STREAM_PRUNE))
            }
        };

    let (_, test_tensors) = test_image_tensors(&data, cfg.train.norm)?;
    let planned = schedule.planned_iterations();
    let eval_due = |iteration: usize| {
        cfg.eval_every > 0 && (iteration.is_multiple_of(cfg.eval_every) || iteration == planned)
    };

    let out_dir = cfg.out_dir.clone();
    let per_template = cfg.per_template.clone();
    let window = cfg.impostor_window;
    let mut eval_hook = |model: &ModelGraph,
                         row: &PruneIteration|
     -> std::result::Result<Vec<(String, f64)>, String> {
        if !eval_due(row.iteration) {
            return Ok(Vec::new());
        }
        let summaries = verification_summaries(model, &test_tensors, window, &per_template)
            .map_err(|e| e.to_string())?;
        Ok(per_template
            .iter()
            .zip(&summaries)
            .map(|(pt, s)| (format!("eer_{}v{}_pooled", pt, pt), s.pooled.eer))
            .collect())
    };
    let log_path_hook = log_path.clone();
    let extra_hook = extra_columns.clone();
    let mut after =
        |model: &ModelGraph, row: &PruneIteration, rng: &Rng| -> std::result::Result<(), String> {
            save_checkpoint(model, &iter_checkpoint_path(&out_dir, row.iteration))
                .map_err(|e| e.to_string())?;
            append_line(&log_path_hook, &prune_log_row(row, &extra_hook))
                .map_err(|e| e.to_string())?;
            let (s, inc) = rng.state_words();
            write_prune_state(
                &PruneState {
                    completed_iterations: row.iteration,
                    original_filters,
                    rng_state: (s, inc),
                },
                &state_path,
            )
            .map_err(|e| e.to_string())?;
            println!(
                "iter {:>3} ({:>4.1}%) filters {} learnables {} embed {} loss {:.4} acc {:.3}{}",
                row.iteration,
                row.pruned_fraction * 100.0,
                row.filters,
                row.learnables,
                row.embedding_dim,
                row.minibatch_loss,
                row.val_accuracy,
                if row.retrained { " [retrained]" } else { "" }
            );
            Ok(())
        };
    let mut hooks = PruneHooks {
        eval: Some(&mut eval_hook),
        after_iteration: Some(&mut after),
    };

    let log = prune_session(
        &mut model,
        &dataset,
        &train_idx,
        &val_idx,
        &schedule,
        original_filters,
        start_iteration,
        &mut rng,
        &mut hooks,
    )?;

    save_checkpoint(&model, &prune_dir.join("final.bin"))?;
    if log.exhausted {
        println!("prune: stopped early, eligible filters exhausted");
    }
    println!(
        "prune: {} iterations logged to {}",
        log.iterations.len(),
        log_path.display()
    );
    let expected =
        original_filters - log.victims_per_iteration * (start_iteration + log.iterations.len());
    if !log.exhausted && model.count_stats().total_filters != expected {
        return Err(AppError::Internal(
            "filter accounting mismatch after session".into(),
        ));
    }
    Ok(())
}
