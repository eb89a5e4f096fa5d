//! `eval`: descriptors, templates, protocol scores, and EER report for a
//! checkpoint. Re-running overwrites outputs deterministically.

use crate::commands::verification_summaries;
use crate::config::RunConfig;
use crate::error::Result;
use crate::runio::{
    atomic_write, eer_report_json, load_checkpoint, load_dataset_dir, scores_csv,
    test_image_tensors,
};

pub fn run(cfg: &RunConfig) -> Result<()> {
    let checkpoint = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("model.bin"));
    let model = load_checkpoint(&checkpoint)?;
    let data = load_dataset_dir(&cfg.data_dir)?;
    let (sets, tensors) = test_image_tensors(&data, cfg.train.norm)?;
    println!(
        "eval: {} test identities, {} images/pose, window {}",
        sets.identities.len(),
        sets.n_per_pose,
        cfg.impostor_window
    );

    let summaries =
        verification_summaries(&model, &tensors, cfg.impostor_window, &cfg.per_template)?;
    for s in &summaries {
        atomic_write(
            &cfg.out_dir
                .join(format!("scores_{}v{}.csv", s.per_template, s.per_template)),
            scores_csv(s, &sets.identities).as_bytes(),
        )?;
        println!(
            "  {}-{}: pooled EER {:.4} (threshold {:.4}, mean per-pair {:.4})",
            s.per_template, s.per_template, s.pooled.eer, s.pooled.threshold, s.mean_eer
        );
        for (a, b, eer, _, _, _) in &s.per_pair {
            println!("    {:>12}-{:<12} EER {:.4}", a.as_str(), b.as_str(), eer);
        }
    }
    atomic_write(
        &cfg.out_dir.join("eer.json"),
        eer_report_json(&summaries)?.as_bytes(),
    )?;
    println!("eval: wrote {}", cfg.out_dir.join("eer.json").display());
    Ok(())
}
