//! `report`: render the run's CSV logs as SVG line charts.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::runio::atomic_write;
use crate::svg::{panel_grid, Chart, Series, PALETTE};

/// Minimal CSV table: header names + f64 cells (empty cells become NaN).
struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn load(path: &Path) -> Result<Table> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Data(format!("cannot read {}: {}", path.display(), e)))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| AppError::Data(format!("{} is empty", path.display())))?;
        let columns: Vec<String> = header.split(',').map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            rows.push(
                line.split(',')
                    .map(|cell| cell.trim().parse::<f64>().unwrap_or(f64::NAN))
                    .collect(),
            );
        }
        Ok(Table { columns, rows })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// (x, y) points for finite cells of the named columns.
    fn series(&self, x: &str, y: &str) -> Vec<(f64, f64)> {
        let (Some(xi), Some(yi)) = (self.column(x), self.column(y)) else {
            return Vec::new();
        };
        self.rows
            .iter()
            .filter(|r| r[xi].is_finite() && r[yi].is_finite())
            .map(|r| (r[xi], r[yi]))
            .collect()
    }
}

fn chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: Vec<(String, Vec<(f64, f64)>)>,
) -> Chart {
    Chart {
        title: title.into(),
        x_label: x_label.into(),
        y_label: y_label.into(),
        series: series
            .into_iter()
            .enumerate()
            .map(|(i, (label, points))| Series {
                label,
                color: PALETTE[i % PALETTE.len()],
                points,
            })
            .collect(),
    }
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let report_dir = cfg.out_dir.join("report");
    let history_path = cfg.out_dir.join("history.csv");
    let prune_path = cfg.out_dir.join("prune").join("iterations.csv");
    let mut wrote = 0usize;

    if history_path.exists() {
        let t = Table::load(&history_path)?;
        let svg = panel_grid(
            &[
                chart(
                    "Training loss",
                    "epoch",
                    "cross-entropy",
                    vec![
                        ("train".into(), t.series("epoch", "train_loss")),
                        ("validation".into(), t.series("epoch", "val_loss")),
                    ],
                ),
                chart(
                    "Validation accuracy",
                    "epoch",
                    "accuracy",
                    vec![("validation".into(), t.series("epoch", "val_acc"))],
                ),
            ],
            2,
        );
        atomic_write(&report_dir.join("training.svg"), svg.as_bytes())?;
        wrote += 1;
    }

    if prune_path.exists() {
        let t = Table::load(&prune_path)?;
        let pct = |points: Vec<(f64, f64)>| -> Vec<(f64, f64)> {
            points.into_iter().map(|(x, y)| (x * 100.0, y)).collect()
        };
        let svg = panel_grid(
            &[
                chart(
                    "Mini-batch loss while pruning",
                    "filters pruned (%)",
                    "loss",
                    vec![(
                        "scoring loss".into(),
                        pct(t.series("pruned_fraction", "minibatch_loss")),
                    )],
                ),
                chart(
                    "Validation accuracy while pruning",
                    "filters pruned (%)",
                    "accuracy",
                    vec![(
                        "validation".into(),
                        pct(t.series("pruned_fraction", "val_accuracy")),
                    )],
                ),
            ],
            2,
        );
        atomic_write(&report_dir.join("prune_loss_accuracy.svg"), svg.as_bytes())?;

        let svg = panel_grid(
            &[
                chart(
                    "Filters",
                    "filters pruned (%)",
                    "count",
                    vec![(
                        "filters".into(),
                        pct(t.series("pruned_fraction", "filters")),
                    )],
                ),
                chart(
                    "Learnables",
                    "filters pruned (%)",
                    "count",
                    vec![(
                        "learnables".into(),
                        pct(t.series("pruned_fraction", "learnables")),
                    )],
                ),
                chart(
                    "Embedding size",
                    "filters pruned (%)",
                    "dimensions",
                    vec![(
                        "embedding".into(),
                        pct(t.series("pruned_fraction", "embedding_dim")),
                    )],
                ),
                chart(
                    "Model size",
                    "filters pruned (%)",
                    "bytes",
                    vec![(
                        "checkpoint bytes".into(),
                        pct(t.series("pruned_fraction", "model_bytes")),
                    )],
                ),
            ],
            2,
        );
        atomic_write(&report_dir.join("prune_stats.svg"), svg.as_bytes())?;

        let eer_columns: Vec<&String> =
            t.columns.iter().filter(|c| c.starts_with("eer_")).collect();
        if !eer_columns.is_empty() {
            let series = eer_columns
                .iter()
                .map(|c| ((*c).clone(), pct(t.series("pruned_fraction", c))))
                .collect();
            let svg = panel_grid(
                &[chart(
                    "Verification EER while pruning",
                    "filters pruned (%)",
                    "EER",
                    series,
                )],
                1,
            );
            atomic_write(&report_dir.join("prune_eer.svg"), svg.as_bytes())?;
        }
        wrote += 1;
    }

    if wrote == 0 {
        return Err(AppError::Data(format!(
            "nothing to report: neither {} nor {} exists",
            history_path.display(),
            prune_path.display()
        )));
    }
    println!("report: SVG charts under {}", report_dir.display());
    Ok(())
}
