//! File IO: checkpoints with JSON topology sidecars, dataset loading,
//! CSV logs, EER reports, and prune-session resume state.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use prunefire_core::checkpoint;
use prunefire_core::data::{Dataset, Manifest, Normalization, PoseSets, Split, POSES};
use prunefire_core::eval::VerificationSummary;
use prunefire_core::image::{decode_netpbm, Image};
use prunefire_core::model::{ModelGraph, NodeKind};
use prunefire_core::pruning::PruneIteration;
use prunefire_core::tensor::Tensor;
use prunefire_core::train::EpochRecord;

use crate::error::{AppError, Result};

pub fn save_checkpoint(model: &ModelGraph, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, checkpoint::encode(model))?;
    fs::write(path.with_extension("json"), topology_json(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelGraph> {
    let bytes = fs::read(path)
        .map_err(|e| AppError::Io(format!("cannot read checkpoint {}: {}", path.display(), e)))?;
    Ok(checkpoint::decode(&bytes)?)
}

#[derive(Serialize)]
struct NodeJson {
    name: String,
    kind: &'static str,
    inputs: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attrs: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    tensor_shapes: Vec<Vec<usize>>,
}

/// Human-readable topology mirror written next to each checkpoint.
pub fn topology_json(model: &ModelGraph) -> Result<String> {
    let stats = model.count_stats();
    let nodes: Vec<NodeJson> = model
        .nodes
        .iter()
        .map(|n| {
            let (attrs, shapes) = match &n.kind {
                NodeKind::Input { channels } => {
                    (Some(serde_json::json!({ "channels": channels })), vec![])
                }
                NodeKind::Conv(c) => (
                    Some(serde_json::json!({
                        "filters": c.filters(),
                        "stride": c.stride,
                        "pad": c.pad,
                    })),
                    vec![c.weight.shape().to_vec(), c.bias.shape().to_vec()],
                ),
                NodeKind::BatchNorm(b) => (
                    Some(serde_json::json!({ "eps": b.eps, "momentum": b.momentum })),
                    vec![
                        b.gamma.shape().to_vec(),
                        b.beta.shape().to_vec(),
                        b.running_mean.shape().to_vec(),
                        b.running_var.shape().to_vec(),
                    ],
                ),
                NodeKind::MaxPool { kernel, stride } => (
                    Some(serde_json::json!({ "kernel": kernel, "stride": stride })),
                    vec![],
                ),
                NodeKind::Dense(d) => (
                    Some(serde_json::json!({ "out_features": d.weight.shape()[0] })),
                    vec![d.weight.shape().to_vec(), d.bias.shape().to_vec()],
                ),
                _ => (None, vec![]),
            };
            NodeJson {
                name: n.name.clone(),
                kind: n.kind.tag(),
                inputs: n.inputs.clone(),
                attrs,
                tensor_shapes: shapes,
            }
        })
        .collect();
    let doc = serde_json::json!({
        "format": "SQZP",
        "version": checkpoint::VERSION,
        "stats": {
            "total_filters": stats.total_filters,
            "learnables": stats.learnables,
            "embedding_dim": stats.embedding_dim,
            "model_bytes": stats.model_bytes,
        },
        "nodes": nodes,
    });
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Load the manifest plus every referenced image under the dataset root.
pub struct LoadedData {
    pub manifest: Manifest,
    pub images: Vec<Image>,
}

pub fn load_dataset_dir(dir: &Path) -> Result<LoadedData> {
    let manifest_path = dir.join("manifest.csv");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| AppError::Data(format!("cannot read {}: {}", manifest_path.display(), e)))?;
    let manifest = Manifest::parse(&text)?;
    let mut images = Vec::with_capacity(manifest.rows.len());
    for row in &manifest.rows {
        let path = dir.join(&row.path);
        let bytes = fs::read(&path)
            .map_err(|e| AppError::Data(format!("cannot read image {}: {}", path.display(), e)))?;
        let img = decode_netpbm(&bytes)
            .map_err(|e| AppError::Data(format!("{}: {}", path.display(), e)))?;
        images.push(img);
    }
    Ok(LoadedData { manifest, images })
}

/// Training dataset from the manifest's train split.
pub fn train_dataset(data: &LoadedData) -> Result<Dataset> {
    let items: Vec<(Image, String)> = data
        .manifest
        .split_rows(Split::Train)
        .map(|(i, row)| (data.images[i].clone(), row.identity.clone()))
        .collect();
    if items.is_empty() {
        return Err(AppError::Data("manifest has no train rows".into()));
    }
    Ok(Dataset::from_labeled(items)?)
}

/// Preprocessed tensors grouped per identity and pose.
pub type PoseTensorTable = Vec<[Vec<Tensor<f32>>; 3]>;

/// Preprocessed test-split tensors grouped per identity and pose,
/// identities in manifest order.
pub fn test_image_tensors(
    data: &LoadedData,
    norm: Normalization,
) -> Result<(PoseSets, PoseTensorTable)> {
    let sets = PoseSets::from_manifest(&data.manifest, Split::Test)?;
    let mut tensors = Vec::with_capacity(sets.identities.len());
    for per_pose in &sets.rows {
        let mut entry: [Vec<Tensor<f32>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for pose in POSES {
            for row in &per_pose[pose.index()] {
                entry[pose.index()].push(prunefire_core::data::eval_preprocess(
                    &data.images[*row],
                    norm,
                )?);
            }
        }
        tensors.push(entry);
    }
    Ok((sets, tensors))
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,lr,train_loss,val_loss,val_acc,wall_seconds\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.epoch, row.lr, row.train_loss, row.val_loss, row.val_acc, row.wall_seconds
        ));
    }
    atomic_write(path, out.as_bytes())
}

/// Iteration-log header: fixed stat columns then the eval-hook columns.
pub fn prune_log_header(extra_columns: &[String]) -> String {
    let mut header = String::from(
        "iteration,pruned_fraction,filters,learnables,embedding_dim,model_bytes,minibatch_loss,val_accuracy,retrained",
    );
    for c in extra_columns {
        header.push(',');
        header.push_str(c);
    }
    header.push('\n');
    header
}

pub fn prune_log_row(row: &PruneIteration, extra_columns: &[String]) -> String {
    let mut line = format!(
        "{},{},{},{},{},{},{},{},{}",
        row.iteration,
        row.pruned_fraction,
        row.filters,
        row.learnables,
        row.embedding_dim,
        row.model_bytes,
        row.minibatch_loss,
        row.val_accuracy,
        row.retrained as u8
    );
    for col in extra_columns {
        line.push(',');
        if let Some((_, v)) = row.extra.iter().find(|(name, _)| name == col) {
            line.push_str(&v.to_string());
        }
    }
    line.push('\n');
    line
}

/// Resume marker for an interrupted prune session.
#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct PruneState {
    pub completed_iterations: usize,
    pub original_filters: usize,
    pub rng_state: (u64, u64),
}

pub fn write_prune_state(state: &PruneState, path: &Path) -> Result<()> {
    atomic_write(path, serde_json::to_string_pretty(state)?.as_bytes())
}

pub fn read_prune_state(path: &Path) -> Result<Option<PruneState>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Scores CSV: pair_type,pose_a,pose_b,id_a,id_b,score,label
pub fn scores_csv(summary: &VerificationSummary, identities: &[String]) -> String {
    let mut out = String::from("pair_type,pose_a,pose_b,id_a,id_b,score,label\n");
    for set in &summary.score_sets {
        for (pairs, label) in [(&set.genuine, "genuine"), (&set.impostor, "impostor")] {
            for p in pairs {
                let pair_type = if p.pose_a == p.pose_b {
                    "same"
                } else {
                    "cross"
                };
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    pair_type,
                    p.pose_a.as_str(),
                    p.pose_b.as_str(),
                    identities[p.id_a],
                    identities[p.id_b],
                    p.score,
                    label
                ));
            }
        }
    }
    out
}

/// EER report with per-pair results, both overall aggregations, and a
/// downsampled detection-tradeoff curve per template mode.
pub fn eer_report_json(summaries: &[VerificationSummary]) -> Result<String> {
    let modes: Vec<serde_json::Value> = summaries
        .iter()
        .map(|s| {
            let pairs: Vec<serde_json::Value> = s
                .per_pair
                .iter()
                .map(|(a, b, eer, thr, ng, ni)| {
                    serde_json::json!({
                        "pose_a": a.as_str(),
                        "pose_b": b.as_str(),
                        "eer": eer,
                        "threshold": thr,
                        "genuine_count": ng,
                        "impostor_count": ni,
                    })
                })
                .collect();
            let curve: Vec<serde_json::Value> = downsample(&s.pooled.curve, 100)
                .iter()
                .map(
                    |p| serde_json::json!({ "threshold": p.threshold, "far": p.far, "frr": p.frr }),
                )
                .collect();
            serde_json::json!({
                "per_template": s.per_template,
                "per_pair": pairs,
                "pooled_eer": s.pooled.eer,
                "pooled_threshold": s.pooled.threshold,
                "mean_pair_eer": s.mean_eer,
                "pooled_curve": curve,
            })
        })
        .collect();
    Ok(serde_json::to_string_pretty(
        &serde_json::json!({ "modes": modes }),
    )?)
}

fn downsample<T: Clone>(items: &[T], max: usize) -> Vec<T> {
    if items.len() <= max {
        return items.to_vec();
    }
    (0..max)
        .map(|i| items[i * (items.len() - 1) / (max - 1)].clone())
        .collect()
}

/// Write via a temp file so partially written outputs never appear.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}
