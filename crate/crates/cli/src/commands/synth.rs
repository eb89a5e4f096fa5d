//! `synth`: generate the synthetic identity dataset on disk.

use std::fs;

use prunefire_core::data::synthesize_dataset;
use prunefire_core::image::encode_netpbm;

use crate::config::RunConfig;
use crate::error::Result;
use crate::runio::atomic_write;

pub fn run(cfg: &RunConfig) -> Result<()> {
    let mut spec = cfg.synth.clone();
    spec.seed = cfg.seed;
    let dataset = synthesize_dataset(&spec)?;
    for (rel, img) in &dataset.entries {
        let path = cfg.data_dir.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, encode_netpbm(img))?;
    }
    atomic_write(
        &cfg.data_dir.join("manifest.csv"),
        dataset.manifest.to_csv().as_bytes(),
    )?;
    println!(
        "synth: wrote {} images for {} identities under {}",
        dataset.entries.len(),
        spec.n_identities,
        cfg.data_dir.display()
    );
    Ok(())
}
