//! Run configuration: sectioned key = value text with `#` comments.
//! Unknown sections or keys are rejected so typos fail fast.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use prunefire_core::data::{Normalization, SynthSpec};
use prunefire_core::pruning::PruneSchedule;
use prunefire_core::train::TrainConfig;

use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelChoice {
    Full,
    Micro { width_divisor: usize },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelChoice,
    /// dataset root: manifest.csv plus image files by relative path
    pub data_dir: PathBuf,
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub prune: PruneSchedule,
    pub retrain_max_epochs: usize,
    pub retrain_initial_lr: f64,
    /// EER-hook period during pruning, in iterations; 0 disables
    pub eval_every: usize,
    pub impostor_window: usize,
    pub per_template: Vec<usize>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            model: ModelChoice::Micro { width_divisor: 8 },
            data_dir: PathBuf::from("data"),
            synth: SynthSpec::default(),
            train: TrainConfig::default(),
            prune: PruneSchedule::default(),
            retrain_max_epochs: 4,
            retrain_initial_lr: 0.01,
            eval_every: 5,
            impostor_window: 100,
            per_template: vec![1, 5],
            checkpoint: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

struct Parsed {
    /// (section, key) -> (value, line)
    entries: BTreeMap<(String, String), (String, usize)>,
}

fn parse_entries(text: &str) -> Result<Parsed> {
    let mut entries = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(AppError::Config(format!(
                    "line {}: malformed section '{}'",
                    lineno + 1,
                    raw.trim()
                )));
            }
            section = line[1..line.len() - 1].trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            AppError::Config(format!(
                "line {}: expected key = value, got '{}'",
                lineno + 1,
                raw.trim()
            ))
        })?;
        let prev = entries.insert(
            (section.clone(), key.trim().to_string()),
            (value.trim().to_string(), lineno + 1),
        );
        if prev.is_some() {
            return Err(AppError::Config(format!(
                "line {}: duplicate key '{}' in section '[{}]'",
                lineno + 1,
                key.trim(),
                section
            )));
        }
    }
    Ok(Parsed { entries })
}

struct Reader {
    parsed: Parsed,
    used: std::collections::BTreeSet<(String, String)>,
}

impl Reader {
    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        let k = (section.to_string(), key.to_string());
        let v = self.parsed.entries.get(&k).map(|(v, _)| v.clone());
        if v.is_some() {
            self.used.insert(k);
        }
        v
    }

    fn parse<T: std::str::FromStr>(
        &mut self,
        section: &str,
        key: &str,
        into: &mut T,
    ) -> Result<()> {
        if let Some(v) = self.take(section, key) {
            *into = v.parse::<T>().map_err(|_| {
                AppError::Config(format!("[{}] {}: cannot parse '{}'", section, key, v))
            })?;
        }
        Ok(())
    }

    fn unknown(&self) -> Vec<String> {
        self.parsed
            .entries
            .iter()
            .filter(|(k, _)| !self.used.contains(k))
            .map(|((s, k), (_, line))| format!("line {}: [{}] {}", line, s, k))
            .collect()
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut r = Reader {
            parsed: parse_entries(text)?,
            used: Default::default(),
        };
        let mut cfg = RunConfig::default();

        r.parse("", "seed", &mut cfg.seed)?;

        if let Some(kind) = r.take("model", "config") {
            cfg.model = match kind.as_str() {
                "full" => ModelChoice::Full,
                "micro" => {
                    let mut div = 8usize;
                    r.parse("model", "width_divisor", &mut div)?;
                    ModelChoice::Micro { width_divisor: div }
                }
                other => {
                    return Err(AppError::Config(format!(
                        "[model] config must be 'full' or 'micro', got '{}'",
                        other
                    )))
                }
            };
        } else {
            // consume width_divisor even when config defaults to micro
            let mut div = 8usize;
            r.parse("model", "width_divisor", &mut div)?;
            cfg.model = ModelChoice::Micro { width_divisor: div };
        }

        if let Some(dir) = r.take("data", "dir") {
            cfg.data_dir = PathBuf::from(dir);
        }
        r.parse("data", "synth_identities", &mut cfg.synth.n_identities)?;
        r.parse("data", "synth_per_pose", &mut cfg.synth.n_per_pose)?;
        r.parse("data", "synth_image_size", &mut cfg.synth.image_size)?;
        r.parse(
            "data",
            "synth_train_fraction",
            &mut cfg.synth.train_fraction,
        )?;
        r.parse("data", "synth_noise", &mut cfg.synth.noise)?;

        r.parse("train", "batch_size", &mut cfg.train.batch_size)?;
        r.parse("train", "initial_lr", &mut cfg.train.initial_lr)?;
        if let Some(ladder) = r.take("train", "lr_ladder") {
            cfg.train.lr_ladder = parse_list(&ladder, "train", "lr_ladder")?;
        }
        r.parse("train", "plateau_patience", &mut cfg.train.plateau_patience)?;
        r.parse(
            "train",
            "plateau_min_delta",
            &mut cfg.train.plateau_min_delta,
        )?;
        r.parse("train", "momentum", &mut cfg.train.momentum)?;
        r.parse("train", "weight_decay", &mut cfg.train.weight_decay)?;
        r.parse("train", "max_epochs", &mut cfg.train.max_epochs)?;
        r.parse("train", "val_fraction", &mut cfg.train.val_fraction)?;
        r.parse(
            "train",
            "min_images_per_class",
            &mut cfg.train.min_images_per_class,
        )?;
        let mut mean = 0.5f32;
        let mut std = 0.5f32;
        r.parse("train", "input_mean", &mut mean)?;
        r.parse("train", "input_std", &mut std)?;
        cfg.train.norm = Normalization { mean, std };

        r.parse("prune", "step_fraction", &mut cfg.prune.step_fraction)?;
        r.parse("prune", "subset_fraction", &mut cfg.prune.subset_fraction)?;
        r.parse("prune", "retrain_every", &mut cfg.prune.retrain_every)?;
        r.parse(
            "prune",
            "max_total_fraction",
            &mut cfg.prune.max_total_fraction,
        )?;
        r.parse("prune", "scoring_lr", &mut cfg.prune.scoring_lr)?;
        r.parse("prune", "scoring_momentum", &mut cfg.prune.scoring_momentum)?;
        r.parse("prune", "batch_size", &mut cfg.prune.batch_size)?;
        r.parse("prune", "floor", &mut cfg.prune.floor)?;
        r.parse(
            "prune",
            "per_layer_normalization",
            &mut cfg.prune.normalize_per_layer,
        )?;
        r.parse("prune", "recalibrate_bn", &mut cfg.prune.recalibrate_bn)?;
        r.parse("prune", "retrain_max_epochs", &mut cfg.retrain_max_epochs)?;
        r.parse("prune", "retrain_initial_lr", &mut cfg.retrain_initial_lr)?;
        r.parse("prune", "eval_every", &mut cfg.eval_every)?;
        cfg.prune.norm = cfg.train.norm;

        r.parse("eval", "impostor_window", &mut cfg.impostor_window)?;
        if let Some(pt) = r.take("eval", "per_template") {
            cfg.per_template = parse_list(&pt, "eval", "per_template")?;
        }
        if let Some(path) = r.take("eval", "checkpoint") {
            cfg.checkpoint = Some(PathBuf::from(path));
        }

        if let Some(dir) = r.take("output", "dir") {
            cfg.out_dir = PathBuf::from(dir);
        }

        let unknown = r.unknown();
        if !unknown.is_empty() {
            return Err(AppError::Config(format!(
                "unknown keys: {}",
                unknown.join("; ")
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("cannot read {}: {}", path.display(), e)))?;
        RunConfig::parse(&text)
    }

    fn validate(&self) -> Result<()> {
        self.train
            .validate()
            .map_err(|e| AppError::Config(e.to_string()))?;
        self.prune
            .validate()
            .map_err(|e| AppError::Config(e.to_string()))?;
        for pt in &self.per_template {
            if *pt != 1 && *pt != 5 {
                return Err(AppError::Config(format!(
                    "[eval] per_template entries must be 1 or 5, got {}",
                    pt
                )));
            }
        }
        if self.synth.train_fraction <= 0.0 || self.synth.train_fraction >= 1.0 {
            return Err(AppError::Config(
                "[data] synth_train_fraction must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Build the retraining protocol used inside prune sessions.
    pub fn retrain_config(&self) -> TrainConfig {
        TrainConfig {
            initial_lr: self.retrain_initial_lr,
            lr_ladder: self
                .train
                .lr_ladder
                .iter()
                .copied()
                .filter(|lr| *lr < self.retrain_initial_lr)
                .collect(),
            max_epochs: self.retrain_max_epochs,
            ..self.train.clone()
        }
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, section: &str, key: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|part| {
            part.trim().parse::<T>().map_err(|_| {
                AppError::Config(format!("[{}] {}: cannot parse '{}'", section, key, part))
            })
        })
        .collect()
}

/// A complete annotated example of the config format.
pub const EXAMPLE_CONFIG: &str = r#"# prunefire run configuration
# Everything below shows the default value; omit keys to keep defaults.

seed = 42                       # all randomness flows from this

[model]
config = micro                  # micro | full
width_divisor = 8               # micro only: divide every filter count (2|4|8)

[data]
dir = data                      # dataset root: manifest.csv + images
synth_identities = 40           # `synth` command: identity count
synth_per_pose = 10             #   images per pose per identity
synth_image_size = 129          #   generated image side
synth_train_fraction = 0.5      #   leading fraction of identities -> train split
synth_noise = 14.0              #   per-image noise amplitude (0..255 scale)

[train]
batch_size = 128
initial_lr = 0.01
lr_ladder = 0.005,0.001,0.0001  # plateau ladder, strictly decreasing
plateau_patience = 3            # consecutive stale validations before a step
plateau_min_delta = 0.001       # relative val-loss improvement threshold
momentum = 0.9
weight_decay = 0.0
max_epochs = 60
val_fraction = 0.02             # per-class validation share (min 1 image)
min_images_per_class = 70       # classes below this are dropped
input_mean = 0.5                # per-channel normalization after /255
input_std = 0.5

[prune]
step_fraction = 0.01            # of the ORIGINAL filter count, per iteration
subset_fraction = 0.25          # training share scored per iteration
retrain_every = 5               # retrain at iterations 1, 6, 11, ...
max_total_fraction = 0.4        # stop once this fraction is pruned
scoring_lr = 0.01
scoring_momentum = 0.9
batch_size = 128
floor = 1                       # minimum filters left per layer
per_layer_normalization = false # L2-normalize scores within each layer
recalibrate_bn = false          # refresh running stats after each surgery
retrain_max_epochs = 4
retrain_initial_lr = 0.01
eval_every = 5                  # verification-hook period (0 = off)

[eval]
impostor_window = 100           # next-N-identities impostor pairing
per_template = 1,5              # template sizes to evaluate
# checkpoint = runs/exp/model.bin   # defaults to <output.dir>/model.bin

[output]
dir = runs/default              # run directory for checkpoints, CSVs, SVGs
"#;
