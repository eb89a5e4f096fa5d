//! Dataset ingestion, preprocessing, and the synthetic identity generator.
//!
//! The manifest is a CSV with header `path,identity,pose,split`. Train and
//! test identities are disjoint (open-set verification). Preprocessing
//! follows the evaluation geometry: shorter side resized to 129, 113x113
//! crop (center at eval time, random at train time plus a 50% horizontal
//! flip), channels scaled to [0,1] and mean/std normalized.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{self, Image};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const RESIZE_SHORT: usize = 129;
pub const CROP_SIZE: usize = 113;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Pose {
    Frontal,
    ThreeQuarter,
    Profile,
}

pub const POSES: [Pose; 3] = [Pose::Frontal, Pose::ThreeQuarter, Pose::Profile];

impl Pose {
    pub fn as_str(self) -> &'static str {
        match self {
            Pose::Frontal => "frontal",
            Pose::ThreeQuarter => "threequarter",
            Pose::Profile => "profile",
        }
    }

    pub fn parse(s: &str) -> Option<Pose> {
        match s {
            "frontal" => Some(Pose::Frontal),
            "threequarter" => Some(Pose::ThreeQuarter),
            "profile" => Some(Pose::Profile),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Pose::Frontal => 0,
            Pose::ThreeQuarter => 1,
            Pose::Profile => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub identity: String,
    pub pose: Pose,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    /// Parse and validate manifest CSV text.
    pub fn parse(text: &str) -> Result<Manifest> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim_end_matches('\r') == "path,identity,pose,split" => {}
            Some((_, header)) => {
                return Err(Error::ManifestRow {
                    row: 0,
                    detail: format!("bad header '{}'", header),
                })
            }
            None => return Err(Error::EmptyManifest),
        }
        let mut rows = Vec::new();
        let mut seen_paths = BTreeMap::new();
        for (lineno, line) in lines {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::ManifestRow {
                    row: lineno,
                    detail: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let pose = Pose::parse(fields[2]).ok_or_else(|| Error::ManifestRow {
                row: lineno,
                detail: format!("unknown pose tag '{}'", fields[2]),
            })?;
            let split = match fields[3] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(Error::ManifestRow {
                        row: lineno,
                        detail: format!("unknown split tag '{}'", other),
                    })
                }
            };
            if let Some(first) = seen_paths.insert(fields[0].to_string(), lineno) {
                return Err(Error::ManifestRow {
                    row: lineno,
                    detail: format!("duplicate path '{}' (first at row {})", fields[0], first),
                });
            }
            rows.push(ManifestRow {
                path: fields[0].into(),
                identity: fields[1].into(),
                pose,
                split,
            });
        }
        if rows.is_empty() {
            return Err(Error::EmptyManifest);
        }
        // open-set protocol: train and test identities must not overlap
        let mut split_of: BTreeMap<&str, (Split, usize)> = BTreeMap::new();
        for (i, row) in rows.iter().enumerate() {
            match split_of.get(row.identity.as_str()) {
                Some((split, first)) if *split != row.split => {
                    return Err(Error::ManifestRow {
                        row: i + 1,
                        detail: format!(
                            "identity '{}' appears in both splits (first at row {})",
                            row.identity,
                            first + 1
                        ),
                    })
                }
                Some(_) => {}
                None => {
                    split_of.insert(&row.identity, (row.split, i));
                }
            }
        }
        Ok(Manifest { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,identity,pose,split\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.path,
                row.identity,
                row.pose.as_str(),
                row.split.as_str()
            ));
        }
        out
    }

    pub fn split_rows(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestRow)> {
        self.rows
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.split == split)
    }
}

/// Per-identity manifest rows grouped by pose, identities in manifest order.
/// Every identity carries all three poses with exactly `n_per_pose` rows.
#[derive(Debug, Clone)]
pub struct PoseSets {
    pub identities: Vec<String>,
    pub n_per_pose: usize,
    /// rows[identity][pose] -> manifest row indices in manifest order
    pub rows: Vec<[Vec<usize>; 3]>,
}

impl PoseSets {
    pub fn from_manifest(manifest: &Manifest, split: Split) -> Result<PoseSets> {
        let mut identities: Vec<String> = Vec::new();
        let mut rows: Vec<[Vec<usize>; 3]> = Vec::new();
        for (idx, row) in manifest.split_rows(split) {
            let slot = match identities.iter().position(|i| *i == row.identity) {
                Some(p) => p,
                None => {
                    identities.push(row.identity.clone());
                    rows.push([Vec::new(), Vec::new(), Vec::new()]);
                    identities.len() - 1
                }
            };
            rows[slot][row.pose.index()].push(idx);
        }
        if identities.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let n_per_pose = rows[0][0].len();
        for (who, per_pose) in identities.iter().zip(&rows) {
            for pose in POSES {
                if per_pose[pose.index()].len() != n_per_pose {
                    return Err(Error::ManifestRow {
                        row: 0,
                        detail: format!(
                            "identity '{}' has {} {} images, expected {}",
                            who,
                            per_pose[pose.index()].len(),
                            pose.as_str(),
                            n_per_pose
                        ),
                    });
                }
            }
        }
        Ok(PoseSets {
            identities,
            n_per_pose,
            rows,
        })
    }
}

/// Per-channel input normalization applied after scaling bytes to [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: 0.5,
            std: 0.5,
        }
    }
}

/// CHW float conversion; grayscale replicates across the three channels.
pub fn image_to_tensor(img: &Image, norm: Normalization) -> Tensor<f32> {
    let (w, h) = (img.width, img.height);
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let src_c = if img.channels == 3 { c } else { 0 };
        for y in 0..h {
            for x in 0..w {
                let v = img.at(x, y, src_c) as f32 / 255.0;
                data.push((v - norm.mean) / norm.std);
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("image tensor")
}

/// Evaluation-time preprocessing: resize shorter side to 129, center crop
/// 113x113, normalize. Deterministic.
pub fn eval_preprocess(img: &Image, norm: Normalization) -> Result<Tensor<f32>> {
    let resized = image::resize_shorter_side(img, RESIZE_SHORT)?;
    let x0 = (resized.width - CROP_SIZE) / 2;
    let y0 = (resized.height - CROP_SIZE) / 2;
    let cropped = image::crop(&resized, x0, y0, CROP_SIZE, CROP_SIZE)?;
    Ok(image_to_tensor(&cropped, norm))
}

/// Training-time augmentation: resize shorter side to 129, uniform-random
/// 113x113 crop, 50% horizontal flip.
pub fn augment_train(img: &Image, rng: &mut Rng) -> Result<Image> {
    let resized = image::resize_shorter_side(img, RESIZE_SHORT)?;
    let cropped = crop_random(&resized, rng)?;
    Ok(if rng.coin() {
        image::hflip(&cropped)
    } else {
        cropped
    })
}

/// Random 113x113 crop of an already-resized image.
pub fn crop_random(resized: &Image, rng: &mut Rng) -> Result<Image> {
    if resized.width < CROP_SIZE || resized.height < CROP_SIZE {
        return Err(Error::ImageGeometry {
            detail: format!(
                "{}x{} too small for a {} crop",
                resized.width, resized.height, CROP_SIZE
            ),
        });
    }
    let x0 = rng.below(resized.width - CROP_SIZE + 1);
    let y0 = rng.below(resized.height - CROP_SIZE + 1);
    image::crop(resized, x0, y0, CROP_SIZE, CROP_SIZE)
}

/// In-memory labeled image set; images are cached at the resized-short-129
/// geometry so augmentation only crops and flips.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    /// Build from (image, identity) pairs. Class indices follow the sorted
    /// identity names; images are resized once here.
    pub fn from_labeled(items: Vec<(Image, String)>) -> Result<Dataset> {
        let mut names: Vec<String> = items.iter().map(|(_, n)| n.clone()).collect();
        names.sort();
        names.dedup();
        let mut images = Vec::with_capacity(items.len());
        let mut labels = Vec::with_capacity(items.len());
        for (img, name) in items {
            labels.push(names.binary_search(&name).expect("name present"));
            images.push(image::resize_shorter_side(&img, RESIZE_SHORT)?);
        }
        Ok(Dataset {
            images,
            labels,
            class_names: names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.labels.iter().filter(|l| **l == class).count()
    }

    /// Drop classes with fewer than `min_images` images, remapping labels.
    pub fn filter_min_images(self, min_images: usize) -> Dataset {
        let keep: Vec<bool> = (0..self.n_classes())
            .map(|c| self.class_count(c) >= min_images)
            .collect();
        let mut remap = Vec::with_capacity(self.n_classes());
        let mut next = 0usize;
        for k in &keep {
            remap.push(if *k {
                next += 1;
                Some(next - 1)
            } else {
                None
            });
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (img, label) in self.images.into_iter().zip(self.labels) {
            if let Some(new) = remap[label] {
                images.push(img);
                labels.push(new);
            }
        }
        let class_names = self
            .class_names
            .into_iter()
            .zip(keep)
            .filter(|(_, k)| *k)
            .map(|(n, _)| n)
            .collect();
        Dataset {
            images,
            labels,
            class_names,
        }
    }

    /// Per-class split: ceil(val_fraction * n) images, at least one, go to
    /// validation; the rest train. Deterministic under the rng seed.
    pub fn split_train_val(
        &self,
        val_fraction: f64,
        rng: &mut Rng,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for class in 0..self.n_classes() {
            let mut members: Vec<usize> = (0..self.len())
                .filter(|i| self.labels[*i] == class)
                .collect();
            if members.len() < 2 {
                return Err(Error::UnsplittableClass {
                    class: self.class_names[class].clone(),
                    images: members.len(),
                });
            }
            rng.shuffle(&mut members);
            let n_val = (libm::ceil(val_fraction * members.len() as f64) as usize).max(1);
            val.extend_from_slice(&members[..n_val]);
            train.extend_from_slice(&members[n_val..]);
        }
        Ok((train, val))
    }
}

/// Synthetic dataset parameters. Identities split into train/test by
/// `train_fraction` (test gets the remainder, in identity order).
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_identities: usize,
    pub n_per_pose: usize,
    pub image_size: usize,
    pub seed: u64,
    pub train_fraction: f64,
    /// additive uniform pixel noise amplitude, in 0..255 units
    pub noise: f32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_identities: 40,
            n_per_pose: 10,
            image_size: RESIZE_SHORT,
            seed: 7,
            train_fraction: 0.5,
            noise: 14.0,
        }
    }
}

/// A generated dataset: relative paths with image payloads, plus a manifest.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub entries: Vec<(String, Image)>,
    pub manifest: Manifest,
}

/// Identity signature: a fixed low-frequency plane-wave mix per channel plus
/// a handful of identity-keyed blobs.
fn identity_pattern(identity: usize, size: usize, seed: u64) -> [Vec<f32>; 3] {
    let mut rng = Rng::with_stream(seed, 0x1D00 + identity as u64);
    let mut planes: [Vec<f32>; 3] = [
        alloc::vec![0.0; size * size],
        alloc::vec![0.0; size * size],
        alloc::vec![0.0; size * size],
    ];
    let tau = core::f32::consts::TAU;
    for plane in planes.iter_mut() {
        for _ in 0..4 {
            let fx = (1 + rng.below(5)) as f32;
            let fy = (1 + rng.below(5)) as f32;
            let phase = rng.uniform() * tau;
            let amp = 0.4 + 0.6 * rng.uniform();
            for y in 0..size {
                for x in 0..size {
                    let arg = tau * (fx * x as f32 + fy * y as f32) / size as f32 + phase;
                    plane[y * size + x] += amp * libm::sinf(arg);
                }
            }
        }
    }
    // blobs: localized identity marks
    for _ in 0..3 {
        let cx = rng.below(size) as f32;
        let cy = rng.below(size) as f32;
        let sigma = size as f32 * (0.06 + 0.08 * rng.uniform());
        let weights = [rng.normal() * 2.0, rng.normal() * 2.0, rng.normal() * 2.0];
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f32 - cx) * (x as f32 - cx) + (y as f32 - cy) * (y as f32 - cy);
                let g = libm::expf(-d2 / (2.0 * sigma * sigma));
                for (c, plane) in planes.iter_mut().enumerate() {
                    plane[y * size + x] += weights[c] * g;
                }
            }
        }
    }
    planes
}

fn pose_shear(pose: Pose) -> f32 {
    match pose {
        Pose::Frontal => 0.0,
        Pose::ThreeQuarter => 0.35,
        Pose::Profile => 0.7,
    }
}

/// Render one image: shear the identity pattern by pose, occlude the profile
/// view, add per-image noise, and quantize to bytes.
fn render_image(
    pattern: &[Vec<f32>; 3],
    pose: Pose,
    size: usize,
    noise: f32,
    rng: &mut Rng,
) -> Image {
    let shear = pose_shear(pose);
    let mut img = Image::new(size, size, 3);
    for y in 0..size {
        let dx = shear * (y as f32 - size as f32 / 2.0);
        for x in 0..size {
            let src_x = (x as f32 + dx).clamp(0.0, (size - 1) as f32);
            let x0 = src_x as usize;
            let x1 = (x0 + 1).min(size - 1);
            let w1 = src_x - x0 as f32;
            for (c, plane) in pattern.iter().enumerate() {
                let v = plane[y * size + x0] * (1.0 - w1) + plane[y * size + x1] * w1;
                // pattern amplitude is roughly [-4, 4]
                let mut byte = 127.5 + v * 28.0;
                if pose == Pose::Profile && x >= size * 7 / 10 {
                    byte = byte * 0.25 + 24.0; // occluded strip
                }
                byte += (rng.uniform() * 2.0 - 1.0) * noise;
                img.set(x, y, c, byte.clamp(0.0, 255.0) as u8);
            }
        }
    }
    img
}

/// Generate the synthetic identity dataset. Same spec, same bytes.
pub fn synthesize_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    if spec.n_identities < 2 || spec.n_per_pose < 1 {
        return Err(Error::ImageGeometry {
            detail: "need at least 2 identities and 1 image per pose".into(),
        });
    }
    let n_train = libm::ceil(spec.n_identities as f64 * spec.train_fraction) as usize;
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    for identity in 0..spec.n_identities {
        let pattern = identity_pattern(identity, spec.image_size, spec.seed);
        let name = format!("id{:03}", identity);
        let split = if identity < n_train {
            Split::Train
        } else {
            Split::Test
        };
        for pose in POSES {
            for index in 0..spec.n_per_pose {
                let stream =
                    0x5EED + ((identity * 3 + pose.index()) * spec.n_per_pose + index) as u64;
                let mut img_rng = Rng::with_stream(spec.seed, stream);
                let img = render_image(&pattern, pose, spec.image_size, spec.noise, &mut img_rng);
                let path = format!("{}/{}_{:02}.ppm", name, pose.as_str(), index);
                entries.push((path.clone(), img));
                rows.push(ManifestRow {
                    path,
                    identity: name.clone(),
                    pose,
                    split,
                });
            }
        }
    }
    Ok(SynthDataset {
        entries,
        manifest: Manifest { rows },
    })
}
