//! Verification protocol: flip-averaged descriptors, identity templates,
//! genuine/impostor cosine scoring, and equal-error-rate computation.
//!
//! Genuine scores compare each template of an identity with its remaining
//! templates (no symmetric duplicates). Impostor scores compare the first
//! template of each identity against the second template of the next
//! `window` identities, wrapping circularly so every identity contributes
//! exactly `window` scores.

use alloc::vec::Vec;

use crate::data::Pose;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

/// L2-normalized flip-averaged embedding of one image.
#[derive(Debug, Clone)]
pub struct Descriptor {
    pub vec: Vec<f32>,
    pub image: usize,
    pub pose: Pose,
    pub flip_averaged: bool,
}

/// Enrolment vector: the re-normalized mean of 1 or 5 member descriptors
/// sharing one pose.
#[derive(Debug, Clone)]
pub struct Template {
    pub identity: usize,
    pub pose: Pose,
    pub members: Vec<usize>,
    pub vec: Vec<f32>,
}

/// Labeled similarity scores with pair provenance.
#[derive(Debug, Clone)]
pub struct ScoredPair {
    pub id_a: usize,
    pub id_b: usize,
    pub pose_a: Pose,
    pub pose_b: Pose,
    pub template_a: usize,
    pub template_b: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub genuine: Vec<ScoredPair>,
    pub impostor: Vec<ScoredPair>,
}

impl ScoreSet {
    pub fn genuine_values(&self) -> Vec<f64> {
        self.genuine.iter().map(|p| p.score).collect()
    }
    pub fn impostor_values(&self) -> Vec<f64> {
        self.impostor.iter().map(|p| p.score).collect()
    }
}

fn l2_normalize(vec: &mut [f32]) -> Result<()> {
    let norm: f64 = vec.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
    let norm = libm::sqrt(norm);
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    for v in vec.iter_mut() {
        *v = (*v as f64 / norm) as f32;
    }
    Ok(())
}

/// Descriptor of an image tensor [3, H, W]: the embedding of the image
/// averaged with the embedding of its horizontal mirror, L2-normalized.
pub fn extract_descriptor(model: &ModelGraph, image: &Tensor<f32>) -> Result<Vec<f32>> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "extract_descriptor",
            detail: alloc::format!("expected [C, H, W], got {:?}", shape),
        });
    }
    let batched = Tensor::from_vec(&[1, shape[0], shape[1], shape[2]], image.data().to_vec())?;
    let flipped = batched.flip_width();
    let a = model.forward_eval(&batched, &[])?.embedding;
    let b = model.forward_eval(&flipped, &[])?.embedding;
    a.check_finite("descriptor activations")?;
    b.check_finite("descriptor activations")?;
    let mut avg: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x + *y) * 0.5)
        .collect();
    l2_normalize(&mut avg)?;
    Ok(avg)
}

/// Build templates for one identity-pose from its descriptors in manifest
/// order. `per_template` 5 splits the ten images into [0..5) and [5..10);
/// `per_template` 1 makes every image its own template.
pub fn build_templates(
    identity: usize,
    pose: Pose,
    descriptors: &[Descriptor],
    per_template: usize,
) -> Result<Vec<Template>> {
    match per_template {
        1 => Ok(descriptors
            .iter()
            .enumerate()
            .map(|(i, d)| Template {
                identity,
                pose,
                members: alloc::vec![i],
                vec: d.vec.clone(),
            })
            .collect()),
        5 => {
            if descriptors.len() != 10 {
                return Err(Error::TemplateCount {
                    expected: 10,
                    actual: descriptors.len(),
                });
            }
            let dim = descriptors[0].vec.len();
            let mut out = Vec::with_capacity(2);
            for (t, chunk) in descriptors.chunks(5).enumerate() {
                let mut mean = alloc::vec![0.0f32; dim];
                for d in chunk {
                    for (m, v) in mean.iter_mut().zip(&d.vec) {
                        *m += *v / 5.0;
                    }
                }
                l2_normalize(&mut mean)?;
                out.push(Template {
                    identity,
                    pose,
                    members: (t * 5..t * 5 + 5).collect(),
                    vec: mean,
                });
            }
            Ok(out)
        }
        other => Err(Error::TemplateCount {
            expected: 1,
            actual: other,
        }),
    }
}

/// cosine similarity in [-1, 1]; errors on a zero vector.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot / (libm::sqrt(na) * libm::sqrt(nb)))
}

/// All templates of one split: `table[identity][pose] -> templates`.
pub type TemplateTable = Vec<[Vec<Template>; 3]>;

/// Genuine and impostor scores for one pose pair over the whole table.
pub fn protocol_scores(
    table: &TemplateTable,
    pose_a: Pose,
    pose_b: Pose,
    window: usize,
) -> Result<ScoreSet> {
    let n = table.len();
    if n < window + 1 {
        return Err(Error::ImpostorWindow {
            window,
            identities: n,
        });
    }
    let mut set = ScoreSet::default();
    let same_pose = pose_a == pose_b;
    for (id, per_pose) in table.iter().enumerate() {
        let ta = &per_pose[pose_a.index()];
        let tb = &per_pose[pose_b.index()];
        if same_pose {
            for i in 0..ta.len() {
                for j in (i + 1)..ta.len() {
                    set.genuine.push(ScoredPair {
                        id_a: id,
                        id_b: id,
                        pose_a,
                        pose_b,
                        template_a: i,
                        template_b: j,
                        score: cosine(&ta[i].vec, &ta[j].vec)?,
                    });
                }
            }
        } else {
            for (i, a) in ta.iter().enumerate() {
                for (j, b) in tb.iter().enumerate() {
                    set.genuine.push(ScoredPair {
                        id_a: id,
                        id_b: id,
                        pose_a,
                        pose_b,
                        template_a: i,
                        template_b: j,
                        score: cosine(&a.vec, &b.vec)?,
                    });
                }
            }
        }
        // enrolment: first template of this identity; probes: second template
        // of the next `window` identities, circular
        let enrol = &ta[0];
        for k in 1..=window {
            let other = (id + k) % n;
            let probe = &table[other][pose_b.index()][1];
            set.impostor.push(ScoredPair {
                id_a: id,
                id_b: other,
                pose_a,
                pose_b,
                template_a: 0,
                template_b: 1,
                score: cosine(&enrol.vec, &probe.vec)?,
            });
        }
    }
    Ok(set)
}

/// The six pose pairs of the protocol: three same-pose, three cross-pose.
pub fn pose_pairs() -> [(Pose, Pose); 6] {
    [
        (Pose::Frontal, Pose::Frontal),
        (Pose::ThreeQuarter, Pose::ThreeQuarter),
        (Pose::Profile, Pose::Profile),
        (Pose::Frontal, Pose::ThreeQuarter),
        (Pose::Frontal, Pose::Profile),
        (Pose::ThreeQuarter, Pose::Profile),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    pub curve: Vec<CurvePoint>,
}

/// Equal error rate by threshold sweep over the union of scores.
/// FAR(t) = fraction of impostors >= t, FRR(t) = fraction of genuines < t;
/// the crossing is linearly interpolated between bracketing thresholds.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> Result<EerResult> {
    if genuine.is_empty() {
        return Err(Error::EmptyScores { which: "genuine" });
    }
    if impostor.is_empty() {
        return Err(Error::EmptyScores { which: "impostor" });
    }
    let mut gen_sorted = genuine.to_vec();
    let mut imp_sorted = impostor.to_vec();
    gen_sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    imp_sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));

    let mut thresholds: Vec<f64> = Vec::with_capacity(gen_sorted.len() + imp_sorted.len() + 2);
    thresholds.extend_from_slice(&gen_sorted);
    thresholds.extend_from_slice(&imp_sorted);
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    thresholds.dedup();
    // sentinel beyond the largest score: FAR 0, FRR 1
    let top = thresholds.last().copied().unwrap_or(0.0);
    thresholds.push(top + 1.0);

    let count_lt = |sorted: &[f64], t: f64| sorted.partition_point(|v| *v < t);
    let n_gen = gen_sorted.len() as f64;
    let n_imp = imp_sorted.len() as f64;

    let mut curve = Vec::with_capacity(thresholds.len());
    for t in &thresholds {
        let far = (imp_sorted.len() - count_lt(&imp_sorted, *t)) as f64 / n_imp;
        let frr = count_lt(&gen_sorted, *t) as f64 / n_gen;
        curve.push(CurvePoint {
            threshold: *t,
            far,
            frr,
        });
    }

    // far - frr is non-increasing along the sweep; find the sign change
    let mut eer = 0.5;
    let mut threshold = thresholds[0];
    for i in 0..curve.len() {
        let d = curve[i].far - curve[i].frr;
        if d == 0.0 {
            eer = curve[i].far;
            threshold = curve[i].threshold;
            break;
        }
        if d < 0.0 {
            if i == 0 {
                eer = curve[i].far.max(curve[i].frr);
                threshold = curve[i].threshold;
            } else {
                let (p, q) = (curve[i - 1], curve[i]);
                let d1 = p.far - p.frr;
                let d2 = q.far - q.frr;
                let alpha = d1 / (d1 - d2);
                eer = p.far + alpha * (q.far - p.far);
                threshold = p.threshold + alpha * (q.threshold - p.threshold);
            }
            break;
        }
    }
    Ok(EerResult {
        eer,
        threshold,
        curve,
    })
}

/// Per-pair and pooled verification results for one template mode.
#[derive(Debug, Clone)]
pub struct VerificationSummary {
    pub per_template: usize,
    /// (pose a, pose b, eer, threshold, genuine count, impostor count)
    pub per_pair: Vec<(Pose, Pose, f64, f64, usize, usize)>,
    /// EER over all six pose pairs' scores pooled before thresholding
    pub pooled: EerResult,
    /// mean of the six per-pair EERs (the alternative overall aggregation)
    pub mean_eer: f64,
    pub score_sets: Vec<ScoreSet>,
}

/// Flip-averaged descriptors for every test image:
/// `images[identity][pose]` in manifest order.
pub fn descriptor_table(
    model: &ModelGraph,
    images: &[[Vec<Tensor<f32>>; 3]],
) -> Result<Vec<[Vec<Descriptor>; 3]>> {
    let mut out = Vec::with_capacity(images.len());
    for per_pose in images {
        let mut entry: [Vec<Descriptor>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for pose in crate::data::POSES {
            for (i, img) in per_pose[pose.index()].iter().enumerate() {
                entry[pose.index()].push(Descriptor {
                    vec: extract_descriptor(model, img)?,
                    image: i,
                    pose,
                    flip_averaged: true,
                });
            }
        }
        out.push(entry);
    }
    Ok(out)
}

/// Templates for every identity and pose.
pub fn template_table(
    descriptors: &[[Vec<Descriptor>; 3]],
    per_template: usize,
) -> Result<TemplateTable> {
    let mut table = Vec::with_capacity(descriptors.len());
    for (id, per_pose) in descriptors.iter().enumerate() {
        let mut entry: [Vec<Template>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for pose in crate::data::POSES {
            entry[pose.index()] = build_templates(id, pose, &per_pose[pose.index()], per_template)?;
        }
        table.push(entry);
    }
    Ok(table)
}

/// Run all six pose pairs and aggregate: per-pair EERs, the pooled EER over
/// all scores, and the mean of per-pair EERs.
pub fn pooled_verification(
    table: &TemplateTable,
    window: usize,
    per_template: usize,
) -> Result<VerificationSummary> {
    let mut per_pair = Vec::with_capacity(6);
    let mut score_sets = Vec::with_capacity(6);
    let mut all_genuine = Vec::new();
    let mut all_impostor = Vec::new();
    let mut eer_sum = 0.0;
    for (a, b) in pose_pairs() {
        let set = protocol_scores(table, a, b, window)?;
        let genuine = set.genuine_values();
        let impostor = set.impostor_values();
        let eer = compute_eer(&genuine, &impostor)?;
        per_pair.push((a, b, eer.eer, eer.threshold, genuine.len(), impostor.len()));
        eer_sum += eer.eer;
        all_genuine.extend_from_slice(&genuine);
        all_impostor.extend_from_slice(&impostor);
        score_sets.push(set);
    }
    let pooled = compute_eer(&all_genuine, &all_impostor)?;
    Ok(VerificationSummary {
        per_template,
        per_pair,
        pooled,
        mean_eer: eer_sum / 6.0,
        score_sets,
    })
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|x, y| values[*x].partial_cmp(&values[*y]).expect("finite"));
    let mut ranks = alloc::vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x - ma, y - mb);
        num += x * y;
        da += x * x;
        db += y * y;
    }
    let denom = libm::sqrt(da * db);
    if denom == 0.0 {
        0.0
    } else {
        num / denom
    }
}
