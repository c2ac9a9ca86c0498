//! Output transformations: how K_down downstream classes read answers out
//! of a model that speaks K_pre pretraining classes.
//!
//! The hard-coded mapping assigns each downstream class one pretraining
//! logit (injectively) and softmaxes over the gathered subset, which
//! equals renormalizing the full softmax restricted to those entries. The
//! text-prompt head instead scores embeddings against class-embedding
//! rows, optionally corrupted by a sigma-sized seeded rotation to emulate
//! prompt text of varying quality.

use crate::backbone::{BackboneKind, ClassEmbeddingTable, FrozenBackbone};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardCodedMapping {
    /// targets[down_class] = pretrain_class.
    targets: Vec<usize>,
    pretrain_classes: usize,
}

impl HardCodedMapping {
    pub fn new(targets: Vec<usize>, pretrain_classes: usize) -> Result<Self> {
        if targets.len() > pretrain_classes {
            return Err(Error::TooManyDownstreamClasses {
                downstream: targets.len(),
                pretrain: pretrain_classes,
            });
        }
        let mut seen = vec![false; pretrain_classes];
        for &t in &targets {
            if t >= pretrain_classes {
                return Err(Error::MappingTargetOutOfRange {
                    target: t,
                    pretrain: pretrain_classes,
                });
            }
            if seen[t] {
                return Err(Error::MappingNotInjective { target: t });
            }
            seen[t] = true;
        }
        Ok(HardCodedMapping {
            targets,
            pretrain_classes,
        })
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn downstream_classes(&self) -> usize {
        self.targets.len()
    }

    pub fn pretrain_classes(&self) -> usize {
        self.pretrain_classes
    }
}

/// Downstream logits: the mapped subset of pretraining logits. Softmaxing
/// the result renormalizes the restricted distribution.
pub fn map_logits(g: &mut Graph, pretrain_logits: Var, mapping: &HardCodedMapping) -> Result<Var> {
    let k = g.value(pretrain_logits).shape().get(1).copied().unwrap_or(0);
    if k != mapping.pretrain_classes {
        return Err(Error::ShapeMismatch {
            op: "map_logits",
            detail: format!(
                "mapping built for {} pretrain classes, logits have {k}",
                mapping.pretrain_classes
            ),
        });
    }
    g.gather_cols(pretrain_logits, &mapping.targets)
}

/// Per-class mean of feature rows, f64 accumulated. Every class in
/// 0..classes must occur at least once.
pub fn class_mean_features(features: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    if features.shape().len() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "class_mean_features",
            detail: format!(
                "features {:?} vs {} labels",
                features.shape(),
                labels.len()
            ),
        });
    }
    let d = features.shape()[1];
    let mut sums = vec![0.0f64; classes * d];
    let mut counts = vec![0usize; classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        counts[label] += 1;
        for e in 0..d {
            sums[label * d + e] += features.data()[i * d + e] as f64;
        }
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < classes {
        return Err(Error::TooFewSamples {
            op: "class_mean_features",
            need: classes,
            got: present,
        });
    }
    let mut out = Tensor::zeros(&[classes, d]);
    for cls in 0..classes {
        for e in 0..d {
            out.data_mut()[cls * d + e] = (sums[cls * d + e] / counts[cls] as f64) as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappingStrategy {
    Semantic,
    Arbitrary,
    Swapped,
}

impl MappingStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            MappingStrategy::Semantic => "semantic",
            MappingStrategy::Arbitrary => "arbitrary",
            MappingStrategy::Swapped => "swapped",
        }
    }
}

fn cosine_f64(a: &[f32], b: &[f32]) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += (x as f64) * (x as f64);
        nb += (y as f64) * (y as f64);
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm {
            what: "class mean feature",
        });
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Globally greedy assignment on class-mean cosine similarity: repeatedly
/// take the best unassigned (downstream, pretrain) pair. Ties break toward
/// the lowest pair of indices, so the result is deterministic.
pub fn semantic_mapping(down_means: &Tensor, pre_means: &Tensor) -> Result<HardCodedMapping> {
    let (kd, kp) = (down_means.shape()[0], pre_means.shape()[0]);
    if down_means.shape().len() != 2
        || pre_means.shape().len() != 2
        || down_means.shape()[1] != pre_means.shape()[1]
    {
        return Err(Error::ShapeMismatch {
            op: "semantic_mapping",
            detail: format!(
                "mean shapes {:?} and {:?} do not align",
                down_means.shape(),
                pre_means.shape()
            ),
        });
    }
    if kd > kp {
        return Err(Error::TooManyDownstreamClasses {
            downstream: kd,
            pretrain: kp,
        });
    }
    let d = down_means.shape()[1];
    let mut sims = vec![0.0f64; kd * kp];
    for i in 0..kd {
        for j in 0..kp {
            sims[i * kp + j] = cosine_f64(
                &down_means.data()[i * d..(i + 1) * d],
                &pre_means.data()[j * d..(j + 1) * d],
            )?;
        }
    }
    let mut targets = vec![usize::MAX; kd];
    let mut row_done = vec![false; kd];
    let mut col_done = vec![false; kp];
    for _ in 0..kd {
        let (mut best, mut bi, mut bj) = (f64::NEG_INFINITY, 0, 0);
        for i in 0..kd {
            if row_done[i] {
                continue;
            }
            for j in 0..kp {
                if col_done[j] {
                    continue;
                }
                if sims[i * kp + j] > best {
                    best = sims[i * kp + j];
                    bi = i;
                    bj = j;
                }
            }
        }
        targets[bi] = bj;
        row_done[bi] = true;
        col_done[bj] = true;
    }
    HardCodedMapping::new(targets, kp)
}

/// Seeded random injective assignment.
pub fn arbitrary_mapping(downstream: usize, pretrain: usize, seed: u64) -> Result<HardCodedMapping> {
    if downstream > pretrain {
        return Err(Error::TooManyDownstreamClasses {
            downstream,
            pretrain,
        });
    }
    let mut pool: Vec<usize> = (0..pretrain).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..pool.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        pool.swap(i, j);
    }
    HardCodedMapping::new(pool[..downstream].to_vec(), pretrain)
}

/// Rotate the assignment by one: every class keeps a plausible target that
/// belongs to a different class. A single-class mapping has nothing to
/// rotate and is returned unchanged.
pub fn swapped_mapping(base: &HardCodedMapping) -> HardCodedMapping {
    let k = base.targets.len();
    let targets = (0..k).map(|i| base.targets[(i + 1) % k]).collect();
    HardCodedMapping {
        targets,
        pretrain_classes: base.pretrain_classes,
    }
}

pub fn make_mapping(
    strategy: MappingStrategy,
    down_means: &Tensor,
    pre_means: &Tensor,
    seed: u64,
) -> Result<HardCodedMapping> {
    match strategy {
        MappingStrategy::Semantic => semantic_mapping(down_means, pre_means),
        MappingStrategy::Arbitrary => {
            arbitrary_mapping(down_means.shape()[0], pre_means.shape()[0], seed)
        }
        MappingStrategy::Swapped => Ok(swapped_mapping(&semantic_mapping(down_means, pre_means)?)),
    }
}

/// Serialize as one `down -> pre` line per downstream class.
pub fn save_mapping(mapping: &HardCodedMapping, path: &Path) -> Result<()> {
    let mut text = String::new();
    for (down, &pre) in mapping.targets.iter().enumerate() {
        text.push_str(&format!("{down} -> {pre}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_mapping(path: &Path, pretrain_classes: usize) -> Result<HardCodedMapping> {
    let text = std::fs::read_to_string(path)?;
    let mut targets = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::BadField {
            path: path.to_path_buf(),
            field: format!("line {}", lineno + 1),
            detail,
        };
        let (down_raw, pre_raw) = line
            .split_once("->")
            .ok_or_else(|| bad("expected `down -> pre`".into()))?;
        let down: usize = down_raw
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad downstream index {:?}", down_raw.trim())))?;
        if down != targets.len() {
            return Err(bad(format!(
                "downstream indices must be consecutive; expected {}, got {down}",
                targets.len()
            )));
        }
        let pre: usize = pre_raw
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad pretrain index {:?}", pre_raw.trim())))?;
        targets.push(pre);
    }
    HardCodedMapping::new(targets, pretrain_classes)
}

/// Text-encoder stand-in head: class-embedding rows for the downstream
/// classes, optionally degraded by a seeded in-span rotation of scale
/// sigma, scored by temperature-scaled cosine similarity. sigma 0
/// reproduces the table rows bit-exactly.
#[derive(Debug, Clone)]
pub struct TextPromptHead {
    pub rows: Tensor,
    pub temperature: f32,
    pub sigma: f32,
    pub seed: u64,
}

impl TextPromptHead {
    pub fn new(
        table: &ClassEmbeddingTable,
        targets: &[usize],
        temperature: f32,
        sigma: f32,
        seed: u64,
    ) -> Result<TextPromptHead> {
        let k_pre = table.rows.shape()[0];
        let d = table.rows.shape()[1];
        // reuse mapping validation for range/injectivity
        HardCodedMapping::new(targets.to_vec(), k_pre)?;
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::BadMagnitude { magnitude: sigma });
        }
        let mut rows = Tensor::zeros(&[targets.len(), d]);
        for (i, &t) in targets.iter().enumerate() {
            rows.data_mut()[i * d..(i + 1) * d]
                .copy_from_slice(&table.rows.data()[t * d..(t + 1) * d]);
        }
        if sigma > 0.0 {
            apply_quality_noise(&mut rows, sigma, seed)?;
        }
        Ok(TextPromptHead {
            rows,
            temperature,
            sigma,
            seed,
        })
    }

    /// Downstream logits [N, K_down] from embeddings [N, E].
    pub fn logits(&self, g: &mut Graph, emb: Var) -> Result<Var> {
        let rows = g.leaf(self.rows.clone(), false);
        let sims = g.cosine_sim_matrix(emb, rows)?;
        Ok(g.scale(sims, self.temperature))
    }
}

/// Corrupt the row set the way a uniformly degraded prompt wording would:
/// rotate the whole set inside its own span by a seeded random rotation
/// with a uniform angle on every plane. Every row then sits exactly
/// sqrt(2) * tanh(sigma / sqrt(2)) from its clean position: near-linear
/// in sigma at first, saturating at sqrt(2), the expected distance
/// between two independent table rows. A totally corrupted prompt is a
/// stranger to its class, never its opposite. Pairwise dot products are
/// preserved exactly, so quality degrades without ever colliding two
/// classes, which no input-space prompt could undo.
fn apply_quality_noise(rows: &mut Tensor, sigma: f32, seed: u64) -> Result<()> {
    let k = rows.shape()[0];
    let d = rows.shape()[1];
    let clean: Vec<f64> = rows.data().iter().map(|&v| v as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // seeded orthonormal basis of span{rows}: gram-schmidt over random
    // mixtures of the rows so the rotation planes differ per seed
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    let mut attempts = 0;
    while basis.len() < k {
        let mut v = vec![0.0f64; d];
        for row in clean.chunks(d) {
            let w: f64 = rng.sample(rand_distr::StandardNormal);
            for (e, &c) in v.iter_mut().zip(row) {
                *e += w * c;
            }
        }
        if !orthonormalize(&mut v, &basis) {
            attempts += 1;
            if attempts > 16 {
                return Err(Error::ZeroNorm {
                    what: "text-head noise basis",
                });
            }
            continue;
        }
        basis.push(v);
    }
    if k % 2 == 1 {
        // odd span: borrow one direction orthogonal to it so the last
        // basis vector still has a rotation partner
        let mut attempts = 0;
        loop {
            let mut v: Vec<f64> = (0..d)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            if orthonormalize(&mut v, &basis) {
                basis.push(v);
                break;
            }
            attempts += 1;
            if attempts > 16 {
                return Err(Error::ZeroNorm {
                    what: "text-head noise basis",
                });
            }
        }
    }

    let chord = std::f64::consts::SQRT_2 * (sigma as f64 / std::f64::consts::SQRT_2).tanh();
    let theta = 2.0 * f64::asin(chord / 2.0);
    let (sin, cos) = theta.sin_cos();
    let out = rows.data_mut();
    for i in 0..k {
        let row = &clean[i * d..(i + 1) * d];
        let mut rotated = row.to_vec();
        for pair in basis.chunks(2) {
            let (b0, b1) = (&pair[0], &pair[1]);
            let x: f64 = row.iter().zip(b0).map(|(a, b)| a * b).sum();
            let y: f64 = row.iter().zip(b1).map(|(a, b)| a * b).sum();
            let dx = x * (cos - 1.0) - y * sin;
            let dy = x * sin + y * (cos - 1.0);
            for ((r, &e0), &e1) in rotated.iter_mut().zip(b0).zip(b1) {
                *r += dx * e0 + dy * e1;
            }
        }
        for (o, &r) in out[i * d..(i + 1) * d].iter_mut().zip(&rotated) {
            *o = r as f32;
        }
    }
    Ok(())
}

/// Project v orthogonal to the given orthonormal set and rescale to unit
/// norm. False when v was (numerically) inside the span already.
fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) -> bool {
    for b in basis {
        let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
        for (e, &c) in v.iter_mut().zip(b) {
            *e -= dot * c;
        }
    }
    let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return false;
    }
    for e in v.iter_mut() {
        *e /= norm;
    }
    true
}

/// A complete read-out path from images to downstream logits.
#[derive(Debug, Clone)]
pub enum OutputTransform {
    Mapped(HardCodedMapping),
    TextHead(TextPromptHead),
}

impl OutputTransform {
    pub fn downstream_classes(&self) -> usize {
        match self {
            OutputTransform::Mapped(m) => m.downstream_classes(),
            OutputTransform::TextHead(h) => h.rows.shape()[0],
        }
    }

    pub fn downstream_logits(
        &self,
        g: &mut Graph,
        backbone: &FrozenBackbone,
        x: Var,
    ) -> Result<Var> {
        match self {
            OutputTransform::Mapped(mapping) => {
                let logits = backbone.forward_logits(g, x)?;
                map_logits(g, logits, mapping)
            }
            OutputTransform::TextHead(head) => {
                if backbone.spec.kind != BackboneKind::DualEncoder {
                    return Err(Error::BadArchSpec {
                        detail: "text-prompt head requires a dual encoder".into(),
                    });
                }
                let emb = backbone.forward_penultimate(g, x)?;
                head.logits(g, emb)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, ArchSpec};
    use crate::data::{generate_synthetic, Stats, TaskSpec};
    use proptest::prelude::*;

    #[test]
    fn mapping_validation_catches_bad_assignments() {
        assert!(matches!(
            HardCodedMapping::new(vec![0, 1, 2], 2),
            Err(Error::TooManyDownstreamClasses { .. })
        ));
        assert!(matches!(
            HardCodedMapping::new(vec![0, 5], 4),
            Err(Error::MappingTargetOutOfRange { target: 5, .. })
        ));
        assert!(matches!(
            HardCodedMapping::new(vec![1, 1], 4),
            Err(Error::MappingNotInjective { target: 1 })
        ));
        assert!(HardCodedMapping::new(vec![3, 0], 4).is_ok());
    }

    #[test]
    fn class_means_match_hand_computation() {
        let features = Tensor::from_vec(
            &[4, 2],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        )
        .unwrap();
        let means = class_mean_features(&features, &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(means.data(), &[3.0, 4.0, 5.0, 6.0]);
        assert!(matches!(
            class_mean_features(&features, &[0, 0, 0, 0], 2),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn semantic_mapping_recovers_a_permutation() {
        // pretrain prototypes: 4 orthogonal directions
        let pre = Tensor::from_vec(
            &[4, 4],
            vec![
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        )
        .unwrap();
        // downstream means: pretrain directions 2,0,3 slightly perturbed
        let down = Tensor::from_vec(
            &[3, 4],
            vec![
                0.1, 0.0, 2.0, 0.1, //
                1.5, 0.1, 0.0, 0.0, //
                0.0, 0.1, 0.1, 0.9,
            ],
        )
        .unwrap();
        let mapping = semantic_mapping(&down, &pre).unwrap();
        assert_eq!(mapping.targets(), &[2, 0, 3]);
    }

    #[test]
    fn semantic_mapping_is_greedy_globally() {
        // row 0 prefers col 0 weakly, row 1 prefers col 0 strongly; the
        // global greedy gives col 0 to row 1 and col 1 to row 0
        let pre = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let down = Tensor::from_vec(&[2, 2], vec![1.0, 0.9, 1.0, 0.1]).unwrap();
        let mapping = semantic_mapping(&down, &pre).unwrap();
        assert_eq!(mapping.targets(), &[1, 0]);
    }

    #[test]
    fn arbitrary_mapping_is_seeded_and_injective() {
        let a = arbitrary_mapping(4, 8, 3).unwrap();
        let b = arbitrary_mapping(4, 8, 3).unwrap();
        assert_eq!(a, b);
        let mut c = None;
        for seed in 4..20 {
            let m = arbitrary_mapping(4, 8, seed).unwrap();
            if m != a {
                c = Some(m);
                break;
            }
        }
        assert!(c.is_some(), "16 seeds all produced the same assignment");
    }

    #[test]
    fn swapped_mapping_rotates_without_fixed_points() {
        let base = HardCodedMapping::new(vec![2, 0, 3, 1], 4).unwrap();
        let swapped = swapped_mapping(&base);
        assert_eq!(swapped.targets(), &[0, 3, 1, 2]);
        for i in 0..4 {
            assert_ne!(swapped.targets()[i], base.targets()[i]);
        }
        let mut sorted_a = base.targets().to_vec();
        let mut sorted_b = swapped.targets().to_vec();
        sorted_a.sort();
        sorted_b.sort();
        assert_eq!(sorted_a, sorted_b, "rotation must keep the target set");
    }

    #[test]
    fn mapping_file_format_roundtrips() {
        let mapping = HardCodedMapping::new(vec![5, 2, 7], 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mapping.txt");
        save_mapping(&mapping, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "0 -> 5\n1 -> 2\n2 -> 7\n");
        let back = load_mapping(&path, 8).unwrap();
        assert_eq!(back, mapping);
    }

    #[test]
    fn mapping_load_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mapping.txt");
        std::fs::write(&path, "0 -> 1\n1 -> 1\n").unwrap();
        assert!(matches!(
            load_mapping(&path, 4),
            Err(Error::MappingNotInjective { .. })
        ));
        std::fs::write(&path, "0 -> 9\n").unwrap();
        assert!(matches!(
            load_mapping(&path, 4),
            Err(Error::MappingTargetOutOfRange { .. })
        ));
        std::fs::write(&path, "1 -> 0\n").unwrap();
        assert!(matches!(load_mapping(&path, 4), Err(Error::BadField { .. })));
    }

    #[test]
    fn text_head_sigma_zero_copies_table_rows() {
        let table = ClassEmbeddingTable::new(8, 16, 5);
        let head = TextPromptHead::new(&table, &[3, 1], 10.0, 0.0, 0).unwrap();
        assert_eq!(&head.rows.data()[..16], &table.rows.data()[3 * 16..4 * 16]);
        assert_eq!(&head.rows.data()[16..], &table.rows.data()[16..2 * 16]);
    }

    #[test]
    fn text_head_rows_sit_at_the_saturating_noise_distance() {
        // every row moves by exactly sqrt(2) * tanh(sigma / sqrt(2)):
        // near sigma for small sigma, capped at the expected distance
        // between two independent rows as sigma grows
        let table = ClassEmbeddingTable::new(8, 16, 5);
        let base = TextPromptHead::new(&table, &[0, 1, 2], 10.0, 0.0, 7).unwrap();
        for sigma in [0.2f32, 0.4, 0.8, 1.6, 40.0] {
            let noisy = TextPromptHead::new(&table, &[0, 1, 2], 10.0, sigma, 7).unwrap();
            let want = 2f64.sqrt() * (sigma as f64 / 2f64.sqrt()).tanh();
            for row in 0..3 {
                let dist: f64 = noisy.rows.data()[row * 16..(row + 1) * 16]
                    .iter()
                    .zip(&base.rows.data()[row * 16..(row + 1) * 16])
                    .map(|(&a, &b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(
                    (dist - want).abs() < 1e-5,
                    "sigma {sigma} row {row}: distance {dist}, want {want}"
                );
            }
        }
        let tiny = TextPromptHead::new(&table, &[0, 1, 2], 10.0, 0.05, 7).unwrap();
        let d0: f64 = tiny.rows.data()[..16]
            .iter()
            .zip(&base.rows.data()[..16])
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((d0 - 0.05).abs() < 1e-4, "small sigma is linear: {d0}");
    }

    #[test]
    fn text_head_noise_never_collides_two_classes() {
        // the corruption is a rotation, so every pairwise dot product of
        // the row set must survive it exactly; this is what keeps large
        // sigmas recoverable instead of merging classes. odd and even
        // target counts exercise both basis-pairing paths.
        let table = ClassEmbeddingTable::new(8, 16, 5);
        for targets in [vec![0usize, 1, 2], vec![0, 1, 2, 3]] {
            let base = TextPromptHead::new(&table, &targets, 10.0, 0.0, 7).unwrap();
            let noisy = TextPromptHead::new(&table, &targets, 10.0, 1.6, 7).unwrap();
            let k = targets.len();
            for i in 0..k {
                for j in 0..k {
                    let dot = |t: &Tensor, a: usize, b: usize| -> f64 {
                        t.data()[a * 16..(a + 1) * 16]
                            .iter()
                            .zip(&t.data()[b * 16..(b + 1) * 16])
                            .map(|(&x, &y)| x as f64 * y as f64)
                            .sum()
                    };
                    let before = dot(&base.rows, i, j);
                    let after = dot(&noisy.rows, i, j);
                    assert!(
                        (before - after).abs() < 1e-4,
                        "k {k} pair ({i},{j}): {before} vs {after}"
                    );
                }
            }
        }
    }

    #[test]
    fn text_head_requires_dual_encoder() {
        let spec = ArchSpec::classifier((3, 16, 16), vec![8, 16], 4, 0);
        let bb = build_backbone(
            &spec,
            Stats {
                mean: vec![0.5; 3],
                std: vec![0.25; 3],
            },
        )
        .unwrap();
        let table = ClassEmbeddingTable::new(4, 16, 0);
        let head = TextPromptHead::new(&table, &[0, 1], 10.0, 0.0, 0).unwrap();
        let transform = OutputTransform::TextHead(head);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 16, 16]), false);
        assert!(matches!(
            transform.downstream_logits(&mut g, &bb, x),
            Err(Error::BadArchSpec { .. })
        ));
    }

    #[test]
    fn mapped_transform_gathers_the_assigned_columns() {
        let mut task = TaskSpec::new(4, 8, 3);
        task.dims = (3, 16, 16);
        let set = generate_synthetic(&task).unwrap();
        let spec = ArchSpec::classifier((3, 16, 16), vec![8, 16], 4, 0);
        let bb = build_backbone(&spec, set.stats.clone()).unwrap();
        let mapping = HardCodedMapping::new(vec![3, 1], 4).unwrap();
        let transform = OutputTransform::Mapped(mapping);

        let x = set.normalized_all();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let full = bb.forward_logits(&mut g, xv).unwrap();
        let down = transform.downstream_logits(&mut g, &bb, xv).unwrap();
        let full_v = g.value(full).clone();
        let down_v = g.value(down).clone();
        assert_eq!(down_v.shape(), &[8, 2]);
        for i in 0..8 {
            assert_eq!(down_v.data()[i * 2], full_v.data()[i * 4 + 3]);
            assert_eq!(down_v.data()[i * 2 + 1], full_v.data()[i * 4 + 1]);
        }
    }

    fn softmax_f64(row: &[f32]) -> Vec<f64> {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| ((v as f64) - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    }

    proptest! {
        // softmax(map_logits(l)) must equal the full softmax restricted to
        // the mapped entries and renormalized
        #[test]
        fn gather_then_softmax_is_restriction_renormalization(
            raw in proptest::collection::vec(-4.0f32..4.0, 8),
            pick in proptest::sample::subsequence(vec![0usize, 1, 2, 3, 4, 5, 6, 7], 2..=6),
        ) {
            let mapping = HardCodedMapping::new(pick.clone(), 8).unwrap();
            let logits = Tensor::from_vec(&[1, 8], raw.clone()).unwrap();
            let mut g = Graph::new();
            let lv = g.leaf(logits, false);
            let mapped = map_logits(&mut g, lv, &mapping).unwrap();
            let direct = softmax_f64(g.value(mapped).data());
            let full = softmax_f64(&raw);
            let restricted_sum: f64 = pick.iter().map(|&j| full[j]).sum();
            for (i, &j) in pick.iter().enumerate() {
                let renorm = full[j] / restricted_sum;
                prop_assert!((direct[i] - renorm).abs() <= 1e-6,
                    "entry {i}: {} vs {}", direct[i], renorm);
            }
        }
    }
}
