//! Small convolutional backbones that stand in for large pretrained models:
//! a K-way classifier and a dual encoder scoring images against a frozen
//! class-embedding table by temperature-scaled cosine similarity.
//!
//! A backbone starts trainable, is pretrained once, then frozen. Frozen
//! weights enter every graph as non-differentiable leaves, so downstream
//! tuning never computes or applies weight gradients.

use crate::data::{LabeledDataset, Stats};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::io;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Classifier,
    DualEncoder,
}

impl BackboneKind {
    fn as_str(&self) -> &'static str {
        match self {
            BackboneKind::Classifier => "classifier",
            BackboneKind::DualEncoder => "dual_encoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub kind: BackboneKind,
    /// Input dims (C, H, W) after any resizing.
    pub input: (usize, usize, usize),
    /// Output channels per conv stage; each stage halves H and W.
    pub channels: Vec<usize>,
    /// Label count; for the dual encoder, also the embedding-table rows.
    pub num_classes: usize,
    /// Dual encoder embedding width.
    pub embed_dim: usize,
    /// Cosine logit scale for the dual encoder.
    pub temperature: f32,
    pub seed: u64,
}

impl ArchSpec {
    pub fn classifier(input: (usize, usize, usize), channels: Vec<usize>, num_classes: usize, seed: u64) -> Self {
        ArchSpec {
            kind: BackboneKind::Classifier,
            input,
            channels,
            num_classes,
            embed_dim: 0,
            temperature: 0.0,
            seed,
        }
    }

    pub fn dual_encoder(
        input: (usize, usize, usize),
        channels: Vec<usize>,
        num_classes: usize,
        embed_dim: usize,
        temperature: f32,
        seed: u64,
    ) -> Self {
        ArchSpec {
            kind: BackboneKind::DualEncoder,
            input,
            channels,
            num_classes,
            embed_dim,
            temperature,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::BadArchSpec { detail });
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("input dims {c}x{h}x{w} must all be positive"));
        }
        if self.channels.is_empty() {
            return bad("at least one conv stage is required".into());
        }
        if self.channels.iter().any(|&ch| ch == 0) {
            return bad(format!("zero-width stage in channels {:?}", self.channels));
        }
        let down = 1usize << self.channels.len();
        if h % down != 0 || w % down != 0 {
            return bad(format!(
                "{} stages pool {h}x{w} by {down}; extents must be divisible",
                self.channels.len()
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} below 2", self.num_classes));
        }
        if self.kind == BackboneKind::DualEncoder {
            if self.embed_dim < 2 {
                return bad(format!("embed_dim {} below 2", self.embed_dim));
            }
            if !(self.temperature > 0.0) || !self.temperature.is_finite() {
                return bad(format!("temperature {} must be positive", self.temperature));
            }
        }
        Ok(())
    }

    /// Flattened width after the conv stages.
    pub fn feature_dim(&self) -> usize {
        let (_, h, w) = self.input;
        let down = 1usize << self.channels.len();
        self.channels.last().unwrap() * (h / down) * (w / down)
    }
}

/// Frozen stand-in for a text encoder: one seeded random unit row per
/// pretraining class. Rows never receive gradients.
#[derive(Debug, Clone)]
pub struct ClassEmbeddingTable {
    pub rows: Tensor,
    pub seed: u64,
}

impl ClassEmbeddingTable {
    pub fn new(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Tensor::gaussian(&[classes, dim], 1.0, &mut rng);
        for r in 0..classes {
            let row = &mut rows.data_mut()[r * dim..(r + 1) * dim];
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v = (*v as f64 / norm) as f32;
            }
        }
        ClassEmbeddingTable { rows, seed }
    }
}

#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    pub spec: ArchSpec,
    /// (weight [Cout,Cin,3,3], bias [Cout]) per stage.
    convs: Vec<(Tensor, Tensor)>,
    /// Classifier head [K, feat] or dual projection [E, feat].
    head_w: Tensor,
    head_b: Tensor,
    pub table: Option<ClassEmbeddingTable>,
    /// Preprocessing stats the model was trained with.
    pub stats: Stats,
    frozen: bool,
}

struct ParamVars {
    convs: Vec<(Var, Var)>,
    head: (Var, Var),
}

const INIT_RANGE: f32 = 0.03;
const TABLE_SEED_SALT: u64 = 0xC1A5_55E5;
const FEATURE_CHUNK: usize = 64;

/// Initialize a backbone with seeded uniform(-0.03, 0.03) weights and zero
/// biases. `stats` are the preprocessing statistics the model will assume
/// at every later forward pass.
pub fn build_backbone(spec: &ArchSpec, stats: Stats) -> Result<FrozenBackbone> {
    spec.validate()?;
    if stats.mean.len() != spec.input.0 || stats.std.len() != spec.input.0 {
        return Err(Error::ShapeMismatch {
            op: "build_backbone",
            detail: format!(
                "stats cover {}/{} channels, input has {}",
                stats.mean.len(),
                stats.std.len(),
                spec.input.0
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut convs = Vec::with_capacity(spec.channels.len());
    let mut cin = spec.input.0;
    for &cout in &spec.channels {
        let w = Tensor::uniform(&[cout, cin, 3, 3], -INIT_RANGE, INIT_RANGE, &mut rng);
        let b = Tensor::zeros(&[cout]);
        convs.push((w, b));
        cin = cout;
    }
    let head_rows = match spec.kind {
        BackboneKind::Classifier => spec.num_classes,
        BackboneKind::DualEncoder => spec.embed_dim,
    };
    let head_w = Tensor::uniform(&[head_rows, spec.feature_dim()], -INIT_RANGE, INIT_RANGE, &mut rng);
    let head_b = Tensor::zeros(&[head_rows]);
    let table = match spec.kind {
        BackboneKind::Classifier => None,
        // separate stream so the table is independent of the weight draw
        BackboneKind::DualEncoder => Some(ClassEmbeddingTable::new(
            spec.num_classes,
            spec.embed_dim,
            spec.seed ^ TABLE_SEED_SALT,
        )),
    };
    Ok(FrozenBackbone {
        spec: spec.clone(),
        convs,
        head_w,
        head_b,
        table,
        stats,
        frozen: false,
    })
}

impl FrozenBackbone {
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Trainable copy for fine-tuning baselines; the original stays frozen.
    pub fn unfrozen_clone(&self) -> FrozenBackbone {
        let mut copy = self.clone();
        copy.frozen = false;
        copy
    }

    /// Trainable copy with a fresh readout for a new label space: the
    /// classifier gets a seeded head, the dual encoder a fresh class table.
    /// Conv weights (and the dual projection) carry over.
    pub fn with_downstream_head(&self, classes: usize, seed: u64) -> Result<FrozenBackbone> {
        let mut copy = self.unfrozen_clone();
        copy.spec.num_classes = classes;
        copy.spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match copy.spec.kind {
            BackboneKind::Classifier => {
                copy.head_w = Tensor::uniform(
                    &[classes, copy.spec.feature_dim()],
                    -INIT_RANGE,
                    INIT_RANGE,
                    &mut rng,
                );
                copy.head_b = Tensor::zeros(&[classes]);
            }
            BackboneKind::DualEncoder => {
                copy.table = Some(ClassEmbeddingTable::new(classes, copy.spec.embed_dim, seed));
            }
        }
        Ok(copy)
    }

    fn leaf_params(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let convs = self
            .convs
            .iter()
            .map(|(w, b)| (g.leaf(w.clone(), trainable), g.leaf(b.clone(), trainable)))
            .collect();
        // the dual projection is bias-free: a shared offset moves every
        // embedding identically and destabilizes the cosine head
        let bias_trainable = trainable && self.spec.kind == BackboneKind::Classifier;
        let head = (
            g.leaf(self.head_w.clone(), trainable),
            g.leaf(self.head_b.clone(), bias_trainable),
        );
        ParamVars { convs, head }
    }

    /// conv3x3(pad 1) + relu + maxpool2x2 per stage, then flatten.
    fn stage_features(&self, g: &mut Graph, x: Var, pv: &ParamVars) -> Result<Var> {
        let mut cur = x;
        for &(w, b) in &pv.convs {
            cur = g.conv2d(cur, w, b, 1, 1)?;
            cur = g.relu(cur);
            cur = g.max_pool2x2(cur)?;
        }
        let n = g.value(cur).shape()[0];
        g.reshape(cur, &[n, self.spec.feature_dim()])
    }

    fn penultimate_with(&self, g: &mut Graph, x: Var, pv: &ParamVars) -> Result<Var> {
        let feat = self.stage_features(g, x, pv)?;
        match self.spec.kind {
            BackboneKind::Classifier => Ok(feat),
            BackboneKind::DualEncoder => g.linear(feat, pv.head.0, pv.head.1),
        }
    }

    fn logits_with(&self, g: &mut Graph, x: Var, pv: &ParamVars) -> Result<Var> {
        match self.spec.kind {
            BackboneKind::Classifier => {
                let feat = self.stage_features(g, x, pv)?;
                g.linear(feat, pv.head.0, pv.head.1)
            }
            BackboneKind::DualEncoder => {
                let emb = self.penultimate_with(g, x, pv)?;
                let rows = g.leaf(self.table.as_ref().unwrap().rows.clone(), false);
                let sims = g.cosine_sim_matrix(emb, rows)?;
                Ok(g.scale(sims, self.spec.temperature))
            }
        }
    }

    /// Class logits [N, K] for normalized (and possibly prompted) images.
    /// Weights are differentiable only while the backbone is unfrozen.
    pub fn forward_logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let pv = self.leaf_params(g, !self.frozen);
        self.logits_with(g, x, &pv)
    }

    /// Penultimate features as a graph node, for heads built on top of the
    /// frozen model (gradient still flows to the input).
    pub fn forward_penultimate(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let pv = self.leaf_params(g, !self.frozen);
        self.penultimate_with(g, x, &pv)
    }

    /// Features before the classification decision: the flattened conv
    /// output for the classifier, the projected embedding for the dual
    /// encoder. Input must already be normalized. Runs in chunks without
    /// building gradients.
    pub fn penultimate_features(&self, images: &Tensor) -> Result<Tensor> {
        if images.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "penultimate_features",
                detail: format!("want [N,C,H,W], got {:?}", images.shape()),
            });
        }
        let n = images.shape()[0];
        let (c, h, w) = self.spec.input;
        let per = c * h * w;
        let dim = match self.spec.kind {
            BackboneKind::Classifier => self.spec.feature_dim(),
            BackboneKind::DualEncoder => self.spec.embed_dim,
        };
        let mut out = Tensor::zeros(&[n, dim]);
        let mut start = 0;
        while start < n {
            let stop = (start + FEATURE_CHUNK).min(n);
            let len = stop - start;
            let chunk = Tensor::from_vec(
                &[len, c, h, w],
                images.data()[start * per..stop * per].to_vec(),
            )?;
            let mut g = Graph::new();
            let x = g.leaf(chunk, false);
            let pv = self.leaf_params(&mut g, false);
            let feat = self.penultimate_with(&mut g, x, &pv)?;
            out.data_mut()[start * dim..stop * dim].copy_from_slice(g.value(feat).data());
            start = stop;
        }
        Ok(out)
    }

    /// Supervised SGD on cross-entropy. Returns the mean loss per epoch.
    /// Refuses to touch a frozen backbone.
    pub fn pretrain(
        &mut self,
        train: &LabeledDataset,
        epochs: usize,
        batch: usize,
        lr: f32,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if self.frozen {
            return Err(Error::BackboneFrozen { op: "pretrain" });
        }
        if train.is_empty() {
            return Err(Error::Empty { what: "pretraining set" });
        }
        if train.num_classes() != self.spec.num_classes {
            return Err(Error::BadArchSpec {
                detail: format!(
                    "backbone expects {} classes, dataset has {}",
                    self.spec.num_classes,
                    train.num_classes()
                ),
            });
        }
        let batch = batch.max(1);
        let mut history = Vec::with_capacity(epochs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for epoch in 0..epochs {
            rng.set_stream(epoch as u64);
            let mut idx: Vec<usize> = (0..train.len()).collect();
            for i in (1..idx.len()).rev() {
                let j = rand::Rng::gen_range(&mut rng, 0..=i);
                idx.swap(i, j);
            }
            let mut loss_sum = 0.0f64;
            let mut seen = 0usize;
            for chunk in idx.chunks(batch) {
                let (x, labels) = train.normalized_batch(chunk);
                let mut g = Graph::new();
                let xv = g.leaf(x, false);
                let pv = self.leaf_params(&mut g, true);
                let logits = self.logits_with(&mut g, xv, &pv)?;
                let loss = g.softmax_cross_entropy(logits, &labels)?;
                let loss_val = g.scalar_f64(loss);
                if !loss_val.is_finite() {
                    return Err(Error::NonFinite { op: "pretrain" });
                }
                g.backward(loss)?;
                self.apply_sgd(&g, &pv, lr);
                loss_sum += loss_val * chunk.len() as f64;
                seen += chunk.len();
            }
            history.push(loss_sum / seen as f64);
        }
        Ok(history)
    }

    fn apply_sgd(&mut self, g: &Graph, pv: &ParamVars, lr: f32) {
        let step = |param: &mut Tensor, var: Var| {
            if let Some(grad) = g.grad(var) {
                for (p, &gv) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= lr * gv;
                }
            }
        };
        for (slot, &(wv, bv)) in self.convs.iter_mut().zip(&pv.convs) {
            step(&mut slot.0, wv);
            step(&mut slot.1, bv);
        }
        step(&mut self.head_w, pv.head.0);
        step(&mut self.head_b, pv.head.1);
    }

    /// Concatenated little-endian bytes of every parameter, in a fixed
    /// order. Lets tests assert bit-level weight immutability.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push = |t: &Tensor| {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (w, b) in &self.convs {
            push(w);
            push(b);
        }
        push(&self.head_w);
        push(&self.head_b);
        if let Some(table) = &self.table {
            push(&table.rows);
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (i, (w, b)) in self.convs.iter().enumerate() {
            tensors.insert(format!("conv{i}_w"), w.clone());
            tensors.insert(format!("conv{i}_b"), b.clone());
        }
        tensors.insert("head_w".to_string(), self.head_w.clone());
        tensors.insert("head_b".to_string(), self.head_b.clone());
        if let Some(table) = &self.table {
            tensors.insert("table".to_string(), table.rows.clone());
        }
        tensors.insert(
            "stats_mean".to_string(),
            Tensor::from_vec(&[self.stats.mean.len()], self.stats.mean.clone())?,
        );
        tensors.insert(
            "stats_std".to_string(),
            Tensor::from_vec(&[self.stats.std.len()], self.stats.std.clone())?,
        );
        let mut meta = BTreeMap::new();
        let (c, h, w) = self.spec.input;
        meta.insert("kind".to_string(), self.spec.kind.as_str().to_string());
        meta.insert("input".to_string(), format!("{c}x{h}x{w}"));
        meta.insert(
            "channels".to_string(),
            self.spec
                .channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        meta.insert("num_classes".to_string(), self.spec.num_classes.to_string());
        meta.insert("seed".to_string(), self.spec.seed.to_string());
        meta.insert("frozen".to_string(), self.frozen.to_string());
        if self.spec.kind == BackboneKind::DualEncoder {
            meta.insert("embed_dim".to_string(), self.spec.embed_dim.to_string());
            meta.insert("temperature".to_string(), format!("{}", self.spec.temperature));
            meta.insert(
                "table_seed".to_string(),
                self.table.as_ref().unwrap().seed.to_string(),
            );
        }
        io::save_checkpoint(dir, &tensors, &meta)
    }

    pub fn load(dir: &Path) -> Result<FrozenBackbone> {
        let (mut tensors, meta) = io::load_checkpoint(dir)?;
        let meta_path = dir.join(io::META_FILE);
        let kind_raw: String = io::meta_get(&meta, &meta_path, "kind")?;
        let kind = match kind_raw.as_str() {
            "classifier" => BackboneKind::Classifier,
            "dual_encoder" => BackboneKind::DualEncoder,
            other => {
                return Err(Error::BadField {
                    path: meta_path,
                    field: "kind".into(),
                    detail: format!("unknown backbone kind {other:?}"),
                })
            }
        };
        let input_raw: String = io::meta_get(&meta, &meta_path, "input")?;
        let dims: Vec<usize> = input_raw
            .split('x')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::BadField {
                path: meta_path.clone(),
                field: "input".into(),
                detail: format!("cannot parse {input_raw:?} as CxHxW"),
            })?;
        if dims.len() != 3 {
            return Err(Error::BadField {
                path: meta_path,
                field: "input".into(),
                detail: format!("want 3 extents, got {}", dims.len()),
            });
        }
        let channels_raw: String = io::meta_get(&meta, &meta_path, "channels")?;
        let channels: Vec<usize> = channels_raw
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::BadField {
                path: meta_path.clone(),
                field: "channels".into(),
                detail: format!("cannot parse {channels_raw:?}"),
            })?;
        let num_classes: usize = io::meta_get(&meta, &meta_path, "num_classes")?;
        let seed: u64 = io::meta_get(&meta, &meta_path, "seed")?;
        let frozen: bool = io::meta_get(&meta, &meta_path, "frozen")?;
        let spec = match kind {
            BackboneKind::Classifier => {
                ArchSpec::classifier((dims[0], dims[1], dims[2]), channels, num_classes, seed)
            }
            BackboneKind::DualEncoder => ArchSpec::dual_encoder(
                (dims[0], dims[1], dims[2]),
                channels,
                num_classes,
                io::meta_get(&meta, &meta_path, "embed_dim")?,
                io::meta_get(&meta, &meta_path, "temperature")?,
                seed,
            ),
        };
        spec.validate()?;

        let mut take = |name: &str| {
            tensors.remove(name).ok_or_else(|| Error::MissingField {
                path: dir.to_path_buf(),
                field: format!("{name}.{}", io::TENSOR_EXT),
            })
        };
        let expect = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::BadField {
                    path: dir.join(format!("{name}.{}", io::TENSOR_EXT)),
                    field: "shape".into(),
                    detail: format!("want {:?}, got {:?}", shape, t.shape()),
                });
            }
            Ok(())
        };
        let mut convs = Vec::with_capacity(spec.channels.len());
        let mut cin = spec.input.0;
        for (i, &cout) in spec.channels.iter().enumerate() {
            let w = take(&format!("conv{i}_w"))?;
            let b = take(&format!("conv{i}_b"))?;
            expect(&format!("conv{i}_w"), &w, &[cout, cin, 3, 3])?;
            expect(&format!("conv{i}_b"), &b, &[cout])?;
            convs.push((w, b));
            cin = cout;
        }
        let head_rows = match spec.kind {
            BackboneKind::Classifier => spec.num_classes,
            BackboneKind::DualEncoder => spec.embed_dim,
        };
        let head_w = take("head_w")?;
        let head_b = take("head_b")?;
        expect("head_w", &head_w, &[head_rows, spec.feature_dim()])?;
        expect("head_b", &head_b, &[head_rows])?;
        let table = match spec.kind {
            BackboneKind::Classifier => None,
            BackboneKind::DualEncoder => {
                let rows = take("table")?;
                expect("table", &rows, &[spec.num_classes, spec.embed_dim])?;
                Some(ClassEmbeddingTable {
                    rows,
                    seed: io::meta_get(&meta, &meta_path, "table_seed")?,
                })
            }
        };
        let stats_mean = take("stats_mean")?;
        let stats_std = take("stats_std")?;
        expect("stats_mean", &stats_mean, &[spec.input.0])?;
        expect("stats_std", &stats_std, &[spec.input.0])?;
        Ok(FrozenBackbone {
            spec,
            convs,
            head_w,
            head_b,
            table,
            stats: Stats {
                mean: stats_mean.into_data(),
                std: stats_std.into_data(),
            },
            frozen,
        })
    }
}
