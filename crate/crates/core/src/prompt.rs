//! Visual prompts: a single learnable pixel perturbation added to every
//! input, in one of three layouts. Padding writes a border frame, fixed
//! patch writes a top-left square, random patch writes the same square at
//! a per-image location drawn fresh each training batch and replayed from
//! a fixed stream during evaluation.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::io;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    Padding,
    FixedPatch,
    RandomPatch,
}

impl TemplateKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateKind::Padding => "padding",
            TemplateKind::FixedPatch => "fixed_patch",
            TemplateKind::RandomPatch => "random_patch",
        }
    }

    pub fn parse(s: &str) -> Option<TemplateKind> {
        match s {
            "padding" => Some(TemplateKind::Padding),
            "fixed_patch" => Some(TemplateKind::FixedPatch),
            "random_patch" => Some(TemplateKind::RandomPatch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptSpec {
    pub template: TemplateKind,
    pub p: usize,
    /// Model input dims (C, H, W).
    pub dims: (usize, usize, usize),
}

impl PromptSpec {
    pub fn new(template: TemplateKind, p: usize, dims: (usize, usize, usize)) -> Self {
        PromptSpec { template, p, dims }
    }

    /// Largest legal p: half the smaller extent for padding (a thicker
    /// frame would self-overlap), the full extent for patches.
    pub fn max_p(&self) -> usize {
        let (_, h, w) = self.dims;
        match self.template {
            TemplateKind::Padding => h.min(w) / 2,
            TemplateKind::FixedPatch | TemplateKind::RandomPatch => h.min(w),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.dims;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::BadDatasetSpec {
                detail: format!("prompt over empty image {c}x{h}x{w}"),
            });
        }
        let max = self.max_p();
        if self.p == 0 || self.p > max {
            return Err(Error::PromptSizeOutOfBounds {
                template: self.template.as_str(),
                p: self.p,
                height: h,
                width: w,
                max,
            });
        }
        Ok(())
    }

    /// Learnable parameter count: 2Cp(H + W - 2p) for the frame, Cp^2 for
    /// the squares.
    pub fn param_count(&self) -> usize {
        let (c, h, w) = self.dims;
        let p = self.p;
        match self.template {
            TemplateKind::Padding => 2 * c * p * (h + w - 2 * p),
            TemplateKind::FixedPatch | TemplateKind::RandomPatch => c * p * p,
        }
    }

    /// Flat within-image offsets (c*H*W + y*W + x) of the prompted pixels,
    /// anchored at the top-left corner, in row-major scan order.
    pub fn offsets(&self) -> Vec<usize> {
        let (c, h, w) = self.dims;
        let p = self.p;
        let mut out = Vec::with_capacity(self.param_count());
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let hit = match self.template {
                        TemplateKind::Padding => y < p || y >= h - p || x < p || x >= w - p,
                        TemplateKind::FixedPatch | TemplateKind::RandomPatch => y < p && x < p,
                    };
                    if hit {
                        out.push(ch * h * w + y * w + x);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PromptInit {
    Zeros,
    /// Symmetric uniform noise with the given half-width.
    Uniform(f32),
}

#[derive(Debug, Clone)]
pub struct VisualPrompt {
    pub spec: PromptSpec,
    /// Flat [param_count] values, aligned with `spec.offsets()`.
    pub params: Tensor,
    pub seed: u64,
}

pub fn init_prompt(spec: PromptSpec, init: PromptInit, seed: u64) -> Result<VisualPrompt> {
    spec.validate()?;
    let n = spec.param_count();
    let params = match init {
        PromptInit::Zeros => Tensor::zeros(&[n]),
        PromptInit::Uniform(amplitude) => {
            if !(amplitude > 0.0) || !amplitude.is_finite() {
                return Err(Error::BadMagnitude {
                    magnitude: amplitude,
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::uniform(&[n], -amplitude, amplitude, &mut rng)
        }
    };
    Ok(VisualPrompt { spec, params, seed })
}

/// Attaches a prompt to image batches. One value is shared across the
/// whole dataset; only the placement varies for the random-patch layout.
pub struct Prompter {
    spec: PromptSpec,
    offsets: Arc<Vec<usize>>,
    train_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    seed: u64,
}

impl Prompter {
    pub fn new(spec: PromptSpec, seed: u64) -> Result<Prompter> {
        spec.validate()?;
        let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
        // placements during training come from their own stream so the
        // eval replay (stream 0) never collides with it
        train_rng.set_stream(1);
        Ok(Prompter {
            spec,
            offsets: Arc::new(spec.offsets()),
            train_rng,
            eval_rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        })
    }

    pub fn spec(&self) -> PromptSpec {
        self.spec
    }

    fn shifts(&mut self, n: usize, eval: bool) -> Vec<usize> {
        match self.spec.template {
            TemplateKind::Padding | TemplateKind::FixedPatch => vec![0],
            TemplateKind::RandomPatch => {
                let (_, h, w) = self.spec.dims;
                let p = self.spec.p;
                let rng = if eval { &mut self.eval_rng } else { &mut self.train_rng };
                (0..n)
                    .map(|_| {
                        let dy = rng.gen_range(0..=h - p);
                        let dx = rng.gen_range(0..=w - p);
                        dy * w + dx
                    })
                    .collect()
            }
        }
    }

    /// Prompted batch for a training step; random placements are drawn
    /// fresh from the training stream.
    pub fn attach_train(&mut self, g: &mut Graph, x: Var, phi: Var) -> Result<Var> {
        let n = g.value(x).shape()[0];
        let shifts = self.shifts(n, false);
        g.prompt_add(x, phi, self.offsets.clone(), shifts)
    }

    /// Rewind the evaluation placement stream. Call once at the start of
    /// every evaluation pass so repeated evaluations see identical inputs.
    pub fn begin_eval(&mut self) {
        self.eval_rng = ChaCha8Rng::seed_from_u64(self.seed);
    }

    pub fn attach_eval(&mut self, g: &mut Graph, x: Var, phi: Var) -> Result<Var> {
        let n = g.value(x).shape()[0];
        let shifts = self.shifts(n, true);
        g.prompt_add(x, phi, self.offsets.clone(), shifts)
    }
}

/// Render the prompt as a binary PPM (P6) image: prompted pixels min-max
/// scaled over the prompt's own values, everything else mid-gray.
pub fn export_prompt_ppm(prompt: &VisualPrompt, path: &Path) -> Result<()> {
    let (c, h, w) = prompt.spec.dims;
    let offsets = prompt.spec.offsets();
    let vals = prompt.params.data();
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let scale = |v: f32| -> u8 {
        if span > 1e-12 {
            (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            128
        }
    };
    // planar prompt values -> interleaved RGB rows; single-channel prompts
    // replicate, extra channels beyond the third are not drawn
    let mut pixels = vec![128u8; 3 * h * w];
    for (i, &off) in offsets.iter().enumerate() {
        let ch = off / (h * w);
        let pix = off % (h * w);
        let byte = scale(vals[i]);
        if c == 1 {
            for k in 0..3 {
                pixels[pix * 3 + k] = byte;
            }
        } else if ch < 3 {
            pixels[pix * 3 + ch] = byte;
        }
    }
    let mut out = Vec::with_capacity(pixels.len() + 32);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    out.extend_from_slice(&pixels);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn save_prompt(prompt: &VisualPrompt, dir: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    tensors.insert("params".to_string(), prompt.params.clone());
    let (c, h, w) = prompt.spec.dims;
    let mut meta = BTreeMap::new();
    meta.insert("template".to_string(), prompt.spec.template.as_str().to_string());
    meta.insert("p".to_string(), prompt.spec.p.to_string());
    meta.insert("input".to_string(), format!("{c}x{h}x{w}"));
    meta.insert("seed".to_string(), prompt.seed.to_string());
    io::save_checkpoint(dir, &tensors, &meta)
}

pub fn load_prompt(dir: &Path) -> Result<VisualPrompt> {
    let (mut tensors, meta) = io::load_checkpoint(dir)?;
    let meta_path = dir.join(io::META_FILE);
    let template_raw: String = io::meta_get(&meta, &meta_path, "template")?;
    let template = TemplateKind::parse(&template_raw).ok_or_else(|| Error::BadField {
        path: meta_path.clone(),
        field: "template".into(),
        detail: format!("unknown template {template_raw:?}"),
    })?;
    let p: usize = io::meta_get(&meta, &meta_path, "p")?;
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
    let spec = PromptSpec::new(template, p, (dims[0], dims[1], dims[2]));
    spec.validate()?;
    let params = tensors.remove("params").ok_or_else(|| Error::MissingField {
        path: dir.to_path_buf(),
        field: format!("params.{}", io::TENSOR_EXT),
    })?;
    if params.numel() != spec.param_count() {
        return Err(Error::BadField {
            path: dir.join(format!("params.{}", io::TENSOR_EXT)),
            field: "shape".into(),
            detail: format!("want {} values, got {}", spec.param_count(), params.numel()),
        });
    }
    let seed: u64 = io::meta_get(&meta, &meta_path, "seed")?;
    Ok(VisualPrompt { spec, params, seed })
}
