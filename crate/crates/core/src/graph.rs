//! Reverse-mode autodiff on a dynamic tape. A `Graph` is built fresh for
//! each forward pass; `backward` walks the tape once in reverse. Leaf
//! gradients accumulate across backward calls until `zero_grads`; interior
//! gradients live only for the duration of one backward pass.
//!
//! Values are stored f32. Every reduction (conv sums, dot products, norms,
//! log-sum-exp, gradient scatters) accumulates in f64 and rounds once on
//! write-out, and the accumulation order is independent of the parallel
//! chunking, so parallel and sequential runs produce identical bytes.

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::Tensor;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2x2 {
        x: Var,
        argmax: Vec<u32>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    /// Rowwise cosine similarities. Vector mode (both inputs rank 1)
    /// produces a scalar; matrix mode ([N,D] x [K,D]) produces [N,K].
    CosineSim {
        a: Var,
        b: Var,
        norms_a: Vec<f64>,
        norms_b: Vec<f64>,
        dots: Vec<f64>,
    },
    GatherCols {
        x: Var,
        cols: Vec<usize>,
    },
    /// out[n, offsets[i] + shift(n)] = x[...] + phi[i]; all other pixels
    /// are copied bit-exactly. `shifts` holds one entry per image or a
    /// single broadcast entry.
    PromptAdd {
        x: Var,
        phi: Var,
        offsets: Arc<Vec<usize>>,
        shifts: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    /// Unrounded f64 result for scalar-producing reductions; finite
    /// difference checks read this to avoid the f32 cast of `value`.
    value_f64: Option<f64>,
    requires_grad: bool,
    /// True when any ancestor leaf requires grad; gates backward work.
    needs: bool,
    grad: Option<Tensor>,
}

pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, needs: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            value_f64: None,
            requires_grad: false,
            needs,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, op: Op, value: f64, needs: bool) -> Var {
        let v = self.push(op, Tensor::scalar(value as f32), needs);
        self.nodes[v.0].value_f64 = Some(value);
        v
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            value_f64: None,
            requires_grad,
            needs: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a requires_grad leaf; None before the first
    /// backward pass that reaches it or after zero_grads.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Scalar value with the full accumulation precision when the producing
    /// op was a reduction; falls back to the stored f32 otherwise.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        self.nodes[v.0]
            .value_f64
            .unwrap_or_else(|| self.nodes[v.0].value.item() as f64)
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        let exact = match (self.nodes[a.0].value_f64, self.nodes[b.0].value_f64) {
            (Some(x), Some(y)) => Some(x + y),
            _ => None,
        };
        let v = self.push(Op::Add(a, b), value, needs);
        self.nodes[v.0].value_f64 = exact;
        Ok(v)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| c * v).collect();
        let value = Tensor::from_vec(vx.shape(), data).expect("same shape");
        let needs = self.needs(x);
        let exact = self.nodes[x.0].value_f64.map(|v| v * c as f64);
        let v = self.push(Op::Scale(x, c), value, needs);
        self.nodes[v.0].value_f64 = exact;
        v
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_vec(vx.shape(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(Op::Relu(x), value, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x), value, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.sum_f64();
        let needs = self.needs(x);
        self.push_scalar(Op::Sum(x), value, needs)
    }

    /// out[n,m] = sum_d x[n,d] w[m,d] + b[m]
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if vx.shape().len() != 2 || vw.shape().len() != 2 || vb.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!(
                    "want ranks 2/2/1, got {:?}/{:?}/{:?}",
                    vx.shape(),
                    vw.shape(),
                    vb.shape()
                ),
            });
        }
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        let (m, dw) = (vw.shape()[0], vw.shape()[1]);
        if dw != d {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("input dim {d} vs weight dim {dw}"),
            });
        }
        if vb.shape()[0] != m {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("bias len {} vs output dim {m}", vb.shape()[0]),
            });
        }
        let mut out = Tensor::zeros(&[n, m]);
        {
            let (xd, wd, bd) = (vx.data(), vw.data(), vb.data());
            for_each_chunk_mut(out.data_mut(), m, |row, chunk| {
                let xrow = &xd[row * d..(row + 1) * d];
                for (mi, o) in chunk.iter_mut().enumerate() {
                    let wrow = &wd[mi * d..(mi + 1) * d];
                    let mut acc = bd[mi] as f64;
                    for di in 0..d {
                        acc += xrow[di] as f64 * wrow[di] as f64;
                    }
                    *o = acc as f32;
                }
            });
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Linear { x, w, b }, out, needs))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if vx.shape().len() != 4 || vw.shape().len() != 4 || vb.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "want ranks 4/4/1, got {:?}/{:?}/{:?}",
                    vx.shape(),
                    vw.shape(),
                    vb.shape()
                ),
            });
        }
        if stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let [n, c, h, wd] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let [k, cw, kh, kw] = [vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]];
        if cw != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {c} vs weight channels {cw}"),
            });
        }
        if vb.shape()[0] != k {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias len {} vs output channels {k}", vb.shape()[0]),
            });
        }
        if kh > h + 2 * pad {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel height {kh} exceeds padded input height {}", h + 2 * pad),
            });
        }
        if kw > wd + 2 * pad {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel width {kw} exceeds padded input width {}", wd + 2 * pad),
            });
        }
        if (h + 2 * pad - kh) % stride != 0 {
            return Err(Error::ConvNotExact {
                axis: "height",
                input: h,
                kernel: kh,
                stride,
                pad,
            });
        }
        if (wd + 2 * pad - kw) % stride != 0 {
            return Err(Error::ConvNotExact {
                axis: "width",
                input: wd,
                kernel: kw,
                stride,
                pad,
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, k, ho, wo]);
        {
            let (xd, wdat, bd) = (vx.data(), vw.data(), vb.data());
            let dims = ConvDims {
                c,
                h,
                w: wd,
                k,
                kh,
                kw,
                ho,
                wo,
                stride,
                pad,
            };
            for_each_chunk_mut(out.data_mut(), k * ho * wo, |img, chunk| {
                conv_forward_image(&xd[img * c * h * wd..(img + 1) * c * h * wd], wdat, bd, chunk, &dims);
            });
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            out,
            needs,
        ))
    }

    /// 2x2 max pooling, stride 2. Height and width must be even. Ties break
    /// toward the first element in row-major window order.
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "max_pool2x2",
                detail: format!("want rank 4, got {:?}", vx.shape()),
            });
        }
        let [n, c, h, w] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "max_pool2x2",
                detail: format!("height {h} and width {w} must be even"),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0u32; n * c * ho * wo];
        let xd = vx.data();
        for img_ch in 0..n * c {
            let base = img_ch * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best_idx = base + (2 * i) * w + 2 * j;
                    let mut best = xd[best_idx];
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + dr) * w + 2 * j + dc;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    let o = img_ch * ho * wo + i * wo + j;
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::MaxPool2x2 { x, argmax }, out, needs))
    }

    /// Mean over the batch of -log softmax(logits)[label], stabilized by
    /// row-max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = &self.nodes[logits.0].value;
        if vl.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("want rank 2 logits, got {:?}", vl.shape()),
            });
        }
        let (n, k) = (vl.shape()[0], vl.shape()[1]);
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("{n} rows vs {} labels", labels.len()),
            });
        }
        for &lab in labels {
            if lab >= k {
                return Err(Error::LabelOutOfRange {
                    label: lab,
                    classes: k,
                });
            }
        }
        let ld = vl.data();
        let mut probs = vec![0.0f32; n * k];
        let mut loss_acc = 0.0f64;
        for row in 0..n {
            let r = &ld[row * k..(row + 1) * k];
            let m = r.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let mut sum = 0.0f64;
            for &v in r {
                sum += (v as f64 - m).exp();
            }
            for (j, &v) in r.iter().enumerate() {
                probs[row * k + j] = ((v as f64 - m).exp() / sum) as f32;
            }
            loss_acc += sum.ln() + m - r[labels[row]] as f64;
        }
        let needs = self.needs(logits);
        Ok(self.push_scalar(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            loss_acc / n as f64,
            needs,
        ))
    }

    /// Vector mode: a[D], b[D] -> scalar in [-1, 1].
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, rb) = (
            self.nodes[a.0].value.shape().len(),
            self.nodes[b.0].value.shape().len(),
        );
        if ra != 1 || rb != 1 {
            return Err(Error::ShapeMismatch {
                op: "cosine_similarity",
                detail: format!("want rank-1 vectors, got ranks {ra}/{rb}"),
            });
        }
        self.cosine_common(a, b)
    }

    /// Matrix mode: a[N,D], b[K,D] -> [N,K] of rowwise cosines.
    pub fn cosine_sim_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, rb) = (
            self.nodes[a.0].value.shape().len(),
            self.nodes[b.0].value.shape().len(),
        );
        if ra != 2 || rb != 2 {
            return Err(Error::ShapeMismatch {
                op: "cosine_sim_matrix",
                detail: format!("want rank-2 inputs, got ranks {ra}/{rb}"),
            });
        }
        self.cosine_common(a, b)
    }

    fn cosine_common(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let vector_mode = va.shape().len() == 1;
        let (n, da) = if vector_mode {
            (1, va.shape()[0])
        } else {
            (va.shape()[0], va.shape()[1])
        };
        let (k, db) = if vector_mode {
            (1, vb.shape()[0])
        } else {
            (vb.shape()[0], vb.shape()[1])
        };
        if da != db {
            return Err(Error::ShapeMismatch {
                op: "cosine_similarity",
                detail: format!("feature dims {da} vs {db}"),
            });
        }
        let d = da;
        let norm = |rows: &[f32], count: usize, what: &'static str| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(count);
            for r in 0..count {
                let mut acc = 0.0f64;
                for &v in &rows[r * d..(r + 1) * d] {
                    acc += v as f64 * v as f64;
                }
                if acc == 0.0 {
                    return Err(Error::ZeroNorm { what });
                }
                out.push(acc.sqrt());
            }
            Ok(out)
        };
        let norms_a = norm(va.data(), n, "left cosine input")?;
        let norms_b = norm(vb.data(), k, "right cosine input")?;
        let (ad, bd) = (va.data(), vb.data());
        let mut dots = vec![0.0f64; n * k];
        let mut out_data = vec![0.0f32; n * k];
        for i in 0..n {
            for j in 0..k {
                let mut acc = 0.0f64;
                for e in 0..d {
                    acc += ad[i * d + e] as f64 * bd[j * d + e] as f64;
                }
                dots[i * k + j] = acc;
                out_data[i * k + j] = (acc / (norms_a[i] * norms_b[j])) as f32;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        if vector_mode {
            let exact = dots[0] / (norms_a[0] * norms_b[0]);
            Ok(self.push_scalar(
                Op::CosineSim {
                    a,
                    b,
                    norms_a,
                    norms_b,
                    dots,
                },
                exact,
                needs,
            ))
        } else {
            let value = Tensor::from_vec(&[n, k], out_data)?;
            Ok(self.push(
                Op::CosineSim {
                    a,
                    b,
                    norms_a,
                    norms_b,
                    dots,
                },
                value,
                needs,
            ))
        }
    }

    /// out[n,j] = x[n, cols[j]]
    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_cols",
                detail: format!("want rank 2, got {:?}", vx.shape()),
            });
        }
        let (n, k) = (vx.shape()[0], vx.shape()[1]);
        for &cidx in cols {
            if cidx >= k {
                return Err(Error::MappingTargetOutOfRange {
                    target: cidx,
                    pretrain: k,
                });
            }
        }
        let xd = vx.data();
        let mut data = Vec::with_capacity(n * cols.len());
        for row in 0..n {
            for &cidx in cols {
                data.push(xd[row * k + cidx]);
            }
        }
        let value = Tensor::from_vec(&[n, cols.len()], data)?;
        let needs = self.needs(x);
        Ok(self.push(
            Op::GatherCols {
                x,
                cols: cols.to_vec(),
            },
            value,
            needs,
        ))
    }

    /// Scatter-add prompt values into a batch of images. `offsets` indexes
    /// within one C*H*W image; `shifts` holds a per-image extra offset
    /// (one entry broadcasts). Pixels outside the offset set are copied
    /// bit-exactly from x.
    pub fn prompt_add(
        &mut self,
        x: Var,
        phi: Var,
        offsets: Arc<Vec<usize>>,
        shifts: Vec<usize>,
    ) -> Result<Var> {
        let (vx, vphi) = (&self.nodes[x.0].value, &self.nodes[phi.0].value);
        if vx.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "prompt_add",
                detail: format!("want rank-4 images, got {:?}", vx.shape()),
            });
        }
        let n = vx.shape()[0];
        let chw = vx.numel() / n.max(1);
        if vphi.numel() != offsets.len() {
            return Err(Error::ShapeMismatch {
                op: "prompt_add",
                detail: format!("{} prompt values vs {} offsets", vphi.numel(), offsets.len()),
            });
        }
        if shifts.len() != 1 && shifts.len() != n {
            return Err(Error::ShapeMismatch {
                op: "prompt_add",
                detail: format!("{} shifts vs batch {n}", shifts.len()),
            });
        }
        let max_shift = shifts.iter().copied().max().unwrap_or(0);
        if let Some(&max_off) = offsets.iter().max() {
            if max_off + max_shift >= chw {
                return Err(Error::ShapeMismatch {
                    op: "prompt_add",
                    detail: format!(
                        "offset {} + shift {} out of image extent {}",
                        max_off, max_shift, chw
                    ),
                });
            }
        }
        let mut out = vx.clone();
        {
            let pd = vphi.data();
            let offs = offsets.as_slice();
            let shifts_ref = &shifts;
            for_each_chunk_mut(out.data_mut(), chw, |img, chunk| {
                let s = if shifts_ref.len() == 1 {
                    shifts_ref[0]
                } else {
                    shifts_ref[img]
                };
                for (i, &off) in offs.iter().enumerate() {
                    chunk[off + s] += pd[i];
                }
            });
        }
        let needs = self.needs(x) || self.needs(phi);
        Ok(self.push(
            Op::PromptAdd {
                x,
                phi,
                offsets,
                shifts,
            },
            out,
            needs,
        ))
    }

    /// Reverse pass from a scalar loss. Gradients of requires_grad leaves
    /// on the path accumulate into their grad slots; everything else is
    /// untouched.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = loss.0;
        let numel = self.nodes[li].value.numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        if !self.nodes[li].needs {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f32>>> = (0..=li).map(|_| None).collect();
        local[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            let g = match local[i].take() {
                Some(g) => g,
                None => continue,
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].requires_grad {
                    let node = &mut self.nodes[i];
                    let slot = node
                        .grad
                        .get_or_insert_with(|| Tensor::zeros(node.value.shape()));
                    for (dst, src) in slot.data_mut().iter_mut().zip(&g) {
                        *dst += src;
                    }
                }
                continue;
            }
            self.backprop_node(i, &g, &mut local);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f32], local: &mut [Option<Vec<f32>>]) {
        // Zero-filled pass-local gradient buffer for an input var.
        fn buf<'a>(
            local: &'a mut [Option<Vec<f32>>],
            v: Var,
            len: usize,
        ) -> &'a mut Vec<f32> {
            local[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => unreachable!("leaves handled by backward"),
            Op::Add(a, b) => {
                for &v in &[*a, *b] {
                    if self.needs(v) {
                        let gb = buf(local, v, g.len());
                        for (dst, src) in gb.iter_mut().zip(g) {
                            *dst += src;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    let gb = buf(local, *x, g.len());
                    for (dst, src) in gb.iter_mut().zip(g) {
                        *dst += c * src;
                    }
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xd = val(*x).data();
                    let gb = buf(local, *x, g.len());
                    for (e, (dst, src)) in gb.iter_mut().zip(g).enumerate() {
                        if xd[e] > 0.0 {
                            *dst += src;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let gb = buf(local, *x, g.len());
                    for (dst, src) in gb.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let n = val(*x).numel();
                    let gs = g[0];
                    let gb = buf(local, *x, n);
                    for dst in gb.iter_mut() {
                        *dst += gs;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let (n, d) = (vx.shape()[0], vx.shape()[1]);
                let m = vw.shape()[0];
                let (xd, wd) = (vx.data(), vw.data());
                if self.needs(*x) {
                    let gb = buf(local, *x, n * d);
                    for_each_chunk_mut(gb, d, |row, chunk| {
                        for (di, dst) in chunk.iter_mut().enumerate() {
                            let mut acc = 0.0f64;
                            for mi in 0..m {
                                acc += g[row * m + mi] as f64 * wd[mi * d + di] as f64;
                            }
                            *dst += acc as f32;
                        }
                    });
                }
                if self.needs(*w) {
                    let gb = buf(local, *w, m * d);
                    for_each_chunk_mut(gb, d, |mi, chunk| {
                        for (di, dst) in chunk.iter_mut().enumerate() {
                            let mut acc = 0.0f64;
                            for row in 0..n {
                                acc += g[row * m + mi] as f64 * xd[row * d + di] as f64;
                            }
                            *dst += acc as f32;
                        }
                    });
                }
                if self.needs(*b) {
                    let gb = buf(local, *b, m);
                    for (mi, dst) in gb.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for row in 0..n {
                            acc += g[row * m + mi] as f64;
                        }
                        *dst += acc as f32;
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (vx, vw) = (val(*x), val(*w));
                let [n, c, h, wd_] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
                let [k, _, kh, kw] = [vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]];
                let ho = (h + 2 * pad - kh) / stride + 1;
                let wo = (wd_ + 2 * pad - kw) / stride + 1;
                let dims = ConvDims {
                    c,
                    h,
                    w: wd_,
                    k,
                    kh,
                    kw,
                    ho,
                    wo,
                    stride: *stride,
                    pad: *pad,
                };
                let (xd, wdat) = (vx.data(), vw.data());
                if self.needs(*x) {
                    let gb = buf(local, *x, n * c * h * wd_);
                    for_each_chunk_mut(gb, c * h * wd_, |img, chunk| {
                        conv_backward_input_image(
                            &g[img * k * ho * wo..(img + 1) * k * ho * wo],
                            wdat,
                            chunk,
                            &dims,
                        );
                    });
                }
                if self.needs(*w) {
                    let gb = buf(local, *w, k * c * kh * kw);
                    for_each_chunk_mut(gb, c * kh * kw, |kidx, chunk| {
                        conv_backward_weight_channel(g, xd, chunk, kidx, n, &dims);
                    });
                }
                if self.needs(*b) {
                    let gb = buf(local, *b, k);
                    for (kidx, dst) in gb.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for img in 0..n {
                            let base = (img * k + kidx) * ho * wo;
                            for &gv in &g[base..base + ho * wo] {
                                acc += gv as f64;
                            }
                        }
                        *dst += acc as f32;
                    }
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                if self.needs(*x) {
                    let n = val(*x).numel();
                    let gb = buf(local, *x, n);
                    for (o, &src_idx) in argmax.iter().enumerate() {
                        gb[src_idx as usize] += g[o];
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let (n, k) = (labels.len(), probs.len() / labels.len());
                    let gs = g[0] as f64;
                    let gb = buf(local, *logits, n * k);
                    for row in 0..n {
                        for j in 0..k {
                            let ind = if j == labels[row] { 1.0 } else { 0.0 };
                            gb[row * k + j] +=
                                (gs * (probs[row * k + j] as f64 - ind) / n as f64) as f32;
                        }
                    }
                }
            }
            Op::CosineSim {
                a,
                b,
                norms_a,
                norms_b,
                dots,
            } => {
                let (va, vb) = (val(*a), val(*b));
                let (n, k) = (norms_a.len(), norms_b.len());
                let d = va.numel() / n;
                let (ad, bd) = (va.data(), vb.data());
                if self.needs(*a) {
                    let gb = buf(local, *a, n * d);
                    for_each_chunk_mut(gb, d, |row, chunk| {
                        let na = norms_a[row];
                        let mut acc = vec![0.0f64; d];
                        for j in 0..k {
                            let gv = g[row * k + j] as f64;
                            if gv == 0.0 {
                                continue;
                            }
                            let nb = norms_b[j];
                            let cos = dots[row * k + j] / (na * nb);
                            for e in 0..d {
                                acc[e] += gv
                                    * (bd[j * d + e] as f64 / (na * nb)
                                        - cos * ad[row * d + e] as f64 / (na * na));
                            }
                        }
                        for (dst, a_) in chunk.iter_mut().zip(acc) {
                            *dst += a_ as f32;
                        }
                    });
                }
                if self.needs(*b) {
                    let gb = buf(local, *b, k * d);
                    for_each_chunk_mut(gb, d, |col, chunk| {
                        let nb = norms_b[col];
                        let mut acc = vec![0.0f64; d];
                        for row in 0..n {
                            let gv = g[row * k + col] as f64;
                            if gv == 0.0 {
                                continue;
                            }
                            let na = norms_a[row];
                            let cos = dots[row * k + col] / (na * nb);
                            for e in 0..d {
                                acc[e] += gv
                                    * (ad[row * d + e] as f64 / (na * nb)
                                        - cos * bd[col * d + e] as f64 / (nb * nb));
                            }
                        }
                        for (dst, a_) in chunk.iter_mut().zip(acc) {
                            *dst += a_ as f32;
                        }
                    });
                }
            }
            Op::GatherCols { x, cols } => {
                if self.needs(*x) {
                    let vx = val(*x);
                    let (n, k) = (vx.shape()[0], vx.shape()[1]);
                    let gb = buf(local, *x, n * k);
                    for row in 0..n {
                        for (j, &cidx) in cols.iter().enumerate() {
                            gb[row * k + cidx] += g[row * cols.len() + j];
                        }
                    }
                }
            }
            Op::PromptAdd {
                x,
                phi,
                offsets,
                shifts,
            } => {
                let vx = val(*x);
                let n = vx.shape()[0];
                let chw = vx.numel() / n;
                if self.needs(*x) {
                    let gb = buf(local, *x, n * chw);
                    for (dst, src) in gb.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
                if self.needs(*phi) {
                    let p = offsets.len();
                    let gb = buf(local, *phi, p);
                    for (idx, dst) in gb.iter_mut().enumerate() {
                        let off = offsets[idx];
                        let mut acc = 0.0f64;
                        for img in 0..n {
                            let s = if shifts.len() == 1 { shifts[0] } else { shifts[img] };
                            acc += g[img * chw + off + s] as f64;
                        }
                        *dst += acc as f32;
                    }
                }
            }
        }
    }
}

struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

/// Valid kernel-row range for output position i: rows r with
/// 0 <= i*stride + r - pad < extent.
fn kernel_range(i: usize, stride: usize, pad: usize, kext: usize, ext: usize) -> (usize, usize) {
    let pos = i * stride;
    let lo = pad.saturating_sub(pos);
    let hi = kext.min(ext + pad - pos);
    (lo, hi)
}

fn conv_forward_image(x: &[f32], w: &[f32], b: &[f32], out: &mut [f32], d: &ConvDims) {
    for k in 0..d.k {
        for i in 0..d.ho {
            let (r_lo, r_hi) = kernel_range(i, d.stride, d.pad, d.kh, d.h);
            for j in 0..d.wo {
                let (q_lo, q_hi) = kernel_range(j, d.stride, d.pad, d.kw, d.w);
                let mut acc = b[k] as f64;
                for c in 0..d.c {
                    for r in r_lo..r_hi {
                        let xrow = c * d.h * d.w + (i * d.stride + r - d.pad) * d.w;
                        let wrow = ((k * d.c + c) * d.kh + r) * d.kw;
                        let col0 = j * d.stride + q_lo - d.pad;
                        for q in 0..q_hi - q_lo {
                            acc += x[xrow + col0 + q] as f64 * w[wrow + q_lo + q] as f64;
                        }
                    }
                }
                out[(k * d.ho + i) * d.wo + j] = acc as f32;
            }
        }
    }
}

fn conv_backward_input_image(gout: &[f32], w: &[f32], gx: &mut [f32], d: &ConvDims) {
    let mut acc = vec![0.0f64; d.c * d.h * d.w];
    for k in 0..d.k {
        for i in 0..d.ho {
            let (r_lo, r_hi) = kernel_range(i, d.stride, d.pad, d.kh, d.h);
            for j in 0..d.wo {
                let gv = gout[(k * d.ho + i) * d.wo + j] as f64;
                if gv == 0.0 {
                    continue;
                }
                let (q_lo, q_hi) = kernel_range(j, d.stride, d.pad, d.kw, d.w);
                for c in 0..d.c {
                    for r in r_lo..r_hi {
                        let xrow = c * d.h * d.w + (i * d.stride + r - d.pad) * d.w;
                        let wrow = ((k * d.c + c) * d.kh + r) * d.kw;
                        let col0 = j * d.stride + q_lo - d.pad;
                        for q in 0..q_hi - q_lo {
                            acc[xrow + col0 + q] += gv * w[wrow + q_lo + q] as f64;
                        }
                    }
                }
            }
        }
    }
    for (dst, a) in gx.iter_mut().zip(acc) {
        *dst += a as f32;
    }
}

fn conv_backward_weight_channel(
    gout: &[f32],
    x: &[f32],
    gw: &mut [f32],
    k: usize,
    n: usize,
    d: &ConvDims,
) {
    let mut acc = vec![0.0f64; d.c * d.kh * d.kw];
    for img in 0..n {
        let xbase = img * d.c * d.h * d.w;
        let gbase = (img * d.k + k) * d.ho * d.wo;
        for i in 0..d.ho {
            let (r_lo, r_hi) = kernel_range(i, d.stride, d.pad, d.kh, d.h);
            for j in 0..d.wo {
                let gv = gout[gbase + i * d.wo + j] as f64;
                if gv == 0.0 {
                    continue;
                }
                let (q_lo, q_hi) = kernel_range(j, d.stride, d.pad, d.kw, d.w);
                for c in 0..d.c {
                    for r in r_lo..r_hi {
                        let xrow = xbase + c * d.h * d.w + (i * d.stride + r - d.pad) * d.w;
                        let arow = (c * d.kh + r) * d.kw;
                        let col0 = j * d.stride + q_lo - d.pad;
                        for q in 0..q_hi - q_lo {
                            acc[arow + q_lo + q] += gv * x[xrow + col0 + q] as f64;
                        }
                    }
                }
            }
        }
    }
    for (dst, a) in gw.iter_mut().zip(acc) {
        *dst += a as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf_from(g: &mut Graph, shape: &[usize], data: Vec<f32>, rg: bool) -> Var {
        g.leaf(Tensor::from_vec(shape, data).unwrap(), rg)
    }

    #[test]
    fn conv_all_ones_sums_kernel() {
        let mut g = Graph::new();
        let x = leaf_from(&mut g, &[1, 1, 3, 3], vec![1.0; 9], false);
        let w = leaf_from(&mut g, &[1, 1, 3, 3], vec![1.0; 9], false);
        let b = leaf_from(&mut g, &[1], vec![0.0], false);
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng), false);
        // w[k,c] = delta(k==c) at kernel center
        let mut wdata = vec![0.0f32; 2 * 2 * 3 * 3];
        wdata[(0 * 2 + 0) * 9 + 4] = 1.0;
        wdata[(1 * 2 + 1) * 9 + 4] = 1.0;
        let w = leaf_from(&mut g, &[2, 2, 3, 3], wdata, false);
        let b = leaf_from(&mut g, &[2], vec![0.0, 0.0], false);
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), g.value(x).shape());
        for (a, b_) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b_).abs() < 1e-6, "{a} vs {b_}");
        }
    }

    #[test]
    fn conv_rejects_inexact_extent() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 5, 5]), false);
        let w = g.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
        let b = g.leaf(Tensor::zeros(&[1]), false);
        match g.conv2d(x, w, b, 2, 0) {
            Err(Error::ConvNotExact { axis: "height", .. }) => {}
            other => panic!("expected ConvNotExact, got {other:?}"),
        }
    }

    #[test]
    fn conv_names_offending_dimension() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 8, 8]), false);
        let w = g.leaf(Tensor::zeros(&[4, 2, 3, 3]), false);
        let b = g.leaf(Tensor::zeros(&[4]), false);
        match g.conv2d(x, w, b, 1, 1) {
            Err(Error::ShapeMismatch { detail, .. }) => {
                assert!(detail.contains("channels"), "got: {detail}")
            }
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn linear_matches_hand_computation() {
        let mut g = Graph::new();
        let x = leaf_from(&mut g, &[1, 2], vec![1.0, 2.0], false);
        let w = leaf_from(&mut g, &[1, 2], vec![3.0, 4.0], false);
        let b = leaf_from(&mut g, &[1], vec![5.0], false);
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[16.0]);
    }

    #[test]
    fn linear_identity_weight_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng), false);
        let mut wdata = vec![0.0f32; 16];
        for i in 0..4 {
            wdata[i * 4 + i] = 1.0;
        }
        let w = leaf_from(&mut g, &[4, 4], wdata, false);
        let b = leaf_from(&mut g, &[4], vec![0.0; 4], false);
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut g = Graph::new();
        let logits = leaf_from(&mut g, &[1, 4], vec![0.7; 4], false);
        let loss = g.softmax_cross_entropy(logits, &[2]).unwrap();
        assert!((g.value(loss).item() as f64 - 4.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_extreme_logits_do_not_overflow() {
        let mut g = Graph::new();
        let logits = leaf_from(&mut g, &[1, 2], vec![10.0, -10.0], false);
        let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
        let expect = (1.0f64 + (-20.0f64).exp()).ln();
        let got = g.value(loss).item() as f64;
        assert!(got.is_finite() && got > 0.0);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let logits = leaf_from(&mut g, &[1, 3], vec![0.0; 3], false);
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut g = Graph::new();
        let logits = leaf_from(&mut g, &[1, 4], vec![0.0; 4], true);
        let loss = g.softmax_cross_entropy(logits, &[1]).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        let expect = [0.25, -0.75, 0.25, 0.25];
        for (a, e) in grad.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn cosine_identical_orthogonal_and_half_pi() {
        let mut g = Graph::new();
        let a = leaf_from(&mut g, &[3], vec![0.3, -0.7, 0.2], false);
        let same = g.cosine_similarity(a, a).unwrap();
        assert!((g.value(same).item() - 1.0).abs() < 1e-6);

        let e1 = leaf_from(&mut g, &[2], vec![1.0, 0.0], false);
        let e2 = leaf_from(&mut g, &[2], vec![0.0, 1.0], false);
        let orth = g.cosine_similarity(e1, e2).unwrap();
        assert_eq!(g.value(orth).item(), 0.0);

        let v = leaf_from(&mut g, &[2], vec![1.0, 1.0], false);
        let mid = g.cosine_similarity(e1, v).unwrap();
        assert!((g.value(mid).item() - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let mut g = Graph::new();
        let a = leaf_from(&mut g, &[2], vec![0.0, 0.0], false);
        let b = leaf_from(&mut g, &[2], vec![1.0, 0.0], false);
        assert!(matches!(
            g.cosine_similarity(a, b),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn cosine_matrix_matches_vector_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[2, 5], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let av = g.leaf(a.clone(), false);
        let bv = g.leaf(b.clone(), false);
        let m = g.cosine_sim_matrix(av, bv).unwrap();
        assert_eq!(g.value(m).shape(), &[3, 2]);
        for i in 0..3 {
            for j in 0..2 {
                let mut g2 = Graph::new();
                let ai = g2.leaf(
                    Tensor::from_vec(&[5], a.data()[i * 5..(i + 1) * 5].to_vec()).unwrap(),
                    false,
                );
                let bj = g2.leaf(
                    Tensor::from_vec(&[5], b.data()[j * 5..(j + 1) * 5].to_vec()).unwrap(),
                    false,
                );
                let c = g2.cosine_similarity(ai, bj).unwrap();
                assert_eq!(g.value(m).data()[i * 2 + j], g2.value(c).item());
            }
        }
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_without_grad_leaves_writes_nothing() {
        let mut g = Graph::new();
        let x = leaf_from(&mut g, &[4], vec![1.0; 4], false);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
        assert!(g.grad(s).is_none());
    }

    #[test]
    fn off_path_tensors_are_untouched() {
        let mut g = Graph::new();
        let x = leaf_from(&mut g, &[2], vec![1.0, 2.0], true);
        let y = leaf_from(&mut g, &[2], vec![3.0, 4.0], true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_some());
        assert!(g.grad(y).is_none());
    }

    #[test]
    fn double_backward_doubles_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::uniform(&[5], -1.0, 1.0, &mut rng), true);
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        let once: Vec<f32> = g.grad(x).unwrap().data().to_vec();
        g.backward(s).unwrap();
        let twice: Vec<f32> = g.grad(x).unwrap().data().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(*b, 2.0 * *a);
        }
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn fan_out_accumulates_both_contributions() {
        // loss = sum(relu(x)) + sum(2x); d/dx = 1[x>0] + 2, hand-expanded
        let mut g = Graph::new();
        let x = leaf_from(&mut g, &[4], vec![0.5, -0.5, 2.0, -2.0], true);
        let r = g.relu(x);
        let s1 = g.sum(r);
        let d = g.scale(x, 2.0);
        let s2 = g.sum(d);
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap().data();
        assert_eq!(grad, &[3.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = leaf_from(&mut g, &[3], vec![1.0; 3], true);
        assert!(matches!(
            g.backward(x),
            Err(Error::NonScalarLoss { numel: 3 })
        ));
    }

    #[test]
    fn maxpool_picks_max_and_routes_gradient() {
        let mut g = Graph::new();
        let x = leaf_from(
            &mut g,
            &[1, 1, 2, 4],
            vec![1.0, 3.0, 2.0, 0.0, -1.0, 0.5, 2.5, 2.5],
            true,
        );
        let y = g.max_pool2x2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 2]);
        assert_eq!(g.value(y).data(), &[3.0, 2.5]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        // second window ties at 2.5; first in row-major order wins
        assert_eq!(
            g.grad(x).unwrap().data(),
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 3, 4]), false);
        assert!(g.max_pool2x2(x).is_err());
    }

    #[test]
    fn gather_pulls_named_columns() {
        let mut g = Graph::new();
        let x = leaf_from(
            &mut g,
            &[2, 10],
            (0..20).map(|v| v as f32).collect(),
            true,
        );
        let y = g.gather_cols(x, &[3, 7]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0, 13.0, 17.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap().data();
        let mut expect = vec![0.0f32; 20];
        expect[3] = 1.0;
        expect[7] = 1.0;
        expect[13] = 1.0;
        expect[17] = 1.0;
        assert_eq!(grad, &expect[..]);
    }

    #[test]
    fn gather_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng), false);
        let y = g.gather_cols(x, &[0, 1, 2, 3]).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn gather_rejects_out_of_range_column() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 4]), false);
        assert!(matches!(
            g.gather_cols(x, &[4]),
            Err(Error::MappingTargetOutOfRange { target: 4, pretrain: 4 })
        ));
    }

    #[test]
    fn prompt_add_touches_only_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let images = Tensor::uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(images.clone(), false);
        let phi = leaf_from(&mut g, &[2], vec![0.25, -0.5], true);
        let offsets = Arc::new(vec![0usize, 4]);
        let y = g.prompt_add(x, phi, offsets, vec![0]).unwrap();
        for img in 0..2 {
            for e in 0..9 {
                let base = img * 9;
                let orig = images.data()[base + e];
                let got = g.value(y).data()[base + e];
                match e {
                    0 => assert_eq!(got, orig + 0.25),
                    4 => assert_eq!(got, orig - 0.5),
                    _ => assert_eq!(got.to_bits(), orig.to_bits()),
                }
            }
        }
        let s = g.sum(y);
        g.backward(s).unwrap();
        // each prompt value feeds both images
        assert_eq!(g.grad(phi).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn prompt_add_zero_values_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let images = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(images.clone(), false);
        let phi = g.leaf(Tensor::zeros(&[5]), false);
        let offsets = Arc::new(vec![0usize, 3, 17, 30, 47]);
        let y = g.prompt_add(x, phi, offsets, vec![0]).unwrap();
        for (a, b) in g.value(y).data().iter().zip(images.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn prompt_add_per_image_shifts_move_the_patch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 1, 4, 4]), false);
        let phi = leaf_from(&mut g, &[1], vec![1.0], true);
        let y = g
            .prompt_add(x, phi, Arc::new(vec![0usize]), vec![5, 10])
            .unwrap();
        let yd = g.value(y).data();
        assert_eq!(yd[5], 1.0);
        assert_eq!(yd[16 + 10], 1.0);
        assert_eq!(yd.iter().filter(|&&v| v != 0.0).count(), 2);
    }

    #[test]
    fn forward_never_mutates_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xt = Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let wt = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let bt = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(xt.clone(), true);
        let w = g.leaf(wt.clone(), true);
        let b = g.leaf(bt.clone(), true);
        let y = g.linear(x, w, b).unwrap();
        let r = g.relu(y);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.value(x), &xt);
        assert_eq!(g.value(w), &wt);
        assert_eq!(g.value(b), &bt);
    }

    #[test]
    fn composite_net_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng), false);
        let w = g.leaf(Tensor::uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng), true);
        let b = g.leaf(Tensor::uniform(&[3], -0.1, 0.1, &mut rng), true);
        let c = g.conv2d(x, w, b, 1, 1).unwrap();
        let r = g.relu(c);
        let p = g.max_pool2x2(r).unwrap();
        let f = g.reshape(p, &[2, 12]).unwrap();
        let w2 = g.leaf(Tensor::uniform(&[2, 12], -0.5, 0.5, &mut rng), true);
        let b2 = g.leaf(Tensor::zeros(&[2]), true);
        let logits = g.linear(f, w2, b2).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[0, 1]).unwrap();
        g.backward(loss).unwrap();
        assert!(g.value(loss).is_finite());
        for v in [w, b, w2, b2] {
            assert!(g.grad(v).unwrap().is_finite());
        }
    }
}
