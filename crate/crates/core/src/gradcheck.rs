//! Central-difference gradient verification. A check builds the same scalar
//! loss twice per perturbed coordinate and compares the analytic gradient
//! against (f(x+h) - f(x-h)) / 2h, with the difference carried in f64
//! (losses are read through `Graph::scalar_f64` to skip the final f32 cast).
//!
//! Intermediate activations are still f32, so the numerical estimate keeps
//! a noise floor of roughly 1e-7 / (2h) per coordinate. Two tests run per
//! input tensor: every coordinate must satisfy
//! |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|),
//! and the gradient vector as a whole must satisfy
//! l2(analytic - numeric) <= rtol * max(l2(analytic), l2(numeric)),
//! which is immune to single-coordinate cancellation noise.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct CheckSettings {
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            h: 1e-3,
            rtol: 1e-3,
            atol: 3e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CheckReport {
    /// Largest |analytic - numeric| over all coordinates.
    pub worst_abs: f64,
    /// Largest per-tensor l2 relative error.
    pub worst_rel: f64,
    pub coords: usize,
    /// Coordinates breaking the atol + rtol * scale bound.
    pub failures: usize,
}

impl CheckReport {
    pub fn ok(&self, rtol: f64) -> bool {
        self.failures == 0 && self.worst_rel <= rtol
    }

    fn absorb(&mut self, other: &CheckReport) {
        self.worst_abs = self.worst_abs.max(other.worst_abs);
        self.worst_rel = self.worst_rel.max(other.worst_rel);
        self.coords += other.coords;
        self.failures += other.failures;
    }
}

/// Check d(loss)/d(inputs[i]) for every input marked differentiable.
/// `build` must construct the loss from leaves it creates in given order
/// (the bool per input is requires_grad).
pub fn finite_diff_check<B>(
    inputs: &[(Tensor, bool)],
    settings: CheckSettings,
    build: B,
) -> Result<CheckReport>
where
    B: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar_f64(loss))
    };

    // analytic pass
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(t, rg)| g.leaf(t.clone(), *rg))
        .collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;

    let mut tensors: Vec<Tensor> = inputs.iter().map(|(t, _)| t.clone()).collect();
    let mut report = CheckReport::default();
    for (idx, (_, rg)) in inputs.iter().enumerate() {
        if !*rg {
            continue;
        }
        let analytic: Vec<f32> = g
            .grad(vars[idx])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; tensors[idx].numel()]);
        let mut sq_diff = 0.0f64;
        let mut sq_a = 0.0f64;
        let mut sq_n = 0.0f64;
        for coord in 0..tensors[idx].numel() {
            let orig = tensors[idx].data()[coord];
            tensors[idx].data_mut()[coord] = orig + settings.h as f32;
            let up = eval(&tensors)?;
            tensors[idx].data_mut()[coord] = orig - settings.h as f32;
            let down = eval(&tensors)?;
            tensors[idx].data_mut()[coord] = orig;
            let numeric = (up - down) / (2.0 * settings.h);
            let a = analytic[coord] as f64;
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            report.coords += 1;
            report.worst_abs = report.worst_abs.max(diff);
            sq_diff += diff * diff;
            sq_a += a * a;
            sq_n += numeric * numeric;
            if diff > settings.atol + settings.rtol * scale {
                report.failures += 1;
            }
        }
        let denom = sq_a.max(sq_n).sqrt();
        if denom > 0.0 {
            report.worst_rel = report.worst_rel.max(sq_diff.sqrt() / denom);
        } else if sq_diff > 0.0 {
            report.worst_rel = f64::INFINITY;
        }
    }
    Ok(report)
}

/// One finite-difference trial per differentiable op, on small random
/// shapes. Returns (op name, merged report over `trials` seeded trials).
pub fn standard_op_checks(trials: usize, seed: u64) -> Result<Vec<(&'static str, CheckReport)>> {
    let settings = CheckSettings::default();
    let mut results = Vec::new();

    // inputs bounded away from relu/maxpool kinks: |v| in [0.1, 1)
    let away_from_kinks = |shape: &[usize], rng: &mut ChaCha8Rng| {
        let mut t = Tensor::uniform(shape, -1.0, 1.0, rng);
        for v in t.data_mut() {
            let s = if *v >= 0.0 { 1.0 } else { -1.0 };
            *v = s * (0.1 + 0.9 * v.abs().min(1.0));
        }
        t
    };

    macro_rules! run {
        ($name:literal, $seed_off:expr, $inputs:expr, $build:expr) => {{
            let mut merged = CheckReport::default();
            for t in 0..trials {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ($seed_off + t as u64));
                let inputs = $inputs(&mut rng);
                let rep = finite_diff_check(&inputs, settings, $build)?;
                merged.absorb(&rep);
            }
            results.push(($name, merged));
        }};
    }

    run!(
        "add",
        0x10,
        |rng: &mut ChaCha8Rng| vec![
            (Tensor::uniform(&[3, 4], -1.0, 1.0, rng), true),
            (Tensor::uniform(&[3, 4], -1.0, 1.0, rng), true),
        ],
        |g: &mut Graph, v: &[Var]| {
            let y = g.add(v[0], v[1])?;
            let r = g.sum(y);
            Ok(g.scale(r, 0.25))
        }
    );

    run!(
        "scale",
        0x20,
        |rng: &mut ChaCha8Rng| vec![(Tensor::uniform(&[2, 5], -1.0, 1.0, rng), true)],
        |g: &mut Graph, v: &[Var]| {
            let y = g.scale(v[0], -1.7);
            Ok(g.sum(y))
        }
    );

    run!(
        "relu",
        0x30,
        move |rng: &mut ChaCha8Rng| vec![(away_from_kinks(&[4, 6], rng), true)],
        |g: &mut Graph, v: &[Var]| {
            let y = g.relu(v[0]);
            Ok(g.sum(y))
        }
    );

    run!(
        "reshape",
        0x40,
        |rng: &mut ChaCha8Rng| vec![(Tensor::uniform(&[2, 6], -1.0, 1.0, rng), true)],
        |g: &mut Graph, v: &[Var]| {
            let y = g.reshape(v[0], &[3, 4])?;
            let w = g.scale(y, 0.5);
            Ok(g.sum(w))
        }
    );

    run!(
        "sum",
        0x50,
        |rng: &mut ChaCha8Rng| vec![(Tensor::uniform(&[7], -1.0, 1.0, rng), true)],
        |g: &mut Graph, v: &[Var]| Ok(g.sum(v[0]))
    );

    run!(
        "linear",
        0x60,
        |rng: &mut ChaCha8Rng| vec![
            (Tensor::uniform(&[3, 4], -1.0, 1.0, rng), true),
            (Tensor::uniform(&[5, 4], -0.7, 0.7, rng), true),
            (Tensor::uniform(&[5], -0.5, 0.5, rng), true),
        ],
        |g: &mut Graph, v: &[Var]| {
            let y = g.linear(v[0], v[1], v[2])?;
            Ok(g.sum(y))
        }
    );

    run!(
        "conv2d",
        0x70,
        |rng: &mut ChaCha8Rng| vec![
            (Tensor::uniform(&[2, 2, 5, 5], -1.0, 1.0, rng), true),
            (Tensor::uniform(&[3, 2, 3, 3], -0.5, 0.5, rng), true),
            (Tensor::uniform(&[3], -0.3, 0.3, rng), true),
        ],
        |g: &mut Graph, v: &[Var]| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            Ok(g.sum(y))
        }
    );

    run!(
        "conv2d_strided",
        0x78,
        |rng: &mut ChaCha8Rng| vec![
            (Tensor::uniform(&[1, 2, 6, 6], -1.0, 1.0, rng), true),
            (Tensor::uniform(&[2, 2, 2, 2], -0.5, 0.5, rng), true),
            (Tensor::uniform(&[2], -0.3, 0.3, rng), true),
        ],
        |g: &mut Graph, v: &[Var]| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 0)?;
            Ok(g.sum(y))
        }
    );

    run!(
        "max_pool2x2",
        0x80,
        move |rng: &mut ChaCha8Rng| vec![(away_from_kinks(&[1, 2, 4, 4], rng), true)],
        |g: &mut Graph, v: &[Var]| {
            let y = g.max_pool2x2(v[0])?;
            Ok(g.sum(y))
        }
    );

    run!(
        "softmax_cross_entropy",
        0x90,
        |rng: &mut ChaCha8Rng| vec![(Tensor::uniform(&[3, 5], -2.0, 2.0, rng), true)],
        |g: &mut Graph, v: &[Var]| g.softmax_cross_entropy(v[0], &[1, 4, 0])
    );

    run!(
        "cosine_similarity",
        0xa0,
        move |rng: &mut ChaCha8Rng| vec![
            (away_from_kinks(&[6], rng), true),
            (away_from_kinks(&[6], rng), true),
        ],
        |g: &mut Graph, v: &[Var]| g.cosine_similarity(v[0], v[1])
    );

    run!(
        "cosine_sim_matrix",
        0xb0,
        move |rng: &mut ChaCha8Rng| vec![
            (away_from_kinks(&[3, 6], rng), true),
            (away_from_kinks(&[4, 6], rng), true),
        ],
        |g: &mut Graph, v: &[Var]| {
            let m = g.cosine_sim_matrix(v[0], v[1])?;
            Ok(g.sum(m))
        }
    );

    run!(
        "gather_cols",
        0xc0,
        |rng: &mut ChaCha8Rng| vec![(Tensor::uniform(&[3, 8], -1.0, 1.0, rng), true)],
        |g: &mut Graph, v: &[Var]| {
            let y = g.gather_cols(v[0], &[6, 1, 4])?;
            let loss = g.softmax_cross_entropy(y, &[0, 2, 1])?;
            Ok(loss)
        }
    );

    run!(
        "prompt_add",
        0xd0,
        |rng: &mut ChaCha8Rng| vec![
            (Tensor::uniform(&[2, 1, 4, 4], -1.0, 1.0, rng), true),
            (Tensor::uniform(&[4], -0.5, 0.5, rng), true),
            (Tensor::uniform(&[3, 16], -0.5, 0.5, rng), false),
            (Tensor::uniform(&[3], -0.2, 0.2, rng), false),
        ],
        |g: &mut Graph, v: &[Var]| {
            let offsets = std::sync::Arc::new(vec![0usize, 1, 4, 5]);
            let y = g.prompt_add(v[0], v[1], offsets, vec![0, 5])?;
            let flat = g.reshape(y, &[2, 16])?;
            let logits = g.linear(flat, v[2], v[3])?;
            g.softmax_cross_entropy(logits, &[0, 2])
        }
    );

    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_twenty_trials() {
        for (name, report) in standard_op_checks(20, 0xfeed).unwrap() {
            assert!(
                report.ok(1e-3),
                "{name}: {}/{} coords failed (worst abs {:.2e}, worst rel {:.2e})",
                report.failures,
                report.coords,
                report.worst_abs,
                report.worst_rel
            );
        }
    }

    #[test]
    fn check_flags_a_gradient_mismatch() {
        // relu coordinate pinned at its kink: analytic grad is 0, the
        // central difference reports 0.5, and the checker must notice
        let t = Tensor::from_vec(&[2], vec![0.0, 0.7]).unwrap();
        let report = finite_diff_check(
            &[(t, true)],
            CheckSettings::default(),
            |g: &mut Graph, v: &[Var]| {
                let r = g.relu(v[0]);
                Ok(g.sum(r))
            },
        )
        .unwrap();
        assert!(!report.ok(1e-3), "kink mismatch must be flagged");
        assert_eq!(report.failures, 1);
    }
}
