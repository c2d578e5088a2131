// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central-difference gradient oracle.
//!
//! The oracle only ever calls the loss function; it shares no code path with
//! the tape's backward rules beyond the forward computation itself.

use crate::autodiff::{Graph, Var};
use crate::error::{OtterError, Result};
use crate::tensor::{Scalar, Tensor};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / (|analytic| + |numeric|)` over the
    /// compared coordinates.
    pub max_rel_error: f64,
    /// Largest `|analytic - numeric|`.
    pub max_abs_error: f64,
    /// `(tensor index, flat index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub compared: usize,
    pub skipped_frozen: usize,
}

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(θ+h) - f(θ-h)) / 2h`.
    #[default]
    Central,
    /// `(-f(θ+2h) + 8f(θ+h) - 8f(θ-h) + f(θ-2h)) / 12h`; fourth-order accurate,
    /// so a larger `h` can be used and roundoff shrinks accordingly.
    CentralFourthOrder,
}

/// Which coordinates to compare.
#[derive(Debug, Clone, Default)]
pub struct CheckOptions<'m> {
    pub stencil: Stencil,
    /// Per-tensor trainable masks; `false` coordinates are skipped.
    pub trainable: Option<&'m [Vec<bool>]>,
    /// Compare at most this many coordinates per tensor (evenly strided).
    pub max_coords_per_tensor: Option<usize>,
    /// Overrides [`SIGNIFICANCE_FLOOR`]; single precision needs a larger one.
    pub significance_floor: Option<f64>,
}

/// Coordinates whose `|analytic| + |numeric|` is below this are ignored.
pub const SIGNIFICANCE_FLOOR: f64 = 1e-12;

/// Compares the tape gradient of `loss_fn` with central differences
/// `(f(θ+h) - f(θ-h)) / 2h` for every selected coordinate of `params`.
///
/// `loss_fn` receives a fresh graph and one variable per entry of `params`
/// and must return a scalar node.
///
/// Intended for `f64`; with `f32` the attainable accuracy is roughly 1e-3.
pub fn grad_check<T, F>(mut loss_fn: F, params: &[Tensor<T>], step: f64, opts: &CheckOptions<'_>) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'g> FnMut(&mut Graph<'g, T>, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(OtterError::Config(format!("finite-difference step must be positive, got {step}")));
    }
    if let Some(mask) = opts.trainable {
        if mask.len() != params.len() || mask.iter().zip(params).any(|(m, p)| m.len() != p.numel()) {
            return Err(OtterError::Config("trainable mask does not match parameter shapes".into()));
        }
    }

    let (f0, analytic) = {
        let mut g = Graph::new();
        let vars = bind(&mut g, params)?;
        let loss = loss_fn(&mut g, &vars)?;
        let f0 = g.scalar(loss).to_f64_lossy();
        let grads = g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.numel()], |g| g.iter().map(|x| x.to_f64_lossy()).collect()))
            .collect();
        (f0, analytic)
    };
    let again = evaluate(&mut loss_fn, params)?;
    if again.to_bits() != f0.to_bits() {
        return Err(OtterError::UnreliableOracle { first: f0, second: again });
    }

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: None, compared: 0, skipped_frozen: 0 };
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (ti, p) in params.iter().enumerate() {
        let n = p.numel();
        let stride = opts.max_coords_per_tensor.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for idx in (0..n).step_by(stride) {
            if opts.trainable.is_some_and(|m| !m[ti][idx]) {
                report.skipped_frozen += 1;
                continue;
            }
            let orig = p.data()[idx];
            let mut at = |offset: f64| -> Result<f64> {
                work[ti].data_mut()[idx] = orig + T::of(offset);
                let v = evaluate(&mut loss_fn, &work);
                work[ti].data_mut()[idx] = orig;
                v
            };
            let numeric = match opts.stencil {
                Stencil::Central => (at(step)? - at(-step)?) / (2.0 * step),
                Stencil::CentralFourthOrder => {
                    let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step)
                }
            };
            let a = analytic[ti][idx];
            let abs = (a - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            let denom = a.abs() + numeric.abs();
            if denom > opts.significance_floor.unwrap_or(SIGNIFICANCE_FLOOR) {
                report.compared += 1;
                let rel = abs / denom;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((ti, idx));
                }
            }
        }
    }
    Ok(report)
}

fn bind<'g, T: Scalar>(g: &mut Graph<'g, T>, params: &'g [Tensor<T>]) -> Result<Vec<Var>> {
    params.iter().map(|p| g.leaf(p, true)).collect()
}

fn evaluate<T, F>(loss_fn: &mut F, params: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: for<'g> FnMut(&mut Graph<'g, T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = bind(&mut g, params)?;
    let loss = loss_fn(&mut g, &vars)?;
    Ok(g.scalar(loss).to_f64_lossy())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn square_at_three() {
        let theta = Tensor::vector(vec![3.0]);
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.mean(sq)
            },
            &[theta],
            1e-5,
            &CheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.compared, 1);
    }

    #[test]
    fn rejects_bad_step() {
        let theta = Tensor::vector(vec![3.0]);
        let err = grad_check(|g, v| g.mean(v[0]), &[theta], 0.0, &CheckOptions::default());
        assert!(matches!(err, Err(OtterError::Config(_))));
    }

    #[test]
    fn detects_non_deterministic_loss() {
        let theta = Tensor::vector(vec![1.0]);
        let mut calls = 0.0;
        let err = grad_check(
            move |g, v| {
                calls += 1.0;
                let s = g.scale(v[0], calls)?;
                g.mean(s)
            },
            &[theta],
            1e-5,
            &CheckOptions::default(),
        );
        assert!(matches!(err, Err(OtterError::UnreliableOracle { .. })));
    }

    #[test]
    fn frozen_coordinates_are_skipped() {
        let theta = Tensor::vector(vec![1.0, 2.0]);
        let mask = vec![vec![true, false]];
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.mean(sq)
            },
            &[theta],
            1e-5,
            &CheckOptions { trainable: Some(&mask), ..Default::default() },
        )
        .unwrap();
        assert_eq!(r.skipped_frozen, 1);
        assert_eq!(r.compared, 1);
    }

    #[test]
    fn single_precision_is_within_1e3() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, vec![4, 6], 1.0).cast::<f32>();
        let w = random(&mut rng, vec![3, 6], 0.5).cast::<f32>();
        let gamma = random(&mut rng, vec![6], 1.0).cast::<f32>();
        let r = grad_check(
            |g, v| {
                let n = g.rmsnorm(v[0], v[2], 4, 1e-6)?;
                let s = g.silu(n)?;
                let l = g.linear(s, v[1], None)?;
                g.cross_entropy(l, &[Some(0), Some(1), Some(2), None])
            },
            &[x, w, gamma],
            3e-2,
            &CheckOptions { stencil: Stencil::CentralFourthOrder, significance_floor: Some(1e-2), ..Default::default() },
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    /// Every differentiable op, exercised on small random shapes.
    #[test]
    fn every_op_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (batch, seq, hd, heads) = (2, 3, 2, 2);
        let n = batch * seq;
        let width = hd * heads;
        let params = vec![
            random(&mut rng, vec![n, width], 1.0),     // x
            random(&mut rng, vec![width, width], 0.7), // w
            random(&mut rng, vec![width], 0.3),        // b
            random(&mut rng, vec![width], 1.0),        // gamma
            random(&mut rng, vec![5, width], 1.0),     // embedding table
            random(&mut rng, vec![3, width], 0.5),     // head
        ];
        let targets: Vec<Option<u32>> = vec![Some(0), None, Some(2), Some(1), Some(1), None];
        let r = grad_check(
            |g, v| {
                let emb = g.embedding(v[4], &[0, 3, 4, 1, 1, 2])?;
                let x = g.add(v[0], emb)?;
                let normed = g.rmsnorm(x, v[3], 3, 1e-6)?;
                let q = g.linear(normed, v[1], Some(v[2]))?;
                let q = g.rope(q, seq, hd, 10_000.0)?;
                let k = g.rope(normed, seq, hd, 10_000.0)?;
                let act = g.silu(x)?;
                let vv = g.mul(act, normed)?;
                let att = g.attention(q, k, vv, batch, seq, hd)?;
                let h = g.sub(att, x)?;
                let logits = g.linear(h, v[5], None)?;
                let ce = g.cross_entropy(logits, &targets)?;
                let gap = g.rms_gap(h, 2, 1e-6)?;
                let sel = g.select_rows(h, &[5, 0])?;
                let sl = g.slice_cols(sel, 1, 2)?;
                let nls = g.neg_log_sigmoid(sl)?;
                let nls = g.mean(nls)?;
                let gap = g.scale(gap, 0.5)?;
                g.sum_all(&[ce, gap, nls])
            },
            &params,
            1e-3,
            &CheckOptions { stencil: Stencil::CentralFourthOrder, ..Default::default() },
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert!(r.compared > 50);
    }
}
