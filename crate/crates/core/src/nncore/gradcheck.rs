//! Central finite-difference verification of reverse-mode gradients.

use std::sync::Arc;

use crate::rng::Rng;

use super::tape::{GradBuf, NodeId, ParamId, Tape};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Cap on checked coordinates; the rest are sampled with `seed`.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckResult {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst_param: usize,
    pub worst_coord: usize,
}

/// Compares the tape gradient of a scalar-valued computation against
/// central differences `(f(x+eps) − f(x−eps)) / (2·eps)` per coordinate.
///
/// `f` must be deterministic (no dropout, or a frozen mask). It receives one
/// leaf node per entry of `params`, in order, and returns the scalar loss.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> GradCheckResult
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor], want_grads: bool| -> (f64, Option<Vec<Tensor>>) {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(Arc::new(t.clone()), ParamId(i)))
            .collect();
        let loss = f(&mut tape, &leaves);
        let value = tape.value(loss).item();
        if !want_grads {
            return (value, None);
        }
        let mut dense: Vec<Tensor> = tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        for (pid, buf) in tape.backward(loss) {
            let slot = &mut dense[pid.index()];
            match buf {
                GradBuf::Dense(t) => slot.axpy(1.0, &t),
                GradBuf::Rows { shape, rows, data } => {
                    let cols = shape[1];
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &v) in slot
                            .row_mut(r)
                            .iter_mut()
                            .zip(&data[i * cols..(i + 1) * cols])
                        {
                            *o += v;
                        }
                    }
                }
            }
        }
        (value, Some(dense))
    };

    let (_, analytic) = eval(params, true);
    let analytic = analytic.unwrap();

    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |c| (p, c)))
        .collect();
    if coords.len() > opts.max_coords {
        let mut rng = Rng::new(opts.seed);
        let picked = rng.choose_indices(coords.len(), opts.max_coords);
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let mut result = GradCheckResult {
        max_rel_err: 0.0,
        checked: coords.len(),
        worst_param: 0,
        worst_coord: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (p, c) in coords {
        let orig = work[p].data()[c];
        work[p].data_mut()[c] = orig + opts.eps;
        let (plus, _) = eval(&work, false);
        work[p].data_mut()[c] = orig - opts.eps;
        let (minus, _) = eval(&work, false);
        work[p].data_mut()[c] = orig;

        let numeric = (plus - minus) / (2.0 * opts.eps);
        let exact = analytic[p].data()[c];
        // The denominator floor puts near-zero gradients on an absolute
        // 1e-4 scale: central differences of a composite f carry ~1e-10
        // cancellation noise, which would otherwise swamp coordinates whose
        // true gradient is exactly zero (e.g. key biases under softmax's
        // shift invariance).
        let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-4);
        if rel > result.max_rel_err {
            result.max_rel_err = rel;
            result.worst_param = p;
            result.worst_coord = c;
        }
    }
    result
}

/// Runs `grad_check` over every differentiable tape op on randomized small
/// shapes and returns (op name, max relative error) pairs.
pub fn op_gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(seed);
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();

    // Keep ReLU inputs away from the kink so central differences stay valid.
    let away = |t: Tensor| t.map(|x| if x.abs() < 0.1 { x + 0.25 } else { x });

    let a34 = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b45 = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let b34 = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let row4 = Tensor::randn(&[4], 1.0, &mut rng);
    let table = Tensor::randn(&[6, 3], 1.0, &mut rng);
    let gain = Tensor::randn(&[4], 0.5, &mut rng).map(|x| x + 1.0);
    let bias = Tensor::randn(&[4], 0.5, &mut rng);

    let head = |tape: &mut Tape, y: NodeId| tape.sum_squares(y);

    out.push((
        "matmul",
        grad_check(
            |t, p| {
                let y = t.matmul(p[0], p[1]);
                head(t, y)
            },
            &[a34.clone(), b45.clone()],
            &opts,
        )
        .max_rel_err,
    ));
    out.push((
        "matmul_transposed",
        grad_check(
            |t, p| {
                let y = t.matmul_t(p[0], true, p[1], true);
                head(t, y)
            },
            &[a34.clone(), Tensor::randn(&[5, 3], 1.0, &mut Rng::new(7))],
            &opts,
        )
        .max_rel_err,
    ));
    out.push((
        "add",
        grad_check(
            |t, p| {
                let y = t.add(p[0], p[1]);
                head(t, y)
            },
            &[a34.clone(), b34.clone()],
            &opts,
        )
        .max_rel_err,
    ));
    out.push((
        "add_broadcast_row",
        grad_check(
            |t, p| {
                let y = t.add(p[0], p[1]);
                head(t, y)
            },
            &[a34.clone(), row4.clone()],
            &opts,
        )
        .max_rel_err,
    ));
    out.push((
        "mul",
        grad_check(
            |t, p| {
                let y = t.mul(p[0], p[1]);
                head(t, y)
            },
            &[a34.clone(), b34.clone()],
            &opts,
        )
        .max_rel_err,
    ));
    out.push((
        "scale",
        grad_check(
            |t, p| {
                let y = t.scale(p[0], -1.7);
                head(t, y)
            },
            &[a34.clone()],
            &opts,
        )
        .max_rel_err,
    ));
    for (name, which) in [("tanh", 0), ("sigmoid", 1), ("relu", 2), ("gelu", 3)] {
        let input = if which == 2 {
            away(a34.clone())
        } else {
            a34.clone()
        };
        out.push((
            name,
            grad_check(
                |t, p| {
                    let y = match which {
                        0 => t.tanh(p[0]),
                        1 => t.sigmoid(p[0]),
                        2 => t.relu(p[0]),
                        _ => t.gelu(p[0]),
                    };
                    head(t, y)
                },
                &[input],
                &opts,
            )
            .max_rel_err,
        ));
    }
    for (name, axis) in [("softmax_rows", 1usize), ("softmax_cols", 0usize)] {
        out.push((
            name,
            grad_check(
                |t, p| {
                    let y = t.softmax(p[0], axis);
                    // Weight the probabilities so the gradient is nonzero.
                    let w = t.input(Tensor::randn(&[3, 4], 1.0, &mut Rng::new(13)));
                    let z = t.mul(y, w);
                    head(t, z)
                },
                &[a34.clone()],
                &opts,
            )
            .max_rel_err,
        ));
    }
    out.push((
        "concat_cols",
        grad_check(
            |t, p| {
                let y = t.concat(&[p[0], p[1]], 1);
                head(t, y)
            },
            &[a34.clone(), b34.clone()],
            &opts,
        )
        .max_rel_err,
    ));
    out.push((
        "concat_rows",
        grad_check(
            |t, p| {
                let y = t.concat(&[p[0], p[1]], 0);
                head(t, y)
            },
            &[a34.clone(), b34.clone()],
            &opts,
        )
        .max_rel_err,
    ));
    out.push((
        "slice_rows",
        grad_check(
            |t, p| {
                let y = t.slice_rows(p[0], 1, 3);
                head(t, y)
            },
            &[a34.clone()],
            &opts,
        )
        .max_rel_err,
    ));
    out.push((
        "slice_cols",
        grad_check(
            |t, p| {
                let y = t.slice_cols(p[0], 1, 3);
                head(t, y)
            },
            &[a34.clone()],
            &opts,
        )
        .max_rel_err,
    ));
    out.push((
        "embedding_lookup",
        grad_check(
            |t, p| {
                let y = t.embedding_lookup(p[0], &[0, 2, 5, 2]);
                head(t, y)
            },
            &[table.clone()],
            &opts,
        )
        .max_rel_err,
    ));
    out.push((
        "layer_norm",
        grad_check(
            |t, p| {
                let y = t.layer_norm(p[0], p[1], p[2], 1e-5);
                head(t, y)
            },
            &[a34.clone(), gain.clone(), bias.clone()],
            &opts,
        )
        .max_rel_err,
    ));
    out.push((
        "dropout",
        grad_check(
            |t, p| {
                // Frozen mask: same seed on every evaluation.
                let mut r = Rng::new(99);
                let y = t.dropout(p[0], 0.4, true, &mut r);
                head(t, y)
            },
            &[a34.clone()],
            &opts,
        )
        .max_rel_err,
    ));
    out.push((
        "cross_entropy",
        grad_check(
            |t, p| t.cross_entropy(p[0], &[1, 0, 3]),
            &[a34.clone()],
            &opts,
        )
        .max_rel_err,
    ));
    out.push((
        "sum_squares",
        grad_check(|t, p| t.sum_squares(p[0]), &[a34.clone()], &opts).max_rel_err,
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_near_exact() {
        // f(x) = x·x at x = 3: analytic 6, numeric 6.
        let r = grad_check(
            |t, p| t.mul(p[0], p[0]),
            &[Tensor::scalar(3.0)],
            &GradCheckOptions::default(),
        );
        assert!(r.max_rel_err < 1e-9, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn every_op_passes_finite_difference_check() {
        for (name, err) in op_gradient_suite(42) {
            assert!(err < 1e-4, "op {name}: rel err {err}");
        }
    }
}
