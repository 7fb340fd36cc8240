//! Central finite-difference verification of tape gradients. The checker
//! never trusts the tape's own backward: it rebuilds the graph from
//! perturbed leaves and compares slopes.
//!
//! `standard_suite` covers every differentiable op with randomized shapes
//! and values. Kinked ops (relu, abs, min/max, maxpool) are probed with
//! inputs kept away from their kinks, since a finite difference straddling
//! a kink measures nothing. `fake_quantize` is deliberately absent: its
//! backward is a straight-through surrogate, not the local derivative of
//! its (piecewise-constant) forward, so it gets its own closed-form oracle
//! in the quantizer module. Its 32-bit passthrough mode, which really is
//! the identity, is covered here.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

pub struct GradCheck {
    /// central difference half step
    pub h: f64,
    pub rel_tol: f64,
    /// absolute slack for near-zero gradients
    pub abs_floor: f64,
    /// finite-difference probes per leaf
    pub probes_per_leaf: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { h: 1e-5, rel_tol: 1e-4, abs_floor: 1e-7, probes_per_leaf: 6 }
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    /// Verify d(loss)/d(leaf) for every leaf against central differences.
    /// `build` must be a pure function of the leaf tensors.
    pub fn check<F>(&self, leaves: &[Tensor], rng: &mut ChaCha12Rng, build: F) -> Result<CheckReport>
    where
        F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
    {
        let eval = |ts: &[Tensor]| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
            let mut tape = Tape::new();
            let ids: Vec<ValueId> = ts.iter().map(|t| tape.leaf(t)).collect();
            let loss = build(&mut tape, &ids)?;
            tape.backward(loss)?;
            let grads = ids.iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect();
            Ok((tape.value_scalar(loss), grads))
        };
        let (_, analytic) = eval(leaves)?;

        let mut probes = 0;
        let mut max_rel = 0.0f64;
        for (li, leaf) in leaves.iter().enumerate() {
            if !leaf.requires_grad {
                continue;
            }
            let an = analytic[li].clone().unwrap_or_else(|| vec![0.0; leaf.numel()]);
            // with replacement, so tiny leaves still get the full count
            for _ in 0..self.probes_per_leaf {
                let ei = rng.gen_range(0..leaf.numel());
                let mut plus = leaves.to_vec();
                plus[li].data_mut()[ei] += self.h;
                let mut minus = leaves.to_vec();
                minus[li].data_mut()[ei] -= self.h;
                let (fp, _) = eval(&plus)?;
                let (fm, _) = eval(&minus)?;
                let fd = (fp - fm) / (2.0 * self.h);
                let err = (fd - an[ei]).abs();
                let tol = self.rel_tol * fd.abs().max(an[ei].abs()) + self.abs_floor;
                let rel = err / fd.abs().max(an[ei].abs()).max(1e-3);
                max_rel = max_rel.max(rel);
                probes += 1;
                if err > tol {
                    return Err(Error::invalid(
                        "gradcheck",
                        format!(
                            "leaf {li} elem {ei}: finite diff {fd:.9e} vs analytic {:.9e} (err {err:.3e} > tol {tol:.3e})",
                            an[ei]
                        ),
                    ));
                }
            }
        }
        Ok(CheckReport { probes, max_rel_err: max_rel })
    }
}

/// Random-weighted sum reduction. Using plain sums would let ops with
/// invariants (softmax rows summing to one) pass with zero gradient.
fn weighted_loss(tape: &mut Tape, out: ValueId, weights: &[f64]) -> Result<ValueId> {
    let w = tape.constant(tape.shape(out).to_vec(), weights.to_vec())?;
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}

fn randn_vec(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| crate::tensor::randn_scalar(rng)).collect()
}

/// Push |x| above `margin` so finite differences never straddle a kink.
fn away_from(mut v: Vec<f64>, margin: f64) -> Vec<f64> {
    for x in v.iter_mut() {
        if x.abs() < margin {
            *x = if *x >= 0.0 { margin + 0.1 } else { -margin - 0.1 };
        }
    }
    v
}

pub struct OpCase {
    pub name: &'static str,
    run: fn(&mut ChaCha12Rng, &GradCheck) -> Result<CheckReport>,
}

impl OpCase {
    pub fn run(&self, rng: &mut ChaCha12Rng, gc: &GradCheck) -> Result<CheckReport> {
        (self.run)(rng, gc)
    }
}

macro_rules! op_case {
    ($name:literal, $fn:expr) => {
        OpCase { name: $name, run: $fn }
    };
}

fn rand_shape2(rng: &mut ChaCha12Rng) -> Vec<usize> {
    vec![rng.gen_range(1..5usize), rng.gen_range(1..6usize)]
}

fn pair_leaves(rng: &mut ChaCha12Rng) -> (Vec<usize>, Tensor, Tensor) {
    let shape = rand_shape2(rng);
    let n = shape.iter().product();
    let a = Tensor::new(shape.clone(), randn_vec(rng, n)).unwrap().with_grad();
    let b = Tensor::new(shape.clone(), randn_vec(rng, n)).unwrap().with_grad();
    (shape, a, b)
}

fn check_binary(
    rng: &mut ChaCha12Rng,
    gc: &GradCheck,
    a: Tensor,
    b: Tensor,
    f: fn(&mut Tape, ValueId, ValueId) -> Result<ValueId>,
) -> Result<CheckReport> {
    let n = a.numel();
    let w = randn_vec(rng, n);
    gc.check(&[a, b], rng, move |tape, ids| {
        let out = f(tape, ids[0], ids[1])?;
        weighted_loss(tape, out, &w)
    })
}

/// One randomized verification per op per call. Covers every
/// differentiable tape op.
pub fn standard_suite() -> Vec<OpCase> {
    vec![
        op_case!("add", |rng, gc| {
            let (_, a, b) = pair_leaves(rng);
            check_binary(rng, gc, a, b, |t, x, y| t.add(x, y))
        }),
        op_case!("sub", |rng, gc| {
            let (_, a, b) = pair_leaves(rng);
            check_binary(rng, gc, a, b, |t, x, y| t.sub(x, y))
        }),
        op_case!("mul", |rng, gc| {
            let (_, a, b) = pair_leaves(rng);
            check_binary(rng, gc, a, b, |t, x, y| t.mul(x, y))
        }),
        op_case!("div", |rng, gc| {
            let (shape, a, _) = pair_leaves(rng);
            let n = a.numel();
            let b = Tensor::new(shape, away_from(randn_vec(rng, n), 0.4)).unwrap().with_grad();
            check_binary(rng, gc, a, b, |t, x, y| t.div(x, y))
        }),
        op_case!("min_elem", |rng, gc| {
            let (shape, a, _) = pair_leaves(rng);
            let n = a.numel();
            // keep operands separated so the selection cannot flip under h
            let b_data: Vec<f64> = a.data().iter().map(|&x| x + if x > 0.0 { 0.5 } else { -0.5 }).collect();
            let b = Tensor::new(shape, b_data).unwrap().with_grad();
            let _ = n;
            check_binary(rng, gc, a, b, |t, x, y| t.min_elem(x, y))
        }),
        op_case!("max_elem", |rng, gc| {
            let (shape, a, _) = pair_leaves(rng);
            let b_data: Vec<f64> = a.data().iter().map(|&x| x - if x > 0.0 { 0.5 } else { -0.5 }).collect();
            let b = Tensor::new(shape, b_data).unwrap().with_grad();
            check_binary(rng, gc, a, b, |t, x, y| t.max_elem(x, y))
        }),
        op_case!("add_scalar", |rng, gc| {
            let (_, a, _) = pair_leaves(rng);
            let c: f64 = rng.gen_range(-2.0..2.0);
            let w = randn_vec(rng, a.numel());
            gc.check(&[a], rng, move |tape, ids| {
                let out = tape.add_scalar(ids[0], c);
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("mul_scalar", |rng, gc| {
            let (_, a, _) = pair_leaves(rng);
            let c: f64 = rng.gen_range(-2.0..2.0);
            let w = randn_vec(rng, a.numel());
            gc.check(&[a], rng, move |tape, ids| {
                let out = tape.mul_scalar(ids[0], c);
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("sigmoid", |rng, gc| { check_unary(rng, gc, None, |t, x| Ok(t.sigmoid(x))) }),
        op_case!("silu", |rng, gc| { check_unary(rng, gc, None, |t, x| Ok(t.silu(x))) }),
        op_case!("relu", |rng, gc| { check_unary(rng, gc, Some(0.01), |t, x| Ok(t.relu(x))) }),
        op_case!("exp", |rng, gc| { check_unary(rng, gc, None, |t, x| Ok(t.exp(x))) }),
        op_case!("log", |rng, gc| {
            let shape = rand_shape2(rng);
            let n = shape.iter().product();
            let data: Vec<f64> = randn_vec(rng, n).iter().map(|x| x.abs() + 0.5).collect();
            let a = Tensor::new(shape, data).unwrap().with_grad();
            let w = randn_vec(rng, n);
            gc.check(&[a], rng, move |tape, ids| {
                let out = tape.log(ids[0]);
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("sqrt", |rng, gc| {
            let shape = rand_shape2(rng);
            let n = shape.iter().product();
            let data: Vec<f64> = randn_vec(rng, n).iter().map(|x| x.abs() + 0.5).collect();
            let a = Tensor::new(shape, data).unwrap().with_grad();
            let w = randn_vec(rng, n);
            gc.check(&[a], rng, move |tape, ids| {
                let out = tape.sqrt(ids[0]);
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("abs", |rng, gc| { check_unary(rng, gc, Some(0.01), |t, x| Ok(t.abs(x))) }),
        op_case!("sum_all", |rng, gc| {
            let (_, a, _) = pair_leaves(rng);
            gc.check(&[a], rng, |tape, ids| {
                let s = tape.sigmoid(ids[0]);
                Ok(tape.sum_all(s))
            })
        }),
        op_case!("mean_all", |rng, gc| {
            let (_, a, _) = pair_leaves(rng);
            gc.check(&[a], rng, |tape, ids| {
                let s = tape.silu(ids[0]);
                Ok(tape.mean_all(s))
            })
        }),
        op_case!("sum_axis", |rng, gc| {
            let shape = vec![rng.gen_range(1..4usize), rng.gen_range(2..5usize), rng.gen_range(1..4usize)];
            let n: usize = shape.iter().product();
            let axis = rng.gen_range(0..3usize);
            let a = Tensor::new(shape.clone(), randn_vec(rng, n)).unwrap().with_grad();
            let mut wshape = shape;
            wshape[axis] = 1;
            let w = randn_vec(rng, wshape.iter().product());
            gc.check(&[a], rng, move |tape, ids| {
                let out = tape.sum_axis(ids[0], axis)?;
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("reshape", |rng, gc| {
            let (shape, a, _) = pair_leaves(rng);
            let n = a.numel();
            let w = randn_vec(rng, n);
            let flat = vec![n];
            let _ = shape;
            gc.check(&[a], rng, move |tape, ids| {
                let out = tape.reshape(ids[0], flat.clone())?;
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("slice_axis", |rng, gc| {
            let shape = vec![rng.gen_range(2..5usize), rng.gen_range(3..6usize)];
            let n: usize = shape.iter().product();
            let axis = rng.gen_range(0..2usize);
            let len = rng.gen_range(1..=shape[axis] - 1);
            let start = rng.gen_range(0..=shape[axis] - len);
            let a = Tensor::new(shape.clone(), randn_vec(rng, n)).unwrap().with_grad();
            let mut oshape = shape;
            oshape[axis] = len;
            let w = randn_vec(rng, oshape.iter().product());
            gc.check(&[a], rng, move |tape, ids| {
                let out = tape.slice_axis(ids[0], axis, start, len)?;
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("concat", |rng, gc| {
            let rows_a = rng.gen_range(1..3usize);
            let rows_b = rng.gen_range(1..3usize);
            let cols = rng.gen_range(2..5usize);
            let a = Tensor::new(vec![rows_a, cols], randn_vec(rng, rows_a * cols)).unwrap().with_grad();
            let b = Tensor::new(vec![rows_b, cols], randn_vec(rng, rows_b * cols)).unwrap().with_grad();
            let w = randn_vec(rng, (rows_a + rows_b) * cols);
            gc.check(&[a, b], rng, move |tape, ids| {
                let out = tape.concat(&[ids[0], ids[1]], 0)?;
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("gather_cells", |rng, gc| {
            let (n, c, g) = (rng.gen_range(1..3usize), rng.gen_range(1..4usize), rng.gen_range(2..4usize));
            let a = Tensor::new(vec![n, c, g, g], randn_vec(rng, n * c * g * g)).unwrap().with_grad();
            let m = rng.gen_range(1..5usize);
            // duplicates allowed on purpose; they exercise accumulation
            let cells: Vec<(u32, u32, u32)> = (0..m)
                .map(|_| {
                    (
                        rng.gen_range(0..n) as u32,
                        rng.gen_range(0..g) as u32,
                        rng.gen_range(0..g) as u32,
                    )
                })
                .collect();
            let w = randn_vec(rng, m * c);
            gc.check(&[a], rng, move |tape, ids| {
                let out = tape.gather_cells(ids[0], &cells)?;
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("matmul", |rng, gc| {
            let (m, k, n) = (rng.gen_range(1..4usize), rng.gen_range(1..4usize), rng.gen_range(1..4usize));
            let a = Tensor::new(vec![m, k], randn_vec(rng, m * k)).unwrap().with_grad();
            let b = Tensor::new(vec![k, n], randn_vec(rng, k * n)).unwrap().with_grad();
            let w = randn_vec(rng, m * n);
            gc.check(&[a, b], rng, move |tape, ids| {
                let out = tape.matmul(ids[0], ids[1])?;
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("conv2d", |rng, gc| {
            let (n, cin, cout) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize), rng.gen_range(1..3usize));
            let k = [1usize, 3][rng.gen_range(0..2usize)];
            let stride = rng.gen_range(1..3usize);
            let pad = if k == 3 { rng.gen_range(0..2usize) } else { 0 };
            let hw = rng.gen_range(k + 1..7);
            let x = Tensor::new(vec![n, cin, hw, hw], randn_vec(rng, n * cin * hw * hw)).unwrap().with_grad();
            let wk = Tensor::new(vec![cout, cin, k, k], randn_vec(rng, cout * cin * k * k)).unwrap().with_grad();
            let b = Tensor::new(vec![cout], randn_vec(rng, cout)).unwrap().with_grad();
            let geom = crate::kernels::ConvGeom::new(cin, hw, hw, k, stride, pad);
            let w = randn_vec(rng, n * cout * geom.hout * geom.wout);
            gc.check(&[x, wk, b], rng, move |tape, ids| {
                let out = tape.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad)?;
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("maxpool2d", |rng, gc| {
            let (n, c) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
            let hw = rng.gen_range(3..7usize);
            let total = n * c * hw * hw;
            // spread values far apart so the argmax never flips under h
            let mut data = randn_vec(rng, total);
            for (i, v) in data.iter_mut().enumerate() {
                *v = *v * 0.001 + i as f64;
            }
            let x = Tensor::new(vec![n, c, hw, hw], data).unwrap().with_grad();
            let ho = (hw - 2) / 2 + 1;
            let w = randn_vec(rng, n * c * ho * ho);
            gc.check(&[x], rng, move |tape, ids| {
                let out = tape.maxpool2d(ids[0], 2, 2)?;
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("upsample_nearest2d", |rng, gc| {
            let (n, c) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
            let hw = rng.gen_range(2..5usize);
            let scale = rng.gen_range(2..4usize);
            let x = Tensor::new(vec![n, c, hw, hw], randn_vec(rng, n * c * hw * hw)).unwrap().with_grad();
            let w = randn_vec(rng, n * c * hw * hw * scale * scale);
            gc.check(&[x], rng, move |tape, ids| {
                let out = tape.upsample_nearest2d(ids[0], scale)?;
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("softmax", |rng, gc| {
            let shape = vec![rng.gen_range(1..4usize), rng.gen_range(2..5usize)];
            let n = shape.iter().product();
            let a = Tensor::new(shape, randn_vec(rng, n)).unwrap().with_grad();
            let w = randn_vec(rng, n);
            gc.check(&[a], rng, move |tape, ids| {
                let out = tape.softmax(ids[0], 1)?;
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("log_softmax", |rng, gc| {
            let shape = vec![rng.gen_range(1..4usize), rng.gen_range(2..5usize)];
            let n = shape.iter().product();
            let a = Tensor::new(shape, randn_vec(rng, n)).unwrap().with_grad();
            let w = randn_vec(rng, n);
            gc.check(&[a], rng, move |tape, ids| {
                let out = tape.log_softmax(ids[0], 1)?;
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("bce_with_logits", |rng, gc| {
            let (shape, a, _) = pair_leaves(rng);
            let n = a.numel();
            let t_data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..0.9)).collect();
            let t = Tensor::new(shape, t_data).unwrap().with_grad();
            let w = randn_vec(rng, n);
            gc.check(&[a, t], rng, move |tape, ids| {
                let out = tape.bce_with_logits(ids[0], ids[1])?;
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("batchnorm_train", |rng, gc| {
            let (n, c, hw) = (rng.gen_range(2..4usize), rng.gen_range(1..4usize), rng.gen_range(2..4usize));
            let x = Tensor::new(vec![n, c, hw, hw], randn_vec(rng, n * c * hw * hw)).unwrap().with_grad();
            let gamma = Tensor::new(vec![c], away_from(randn_vec(rng, c), 0.2)).unwrap().with_grad();
            let beta = Tensor::new(vec![c], randn_vec(rng, c)).unwrap().with_grad();
            let w = randn_vec(rng, n * c * hw * hw);
            gc.check(&[x, gamma, beta], rng, move |tape, ids| {
                let out = tape.batchnorm_train(ids[0], ids[1], ids[2], 1e-5)?;
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("batchnorm_eval", |rng, gc| {
            let (n, c, hw) = (rng.gen_range(1..3usize), rng.gen_range(1..4usize), rng.gen_range(2..4usize));
            let x = Tensor::new(vec![n, c, hw, hw], randn_vec(rng, n * c * hw * hw)).unwrap().with_grad();
            let gamma = Tensor::new(vec![c], randn_vec(rng, c)).unwrap().with_grad();
            let beta = Tensor::new(vec![c], randn_vec(rng, c)).unwrap().with_grad();
            let rm = randn_vec(rng, c);
            let rv: Vec<f64> = randn_vec(rng, c).iter().map(|v| v.abs() + 0.3).collect();
            let w = randn_vec(rng, n * c * hw * hw);
            gc.check(&[x, gamma, beta], rng, move |tape, ids| {
                let out = tape.batchnorm_eval(ids[0], ids[1], ids[2], &rm, &rv, 1e-5)?;
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("channel_stats", |rng, gc| {
            let (n, c, hw) = (rng.gen_range(1..3usize), rng.gen_range(1..4usize), rng.gen_range(2..4usize));
            let x = Tensor::new(vec![n, c, hw, hw], randn_vec(rng, n * c * hw * hw)).unwrap().with_grad();
            let w = randn_vec(rng, 2 * c);
            gc.check(&[x], rng, move |tape, ids| {
                let out = tape.channel_stats(ids[0])?;
                weighted_loss(tape, out, &w)
            })
        }),
        op_case!("fake_quantize_passthrough", |rng, gc| {
            let (_, a, _) = pair_leaves(rng);
            let w = randn_vec(rng, a.numel());
            gc.check(&[a], rng, move |tape, ids| {
                let s = tape.scalar_const(0.25);
                let out = tape.fake_quantize(ids[0], s, None, 32)?;
                weighted_loss(tape, out, &w)
            })
        }),
    ]
}

fn check_unary(
    rng: &mut ChaCha12Rng,
    gc: &GradCheck,
    kink_margin: Option<f64>,
    f: fn(&mut Tape, ValueId) -> Result<ValueId>,
) -> Result<CheckReport> {
    let shape = rand_shape2(rng);
    let n = shape.iter().product();
    let mut data = randn_vec(rng, n);
    if let Some(m) = kink_margin {
        data = away_from(data, m);
    }
    let a = Tensor::new(shape, data).unwrap().with_grad();
    let w = randn_vec(rng, n);
    gc.check(&[a], rng, move |tape, ids| {
        let out = f(tape, ids[0])?;
        weighted_loss(tape, out, &w)
    })
}

/// Run the whole suite `rounds` times with fresh randomization. Returns
/// (op name, probe count, worst relative error) per op.
pub fn run_standard_suite(seed: u64, rounds: usize) -> Result<Vec<(String, usize, f64)>> {
    let gc = GradCheck::default();
    let mut results = Vec::new();
    for case in standard_suite() {
        let mut probes = 0;
        let mut worst = 0.0f64;
        for round in 0..rounds {
            let mut rng = stream_rng(seed ^ ((round as u64) << 8), 0xfd);
            let rep = case.run(&mut rng, &gc).map_err(|e| {
                Error::invalid("gradcheck", format!("op {} round {round}: {e}", case.name))
            })?;
            probes += rep.probes;
            worst = worst.max(rep.max_rel_err);
        }
        results.push((case.name.to_string(), probes, worst));
    }
    Ok(results)
}
