//! Central finite-difference oracle for tape ops.
//!
//! Each check builds `loss = Σ out ⊙ W` for a fixed random `W`, takes the
//! analytic gradient from the tape, and compares it against
//! `(loss(x + h) − loss(x − h)) / 2h` evaluated on fresh tapes.

use sugar_core::numerics::{Rng, Tape, Tensor, Var, NEG_LARGE};
use sugar_core::Result;

pub const FD_STEP: f64 = 1e-4;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn weighted_loss(inputs: &[Tensor], weights: &Tensor, build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = build(&mut tape, &vars).expect("forward");
    tape.data(out).iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Largest relative error (norm-wise, per input) between the analytic and
/// finite-difference gradients.
pub fn max_relative_error(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let weights = Tensor::randn(tape.shape(out), 1.0, &mut Rng::new(seed ^ 0xABCD));
    let w = tape.constant(&weights);
    let prod = tape.mul(out, w).expect("mul");
    let loss = tape.sum(prod).expect("sum");
    let grads = tape.backward(loss).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            *slot = (weighted_loss(&plus, &weights, build) - weighted_loss(&minus, &weights, build)) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Random additive mask that keeps at least the diagonal open.
fn random_mask(n: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        if i == j || rng.uniform() < 0.6 {
            0.0
        } else {
            NEG_LARGE
        }
    })
}

/// Runs the finite-difference check for every differentiable op at one seed.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let mut check = |name: &'static str, inputs: Vec<Tensor>, build: Box<Build>| {
        out.push((name, max_relative_error(&inputs, build.as_ref(), seed)));
    };

    check("matmul", vec![randn(&[4, 5], &mut rng), randn(&[5, 3], &mut rng)], Box::new(|t, v| t.matmul(v[0], v[1])));
    check("add", vec![randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng)], Box::new(|t, v| t.add(v[0], v[1])));
    check("sub", vec![randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng)], Box::new(|t, v| t.sub(v[0], v[1])));
    check("add_row", vec![randn(&[3, 4], &mut rng), randn(&[4], &mut rng)], Box::new(|t, v| t.add_row(v[0], v[1])));
    check("mul", vec![randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng)], Box::new(|t, v| t.mul(v[0], v[1])));
    check("scale", vec![randn(&[2, 5], &mut rng)], Box::new(|t, v| t.scale(v[0], -1.7)));
    check("reshape", vec![randn(&[2, 6], &mut rng)], Box::new(|t, v| t.reshape(v[0], &[3, 2, 2])));
    check(
        "concat",
        vec![randn(&[2, 3], &mut rng), randn(&[4, 3], &mut rng), randn(&[2, 5], &mut rng)],
        Box::new(|t, v| {
            let rows = t.concat(&[v[0], v[1]], 0)?;
            let top = t.slice(rows, 0, 0, 2)?;
            t.concat(&[top, v[2]], 1)
        }),
    );
    check("slice", vec![randn(&[3, 4, 2], &mut rng)], Box::new(|t, v| t.slice(v[0], 1, 1, 2)));
    check("gelu", vec![randn(&[3, 5], &mut rng)], Box::new(|t, v| t.gelu(v[0])));
    let indices: Vec<usize> = (0..5).map(|_| rng.below(6)).collect();
    check("embedding_lookup", vec![randn(&[6, 3], &mut rng)], Box::new(move |t, v| t.embedding_lookup(v[0], &indices)));
    let mask = random_mask(4, &mut rng);
    check(
        "softmax_rows",
        vec![randn(&[4, 4], &mut rng)],
        Box::new(move |t, v| {
            let m = t.constant(&mask);
            t.softmax_rows(v[0], Some(m))
        }),
    );
    let mask = random_mask(5, &mut rng);
    check(
        "masked_attention",
        vec![randn(&[5, 4], &mut rng), randn(&[5, 4], &mut rng), randn(&[5, 4], &mut rng)],
        Box::new(move |t, v| {
            let m = t.constant(&mask);
            t.masked_attention(v[0], v[1], v[2], Some(m), 2)
        }),
    );
    check(
        "layer_norm",
        vec![randn(&[3, 5], &mut rng), randn(&[5], &mut rng), randn(&[5], &mut rng)],
        Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
    );
    check(
        "mse_loss",
        vec![randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng)],
        Box::new(|t, v| t.mse_loss(v[0], v[1])),
    );
    check("sum", vec![randn(&[2, 3], &mut rng)], Box::new(|t, v| t.sum(v[0])));
    out
}
