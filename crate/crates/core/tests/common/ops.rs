//! Finite-difference adjoint checks for every tape operation.

use modp::diffkit::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::rel_err;

const H: f64 = 1e-5;

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// Name, input shapes, whether inputs must be positive, and the scalar loss.
pub type OpCase = (&'static str, Vec<Vec<usize>>, bool, Build);

/// Reverse-mode gradients of `build` versus central differences, for every
/// entry of every input. Returns the worst relative error.
pub fn max_grad_error(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad(true)))
        .collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad_or_zeros(v).unwrap())
        .collect();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).item()
    };
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Fixed random projection so every loss below is a non-trivial scalar.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(tape.shape(x), 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

pub fn cases() -> Vec<OpCase> {
    vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            false,
            Box::new(|t, v| {
                let r = t.matmul(v[0], v[1]).unwrap();
                project(t, r, 1)
            }),
        ),
        (
            "add",
            vec![vec![2, 3], vec![2, 3]],
            false,
            Box::new(|t, v| {
                let r = t.add(v[0], v[1]).unwrap();
                project(t, r, 2)
            }),
        ),
        (
            "add_scalar",
            vec![vec![2, 3], vec![]],
            false,
            Box::new(|t, v| {
                let r = t.add(v[0], v[1]).unwrap();
                project(t, r, 3)
            }),
        ),
        (
            "mul",
            vec![vec![2, 3], vec![2, 3]],
            false,
            Box::new(|t, v| {
                let r = t.mul(v[0], v[1]).unwrap();
                project(t, r, 4)
            }),
        ),
        (
            "mul_scalar",
            vec![vec![], vec![3, 2]],
            false,
            Box::new(|t, v| {
                let r = t.mul(v[0], v[1]).unwrap();
                project(t, r, 5)
            }),
        ),
        (
            "relu",
            vec![vec![2, 5]],
            false,
            Box::new(|t, v| {
                let r = t.relu(v[0]);
                project(t, r, 6)
            }),
        ),
        (
            "log",
            vec![vec![2, 4]],
            true,
            Box::new(|t, v| {
                let r = t.log(v[0]).unwrap();
                project(t, r, 7)
            }),
        ),
        (
            "exp",
            vec![vec![2, 4]],
            false,
            Box::new(|t, v| {
                let r = t.exp(v[0]);
                project(t, r, 8)
            }),
        ),
        (
            "square",
            vec![vec![3, 3]],
            false,
            Box::new(|t, v| {
                let r = t.square(v[0]);
                project(t, r, 9)
            }),
        ),
        (
            "softmax",
            vec![vec![3, 5]],
            false,
            Box::new(|t, v| {
                let r = t.softmax(v[0]).unwrap();
                project(t, r, 10)
            }),
        ),
        (
            "concat",
            vec![vec![2, 3], vec![2, 2]],
            false,
            Box::new(|t, v| {
                let r = t.concat(&[v[0], v[1]]).unwrap();
                project(t, r, 11)
            }),
        ),
        (
            "slice",
            vec![vec![3, 6]],
            false,
            Box::new(|t, v| {
                let r = t.slice(v[0], 1, 4).unwrap();
                project(t, r, 12)
            }),
        ),
        (
            "sum",
            vec![vec![2, 3]],
            false,
            Box::new(|t, v| {
                let s = t.square(v[0]);
                t.sum(s)
            }),
        ),
        (
            "mean",
            vec![vec![2, 3]],
            false,
            Box::new(|t, v| {
                let s = t.exp(v[0]);
                t.mean(s)
            }),
        ),
        (
            "three_layer_composition",
            vec![vec![4, 3], vec![3, 5], vec![5, 4], vec![4, 2]],
            false,
            Box::new(|t, v| {
                let h1 = t.matmul(v[0], v[1]).unwrap();
                let h1 = t.relu(h1);
                let h2 = t.matmul(h1, v[2]).unwrap();
                let h2 = t.scale(h2, 0.3).unwrap();
                let h2 = t.exp(h2);
                let h3 = t.matmul(h2, v[3]).unwrap();
                let h3 = t.scale(h3, 0.1).unwrap();
                let p = t.softmax(h3).unwrap();
                let lp = t.log(p).unwrap();
                project(t, lp, 13)
            }),
        ),
    ]
}

/// Worst relative error of `case` over random inputs drawn from seeds
/// `0..seeds`.
pub fn worst_over_seeds(case: &OpCase, seeds: u64) -> f64 {
    let (_, shapes, positive, build) = case;
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let mut t = Tensor::randn(s, 1.0, &mut rng);
                if *positive {
                    t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.2);
                }
                t
            })
            .collect();
        worst = worst.max(max_grad_error(&inputs, build.as_ref()));
    }
    worst
}
