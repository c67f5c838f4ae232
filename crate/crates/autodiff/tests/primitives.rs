use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tickets_autodiff::{grad_check, Graph, Result, Tensor, Var, LAYER_NORM_EPS};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0) * scale)
}

/// `sum(r * y)` with fixed random `r`, so every output element feeds the
/// scalar with a distinct weight.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = g.value(y).shape().to_vec();
    let r = g.constant(random(&mut rng, &shape, 1.0));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type Prim = fn(&mut Graph, Var, u64) -> Result<Var>;

/// Deterministic auxiliary operand `k` for a given seed.
fn aux(seed: u64, k: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(k));
    random(&mut rng, shape, 1.0)
}

fn positive(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.mul(x, x)?;
    Ok(g.affine(sq, 1.0, 0.5))
}

fn primitives() -> Vec<(&'static str, Vec<usize>, Prim)> {
    vec![
        ("matmul_lhs", vec![3, 4], |g, x, s| {
            let b = g.constant(aux(s, 1, &[4, 2]));
            g.matmul(x, b)
        }),
        ("matmul_rhs", vec![4, 2], |g, x, s| {
            let a = g.constant(aux(s, 1, &[3, 4]));
            g.matmul(a, x)
        }),
        ("add", vec![3, 4], |g, x, s| {
            let c = g.constant(aux(s, 1, &[3, 4]));
            g.add(x, c)
        }),
        ("mul", vec![3, 4], |g, x, s| {
            let c = g.constant(aux(s, 1, &[3, 4]));
            g.mul(x, c)
        }),
        ("add_row_input", vec![2, 4], |g, x, s| {
            let b = g.constant(aux(s, 1, &[4]));
            g.add_row(x, b)
        }),
        ("add_row_bias", vec![4], |g, x, s| {
            let c = g.constant(aux(s, 1, &[2, 4]));
            g.add_row(c, x)
        }),
        ("mul_col_input", vec![2, 4], |g, x, s| {
            let c = g.constant(aux(s, 1, &[2]));
            g.mul_col(x, c)
        }),
        ("mul_col_column", vec![2], |g, x, s| {
            let c = g.constant(aux(s, 1, &[2, 4]));
            g.mul_col(c, x)
        }),
        ("affine", vec![5], |g, x, _| Ok(g.affine(x, -1.5, 0.25))),
        ("gather", vec![4, 3], |g, x, _| g.gather(x, &[2, 0, 2, 3])),
        ("softmax", vec![3, 4], |g, x, _| Ok(g.softmax(x))),
        ("log_softmax", vec![3, 4], |g, x, _| Ok(g.log_softmax(x))),
        ("sigmoid", vec![6], |g, x, _| Ok(g.sigmoid(x))),
        ("softplus", vec![6], |g, x, _| Ok(g.softplus(x))),
        ("tanh", vec![6], |g, x, _| Ok(g.tanh(x))),
        ("gelu", vec![6], |g, x, _| Ok(g.gelu(x))),
        ("relu", vec![6], |g, x, _| Ok(g.relu(x))),
        ("ln", vec![6], |g, x, _| {
            let p = positive(g, x)?;
            g.ln(p)
        }),
        ("ln_clamped", vec![6], |g, x, _| {
            let p = positive(g, x)?;
            Ok(g.ln_clamped(p, 1e-9))
        }),
        ("layer_norm_input", vec![4, 8], |g, x, s| {
            let gamma = g.constant(aux(s, 1, &[8]));
            let beta = g.constant(aux(s, 2, &[8]));
            g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
        }),
        ("layer_norm_gamma", vec![8], |g, x, s| {
            let xs = g.constant(aux(s, 1, &[4, 8]));
            let beta = g.constant(aux(s, 2, &[8]));
            g.layer_norm(xs, x, beta, LAYER_NORM_EPS)
        }),
        ("layer_norm_beta", vec![8], |g, x, s| {
            let xs = g.constant(aux(s, 1, &[4, 8]));
            let gamma = g.constant(aux(s, 2, &[8]));
            g.layer_norm(xs, gamma, x, LAYER_NORM_EPS)
        }),
        ("attention_q", vec![6, 8], |g, x, s| {
            let k = g.constant(aux(s, 1, &[4, 8]));
            let v = g.constant(aux(s, 2, &[4, 8]));
            g.attention(x, k, v, 2, 2)
        }),
        ("attention_k", vec![4, 8], |g, x, s| {
            let q = g.constant(aux(s, 1, &[6, 8]));
            let v = g.constant(aux(s, 2, &[4, 8]));
            g.attention(q, x, v, 2, 2)
        }),
        ("attention_v", vec![4, 8], |g, x, s| {
            let q = g.constant(aux(s, 1, &[6, 8]));
            let k = g.constant(aux(s, 2, &[4, 8]));
            g.attention(q, k, x, 2, 2)
        }),
        ("sum", vec![5], |g, x, _| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        }),
        ("mean", vec![5], |g, x, _| {
            let sq = g.mul(x, x)?;
            Ok(g.mean(sq))
        }),
    ]
}

#[test]
fn every_primitive_passes_grad_check_over_twenty_seeds() {
    for (name, shape, prim) in primitives() {
        let mut worst: f64 = 0.0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &shape, 1.0);
            let check = grad_check(
                |g, x| {
                    let y = prim(g, x, seed)?;
                    project(g, y, seed)
                },
                &x,
                STEP,
            )
            .unwrap_or_else(|e| panic!("{name}: {e}"));
            worst = worst.max(check.max_rel_error);
        }
        assert!(worst < TOL, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn grad_of_summed_sigmoid_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[5], 2.0);
    let c = grad_check(
        |g, x| {
            let y = g.sigmoid(x);
            Ok(g.sum(y))
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(c.max_rel_error < TOL, "{c:?}");
}

#[test]
fn grad_of_constant_map_is_exactly_zero() {
    let x = Tensor::from_fn(vec![4], |i| i as f64);
    let c = grad_check(|g, _| Ok(g.constant(Tensor::scalar(3.0))), &x, STEP).unwrap();
    assert_eq!(c.max_rel_error, 0.0);
}

#[test]
fn grad_of_summed_layer_norm_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[4, 8], 1.0);
    let c = grad_check(
        |g, x| {
            let gamma = g.constant(aux(11, 1, &[8]));
            let beta = g.constant(aux(11, 2, &[8]));
            let y = g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?;
            Ok(g.sum(y))
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(c.max_rel_error < TOL, "{c:?}");
}

#[test]
fn summed_unit_layer_norm_has_identically_zero_gradient() {
    // each normalized row sums to zero, so only roundoff survives
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[4, 8], 1.0);
    let mut g = Graph::new();
    let xv = g.leaf(x, true);
    let gamma = g.constant(Tensor::full(vec![8], 1.0));
    let beta = g.constant(Tensor::zeros(vec![8]));
    let y = g.layer_norm(xv, gamma, beta, LAYER_NORM_EPS).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(xv).unwrap().iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn matmul_gradient_equals_ones_times_b_transpose_numerically() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 2], 1.0);
    let mut g = Graph::new();
    let av = g.leaf(a.clone(), true);
    let bv = g.constant(b.clone());
    let c = g.matmul(av, bv).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    let analytic = g.grad(av).unwrap().to_vec();
    let f = |a: &Tensor| -> f64 {
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        let c = g.matmul(av, bv).unwrap();
        g.value(c).data().iter().sum()
    };
    for i in 0..12 {
        let (mut p, mut m) = (a.clone(), a.clone());
        p.data_mut()[i] += STEP;
        m.data_mut()[i] -= STEP;
        let numeric = (f(&p) - f(&m)) / (2.0 * STEP);
        // ones(3x2) . B^T puts row-sum(B)[col] in every row
        let expected: f64 = b.data()[(i % 4) * 2..(i % 4) * 2 + 2].iter().sum();
        assert!((numeric - expected).abs() < 1e-8);
        assert!((analytic[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn non_finite_output_is_reported() {
    let x = Tensor::from_fn(vec![2], |_| 1.0);
    let err = grad_check(|g, x| {
        let y = g.scale(x, f64::INFINITY);
        Ok(g.sum(y))
    }, &x, STEP)
    .unwrap_err();
    assert!(err.to_string().contains("non-finite"));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[rows, cols], 30.0);
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.softmax(v);
        for row in g.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_bit_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[4, 8], 1.0);
            let w = random(&mut rng, &[8, 8], 1.0);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let wv = g.constant(w);
            let h = g.matmul(xv, wv).unwrap();
            let a = g.attention(h, h, h, 2, 2).unwrap();
            let s = g.gelu(a);
            g.value(s).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
