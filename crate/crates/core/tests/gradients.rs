//! Finite-difference checks for every differentiable tape op.

use caila_core::autodiff::grad_check;
use caila_core::{Result, SeqLayout, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero, for kinked activations.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape, 1.0);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

fn constant(tape: &mut Tape<f64>, t: &Tensor) -> Var {
    tape.constant(t).unwrap()
}

/// Contracts `y` with fixed random weights so every output entry matters.
fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights)?;
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

fn check_all<F>(name: &str, mut case: F)
where
    F: FnMut(&mut ChaCha8Rng) -> f64,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = case(&mut rng);
        assert!(err < TOL, "{name}: seed {seed} error {err:e}");
    }
}

#[test]
fn matmul_both_operands() {
    check_all("matmul.a", |rng| {
        let (a, b, w) = (random(rng, &[3, 4], 1.0), random(rng, &[4, 2], 1.0), random(rng, &[3, 2], 1.0));
        grad_check(|t, x| { let b = constant(t, &b); let y = t.matmul(x, b)?; project(t, y, &w) }, &a, EPS).unwrap()
    });
    check_all("matmul.b", |rng| {
        let (a, b, w) = (random(rng, &[3, 4], 1.0), random(rng, &[4, 2], 1.0), random(rng, &[3, 2], 1.0));
        grad_check(|t, x| { let a = constant(t, &a); let y = t.matmul(a, x)?; project(t, y, &w) }, &b, EPS).unwrap()
    });
}

#[test]
fn sum_of_matmul_gradient_is_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (a, b) = (random(&mut rng, &[2, 3], 1.0), random(&mut rng, &[3, 4], 1.0));
    let mut tape = Tape::<f64>::new();
    let av = tape.variable(&a).unwrap();
    let bv = tape.constant(&b).unwrap();
    let y = tape.matmul(av, bv).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(av).unwrap();
    for i in 0..2 {
        for k in 0..3 {
            let expect: f64 = (0..4).map(|j| b.data()[k * 4 + j] as f64).sum();
            assert!((g[i * 3 + k] - expect).abs() < 1e-12);
        }
    }
    let err = grad_check(
        |t, x| { let b = constant(t, &b); let y = t.matmul(x, b)?; t.sum(y) },
        &a,
        1e-3,
    )
    .unwrap();
    assert!(err < TOL);
}

#[test]
fn elementwise_and_structural_ops() {
    check_all("transpose", |rng| {
        let (x, w) = (random(rng, &[3, 5], 1.0), random(rng, &[5, 3], 1.0));
        grad_check(|t, x| { let y = t.transpose(x)?; project(t, y, &w) }, &x, EPS).unwrap()
    });
    check_all("add", |rng| {
        let (x, c, w) = (random(rng, &[2, 3], 1.0), random(rng, &[2, 3], 1.0), random(rng, &[2, 3], 1.0));
        grad_check(|t, x| { let c = constant(t, &c); let y = t.add(x, c)?; let y = t.add(y, x)?; project(t, y, &w) }, &x, EPS).unwrap()
    });
    check_all("add_row", |rng| {
        let (x, b, w) = (random(rng, &[4, 3], 1.0), random(rng, &[3], 1.0), random(rng, &[4, 3], 1.0));
        grad_check(|t, v| { let x = constant(t, &x); let y = t.add_row(x, v)?; project(t, y, &w) }, &b, EPS).unwrap()
    });
    check_all("mul", |rng| {
        let (x, c, w) = (random(rng, &[2, 3], 1.0), random(rng, &[2, 3], 1.0), random(rng, &[2, 3], 1.0));
        grad_check(|t, x| { let c = constant(t, &c); let y = t.mul(x, c)?; let y = t.mul(y, x)?; project(t, y, &w) }, &x, EPS).unwrap()
    });
    check_all("scale", |rng| {
        let (x, w) = (random(rng, &[6], 1.0), random(rng, &[6], 1.0));
        grad_check(|t, x| { let y = t.scale(x, -2.5)?; project(t, y, &w) }, &x, EPS).unwrap()
    });
    check_all("average", |rng| {
        let (x, c, w) = (random(rng, &[2, 3], 1.0), random(rng, &[2, 3], 1.0), random(rng, &[2, 3], 1.0));
        grad_check(|t, x| { let c = constant(t, &c); let y = t.average(&[x, c, x])?; project(t, y, &w) }, &x, EPS).unwrap()
    });
    check_all("gather_rows", |rng| {
        let (x, c, w) = (random(rng, &[3, 2], 1.0), random(rng, &[2, 2], 1.0), random(rng, &[5, 2], 1.0));
        grad_check(
            |t, x| {
                let c = constant(t, &c);
                let y = t.gather_rows(&[x, c], &[(0, 2), (1, 0), (0, 2), (0, 0), (1, 1)])?;
                project(t, y, &w)
            },
            &x,
            EPS,
        )
        .unwrap()
    });
    check_all("sum", |rng| {
        let x = random(rng, &[7], 3.0);
        grad_check(|t, x| t.sum(x), &x, EPS).unwrap()
    });
}

#[test]
fn average_gradient_is_one_third() {
    let mut tape = Tape::<f64>::new();
    let a = tape.variable(&Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let b = tape.constant(&Tensor::from_vec(vec![3.0, 4.0])).unwrap();
    let c = tape.constant(&Tensor::from_vec(vec![5.0, 6.0])).unwrap();
    let y = tape.average(&[a, b, c]).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    for g in tape.grad(a).unwrap() {
        assert!((g - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn activations() {
    check_all("gelu", |rng| {
        let (x, w) = (random(rng, &[10], 3.0), random(rng, &[10], 1.0));
        grad_check(|t, x| { let y = t.gelu(x)?; project(t, y, &w) }, &x, EPS).unwrap()
    });
    check_all("relu", |rng| {
        let (x, w) = (away_from_zero(rng, &[10]), random(rng, &[10], 1.0));
        grad_check(|t, x| { let y = t.relu(x)?; project(t, y, &w) }, &x, EPS).unwrap()
    });
}

#[test]
fn layer_norm_all_inputs() {
    let eps = 1e-5;
    check_all("layer_norm.x", |rng| {
        let (x, g, b, w) = (random(rng, &[3, 5], 2.0), random(rng, &[5], 1.5), random(rng, &[5], 1.0), random(rng, &[3, 5], 1.0));
        grad_check(|t, x| { let (g, b) = (constant(t, &g), constant(t, &b)); let y = t.layer_norm(x, g, b, eps)?; project(t, y, &w) }, &x, EPS).unwrap()
    });
    check_all("layer_norm.gain", |rng| {
        let (x, g, b, w) = (random(rng, &[3, 5], 2.0), random(rng, &[5], 1.5), random(rng, &[5], 1.0), random(rng, &[3, 5], 1.0));
        grad_check(|t, g| { let (x, b) = (constant(t, &x), constant(t, &b)); let y = t.layer_norm(x, g, b, eps)?; project(t, y, &w) }, &g, EPS).unwrap()
    });
    check_all("layer_norm.bias", |rng| {
        let (x, g, b, w) = (random(rng, &[3, 5], 2.0), random(rng, &[5], 1.5), random(rng, &[5], 1.0), random(rng, &[3, 5], 1.0));
        grad_check(|t, b| { let (x, g) = (constant(t, &x), constant(t, &g)); let y = t.layer_norm(x, g, b, eps)?; project(t, y, &w) }, &b, EPS).unwrap()
    });
}

#[test]
fn softmax_and_cross_entropy() {
    check_all("softmax", |rng| {
        let (x, w) = (random(rng, &[3, 4], 2.0), random(rng, &[3, 4], 1.0));
        grad_check(|t, x| { let y = t.softmax(x, 1.0)?; project(t, y, &w) }, &x, EPS).unwrap()
    });
    check_all("softmax.tau", |rng| {
        let (x, w) = (random(rng, &[2, 4], 0.05), random(rng, &[2, 4], 1.0));
        grad_check(|t, x| { let y = t.softmax(x, 0.1)?; project(t, y, &w) }, &x, EPS).unwrap()
    });
    check_all("cross_entropy", |rng| {
        let x = random(rng, &[4, 5], 2.0);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        grad_check(|t, x| t.cross_entropy(x, &targets, 1.0), &x, EPS).unwrap()
    });
}

#[test]
fn l2_normalize_rows() {
    check_all("l2_normalize", |rng| {
        let (x, w) = (away_from_zero(rng, &[3, 4]), random(rng, &[3, 4], 1.0));
        grad_check(|t, x| { let y = t.l2_normalize_rows(x)?; project(t, y, &w) }, &x, EPS).unwrap()
    });
}

#[test]
fn attention_dense_and_masked() {
    check_all("attention.dense", |rng| {
        let (x, w) = (random(rng, &[2 * 3, 3 * 4], 1.0), random(rng, &[6, 4], 1.0));
        let layout = SeqLayout::dense(2, 3);
        grad_check(|t, x| { let y = t.attention(x, &layout, 2)?; project(t, y, &w) }, &x, EPS).unwrap()
    });
    check_all("attention.masked", |rng| {
        let (x, w) = (random(rng, &[3 * 4, 3 * 4], 1.0), random(rng, &[12, 4], 1.0));
        let layout = SeqLayout { seq_len: 4, valid: vec![4, 2, 1] };
        grad_check(|t, x| { let y = t.attention(x, &layout, 2)?; project(t, y, &w) }, &x, EPS).unwrap()
    });
}

#[test]
fn attention_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (seqs, t, d, heads) = (2, 4, 6, 3);
    let x = random(&mut rng, &[seqs * t, 3 * d], 1.0);
    let layout = SeqLayout { seq_len: t, valid: vec![4, 3] };
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(&x).unwrap();
    let out = tape.attention(v, &layout, heads).unwrap();
    let got = tape.value(out).to_vec();
    let dh = d / heads;
    let q = |r: usize, c: usize| x.data()[r * 3 * d + c] as f64;
    for s in 0..seqs {
        for h in 0..heads {
            for i in 0..t {
                let r = s * t + i;
                let valid = layout.valid[s];
                let scores: Vec<f64> = (0..valid)
                    .map(|j| {
                        (0..dh).map(|c| q(r, h * dh + c) * q(s * t + j, d + h * dh + c)).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|v| (v - m).exp()).sum();
                for c in 0..dh {
                    let expect: f64 = (0..valid)
                        .map(|j| (scores[j] - m).exp() / z * q(s * t + j, 2 * d + h * dh + c))
                        .sum();
                    assert!((got[r * d + h * dh + c] - expect).abs() < 1e-12);
                }
            }
        }
    }
}
