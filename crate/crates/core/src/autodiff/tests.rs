use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
}

fn weighted_sum(g: &mut Graph, x: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    let p = g.mul(x, w);
    g.sum(p)
}

/// Checks a unary op at 100 random points through a random linear readout.
fn check_unary(name: &str, rows: usize, cols: usize, op: impl Fn(&mut Graph, Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100 {
        let x = rand_tensor(rows, cols, &mut rng);
        let probe = {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let out = op(&mut g, v);
            let [r, c] = g.shape(out);
            rand_tensor(r, c, &mut rng)
        };
        let err = grad_check(
            |g, v| {
                let y = op(g, v);
                weighted_sum(g, y, &probe)
            },
            &x,
        );
        assert!(err < 1e-4, "{name} trial {trial}: rel err {err}");
    }
}

fn check_multi(name: &str, shapes: &[[usize; 2]], op: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..100 {
        let points: Vec<Tensor> = shapes.iter().map(|&[r, c]| rand_tensor(r, c, &mut rng)).collect();
        let probe = {
            let mut g = Graph::new();
            let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
            let out = op(&mut g, &vars);
            let [r, c] = g.shape(out);
            rand_tensor(r, c, &mut rng)
        };
        let err = GradCheck::default().max_rel_error(
            |g, v| {
                let y = op(g, v);
                weighted_sum(g, y, &probe)
            },
            &points,
        );
        assert!(err < 1e-4, "{name} trial {trial}: rel err {err}");
    }
}

#[test]
fn softplus_examples() {
    assert!((softplus_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    let oracle = |x: f64| (-x.abs()).exp().ln_1p() + x.max(0.0);
    for x in [50.0, -50.0, 1e3, -1e3, 3.7] {
        let v = softplus_scalar(x);
        assert!(v.is_finite());
        let o = oracle(x);
        if o > 0.0 {
            assert!(((v - o) / o).abs() < 1e-12, "x={x}");
        }
    }
    assert!(softplus_scalar(-50.0) > 0.0);
    assert!((softplus_scalar(-50.0) / (-50.0f64).exp() - 1.0).abs() < 1e-12);
    let mut g = Graph::new();
    let x = g.constant(Tensor::row_vector(vec![0.0, 50.0, -50.0]));
    let y = g.softplus(x);
    assert_eq!(g.value(y).data()[1], softplus_scalar(50.0));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]));
    let s = g.softmax_rows(a);
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let b = g.constant(Tensor::from_rows(&[vec![1000.0, 0.0]]));
    let s = g.softmax_rows(b);
    let v = g.value(s).data();
    assert!(v.iter().all(|x| x.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-15 && v[1] < 1e-300);
    let c = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
    let s = g.softmax_rows(c);
    let e = std::f64::consts::E;
    let v = g.value(s).data();
    assert!((v[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
    assert!((v[1] - e / (1.0 + e)).abs() < 1e-15);
}

#[test]
fn grad_check_polynomial() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let y = g.square(x);
    assert_eq!(g.backward(y).get(x).unwrap().item(), 6.0);
    assert!(grad_check(|g, x| g.square(x), &Tensor::scalar(3.0)) < 1e-7 / 6.0);
}

#[test]
fn elementwise_ops_pass_grad_check() {
    check_unary("relu", 3, 4, |g, x| g.relu(x));
    check_unary("softplus", 3, 4, |g, x| g.softplus(x));
    check_unary("sigmoid", 3, 4, |g, x| g.sigmoid(x));
    check_unary("exp", 3, 4, |g, x| g.exp(x));
    check_unary("square", 3, 4, |g, x| g.square(x));
    check_unary("scale", 2, 3, |g, x| g.scale(x, -1.7));
    check_unary("add_scalar", 2, 3, |g, x| g.add_scalar(x, 0.4));
    check_unary("neg", 2, 3, |g, x| g.neg(x));
    check_unary("ln", 3, 4, |g, x| {
        let p = g.exp(x);
        g.ln(p)
    });
    check_unary("sqrt", 3, 4, |g, x| {
        let p = g.softplus(x);
        g.sqrt(p)
    });
    check_unary("positive", 3, 4, positive);
}

#[test]
fn reductions_and_rowwise_ops_pass_grad_check() {
    check_unary("sum_rows", 3, 5, |g, x| g.sum_rows(x));
    check_unary("softmax_rows", 3, 5, |g, x| g.softmax_rows(x));
    check_unary("log_softmax_rows", 3, 5, |g, x| g.log_softmax_rows(x));
    check_unary("slice_cols", 3, 5, |g, x| g.slice_cols(x, 1, 3));
    check_unary("gather_rows", 3, 2, |g, x| g.gather_rows(x, vec![2, 0, 2, 1]));
    check_unary("sparse_rows", 3, 2, |g, x| {
        g.sparse_rows(x, vec![(0, 1, 0.5), (0, 2, -1.0), (2, 1, 2.0), (1, 1, 1.0)], 3)
    });
}

#[test]
fn binary_ops_pass_grad_check() {
    check_multi("add", &[[3, 4], [3, 4]], |g, v| g.add(v[0], v[1]));
    check_multi("add_row_broadcast", &[[3, 4], [1, 4]], |g, v| g.add(v[0], v[1]));
    check_multi("sub_col_broadcast", &[[3, 4], [3, 1]], |g, v| g.sub(v[0], v[1]));
    check_multi("mul", &[[3, 4], [3, 4]], |g, v| g.mul(v[0], v[1]));
    check_multi("mul_scalar_broadcast", &[[3, 4], [1, 1]], |g, v| g.mul(v[0], v[1]));
    check_multi("matmul", &[[3, 4], [4, 2]], |g, v| g.matmul(v[0], v[1]));
    check_multi("affine", &[[3, 4], [4, 2], [1, 2]], |g, v| g.affine(v[0], v[1], v[2]));
    check_multi("layer_norm", &[[3, 6], [1, 6], [1, 6]], |g, v| g.layer_norm(v[0], v[1], v[2]));
    check_multi("concat_cols", &[[3, 2], [3, 1]], |g, v| g.concat_cols(&[v[0], v[1]]));
    check_multi("concat_rows", &[[2, 3], [1, 3]], |g, v| g.concat_rows(&[v[0], v[1]]));
}

#[test]
fn attention_passes_grad_check() {
    let mut mask = AttentionPairMask::all(3, 4);
    mask.allowed[0][1] = false;
    mask.allowed[2] = vec![false, false, true, false];
    let layout = Arc::new(AttentionLayout::from_pair_mask(&mask, 4).unwrap());
    check_multi("attention", &[[3, 4], [4, 4], [4, 4]], |g, v| {
        g.attention(v[0], v[1], v[2], 2, layout.clone()).unwrap()
    });
}

#[test]
fn gumbel_softmax_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = rand_tensor(4, 6, &mut rng);
    let noise = gumbel_noise(4, 6, &mut rng);

    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let s = gumbel_softmax_sample(&mut g, l, 1.0, &mut rng);
    for r in 0..4 {
        assert!((g.value(s).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    let cold = gumbel_softmax_with_noise(&mut g, l, noise.clone(), 1e-4);
    for r in 0..4 {
        let perturbed: Vec<f64> = logits.row(r).iter().zip(noise.row(r)).map(|(a, b)| a + b).collect();
        let arg = (0..6).max_by(|&a, &b| perturbed[a].total_cmp(&perturbed[b])).unwrap();
        let row = g.value(cold).row(r);
        assert!((row[arg] - 1.0).abs() < 1e-9, "row {r}: {row:?}");
    }

    for coord in 0..6 {
        let err = grad_check(
            |g, x| {
                let y = gumbel_softmax_with_noise(g, x, noise.clone(), 1.0);
                let c = g.slice_cols(y, coord, 1);
                g.sum(c)
            },
            &logits,
        );
        assert!(err < 1e-5, "coordinate {coord}: {err}");
    }
}

#[test]
fn gaussian_reparam_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let mu = g.leaf(Tensor::row_vector(vec![0.3, -1.2]));
    let tiny = g.constant(Tensor::row_vector(vec![1e-300, 1e-300]));
    let out = gaussian_reparam_sample(&mut g, mu, tiny, &mut rng).unwrap();
    assert!(g.value(out).max_abs_diff(g.value(mu)) < 1e-140);
    let total = g.sum(out);
    assert_eq!(g.backward(total).get(mu).unwrap().data(), &[1.0, 1.0]);

    let zero = g.constant(Tensor::row_vector(vec![1.0, 0.0]));
    assert!(matches!(gaussian_reparam_sample(&mut g, mu, zero, &mut rng), Err(Error::NonpositiveVariance)));

    let n = 100_000;
    let mut g = Graph::new();
    let mu = g.constant(Tensor::zeros(n, 1));
    let s2 = g.constant(Tensor::full(n, 1, 1.0));
    let out = gaussian_reparam_sample(&mut g, mu, s2, &mut rng).unwrap();
    let xs = g.value(out).data();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((var - 1.0).abs() < 0.05, "var {var}");
}

#[test]
fn gaussian_reparam_gradient_wrt_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = rng.clone();
    let points = vec![rand_tensor(2, 3, &mut rng), rand_tensor(2, 3, &mut rng)];
    let err = GradCheck::default().max_rel_error(
        |g, v| {
            let mut r = start.clone();
            let s2 = positive(g, v[1]);
            let y = gaussian_reparam_sample(g, v[0], s2, &mut r).unwrap();
            let y2 = g.square(y);
            g.sum(y2)
        },
        &points,
    );
    assert!(err < 1e-4, "{err}");
}

/// Dense attention written from the textbook definition.
fn brute_attention(q: &Tensor, k: &Tensor, v: &Tensor, allowed: &[Vec<bool>], heads: usize) -> Tensor {
    let d = q.cols();
    let hd = d / heads;
    let mut out = Tensor::zeros(q.rows(), d);
    for i in 0..q.rows() {
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let logits: Vec<f64> = (0..k.rows())
                .map(|j| {
                    if !allowed[i][j] {
                        return f64::NEG_INFINITY;
                    }
                    cols.clone().map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out.set(i, c, (0..k.rows()).map(|j| e[j] / z * v.get(j, c)).sum());
            }
        }
    }
    out
}

fn run_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionPairMask, heads: usize) -> Tensor {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let layout = Arc::new(AttentionLayout::from_pair_mask(mask, k.rows()).unwrap());
    let out = g.attention(qv, kv, vv, heads, layout).unwrap();
    g.value(out).clone()
}

#[test]
fn attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let q = rand_tensor(1, 4, &mut rng);
    let k = rand_tensor(1, 4, &mut rng);
    let v = rand_tensor(1, 4, &mut rng);
    assert_eq!(run_attention(&q, &k, &v, &AttentionPairMask::all(1, 1), 2), v);

    let q = rand_tensor(3, 4, &mut rng);
    let k = rand_tensor(3, 4, &mut rng);
    let v = rand_tensor(3, 4, &mut rng);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let dense = g.attention(qv, kv, vv, 2, Arc::new(AttentionLayout::dense(3, 3).unwrap())).unwrap();
    assert_eq!(g.value(dense), &run_attention(&q, &k, &v, &AttentionPairMask::all(3, 3), 2));

    for trial in 0..50 {
        let q = rand_tensor(3, 4, &mut rng);
        let k = rand_tensor(3, 4, &mut rng);
        let v = rand_tensor(3, 4, &mut rng);
        let mut mask = AttentionPairMask::all(3, 3);
        for row in mask.allowed.iter_mut() {
            for cell in row.iter_mut() {
                *cell = rng.random_bool(0.6);
            }
            if !row.iter().any(|&a| a) {
                row[rng.random_range(0..3)] = true;
            }
        }
        let fast = run_attention(&q, &k, &v, &mask, 2);
        let slow = brute_attention(&q, &k, &v, &mask.allowed, 2);
        assert!(fast.max_abs_diff(&slow) < 1e-12, "trial {trial}");

        // Removing an allowed key from a query with other keys changes its row.
        if let Some((qi, kj)) = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .find(|&(i, j)| mask.allowed[i][j] && mask.allowed[i].iter().filter(|&&a| a).count() > 1)
        {
            let mut reduced = mask.clone();
            reduced.allowed[qi][kj] = false;
            let after = run_attention(&q, &k, &v, &reduced, 2);
            let changed = after.row(qi).iter().zip(fast.row(qi)).any(|(a, b)| (a - b).abs() > 1e-15);
            assert!(changed, "trial {trial}: masking a weighted key left the output unchanged");
            for other in (0..3).filter(|&i| i != qi) {
                assert_eq!(after.row(other), fast.row(other));
            }
        }
    }
}

#[test]
fn attention_rejects_empty_key_rows() {
    let mut mask = AttentionPairMask::all(2, 3);
    mask.allowed[1] = vec![false; 3];
    assert!(matches!(AttentionLayout::from_pair_mask(&mask, 3), Err(Error::EmptyKeyRow(1))));
    assert!(matches!(AttentionLayout::from_groups(&[0, 1], &[0, 0]), Err(Error::EmptyKeyRow(1))));
}

#[test]
fn attention_weights_sum_to_one_over_allowed_keys() {
    // With all value rows equal to the same vector, any convex combination
    // reproduces it, so the output equals that vector iff weights sum to 1.
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let q = rand_tensor(5, 6, &mut rng);
    let k = rand_tensor(4, 6, &mut rng);
    let row = rand_tensor(1, 6, &mut rng);
    let v = Tensor::from_rows(&vec![row.data().to_vec(); 4]);
    let layout = AttentionLayout::from_groups(&[0, 1, 1, 0, 1], &[1, 0, 1, 0]).unwrap();
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let out = g.attention(qv, kv, vv, 3, Arc::new(layout)).unwrap();
    for r in 0..5 {
        for (a, b) in g.value(out).row(r).iter().zip(row.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn layers_compose_and_differentiate() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", 3, &[5, 4], 2, &mut rng);
    let ln = LayerNorm::new(&mut store, "ln", 4);
    let mha = MultiHeadAttention::new(&mut store, "att", 4, 2, &mut rng);
    let x = rand_tensor(4, 3, &mut rng);
    let layout = Arc::new(AttentionLayout::from_groups(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap());
    let proj = Linear::new(&mut store, "proj", 3, 4, &mut rng);
    let err = GradCheck::default().max_rel_error(
        |g, v| {
            let p = Bound::from_vars(v.to_vec());
            let xv = g.constant(x.clone());
            let h = proj.forward(g, &p, xv);
            let n = ln.forward(g, &p, h);
            let a = mha.forward(g, &p, n, n, layout.clone()).unwrap();
            let _ = mlp.output_dim();
            let y = g.add(h, a);
            let sq = g.square(y);
            g.sum(sq)
        },
        store.tensors(),
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn seeded_sampling_is_reproducible() {
    let draw = || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(3, 4));
        let s = gumbel_softmax_sample(&mut g, l, 1.0, &mut rng);
        let mu = g.constant(Tensor::zeros(3, 4));
        let s2 = g.constant(Tensor::full(3, 4, 2.0));
        let z = gaussian_reparam_sample(&mut g, mu, s2, &mut rng).unwrap();
        (g.value(s).clone(), g.value(z).clone())
    };
    assert_eq!(draw(), draw());
}
