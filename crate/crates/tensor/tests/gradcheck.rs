//! Central finite-difference checks for every tape operation in f64.

use ecn_tensor::{ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-7;
const SEEDS: u64 = 20;

type Build = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Var;

/// Loss is `sum(out ⊙ R)` for a fixed random `R`, so every output element
/// carries a distinct upstream gradient.
fn loss_of(build: &Build, inputs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>, rng: &mut ChaCha8Rng) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let shape = tape.shape(out).to_vec();
    let w = weights.get_or_insert_with(|| Tensor::randn(shape, 1.0, rng)).clone();
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    (tape.value(loss).item(), g)
}

fn check(name: &str, build: &Build, make_inputs: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make_inputs(&mut rng);
        let mut weights = None;
        let (_, analytic) = loss_of(build, &inputs, &mut weights, &mut rng);
        for (which, input) in inputs.iter().enumerate() {
            for e in 0..input.numel() {
                let mut plus = inputs.clone();
                plus[which].data_mut()[e] += STEP;
                let mut minus = inputs.clone();
                minus[which].data_mut()[e] -= STEP;
                let (lp, _) = loss_of(build, &plus, &mut weights, &mut rng);
                let (lm, _) = loss_of(build, &minus, &mut weights, &mut rng);
                let numeric = (lp - lm) / (2.0 * STEP);
                let a = analytic[which].data()[e];
                let tol = REL_TOL * a.abs().max(numeric.abs()) + ABS_FLOOR;
                assert!(
                    (a - numeric).abs() <= tol,
                    "{name} seed {seed} input {which} elem {e}: analytic {a} numeric {numeric}"
                );
            }
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Values at least 0.05 away from zero, so ReLU and clamp kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = randn(rng, shape);
    for x in t.data_mut() {
        *x = x.signum() * (0.05 + x.abs());
    }
    t
}

/// Distinct values spaced 0.1 apart in random order, for max operations.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - 1.0 + rng.random_range(-0.01..0.01)).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

#[test]
fn matmul_transpose_reshape() {
    check("matmul", &|t, v| t.matmul(v[0], v[1]).unwrap(), &|r| vec![randn(r, &[3, 4]), randn(r, &[4, 2])]);
    check("transpose", &|t, v| t.transpose(v[0]).unwrap(), &|r| vec![randn(r, &[3, 5])]);
    check("reshape", &|t, v| t.reshape(v[0], &[6, 2]).unwrap(), &|r| vec![randn(r, &[3, 4])]);
}

#[test]
fn elementwise_binary() {
    let two = |r: &mut ChaCha8Rng| vec![randn(r, &[2, 3]), randn(r, &[2, 3])];
    check("add", &|t, v| t.add(v[0], v[1]).unwrap(), &two);
    check("sub", &|t, v| t.sub(v[0], v[1]).unwrap(), &two);
    check("mul", &|t, v| t.mul(v[0], v[1]).unwrap(), &two);
    check("mul_self", &|t, v| t.mul(v[0], v[0]).unwrap(), &|r| vec![randn(r, &[4])]);
    check("scale", &|t, v| t.scale(v[0], -2.5), &|r| vec![randn(r, &[5])]);
    check("add_bias", &|t, v| t.add_bias(v[0], v[1]).unwrap(), &|r| vec![randn(r, &[2, 3, 4]), randn(r, &[4])]);
}

#[test]
fn elementwise_unary() {
    check("sigmoid", &|t, v| t.sigmoid(v[0]), &|r| vec![randn(r, &[6])]);
    check("relu", &|t, v| t.relu(v[0]), &|r| vec![away_from_zero(r, &[8])]);
    check("ln", &|t, v| t.ln(v[0]), &|r| {
        let mut x = randn(r, &[5]);
        x.data_mut().iter_mut().for_each(|e| *e = 0.2 + e.abs());
        vec![x]
    });
    check("clamp", &|t, v| t.clamp(v[0], -0.5, 0.5), &|r| {
        let mut x = randn(r, &[10]);
        x.data_mut().iter_mut().for_each(|e| {
            if (e.abs() - 0.5).abs() < 0.05 {
                *e *= 2.0;
            }
        });
        vec![x]
    });
}

#[test]
fn softmax_variants() {
    check("softmax", &|t, v| t.softmax(v[0]).unwrap(), &|r| vec![randn(r, &[5])]);
    check("softmax_last", &|t, v| t.softmax_last(v[0], None).unwrap(), &|r| vec![randn(r, &[3, 4])]);
    let mask = [true, false, true, true];
    check(
        "softmax_masked",
        &move |t, v| t.softmax_last(v[0], Some(&mask)).unwrap(),
        &|r| vec![randn(r, &[2, 4])],
    );
}

#[test]
fn conv1d_plain_and_batched() {
    check("conv1d", &|t, v| t.conv1d(v[0], v[1]).unwrap(), &|r| vec![randn(r, &[4, 3]), randn(r, &[2, 3, 2])]);
    check("conv1d_batched", &|t, v| t.conv1d(v[0], v[1]).unwrap(), &|r| {
        vec![randn(r, &[3, 4, 2]), randn(r, &[2, 2, 3])]
    });
    check("conv1d_full_width", &|t, v| t.conv1d(v[0], v[1]).unwrap(), &|r| {
        vec![randn(r, &[3, 2]), randn(r, &[3, 2, 2])]
    });
}

#[test]
fn max_operations() {
    check(
        "max_reduce",
        &|t, v| {
            let fallback = t.constant(Tensor::zeros([6]));
            t.max_reduce(&v[..3], fallback).unwrap()
        },
        &|r| {
            let all = distinct(r, &[18]).into_data();
            all.chunks(6).map(|c| Tensor::new([6], c.to_vec()).unwrap()).collect()
        },
    );
    check("max_axis0", &|t, v| t.max_axis(v[0], 0).unwrap(), &|r| vec![distinct(r, &[4, 3])]);
    check("max_axis1", &|t, v| t.max_axis(v[0], 1).unwrap(), &|r| vec![distinct(r, &[2, 4, 3])]);
}

#[test]
fn gather_concat_slice() {
    check("gather", &|t, v| t.gather(v[0], &[2, 0, 2, 3]).unwrap(), &|r| vec![randn(r, &[4, 3])]);
    check("concat0", &|t, v| t.concat(&v[..2], 0).unwrap(), &|r| vec![randn(r, &[2, 3]), randn(r, &[1, 3])]);
    check("concat1", &|t, v| t.concat(&v[..3], 1).unwrap(), &|r| {
        vec![randn(r, &[2, 1, 2]), randn(r, &[2, 3, 2]), randn(r, &[2, 2, 2])]
    });
    check("slice", &|t, v| t.slice(v[0], 1, 1, 3).unwrap(), &|r| vec![randn(r, &[2, 4, 2])]);
}

#[test]
fn reductions() {
    check("sum", &|t, v| t.sum(v[0]), &|r| vec![randn(r, &[3, 2])]);
    check("mean", &|t, v| t.mean(v[0]), &|r| vec![randn(r, &[3, 2])]);
    check("sum_axis0", &|t, v| t.sum_axis(v[0], 0).unwrap(), &|r| vec![randn(r, &[3, 2])]);
    check("sum_axis2", &|t, v| t.sum_axis(v[0], 2).unwrap(), &|r| vec![randn(r, &[2, 3, 2])]);
}

#[test]
fn layer_norm_and_cube() {
    check("layer_norm", &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(), &|r| {
        vec![randn(r, &[3, 4]), randn(r, &[4]), randn(r, &[4])]
    });
    check("cube", &|t, v| t.cube(v[0], v[1], v[2]).unwrap(), &|r| {
        vec![randn(r, &[2, 3]), randn(r, &[3, 4]), randn(r, &[2, 4])]
    });
}

#[test]
fn composite_chain() {
    // A small two-layer network with softmax attention pooling.
    check(
        "composite",
        &|t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add_bias(h, v[2]).unwrap();
            let h = t.sigmoid(h);
            let scores = t.sum_axis(h, 1).unwrap();
            let a = t.softmax(scores).unwrap();
            let a = t.reshape(a, &[1, 4]).unwrap();
            t.matmul(a, h).unwrap()
        },
        &|r| vec![randn(r, &[4, 3]), randn(r, &[3, 2]), randn(r, &[2])],
    );
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let table = store.insert("table", randn(&mut rng, &[5, 3]));
        let w = store.insert("w", randn(&mut rng, &[3, 2]));
        let idx = [4usize, 1, 4];
        let eval = |store: &ParamStore<f64>| {
            let mut tape = Tape::with_params(store);
            let tv = tape.param(table).unwrap();
            let wv = tape.param(w).unwrap();
            let rows = tape.gather(tv, &idx).unwrap();
            let h = tape.matmul(rows, wv).unwrap();
            let h = tape.sigmoid(h);
            // Second use of the same table goes through the memoized node.
            let tv2 = tape.param(table).unwrap();
            assert_eq!(tv, tv2);
            let extra = tape.gather(tv2, &[1]).unwrap();
            let s1 = tape.sum(h);
            let s2 = tape.sum(extra);
            let s2 = tape.mul(s2, s2).unwrap();
            let loss = tape.add(s1, s2).unwrap();
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).item(), grads.into_params())
        };
        let (_, grads) = eval(&store);
        for id in [table, w] {
            let g = grads.get(id).unwrap().clone();
            for e in 0..g.numel() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[e] += STEP;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[e] -= STEP;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * STEP);
                let a = g.data()[e];
                assert!(
                    (a - numeric).abs() <= REL_TOL * a.abs().max(numeric.abs()) + ABS_FLOOR,
                    "seed {seed} {} elem {e}: {a} vs {numeric}",
                    store.name(id)
                );
            }
        }
        // Rows never gathered receive exactly zero.
        let tg = grads.get(table).unwrap();
        for row in [0usize, 2, 3] {
            assert!(tg.data()[row * 3..row * 3 + 3].iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn batched_operations() {
    check("bmm", &|t, v| t.bmm(v[0], v[1], false).unwrap(), &|r| vec![randn(r, &[3, 2, 4]), randn(r, &[3, 4, 2])]);
    check("bmm_nt", &|t, v| t.bmm(v[0], v[1], true).unwrap(), &|r| vec![randn(r, &[2, 3, 4]), randn(r, &[2, 5, 4])]);
    check("cube_batched", &|t, v| t.cube(v[0], v[1], v[2]).unwrap(), &|r| {
        vec![randn(r, &[2, 2, 3]), randn(r, &[2, 3, 4]), randn(r, &[2, 2, 4])]
    });
}

#[test]
fn segment_operations() {
    let lengths = [3usize, 0, 1, 2];
    check(
        "segment_attention",
        &move |t, v| t.segment_attention(v[0], v[1], v[2], &lengths, 2).unwrap(),
        &|r| vec![randn(r, &[6, 4]), randn(r, &[6, 4]), randn(r, &[6, 4])],
    );
    check(
        "segment_attention_shared",
        &move |t, v| t.segment_attention(v[0], v[0], v[0], &lengths, 1).unwrap(),
        &|r| vec![randn(r, &[6, 2])],
    );
    check("segment_mean", &move |t, v| t.segment_mean(v[0], &lengths).unwrap(), &|r| vec![randn(r, &[6, 3])]);
    check("segment_max", &move |t, v| t.segment_max(v[0], &lengths).unwrap(), &|r| vec![distinct(r, &[6, 3])]);
}
