//! Central finite-difference checks for every differentiable tape operation.

use e2urec_tensor::{ops, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Builds a scalar from `inputs` via `f`, then compares the tape gradient of
/// each input entry with a central difference.
fn check<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic.data()[i];
            assert!(
                rel_err(a, numeric) < TOL,
                "input {k} entry {i}: analytic {a} numeric {numeric}"
            );
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Fixed random weights turn a tensor into a scalar with non-trivial
/// upstream gradients.
fn weighted_sum(tape: &mut Tape<'_>, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matmul_gradients(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        check(&[a, b], |t, v| { let c = t.matmul(v[0], v[1]).unwrap(); weighted_sum(t, c, seed) });
    }

    #[test]
    fn matmul_nt_gradients(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[n, k]);
        check(&[a, b], |t, v| { let c = t.matmul_nt(v[0], v[1]).unwrap(); weighted_sum(t, c, seed) });
    }

    #[test]
    fn elementwise_gradients(m in 1usize..4, n in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[m, n]);
        let b = rand_tensor(&mut rng, &[m, n]);
        let r = rand_tensor(&mut rng, &[n]);
        check(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let p = t.mul(s, v[1]).unwrap();
            let q = t.scale(p, -0.7);
            let g = t.gelu(q);
            weighted_sum(t, g, seed)
        });
        check(&[a, r], |t, v| { let c = t.add_row(v[0], v[1]).unwrap(); weighted_sum(t, c, seed) });
    }

    #[test]
    fn layer_norm_gradients(m in 1usize..4, n in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[m, n]);
        let g = rand_tensor(&mut rng, &[n]);
        let b = rand_tensor(&mut rng, &[n]);
        check(&[x, g, b], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(t, y, seed)
        });
    }

    #[test]
    fn softmax_gradients(m in 1usize..4, n in 1usize..6, offset in 0usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[m, n]);
        check(&[x.clone()], |t, v| { let y = t.softmax(v[0]); weighted_sum(t, y, seed) });
        check(&[x], |t, v| { let y = t.causal_softmax(v[0], offset); weighted_sum(t, y, seed) });
    }

    #[test]
    fn structural_gradients(m in 2usize..5, n in 3usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[m, n]);
        let y = rand_tensor(&mut rng, &[m, 2]);
        let ids: Vec<usize> = (0..4).map(|_| rng.random_range(0..m)).collect();
        check(&[x, y], |t, v| {
            let a = t.slice_cols(v[0], 1, n - 1).unwrap();
            let b = t.slice_rows(v[0], 0, m - 1).unwrap();
            let bs = t.sum(b);
            let c = t.concat_cols(&[a, v[1]]).unwrap();
            let e = t.embedding(v[0], &ids).unwrap();
            let es = t.select(e, &[0, n - 1]).unwrap();
            let s1 = weighted_sum(t, c, seed);
            let s2 = weighted_sum(t, es, seed ^ 1);
            t.combine(&[(s1, 1.0), (s2, -0.5), (bs, 0.25)]).unwrap()
        });
    }

    #[test]
    fn loss_gradients(n in 2usize..9, target in 0usize..8, seed in any::<u64>()) {
        let target = target % n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = rand_tensor(&mut rng, &[n]);
        let teacher = ops::softmax(rand_tensor(&mut rng, &[n]).data()).unwrap();
        check(&[z.clone()], |t, v| t.cross_entropy(v[0], target).unwrap());
        check(&[z], |t, v| t.kl_div(&teacher, v[0]).unwrap());
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        v in prop::collection::vec(-30.0f64..30.0, 1..12), c in -100.0f64..100.0
    ) {
        let s = ops::softmax(&v).unwrap();
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(s.iter().all(|&p| p > 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let s2 = ops::softmax(&shifted).unwrap();
        for (a, b) in s.iter().zip(&s2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_identity(
        a in prop::collection::vec(-5.0f64..5.0, 2..8), seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ops::softmax(&a).unwrap();
        let b: Vec<f64> = a.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
        let q = ops::softmax(&b).unwrap();
        prop_assert!(ops::kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert!(ops::kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }
}

#[test]
fn matmul_sum_gradient_is_row_sums_of_b() {
    // d/dA sum(A B): entry (i,p) = Σ_j B[p,j]
    let a = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.2]).unwrap();
    let b = Tensor::matrix(3, 2, vec![1.0, 2.0, -3.0, 0.5, 0.25, 4.0]).unwrap();
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone(), true);
    let bv = tape.leaf(b.clone(), true);
    let c = tape.matmul(av, bv).unwrap();
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    let row_sums: Vec<f64> = (0..3).map(|p| b.row(p).iter().sum()).collect();
    let want: Vec<f64> = (0..2).flat_map(|_| row_sums.clone()).collect();
    assert_eq!(g.get(av).unwrap().data(), want.as_slice());
    check(&[a, b], |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        t.sum(c)
    });
}
