use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reinlab::gradcheck::{finite_difference_gradient, relative_error};
use reinlab::kernels;
use reinlab::{Result, Tape, Tensor, Var};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
        let s = kernels::softmax_rows(&x, rows, cols);
        for r in 0..rows {
            let row = &s[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(x in matrix(3, 5), shift in -50.0f64..50.0) {
        let a = kernels::softmax_rows(&x, 3, 5);
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let b = kernels::softmax_rows(&shifted, 3, 5);
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative(a in matrix(2, 3), b in matrix(3, 4), c in matrix(4, 2)) {
        let ab_c = kernels::matmul(&kernels::matmul(&a, &b, 2, 3, 4), &c, 2, 4, 2);
        let a_bc = kernels::matmul(&a, &kernels::matmul(&b, &c, 3, 4, 2), 2, 3, 2);
        for (u, v) in ab_c.iter().zip(&a_bc) {
            prop_assert!((u - v).abs() < 1e-9 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn transposed_products_agree(a in matrix(3, 4), b in matrix(5, 4), c in matrix(3, 2)) {
        let nt = kernels::matmul_nt(&a, &b, 3, 4, 5);
        let explicit = kernels::matmul(&a, &kernels::transpose(&b, 5, 4), 3, 4, 5);
        prop_assert_eq!(nt, explicit);
        let tn = kernels::matmul_tn(&a, &c, 3, 4, 2);
        let explicit = kernels::matmul(&kernels::transpose(&a, 3, 4), &c, 4, 3, 2);
        for (u, v) in tn.iter().zip(&explicit) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_is_an_involution(a in matrix(4, 7)) {
        prop_assert_eq!(kernels::transpose(&kernels::transpose(&a, 4, 7), 7, 4), a);
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true)
}

/// Reduces `out` to a scalar through a fixed random weighting so every
/// output coordinate matters.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(out).to_vec();
    let w = rand_tensor(&mut rng, &shape).with_requires_grad(false);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Checks the tape gradient of every input of `op` against central
/// differences.
fn check_op<F>(name: &str, shapes: &[&[usize]], op: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let objective = |xs: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
            let out = op(&mut tape, &vars)?;
            let root = weighted_sum(&mut tape, out, seed)?;
            Ok((tape, vars, root))
        };
        let (mut tape, vars, root) = objective(&inputs).unwrap();
        tape.backward(root).unwrap();
        for (k, x) in inputs.iter().enumerate() {
            let numeric = finite_difference_gradient(
                |probe| {
                    let mut xs = inputs.clone();
                    xs[k] = probe.clone();
                    let (tape, _, root) = objective(&xs)?;
                    Ok(tape.value(root).data()[0])
                },
                x,
                1e-6,
            )
            .unwrap();
            let analytic = tape.grad(vars[k]).expect("input needs grad");
            let err = relative_error(analytic, numeric.data());
            assert!(err < 1e-6, "{name} input {k} seed {seed}: rel error {err}");
        }
    }
}

#[test]
fn op_gradients_match_finite_differences() {
    check_op("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
    check_op("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]));
    check_op("add_bias", &[&[3, 4], &[4]], |t, v| t.add_bias(v[0], v[1]));
    check_op("scale", &[&[2, 5]], |t, v| t.scale(v[0], 0.37));
    check_op("mul", &[&[3, 3], &[3, 3]], |t, v| t.mul(v[0], v[1]));
    check_op("sigmoid", &[&[4, 3]], |t, v| t.sigmoid(v[0]));
    check_op("gelu", &[&[4, 3]], |t, v| t.gelu(v[0]));
    check_op("softmax_rows", &[&[3, 5]], |t, v| t.softmax_rows(v[0]));
    check_op("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6));
    check_op("slice_rows", &[&[5, 3]], |t, v| t.slice_rows(v[0], 1, 4));
    check_op("slice_cols", &[&[3, 5]], |t, v| t.slice_cols(v[0], 2, 5));
    check_op("concat_cols", &[&[3, 2], &[3, 4]], |t, v| t.concat_cols(&[v[0], v[1]]));
    check_op("max_across", &[&[3, 2], &[3, 2], &[3, 2]], |t, v| t.max_across(v));
    check_op("mean_across", &[&[3, 2], &[3, 2]], |t, v| t.mean_across(v));
    check_op("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]));
    check_op("transpose", &[&[2, 5]], |t, v| t.transpose(v[0]));
    check_op("cross_entropy", &[&[4, 3]], |t, v| t.cross_entropy(v[0], &[0, 2, 255, 1], 255));
    check_op("attention", &[&[4, 6], &[6, 6], &[6, 6]], |t, v| {
        let q = t.matmul(v[0], v[1])?;
        let k = t.matmul(v[0], v[2])?;
        let kt = t.transpose(k)?;
        let s = t.matmul(q, kt)?;
        let a = t.softmax_rows(s)?;
        t.matmul(a, v[0])
    });
}

#[test]
fn reused_nodes_accumulate() {
    let x = Tensor::<f64>::from_f64([1, 1], &[3.0]).unwrap().with_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let sq = tape.mul(v, v).unwrap();
    let y = tape.add(sq, v).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[7.0]);
}
