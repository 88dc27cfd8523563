//! Every tape operation against central differences.

use ovfs_core::numcore::{check_fn, concat_rows, sum_all, RngState, Tape, Tensor, Var};
use proptest::prelude::*;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;

/// Contracts `y` with fixed random weights so every output element matters.
fn contract<'t>(tape: &'t Tape, y: Var<'t>) -> Var<'t> {
    let [r, c] = y.shape();
    let w = RngState::new(99).normal_tensor(&[r, c], 1.0);
    (y * tape.constant(w)).sum()
}

fn check(
    name: &str,
    shape: [usize; 2],
    seed: u64,
    op: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
) {
    let x = RngState::new(seed).normal_tensor(&shape, 1.0);
    let report = check_fn(&x, |tape, v| contract(tape, op(tape, v)), STEP, TOL).unwrap();
    assert!(report.passed(), "{name}: {report:?}");
}

fn other(tape: &Tape, shape: [usize; 2], seed: u64) -> Var<'_> {
    tape.constant(RngState::new(seed).normal_tensor(&shape, 1.0))
}

#[test]
fn elementwise_ops() {
    check("exp", [3, 4], 1, |_, x| x.exp());
    check("ln", [3, 4], 2, |_, x| x.exp().add_scalar(0.5).ln());
    check("sigmoid", [3, 4], 3, |_, x| x.sigmoid());
    check("tanh", [3, 4], 4, |_, x| x.tanh());
    check("gelu", [3, 4], 5, |_, x| x.gelu());
    check("relu", [3, 4], 6, |_, x| x.relu());
    check("scale/neg/add_scalar", [3, 4], 7, |_, x| {
        x.scale(-2.5).neg().add_scalar(3.0)
    });
}

#[test]
fn binary_ops_in_both_arguments() {
    check("add", [3, 4], 10, |t, x| x + other(t, [3, 4], 11));
    check("sub", [3, 4], 12, |t, x| other(t, [3, 4], 13) - x);
    check("mul", [3, 4], 14, |t, x| x * other(t, [3, 4], 15));
    check("div numerator", [3, 4], 16, |t, x| {
        x.div(other(t, [3, 4], 17).exp())
    });
    check("div denominator", [3, 4], 18, |t, x| {
        other(t, [3, 4], 19).div(x.exp().add_scalar(0.2))
    });
    check("self product", [3, 4], 20, |_, x| x * x);
    check("add_row", [3, 4], 21, |t, x| {
        x.add_row(other(t, [1, 4], 22))
    });
    check("add_row row", [1, 4], 23, |t, x| {
        other(t, [3, 4], 24).add_row(x)
    });
    check("mul_row", [3, 4], 25, |t, x| {
        x.mul_row(other(t, [1, 4], 26))
    });
    check("mul_row row", [1, 4], 27, |t, x| {
        other(t, [3, 4], 28).mul_row(x)
    });
}

#[test]
fn matrix_products() {
    check("matmul left", [3, 4], 30, |t, x| {
        x.matmul(other(t, [4, 2], 31))
    });
    check("matmul right", [4, 2], 32, |t, x| {
        other(t, [3, 4], 33).matmul(x)
    });
    check("matmul_t left", [3, 4], 34, |t, x| {
        x.matmul_t(other(t, [5, 4], 35))
    });
    check("matmul_t right", [5, 4], 36, |t, x| {
        other(t, [3, 4], 37).matmul_t(x)
    });
    check("gram", [3, 4], 38, |_, x| x.matmul_t(x));
    check("transpose", [3, 4], 39, |_, x| x.transpose());
}

#[test]
fn normalizations() {
    check("softmax", [3, 5], 40, |_, x| x.softmax());
    check("log_softmax", [3, 5], 41, |_, x| x.log_softmax());
    let allowed = [true, false, true, true, false, true, true, true, false];
    check("masked_softmax", [3, 3], 42, move |_, x| {
        x.masked_softmax(Some(&allowed))
    });
    check("layer_norm", [3, 5], 43, |_, x| x.layer_norm(1e-5));
    check("l2_normalize", [3, 5], 44, |_, x| x.l2_normalize());
}

#[test]
fn reductions_and_selection() {
    check("sum", [3, 4], 50, |_, x| x.sum());
    check("mean", [3, 4], 51, |_, x| x.mean());
    check("mean_rows", [3, 4], 52, |_, x| x.mean_rows());
    check("sum_cols", [3, 4], 53, |_, x| x.sum_cols());
    check("max_groups", [6, 4], 54, |_, x| x.max_groups(3));
    check("slice_rows", [5, 3], 55, |_, x| x.slice_rows(1, 3));
    check("row", [5, 3], 56, |_, x| x.row(4));
    check("pick", [4, 3], 57, |_, x| x.pick(&[2, 0, 1, 2]));
    check("gather_rows with repeats", [4, 3], 58, |_, x| {
        x.gather_rows(&[3, 0, 3, 1, 3])
    });
    check("reshape", [4, 3], 59, |_, x| x.reshape(2, 6));
    check("concat_rows", [2, 3], 60, |t, x| {
        concat_rows(&[x, other(t, [1, 3], 61), x.exp()])
    });
    check("sum_all", [2, 3], 62, |t, x| {
        sum_all(&[x, other(t, [2, 3], 63), x * x])
    });
}

#[test]
fn composite_attention_like_graph() {
    check("attention", [4, 6], 70, |t, x| {
        let wq = other(t, [6, 6], 71);
        let wk = other(t, [6, 6], 72);
        let s = x.matmul(wq).matmul_t(x.matmul(wk)).scale(0.4).softmax();
        s.matmul(x).layer_norm(1e-5).gelu()
    });
}

#[test]
fn unused_input_has_zero_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2, 2], 1.0), true);
    let y = tape.leaf(Tensor::full(&[2, 2], 1.0), true);
    let g = tape.backward(x.exp().sum()).unwrap();
    assert!(g.wrt(y).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_chain_gradients_hold_for_any_seed(seed in 0u64..10_000, rows in 1usize..4, cols in 2usize..6) {
        let x = RngState::new(seed).normal_tensor(&[rows, cols], 2.0);
        let r = check_fn(&x, |t, v| contract(t, v.softmax().matmul_t(v).tanh()), STEP, TOL).unwrap();
        prop_assert!(r.passed(), "{r:?}");
    }
}
