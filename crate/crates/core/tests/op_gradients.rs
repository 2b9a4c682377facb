//! Every tape operation against central finite differences in double precision.

use fmvp_core::autodiff::{finite_difference_check, Tape, Tensor, Var};
use fmvp_core::rng;
use fmvp_core::Result;

const TOL: f64 = 1e-7;
const STEP: f64 = 1e-6;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng::rng(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand(shape, seed).map(|x| 0.5 + x.abs())
}

/// Reduces a matrix to a scalar through a fixed random weighting, so every
/// output element gets a distinct upstream gradient.
fn weigh(t: &mut Tape<f64>, x: Var) -> Result<Var> {
    let shape = t.value(x).shape().to_vec();
    let w = t.constant(rand(&shape, 999))?;
    let r = t.value(x).rows();
    let wt = t.transpose(w)?;
    let prod = t.matmul(x, wt)?;
    let diag: Vec<Var> = (0..r).map(|i| t.select(prod, i * r + i)).collect::<Result<_>>()?;
    let col = t.concat_rows(&diag)?;
    t.sum(col)
}

fn check(name: &str, params: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let r = finite_difference_check(f, params, STEP).unwrap();
    assert!(r.max_rel_error < TOL, "{name}: {r:?}");
    assert!(r.coordinates > 0);
}

#[test]
fn matmul_and_transpose() {
    check("matmul", &[rand(&[3, 4], 1), rand(&[4, 2], 2)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weigh(t, y)
    });
    check("transpose", &[rand(&[3, 2], 3)], |t, v| {
        let y = t.transpose(v[0])?;
        weigh(t, y)
    });
}

#[test]
fn elementwise_binary_and_broadcast() {
    check("add", &[rand(&[2, 3], 4), rand(&[2, 3], 5)], |t, v| {
        let y = t.add(v[0], v[1])?;
        weigh(t, y)
    });
    check("add_row", &[rand(&[3, 4], 6), rand(&[1, 4], 7)], |t, v| {
        let y = t.add_row(v[0], v[1])?;
        weigh(t, y)
    });
    check("linear", &[rand(&[3, 4], 8), rand(&[4, 2], 9), rand(&[1, 2], 10)], |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        weigh(t, y)
    });
}

#[test]
fn scalar_maps() {
    check("scale", &[rand(&[2, 3], 11)], |t, v| {
        let y = t.scale(v[0], -1.7)?;
        weigh(t, y)
    });
    check("shift", &[rand(&[2, 3], 12)], |t, v| {
        let y = t.shift(v[0], 0.3)?;
        weigh(t, y)
    });
    check("neg", &[rand(&[2, 3], 13)], |t, v| {
        let y = t.neg(v[0])?;
        weigh(t, y)
    });
    check("log", &[positive(&[2, 3], 14)], |t, v| {
        let y = t.log(v[0])?;
        weigh(t, y)
    });
    check("gelu", &[rand(&[3, 3], 15)], |t, v| {
        let y = t.gelu(v[0])?;
        weigh(t, y)
    });
}

#[test]
fn clamp_passes_gradient_only_above_floor() {
    // Entries kept well away from the kink.
    let x = Tensor::matrix(2, 2, vec![0.9, -0.8, 1.4, -1.1]).unwrap();
    check("clamp_min", std::slice::from_ref(&x), |t, v| {
        let y = t.clamp_min(v[0], 0.0)?;
        weigh(t, y)
    });
    let mut tape = Tape::new();
    let p = tape.param(x).unwrap();
    let y = tape.clamp_min(p, 0.0).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap().wrt(&tape, p);
    assert_eq!(g.data(), &[1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn reshaping_ops() {
    check("concat_rows", &[rand(&[2, 3], 16), rand(&[1, 3], 17)], |t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        weigh(t, y)
    });
    check("concat_cols", &[rand(&[2, 3], 18), rand(&[2, 1], 19)], |t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        weigh(t, y)
    });
    check("slice_rows", &[rand(&[4, 3], 20)], |t, v| {
        let y = t.slice_rows(v[0], 1, 2)?;
        weigh(t, y)
    });
    check("slice_cols", &[rand(&[3, 5], 21)], |t, v| {
        let y = t.slice_cols(v[0], 2, 3)?;
        weigh(t, y)
    });
    check("select", &[rand(&[3, 3], 22)], |t, v| {
        let a = t.select(v[0], 4)?;
        let b = t.select(v[0], 7)?;
        let ab = t.concat_rows(&[a, b])?;
        weigh(t, ab)
    });
}

#[test]
fn reductions() {
    check("mean", &[rand(&[3, 4], 23)], |t, v| {
        let sq = t.transpose(v[0])?;
        let m = t.matmul(v[0], sq)?;
        t.mean(m)
    });
    check("sum", &[rand(&[3, 4], 24)], |t, v| {
        let g = t.gelu(v[0])?;
        t.sum(g)
    });
}

#[test]
fn normalizing_ops() {
    check("row_softmax", &[rand(&[3, 5], 25)], |t, v| {
        let y = t.row_softmax(v[0])?;
        weigh(t, y)
    });
    check("layer_norm", &[rand(&[3, 6], 26), rand(&[1, 6], 27), rand(&[1, 6], 28)], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2])?;
        weigh(t, y)
    });
    check("normalize_rows", &[rand(&[3, 4], 29)], |t, v| {
        let y = t.normalize_rows(v[0])?;
        weigh(t, y)
    });
    check("cosine_sim", &[rand(&[3, 4], 30), rand(&[3, 4], 31)], |t, v| {
        let y = t.cosine_sim(v[0], v[1])?;
        weigh(t, y)
    });
    check("cosine_sim broadcast", &[rand(&[1, 4], 32), rand(&[3, 4], 33)], |t, v| {
        let y = t.cosine_sim(v[0], v[1])?;
        weigh(t, y)
    });
}

#[test]
fn shared_subexpressions_accumulate() {
    check("reuse", &[rand(&[2, 2], 34)], |t, v| {
        let a = t.matmul(v[0], v[0])?;
        let b = t.add(a, v[0])?;
        let c = t.row_softmax(b)?;
        let d = t.add(c, v[0])?;
        weigh(t, d)
    });
}
