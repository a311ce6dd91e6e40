//! Central finite-difference checks for every differentiable op.
//!
//! Each case projects the op output against a fixed pseudo-random weight
//! tensor so asymmetric gradient errors cannot cancel, then probes a spread
//! of input coordinates with step 1e-5 at double precision.

use multiface_tensor::fd;
use multiface_tensor::graph::{Graph, TensorId};
use multiface_tensor::ndarray::{ArrayD, IxDyn};
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6; // op-level checks hold far tighter than the 1e-4 model budget

fn arb(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = multiface_tensor::rng::derive_rng(seed, &[7, 7, 7]);
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect()).unwrap()
}

/// Runs `build` to produce the op output, projects it to a scalar, and
/// compares analytic vs numeric gradients w.r.t. the primary input.
fn check(shape: &[usize], seed: u64, build: impl Fn(&mut Graph, TensorId) -> TensorId) {
    let x0 = arb(shape, seed);
    let mut eval = |x: &ArrayD<f64>| -> f64 {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), false);
        let y = build(&mut g, xid);
        let w = arb(g.shape(y), seed + 1);
        let wid = g.constant(w);
        let p = g.mul(y, wid);
        let l = g.sum_all(p);
        g.scalar(l)
    };
    let mut g = Graph::new();
    let xid = g.leaf(x0.clone(), true);
    let y = build(&mut g, xid);
    let w = arb(g.shape(y), seed + 1);
    let wid = g.constant(w);
    let p = g.mul(y, wid);
    let l = g.sum_all(p);
    let grads = g.backward(l);
    let analytic = grads.get(xid).expect("input gradient missing");
    let coords = fd::probe_coords(x0.len(), 12);
    let worst = fd::check_coords(&mut eval, &x0, analytic, &coords, H);
    assert!(worst <= TOL, "worst relative error {worst:e} exceeds {TOL:e}");
}

#[test]
fn elementwise_ops() {
    check(&[3, 4], 1, |g, x| {
        let y = g.exp(x);
        let z = g.scale(y, 0.7);
        g.add_const(z, 0.3)
    });
    check(&[3, 4], 2, |g, x| {
        let s = g.add_const(x, 2.0); // keep ln argument positive
        g.ln(s)
    });
    check(&[5, 5], 3, |g, x| g.gelu(x));
    check(&[5, 5], 4, |g, x| g.sigmoid(x));
    check(&[5, 5], 5, |g, x| {
        let y = g.relu(x);
        g.neg(y)
    });
    check(&[4, 4], 6, |g, x| g.clamp(x, -0.5, 0.5));
}

#[test]
fn binary_ops() {
    check(&[3, 4], 7, |g, x| {
        let c = g.constant(arb(&[3, 4], 77));
        let s = g.sub(x, c);
        let m = g.mul(s, x);
        g.add(m, x)
    });
}

#[test]
fn broadcast_ops() {
    check(&[2, 3, 4], 8, |g, x| {
        let b = g.constant(arb(&[2, 1, 4], 88));
        g.mul_bcast(x, b)
    });
    // gradient w.r.t. the broadcast side
    let x = arb(&[2, 3, 4], 9);
    check(&[2, 1, 4], 10, move |g, b| {
        let xc = g.constant(x.clone());
        g.mul_bcast(xc, b)
    });
    check(&[2, 3, 4], 11, |g, x| {
        let b = g.constant(arb(&[4], 99));
        g.add_suffix(x, b)
    });
    let x2 = arb(&[2, 3, 4], 12);
    check(&[3, 4], 13, move |g, b| {
        let xc = g.constant(x2.clone());
        g.add_suffix(xc, b)
    });
}

#[test]
fn matmul_family() {
    let b = arb(&[4, 6], 14);
    check(&[3, 4], 15, move |g, x| {
        let bid = g.constant(b.clone());
        g.matmul(x, bid)
    });
    let a = arb(&[3, 4], 16);
    check(&[4, 6], 17, move |g, w| {
        let aid = g.constant(a.clone());
        g.matmul(aid, w)
    });
    let bt = arb(&[6, 4], 18);
    check(&[3, 4], 19, move |g, x| {
        let bid = g.constant(bt.clone());
        g.matmul_tb(x, bid)
    });
    let b3 = arb(&[2, 4, 5], 20);
    check(&[2, 3, 4], 21, move |g, x| {
        let bid = g.constant(b3.clone());
        g.bmm(x, bid)
    });
    let a3 = arb(&[2, 3, 4], 22);
    check(&[2, 4, 5], 23, move |g, w| {
        let aid = g.constant(a3.clone());
        g.bmm(aid, w)
    });
    let bt3 = arb(&[2, 5, 4], 24);
    check(&[2, 3, 4], 25, move |g, x| {
        let bid = g.constant(bt3.clone());
        g.bmm_tb(x, bid)
    });
    let at3 = arb(&[2, 3, 4], 26);
    check(&[2, 5, 4], 27, move |g, w| {
        let aid = g.constant(at3.clone());
        g.bmm_tb(aid, w)
    });
}

#[test]
fn linear_layer() {
    let w = arb(&[5, 7], 28);
    let bias = arb(&[7], 29);
    check(&[2, 3, 5], 30, move |g, x| {
        let wid = g.constant(w.clone());
        let bid = g.constant(bias.clone());
        g.linear(x, wid, Some(bid))
    });
}

#[test]
fn shape_ops() {
    check(&[2, 4, 4, 3], 31, |g, x| {
        let r = g.roll_hw(x, 1, -2);
        let p = g.permute(r, &[0, 3, 1, 2]);
        g.reshape(p, &[2, 48])
    });
    check(&[2, 4, 4, 3], 32, |g, x| g.space_to_depth(x, 2));
    // ragged: 5x5 padded to 3x3 blocks of 2
    check(&[1, 5, 5, 2], 33, |g, x| g.space_to_depth(x, 2));
    check(&[2, 3, 2, 2], 34, |g, x| {
        let other = g.constant(arb(&[2, 3, 2, 3], 111));
        g.concat(3, &[x, other])
    });
}

#[test]
fn pooling_ops() {
    check(&[2, 4, 4, 3], 35, |g, x| g.adaptive_avg_pool(x, 2, 2));
    // non-divisible bounds
    check(&[1, 7, 7, 2], 36, |g, x| g.adaptive_avg_pool(x, 4, 4));
    check(&[2, 3, 3, 4], 37, |g, x| g.global_avg_pool(x));
    check(&[2, 3, 3, 4], 38, |g, x| g.global_max_pool(x));
}

#[test]
fn conv_op() {
    let w = arb(&[9 * 3, 5], 39);
    let b = arb(&[5], 40);
    check(&[2, 4, 4, 3], 41, move |g, x| {
        let wid = g.constant(w.clone());
        let bid = g.constant(b.clone());
        g.conv3x3(x, wid, bid)
    });
    // gradient w.r.t. weight and bias
    let x = arb(&[2, 4, 4, 3], 42);
    let b2 = arb(&[5], 43);
    check(&[9 * 3, 5], 44, move |g, w| {
        let xid = g.constant(x.clone());
        let bid = g.constant(b2.clone());
        g.conv3x3(xid, w, bid)
    });
    let x2 = arb(&[2, 4, 4, 3], 45);
    let w2 = arb(&[9 * 3, 5], 46);
    check(&[5], 47, move |g, b| {
        let xid = g.constant(x2.clone());
        let wid = g.constant(w2.clone());
        g.conv3x3(xid, wid, b)
    });
}

#[test]
fn norm_ops() {
    let gamma = arb(&[6], 48);
    let beta = arb(&[6], 49);
    check(&[4, 6], 50, move |g, x| {
        let gm = g.constant(gamma.clone());
        let bt = g.constant(beta.clone());
        g.layer_norm(x, gm, bt, 1e-5)
    });
    let x = arb(&[4, 6], 51);
    let beta2 = arb(&[6], 52);
    check(&[6], 53, move |g, gm| {
        let xid = g.constant(x.clone());
        let bt = g.constant(beta2.clone());
        g.layer_norm(xid, gm, bt, 1e-5)
    });
    let gamma3 = arb(&[5], 54);
    let beta3 = arb(&[5], 55);
    check(&[6, 5], 56, move |g, x| {
        let gm = g.constant(gamma3.clone());
        let bt = g.constant(beta3.clone());
        g.batch_norm_train(x, gm, bt, 1e-5).0
    });
    let x4 = arb(&[6, 5], 57);
    let beta4 = arb(&[5], 58);
    check(&[5], 59, move |g, gm| {
        let xid = g.constant(x4.clone());
        let bt = g.constant(beta4.clone());
        g.batch_norm_train(xid, gm, bt, 1e-5).0
    });
    let mean: Vec<f64> = vec![0.1, -0.2, 0.3, 0.0, 0.05];
    let var: Vec<f64> = vec![1.1, 0.9, 1.3, 0.8, 1.0];
    let gamma5 = arb(&[5], 60);
    let beta5 = arb(&[5], 61);
    check(&[6, 5], 62, move |g, x| {
        let gm = g.constant(gamma5.clone());
        let bt = g.constant(beta5.clone());
        g.batch_norm_eval(x, gm, bt, &mean, &var, 1e-5)
    });
}

#[test]
fn softmax_family() {
    check(&[4, 7], 63, |g, x| g.softmax(x));
    check(&[4, 7], 64, |g, x| g.log_softmax(x));
    check(&[4, 7], 65, |g, x| {
        let ls = g.log_softmax(x);
        g.pick_per_row(ls, &[1, 3, 0, 6])
    });
}

#[test]
fn gather_and_norm_rows() {
    check(&[5, 4], 66, |g, x| g.gather_rows(x, &[0, 2, 2, 4, 1]));
    check(&[4, 6], 67, |g, x| {
        let s = g.add_const(x, 1.5); // keep rows away from the zero-norm guard
        g.l2_normalize_rows(s)
    });
}

#[test]
fn reductions() {
    check(&[3, 4], 68, |g, x| {
        let m = g.mean_all(x);
        g.reshape(m, &[1])
    });
    check(&[3, 4], 69, |g, x| {
        let s = g.sum_all(x);
        g.reshape(s, &[1])
    });
}

#[test]
fn attention_shaped_composite() {
    // q,k,v projections + scores + softmax + weighted sum, all through one x
    let wq = arb(&[6, 6], 70);
    let wk = arb(&[6, 6], 71);
    let wv = arb(&[6, 6], 72);
    check(&[2, 5, 6], 73, move |g, x| {
        let wq = g.constant(wq.clone());
        let wk = g.constant(wk.clone());
        let wv = g.constant(wv.clone());
        let q = g.linear(x, wq, None);
        let k = g.linear(x, wk, None);
        let v = g.linear(x, wv, None);
        let scores = g.bmm_tb(q, k);
        let scaled = g.scale(scores, 1.0 / (6.0f64).sqrt());
        let attn = g.softmax(scaled);
        g.bmm(attn, v)
    });
}
