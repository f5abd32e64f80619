use pdaanet_core::gradcheck::grad_check;
use pdaanet_core::{Tape, Tensor, TensorError, Var, Window};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn eval(f: impl FnOnce(&mut Tape) -> Result<Var, TensorError>) -> Tensor {
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.value(v).clone()
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check(f: impl Fn(&mut Tape, Var) -> Result<Var, TensorError>, x: &Tensor) {
    let report = grad_check(f, x, H, TOL).unwrap();
    assert!(report.pass, "grad check failed: {report:?}");
}

#[test]
fn elementwise_examples() {
    let sum = eval(|tp| {
        let a = tp.constant(t(&[2], &[1.0, 2.0]));
        let b = tp.constant(t(&[2], &[3.0, 4.0]));
        tp.add(a, b)
    });
    assert_eq!(sum.data(), &[4.0, 6.0]);

    let s = eval(|tp| {
        let a = tp.constant(t(&[1], &[0.0]));
        tp.sigmoid(a)
    });
    assert_eq!(s.data(), &[0.5]);

    let sm = eval(|tp| {
        let a = tp.constant(t(&[3], &[0.0, 0.0, 0.0]));
        tp.softmax(a)
    });
    for &v in sm.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn binary_shape_mismatch_is_dimension_error() {
    let mut tp = Tape::new();
    let a = tp.constant(Tensor::zeros(&[2, 3]));
    let b = tp.constant(Tensor::zeros(&[3, 3]));
    assert!(matches!(tp.add(a, b), Err(TensorError::Shape { .. })));
    let c = tp.constant(Tensor::zeros(&[1, 3]));
    assert_eq!(tp.mul(a, c).map(|v| tp.shape(v).to_vec()).unwrap(), vec![2, 3]);
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let mut tp = Tape::new();
    let a = tp.constant(t(&[2], &[1.0, 0.0]));
    assert!(matches!(tp.log(a), Err(TensorError::Domain { .. })));
}

#[test]
fn matmul_examples() {
    let id = eval(|tp| {
        let a = tp.constant(Tensor::identity(2));
        let b = tp.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        tp.matmul(a, b)
    });
    assert_eq!(id.data(), &[1.0, 2.0, 3.0, 4.0]);

    // Scalar dot product: 1*3 + 2*4.
    let dot = eval(|tp| {
        let a = tp.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tp.constant(t(&[2, 1], &[3.0, 4.0]));
        tp.matmul(a, b)
    });
    assert_eq!(dot.data(), &[11.0]);

    let z = eval(|tp| {
        let a = tp.constant(Tensor::zeros(&[2, 3]));
        let b = tp.constant(Tensor::ones(&[3, 2]));
        tp.matmul(a, b)
    });
    assert_eq!(z, Tensor::zeros(&[2, 2]));

    let mut tp = Tape::new();
    let a = tp.constant(Tensor::zeros(&[2, 3]));
    let b = tp.constant(Tensor::zeros(&[2, 3]));
    assert!(tp.matmul(a, b).is_err());
}

/// Direct nested-loop convolution used as an oracle.
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kk) = (k.shape()[0], k.shape()[2]);
    let ho = (h + 2 * pad - kk) / stride + 1;
    let wo = (w + 2 * pad - kk) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for i in 0..ho {
            for j in 0..wo {
                let mut s = 0.0;
                for c in 0..ci {
                    for dy in 0..kk {
                        for dx in 0..kk {
                            let y = (i * stride + dy) as isize - pad as isize;
                            let xx = (j * stride + dx) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                s += x.data()[(c * h + y as usize) * w + xx as usize]
                                    * k.data()[((o * ci + c) * kk + dy) * kk + dx];
                            }
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = s;
            }
        }
    }
    Tensor::new(&[co, ho, wo], out).unwrap()
}

#[test]
fn conv2d_examples() {
    let scaled = eval(|tp| {
        let x = tp.constant(Tensor::ones(&[1, 3, 3]));
        let k = tp.constant(t(&[1, 1, 1, 1], &[2.0]));
        tp.conv2d(x, k, None, 1, 0)
    });
    assert_eq!(scaled, Tensor::full(&[1, 3, 3], 2.0));

    let summed = eval(|tp| {
        let x = tp.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tp.constant(Tensor::ones(&[1, 1, 2, 2]));
        tp.conv2d(x, k, None, 1, 0)
    });
    assert_eq!(summed.data(), &[10.0]);
    assert_eq!(summed.shape(), &[1, 1, 1]);

    let zero = eval(|tp| {
        let x = tp.constant(random(&[2, 5, 5], 3));
        let k = tp.constant(Tensor::zeros(&[3, 2, 3, 3]));
        tp.conv2d(x, k, None, 2, 1)
    });
    assert_eq!(zero, Tensor::zeros(&[3, 3, 3]));

    let mut tp = Tape::new();
    let x = tp.constant(Tensor::ones(&[1, 2, 2]));
    let k = tp.constant(Tensor::ones(&[1, 1, 5, 5]));
    assert!(matches!(tp.conv2d(x, k, None, 1, 1), Err(TensorError::Dimension { .. })));
}

#[test]
fn conv2d_matches_direct_loops() {
    for (seed, stride, pad) in [(1, 1, 1), (2, 2, 1), (3, 1, 0), (4, 2, 2)] {
        let x = random(&[3, 7, 6], seed);
        let k = random(&[4, 3, 3, 3], seed + 100);
        let got = eval(|tp| {
            let xv = tp.constant(x.clone());
            let kv = tp.constant(k.clone());
            tp.conv2d(xv, kv, None, stride, pad)
        });
        let want = conv_oracle(&x, &k, stride, pad);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }
}

#[test]
fn batched_conv2d_equals_per_image() {
    let x = random(&[3, 2, 4, 4], 9);
    let k = random(&[5, 2, 3, 3], 10);
    let batched = eval(|tp| {
        let xv = tp.constant(x.clone());
        let kv = tp.constant(k.clone());
        tp.conv2d(xv, kv, None, 1, 1)
    });
    for b in 0..3 {
        let img = Tensor::new(&[2, 4, 4], x.data()[b * 32..(b + 1) * 32].to_vec()).unwrap();
        let want = conv_oracle(&img, &k, 1, 1);
        let got = &batched.data()[b * 80..(b + 1) * 80];
        for (g, w) in got.iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn adaptive_pool_examples() {
    let g = eval(|tp| {
        let x = tp.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        tp.adaptive_avg_pool2d(x, 1, 1)
    });
    assert_eq!(g.data(), &[2.5]);

    let c = eval(|tp| {
        let x = tp.constant(Tensor::full(&[1, 4, 4], 0.7));
        tp.adaptive_avg_pool2d(x, 2, 2)
    });
    assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

    // Brute-force bin enumeration: bins along each axis of 3 -> 2 are
    // [floor(0*3/2), floor(1*3/2)) = [0,1) and [1, 3).
    let x: Vec<f64> = (1..=9).map(f64::from).collect();
    let p = eval(|tp| {
        let xv = tp.constant(t(&[1, 3, 3], &x));
        tp.adaptive_avg_pool2d(xv, 2, 2)
    });
    let bins = [(0usize, 1usize), (1, 3)];
    let mut want = Vec::new();
    for &(r0, r1) in &bins {
        for &(c0, c1) in &bins {
            let mut s = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    s += x[r * 3 + c];
                }
            }
            want.push(s / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    assert_eq!(want, vec![1.0, 2.5, 5.5, 7.0]);
    assert_eq!(p.data(), &want[..]);
}

#[test]
fn upsample_examples() {
    let b = eval(|tp| {
        let x = tp.constant(t(&[1, 1, 1], &[7.0]));
        tp.upsample_to(x, 3, 3)
    });
    assert_eq!(b, Tensor::full(&[1, 3, 3], 7.0));

    let x = random(&[2, 3, 4], 5);
    let same = eval(|tp| {
        let xv = tp.constant(x.clone());
        tp.upsample_to(xv, 3, 4)
    });
    assert_eq!(same, x);

    let up = eval(|tp| {
        let xv = tp.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        tp.upsample_to(xv, 4, 4)
    });
    let mut want = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            want.push([1.0, 2.0, 3.0, 4.0][(i / 2) * 2 + j / 2]);
        }
    }
    assert_eq!(up.data(), &want[..]);
}

#[test]
fn pool_then_upsample_is_global_mean() {
    let x = random(&[3, 5, 7], 11);
    let out = eval(|tp| {
        let xv = tp.constant(x.clone());
        let p = tp.adaptive_avg_pool2d(xv, 1, 1)?;
        tp.upsample_to(p, 5, 7)
    });
    for c in 0..3 {
        let mean: f64 = x.data()[c * 35..(c + 1) * 35].iter().sum::<f64>() / 35.0;
        assert!(out.data()[c * 35..(c + 1) * 35].iter().all(|&v| (v - mean).abs() < 1e-12));
    }
}

#[test]
fn cosine_examples() {
    let cos = |a: &[f64], b: &[f64]| {
        eval(|tp| {
            let av = tp.constant(t(&[2], a));
            let bv = tp.constant(t(&[2], b));
            tp.cosine_similarity(av, bv, 0, 1e-8)
        })
        .item()
        .unwrap()
    };
    assert_eq!(cos(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
    assert_eq!(cos(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    assert!((cos(&[1.0, 2.0], &[2.0, 1.0]) - 0.8).abs() < 1e-15);
    // Zero vectors are guarded by eps.
    assert_eq!(cos(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
}

#[test]
fn backward_examples() {
    let mut tp = Tape::new();
    let x = tp.param(t(&[3], &[1.0, 2.0, 3.0]));
    let s = tp.sum(x).unwrap();
    let g = tp.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tp = Tape::new();
    let x = tp.param(t(&[2], &[1.0, 2.0]));
    let sq = tp.mul(x, x).unwrap();
    let s = tp.sum(sq).unwrap();
    let g = tp.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);

    // Non-scalar loss is a contract error.
    assert!(matches!(tp.backward(sq), Err(TensorError::Contract(_))));
}

#[test]
fn backward_is_repeatable() {
    let mut tp = Tape::new();
    let x = tp.param(random(&[1, 4, 4], 1));
    let k = tp.param(random(&[2, 1, 3, 3], 2));
    let y = tp.conv2d(x, k, None, 1, 1).unwrap();
    let y = tp.sigmoid(y).unwrap();
    let l = tp.mean(y).unwrap();
    let g1 = tp.backward(l).unwrap();
    let g2 = tp.backward(l).unwrap();
    assert_eq!(g1.get(x), g2.get(x));
    assert_eq!(g1.get(k), g2.get(k));
}

#[test]
fn grl_reverses_and_scales_gradient() {
    let mut tp = Tape::new();
    let x = tp.param(t(&[3], &[0.5, -1.0, 2.0]));
    let y = tp.grl(x, 0.1).unwrap();
    assert_eq!(tp.value(y), tp.value(x));
    let s = tp.sum(y).unwrap();
    let g = tp.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[-0.1, -0.1, -0.1]);

    let mut tp = Tape::new();
    let x = tp.param(t(&[2], &[1.0, 2.0]));
    let y = tp.grl(x, 0.0).unwrap();
    let s = tp.sum(y).unwrap();
    let g = tp.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tp = Tape::new();
    let c = tp.constant(t(&[2], &[1.0, 2.0]));
    let x = tp.param(t(&[2], &[3.0, 4.0]));
    let p = tp.mul(c, x).unwrap();
    let s = tp.sum(p).unwrap();
    let g = tp.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn grad_check_examples() {
    let x = random(&[5], 4);
    let r = grad_check(|tp, v| tp.sum(v), &x, H, TOL).unwrap();
    // Exact up to the rounding of the central difference itself.
    assert!(r.pass && r.max_rel_err < 1e-9);

    let k = random(&[2, 1, 3, 3], 8);
    check(
        |tp, v| {
            let kv = tp.constant(k.clone());
            let y = tp.conv2d(v, kv, None, 1, 1)?;
            let y = tp.sigmoid(y)?;
            tp.mean(y)
        },
        &random(&[1, 4, 4], 7),
    );
}

/// Contracts any tensor to a scalar through fixed random weights so every
/// output element contributes a distinct gradient.
fn weighted_sum(tp: &mut Tape, v: Var, seed: u64) -> Result<Var, TensorError> {
    let w = random(tp.shape(v), seed);
    let wv = tp.constant(w);
    let p = tp.mul(v, wv)?;
    tp.sum(p)
}

#[test]
fn gradients_of_every_op_match_finite_differences() {
    let x = random(&[2, 3, 4], 21);
    let pos = x.map(|v| v.abs() + 0.5);
    let other = random(&[2, 3, 4], 22);
    let bcast = random(&[1, 3, 1], 23);

    check(|tp, v| { let o = tp.constant(other.clone()); let y = tp.add(v, o)?; weighted_sum(tp, y, 1) }, &x);
    check(|tp, v| { let o = tp.constant(bcast.clone()); let y = tp.sub(o, v)?; weighted_sum(tp, y, 1) }, &x);
    check(|tp, v| { let o = tp.constant(x.clone()); let y = tp.mul(o, v)?; weighted_sum(tp, y, 1) }, &bcast);
    check(|tp, v| { let y = tp.scale(v, -2.5)?; weighted_sum(tp, y, 2) }, &x);
    check(|tp, v| { let y = tp.add_scalar(v, 0.3)?; weighted_sum(tp, y, 2) }, &x);
    check(|tp, v| { let y = tp.relu(v)?; weighted_sum(tp, y, 3) }, &x);
    check(|tp, v| { let y = tp.sigmoid(v)?; weighted_sum(tp, y, 4) }, &x);
    check(|tp, v| { let y = tp.log(v)?; weighted_sum(tp, y, 5) }, &pos);
    check(|tp, v| { let y = tp.log_sigmoid(v)?; weighted_sum(tp, y, 5) }, &x);
    check(|tp, v| { let y = tp.exp(v)?; weighted_sum(tp, y, 5) }, &x);
    check(|tp, v| { let y = tp.powf(v, 2.0)?; weighted_sum(tp, y, 6) }, &pos);
    check(|tp, v| { let y = tp.powf(v, 0.7)?; weighted_sum(tp, y, 6) }, &pos);
    check(|tp, v| { let y = tp.clamp(v, -0.5, 0.5)?; weighted_sum(tp, y, 6) }, &x);
    check(|tp, v| { let y = tp.softmax(v)?; weighted_sum(tp, y, 7) }, &x);
    check(|tp, v| { let y = tp.log_softmax(v)?; weighted_sum(tp, y, 7) }, &x);
    check(|tp, v| { let y = tp.scale(v, 3.0)?; let y = tp.smooth_l1(y)?; weighted_sum(tp, y, 8) }, &x);
    check(|tp, v| { let y = tp.mean(v)?; tp.scale(y, 2.0) }, &x);
    check(|tp, v| { let y = tp.mean_axis(v, 1)?; weighted_sum(tp, y, 9) }, &x);
    check(|tp, v| { let y = tp.reshape(v, &[6, 4])?; weighted_sum(tp, y, 10) }, &x);
    check(|tp, v| { let y = tp.broadcast_to(v, &[2, 3, 5])?; weighted_sum(tp, y, 11) }, &random(&[2, 1, 5], 1));
}

#[test]
fn gradients_of_structural_ops_match_finite_differences() {
    let x = random(&[2, 5, 6], 31);
    let y = random(&[2, 5, 6], 32);
    check(|tp, v| { let o = tp.constant(y.clone()); let c = tp.concat(&[v, o, v], 1)?; weighted_sum(tp, c, 1) }, &x);
    check(|tp, v| { let c = tp.crop(v, Window { r0: 1, r1: 4, c0: 2, c1: 6 })?; weighted_sum(tp, c, 2) }, &x);
    check(|tp, v| { let c = tp.pad_replicate(v, 2)?; weighted_sum(tp, c, 3) }, &x);
    check(|tp, v| { let c = tp.adaptive_avg_pool2d(v, 3, 4)?; weighted_sum(tp, c, 4) }, &x);
    check(|tp, v| { let c = tp.adaptive_avg_pool2d(v, 6, 6)?; weighted_sum(tp, c, 4) }, &x);
    check(|tp, v| { let c = tp.upsample_to(v, 7, 11)?; weighted_sum(tp, c, 5) }, &x);
    check(|tp, v| { let o = tp.constant(y.clone()); let c = tp.cosine_similarity(v, o, 0, 1e-8)?; weighted_sum(tp, c, 6) }, &x);
    check(|tp, v| { let o = tp.constant(y.clone()); let c = tp.cosine_similarity(o, v, 2, 1e-8)?; weighted_sum(tp, c, 6) }, &x);
    let windows = [Window { r0: 0, r1: 5, c0: 0, c1: 6 }, Window { r0: 1, r1: 3, c0: 2, c1: 3 }];
    check(|tp, v| { let c = tp.roi_pool(v, &windows, 4)?; weighted_sum(tp, c, 7) }, &x);
    let patches = random(&[2, 3, 4, 4], 33);
    check(|tp, v| { let c = tp.scatter_max(v, &windows, 5, 6, 0.5)?; weighted_sum(tp, c, 8) }, &patches);
    let a = random(&[3, 4], 34);
    let b = random(&[4, 2], 35);
    check(|tp, v| { let o = tp.constant(b.clone()); let c = tp.matmul(v, o)?; weighted_sum(tp, c, 9) }, &a);
    check(|tp, v| { let o = tp.constant(a.clone()); let c = tp.matmul(o, v)?; weighted_sum(tp, c, 9) }, &b);
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let x = random(&[2, 5, 5], 41);
    let k = random(&[3, 2, 3, 3], 42);
    let bias = random(&[3], 43);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        check(|tp, v| {
            let kv = tp.constant(k.clone());
            let bv = tp.constant(bias.clone());
            let y = tp.conv2d(v, kv, Some(bv), stride, pad)?;
            weighted_sum(tp, y, 1)
        }, &x);
        check(|tp, v| {
            let xv = tp.constant(x.clone());
            let y = tp.conv2d(xv, v, None, stride, pad)?;
            weighted_sum(tp, y, 2)
        }, &k);
        check(|tp, v| {
            let xv = tp.constant(x.clone());
            let kv = tp.constant(k.clone());
            let y = tp.conv2d(xv, kv, Some(v), stride, pad)?;
            weighted_sum(tp, y, 3)
        }, &bias);
    }
    let xb = random(&[2, 2, 4, 4], 44);
    check(|tp, v| {
        let kv = tp.constant(k.clone());
        let y = tp.conv2d(v, kv, None, 1, 1)?;
        weighted_sum(tp, y, 4)
    }, &xb);
}

#[test]
fn roi_pool_equals_crop_then_pool() {
    let x = random(&[3, 8, 8], 51);
    let windows = [
        Window { r0: 0, r1: 8, c0: 0, c1: 8 },
        Window { r0: 2, r1: 5, c0: 1, c1: 3 },
        Window { r0: 7, r1: 8, c0: 7, c1: 8 },
    ];
    let mut tp = Tape::new();
    let xv = tp.constant(x);
    let fused = tp.roi_pool(xv, &windows, 4).unwrap();
    let fused = tp.value(fused).clone();
    for (k, w) in windows.iter().enumerate() {
        let c = tp.crop(xv, *w).unwrap();
        let p = tp.adaptive_avg_pool2d(c, 4, 4).unwrap();
        let want = tp.value(p).data();
        assert_eq!(&fused.data()[k * 48..(k + 1) * 48], want);
    }
}

#[test]
fn scatter_max_combines_overlaps() {
    let mut tp = Tape::new();
    let mut data = vec![0.6; 16];
    data.extend(vec![0.9; 16]);
    let p = tp.constant(t(&[2, 1, 4, 4], &data));
    let windows = [Window { r0: 0, r1: 3, c0: 0, c1: 3 }, Window { r0: 2, r1: 4, c0: 2, c1: 4 }];
    let m = tp.scatter_max(p, &windows, 4, 4, 0.5).unwrap();
    let m = tp.value(m).data();
    assert_eq!(m[0], 0.6);
    assert_eq!(m[2 * 4 + 2], 0.9);
    assert_eq!(m[3], 0.5);
    assert_eq!(m[3 * 4 + 3], 0.9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooling_preserves_mean_when_bins_partition(
        h in 1usize..7, w in 1usize..7, seed in 0u64..1000,
        fh in 1usize..7, fw in 1usize..7,
    ) {
        let (oh, ow) = (fh.min(h), fw.min(w));
        // Partitioning bins: output extents divide the input extents.
        prop_assume!(h % oh == 0 && w % ow == 0);
        let x = random(&[2, h, w], seed);
        let p = eval(|tp| { let v = tp.constant(x.clone()); tp.adaptive_avg_pool2d(v, oh, ow) });
        prop_assert!((p.mean() - x.mean()).abs() < 1e-12);
    }

    #[test]
    fn pooling_area_weighted_mean_is_global_mean(h in 1usize..7, w in 1usize..7, oh in 1usize..7, ow in 1usize..7, seed in 0u64..1000) {
        prop_assume!(oh <= h && ow <= w);
        let x = random(&[1, h, w], seed);
        let p = eval(|tp| { let v = tp.constant(x.clone()); tp.adaptive_avg_pool2d(v, oh, ow) });
        let mut acc = 0.0;
        for i in 0..oh {
            let (r0, r1) = pdaanet_core::pool_bin(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = pdaanet_core::pool_bin(j, w, ow);
                acc += p.data()[i * ow + j] * ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
        prop_assert!((acc / (h * w) as f64 - x.mean()).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
        let a = random(&[4, 3], seed);
        let b = random(&[4, 3], seed + 7);
        let ca = a.map(|v| v * c);
        let base = eval(|tp| { let x = tp.constant(a.clone()); let y = tp.constant(b.clone()); tp.cosine_similarity(x, y, 0, 1e-8) });
        let scaled = eval(|tp| { let x = tp.constant(ca.clone()); let y = tp.constant(b.clone()); tp.cosine_similarity(x, y, 0, 1e-8) });
        prop_assert!(base.max_abs_diff(&scaled).unwrap() < 1e-12);
        prop_assert!(base.data().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..7) {
        let x = random(&[rows, cols], seed).map(|v| v * 30.0);
        let s = eval(|tp| { let v = tp.constant(x.clone()); tp.softmax(v) });
        for r in s.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_conv_sigmoid_chain_passes_grad_check(seed in 0u64..200, h in 3usize..7, w in 3usize..7) {
        let x = random(&[2, h, w], seed);
        let k = random(&[2, 2, 3, 3], seed + 1);
        let r = grad_check(|tp, v| {
            let kv = tp.constant(k.clone());
            let y = tp.conv2d(v, kv, None, 1, 1)?;
            let y = tp.sigmoid(y)?;
            weighted_sum(tp, y, seed)
        }, &x, H, TOL).unwrap();
        prop_assert!(r.pass, "{:?}", r);
    }
}
