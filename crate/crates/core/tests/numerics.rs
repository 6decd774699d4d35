mod common;

use common::gradients;
use maskadapt::{Error, Graph, Graph64, Tensor, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;

#[test]
fn every_op_passes_finite_differences() {
    let cases = gradients::catalog();
    assert!(cases.len() >= 29);
    for case in &cases {
        let err = gradients::max_error(case, SEEDS);
        assert!(err < gradients::TOL, "{}: relative error {err}", case.name);
    }
}

#[test]
fn cross_entropy_passes_finite_differences() {
    let err = gradients::cross_entropy_max_error(SEEDS);
    assert!(err < gradients::TOL, "{err}");
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    gradients::rand_tensor(shape, rng)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 33, 8)] {
        let a = rand_tensor(&[m, k], &mut rng);
        let b = rand_tensor(&[k, n], &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                assert!((g.value(c).data()[i * n + j] - s).abs() < 1e-12);
            }
        }
    }
    let mut g = Graph64::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_rows_stable_for_large_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for scale in [1.0, 1e2, 1e3, 1e4] {
        let x = rand_tensor(&[6, 7], &mut rng).map(|v| v * scale);
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax_rows(v).unwrap();
        for row in g.value(s).data().chunks(7) {
            assert!(row.iter().all(|p| p.is_finite() && *p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6, "scale {scale}");
        }
    }
}

#[test]
fn down_then_up_preserves_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let x = Tensor::from_fn(&[8, 8, 1], |_| rng.random_range(0.0..1.0f64));
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let d = g.resize(v, 4, 4).unwrap();
        let u = g.resize(d, 8, 8).unwrap();
        let (m0, m1) = (x.mean(), g.value(u).mean());
        assert!((m1 - m0).abs() <= 0.05 * m0.abs(), "{m0} vs {m1}");
    }
}

#[test]
fn conv1x1_is_pointwise_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[5, 4, 3], &mut rng);
    let w = rand_tensor(&[3, 6], &mut rng);
    let b = rand_tensor(&[6], &mut rng);
    let mut g = Graph::new();
    let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv1x1(vx, vw, vb).unwrap();
    assert_eq!(g.shape(y), &[5, 4, 6]);
    for p in 0..20 {
        for o in 0..6 {
            let want: f64 = b.data()[o] + (0..3).map(|c| x.data()[p * 3 + c] * w.data()[c * 6 + o]).sum::<f64>();
            assert!((g.value(y).data()[p * 6 + o] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn conv3x3_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (h, w, cin, cout) = (7, 6, 2, 3);
    let x = rand_tensor(&[h, w, cin], &mut rng);
    let wt = rand_tensor(&[9 * cin, cout], &mut rng);
    let b = rand_tensor(&[cout], &mut rng);
    for stride in [1, 2] {
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
        let y = g.conv3x3(vx, vw, vb, stride).unwrap();
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        assert_eq!(g.shape(y), &[oh, ow, cout]);
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..cout {
                    let mut s = b.data()[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = ((oy * stride + ky) as isize - 1, (ox * stride + kx) as isize - 1);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..cin {
                                s += x.data()[(iy as usize * w + ix as usize) * cin + c]
                                    * wt.data()[((ky * 3 + kx) * cin + c) * cout + o];
                            }
                        }
                    }
                    assert!((g.value(y).data()[(oy * ow + ox) * cout + o] - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn frozen_leaf_has_no_gradient() {
    let mut g = Graph64::new();
    let w = g.constant(Tensor::full(&[2, 2], 1.0));
    let x = g.param(Tensor::full(&[1, 2], 2.0));
    let y = g.matmul(x, w).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert!(g.grad(w).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
}
