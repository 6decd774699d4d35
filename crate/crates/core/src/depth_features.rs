//! Spatial gradient magnitude of depth feature maps and its channel-wise
//! concatenation onto the features that produced it.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};

/// Single-channel, nonnegative gradient magnitude map `[h, w, 1]` on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradientMap(pub Var);

/// Depth features with their gradient map appended as the last channel,
/// `[h, w, c + 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusedDepthFeatures {
    pub values: Var,
    pub feature_channels: usize,
}

/// Per-channel forward differences `dx = f[y, x+1] - f[y, x]`,
/// `dy = f[y+1, x] - f[y, x]` (zero on the last column/row), magnitude
/// `sqrt(dx² + dy²)`, averaged over channels.
pub fn depth_gradient<T: Scalar>(graph: &mut Graph<T>, features: Var) -> Result<GradientMap> {
    graph.depth_gradient(features).map(GradientMap)
}

pub fn concat_depth_grad<T: Scalar>(
    graph: &mut Graph<T>,
    depth_features: Var,
    gradient: GradientMap,
) -> Result<FusedDepthFeatures> {
    let (h, w, c) = graph.value(depth_features).hwc()?;
    let (gh, gw, gc) = graph.value(gradient.0).hwc()?;
    if (h, w) != (gh, gw) || gc != 1 {
        return Err(Error::dim(
            "concat_depth_grad",
            graph.shape(depth_features),
            graph.shape(gradient.0),
        ));
    }
    let values = graph.concat_channels(&[depth_features, gradient.0])?;
    Ok(FusedDepthFeatures {
        values,
        feature_channels: c,
    })
}

/// Gradient of a feature map followed by the concat, in one call.
pub fn with_gradient_channel<T: Scalar>(
    graph: &mut Graph<T>,
    depth_features: Var,
) -> Result<FusedDepthFeatures> {
    let g = depth_gradient(graph, depth_features)?;
    concat_depth_grad(graph, depth_features, g)
}

/// Concat of an all-zero gradient channel: same shape as
/// [`with_gradient_channel`] but without geometric information.
pub fn with_zero_channel<T: Scalar>(
    graph: &mut Graph<T>,
    depth_features: Var,
) -> Result<FusedDepthFeatures> {
    let (h, w, _) = graph.value(depth_features).hwc()?;
    let zeros = graph.constant(crate::Tensor::zeros(&[h, w, 1]));
    concat_depth_grad(graph, depth_features, GradientMap(zeros))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight double loop over pixels, independent of the tape kernel.
    pub(crate) fn loop_oracle(f: &Tensor<f64>) -> Vec<f64> {
        let (h, w, c) = f.hwc().unwrap();
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut total = 0.0;
                for ch in 0..c {
                    let here = f.at3(y, x, ch);
                    let right = if x + 1 < w { f.at3(y, x + 1, ch) } else { here };
                    let below = if y + 1 < h { f.at3(y + 1, x, ch) } else { here };
                    total += ((right - here).powi(2) + (below - here).powi(2)).sqrt();
                }
                out[y * w + x] = total / c as f64;
            }
        }
        out
    }

    fn gradient_of(f: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let gm = depth_gradient(&mut g, x).unwrap();
        g.value(gm.0).clone()
    }

    #[test]
    fn constant_map_has_zero_gradient() {
        let out = gradient_of(&Tensor::full(&[5, 4, 3], 2.5));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_has_unit_magnitude() {
        let (h, w) = (4, 6);
        let ramp = Tensor::from_fn(&[h, w, 1], |i| (i % w) as f64);
        let out = gradient_of(&ramp);
        for y in 0..h {
            for x in 0..w {
                let expect = if x + 1 < w { 1.0 } else { 0.0 };
                assert_eq!(out.at3(y, x, 0), expect);
            }
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let f = Tensor::from_fn(&[6, 6, 3], |_| rng.random_range(-1.0..1.0));
            let got = gradient_of(&f);
            for (a, b) in got.data().iter().zip(loop_oracle(&f)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_small_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 5, 2]));
        assert!(matches!(depth_gradient(&mut g, x), Err(Error::Argument(_))));
    }

    #[test]
    fn horizontal_edge_support() {
        // step between columns 2 and 3: only column 2 sees a nonzero forward
        // difference; column 3 is the first pixel past the edge
        let f = Tensor::from_fn(&[5, 6, 1], |i| if i % 6 >= 3 { 1.0 } else { 0.0 });
        let out = gradient_of(&f);
        for y in 0..5 {
            for x in 0..6 {
                let v = out.at3(y, x, 0);
                if x == 2 {
                    assert_eq!(v, 1.0);
                } else {
                    assert_eq!(v, 0.0, "x={x}");
                }
            }
        }
    }

    #[test]
    fn concat_slices_back_exactly() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros(&[3, 4, 2]));
        let ramp = g.constant(Tensor::from_fn(&[3, 4, 1], |i| (i % 4) as f64));
        let fused = concat_depth_grad(&mut g, f, GradientMap(ramp)).unwrap();
        assert_eq!(g.shape(fused.values), &[3, 4, 3]);
        let last = g.value(fused.values).channels(2, 3).unwrap();
        assert_eq!(&last, g.value(ramp));
        let head = g.value(fused.values).channels(0, 2).unwrap();
        assert_eq!(&head, g.value(f));

        let bad = g.constant(Tensor::zeros(&[3, 5, 1]));
        assert!(matches!(
            concat_depth_grad(&mut g, f, GradientMap(bad)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn gradient_flows_through_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = Tensor::from_fn(&[4, 4, 2], |_| rng.random_range(-1.0..1.0));
        let probe = Tensor::from_fn(&[4, 4, 3], |_| rng.random_range(-1.0..1.0));
        let err = grad_check(
            |g, p| {
                let fused = with_gradient_channel(g, p)?;
                let w = g.constant(probe.clone());
                let prod = g.mul(fused.values, w)?;
                Ok(g.sum(prod))
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    proptest! {
        #[test]
        fn shift_invariant(
            data in proptest::collection::vec(-2.0f64..2.0, 5 * 4 * 2),
            shift in -3.0f64..3.0,
        ) {
            let f = Tensor::new(vec![5, 4, 2], data).unwrap();
            let shifted = f.map(|v| v + shift);
            let a = gradient_of(&f);
            let b = gradient_of(&shifted);
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn homogeneous_under_scaling(
            data in proptest::collection::vec(-2.0f64..2.0, 4 * 4 * 3),
            exponent in -4i32..4,
            s in 0.0f64..5.0,
        ) {
            let f = Tensor::new(vec![4, 4, 3], data).unwrap();
            let base = gradient_of(&f);
            // powers of two scale every intermediate exactly
            let p = 2f64.powi(exponent);
            let exact = gradient_of(&f.map(|v| v * p));
            prop_assert_eq!(exact, base.map(|v| v * p));
            let general = gradient_of(&f.map(|v| v * s));
            for (a, b) in general.data().iter().zip(base.data()) {
                prop_assert!((a - s * b).abs() <= 1e-12 * (1.0 + s * b.abs()));
            }
            prop_assert!(base.data().iter().all(|&v| v >= 0.0));
        }
    }
}
