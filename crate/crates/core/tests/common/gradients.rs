//! Central-difference checks for every differentiable tape operation.

use maskadapt::{grad_check, Graph64, Result, Tensor, Tensor64, Var, IGNORE_INDEX};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-3;

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so kinks (relu, sqrt) stay out of reach of
/// the finite-difference stencil.
fn rand_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Reduces any output to a scalar with fixed random weights.
fn project(g: &mut Graph64, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let w = g.constant(rand_tensor(g.shape(out), &mut rng));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

type Build = Box<dyn Fn(&mut Graph64, Var, &mut ChaCha8Rng) -> Result<Var>>;

/// One operation checked with respect to one of its inputs.
pub struct OpCase {
    pub name: String,
    pub shape: Vec<usize>,
    /// Draw inputs away from zero.
    pub away: bool,
    pub build: Build,
}

fn case(name: impl Into<String>, shape: &[usize], away: bool, build: impl Fn(&mut Graph64, Var, &mut ChaCha8Rng) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name: name.into(),
        shape: shape.to_vec(),
        away,
        build: Box::new(build),
    }
}

pub fn catalog() -> Vec<OpCase> {
    let mut v = vec![
        case("matmul lhs", &[3, 4], false, |g, x, r| {
            let b = g.constant(rand_tensor(&[4, 5], r));
            g.matmul(x, b)
        }),
        case("matmul rhs", &[4, 5], false, |g, x, r| {
            let a = g.constant(rand_tensor(&[3, 4], r));
            g.matmul(a, x)
        }),
        case("add", &[2, 3, 2], false, |g, x, r| {
            let b = g.constant(rand_tensor(&[2, 3, 2], r));
            g.add(x, b)
        }),
        case("add self", &[4], false, |g, x, _| g.add(x, x)),
        case("mul", &[2, 3], false, |g, x, r| {
            let b = g.constant(rand_tensor(&[2, 3], r));
            g.mul(b, x)
        }),
        case("mul self", &[5], false, |g, x, _| g.mul(x, x)),
        case("scale", &[6], false, |g, x, _| Ok(g.scale(x, -2.5))),
        case("relu", &[4, 4], true, |g, x, _| Ok(g.relu(x))),
        case("add_bias input", &[3, 3, 4], false, |g, x, r| {
            let b = g.constant(rand_tensor(&[4], r));
            g.add_bias(x, b)
        }),
        case("add_bias bias", &[4], false, |g, b, r| {
            let x = g.constant(rand_tensor(&[3, 3, 4], r));
            g.add_bias(x, b)
        }),
        case("transpose", &[3, 5], false, |g, x, _| g.transpose(x)),
        case("reshape", &[2, 6], false, |g, x, _| g.reshape(x, &[3, 2, 2])),
        case("concat", &[3, 3, 2], false, |g, x, r| {
            let b = g.constant(rand_tensor(&[3, 3, 3], r));
            g.concat_channels(&[b, x, b])
        }),
        case("slice", &[3, 3, 5], false, |g, x, _| g.slice_channels(x, 1, 4)),
        case("softmax", &[4, 6], false, |g, x, _| {
            let s = g.scale(x, 3.0);
            g.softmax_rows(s)
        }),
        case("sum", &[3, 4], false, |g, x, _| {
            let s = g.sum(x);
            g.mul(s, s)
        }),
        case("mean", &[3, 4], false, |g, x, _| {
            let m = g.mean(x);
            g.mul(m, m)
        }),
        case("weighted_sum", &[1], false, |g, x, _| {
            let x2 = g.mul(x, x)?;
            g.weighted_sum(&[(x, 0.5), (x2, -3.0)])
        }),
        case("conv1x1 input", &[4, 4, 3], false, |g, x, r| {
            let w = g.constant(rand_tensor(&[3, 2], r));
            let b = g.constant(rand_tensor(&[2], r));
            g.conv1x1(x, w, b)
        }),
        case("conv1x1 weight", &[3, 2], false, |g, w, r| {
            let x = g.constant(rand_tensor(&[4, 4, 3], r));
            let b = g.constant(rand_tensor(&[2], r));
            g.conv1x1(x, w, b)
        }),
        case("resize down", &[8, 8, 2], false, |g, x, _| g.resize(x, 4, 2)),
        case("resize up", &[3, 4, 2], false, |g, x, _| g.resize(x, 8, 7)),
        case("depth_gradient", &[6, 5, 3], false, |g, x, _| g.depth_gradient(x)),
    ];
    for stride in [1, 2] {
        v.push(case(format!("conv3x3/{stride} input"), &[6, 6, 2], false, move |g, x, r| {
            let w = g.constant(rand_tensor(&[18, 3], r));
            let b = g.constant(rand_tensor(&[3], r));
            g.conv3x3(x, w, b, stride)
        }));
        v.push(case(format!("conv3x3/{stride} weight"), &[18, 3], false, move |g, w, r| {
            let x = g.constant(rand_tensor(&[6, 6, 2], r));
            let b = g.constant(rand_tensor(&[3], r));
            g.conv3x3(x, w, b, stride)
        }));
        v.push(case(format!("conv3x3/{stride} bias"), &[3], false, move |g, b, r| {
            let x = g.constant(rand_tensor(&[5, 5, 2], r));
            let w = g.constant(rand_tensor(&[18, 3], r));
            g.conv3x3(x, w, b, stride)
        }));
    }
    v
}

/// Largest relative error of `case` over seeds `0..seeds`.
pub fn max_error(case: &OpCase, seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = if case.away {
            rand_away_from_zero(&case.shape, &mut rng)
        } else {
            rand_tensor(&case.shape, &mut rng)
        };
        let err = grad_check(
            |g, x| {
                let mut r = ChaCha8Rng::seed_from_u64(seed + 1000);
                let out = (case.build)(g, x, &mut r)?;
                project(g, out, seed)
            },
            &theta,
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Cross-entropy with ignored pixels, plain and per-pixel weighted.
pub fn cross_entropy_max_error(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = rand_tensor(&[12, 3], &mut rng).map(|v| v * 3.0);
        let labels: Vec<u8> = (0..12)
            .map(|i| if i % 5 == 4 { IGNORE_INDEX } else { rng.random_range(0..3) })
            .collect();
        let weights: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        for w in [None, Some(weights.as_slice())] {
            let err = grad_check(|g, x| g.cross_entropy(x, &labels, w), &logits, EPS).unwrap();
            worst = worst.max(err);
        }
    }
    worst
}
