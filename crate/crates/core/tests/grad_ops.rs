//! Central finite differences vs analytic gradients, per op, in f64.
//! Shapes stay at or below 4x4x8x8 so the whole file runs in seconds.

use hidream_core::autodiff::gradcheck::{grad_check, DEFAULT_STEP, DEFAULT_TOL};
use hidream_core::autodiff::{Graph, Val};
use hidream_core::rng::DetRng;
use hidream_core::tensor::Tensor;
use hidream_core::Result;

fn rt(rng: &mut DetRng, shape: &[usize]) -> Tensor<f64> {
    rng.uniform_tensor(shape.to_vec(), -1.0, 1.0)
}

/// Positive-valued tensor away from zero, for log/div denominators.
fn rt_pos(rng: &mut DetRng, shape: &[usize]) -> Tensor<f64> {
    rng.uniform_tensor(shape.to_vec(), 0.5, 1.5)
}

fn check(
    params: Vec<(&str, Tensor<f64>)>,
    f: impl Fn(&mut Graph<f64>, &[Val]) -> Result<Val>,
) {
    let named: Vec<(String, Tensor<f64>)> = params
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect();
    let report = grad_check(&named, DEFAULT_STEP, DEFAULT_TOL, f).unwrap();
    for p in &report.params {
        assert!(
            p.max_rel_err <= DEFAULT_TOL,
            "{}: rel err {} (analytic {} vs fd {} at index {})",
            p.name,
            p.max_rel_err,
            p.analytic_at_worst,
            p.fd_at_worst,
            p.worst_index
        );
    }
}

#[test]
fn unary_elementwise_ops() {
    let mut rng = DetRng::new(11);
    // shifted away from relu/clip kinks
    let x = rt(&mut rng, &[3, 5]);
    check(vec![("x", x.clone())], |g, v| {
        let y = g.relu(v[0])?;
        g.sum(y)
    });
    check(vec![("x", x.clone())], |g, v| {
        let y = g.silu(v[0])?;
        g.sum(y)
    });
    check(vec![("x", x.clone())], |g, v| {
        let y = g.sigmoid(v[0])?;
        g.sum(y)
    });
    check(vec![("x", x.clone())], |g, v| {
        let y = g.softplus(v[0])?;
        g.sum(y)
    });
    check(vec![("x", x.clone())], |g, v| {
        let y = g.tanh(v[0])?;
        g.sum(y)
    });
    check(vec![("x", x.clone())], |g, v| {
        let y = g.exp(v[0])?;
        g.sum(y)
    });
    let mut rng = DetRng::new(12);
    let xp = rt_pos(&mut rng, &[6]);
    check(vec![("x", xp)], |g, v| {
        let y = g.log(v[0])?;
        g.sum(y)
    });
    // clip interior region only (kink at the bounds)
    check(vec![("x", x)], |g, v| {
        let y = g.clip(v[0], -2.0, 2.0)?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    });
}

#[test]
fn binary_elementwise_ops() {
    let mut rng = DetRng::new(21);
    let a = rt(&mut rng, &[2, 4]);
    let b = rt_pos(&mut rng, &[2, 4]);
    check(vec![("a", a.clone()), ("b", b.clone())], |g, v| {
        let y = g.add(v[0], v[1])?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    });
    check(vec![("a", a.clone()), ("b", b.clone())], |g, v| {
        let y = g.sub(v[0], v[1])?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    });
    check(vec![("a", a.clone()), ("b", b.clone())], |g, v| {
        let y = g.mul(v[0], v[1])?;
        g.sum(y)
    });
    check(vec![("a", a), ("b", b)], |g, v| {
        let y = g.div(v[0], v[1])?;
        g.sum(y)
    });
}

#[test]
fn scalar_scale_ops() {
    let mut rng = DetRng::new(31);
    let x = rt(&mut rng, &[3, 3]);
    let s = rt(&mut rng, &[1]);
    check(vec![("x", x.clone())], |g, v| {
        let y = g.scalar_mul(v[0], -1.7)?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    });
    check(vec![("x", x), ("s", s)], |g, v| {
        let y = g.scale_by(v[0], v[1])?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    });
}

#[test]
fn reduction_ops() {
    let mut rng = DetRng::new(41);
    let x = rt(&mut rng, &[2, 3, 4]);
    check(vec![("x", x.clone())], |g, v| g.mean(v[0]));
    check(vec![("x", x.clone())], |g, v| {
        let m = g.mean(v[0])?;
        let sq = g.mul(m, m)?;
        g.sum(sq)
    });
    check(vec![("x", x.clone())], |g, v| g.l1_norm(v[0]));
    check(vec![("x", x)], |g, v| g.l2_norm(v[0]));
}

#[test]
fn spatial_ops() {
    let mut rng = DetRng::new(51);
    let x = rt(&mut rng, &[2, 4, 4]);
    check(vec![("x", x.clone())], |g, v| {
        let y = g.avg_pool2(v[0])?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    });
    check(vec![("x", x.clone())], |g, v| {
        let y = g.nearest_upsample2(v[0])?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    });
    let xb = rt(&mut rng, &[1, 6, 6]);
    check(vec![("x", xb.clone())], |g, v| {
        let y = g.gaussian_blur(v[0], 0.9)?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    });
    check(vec![("x", xb)], |g, v| {
        let y = g.laplacian(v[0], 0.7)?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    });
}

#[test]
fn structural_ops() {
    let mut rng = DetRng::new(61);
    let a = rt(&mut rng, &[2, 3]);
    let b = rt(&mut rng, &[1, 3]);
    let c = rt(&mut rng, &[2, 3]);
    check(
        vec![("a", a.clone()), ("b", b), ("c", c)],
        |g, v| {
            let y = g.concat_channels(&[v[0], v[1], v[2]])?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        },
    );
    let x = rt(&mut rng, &[5, 2]);
    check(vec![("x", x.clone())], |g, v| {
        let y = g.slice_rows(v[0], 1, 3)?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    });
    check(vec![("x", x.clone())], |g, v| {
        let y = g.reshape(v[0], vec![2, 5])?;
        let t = g.transpose2d(y)?;
        let sq = g.mul(t, t)?;
        g.sum(sq)
    });
    check(vec![("a", a)], |g, v| {
        let y = g.transpose2d(v[0])?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    });
}

#[test]
fn normalization_ops() {
    let mut rng = DetRng::new(71);
    let x = rt(&mut rng, &[2, 4]);
    check(vec![("x", x)], |g, v| {
        let y = g.softmax(v[0])?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    });
    let m = rt(&mut rng, &[4, 3, 3]);
    check(vec![("x", m.clone())], |g, v| {
        let y = g.layer_norm_channels(v[0], 1e-5)?;
        // uneven weights: a plain sum-of-squares of a normalized map is
        // nearly invariant in x and its gradient degenerates to FD noise
        let w: Vec<f64> = (0..36).map(|i| (i as f64 * 0.71).cos()).collect();
        let wt = g.constant(Tensor::from_vec(vec![4, 3, 3], w).unwrap());
        let p = g.mul(y, wt)?;
        g.sum(p)
    });
    check(vec![("x", m.clone())], |g, v| {
        let y = g.standardize(v[0], 1e-6)?;
        // weigh elements unevenly so the mean-subtraction path is exercised
        let w: Vec<f64> = (0..36).map(|i| (i as f64 * 0.37).sin()).collect();
        let wt = g.constant(Tensor::from_vec(vec![4, 3, 3], w).unwrap());
        let p = g.mul(y, wt)?;
        g.sum(p)
    });
    check(vec![("x", m)], |g, v| g.tv2d(v[0]));
}

#[test]
fn linear_algebra_ops() {
    let mut rng = DetRng::new(81);
    let a = rt(&mut rng, &[3, 4]);
    let b = rt(&mut rng, &[4, 2]);
    check(vec![("a", a.clone()), ("b", b.clone())], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    });
    let bias = rt(&mut rng, &[2]);
    check(
        vec![("x", a), ("w", b), ("b", bias)],
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        },
    );
}

#[test]
fn conv_ops() {
    let mut rng = DetRng::new(91);
    let x = rt(&mut rng, &[3, 5, 4]);
    let w3 = rng.normal_tensor::<f64>(vec![2, 3, 3, 3], 0.4);
    let b3 = rt(&mut rng, &[2]);
    check(
        vec![("x", x.clone()), ("w", w3), ("b", b3)],
        |g, v| {
            let y = g.conv2d_3x3(v[0], v[1], v[2])?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        },
    );
    let w1 = rng.normal_tensor::<f64>(vec![4, 3], 0.4);
    let b1 = rt(&mut rng, &[4]);
    check(
        vec![("x", x.clone()), ("w", w1), ("b", b1)],
        |g, v| {
            let y = g.conv2d_1x1(v[0], v[1], v[2])?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        },
    );
    let bc = rt(&mut rng, &[3]);
    check(
        vec![("x", x), ("b", bc)],
        |g, v| {
            let y = g.bias_channels(v[0], v[1])?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        },
    );
}

#[test]
fn composite_two_layer_net_matches_fd() {
    // an MLP-ish composite: conv -> silu -> pool -> layernorm -> linear-ish head
    let mut rng = DetRng::new(101);
    let x = rt(&mut rng, &[2, 4, 4]);
    let w3 = rng.normal_tensor::<f64>(vec![3, 2, 3, 3], 0.4);
    let b3 = Tensor::<f64>::zeros(vec![3]);
    let w1 = rng.normal_tensor::<f64>(vec![2, 3], 0.5);
    let b1 = rt(&mut rng, &[2]);
    check(
        vec![("x", x), ("w3", w3), ("b3", b3), ("w1", w1), ("b1", b1)],
        |g, v| {
            let c = g.conv2d_3x3(v[0], v[1], v[2])?;
            let a = g.silu(c)?;
            let p = g.avg_pool2(a)?;
            let n = g.layer_norm_channels(p, 1e-5)?;
            let h = g.conv2d_1x1(n, v[3], v[4])?;
            let sq = g.mul(h, h)?;
            g.mean(sq)
        },
    );
}
