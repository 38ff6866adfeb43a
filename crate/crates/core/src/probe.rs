//! Small multinomial logistic probe used to audit what the synthetic ROI
//! evidence actually encodes (category identifiability, position locality).

use crate::autodiff::Graph;
use crate::error::Result;
use crate::rng::DetRng;
use crate::tensor::Tensor;

/// Fit a softmax linear probe on one half of the data (full-batch gradient
/// descent) and report accuracy on the other half.
pub fn linear_probe_accuracy(
    features: &[Vec<f32>],
    labels: &[usize],
    classes: usize,
    seed: u64,
    steps: usize,
) -> Result<f64> {
    assert_eq!(features.len(), labels.len());
    let n = features.len();
    let dim = features[0].len();
    let half = n / 2;

    let flat = |rows: &[Vec<f32>]| -> Vec<f64> {
        rows.iter()
            .flat_map(|r| r.iter().map(|&v| v as f64))
            .collect()
    };
    let train_x = Tensor::from_vec(vec![half, dim], flat(&features[..half]))?;
    let mut onehot = vec![0.0f64; half * classes];
    for (i, &l) in labels[..half].iter().enumerate() {
        onehot[i * classes + l] = 1.0;
    }
    let train_y = Tensor::from_vec(vec![half, classes], onehot)?;

    let mut rng = DetRng::new(seed);
    let mut w = rng.normal_tensor::<f64>(vec![dim, classes], 0.01);
    let mut b = Tensor::<f64>::zeros(vec![classes]);
    let lr = 0.5;
    for _ in 0..steps {
        let mut g = Graph::new();
        let xs = g.constant(train_x.clone());
        let ys = g.constant(train_y.clone());
        let wv = g.leaf(w.clone().requires_grad());
        let bv = g.leaf(b.clone().requires_grad());
        let logits = g.linear(xs, wv, bv)?;
        let probs = g.softmax(logits)?;
        let logp = g.log(probs)?;
        let picked = g.mul(logp, ys)?;
        let total = g.sum(picked)?;
        let loss = g.scalar_mul(total, -1.0 / half as f64)?;
        g.backward(loss)?;
        let gw = g.grad(wv).expect("w gradient").to_vec();
        let gb = g.grad(bv).expect("b gradient").to_vec();
        for (p, d) in w.data_mut().iter_mut().zip(gw.iter()) {
            *p -= lr * d;
        }
        for (p, d) in b.data_mut().iter_mut().zip(gb.iter()) {
            *p -= lr * d;
        }
    }

    let mut correct = 0usize;
    for i in half..n {
        let mut best = (0usize, f64::NEG_INFINITY);
        for k in 0..classes {
            let mut z = b.data()[k];
            for d in 0..dim {
                z += features[i][d] as f64 * w.data()[d * classes + k];
            }
            if z > best.1 {
                best = (k, z);
            }
        }
        if best.0 == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / (n - half) as f64)
}
