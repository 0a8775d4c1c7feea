//! Composite layers built from graph primitives.

use rand::Rng;

use super::{Graph, Mode, Scalar, Tensor, TensorError, Var};

/// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Projection weights of a self-attention layer; all square `[d, d]` plus `[d]` biases.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Full (non-causal) scaled dot-product self-attention over `x: [time, d]`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: &AttentionWeights,
    n_heads: usize,
) -> Result<Var, TensorError> {
    let d = *g.shape(x).last().unwrap_or(&0);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(TensorError::Config(format!(
            "attention width {d} is not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(g, x, w.wq, w.bq)?;
    let k = linear(g, x, w.wk, w.bk)?;
    let v = linear(g, x, w.wv, w.bv)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_last(q, lo, hi)?;
        let kh = g.slice_last(k, lo, hi)?;
        let vh = g.slice_last(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_last(scores);
        heads.push(g.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_last(&heads)?
    };
    linear(g, merged, w.wo, w.bo)
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` at train time so
/// inference is an exact identity.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let n = g.value(x).numel();
    let mask: Vec<T> = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let mask = g.constant(Tensor::new(g.shape(x).to_vec(), mask)?);
    g.mul(x, mask)
}

/// Sinusoidal absolute position table `[n, d]`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
            let angle = t as f64 * freq;
            out[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye(g: &mut Graph<f64>, d: usize) -> Var {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        g.constant(Tensor::new(vec![d, d], data).unwrap())
    }

    fn zeros(g: &mut Graph<f64>, d: usize) -> Var {
        g.constant(Tensor::zeros(vec![d]).unwrap())
    }

    fn identity_weights(g: &mut Graph<f64>, d: usize) -> AttentionWeights {
        AttentionWeights {
            wq: eye(g, d),
            bq: zeros(g, d),
            wk: eye(g, d),
            bk: zeros(g, d),
            wv: eye(g, d),
            bv: zeros(g, d),
            wo: eye(g, d),
            bo: zeros(g, d),
        }
    }

    #[test]
    fn single_position_attends_to_itself() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let w = identity_weights(&mut g, 4);
        let y = multi_head_attention(&mut g, x, &w, 2).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn zero_queries_give_uniform_average() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap());
        let mut w = identity_weights(&mut g, 2);
        let zero = g.constant(Tensor::zeros(vec![2, 2]).unwrap());
        w.wq = zero;
        let y = multi_head_attention(&mut g, x, &w, 1).unwrap();
        for r in 0..3 {
            assert!((g.data(y)[r * 2] - 3.0).abs() < 1e-12);
            assert!((g.data(y)[r * 2 + 1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_scalar_attention_oracle() {
        // time=2, d=2, one head, identity projections.
        let xs = [[0.5, -1.0], [2.0, 0.25]];
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 2], xs.concat()).unwrap());
        let w = identity_weights(&mut g, 2);
        let y = multi_head_attention(&mut g, x, &w, 1).unwrap();
        let scale = 1.0 / 2f64.sqrt();
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (xs[i][0] * xs[j][0] + xs[i][1] * xs[j][1]) * scale)
                .collect();
            let z = s[0].exp() + s[1].exp();
            let a = [s[0].exp() / z, s[1].exp() / z];
            for c in 0..2 {
                let expect = a[0] * xs[0][c] + a[1] * xs[1][c];
                assert!((g.data(y)[i * 2 + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let w = identity_weights(&mut g, 3);
        assert!(matches!(
            multi_head_attention(&mut g, x, &w, 2),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap());
        let y = dropout(&mut g, x, 0.1, Mode::Infer, &mut rng).unwrap();
        assert_eq!(g.data(y), g.data(x));
        let y = dropout(&mut g, x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.data(y), g.data(x));
        assert!(dropout(&mut g, x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(vec![100_000]).unwrap());
        let y = dropout(&mut g, x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean: f64 = g.data(y).iter().map(|&v| v as f64).sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }
}
