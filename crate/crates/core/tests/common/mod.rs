//! Shared fixtures: a catalog of gradient checks over every layer type.
#![allow(dead_code)]

pub mod fixture;

use adaptts::tensorcore::nn::{self, AttentionWeights};
use adaptts::tensorcore::{grad_check, BatchNormState, Differentiable, Graph, Mode, Scalar, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Folds an arbitrary output into a scalar with fixed, non-uniform weights so
/// every output element contributes a distinct gradient.
pub fn project<T: Scalar>(g: &mut Graph<T>, out: Var) -> Result<Var, TensorError> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7391 + 0.3).sin()).collect();
    let w = g.constant(Tensor::from_f64_slice(shape, &w)?);
    let y = g.mul(out, w)?;
    Ok(g.sum(y))
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub check: Box<dyn Fn(&[Tensor<f64>], bool) -> Result<f64, TensorError>>,
}

macro_rules! case {
    ($name:expr, [$($shape:expr),*], |$g:ident, $v:ident| $body:expr) => {{
        struct F;
        impl Differentiable for F {
            fn eval<T: Scalar>(&self, $g: &mut Graph<T>, $v: &[Var]) -> Result<Var, TensorError> {
                let out: Var = $body;
                project($g, out)
            }
        }
        Case {
            name: $name,
            shapes: vec![$($shape.to_vec()),*],
            check: Box::new(|inputs, double| {
                if double {
                    grad_check::<f64, _>(&F, inputs, 1e-3)
                } else {
                    grad_check::<f32, _>(&F, inputs, 1e-3)
                }
            }),
        }
    }};
}

// The key bias adds the same score to every key, so its gradient is exactly
// zero and a relative comparison against it only measures rounding noise.
fn attn<T: Scalar>(g: &mut Graph<T>, v: &[Var]) -> Result<Var, TensorError> {
    let bk = g.constant(Tensor::from_f64_slice(vec![4], &[0.1, -0.2, 0.3, 0.05])?);
    let w = AttentionWeights {
        wq: v[1],
        bq: v[2],
        wk: v[3],
        bk,
        wv: v[4],
        bv: v[5],
        wo: v[6],
        bo: v[7],
    };
    nn::multi_head_attention(g, v[0], &w, 2)
}

/// Gradient checks for every primitive and fused layer of the tensor engine.
pub fn primitive_cases() -> Vec<Case> {
    vec![
        case!("matmul", [[3, 4], [4, 2]], |g, v| g.matmul(v[0], v[1])?),
        case!("add_broadcast", [[3, 4], [4]], |g, v| g.add(v[0], v[1])?),
        case!("sub", [[3, 4], [3, 4]], |g, v| g.sub(v[0], v[1])?),
        case!("mul_broadcast", [[3, 4], [4]], |g, v| g.mul(v[0], v[1])?),
        case!("scale", [[5]], |g, v| g.scale(v[0], -1.7)),
        case!("concat_last", [[3, 2], [3, 3]], |g, v| g.concat_last(&[v[0], v[1]])?),
        case!("relu", [[4, 5]], |g, v| g.relu(v[0])),
        case!("sigmoid", [[4, 5]], |g, v| g.sigmoid(v[0])),
        case!("abs", [[4, 5]], |g, v| g.abs(v[0])),
        case!("square", [[4, 5]], |g, v| g.square(v[0])),
        case!("swish", [[4, 5]], |g, v| g.swish(v[0])?),
        case!("softmax_last", [[3, 5]], |g, v| g.softmax_last(v[0])),
        case!("log_softmax_last", [[3, 5]], |g, v| g.log_softmax_last(v[0])),
        case!("mean", [[3, 5]], |g, v| {
            let s = g.square(v[0]);
            g.mean(s)
        }),
        case!("sum", [[3, 5]], |g, v| {
            let s = g.square(v[0]);
            g.sum(s)
        }),
        case!("transpose", [[3, 5]], |g, v| g.transpose(v[0])?),
        case!("embedding", [[6, 3]], |g, v| g.embedding(v[0], &[4, 0, 4, 2])?),
        case!("slice_last", [[3, 6]], |g, v| g.slice_last(v[0], 1, 4)?),
        case!("repeat_rows", [[4]], |g, v| g.repeat_rows(v[0], 3)?),
        case!("linear", [[3, 4], [4, 5], [5]], |g, v| nn::linear(g, v[0], v[1], v[2])?),
        case!("layer_norm", [[3, 6], [6], [6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)?),
        case!("batch_norm_train", [[6, 4], [4], [4]], |g, v| {
            let mut st = BatchNormState::new(4, T::from_f64(0.1));
            g.batch_norm_1d(v[0], v[1], v[2], &mut st, Mode::Train, 1e-5)?
        }),
        case!("batch_norm_infer", [[6, 4], [4], [4]], |g, v| {
            let mut st = BatchNormState::new(4, T::from_f64(0.1));
            st.running_mean = vec![T::from_f64(0.2); 4];
            st.running_var = vec![T::from_f64(1.5); 4];
            g.batch_norm_1d(v[0], v[1], v[2], &mut st, Mode::Infer, 1e-5)?
        }),
        case!("conv1d", [[5, 3], [3, 3, 4], [4]], |g, v| g.conv1d(v[0], v[1], v[2])?),
        case!("depthwise_conv1d", [[5, 3], [3, 3], [3]], |g, v| g.depthwise_conv1d(v[0], v[1], v[2])?),
        case!(
            "multi_head_attention",
            [[4, 4], [4, 4], [4], [4, 4], [4, 4], [4], [4, 4], [4]],
            |g, v| attn(g, v)?
        ),
    ]
}

/// Runs `case` at `points` random points and returns the worst error.
pub fn run_case(case: &Case, points: usize, double: bool, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|s| random_tensor(&mut rng, s, 1.0)).collect();
        let err = (case.check)(&inputs, double).unwrap_or_else(|e| panic!("{}: {e}", case.name));
        worst = worst.max(err);
    }
    worst
}
