mod common;

use adaptts::tensorcore::{
    grad_check, load_checkpoint, save_checkpoint, BatchNormState, CheckpointError, Differentiable, Graph, Mode,
    ParamStore, Scalar, Tensor, TensorError, Var,
};
use proptest::prelude::*;

fn vec1(g: &mut Graph<f32>, data: &[f32], grad: bool) -> Var {
    g.leaf(Tensor::from_vec(data.to_vec()).with_requires_grad(grad))
}

#[test]
fn relu_forward_and_subgradient() {
    let mut g = Graph::<f32>::new();
    let x = vec1(&mut g, &[-1.0, 0.0, 2.0], true);
    let y = g.relu(x);
    assert_eq!(g.data(y), &[0.0, 0.0, 2.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn scalar_matmul_product_rule() {
    let mut g = Graph::<f32>::new();
    let a = g.param(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
    let b = g.param(Tensor::new(vec![1, 1], vec![4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.data(c), &[12.0]);
    g.backward(c).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[4.0]);
    assert_eq!(g.grad(b).unwrap(), &[3.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f32>::new();
    let x = vec1(&mut g, &[0.0, 0.0], false);
    let y = g.softmax_last(x);
    assert_eq!(g.data(y), &[0.5, 0.5]);
}

#[test]
fn gradients_accumulate_across_uses() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_vec(vec![2.0]));
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    g.backward(z).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[5.0]);
}

#[test]
fn non_grad_tensors_get_no_gradient() {
    let mut g = Graph::<f32>::new();
    let w = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let c = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let y = g.mul(w, c).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(w).unwrap(), &[3.0, 4.0]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
    let b = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::Dimension {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("matmul"));
    let c = g.constant(Tensor::zeros(vec![4]).unwrap());
    assert!(matches!(g.add(a, c), Err(TensorError::Dimension { op: "add", .. })));
}

#[test]
fn backward_needs_scalar_root() {
    let mut g = Graph::<f32>::new();
    let a = g.param(Tensor::zeros(vec![2]).unwrap());
    assert!(matches!(g.backward(a), Err(TensorError::Contract(_))));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant(Tensor::ones(vec![2]).unwrap());
    let bias = g.constant(Tensor::zeros(vec![2]).unwrap());

    let x = g.constant(Tensor::from_vec(vec![1.0, -1.0]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    assert!((g.data(y)[0] - 1.0).abs() < 1e-9 && (g.data(y)[1] + 1.0).abs() < 1e-9);

    let x = g.constant(Tensor::from_vec(vec![7.5, 7.5]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.data(y), &[0.0, 0.0]);

    let x = g.constant(Tensor::from_vec(vec![2.0, 4.0]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    // mean 3, variance 1: (x - 3) / sqrt(1 + 1e-5)
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((g.data(y)[0] + expect).abs() < 1e-12);
    assert!((g.data(y)[1] - expect).abs() < 1e-12);
}

#[test]
fn layer_norm_rejects_width_one() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![3, 1]).unwrap());
    let p = g.constant(Tensor::ones(vec![1]).unwrap());
    assert!(matches!(
        g.layer_norm(x, p, p, 1e-5),
        Err(TensorError::DegenerateDimension { dim: 1, .. })
    ));
}

#[test]
fn batch_norm_examples() {
    let mut g = Graph::<f32>::new();
    let gain = g.constant(Tensor::ones(vec![2]).unwrap());
    let bias = g.constant(Tensor::zeros(vec![2]).unwrap());
    let x = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]).unwrap());

    let mut frozen = BatchNormState::new(2, 0.1f32);
    frozen.running_mean = vec![0.3, -0.7];
    frozen.frozen_stats = true;
    let before = frozen.clone();
    g.batch_norm_1d(x, gain, bias, &mut frozen, Mode::Train, 1e-5).unwrap();
    assert_eq!(frozen.running_mean, before.running_mean);
    assert_eq!(frozen.running_var, before.running_var);

    let mut st = BatchNormState::new(2, 0.1f32);
    st.running_mean = vec![0.5, -2.0];
    st.running_var = vec![2.0, 0.5];
    let at_mean = g.constant(Tensor::new(vec![1, 2], vec![0.5, -2.0]).unwrap());
    let y = g.batch_norm_1d(at_mean, gain, bias, &mut st, Mode::Infer, 1e-5).unwrap();
    assert!(g.data(y).iter().all(|v| v.abs() < 1e-7));

    let mut ema = BatchNormState::new(1, 0.1f64);
    let mut g64 = Graph::<f64>::new();
    let ones = g64.constant(Tensor::ones(vec![1]).unwrap());
    let zero = g64.constant(Tensor::zeros(vec![1]).unwrap());
    let batch = g64.constant(Tensor::new(vec![4, 1], vec![0.0, 2.0, 1.0, 1.0]).unwrap());
    g64.batch_norm_1d(batch, ones, zero, &mut ema, Mode::Train, 1e-5).unwrap();
    assert!((ema.running_mean[0] - 0.1).abs() < 1e-15);
}

#[test]
fn conv1d_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let k = g.constant(Tensor::new(vec![3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap());
    let b = g.constant(Tensor::zeros(vec![1]).unwrap());
    let y = g.conv1d(x, k, b).unwrap();
    assert_eq!(g.data(y), &[3.0, 6.0, 5.0]);

    let x2 = g.constant(Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap());
    let eye = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b2 = g.constant(Tensor::zeros(vec![2]).unwrap());
    let y = g.conv1d(x2, eye, b2).unwrap();
    assert_eq!(g.data(y), g.data(x2));

    let zk = g.constant(Tensor::zeros(vec![3, 2, 2]).unwrap());
    let bias = g.constant(Tensor::from_vec(vec![0.25, -1.5]));
    let y = g.conv1d(x2, zk, bias).unwrap();
    assert_eq!(g.data(y), &[0.25, -1.5, 0.25, -1.5]);

    let even = g.constant(Tensor::zeros(vec![2, 2, 2]).unwrap());
    assert_eq!(g.conv1d(x2, even, b2).unwrap_err(), TensorError::UnsupportedKernel { k: 2 });
}

struct SumOf;
impl Differentiable for SumOf {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var, TensorError> {
        Ok(g.sum(v[0]))
    }
}

struct SumRelu;
impl Differentiable for SumRelu {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var, TensorError> {
        let r = g.relu(v[0]);
        Ok(g.sum(r))
    }
}

struct NotScalar;
impl Differentiable for NotScalar {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var, TensorError> {
        Ok(g.relu(v[0]))
    }
}

#[test]
fn grad_check_examples() {
    let x = Tensor::from_vec(vec![0.3, -1.2, 2.5, -0.7]);
    assert!(grad_check::<f32, _>(&SumOf, &[x.clone()], 1e-3).unwrap() < 1e-6);
    assert!(grad_check::<f32, _>(&SumRelu, &[x.clone()], 1e-3).unwrap() < 1e-3);
    assert!(matches!(
        grad_check::<f32, _>(&NotScalar, &[x.clone()], 1e-3),
        Err(TensorError::Contract(_))
    ));
    assert!(matches!(grad_check::<f32, _>(&SumOf, &[x], 0.5), Err(TensorError::Config(_))));
}

#[test]
fn every_primitive_passes_grad_check() {
    for case in common::primitive_cases() {
        let single = common::run_case(&case, 20, false, 11);
        let double = common::run_case(&case, 20, true, 11);
        assert!(single < 1e-3, "{} single precision error {single}", case.name);
        assert!(double < 1e-6, "{} double precision error {double}", case.name);
    }
}

#[test]
fn checkpoint_file_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut s = ParamStore::new();
    s.insert("a.w", Tensor::new(vec![2, 2], vec![1.0, f32::EPSILON, -3.0, 1e-30]).unwrap(), true)
        .unwrap();
    save_checkpoint(&s, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert!(back.tensor("a.w").unwrap().bits_eq(s.tensor("a.w").unwrap()));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Checksum)));
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing")),
        Err(CheckpointError::Io { .. })
    ));
}

proptest! {
    #[test]
    fn layer_norm_normalizes(data in proptest::collection::vec(-50.0f64..50.0, 8..40)) {
        let d = data.len();
        let spread = data.iter().cloned().fold(f64::MIN, f64::max) - data.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-1);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(data));
        let gain = g.constant(Tensor::ones(vec![d]).unwrap());
        let bias = g.constant(Tensor::zeros(vec![d]).unwrap());
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let out = g.data(y);
        let mean = out.iter().sum::<f64>() / d as f64;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        prop_assert!(mean.abs() < 1e-5);
        prop_assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn checkpoint_round_trip_any_store(values in proptest::collection::vec(proptest::num::f32::ANY, 1..64), trainable: bool) {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::from_vec(values), trainable).unwrap();
        let back = adaptts::tensorcore::read_checkpoint(&adaptts::tensorcore::write_checkpoint(&s).unwrap()).unwrap();
        prop_assert!(back.tensor("x").unwrap().bits_eq(s.tensor("x").unwrap()));
        prop_assert_eq!(back.is_trainable("x"), trainable);
    }
}
