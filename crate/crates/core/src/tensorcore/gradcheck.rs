//! Finite-difference verification of autodiff gradients.

use super::{Graph, Scalar, Tensor, TensorError, Var};

/// A scalar-valued function that can be built in any graph precision.
pub trait Differentiable {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var, TensorError>;
}

/// Largest step reduction applied when a stencil straddles a ReLU/abs kink.
const MAX_SHRINKS: usize = 4;

/// Compares the autodiff gradient (graph in precision `T`) against central
/// finite differences and returns
/// `max |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)` over all input elements.
///
/// The finite differences use a fourth-order five-point stencil evaluated in
/// `f64`, so the reference is limited by truncation, not by the precision of
/// the graph under test. When the activation pattern of any ReLU or abs op
/// changes inside the stencil, the step is quartered (up to four times) so the
/// difference is taken on a single smooth piece.
pub fn grad_check<T: Scalar, F: Differentiable + ?Sized>(
    f: &F,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<f64, TensorError> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(TensorError::Config(format!(
            "grad_check eps must be within [1e-5, 1e-2], got {eps}"
        )));
    }

    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.cast::<T>())).collect();
    let out = f.eval(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            g.shape(out)
        )));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; g.value(v).numel()],
        })
        .collect();

    let evaluate = |xs: &[Tensor<f64>]| -> Result<(f64, u64), TensorError> {
        let mut g = Graph::<f64>::new();
        g.track_kinks(true);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f.eval(&mut g, &vars)?;
        Ok((g.data(out)[0], g.kink_signature()))
    };
    let (_, base_sig) = evaluate(inputs)?;

    let mut worst = 0.0f64;
    let mut point: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            let mut h = eps;
            let mut fd = 0.0;
            for attempt in 0..=MAX_SHRINKS {
                let mut vals = [0.0; 4];
                let mut smooth = true;
                for (slot, offset) in [2.0, 1.0, -1.0, -2.0].iter().enumerate() {
                    point[i].data_mut()[j] = x0 + offset * h;
                    let (v, sig) = evaluate(&point)?;
                    vals[slot] = v;
                    smooth &= sig == base_sig;
                }
                point[i].data_mut()[j] = x0;
                fd = (8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12.0 * h);
                if smooth || attempt == MAX_SHRINKS {
                    break;
                }
                h /= 4.0;
            }
            let ad = analytic[i][j];
            let denom = ad.abs().max(fd.abs()).max(1e-8);
            worst = worst.max((ad - fd).abs() / denom);
        }
    }
    Ok(worst)
}
