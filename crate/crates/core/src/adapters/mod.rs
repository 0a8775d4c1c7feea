//! Residual bottleneck adapters, their insertion sites in the backbone,
//! parameter accounting and the per-speaker pack artifact.

mod pack;

use rand::Rng;
use thiserror::Error;

use crate::backbone::{BackboneConfig, Forward, ModelError, LN_EPS, VARIANCE_HEADS};
use crate::tensorcore::nn::dropout;
use crate::tensorcore::{CheckpointError, Graph, Mode, ParamStore, Scalar, Tensor, TensorError, Var};

pub use pack::{load_pack, read_pack, save_pack, write_pack, AdapterPack, PACK_MAGIC, PACK_VERSION};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("bottleneck r={r} must satisfy 1 <= r <= d={d}")]
    Bottleneck { d: usize, r: usize },
    #[error("pack fingerprint {found} does not match backbone fingerprint {expected}")]
    Fingerprint { expected: String, found: String },
    #[error(transparent)]
    Container(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("malformed pack: {0}")]
    Malformed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Field names of one adapter, as stored under `adapter.<site>.`.
pub const ADAPTER_FIELDS: [&str; 6] = ["ln_gain", "ln_bias", "w_down", "b_down", "w_up", "b_up"];

/// Concrete weights of one residual adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualAdapter {
    pub d: usize,
    pub r: usize,
    pub ln_gain: Tensor<f32>,
    pub ln_bias: Tensor<f32>,
    pub w_down: Tensor<f32>,
    pub b_down: Tensor<f32>,
    pub w_up: Tensor<f32>,
    pub b_up: Tensor<f32>,
    pub dropout_rate: f64,
}

/// `3d + 2dr + r`: layer-norm gain and bias, down projection with bias, up
/// projection with bias.
pub fn adapter_param_count(d: usize, r: usize) -> usize {
    3 * d + 2 * d * r + r
}

impl ResidualAdapter {
    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<f32>); 6] {
        [
            ("ln_gain", &self.ln_gain),
            ("ln_bias", &self.ln_bias),
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
        ]
    }

    /// Registers the weights as `adapter.<site>.<field>`.
    pub fn insert_into(&self, store: &mut ParamStore, site: &str, trainable: bool) -> Result<(), TensorError> {
        for (field, t) in self.tensors() {
            store.insert(site_param(site, field), t.clone(), trainable)?;
        }
        Ok(())
    }
}

pub fn site_param(site: &str, field: &str) -> String {
    format!("adapter.{site}.{field}")
}

/// Layer-norm identity, `w_down ~ U(+-sqrt(6 / (d + r)))`, zero up projection:
/// the adapter starts as an exact identity.
pub fn init_adapter<R: Rng + ?Sized>(d: usize, r: usize, rng: &mut R) -> Result<ResidualAdapter, AdapterError> {
    if r == 0 || r > d {
        return Err(AdapterError::Bottleneck { d, r });
    }
    let bound = (6.0 / (d + r) as f64).sqrt();
    let w_down = (0..d * r).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    Ok(ResidualAdapter {
        d,
        r,
        ln_gain: Tensor::ones(vec![d])?,
        ln_bias: Tensor::zeros(vec![d])?,
        w_down: Tensor::new(vec![d, r], w_down)?,
        b_down: Tensor::zeros(vec![r])?,
        w_up: Tensor::zeros(vec![r, d])?,
        b_up: Tensor::zeros(vec![d])?,
        dropout_rate: 0.1,
    })
}

/// Graph handles of one adapter's weights.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub w_down: Var,
    pub b_down: Var,
    pub w_up: Var,
    pub b_up: Var,
}

/// `h + dropout(relu(LN(h) W_down + b_down) W_up + b_up)`; dropout only in
/// train mode.
pub fn adapter_forward<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    h: Var,
    a: &AdapterVars,
    dropout_rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, TensorError> {
    let d = *g.shape(h).last().expect("non-empty shape");
    if g.shape(a.ln_gain) != [d] {
        return Err(TensorError::Dimension {
            op: "adapter_forward",
            lhs: g.shape(h).to_vec(),
            rhs: g.shape(a.ln_gain).to_vec(),
        });
    }
    let x = g.layer_norm(h, a.ln_gain, a.ln_bias, LN_EPS)?;
    let x = g.matmul(x, a.w_down)?;
    let x = g.add(x, a.b_down)?;
    let x = g.relu(x);
    let x = g.matmul(x, a.w_up)?;
    let x = g.add(x, a.b_up)?;
    let x = dropout(g, x, dropout_rate, mode, rng)?;
    g.add(h, x)
}

/// Applies the adapter at `site` if the forward pass can see its weights;
/// otherwise returns `h` untouched.
pub fn apply_site<T: Scalar>(f: &mut Forward<'_, T>, site: &str, h: Var) -> Result<Var, ModelError> {
    if !f.has(&site_param(site, "w_down")) {
        return Ok(h);
    }
    let mut p = |field: &str| f.param(&site_param(site, field));
    let vars = AdapterVars {
        ln_gain: p("ln_gain")?,
        ln_bias: p("ln_bias")?,
        w_down: p("w_down")?,
        b_down: p("b_down")?,
        w_up: p("w_up")?,
        b_up: p("b_up")?,
    };
    let (rate, mode) = (f.adapter_dropout, f.mode);
    Ok(adapter_forward(&mut f.g, h, &vars, rate, mode, &mut f.rng)?)
}

/// Insertion sites with their widths: one after every decoder block, and
/// optionally one after each hidden sublayer of every variance head.
pub fn enumerate_sites(cfg: &BackboneConfig, variance: bool) -> Vec<(String, usize)> {
    let mut sites: Vec<(String, usize)> = (0..cfg.n_decoder_layers)
        .map(|i| (format!("decoder.{i}"), cfg.d_model))
        .collect();
    if variance {
        for head in VARIANCE_HEADS {
            for j in 0..2 {
                sites.push((format!("variance.{head}.{j}"), cfg.variance_hidden));
            }
        }
    }
    sites
}

/// Fresh adapters for every site, registered under `adapter.` in a new store.
/// Decoder sites use bottleneck `r_decoder`, variance sites `r_variance`.
pub fn insert_adapters<R: Rng + ?Sized>(
    cfg: &BackboneConfig,
    variance_sites: bool,
    r_decoder: usize,
    r_variance: usize,
    rng: &mut R,
) -> Result<(Vec<String>, ParamStore), AdapterError> {
    let mut store = ParamStore::new();
    let mut names = Vec::new();
    for (site, width) in enumerate_sites(cfg, variance_sites) {
        let r = if site.starts_with("decoder.") { r_decoder } else { r_variance };
        let a = init_adapter(width, r, rng)?;
        a.insert_into(&mut store, &site, true)?;
        names.push(site);
    }
    Ok((names, store))
}

/// `(n_sites * (3d + 2dr + r), 100 * count / backbone_total)`.
pub fn count_adapter_params(d: usize, r: usize, n_sites: usize, backbone_total: usize) -> (usize, f64) {
    let count = n_sites * adapter_param_count(d, r);
    (count, 100.0 * count as f64 / backbone_total as f64)
}
