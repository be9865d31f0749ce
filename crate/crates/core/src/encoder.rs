//! The feature encoder: an MLP (or bare linear map) with handwritten exact
//! reverse-mode gradients, Adam, and checkpointing.
//!
//! The architecture is deliberately closed: affine layers with a leaky
//! rectifier between them and a linear head. Gradients are derived by hand
//! for exactly this family, which keeps them testable against finite
//! differences instead of trusting a graph engine.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

/// Leaky slope between encoder layers. Chosen once; small enough to behave
/// like a rectifier, nonzero so no unit can die during long runs.
pub const ENCODER_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderArch {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_style: usize,
    pub output_content: usize,
    pub activation_slope: f64,
    pub linear_only: bool,
}

impl EncoderArch {
    /// MLP with the given hidden stack.
    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, style: usize, content: usize) -> Self {
        EncoderArch {
            input_dim,
            hidden_dims,
            output_style: style,
            output_content: content,
            activation_slope: ENCODER_SLOPE,
            linear_only: false,
        }
    }

    /// Single affine map, the linear ablation of the encoder.
    pub fn linear(input_dim: usize, style: usize, content: usize) -> Self {
        EncoderArch {
            input_dim,
            hidden_dims: Vec::new(),
            output_style: style,
            output_content: content,
            activation_slope: ENCODER_SLOPE,
            linear_only: true,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.output_style + self.output_content
    }

    /// Widths of every activation, input first, output last.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim());
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("encoder input width is zero".into()));
        }
        if self.output_style == 0 {
            return Err(Error::InvalidConfig(
                "encoder style output width is zero".into(),
            ));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("zero-width hidden layer".into()));
        }
        if self.linear_only && !self.hidden_dims.is_empty() {
            return Err(Error::InvalidConfig(
                "linear encoder cannot have hidden layers".into(),
            ));
        }
        if !self.activation_slope.is_finite() || self.activation_slope < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "bad activation slope {}",
                self.activation_slope
            )));
        }
        Ok(())
    }
}

/// One affine layer; weights are out×in, applied as x·Wᵀ + b.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        DenseLayer {
            weights: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub arch: EncoderArch,
    pub layers: Vec<DenseLayer>,
}

/// Per-parameter gradients, shaped exactly like the parameters.
pub type EncoderGrads = Vec<DenseLayer>;

impl EncoderParams {
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.is_finite())
    }

    pub fn zeros_like(&self) -> EncoderGrads {
        self.layers
            .iter()
            .map(|l| DenseLayer::zeros(l.weights.rows(), l.weights.cols()))
            .collect()
    }

    /// All parameters as one vector, layer by layer, weights row-major then
    /// bias. This order is the checkpoint blob order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(arch: &EncoderArch, flat: &[f64]) -> Result<Self> {
        arch.validate()?;
        let dims = arch.layer_dims();
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut at = 0usize;
        for w in dims.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            let need = out_dim * in_dim + out_dim;
            if at + need > flat.len() {
                return Err(Error::Format(format!(
                    "parameter blob too short: wanted {} more values at {}",
                    need, at
                )));
            }
            let weights =
                Matrix::from_vec(out_dim, in_dim, flat[at..at + out_dim * in_dim].to_vec());
            at += out_dim * in_dim;
            let bias = flat[at..at + out_dim].to_vec();
            at += out_dim;
            layers.push(DenseLayer { weights, bias });
        }
        if at != flat.len() {
            return Err(Error::Format(format!(
                "parameter blob has {} extra values",
                flat.len() - at
            )));
        }
        Ok(EncoderParams {
            arch: arch.clone(),
            layers,
        })
    }
}

/// Fan-in-scaled uniform initialization: every weight and bias of a layer is
/// drawn from U(−b, b) with b = √(1/fan_in). Deterministic given the stream.
pub fn init_encoder(arch: &EncoderArch, rng: &mut RngStream) -> Result<EncoderParams> {
    arch.validate()?;
    let dims = arch.layer_dims();
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        let (in_dim, out_dim) = (w[0], w[1]);
        let bound = (1.0 / in_dim as f64).sqrt();
        let mut draw = || (2.0 * rng.random::<f64>() - 1.0) * bound;
        let mut weights = Matrix::zeros(out_dim, in_dim);
        for i in 0..out_dim {
            for j in 0..in_dim {
                weights.set(i, j, draw());
            }
        }
        let bias: Vec<f64> = (0..out_dim).map(|_| draw()).collect();
        layers.push(DenseLayer { weights, bias });
    }
    Ok(EncoderParams {
        arch: arch.clone(),
        layers,
    })
}

/// Forward intermediates: the activation entering each layer, then the
/// output. Hidden masks are recovered from post-activation signs (the leaky
/// slope is positive, so signs survive the nonlinearity).
#[derive(Debug)]
pub struct Tape {
    activations: Vec<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("tape is never empty")
    }

    pub fn batch_rows(&self) -> usize {
        self.activations[0].rows()
    }
}

fn affine(input: &Matrix, layer: &DenseLayer) -> Matrix {
    let mut out = input.matmul_nt(&layer.weights);
    for i in 0..out.rows() {
        for (v, b) in out.row_mut(i).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    out
}

fn leaky_inplace(m: &mut Matrix, slope: f64) {
    for v in m.data_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Applies the network and keeps the intermediates backward needs.
pub fn forward(params: &EncoderParams, input: &Matrix) -> Result<(Matrix, Tape)> {
    let tape = run_forward(params, input, true)?;
    let output = tape.output().clone();
    Ok((output, tape))
}

/// Applies the network without recording; for evaluation and no-gradient
/// context embeddings.
pub fn forward_no_tape(params: &EncoderParams, input: &Matrix) -> Result<Matrix> {
    let tape = run_forward(params, input, false)?;
    Ok(tape.activations.into_iter().last().expect("nonempty"))
}

fn run_forward(params: &EncoderParams, input: &Matrix, keep: bool) -> Result<Tape> {
    if input.cols() != params.arch.input_dim {
        return Err(Error::DimensionMismatch {
            op: "encoder forward",
            detail: format!(
                "input width {} but encoder expects {}",
                input.cols(),
                params.arch.input_dim
            ),
        });
    }
    let slope = params.arch.activation_slope;
    let last = params.layers.len() - 1;
    let mut activations: Vec<Matrix> = Vec::with_capacity(if keep { last + 2 } else { 1 });
    let mut current = input.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut next = affine(&current, layer);
        if l < last {
            leaky_inplace(&mut next, slope);
        }
        if keep {
            activations.push(current);
        }
        current = next;
    }
    if !current.is_finite() {
        return Err(Error::NonFinite {
            op: "encoder forward",
        });
    }
    activations.push(current);
    Ok(Tape { activations })
}

/// Exact gradients of sum(grad_output ⊙ output) with respect to every
/// parameter. The tape must come from the matching forward.
pub fn backward(
    params: &EncoderParams,
    tape: &Tape,
    grad_output: &Matrix,
) -> Result<EncoderGrads> {
    if tape.activations.len() != params.layers.len() + 1 {
        return Err(Error::DimensionMismatch {
            op: "encoder backward",
            detail: format!(
                "tape has {} activations for {} layers",
                tape.activations.len(),
                params.layers.len()
            ),
        });
    }
    let out = tape.output();
    if grad_output.rows() != out.rows() || grad_output.cols() != out.cols() {
        return Err(Error::DimensionMismatch {
            op: "encoder backward",
            detail: format!(
                "upstream gradient is {}x{}, output is {}x{}",
                grad_output.rows(),
                grad_output.cols(),
                out.rows(),
                out.cols()
            ),
        });
    }
    let slope = params.arch.activation_slope;
    let mut grads = params.zeros_like();
    let mut grad_pre = grad_output.clone();
    for l in (0..params.layers.len()).rev() {
        let layer_input = &tape.activations[l];
        // d/dW of x·Wᵀ contributes gradᵀ·x; bias collects column sums.
        grads[l].weights = grad_pre.matmul_tn(layer_input);
        for i in 0..grad_pre.rows() {
            for (b, g) in grads[l].bias.iter_mut().zip(grad_pre.row(i)) {
                *b += g;
            }
        }
        if l > 0 {
            let mut grad_input = grad_pre.matmul(&params.layers[l].weights);
            // layer_input is the post-activation of layer l-1; its sign is
            // the pre-activation's sign, so it selects the leaky branch.
            for i in 0..grad_input.rows() {
                let acts = layer_input.row(i);
                for (g, a) in grad_input.row_mut(i).iter_mut().zip(acts) {
                    if *a < 0.0 {
                        *g *= slope;
                    }
                }
            }
            grad_pre = grad_input;
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<DenseLayer>,
    second: Vec<DenseLayer>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &EncoderParams) -> Self {
        AdamState {
            config,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }
}

/// One Adam update with bias correction. Deterministic in (state, params,
/// grads); both are advanced in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut EncoderParams,
    grads: &EncoderGrads,
) -> Result<()> {
    if grads.len() != params.layers.len() {
        return Err(Error::DimensionMismatch {
            op: "adam_step",
            detail: format!(
                "{} gradient layers for {} parameter layers",
                grads.len(),
                params.layers.len()
            ),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c = &state.config;
    let correction1 = 1.0 - c.beta1.powi(t);
    let correction2 = 1.0 - c.beta2.powi(t);
    for (l, grad) in grads.iter().enumerate() {
        let update = |theta: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *theta -= c.lr * m_hat / (v_hat.sqrt() + c.epsilon);
        };
        let w = params.layers[l].weights.data_mut();
        let mw = state.first[l].weights.data_mut();
        let vw = state.second[l].weights.data_mut();
        for i in 0..w.len() {
            update(&mut w[i], &mut mw[i], &mut vw[i], grad.weights.data()[i]);
        }
        let b = &mut params.layers[l].bias;
        let mb = &mut state.first[l].bias;
        let vb = &mut state.second[l].bias;
        for i in 0..b.len() {
            update(&mut b[i], &mut mb[i], &mut vb[i], grad.bias[i]);
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite { op: "adam_step" });
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    arch: EncoderArch,
    step: u64,
    seed: u64,
    param_count: usize,
}

/// Writes `encoder.ckpt`: a length-prefixed JSON manifest followed by the
/// little-endian 64-bit parameter blob in flatten order.
pub fn save_checkpoint(path: &Path, params: &EncoderParams, step: u64, seed: u64) -> Result<()> {
    let manifest = CheckpointManifest {
        arch: params.arch.clone(),
        step,
        seed,
        param_count: params.param_count(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for v in params.flatten() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint back; returns the parameters with the recorded step
/// and seed.
pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams, u64, u64)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let json_len = u64::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; json_len];
    file.read_exact(&mut json)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&json)?;
    let mut blob = Vec::new();
    file.read_to_end(&mut blob)?;
    if blob.len() != manifest.param_count * 8 {
        return Err(Error::Format(format!(
            "checkpoint blob holds {} bytes, manifest promises {}",
            blob.len(),
            manifest.param_count * 8
        )));
    }
    let flat: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = EncoderParams::unflatten(&manifest.arch, &flat)?;
    Ok((params, manifest.step, manifest.seed))
}
