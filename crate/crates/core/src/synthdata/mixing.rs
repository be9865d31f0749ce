//! The nonlinear mixing map from (latent, content) to observations.
//!
//! A candidate network is a stack of square leaky-rectified hidden layers on
//! the concatenated input followed by one linear projection to observation
//! space. Candidates are rejection-sampled until they pass an injectivity
//! screen; the screen outcome is recorded so a dataset manifest can state
//! exactly what its mixing network survived.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{
    sample_gaussian_matrix, singular_value_bounds, standard_normal, unit_sphere_sample, Matrix,
    RngStream,
};

/// Leaky slope for hidden layers of the mixing map (the encoder uses its own).
pub const MIXING_SLOPE: f64 = 0.2;
/// Candidate cap for the injectivity rejection loop.
pub const MIXING_REJECTION_CAP: usize = 1000;
/// Relative singular-value floor each weight matrix must clear.
pub const SV_FLOOR: f64 = 1e-3;
/// Probe pairs drawn for the separation screen.
pub const PROBE_PAIRS: usize = 10_000;
/// Minimum output separation relative to input separation.
pub const PROBE_SEPARATION_FLOOR: f64 = 1e-6;
/// The screen battery is fixed so that acceptance is a property of the
/// network alone, not of who asks.
const PROBE_BATTERY_SEED: u64 = 0x5eed_ba77;

#[derive(Debug, Clone)]
pub struct MixingNetwork {
    pub layer_weights: Vec<Matrix>,
    pub layer_biases: Vec<Vec<f64>>,
    pub final_projection: Matrix,
    pub slope: f64,
    pub n_style: usize,
    pub d_content: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InjectivityRecord {
    pub attempts: usize,
    pub probe_pairs: usize,
    pub min_probe_separation_ratio: f64,
    pub min_singular_value_ratio: f64,
}

impl MixingNetwork {
    pub fn input_dim(&self) -> usize {
        self.n_style + self.d_content
    }

    pub fn output_dim(&self) -> usize {
        self.final_projection.rows()
    }

    /// Mixes a batch whose rows are already concatenated [x; c] inputs.
    pub fn mix_batch(&self, inputs: &Matrix) -> Matrix {
        assert_eq!(
            inputs.cols(),
            self.input_dim(),
            "mixing input width mismatch"
        );
        let mut h = inputs.clone();
        for (w, b) in self.layer_weights.iter().zip(&self.layer_biases) {
            let mut next = h.matmul_nt(w);
            for i in 0..next.rows() {
                let row = next.row_mut(i);
                for (v, bias) in row.iter_mut().zip(b) {
                    let pre = *v + bias;
                    *v = if pre >= 0.0 { pre } else { self.slope * pre };
                }
            }
            h = next;
        }
        h.matmul_nt(&self.final_projection)
    }

    /// Mixes a single (latent, content) pair.
    pub fn mix(&self, x: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_style || c.len() != self.d_content {
            return Err(Error::DimensionMismatch {
                op: "mix",
                detail: format!(
                    "got ({}, {}), expected ({}, {})",
                    x.len(),
                    c.len(),
                    self.n_style,
                    self.d_content
                ),
            });
        }
        let mut joint = Vec::with_capacity(self.input_dim());
        joint.extend_from_slice(x);
        joint.extend_from_slice(c);
        let out = self.mix_batch(&Matrix::from_vec(1, self.input_dim(), joint));
        Ok(out.row(0).to_vec())
    }
}

fn draw_candidate(
    n_style: usize,
    d_content: usize,
    hidden_layers: usize,
    obs_dim: usize,
    rng: &mut RngStream,
) -> MixingNetwork {
    let width = n_style + d_content;
    let scale = 1.0 / (width as f64).sqrt();
    let mut layer_weights = Vec::with_capacity(hidden_layers);
    let mut layer_biases = Vec::with_capacity(hidden_layers);
    for _ in 0..hidden_layers {
        layer_weights.push(sample_gaussian_matrix(rng, width, width).scale(scale));
        layer_biases.push((0..width).map(|_| standard_normal(rng) * scale).collect());
    }
    let final_projection = sample_gaussian_matrix(rng, obs_dim, width).scale(scale);
    MixingNetwork {
        layer_weights,
        layer_biases,
        final_projection,
        slope: MIXING_SLOPE,
        n_style,
        d_content,
    }
}

/// Worst probe-pair separation ratio over `pairs` random input pairs drawn
/// from the given stream. Exposed so acceptance can be re-checked on a fresh
/// battery.
pub fn probe_separation_ratio(net: &MixingNetwork, rng: &mut RngStream, pairs: usize) -> f64 {
    let dim = net.input_dim();
    let mut a = Matrix::zeros(pairs, dim);
    let mut b = Matrix::zeros(pairs, dim);
    for i in 0..pairs {
        let x1 = unit_sphere_sample(rng, net.n_style);
        let c1 = unit_sphere_sample(rng, net.d_content);
        let x2 = unit_sphere_sample(rng, net.n_style);
        let c2 = unit_sphere_sample(rng, net.d_content);
        a.row_mut(i)[..net.n_style].copy_from_slice(&x1);
        a.row_mut(i)[net.n_style..].copy_from_slice(&c1);
        b.row_mut(i)[..net.n_style].copy_from_slice(&x2);
        b.row_mut(i)[net.n_style..].copy_from_slice(&c2);
    }
    let fa = net.mix_batch(&a);
    let fb = net.mix_batch(&b);
    let mut min_ratio = f64::INFINITY;
    for i in 0..pairs {
        let din: f64 = a
            .row(i)
            .iter()
            .zip(b.row(i))
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        if din == 0.0 {
            continue;
        }
        let dout: f64 = fa
            .row(i)
            .iter()
            .zip(fb.row(i))
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        min_ratio = min_ratio.min(dout / din);
    }
    min_ratio
}

fn min_weight_sv_ratio(net: &MixingNetwork) -> f64 {
    let mut min_ratio = f64::INFINITY;
    for w in net.layer_weights.iter().chain([&net.final_projection]) {
        let (lo, hi) = singular_value_bounds(w);
        let ratio = if hi == 0.0 { 0.0 } else { lo / hi };
        min_ratio = min_ratio.min(ratio);
    }
    min_ratio
}

/// Two-part screen: every weight matrix keeps a relative singular-value
/// floor, and a fixed battery of probe pairs stays separated in output space.
pub fn check_injectivity(net: &MixingNetwork) -> bool {
    if min_weight_sv_ratio(net) < SV_FLOOR {
        return false;
    }
    let mut battery = RngStream::new(PROBE_BATTERY_SEED, 0);
    probe_separation_ratio(net, &mut battery, PROBE_PAIRS) >= PROBE_SEPARATION_FLOOR
}

/// Draws candidates until one passes the injectivity screen.
pub fn build_mixing_network(
    n_style: usize,
    d_content: usize,
    hidden_layers: usize,
    obs_dim: usize,
    rng: &mut RngStream,
) -> Result<(MixingNetwork, InjectivityRecord)> {
    if obs_dim < n_style + d_content {
        return Err(Error::InvalidConfig(format!(
            "observation dim {} below joint latent dim {}",
            obs_dim,
            n_style + d_content
        )));
    }
    for attempt in 1..=MIXING_REJECTION_CAP {
        let net = draw_candidate(n_style, d_content, hidden_layers, obs_dim, rng);
        let sv_ratio = min_weight_sv_ratio(&net);
        if sv_ratio < SV_FLOOR {
            continue;
        }
        let mut battery = RngStream::new(PROBE_BATTERY_SEED, 0);
        let sep = probe_separation_ratio(&net, &mut battery, PROBE_PAIRS);
        if sep >= PROBE_SEPARATION_FLOOR {
            return Ok((
                net,
                InjectivityRecord {
                    attempts: attempt,
                    probe_pairs: PROBE_PAIRS,
                    min_probe_separation_ratio: sep,
                    min_singular_value_ratio: sv_ratio,
                },
            ));
        }
    }
    Err(Error::RejectionCapExceeded {
        op: "build_mixing_network",
        cap: MIXING_REJECTION_CAP,
    })
}
