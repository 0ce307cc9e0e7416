//! The denoiser: a three-layer MLP over Fourier-featurized coordinates.
//!
//! Each input coordinate c expands to `[c, sin(2^j pi c), cos(2^j pi c)]` for
//! j = 0..n_freqs-1; the noise level enters as tau = t / num_steps with its
//! own band. Hidden layers use the sigmoid-weighted linear unit, which is
//! smooth everywhere (central finite differences stay valid, and the chain
//! backward pass never sits on an activation kink).
//!
//! Forward passes record a tape of intermediate activations; `backward`
//! consumes a tape and returns both parameter gradients and gradients with
//! respect to the (pre-featurization) inputs. Input gradients are what make
//! the sampling chain differentiable end to end.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Fourier bands per input coordinate.
    pub n_freqs: usize,
    /// Whether the noise level is fed to the net at all.
    pub time_embed: bool,
    /// Fourier bands for the time input.
    pub n_time_freqs: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_dim: 2,
            hidden_dim: 128,
            n_freqs: 6,
            time_embed: true,
            n_time_freqs: 6,
        }
    }
}

impl NetConfig {
    pub fn feature_dim(&self) -> usize {
        let coord = self.input_dim * (1 + 2 * self.n_freqs);
        let time = if self.time_embed {
            1 + 2 * self.n_time_freqs
        } else {
            0
        };
        coord + time
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "input_dim and hidden_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One affine map; `w` is (in, out) so forward is `x.dot(w) + b`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct DenoiserNet {
    config: NetConfig,
    layers: Vec<Layer>,
}

/// Activations cached by a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    feat: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
}

impl ForwardTape {
    pub fn batch_len(&self) -> usize {
        self.feat.nrows()
    }
}

/// Parameter gradients, congruent with the net's layer list.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl NetGrads {
    pub fn zeros(net: &DenoiserNet) -> Self {
        NetGrads {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.w.dim()), Array1::zeros(l.b.dim())))
                .collect(),
        }
    }

    pub fn add_in_place(&mut self, other: &NetGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Expand points and (per-row) noise levels into the feature matrix.
pub fn featurize(
    x: &Array2<f64>,
    ts: &[usize],
    config: &NetConfig,
    sch: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if x.ncols() != config.input_dim {
        return Err(Error::Argument(format!(
            "expected {} input columns, got {}",
            config.input_dim,
            x.ncols()
        )));
    }
    if ts.len() != x.nrows() {
        return Err(Error::Argument(format!(
            "expected {} noise levels, got {}",
            x.nrows(),
            ts.len()
        )));
    }
    if let Some(&bad) = ts.iter().find(|&&t| t > sch.num_steps()) {
        return Err(Error::Argument(format!(
            "noise level {} out of range 0..={}",
            bad,
            sch.num_steps()
        )));
    }
    let t_max = sch.num_steps() as f64;
    let mut feat = Array2::zeros((x.nrows(), config.feature_dim()));
    for ((mut frow, xrow), &t) in feat.rows_mut().into_iter().zip(x.rows()).zip(ts) {
        let f = frow.as_slice_mut().expect("row of standard-layout array");
        let mut k = 0;
        for &c in xrow {
            k = write_band(f, k, c, config.n_freqs);
        }
        if config.time_embed {
            write_band(f, k, t as f64 / t_max, config.n_time_freqs);
        }
    }
    Ok(feat)
}

/// Write `[v, sin(2^j pi v), cos(2^j pi v)]...` starting at `f[k]`; returns
/// the next free slot.
fn write_band(f: &mut [f64], mut k: usize, v: f64, n_freqs: usize) -> usize {
    f[k] = v;
    k += 1;
    let mut omega = PI;
    for _ in 0..n_freqs {
        let (s, c) = (omega * v).sin_cos();
        f[k] = s;
        f[k + 1] = c;
        k += 2;
        omega *= 2.0;
    }
    k
}

impl DenoiserNet {
    /// Fresh net with uniform Glorot weights, zero biases, and the output
    /// layer shrunk by 100x so initial predictions sit near zero.
    pub fn init(config: NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let dims = [
            (config.feature_dim(), config.hidden_dim),
            (config.hidden_dim, config.hidden_dim),
            (config.hidden_dim, config.input_dim),
        ];
        let mut layers = Vec::with_capacity(3);
        for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if i == dims.len() - 1 { 0.01 } else { 1.0 };
            let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                scale * (rng.gen::<f64>() * 2.0 - 1.0) * bound
            });
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
            });
        }
        Ok(DenoiserNet { config, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameters in the fixed serialization order: per layer, weights
    /// row-major then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Argument(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            for w in l.w.iter_mut() {
                *w = *it.next().unwrap();
            }
            for b in l.b.iter_mut() {
                *b = *it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Predict the noise in `x` at per-row levels `ts`, returning the tape
    /// needed for a backward pass.
    pub fn forward(
        &self,
        x: &Array2<f64>,
        ts: &[usize],
        sch: &NoiseSchedule,
    ) -> Result<(Array2<f64>, ForwardTape)> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        let feat = featurize(x, ts, &self.config, sch)?;
        let z1 = feat.dot(&self.layers[0].w) + &self.layers[0].b;
        let a1 = z1.mapv(silu);
        let z2 = a1.dot(&self.layers[1].w) + &self.layers[1].b;
        let a2 = z2.mapv(silu);
        let out = a2.dot(&self.layers[2].w) + &self.layers[2].b;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network activations".into()));
        }
        Ok((
            out,
            ForwardTape {
                feat,
                z1,
                a1,
                z2,
                a2,
            },
        ))
    }

    /// Backpropagate `grad_out` (dLoss/dOutput) through a recorded forward
    /// pass. Returns parameter gradients plus dLoss/dInput for the original
    /// (un-featurized) points; gradients do not flow into the time band.
    pub fn backward(
        &self,
        tape: &ForwardTape,
        grad_out: &Array2<f64>,
    ) -> Result<(NetGrads, Array2<f64>)> {
        if grad_out.dim() != (tape.batch_len(), self.config.input_dim) {
            return Err(Error::Argument(format!(
                "grad shape {:?} does not match tape batch {} x {}",
                grad_out.dim(),
                tape.batch_len(),
                self.config.input_dim
            )));
        }
        let d_w3 = tape.a2.t().dot(grad_out);
        let d_b3 = grad_out.sum_axis(Axis(0));
        let d_a2 = grad_out.dot(&self.layers[2].w.t());

        let d_z2 = &d_a2 * &tape.z2.mapv(silu_grad);
        let d_w2 = tape.a1.t().dot(&d_z2);
        let d_b2 = d_z2.sum_axis(Axis(0));
        let d_a1 = d_z2.dot(&self.layers[1].w.t());

        let d_z1 = &d_a1 * &tape.z1.mapv(silu_grad);
        let d_w1 = tape.feat.t().dot(&d_z1);
        let d_b1 = d_z1.sum_axis(Axis(0));
        let d_feat = d_z1.dot(&self.layers[0].w.t());

        let input_grads = self.feature_input_grads(&tape.feat, &d_feat);
        Ok((
            NetGrads {
                layers: vec![(d_w1, d_b1), (d_w2, d_b2), (d_w3, d_b3)],
            },
            input_grads,
        ))
    }

    /// Pull feature-space gradients back onto the raw coordinates. The sin
    /// and cos values cached in the feature matrix are exactly the factors
    /// the chain rule needs.
    fn feature_input_grads(&self, feat: &Array2<f64>, d_feat: &Array2<f64>) -> Array2<f64> {
        let n_freqs = self.config.n_freqs;
        let width = 1 + 2 * n_freqs;
        let mut out = Array2::zeros((feat.nrows(), self.config.input_dim));
        for ((mut orow, frow), grow) in out
            .rows_mut()
            .into_iter()
            .zip(feat.rows())
            .zip(d_feat.rows())
        {
            let f = frow.as_slice().expect("row of standard-layout array");
            let g = grow.as_slice().expect("row of standard-layout array");
            for (c, o) in orow.iter_mut().enumerate() {
                let base = c * width;
                let mut acc = g[base];
                let mut omega = PI;
                for j in 0..n_freqs {
                    let sin_v = f[base + 1 + 2 * j];
                    let cos_v = f[base + 2 + 2 * j];
                    acc += omega * (g[base + 1 + 2 * j] * cos_v - g[base + 2 + 2 * j] * sin_v);
                    omega *= 2.0;
                }
                *o = acc;
            }
        }
        out
    }
}

/// Anything that can estimate the noise component of a corrupted batch.
/// Samplers are generic over this so tests can substitute closed-form
/// denoisers with known behavior.
pub trait Denoiser {
    fn predict_eps(
        &self,
        x: &Array2<f64>,
        ts: &[usize],
        sch: &NoiseSchedule,
    ) -> Result<Array2<f64>>;
}

impl Denoiser for DenoiserNet {
    fn predict_eps(
        &self,
        x: &Array2<f64>,
        ts: &[usize],
        sch: &NoiseSchedule,
    ) -> Result<Array2<f64>> {
        Ok(self.forward(x, ts, sch)?.0)
    }
}

/// Adam with bias correction. Moment vectors are flat and follow the net's
/// parameter serialization order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(lr: f64, param_count: usize) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        Ok(AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        })
    }
}

/// One optimizer step in place. Rejects gradient/parameter count mismatches
/// and non-finite gradients before touching any state.
pub fn adam_step(net: &mut DenoiserNet, grads: &NetGrads, opt: &mut AdamState) -> Result<()> {
    let n_params = net.param_count();
    let n_grads: usize = grads.layers.iter().map(|(w, b)| w.len() + b.len()).sum();
    if n_grads != n_params || opt.m.len() != n_params {
        return Err(Error::Argument(format!(
            "gradient/optimizer size mismatch: params={n_params} grads={n_grads} moments={}",
            opt.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    opt.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(opt.step as i32);
    let mut idx = 0;
    for (layer, (gw, gb)) in net.layers.iter_mut().zip(&grads.layers) {
        for (p, g) in layer
            .w
            .iter_mut()
            .chain(layer.b.iter_mut())
            .zip(gw.iter().chain(gb.iter()))
        {
            let m = &mut opt.m[idx];
            let v = &mut opt.v[idx];
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= opt.lr * m_hat / (v_hat.sqrt() + opt.epsilon);
            idx += 1;
        }
    }
    Ok(())
}
