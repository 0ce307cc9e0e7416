//! Forward corruption, reverse-time sampling, and the differentiable
//! few-step chain.
//!
//! Two samplers share the same denoiser. The full sampler walks every level
//! from num_steps down to 0 through the reverse-transition posterior. The
//! shortcut sampler visits only the K levels of a `ChainSpec`: at each level
//! it predicts the clean batch from the current state, then re-corrupts that
//! prediction down to the next level with fresh noise. Because each state is
//! an explicit function of the previous prediction and a constant noise draw,
//! the whole chain is differentiable; `chain_backward` unrolls it in reverse
//! and accumulates parameter gradients across every visited level.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{PointMeta, PointSet};
use crate::error::{Error, Result};
use crate::net::{Denoiser, DenoiserNet, ForwardTape, NetGrads};
use crate::rng::normal_matrix;
use crate::schedule::NoiseSchedule;

/// Division guard for the clean-batch reconstruction.
const MIN_ALPHA: f64 = 1e-8;

static CHAIN_OPS: AtomicU64 = AtomicU64::new(0);

/// Number of chain runs and chain backward passes since process start.
/// Test instrumentation for "this code path never touches the chain".
#[doc(hidden)]
pub fn chain_op_count() -> u64 {
    CHAIN_OPS.load(Ordering::Relaxed)
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!(
            "{what}: shape {:?} does not match {:?}",
            b.dim(),
            a.dim()
        )));
    }
    Ok(())
}

/// Corrupt `x0` to level `t`: `alpha(t) x0 + sigma(t) eps`.
pub fn forward_noise(
    x0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    sch: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sch.validate_level(t)?;
    check_same_shape(x0, eps, "forward_noise")?;
    Ok(x0 * sch.alpha(t) + eps * sch.sigma(t))
}

/// Per-row variant: row i is corrupted to level `ts[i]`.
pub fn forward_noise_each(
    x0: &Array2<f64>,
    ts: &[usize],
    eps: &Array2<f64>,
    sch: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_same_shape(x0, eps, "forward_noise_each")?;
    if ts.len() != x0.nrows() {
        return Err(Error::Argument(format!(
            "forward_noise_each: {} levels for {} rows",
            ts.len(),
            x0.nrows()
        )));
    }
    let mut out = Array2::zeros(x0.dim());
    for (((mut orow, xrow), erow), &t) in out
        .rows_mut()
        .into_iter()
        .zip(x0.rows())
        .zip(eps.rows())
        .zip(ts)
    {
        sch.validate_level(t)?;
        let (a, s) = (sch.alpha(t), sch.sigma(t));
        for ((o, x), e) in orow.iter_mut().zip(xrow).zip(erow) {
            *o = a * x + s * e;
        }
    }
    Ok(out)
}

/// Reconstruct the clean batch implied by a noise prediction at level `t`:
/// `(x_t - sigma(t) eps_hat) / alpha(t)`.
pub fn predict_x0<D: Denoiser + ?Sized>(
    model: &D,
    x_t: &Array2<f64>,
    t: usize,
    sch: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sch.validate_level(t)?;
    let alpha = sch.alpha(t);
    if alpha < MIN_ALPHA {
        return Err(Error::Numeric(format!(
            "alpha({t}) = {alpha} below division guard"
        )));
    }
    let ts = vec![t; x_t.nrows()];
    let eps_hat = model.predict_eps(x_t, &ts, sch)?;
    Ok((x_t - &(eps_hat * sch.sigma(t))) / alpha)
}

/// Mean of the reverse transition q(x_s | x_t, x0) for s < t.
pub fn posterior_mean(
    x_t: &Array2<f64>,
    x0: &Array2<f64>,
    s: usize,
    t: usize,
    sch: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_same_shape(x_t, x0, "posterior_mean")?;
    let (c_xt, c_x0) = sch.posterior_mean_coeffs(s, t)?;
    Ok(x_t * c_xt + x0 * c_x0)
}

/// One full-sampler move t -> s: posterior mean around the model's clean
/// prediction plus posterior-scaled noise.
pub fn ancestral_step<D: Denoiser + ?Sized>(
    model: &D,
    x_t: &Array2<f64>,
    s: usize,
    t: usize,
    noise: &Array2<f64>,
    sch: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_same_shape(x_t, noise, "ancestral_step")?;
    let x0_hat = predict_x0(model, x_t, t, sch)?;
    let mean = posterior_mean(x_t, &x0_hat, s, t, sch)?;
    let sd = sch.posterior_variance(s, t)?.sqrt();
    Ok(mean + noise * sd)
}

/// One shortcut move: re-corrupt a clean prediction straight to level `s`.
pub fn shortcut_step(
    x0_hat: &Array2<f64>,
    s: usize,
    noise: &Array2<f64>,
    sch: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_same_shape(x0_hat, noise, "shortcut_step")?;
    sch.validate_level(s)?;
    Ok(x0_hat * sch.alpha(s) + noise * sch.sigma(s))
}

/// The levels a shortcut chain visits, strictly descending, all in
/// [1, num_steps]. `steps[0]` is where the chain starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainSpec {
    steps: Vec<usize>,
}

impl ChainSpec {
    pub fn new(steps: Vec<usize>, t_max: usize) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Argument("chain needs at least one level".into()));
        }
        for pair in steps.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::Argument(format!(
                    "chain levels must strictly descend, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        let first = steps[0];
        let last = *steps.last().unwrap();
        if last == 0 || first > t_max {
            return Err(Error::Argument(format!(
                "chain levels must lie in [1, {t_max}], got range [{last}, {first}]"
            )));
        }
        Ok(ChainSpec { steps })
    }

    /// K levels evenly spread over (0, t_max], starting exactly at t_max.
    /// This is the inference-time layout.
    pub fn evenly_spaced(k: usize, t_max: usize) -> Result<Self> {
        if k == 0 || k > t_max {
            return Err(Error::Argument(format!(
                "need 1 <= k <= t_max, got k={k} t_max={t_max}"
            )));
        }
        let steps = (0..k)
            .map(|i| (t_max as f64 * (k - i) as f64 / k as f64).round() as usize)
            .collect();
        ChainSpec::new(steps, t_max)
    }

    /// Training-time layout: K distinct levels drawn uniformly without
    /// replacement from [1, t_max], resampled until the chain starts in the
    /// upper half of the schedule.
    pub fn sample_training(k: usize, t_max: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if k == 0 || k > t_max {
            return Err(Error::Argument(format!(
                "need 1 <= k <= t_max, got k={k} t_max={t_max}"
            )));
        }
        loop {
            let mut steps: Vec<usize> = rand::seq::index::sample(rng, t_max, k)
                .into_iter()
                .map(|i| i + 1)
                .collect();
            steps.sort_unstable_by(|a, b| b.cmp(a));
            if steps[0] * 2 >= t_max {
                return ChainSpec::new(steps, t_max);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn start(&self) -> usize {
        self.steps[0]
    }
}

/// Everything a shortcut chain run produced. `states[i]` is the batch at
/// level `spec.steps()[i]`; `x0_preds[i]` the clean prediction made there;
/// `noises[i]` the draw that generated the next state (the last entry is
/// reserved for the final re-corruption that the clean output skips). Tapes
/// are present only when the chain was recorded for a backward pass.
#[derive(Debug)]
pub struct ChainState {
    pub spec: ChainSpec,
    pub states: Vec<Array2<f64>>,
    pub noises: Vec<Array2<f64>>,
    pub x0_preds: Vec<Array2<f64>>,
    pub tapes: Vec<ForwardTape>,
}

impl ChainState {
    /// The chain's output: the clean prediction at the lowest visited level.
    pub fn output(&self) -> &Array2<f64> {
        self.x0_preds.last().expect("chain has at least one level")
    }
}

fn validate_chain_inputs(
    x_init: &Array2<f64>,
    spec: &ChainSpec,
    noises: &[Array2<f64>],
    sch: &NoiseSchedule,
) -> Result<()> {
    if spec.start() > sch.num_steps() {
        return Err(Error::Argument(format!(
            "chain starts at {} but schedule tops out at {}",
            spec.start(),
            sch.num_steps()
        )));
    }
    if noises.len() != spec.len() {
        return Err(Error::Argument(format!(
            "expected {} noise batches, got {}",
            spec.len(),
            noises.len()
        )));
    }
    for noise in noises {
        check_same_shape(x_init, noise, "run_chain noises")?;
    }
    Ok(())
}

fn run_chain_impl<F>(
    x_init: &Array2<f64>,
    spec: &ChainSpec,
    noises: &[Array2<f64>],
    sch: &NoiseSchedule,
    mut predict: F,
) -> Result<ChainState>
where
    F: FnMut(&Array2<f64>, usize) -> Result<(Array2<f64>, Option<ForwardTape>)>,
{
    validate_chain_inputs(x_init, spec, noises, sch)?;
    CHAIN_OPS.fetch_add(1, Ordering::Relaxed);
    let k = spec.len();
    let mut states = Vec::with_capacity(k);
    let mut x0_preds = Vec::with_capacity(k);
    let mut tapes = Vec::new();
    states.push(x_init.clone());
    for i in 0..k {
        let level = spec.steps()[i];
        let (x0_pred, tape) = predict(&states[i], level)?;
        if let Some(tape) = tape {
            tapes.push(tape);
        }
        if i + 1 < k {
            let next = shortcut_step(&x0_pred, spec.steps()[i + 1], &noises[i], sch)?;
            states.push(next);
        }
        x0_preds.push(x0_pred);
    }
    Ok(ChainState {
        spec: spec.clone(),
        states,
        noises: noises.to_vec(),
        x0_preds,
        tapes,
    })
}

/// Run a shortcut chain for inference: no tapes, any denoiser.
pub fn run_chain<D: Denoiser + ?Sized>(
    model: &D,
    x_init: &Array2<f64>,
    spec: &ChainSpec,
    noises: &[Array2<f64>],
    sch: &NoiseSchedule,
) -> Result<ChainState> {
    run_chain_impl(x_init, spec, noises, sch, |x, level| {
        Ok((predict_x0(model, x, level, sch)?, None))
    })
}

/// Run a shortcut chain recording forward tapes so `chain_backward` can
/// differentiate through it.
pub fn run_chain_recorded(
    net: &DenoiserNet,
    x_init: &Array2<f64>,
    spec: &ChainSpec,
    noises: &[Array2<f64>],
    sch: &NoiseSchedule,
) -> Result<ChainState> {
    run_chain_impl(x_init, spec, noises, sch, |x, level| {
        sch.validate_level(level)?;
        let alpha = sch.alpha(level);
        if alpha < MIN_ALPHA {
            return Err(Error::Numeric(format!(
                "alpha({level}) = {alpha} below division guard"
            )));
        }
        let ts = vec![level; x.nrows()];
        let (eps_hat, tape) = net.forward(x, &ts, sch)?;
        let x0_pred = (x - &(eps_hat * sch.sigma(level))) / alpha;
        Ok((x0_pred, Some(tape)))
    })
}

/// How far gradients flow back through a recorded chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainGradMode {
    /// Unroll all K levels (reverse-mode through every state transition).
    #[default]
    Full,
    /// Differentiate only the final clean prediction; earlier levels are
    /// treated as constants.
    LastStep,
}

/// Reverse-mode pass over a recorded chain. `grad_output` is the loss
/// gradient with respect to `chain.output()`. Noise draws are constants, so
/// gradients flow only through predictions and state transitions.
pub fn chain_backward(
    net: &DenoiserNet,
    chain: &ChainState,
    grad_output: &Array2<f64>,
    mode: ChainGradMode,
    sch: &NoiseSchedule,
) -> Result<NetGrads> {
    let k = chain.spec.len();
    if chain.tapes.len() != k {
        return Err(Error::State(format!(
            "chain has {} tapes for {} levels; record the chain before differentiating",
            chain.tapes.len(),
            k
        )));
    }
    check_same_shape(chain.output(), grad_output, "chain_backward")?;
    CHAIN_OPS.fetch_add(1, Ordering::Relaxed);

    let mut acc = NetGrads::zeros(net);
    // d loss / d x0_preds[i], walking i = k-1 down to 0.
    let mut g_pred = grad_output.clone();
    for i in (0..k).rev() {
        let level = chain.spec.steps()[i];
        let (alpha, sigma) = (sch.alpha(level), sch.sigma(level));
        // x0_pred = (state - sigma eps_hat) / alpha
        let g_eps = &g_pred * (-sigma / alpha);
        let (param_grads, g_input) = net.backward(&chain.tapes[i], &g_eps)?;
        acc.add_in_place(&param_grads);
        if mode == ChainGradMode::LastStep {
            break;
        }
        if i > 0 {
            // d/d state[i]: direct term of the reconstruction plus the path
            // through the net input; then state[i] = alpha * x0_pred[i-1] + const.
            let g_state = &g_pred / alpha + &g_input;
            g_pred = g_state * alpha;
        }
    }
    Ok(acc)
}

/// Mean squared reconstruction error and its gradient in the prediction.
pub fn fidelity_loss(x0: &Array2<f64>, x0_hat: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    check_same_shape(x0, x0_hat, "fidelity_loss")?;
    let n = x0.nrows() as f64;
    let diff = x0_hat - x0;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite fidelity loss".into()));
    }
    let grad = diff * (2.0 / n);
    Ok((loss, grad))
}

/// Noise-prediction loss over a batch corrupted at per-row levels, together
/// with parameter gradients. With `weighted` set, each row is scaled by half
/// the SNR drop from its predecessor level (rows then need t >= 1).
pub fn eps_loss(
    net: &DenoiserNet,
    x0: &Array2<f64>,
    ts: &[usize],
    eps: &Array2<f64>,
    weighted: bool,
    sch: &NoiseSchedule,
) -> Result<(f64, NetGrads)> {
    let x_t = forward_noise_each(x0, ts, eps, sch)?;
    let (eps_hat, tape) = net.forward(&x_t, ts, sch)?;
    let n = x0.nrows() as f64;

    let mut weights = vec![1.0; ts.len()];
    if weighted {
        for (w, &t) in weights.iter_mut().zip(ts) {
            if t == 0 {
                return Err(Error::Argument(
                    "weighted loss needs t >= 1 (level 0 has no predecessor)".into(),
                ));
            }
            *w = 0.5 * (sch.snr(t - 1) - sch.snr(t));
        }
    }

    let residual = &eps_hat - eps;
    let mut loss = 0.0;
    let mut grad_out = residual;
    for (mut row, &w) in grad_out.rows_mut().into_iter().zip(&weights) {
        let row_sq: f64 = row.iter().map(|r| r * r).sum();
        loss += w * row_sq;
        row.mapv_inplace(|r| 2.0 * w * r / n);
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite noise-prediction loss".into()));
    }
    let (grads, _) = net.backward(&tape, &grad_out)?;
    Ok((loss, grads))
}

/// Loss values for one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub eps: f64,
    pub fidelity: f64,
    pub total: f64,
}

/// Walk every level from num_steps down to 0 with the posterior sampler.
pub fn sample_full<D: Denoiser + ?Sized>(
    model: &D,
    n: usize,
    sch: &NoiseSchedule,
    seed: u64,
) -> Result<PointSet> {
    let (set, _) = sample_full_traced(model, n, sch, seed, &[])?;
    Ok(set)
}

/// Full sampler that additionally returns the state after `k` completed
/// steps for every `k` in `record_at` (k = num_steps is the final state).
pub fn sample_full_traced<D: Denoiser + ?Sized>(
    model: &D,
    n: usize,
    sch: &NoiseSchedule,
    seed: u64,
    record_at: &[usize],
) -> Result<(PointSet, Vec<(usize, Array2<f64>)>)> {
    if n == 0 {
        return Err(Error::Argument("cannot sample an empty batch".into()));
    }
    let t_max = sch.num_steps();
    if let Some(&bad) = record_at.iter().find(|&&k| k > t_max) {
        return Err(Error::Argument(format!(
            "cannot record after {bad} steps of a {t_max}-step walk"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = normal_matrix(&mut rng, n, 2);
    let mut snaps = Vec::new();
    if record_at.contains(&0) {
        snaps.push((0, x.clone()));
    }
    for t in (1..=t_max).rev() {
        let noise = normal_matrix(&mut rng, n, 2);
        x = ancestral_step(model, &x, t - 1, t, &noise, sch)?;
        let done = t_max - t + 1;
        if record_at.contains(&done) {
            snaps.push((done, x.clone()));
        }
    }
    let set = PointSet::new(
        x,
        PointMeta {
            generator: "sample_full".into(),
            seed,
            ..Default::default()
        },
    )?;
    Ok((set, snaps))
}

/// Draw the initial state and per-level noises for a seeded shortcut run,
/// then run the chain. Inference chains must start at the top level so the
/// standard normal init matches the forward endpoint.
pub fn shortcut_chain_from_seed<D: Denoiser + ?Sized>(
    model: &D,
    n: usize,
    spec: &ChainSpec,
    sch: &NoiseSchedule,
    seed: u64,
) -> Result<ChainState> {
    if n == 0 {
        return Err(Error::Argument("cannot sample an empty batch".into()));
    }
    if spec.start() != sch.num_steps() {
        return Err(Error::Argument(format!(
            "inference chains must start at level {} (got {})",
            sch.num_steps(),
            spec.start()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_init = normal_matrix(&mut rng, n, 2);
    let noises: Vec<Array2<f64>> = (0..spec.len())
        .map(|_| normal_matrix(&mut rng, n, 2))
        .collect();
    run_chain(model, &x_init, spec, &noises, sch)
}

/// K-step generation: seeded shortcut chain, clean prediction as output.
pub fn sample_shortcut<D: Denoiser + ?Sized>(
    model: &D,
    n: usize,
    spec: &ChainSpec,
    sch: &NoiseSchedule,
    seed: u64,
) -> Result<PointSet> {
    let chain = shortcut_chain_from_seed(model, n, spec, sch, seed)?;
    PointSet::new(
        chain.output().clone(),
        PointMeta {
            generator: format!("sample_shortcut_k{}", spec.len()),
            seed,
            ..Default::default()
        },
    )
}

/// Diagnostic: KL divergence between the forward endpoint of `x0` and the
/// standard normal prior, averaged over the batch. Near zero on schedules
/// whose top level is close to pure noise.
pub fn prior_kl(x0: &Array2<f64>, sch: &NoiseSchedule) -> f64 {
    let t = sch.num_steps();
    let (a, s) = (sch.alpha(t), sch.sigma(t));
    let s2 = s * s;
    let n = x0.nrows() as f64;
    let per_dim_const = s2 - 1.0 - s2.ln();
    let sq_means: f64 = x0.iter().map(|v| a * a * v * v).sum();
    0.5 * (x0.len() as f64 * per_dim_const + sq_means) / n
}
