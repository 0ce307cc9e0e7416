//! Training orchestration.
//!
//! Two regimes share one loop. `Baseline` fits the noise-prediction loss
//! alone. `Shortcut` adds, every epoch, a reconstruction loss computed by
//! running a recorded shortcut chain and differentiating through all of it
//! (or just its final prediction, per `ChainGradMode`). The two losses are
//! applied as two consecutive optimizer steps by default, or merged into
//! one when `combined_step` is set.
//!
//! Every random draw comes from a purpose-keyed stream of one `RunRng`, and
//! evaluation uses separate seeds derived from (run seed, epoch), so a run
//! is a pure function of its config and data — checkpoints capture stream
//! positions and resume bitwise.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptMoments};
use crate::data::PointSet;
use crate::diffusion::{
    chain_backward, eps_loss, fidelity_loss, forward_noise, run_chain_recorded, sample_full,
    sample_shortcut, ChainGradMode, ChainSpec, LossReport,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport, SamplerKind};
use crate::net::{adam_step, AdamState, DenoiserNet, NetConfig, NetGrads};
use crate::rng::{derive_seed, normal_matrix, Purpose, RunRng};
use crate::schedule::{NoiseSchedule, ScheduleConfig};

/// Which losses drive the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Noise-prediction loss only.
    Baseline,
    /// Noise-prediction loss plus the chain reconstruction loss.
    #[default]
    Shortcut,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::Baseline => write!(f, "baseline"),
            TrainMode::Shortcut => write!(f, "shortcut"),
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "shortcut" => Ok(TrainMode::Shortcut),
            other => Err(Error::Argument(format!(
                "unknown mode: {other} (expected baseline|shortcut)"
            ))),
        }
    }
}

/// Where a training chain starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainInit {
    /// Corrupt the current clean batch up to the chain's top level.
    #[default]
    TeacherForced,
    /// Start from standard normal draws, ignoring the batch.
    PureNoise,
}

impl fmt::Display for ChainInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainInit::TeacherForced => write!(f, "teacher_forced"),
            ChainInit::PureNoise => write!(f, "pure_noise"),
        }
    }
}

impl FromStr for ChainInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_forced" => Ok(ChainInit::TeacherForced),
            "pure_noise" => Ok(ChainInit::PureNoise),
            other => Err(Error::Argument(format!(
                "unknown chain init: {other} (expected teacher_forced|pure_noise)"
            ))),
        }
    }
}

impl fmt::Display for ChainGradMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainGradMode::Full => write!(f, "full"),
            ChainGradMode::LastStep => write!(f, "last_step"),
        }
    }
}

impl FromStr for ChainGradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ChainGradMode::Full),
            "last_step" => Ok(ChainGradMode::LastStep),
            other => Err(Error::Argument(format!(
                "unknown chain grad mode: {other} (expected full|last_step)"
            ))),
        }
    }
}

/// Full description of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    /// Levels per training/inference chain (K).
    pub chain_len: usize,
    pub epochs: usize,
    /// 0 means full-batch.
    pub batch_size: usize,
    pub lr: f64,
    /// Weight on the chain reconstruction loss.
    pub lambda_fidelity: f64,
    pub chain_grad: ChainGradMode,
    pub chain_init: ChainInit,
    /// Scale noise-prediction rows by the per-level SNR drop.
    pub weighted_eps_loss: bool,
    /// Merge both losses into a single optimizer step per batch.
    pub combined_step: bool,
    pub seed: u64,
    /// Evaluate (and checkpoint) every this many epochs.
    pub eval_every: usize,
    /// Points generated per evaluation.
    pub eval_n: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::default(),
            schedule: ScheduleConfig::default(),
            net: NetConfig::default(),
            chain_len: 10,
            epochs: 2000,
            batch_size: 0,
            lr: 1e-3,
            lambda_fidelity: 1.0,
            chain_grad: ChainGradMode::default(),
            chain_init: ChainInit::default(),
            weighted_eps_loss: false,
            combined_step: false,
            seed: 7,
            eval_every: 100,
            eval_n: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.chain_len == 0 || self.chain_len > self.schedule.num_steps {
            return Err(Error::Config(format!(
                "chain_len must lie in [1, {}], got {}",
                self.schedule.num_steps, self.chain_len
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.eval_n == 0 {
            return Err(Error::Config("eval_n must be at least 1".into()));
        }
        if !(self.lambda_fidelity.is_finite() && self.lambda_fidelity >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_fidelity must be finite and non-negative, got {}",
                self.lambda_fidelity
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "lr must be finite and positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub eps_loss: f64,
    /// Absent in baseline mode.
    pub fidelity_loss: Option<f64>,
    /// Present on evaluation epochs only.
    pub energy_distance: Option<f64>,
    /// Present on evaluation epochs only.
    pub chamfer: Option<f64>,
    /// Wall-clock time of the epoch (including evaluation).
    pub seconds: f64,
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-epoch records of one `fit` call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "epoch,eps_loss,fidelity_loss,energy_distance,chamfer,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                r.eps_loss,
                csv_opt(r.fidelity_loss),
                csv_opt(r.energy_distance),
                csv_opt(r.chamfer),
                r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Callbacks fired as `fit` progresses. All default to no-ops.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) {}

    /// Fired for every metric evaluation, including the slow-sampler
    /// comparisons that are not written to the log.
    fn on_eval(&mut self, _epoch: usize, _report: &MetricReport) {}

    /// Fired at checkpoint epochs with a fully captured state. Persisting
    /// it (or not) is the caller's policy.
    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NullObserver;

impl TrainObserver for NullObserver {}

/// A training run in progress: model, optimizers, random streams, data.
///
/// The denoiser loss and the fidelity loss each get their own Adam
/// accumulators. Early in a run the chain gradients are orders of magnitude
/// larger than the denoiser's; pushing both through one second-moment buffer
/// would shrink the denoiser steps by that ratio and stall it.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    schedule: NoiseSchedule,
    net: DenoiserNet,
    opt_eps: AdamState,
    opt_chain: AdamState,
    rng: RunRng,
    data: PointSet,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: PointSet) -> Result<Self> {
        config.validate()?;
        if config.net.input_dim != data.points.ncols() {
            return Err(Error::Config(format!(
                "net expects {} input dims but data has {} columns",
                config.net.input_dim,
                data.points.ncols()
            )));
        }
        let schedule = NoiseSchedule::build(config.schedule)?;
        let mut rng = RunRng::new(config.seed);
        let net = DenoiserNet::init(config.net, rng.stream(Purpose::NetInit))?;
        let opt_eps = AdamState::new(config.lr, net.param_count())?;
        let opt_chain = AdamState::new(config.lr, net.param_count())?;
        Ok(Trainer {
            config,
            schedule,
            net,
            opt_eps,
            opt_chain,
            rng,
            data,
            epoch: 0,
        })
    }

    /// Rebuild a trainer exactly as it was when `checkpoint` was captured.
    /// `data` must be the same set the original run trained on.
    pub fn from_checkpoint(checkpoint: &Checkpoint, data: PointSet) -> Result<Self> {
        let config = checkpoint.train.clone();
        config.validate()?;
        let schedule = checkpoint.rebuild_schedule()?;
        let net = checkpoint.rebuild_net()?;
        let restore = |ms: &OptMoments| -> Result<AdamState> {
            if ms.m.len() != checkpoint.params.len() || ms.v.len() != checkpoint.params.len() {
                return Err(Error::Checkpoint(
                    "optimizer state length does not match parameter count".into(),
                ));
            }
            Ok(AdamState {
                lr: config.lr,
                beta1: checkpoint.adam_beta1,
                beta2: checkpoint.adam_beta2,
                epsilon: checkpoint.adam_epsilon,
                step: ms.step,
                m: ms.m.clone(),
                v: ms.v.clone(),
            })
        };
        let opt_eps = restore(&checkpoint.eps_opt)?;
        let opt_chain = restore(&checkpoint.chain_opt)?;
        let rng = RunRng::restore(checkpoint.seed, checkpoint.rng_positions);
        Ok(Trainer {
            config,
            schedule,
            net,
            opt_eps,
            opt_chain,
            rng,
            data,
            epoch: checkpoint.epoch as usize,
        })
    }

    /// Capture the complete run state after `self.epoch` finished epochs.
    pub fn checkpoint(&self) -> Checkpoint {
        let moments = |opt: &AdamState| OptMoments {
            step: opt.step,
            m: opt.m.clone(),
            v: opt.v.clone(),
        };
        Checkpoint {
            train: self.config.clone(),
            epoch: self.epoch as u64,
            params: self.net.params_flat(),
            adam_beta1: self.opt_eps.beta1,
            adam_beta2: self.opt_eps.beta2,
            adam_epsilon: self.opt_eps.epsilon,
            eps_opt: moments(&self.opt_eps),
            chain_opt: moments(&self.opt_chain),
            seed: self.rng.seed(),
            rng_positions: self.rng.positions(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn net(&self) -> &DenoiserNet {
        &self.net
    }

    pub fn data(&self) -> &PointSet {
        &self.data
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn batch_rows(&self, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.data.points.ncols()));
        for (mut dst, &r) in out.rows_mut().into_iter().zip(rows) {
            dst.assign(&self.data.points.row(r));
        }
        out
    }

    fn eps_grads(&mut self, x0: &Array2<f64>) -> Result<(f64, NetGrads)> {
        let t_max = self.schedule.num_steps();
        let n = x0.nrows();
        let ts: Vec<usize> = {
            let rng = self.rng.stream(Purpose::TimestepDraw);
            (0..n).map(|_| rng.gen_range(1..=t_max)).collect()
        };
        let eps = normal_matrix(self.rng.stream(Purpose::EpsNoise), n, x0.ncols());
        eps_loss(
            &self.net,
            x0,
            &ts,
            &eps,
            self.config.weighted_eps_loss,
            &self.schedule,
        )
    }

    fn chain_grads(&mut self, x0: &Array2<f64>) -> Result<(f64, NetGrads)> {
        let t_max = self.schedule.num_steps();
        let n = x0.nrows();
        let dim = x0.ncols();
        let spec = ChainSpec::sample_training(
            self.config.chain_len,
            t_max,
            self.rng.stream(Purpose::ChainSteps),
        )?;
        let x_init = match self.config.chain_init {
            ChainInit::TeacherForced => {
                let eps = normal_matrix(self.rng.stream(Purpose::EpsNoise), n, dim);
                forward_noise(x0, spec.start(), &eps, &self.schedule)?
            }
            ChainInit::PureNoise => normal_matrix(self.rng.stream(Purpose::ChainNoise), n, dim),
        };
        let noises: Vec<Array2<f64>> = (0..spec.len())
            .map(|_| normal_matrix(self.rng.stream(Purpose::ChainNoise), n, dim))
            .collect();
        let chain = run_chain_recorded(&self.net, &x_init, &spec, &noises, &self.schedule)?;
        let (loss, grad_out) = fidelity_loss(x0, chain.output())?;
        let grad_out = grad_out * self.config.lambda_fidelity;
        let grads = chain_backward(
            &self.net,
            &chain,
            &grad_out,
            self.config.chain_grad,
            &self.schedule,
        )?;
        Ok((loss, grads))
    }

    /// Run one epoch over the data and return batch-averaged losses.
    pub fn train_epoch(&mut self) -> Result<LossReport> {
        let n = self.data.len();
        let batch = if self.config.batch_size == 0 {
            n
        } else {
            self.config.batch_size.min(n)
        };
        let mut order: Vec<usize> = (0..n).collect();
        if batch < n {
            order.shuffle(self.rng.stream(Purpose::Shuffle));
        }

        let shortcut = self.config.mode == TrainMode::Shortcut;
        let mut eps_sum = 0.0;
        let mut fid_sum = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(batch) {
            let x0 = self.batch_rows(chunk);
            if shortcut && self.config.combined_step {
                let (eps_l, mut grads) = self.eps_grads(&x0)?;
                let (fid_l, chain_g) = self.chain_grads(&x0)?;
                grads.add_in_place(&chain_g);
                adam_step(&mut self.net, &grads, &mut self.opt_eps)?;
                eps_sum += eps_l;
                fid_sum += fid_l;
            } else {
                let (eps_l, grads) = self.eps_grads(&x0)?;
                adam_step(&mut self.net, &grads, &mut self.opt_eps)?;
                eps_sum += eps_l;
                if shortcut {
                    let (fid_l, grads) = self.chain_grads(&x0)?;
                    adam_step(&mut self.net, &grads, &mut self.opt_chain)?;
                    fid_sum += fid_l;
                }
            }
            batches += 1.0;
        }
        self.epoch += 1;

        let eps = eps_sum / batches;
        let fidelity = if shortcut { fid_sum / batches } else { 0.0 };
        Ok(LossReport {
            eps,
            fidelity,
            total: eps + self.config.lambda_fidelity * fidelity,
        })
    }

    /// Generate with the fast sampler and score against the training data.
    pub fn evaluate_shortcut(&self, epoch: usize) -> Result<MetricReport> {
        let spec = ChainSpec::evenly_spaced(self.config.chain_len, self.schedule.num_steps())?;
        let generated = sample_shortcut(
            &self.net,
            self.config.eval_n,
            &spec,
            &self.schedule,
            derive_seed(self.config.seed, 2 * epoch as u64),
        )?;
        evaluate(
            &generated,
            &self.data,
            Some(SamplerKind::Shortcut(self.config.chain_len)),
        )
    }

    /// Generate with the every-level sampler and score against the data.
    pub fn evaluate_full(&self, epoch: usize) -> Result<MetricReport> {
        let generated = sample_full(
            &self.net,
            self.config.eval_n,
            &self.schedule,
            derive_seed(self.config.seed, 2 * epoch as u64 + 1),
        )?;
        evaluate(&generated, &self.data, Some(SamplerKind::Full))
    }

    /// Train until `config.epochs`, evaluating and checkpointing every
    /// `eval_every` epochs and at the end. A numeric failure aborts and
    /// propagates; checkpoints already handed to the observer are the
    /// recovery points.
    pub fn fit(&mut self, observer: &mut dyn TrainObserver) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        let total = self.config.epochs;
        while self.epoch < total {
            let started = Instant::now();
            let losses = self.train_epoch()?;
            let epoch = self.epoch;

            let eval_epoch = epoch % self.config.eval_every == 0 || epoch == total;
            let mut energy = None;
            let mut cham = None;
            if eval_epoch {
                let report = self.evaluate_shortcut(epoch)?;
                energy = Some(report.energy_distance);
                cham = Some(report.chamfer);
                observer.on_eval(epoch, &report);
                // The slow sampler is tracked occasionally, for comparison
                // only; it never feeds the log.
                if epoch % (10 * self.config.eval_every) == 0 {
                    let full = self.evaluate_full(epoch)?;
                    observer.on_eval(epoch, &full);
                }
            }

            let record = EpochRecord {
                epoch,
                eps_loss: losses.eps,
                fidelity_loss: (self.config.mode == TrainMode::Shortcut).then_some(losses.fidelity),
                energy_distance: energy,
                chamfer: cham,
                seconds: started.elapsed().as_secs_f64(),
            };
            observer.on_epoch(&record);
            log.records.push(record);

            if eval_epoch {
                observer.on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(log)
    }
}
