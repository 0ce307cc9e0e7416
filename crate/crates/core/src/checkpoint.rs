//! Run-state persistence.
//!
//! A checkpoint captures everything a run needs to continue bitwise: the
//! full config, network parameters, optimizer moments and step counter, and
//! the positions of every random stream. Numeric payloads are stored as raw
//! little-endian bits so save/load is exact; the config travels as JSON
//! inside a length-prefixed section.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::net::DenoiserNet;
use crate::schedule::NoiseSchedule;
use crate::train::TrainConfig;

const MAGIC: [u8; 4] = *b"SDMC";
const VERSION: u32 = 1;
/// Upper bound on any length prefix; a corrupt header fails fast instead
/// of attempting a huge allocation.
const MAX_SECTION: u64 = 1 << 32;

/// Adam accumulators for one objective's sequence of steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptMoments {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Complete state of a training run after some number of epochs.
///
/// The denoiser and fidelity objectives each keep their own optimizer
/// accumulators (their gradient scales differ by orders of magnitude), so
/// both sets travel in the checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub epoch: u64,
    pub params: Vec<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub eps_opt: OptMoments,
    pub chain_opt: OptMoments,
    pub seed: u64,
    pub rng_positions: [u128; 6],
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64_slice(w: &mut impl Write, vs: &[f64]) -> std::io::Result<()> {
    write_u64(w, vs.len() as u64)?;
    for v in vs {
        write_f64(w, *v)?;
    }
    Ok(())
}

fn write_moments(w: &mut impl Write, ms: &OptMoments) -> std::io::Result<()> {
    write_u64(w, ms.step)?;
    write_f64_slice(w, &ms.m)?;
    write_f64_slice(w, &ms.v)
}

struct Decoder<R> {
    inner: R,
}

impl<R: Read> Decoder<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("file ends mid-record".into()))?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.bytes()?))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        if n > MAX_SECTION {
            return Err(Error::Checkpoint(format!(
                "{what} section claims {n} entries"
            )));
        }
        Ok(n as usize)
    }

    fn f64_vec(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.len(what)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    fn moments(&mut self, what: &str) -> Result<OptMoments> {
        Ok(OptMoments {
            step: self.u64()?,
            m: self.f64_vec(what)?,
            v: self.f64_vec(what)?,
        })
    }
}

impl Checkpoint {
    /// The network exactly as captured.
    pub fn rebuild_net(&self) -> Result<DenoiserNet> {
        let mut scratch_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = DenoiserNet::init(self.train.net, &mut scratch_rng)?;
        net.set_params_flat(&self.params)?;
        Ok(net)
    }

    /// The schedule the run trained against.
    pub fn rebuild_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.train.schedule)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let config = serde_json::to_vec(&self.train).expect("train config serializes infallibly");
        write_u64(w, config.len() as u64)?;
        w.write_all(&config)?;
        write_u64(w, self.epoch)?;
        write_u64(w, self.seed)?;
        write_f64(w, self.adam_beta1)?;
        write_f64(w, self.adam_beta2)?;
        write_f64(w, self.adam_epsilon)?;
        write_f64_slice(w, &self.params)?;
        write_moments(w, &self.eps_opt)?;
        write_moments(w, &self.chain_opt)?;
        for pos in self.rng_positions {
            w.write_all(&pos.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut d = Decoder {
            inner: BufReader::new(file),
        };
        let magic: [u8; 4] = d.bytes()?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:02x?}; not a checkpoint file"
            )));
        }
        let version = u32::from_le_bytes(d.bytes()?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version} (this build reads {VERSION})"
            )));
        }
        let config_len = d.len("config")?;
        let mut config_bytes = vec![0u8; config_len];
        d.inner
            .read_exact(&mut config_bytes)
            .map_err(|_| Error::Checkpoint("file ends mid-record".into()))?;
        let train: TrainConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| Error::Checkpoint(format!("config section: {e}")))?;

        let epoch = d.u64()?;
        let seed = d.u64()?;
        let adam_beta1 = d.f64()?;
        let adam_beta2 = d.f64()?;
        let adam_epsilon = d.f64()?;
        let params = d.f64_vec("params")?;
        let eps_opt = d.moments("eps optimizer")?;
        let chain_opt = d.moments("chain optimizer")?;
        let mut rng_positions = [0u128; 6];
        for pos in &mut rng_positions {
            *pos = d.u128()?;
        }
        let mut trailing = [0u8; 1];
        match d.inner.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => {
                return Err(Error::Checkpoint("trailing bytes after record".into()));
            }
            Err(e) => return Err(Error::io(path, e)),
        }

        for (name, opt) in [("eps", &eps_opt), ("chain", &chain_opt)] {
            if opt.m.len() != params.len() || opt.v.len() != params.len() {
                return Err(Error::Checkpoint(format!(
                    "{name} optimizer moments ({}, {}) do not match {} parameters",
                    opt.m.len(),
                    opt.v.len(),
                    params.len()
                )));
            }
        }
        Ok(Checkpoint {
            train,
            epoch,
            params,
            adam_beta1,
            adam_beta2,
            adam_epsilon,
            eps_opt,
            chain_opt,
            seed,
            rng_positions,
        })
    }
}
