//! Sample-quality metrics and snapshot exports.
//!
//! Generated batches are scored against held-out real points with two
//! complementary metrics: energy distance (a distribution-level discrepancy
//! that goes to zero only when the two clouds match in law) and symmetric
//! chamfer distance (nearest-neighbour geometry, insensitive to relative
//! density). Pair sums are compensated so identical inputs score exactly
//! zero instead of accumulating rounding noise over millions of pairs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{save_points, PointMeta, PointSet};
use crate::diffusion::{sample_full_traced, shortcut_chain_from_seed, ChainSpec, ChainState};
use crate::error::{Error, Result};
use crate::net::Denoiser;
use crate::schedule::NoiseSchedule;

/// Kahan–Neumaier compensated accumulator.
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(self) -> f64 {
        self.sum + self.comp
    }
}

fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_metric_inputs(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Argument("metrics need non-empty point sets".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Argument(format!(
            "point sets have {} and {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Mean pairwise distance over all ordered pairs, including i = j.
fn mean_cross_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut acc = CompensatedSum::default();
    for ra in a.rows() {
        for rb in b.rows() {
            acc.add(euclidean(ra, rb));
        }
    }
    acc.total() / (a.nrows() as f64 * b.nrows() as f64)
}

/// Energy distance between two point clouds:
/// `2 E||A - B|| - E||A - A'|| - E||B - B'||`, each expectation taken over
/// all ordered pairs. Non-negative, and exactly zero when the inputs are
/// bitwise identical.
pub fn energy_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_metric_inputs(a, b)?;
    let cross = mean_cross_distance(a, b);
    let within_a = mean_cross_distance(a, a);
    let within_b = mean_cross_distance(b, b);
    Ok(2.0 * cross - within_a - within_b)
}

/// Symmetric chamfer distance: mean nearest-neighbour distance from each
/// set to the other, summed.
pub fn chamfer_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_metric_inputs(a, b)?;
    let one_way = |from: &Array2<f64>, to: &Array2<f64>| {
        let mut acc = CompensatedSum::default();
        for rf in from.rows() {
            let nearest = to
                .rows()
                .into_iter()
                .map(|rt| euclidean(rf, rt))
                .fold(f64::INFINITY, f64::min);
            acc.add(nearest);
        }
        acc.total() / from.nrows() as f64
    };
    Ok(one_way(a, b) + one_way(b, a))
}

/// Sampling-noise scale of the energy distance on this dataset: the score
/// between the two halves of the set. Two faithful generators cannot be
/// distinguished much below this value.
pub fn energy_noise_floor(real: &PointSet) -> Result<f64> {
    let n = real.len();
    if n < 2 {
        return Err(Error::Argument(
            "noise floor needs at least two points".into(),
        ));
    }
    let half = n / 2;
    let first = real.points.slice(ndarray::s![..half, ..]).to_owned();
    let second = real.points.slice(ndarray::s![half.., ..]).to_owned();
    energy_distance(&first, &second)
}

/// Which sampler produced a generated batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// Every-level posterior walk.
    Full,
    /// K-level shortcut chain.
    Shortcut(usize),
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerKind::Full => write!(f, "full"),
            SamplerKind::Shortcut(k) => write!(f, "shortcut-{k}"),
        }
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(SamplerKind::Full);
        }
        if let Some(k) = s.strip_prefix("shortcut-") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::Argument(format!("bad sampler name: {s}")))?;
            return Ok(SamplerKind::Shortcut(k));
        }
        Err(Error::Argument(format!(
            "bad sampler name: {s} (expected \"full\" or \"shortcut-<k>\")"
        )))
    }
}

impl SamplerKind {
    /// Short token used in snapshot filenames.
    pub fn token(&self) -> &'static str {
        match self {
            SamplerKind::Full => "full",
            SamplerKind::Shortcut(_) => "shortcut",
        }
    }
}

impl Serialize for SamplerKind {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SamplerKind {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Scores of one generated batch against a real reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub energy_distance: f64,
    pub chamfer: f64,
    pub n_gen: usize,
    pub n_real: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sampler: Option<SamplerKind>,
}

/// Score a generated set against a real one.
pub fn evaluate(
    generated: &PointSet,
    real: &PointSet,
    sampler: Option<SamplerKind>,
) -> Result<MetricReport> {
    Ok(MetricReport {
        energy_distance: energy_distance(&generated.points, &real.points)?,
        chamfer: chamfer_distance(&generated.points, &real.points)?,
        n_gen: generated.len(),
        n_real: real.len(),
        sampler,
    })
}

/// Intermediate batches of a shortcut chain, labelled by steps taken:
/// label 0 is the initial state, label K the final clean prediction.
pub fn shortcut_snapshots(chain: &ChainState) -> Vec<(usize, Array2<f64>)> {
    let mut snaps: Vec<(usize, Array2<f64>)> = chain
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.clone()))
        .collect();
    snaps.push((chain.spec.len(), chain.output().clone()));
    snaps
}

/// Run a seeded shortcut chain and return its labelled snapshots.
pub fn shortcut_snapshot_run<D: Denoiser + ?Sized>(
    model: &D,
    n: usize,
    spec: &ChainSpec,
    sch: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<(usize, Array2<f64>)>> {
    let chain = shortcut_chain_from_seed(model, n, spec, sch, seed)?;
    Ok(shortcut_snapshots(&chain))
}

/// Run the full sampler and capture the state after each requested number
/// of completed steps.
pub fn full_snapshot_run<D: Denoiser + ?Sized>(
    model: &D,
    n: usize,
    sch: &NoiseSchedule,
    seed: u64,
    record_at: &[usize],
) -> Result<Vec<(usize, Array2<f64>)>> {
    let (_, snaps) = sample_full_traced(model, n, sch, seed, record_at)?;
    Ok(snaps)
}

/// Write labelled snapshots as `snap_<sampler>_<k>.csv` under `dir` and
/// return the paths in label order.
pub fn save_snapshots(
    dir: &Path,
    sampler: SamplerKind,
    seed: u64,
    snaps: &[(usize, Array2<f64>)],
) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(snaps.len());
    for (k, points) in snaps {
        let path = dir.join(format!("snap_{}_{k}.csv", sampler.token()));
        let set = PointSet::new(
            points.clone(),
            PointMeta {
                generator: format!("snapshot_{sampler}_after_{k}"),
                seed,
                ..Default::default()
            },
        )?;
        save_points(&set, &path)?;
        paths.push(path);
    }
    Ok(paths)
}
