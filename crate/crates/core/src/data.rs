//! Synthetic 2D point sets and their on-disk format.
//!
//! The bundled dataset is a single-arm spiral ("swirl"): angles are drawn by
//! inverse transform so the arm is covered densely at the outer end, points
//! are scaled into the unit disc, jittered, then normalized per coordinate to
//! zero mean and unit standard deviation. Generation is a pure function of
//! `(n, seed, jitter)`.
//!
//! Points travel as CSV with header `x,y`, one point per row, floats printed
//! in shortest round-trip form so save-then-load is bit exact. A flat
//! `key=value` sidecar (`<file>.meta`) carries provenance and the
//! normalization constants.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::normal_matrix;

const THETA_MIN: f64 = 0.5 * PI;
const THETA_MAX: f64 = 3.0 * PI;

/// Per-coordinate affine constants applied when a set was normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMeta {
    pub generator: String,
    pub seed: u64,
    pub jitter: f64,
    pub norm: Option<NormStats>,
}

impl Default for PointMeta {
    fn default() -> Self {
        PointMeta {
            generator: "unknown".into(),
            seed: 0,
            jitter: 0.0,
            norm: None,
        }
    }
}

/// A batch of 2D points (rows) plus provenance.
#[derive(Debug, Clone)]
pub struct PointSet {
    pub points: Array2<f64>,
    pub meta: PointMeta,
}

impl PointSet {
    pub fn new(points: Array2<f64>, meta: PointMeta) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::Argument("point set must be non-empty".into()));
        }
        if points.ncols() != 2 {
            return Err(Error::Argument(format!(
                "points must have 2 columns, got {}",
                points.ncols()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "point set contains non-finite values".into(),
            ));
        }
        Ok(PointSet { points, meta })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Angle draws for the spiral: theta = lo + (hi - lo) * sqrt(u), u ~ U[0,1].
/// The sqrt tilts mass toward large radii, where the arm is longest.
fn sample_thetas(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| THETA_MIN + (THETA_MAX - THETA_MIN) * rng.gen::<f64>().sqrt())
        .collect()
}

/// Generate `n` spiral points. `jitter` is the standard deviation of the
/// isotropic noise added before normalization.
pub fn generate_swirl(n: usize, seed: u64, jitter: f64) -> Result<PointSet> {
    if n == 0 {
        return Err(Error::Argument("cannot generate an empty point set".into()));
    }
    if !jitter.is_finite() || jitter < 0.0 {
        return Err(Error::Argument(format!(
            "jitter must be >= 0, got {jitter}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thetas = sample_thetas(&mut rng, n);
    let noise = normal_matrix(&mut rng, n, 2);

    let mut points = Array2::zeros((n, 2));
    for (i, theta) in thetas.iter().enumerate() {
        points[[i, 0]] = theta * theta.cos() / THETA_MAX + jitter * noise[[i, 0]];
        points[[i, 1]] = theta * theta.sin() / THETA_MAX + jitter * noise[[i, 1]];
    }
    let norm = normalize_in_place(&mut points);

    PointSet::new(
        points,
        PointMeta {
            generator: "swirl".into(),
            seed,
            jitter,
            norm: Some(norm),
        },
    )
}

/// Shift and scale each coordinate to mean 0 and (population) std 1.
/// Returns the constants that were removed.
fn normalize_in_place(points: &mut Array2<f64>) -> NormStats {
    let n = points.nrows() as f64;
    let mut mean = [0.0; 2];
    let mut std = [0.0; 2];
    for c in 0..2 {
        let col = points.column(c);
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean[c] = m;
        std[c] = var.sqrt();
        let s = std[c];
        points.column_mut(c).mapv_inplace(|v| (v - m) / s);
    }
    NormStats { mean, std }
}

pub fn save_points(set: &PointSet, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut out = String::with_capacity(set.len() * 48 + 4);
    out.push_str("x,y\n");
    for row in set.points.rows() {
        // `{}` on f64 is shortest round-trip, so load_points restores bits.
        let _ = writeln!(out, "{},{}", row[0], row[1]);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    write_sidecar(set, &sidecar_path(path))
}

pub fn load_points(path: &Path) -> Result<PointSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file, expected header `x,y`"))?;
    if header.1.trim_end() != "x,y" {
        return Err(Error::parse(
            path,
            1,
            format!("expected header `x,y`, got `{}`", header.1),
        ));
    }
    let mut rows: Vec<[f64; 2]> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::parse(path, lineno, "expected exactly 2 fields"));
        };
        let x: f64 = a
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad float `{a}`")))?;
        let y: f64 = b
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad float `{b}`")))?;
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::parse(path, lineno, "non-finite value"));
        }
        rows.push([x, y]);
    }
    if rows.is_empty() {
        return Err(Error::parse(path, 2, "no data rows"));
    }
    let mut points = Array2::zeros((rows.len(), 2));
    for (i, row) in rows.iter().enumerate() {
        points[[i, 0]] = row[0];
        points[[i, 1]] = row[1];
    }
    let meta = read_sidecar(&sidecar_path(path)).unwrap_or_default();
    PointSet::new(points, meta)
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta");
    os.into()
}

fn write_sidecar(set: &PointSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "generator={}", set.meta.generator);
    let _ = writeln!(out, "n={}", set.len());
    let _ = writeln!(out, "seed={}", set.meta.seed);
    let _ = writeln!(out, "jitter={}", set.meta.jitter);
    if let Some(norm) = &set.meta.norm {
        let _ = writeln!(out, "mean_x={}", norm.mean[0]);
        let _ = writeln!(out, "mean_y={}", norm.mean[1]);
        let _ = writeln!(out, "std_x={}", norm.std[0]);
        let _ = writeln!(out, "std_y={}", norm.std[1]);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_sidecar(path: &Path) -> Option<PointMeta> {
    let text = fs::read_to_string(path).ok()?;
    let mut meta = PointMeta::default();
    let mut mean = [None; 2];
    let mut std = [None; 2];
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        match key {
            "generator" => meta.generator = value.to_string(),
            "seed" => meta.seed = value.parse().ok()?,
            "jitter" => meta.jitter = value.parse().ok()?,
            "mean_x" => mean[0] = value.parse().ok(),
            "mean_y" => mean[1] = value.parse().ok(),
            "std_x" => std[0] = value.parse().ok(),
            "std_y" => std[1] = value.parse().ok(),
            _ => {}
        }
    }
    if let ([Some(mx), Some(my)], [Some(sx), Some(sy)]) = (mean, std) {
        meta.norm = Some(NormStats {
            mean: [mx, my],
            std: [sx, sy],
        });
    }
    Some(meta)
}
