//! Acceptance suite: one test per release criterion, each printing a single
//! PASS/FAIL line with the measured values and the pinned bound.
//!
//! Criteria 5, 6, and 8 share one expensive fixture (a shortcut-trained and
//! a baseline-trained model at the default configuration); everything else
//! runs on small instances in seconds.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdmc_core::diffusion::posterior_mean;
use sdmc_core::rng::normal_matrix;
use sdmc_core::{
    ancestral_step, chain_backward, energy_noise_floor, eps_loss, evaluate, fidelity_loss,
    forward_noise, generate_swirl, run_chain_recorded, sample_full, sample_shortcut, ChainGradMode,
    ChainSpec, Denoiser, DenoiserNet, NetConfig, NoiseSchedule, NullObserver, PointSet, Result,
    ScheduleConfig, TrainConfig, TrainMode, Trainer,
};

const FD_STEP: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
const POSTERIOR_REL_TOL: f64 = 1e-10;
const UNIT_ENERGY_TOL: f64 = 1e-12;
const MERGE_REL_TOL: f64 = 1e-10;
const QUALITY_FLOOR_MULTIPLE: f64 = 3.0;
const FULL_SAMPLING_HEADROOM: f64 = 1.25;
const SPEEDUP_RATIO_BOUND: f64 = 0.12; // 1/10 of the step count, +20% measurement slack

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::build(ScheduleConfig::default()).unwrap()
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------------------
// criterion 1: schedule algebra on the default grid
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_schedule_algebra() {
    let sch = default_schedule();
    let t_max = sch.num_steps();

    let mut max_unit_dev: f64 = 0.0;
    for t in 0..=t_max {
        let (a, s) = (sch.alpha(t), sch.sigma(t));
        max_unit_dev = max_unit_dev.max((a * a + s * s - 1.0).abs());
    }

    // Noise accumulated in one hop s->t must equal the noise of reaching t
    // directly: (a_ts * sigma_s^2 / sigma_t)^2 + var_ts * sigma_s^2 / sigma_t^2
    // = sigma_s^2.
    let mut max_merge_dev: f64 = 0.0;
    for s in 0..t_max {
        for t in (s + 1)..=t_max {
            let (a_ts, var_ts) = sch.transition(s, t).unwrap();
            let sig_s2 = sch.sigma(s) * sch.sigma(s);
            let sig_t = sch.sigma(t);
            let merged = (a_ts * sig_s2 / sig_t).powi(2) + var_ts * sig_s2 / (sig_t * sig_t);
            max_merge_dev = max_merge_dev.max(rel_err(merged, sig_s2, f64::MIN_POSITIVE));
        }
    }

    let ok = max_unit_dev <= UNIT_ENERGY_TOL && max_merge_dev <= MERGE_REL_TOL;
    println!(
        "criterion 1 (schedule algebra): {} — max |alpha^2+sigma^2-1| = {max_unit_dev:.3e} \
         (bound {UNIT_ENERGY_TOL:.0e}), max merged-variance rel dev = {max_merge_dev:.3e} \
         (bound {MERGE_REL_TOL:.0e})",
        verdict(ok)
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// criterion 2: analytic gradients vs central finite differences
// ---------------------------------------------------------------------------

fn tiny_net(seed: u64) -> DenoiserNet {
    let config = NetConfig {
        input_dim: 2,
        hidden_dim: 8,
        n_freqs: 2,
        time_embed: true,
        n_time_freqs: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenoiserNet::init(config, &mut rng).unwrap()
}

/// Max relative error between an analytic gradient and central differences
/// of `loss` over the net's parameters.
fn max_param_grad_err(
    net: &DenoiserNet,
    analytic: &[f64],
    mut loss: impl FnMut(&DenoiserNet) -> f64,
) -> f64 {
    let base = net.params_flat();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + FD_STEP;
        probe.set_params_flat(&p).unwrap();
        let up = loss(&probe);
        p[i] = base[i] - FD_STEP;
        probe.set_params_flat(&p).unwrap();
        let down = loss(&probe);
        let fd = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(*a, fd, 1e-4));
    }
    worst
}

#[test]
fn criterion_2_gradient_correctness() {
    let sch = default_schedule();
    let net = tiny_net(41);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x0 = normal_matrix(&mut rng, 4, 2);
    let eps = normal_matrix(&mut rng, 4, 2);
    let ts: Vec<usize> = (0..4).map(|_| rng.gen_range(1..=sch.num_steps())).collect();

    // (a) parameter gradients of the noise-prediction loss.
    let (_, grads) = eps_loss(&net, &x0, &ts, &eps, false, &sch).unwrap();
    let analytic: Vec<f64> = grads.iter().copied().collect();
    let eps_err = max_param_grad_err(&net, &analytic, |n| {
        eps_loss(n, &x0, &ts, &eps, false, &sch).unwrap().0
    });

    // (b) input gradients of a linear readout of the net output.
    let readout = normal_matrix(&mut rng, 4, 2);
    let x_in = normal_matrix(&mut rng, 4, 2);
    let (_, tape) = net.forward(&x_in, &ts, &sch).unwrap();
    let (_, input_grads) = net.backward(&tape, &readout).unwrap();
    let mut input_err: f64 = 0.0;
    for r in 0..4 {
        for c in 0..2 {
            let mut probe = x_in.clone();
            probe[[r, c]] = x_in[[r, c]] + FD_STEP;
            let up = (net.forward(&probe, &ts, &sch).unwrap().0 * &readout).sum();
            probe[[r, c]] = x_in[[r, c]] - FD_STEP;
            let down = (net.forward(&probe, &ts, &sch).unwrap().0 * &readout).sum();
            let fd = (up - down) / (2.0 * FD_STEP);
            input_err = input_err.max(rel_err(input_grads[[r, c]], fd, 1e-4));
        }
    }

    // (c) gradients through a full K=3 chain of the reconstruction loss.
    let spec = ChainSpec::new(vec![200, 90, 25], sch.num_steps()).unwrap();
    let x_init = normal_matrix(&mut rng, 4, 2);
    let noises: Vec<Array2<f64>> = (0..3).map(|_| normal_matrix(&mut rng, 4, 2)).collect();
    let chain_loss = |n: &DenoiserNet| {
        let chain = run_chain_recorded(n, &x_init, &spec, &noises, &sch).unwrap();
        fidelity_loss(&x0, chain.output()).unwrap().0
    };
    let chain = run_chain_recorded(&net, &x_init, &spec, &noises, &sch).unwrap();
    let (_, grad_out) = fidelity_loss(&x0, chain.output()).unwrap();
    let grads = chain_backward(&net, &chain, &grad_out, ChainGradMode::Full, &sch).unwrap();
    let analytic: Vec<f64> = grads.iter().copied().collect();
    let chain_err = max_param_grad_err(&net, &analytic, chain_loss);

    let worst = eps_err.max(input_err).max(chain_err);
    let ok = worst <= GRAD_REL_TOL;
    println!(
        "criterion 2 (gradient correctness): {} — max rel err: params {eps_err:.3e}, \
         inputs {input_err:.3e}, K=3 chain {chain_err:.3e} (bound {GRAD_REL_TOL:.0e})",
        verdict(ok)
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// criterion 3: posterior mean equals its signal/noise expansion
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_posterior_equivalence() {
    let sch = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let s = rng.gen_range(0..sch.num_steps());
        let t = rng.gen_range(s + 1..=sch.num_steps());
        let x0 = normal_matrix(&mut rng, 1, 2);
        let eps = normal_matrix(&mut rng, 1, 2);
        let x_t = forward_noise(&x0, t, &eps, &sch).unwrap();
        let direct = posterior_mean(&x_t, &x0, s, t, &sch).unwrap();

        let (a_ts, _) = sch.transition(s, t).unwrap();
        let sig_s2 = sch.sigma(s) * sch.sigma(s);
        let coeff = a_ts * sig_s2 / sch.sigma(t);
        for c in 0..2 {
            let expanded = sch.alpha(s) * x0[[0, c]] + coeff * eps[[0, c]];
            worst = worst.max(rel_err(direct[[0, c]], expanded, 1e-12));
        }
    }
    let ok = worst <= POSTERIOR_REL_TOL;
    println!(
        "criterion 3 (posterior equivalence): {} — max rel dev {worst:.3e} over 1000 \
         random (s,t,x0,eps) instances (bound {POSTERIOR_REL_TOL:.0e})",
        verdict(ok)
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// criterion 4: one oracle-driven reverse step reproduces the marginal
// ---------------------------------------------------------------------------

/// Denoiser that knows the clean batch, so its noise estimate is exact.
struct OracleDenoiser {
    x0: Array2<f64>,
}

impl Denoiser for OracleDenoiser {
    fn predict_eps(
        &self,
        x: &Array2<f64>,
        ts: &[usize],
        sch: &NoiseSchedule,
    ) -> Result<Array2<f64>> {
        let mut eps = Array2::zeros(x.dim());
        for (r, &t) in ts.iter().enumerate() {
            for c in 0..x.ncols() {
                eps[[r, c]] = (x[[r, c]] - sch.alpha(t) * self.x0[[r, c]]) / sch.sigma(t);
            }
        }
        Ok(eps)
    }
}

#[test]
fn criterion_4_marginal_consistency() {
    let sch = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = 100_000usize;
    let mut worst_sigmas: f64 = 0.0;

    for _ in 0..10 {
        let s = rng.gen_range(1..sch.num_steps());
        let t = rng.gen_range(s + 1..=sch.num_steps());
        let point = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
        let x0 = Array2::from_shape_fn((draws, 2), |(_, c)| point[c]);
        let oracle = OracleDenoiser { x0: x0.clone() };

        let eps = normal_matrix(&mut rng, draws, 2);
        let x_t = forward_noise(&x0, t, &eps, &sch).unwrap();
        let step_noise = normal_matrix(&mut rng, draws, 2);
        let x_s = ancestral_step(&oracle, &x_t, s, t, &step_noise, &sch).unwrap();

        let sig_s = sch.sigma(s);
        let var_target = sig_s * sig_s;
        let mean_se = sig_s / (draws as f64).sqrt();
        let var_se = var_target * (2.0 / (draws as f64 - 1.0)).sqrt();
        for c in 0..2 {
            let col = x_s.column(c);
            let mean = col.sum() / draws as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / draws as f64;
            worst_sigmas = worst_sigmas
                .max((mean - sch.alpha(s) * point[c]).abs() / mean_se)
                .max((var - var_target).abs() / var_se);
        }
    }

    let ok = worst_sigmas <= 3.0;
    println!(
        "criterion 4 (marginal consistency): {} — worst moment deviation {worst_sigmas:.2} \
         standard errors over 10 random (s,t) pairs x {draws} draws (bound 3)",
        verdict(ok)
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// shared trained fixture for criteria 5, 6, 8
// ---------------------------------------------------------------------------

struct Fixture {
    schedule: NoiseSchedule,
    shortcut_net: DenoiserNet,
    baseline_net: DenoiserNet,
    held: PointSet,
    floor: f64,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

/// Sampling seeds used to estimate each model's distance to the held-out
/// set; fixed so the measurement is reproducible.
const SAMPLE_SEEDS: [u64; 3] = [501, 502, 503];
const EVAL_N: usize = 1024;

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let data = generate_swirl(1024, 7, 0.05).unwrap();
        let held = generate_swirl(1024, 1007, 0.05).unwrap();
        let floor_set = generate_swirl(2048, 2007, 0.05).unwrap();
        let floor = energy_noise_floor(&floor_set).unwrap();

        // Stock configuration; the evaluation cadence only controls logging
        // (metrics sample from derived seeds), so sparse evals do not change
        // the learned parameters.
        let mut config = TrainConfig::default();
        config.eval_every = config.epochs;
        config.eval_n = 64;

        let mut shortcut = Trainer::new(config.clone(), data.clone()).unwrap();
        shortcut.fit(&mut NullObserver).unwrap();

        let mut baseline_cfg = config;
        baseline_cfg.mode = TrainMode::Baseline;
        let mut baseline = Trainer::new(baseline_cfg, data).unwrap();
        baseline.fit(&mut NullObserver).unwrap();

        Fixture {
            schedule: shortcut.schedule().clone(),
            shortcut_net: shortcut.net().clone(),
            baseline_net: baseline.net().clone(),
            held,
            floor,
        }
    })
}

/// Mean energy distance to the held-out set over the fixed sampling seeds.
fn mean_energy(fx: &Fixture, net: &DenoiserNet, steps: Option<usize>) -> f64 {
    let total: f64 = SAMPLE_SEEDS
        .iter()
        .map(|&seed| {
            let set = match steps {
                Some(k) => {
                    let spec = ChainSpec::evenly_spaced(k, fx.schedule.num_steps()).unwrap();
                    sample_shortcut(net, EVAL_N, &spec, &fx.schedule, seed).unwrap()
                }
                None => sample_full(net, EVAL_N, &fx.schedule, seed).unwrap(),
            };
            evaluate(&set, &fx.held, None).unwrap().energy_distance
        })
        .sum();
    total / SAMPLE_SEEDS.len() as f64
}

// ---------------------------------------------------------------------------
// criterion 5: few-step samples land near the data distribution
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_few_step_sample_quality() {
    let fx = fixture();
    let energy = mean_energy(fx, &fx.shortcut_net, Some(10));
    let bound = QUALITY_FLOOR_MULTIPLE * fx.floor;
    let ok = energy <= bound;
    println!(
        "criterion 5 (few-step sample quality): {} — 10-step energy distance {energy:.4} \
         vs bound {bound:.4} ({QUALITY_FLOOR_MULTIPLE} x noise floor {:.4})",
        verdict(ok),
        fx.floor
    );
    assert!(
        ok,
        "10-step energy {energy:.4} above {bound:.4}; the chain objective shapes marginals \
         only indirectly and does not reach the resampling floor at this epoch budget"
    );
}

// ---------------------------------------------------------------------------
// criterion 6: chain-trained model beats the baseline it extends
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_baseline_comparison() {
    let fx = fixture();
    let short_10 = mean_energy(fx, &fx.shortcut_net, Some(10));
    let base_10 = mean_energy(fx, &fx.baseline_net, Some(10));
    let short_full = mean_energy(fx, &fx.shortcut_net, None);
    let base_full = mean_energy(fx, &fx.baseline_net, None);

    let few_ok = short_10 <= base_10;
    let full_ok = short_full <= FULL_SAMPLING_HEADROOM * base_full;
    let ok = few_ok && full_ok;
    println!(
        "criterion 6 (baseline comparison): {} — 10-step energy {short_10:.4} vs baseline \
         {base_10:.4} (must not exceed it); full-walk energy {short_full:.4} vs baseline \
         {base_full:.4} (bound {FULL_SAMPLING_HEADROOM} x)",
        verdict(ok)
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// criterion 7: the command surface is deterministic end to end
// ---------------------------------------------------------------------------

fn run_pipeline(dir: &Path) {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_owned();
    let steps: Vec<Vec<String>> = vec![
        vec![
            "gen-data".into(),
            "--out".into(),
            p("real.csv"),
            "--n".into(),
            "256".into(),
            "--seed".into(),
            "7".into(),
        ],
        vec![
            "train".into(),
            "--data".into(),
            p("real.csv"),
            "--out-dir".into(),
            p("run"),
            "--epochs".into(),
            "50".into(),
            "--eval-every".into(),
            "10".into(),
            "--eval-n".into(),
            "64".into(),
            "--quiet".into(),
        ],
        vec![
            "sample".into(),
            "--checkpoint".into(),
            p("run/model.ckpt"),
            "--out".into(),
            p("sample.csv"),
            "--n".into(),
            "256".into(),
            "--steps".into(),
            "10".into(),
            "--seed".into(),
            "7".into(),
        ],
        vec![
            "eval".into(),
            "--real".into(),
            p("real.csv"),
            "--gen".into(),
            p("sample.csv"),
            "--sampler".into(),
            "shortcut-10".into(),
            "--out".into(),
            p("report.json"),
        ],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_sdmc"))
            .args(&args)
            .output()
            .expect("binary runs");
        assert!(
            out.status.success(),
            "step {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

/// The per-epoch wall-clock column is the one field real time is allowed to
/// touch; everything else must match bit for bit.
fn strip_seconds(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            let (rest, _) = line.rsplit_once(',').expect("well-formed log row");
            rest
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn criterion_7_end_to_end_determinism() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    run_pipeline(&a);
    run_pipeline(&b);

    let mut identical = true;
    let mut detail = Vec::new();
    for name in [
        "real.csv",
        "real.csv.meta",
        "run/model.ckpt",
        "sample.csv",
        "report.json",
    ] {
        let same = std::fs::read(a.join(name)).unwrap() == std::fs::read(b.join(name)).unwrap();
        identical &= same;
        if !same {
            detail.push(name.to_string());
        }
    }
    let log_a = std::fs::read_to_string(a.join("run/trainlog.csv")).unwrap();
    let log_b = std::fs::read_to_string(b.join("run/trainlog.csv")).unwrap();
    let logs_same = strip_seconds(&log_a) == strip_seconds(&log_b);
    identical &= logs_same;
    if !logs_same {
        detail.push("run/trainlog.csv".into());
    }

    println!(
        "criterion 7 (end-to-end determinism): {} — checkpoint, samples, reports, and logs \
         (wall-clock column aside) byte-identical across two seeded pipelines{}",
        verdict(identical),
        if detail.is_empty() {
            String::new()
        } else {
            format!("; mismatched: {}", detail.join(", "))
        }
    );
    assert!(identical);
}

// ---------------------------------------------------------------------------
// criterion 8: 10-step sampling is at least an order of magnitude faster
// ---------------------------------------------------------------------------

fn best_of<T>(repeats: usize, mut f: impl FnMut() -> T) -> Duration {
    (0..repeats)
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(f());
            start.elapsed()
        })
        .min()
        .unwrap()
}

#[test]
fn criterion_8_sampling_speedup() {
    let fx = fixture();
    let spec = ChainSpec::evenly_spaced(10, fx.schedule.num_steps()).unwrap();
    let short = best_of(5, || {
        sample_shortcut(&fx.shortcut_net, 1024, &spec, &fx.schedule, 99).unwrap()
    });
    let full = best_of(5, || {
        sample_full(&fx.shortcut_net, 1024, &fx.schedule, 99).unwrap()
    });

    let ratio = short.as_secs_f64() / full.as_secs_f64();
    let ok = ratio <= SPEEDUP_RATIO_BOUND;
    println!(
        "criterion 8 (sampling speedup): {} — 10-step {:.1} ms vs 200-step {:.1} ms, \
         ratio {ratio:.3} (bound {SPEEDUP_RATIO_BOUND})",
        verdict(ok),
        short.as_secs_f64() * 1e3,
        full.as_secs_f64() * 1e3
    );
    assert!(ok);
}
