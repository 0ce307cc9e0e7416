//! Implementations of the five subcommands.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use sdmc_core::checkpoint::Checkpoint;
use sdmc_core::data::{generate_swirl, load_points, save_points};
use sdmc_core::diffusion::{sample_full_traced, sample_shortcut, ChainSpec};
use sdmc_core::error::{Error, Result};
use sdmc_core::eval::{
    energy_noise_floor, evaluate, save_snapshots, shortcut_snapshot_run, MetricReport, SamplerKind,
};
use sdmc_core::train::{EpochRecord, TrainConfig, TrainLog, TrainObserver, Trainer};

use crate::config::PartialConfig;
use crate::plot::{render_grid, write_svg, Panel};

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output CSV path (a .meta sidecar is written next to it).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1024)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Gaussian jitter added before normalization.
    #[arg(long, default_value_t = 0.05)]
    pub jitter: f64,
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let set = generate_swirl(args.n, args.seed, args.jitter)?;
    save_points(&set, &args.out)?;
    println!(
        "wrote {} points to {} (seed {}, jitter {})",
        set.len(),
        args.out.display(),
        args.seed,
        args.jitter
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training points (CSV from gen-data).
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for trainlog.csv and model.ckpt.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Flat JSON config; flags still override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint (only --epochs may change).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// baseline | shortcut
    #[arg(long)]
    pub mode: Option<String>,
    /// Number of diffusion levels.
    #[arg(long = "T")]
    pub t: Option<usize>,
    /// Chain length.
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub gamma_min: Option<f64>,
    #[arg(long)]
    pub gamma_max: Option<f64>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// 0 trains full-batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight on the chain reconstruction loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// full | last_step
    #[arg(long)]
    pub chain_grad: Option<String>,
    /// teacher_forced | pure_noise
    #[arg(long)]
    pub chain_init: Option<String>,
    #[arg(long)]
    pub weighted_eps_loss: bool,
    #[arg(long)]
    pub combined_step: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Points generated per evaluation.
    #[arg(long)]
    pub eval_n: Option<usize>,
    /// Suppress progress lines.
    #[arg(long)]
    pub quiet: bool,
}

impl TrainArgs {
    fn apply_flags(&self, config: &mut TrainConfig) -> Result<()> {
        if let Some(v) = &self.mode {
            config.mode = v.parse()?;
        }
        if let Some(v) = self.t {
            config.schedule.num_steps = v;
        }
        if let Some(v) = self.k {
            config.chain_len = v;
        }
        if let Some(v) = self.gamma_min {
            config.schedule.gamma_min = v;
        }
        if let Some(v) = self.gamma_max {
            config.schedule.gamma_max = v;
        }
        if let Some(v) = self.hidden_dim {
            config.net.hidden_dim = v;
        }
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.lr {
            config.lr = v;
        }
        if let Some(v) = self.lambda {
            config.lambda_fidelity = v;
        }
        if let Some(v) = &self.chain_grad {
            config.chain_grad = v.parse()?;
        }
        if let Some(v) = &self.chain_init {
            config.chain_init = v.parse()?;
        }
        if self.weighted_eps_loss {
            config.weighted_eps_loss = true;
        }
        if self.combined_step {
            config.combined_step = true;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.eval_every {
            config.eval_every = v;
        }
        if let Some(v) = self.eval_n {
            config.eval_n = v;
        }
        Ok(())
    }

    fn reject_overrides_on_resume(&self) -> Result<()> {
        let frozen = [
            ("--config", self.config.is_some()),
            ("--mode", self.mode.is_some()),
            ("--T", self.t.is_some()),
            ("--K", self.k.is_some()),
            ("--gamma-min", self.gamma_min.is_some()),
            ("--gamma-max", self.gamma_max.is_some()),
            ("--hidden-dim", self.hidden_dim.is_some()),
            ("--batch-size", self.batch_size.is_some()),
            ("--lr", self.lr.is_some()),
            ("--lambda", self.lambda.is_some()),
            ("--chain-grad", self.chain_grad.is_some()),
            ("--chain-init", self.chain_init.is_some()),
            ("--weighted-eps-loss", self.weighted_eps_loss),
            ("--combined-step", self.combined_step),
            ("--seed", self.seed.is_some()),
            ("--eval-every", self.eval_every.is_some()),
            ("--eval-n", self.eval_n.is_some()),
        ];
        if let Some((flag, _)) = frozen.iter().find(|(_, set)| *set) {
            return Err(Error::Argument(format!(
                "{flag} cannot be combined with --resume; the checkpoint fixes the run \
                 (--epochs is the only override)"
            )));
        }
        Ok(())
    }
}

struct CliObserver {
    quiet: bool,
    total_epochs: usize,
    checkpoint_path: PathBuf,
    records: Vec<EpochRecord>,
}

impl TrainObserver for CliObserver {
    fn on_epoch(&mut self, record: &EpochRecord) {
        if !self.quiet && record.energy_distance.is_some() {
            let fid = record
                .fidelity_loss
                .map(|f| format!("  fid {f:.4}"))
                .unwrap_or_default();
            println!(
                "epoch {:>5}/{}  eps {:.4}{}  energy {:.4}  chamfer {:.4}  {:.2}s",
                record.epoch,
                self.total_epochs,
                record.eps_loss,
                fid,
                record.energy_distance.unwrap_or(f64::NAN),
                record.chamfer.unwrap_or(f64::NAN),
                record.seconds
            );
        }
        self.records.push(record.clone());
    }

    fn on_eval(&mut self, epoch: usize, report: &MetricReport) {
        if !self.quiet && report.sampler == Some(SamplerKind::Full) {
            println!(
                "epoch {:>5}  [full sampler] energy {:.4}  chamfer {:.4}",
                epoch, report.energy_distance, report.chamfer
            );
        }
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        checkpoint.save(&self.checkpoint_path)
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let data = load_points(&args.data)?;
    let mut trainer = if let Some(resume) = &args.resume {
        args.reject_overrides_on_resume()?;
        let mut ckpt = Checkpoint::load(resume)?;
        if let Some(epochs) = args.epochs {
            ckpt.train.epochs = epochs;
        }
        Trainer::from_checkpoint(&ckpt, data)?
    } else {
        let mut config = TrainConfig::default();
        if let Some(path) = &args.config {
            PartialConfig::load(path)?.apply(&mut config)?;
        }
        args.apply_flags(&mut config)?;
        Trainer::new(config, data)?
    };

    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let mut observer = CliObserver {
        quiet: args.quiet,
        total_epochs: trainer.config().epochs,
        checkpoint_path: args.out_dir.join("model.ckpt"),
        records: Vec::new(),
    };
    if !args.quiet {
        println!(
            "training {} for {} epochs on {} points (seed {})",
            trainer.config().mode,
            trainer.config().epochs,
            trainer.data().len(),
            trainer.config().seed
        );
    }

    let outcome = trainer.fit(&mut observer);
    // Persist whatever got logged even when the run aborts; the rolling
    // checkpoint from the last evaluation epoch is the recovery point.
    let log = TrainLog {
        records: observer.records,
    };
    log.write_csv(&args.out_dir.join("trainlog.csv"))?;
    outcome?;

    if !args.quiet {
        println!(
            "done: {} epochs; wrote {} and {}",
            trainer.epoch(),
            args.out_dir.join("trainlog.csv").display(),
            args.out_dir.join("model.ckpt").display()
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1024)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Chain length, or "full" for the every-level sampler.
    #[arg(long, default_value = "10")]
    pub steps: String,
    /// Also write intermediate states as snap_<sampler>_<k>.csv here.
    #[arg(long)]
    pub snapshots: Option<PathBuf>,
    /// Step counts to snapshot with --steps full (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub snapshot_at: Vec<usize>,
}

fn parse_steps(s: &str) -> Result<Option<usize>> {
    if s == "full" {
        return Ok(None);
    }
    let k: usize = s
        .parse()
        .map_err(|_| Error::Argument(format!("--steps takes a count or \"full\", got {s}")))?;
    Ok(Some(k))
}

pub fn sample(args: SampleArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let net = ckpt.rebuild_net()?;
    let sch = ckpt.rebuild_schedule()?;

    match parse_steps(&args.steps)? {
        Some(k) => {
            let spec = ChainSpec::evenly_spaced(k, sch.num_steps())?;
            if let Some(dir) = &args.snapshots {
                let snaps = shortcut_snapshot_run(&net, args.n, &spec, &sch, args.seed)?;
                let paths = save_snapshots(dir, SamplerKind::Shortcut(k), args.seed, &snaps)?;
                println!("wrote {} snapshots to {}", paths.len(), dir.display());
            }
            let set = sample_shortcut(&net, args.n, &spec, &sch, args.seed)?;
            save_points(&set, &args.out)?;
            println!(
                "wrote {} points to {} ({k}-step chain, seed {})",
                set.len(),
                args.out.display(),
                args.seed
            );
        }
        None => {
            let record = if args.snapshots.is_some() {
                if args.snapshot_at.is_empty() {
                    return Err(Error::Argument(
                        "--snapshots with --steps full needs --snapshot-at".into(),
                    ));
                }
                args.snapshot_at.clone()
            } else {
                Vec::new()
            };
            let (set, snaps) = sample_full_traced(&net, args.n, &sch, args.seed, &record)?;
            if let Some(dir) = &args.snapshots {
                let paths = save_snapshots(dir, SamplerKind::Full, args.seed, &snaps)?;
                println!("wrote {} snapshots to {}", paths.len(), dir.display());
            }
            save_points(&set, &args.out)?;
            println!(
                "wrote {} points to {} (full {}-step walk, seed {})",
                set.len(),
                args.out.display(),
                sch.num_steps(),
                args.seed
            );
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Reference points.
    #[arg(long)]
    pub real: PathBuf,
    /// Generated points.
    #[arg(long = "gen")]
    pub generated: PathBuf,
    /// Label the report: full | shortcut-<k>.
    #[arg(long)]
    pub sampler: Option<String>,
    /// Also report the energy distance between the two halves of the real
    /// set (the resolution limit of the comparison).
    #[arg(long)]
    pub noise_floor: bool,
    /// Write the JSON report here as well as stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    report: MetricReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_floor: Option<f64>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let real = load_points(&args.real)?;
    let generated = load_points(&args.generated)?;
    let sampler = args
        .sampler
        .as_deref()
        .map(str::parse::<SamplerKind>)
        .transpose()?;
    let report = evaluate(&generated, &real, sampler)?;
    let noise_floor = if args.noise_floor {
        Some(energy_noise_floor(&real)?)
    } else {
        None
    };
    let output = EvalOutput {
        report,
        noise_floor,
    };
    let json = serde_json::to_string_pretty(&output).expect("report serializes infallibly");
    println!("{json}");
    if let Some(path) = &args.out {
        std::fs::write(path, format!("{json}\n")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Point-set CSVs, one panel each.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output SVG path.
    #[arg(long)]
    pub out: PathBuf,
    /// Panels per row (defaults to everything on one row).
    #[arg(long)]
    pub cols: Option<usize>,
    /// Panel captions (comma separated; defaults to file stems).
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn plot(args: PlotArgs) -> Result<()> {
    if !args.labels.is_empty() && args.labels.len() != args.inputs.len() {
        return Err(Error::Argument(format!(
            "{} labels for {} inputs",
            args.labels.len(),
            args.inputs.len()
        )));
    }
    let mut panels = Vec::with_capacity(args.inputs.len());
    for (i, path) in args.inputs.iter().enumerate() {
        let set = load_points(path)?;
        let label = args.labels.get(i).cloned().unwrap_or_else(|| stem(path));
        panels.push(Panel {
            label,
            points: set.points,
        });
    }
    let cols = args.cols.unwrap_or(panels.len());
    let svg = render_grid(&panels, cols)?;
    write_svg(&args.out, &svg)?;
    println!("wrote {} panels to {}", panels.len(), args.out.display());
    Ok(())
}
